"""Sensitivity harness, longitudinal validation metrics, and trace summaries.

Voxel masks are stored as a JSON header (dims, spacing, origin) next to a
raw 0/1 byte file for transparency. Grids are indexed (ix, iy, iz) with the
flat order ix fastest; voxel i sits at origin + i * spacing (the origin is
the center of voxel (0, 0, 0)).
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .design import DesignVector
from .evaluator import SyntheticModelConfig
from .objective import ObjectiveWeights, f_opt

__all__ = [
    "AnalysisError",
    "VoxelMask",
    "GridSpec",
    "SensitivitySpec",
    "SENSITIVITY_PARAMETERS",
    "dice",
    "select_apposition_elements",
    "splat_field",
    "splat_to_grid",
    "cortical_fraction",
    "perturb_config",
    "sensitivity_run",
    "convergence_summary",
    "save_mask",
    "load_mask",
]


class AnalysisError(ValueError):
    pass


@dataclass(frozen=True)
class GridSpec:
    """Voxel lattice: counts per axis, isotropic or per-axis spacing (mm), origin."""

    dims: tuple
    spacing: tuple
    origin: tuple

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = self.spacing if hasattr(self.spacing, "__len__") else (self.spacing,) * 3
        spacing = tuple(float(s) for s in spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(dims) != 3 or any(d < 1 for d in dims):
            raise AnalysisError("dims must be three positive counts")
        if len(spacing) != 3 or any(s <= 0 for s in spacing):
            raise AnalysisError("spacing must be positive")
        if len(origin) != 3:
            raise AnalysisError("origin must be a 3-vector")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def n_voxels(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    def axis_coordinates(self) -> tuple:
        return tuple(
            self.origin[k] + self.spacing[k] * np.arange(self.dims[k]) for k in range(3)
        )


@dataclass(frozen=True, eq=False)
class VoxelMask:
    """Binary voxel mask over a :class:`GridSpec`; values flat, ix fastest."""

    grid: GridSpec
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values).astype(np.uint8).ravel()
        if vals.size != self.grid.n_voxels:
            raise AnalysisError(
                f"value count {vals.size} != grid size {self.grid.n_voxels}"
            )
        if np.any(vals > 1):
            raise AnalysisError("mask values must be 0 or 1")
        object.__setattr__(self, "values", vals)

    def count(self) -> int:
        return int(self.values.sum())


def dice(a: VoxelMask, b: VoxelMask) -> float:
    """Dice overlap 2|A ^ B| / (|A| + |B|); two empty masks give 1.0."""
    if a.grid != b.grid:
        raise AnalysisError("masks live on different grids")
    total = a.count() + b.count()
    if total == 0:
        warnings.warn("Dice of two empty masks defined as 1.0", stacklevel=2)
        return 1.0
    inter = int(np.sum((a.values == 1) & (b.values == 1)))
    return 2.0 * inter / total


def select_apposition_elements(stimuli, threshold: float, cort_pct: float) -> np.ndarray:
    """Indices of the top ceil(cort_pct * M) elements by sustained stimulus.

    ``stimuli`` is an (elements, timesteps) history; elements are ranked by
    the number of timesteps strictly above ``threshold``, then by mean
    stimulus, then by lowest index.
    """
    s = np.atleast_2d(np.asarray(stimuli, dtype=float))
    if not 0.0 <= cort_pct <= 1.0:
        raise AnalysisError("cort_pct must be in [0, 1]")
    m = len(s)
    k = math.ceil(cort_pct * m)
    if k == 0:
        return np.array([], dtype=np.int64)
    counts = (s > threshold).sum(axis=1)
    means = s.mean(axis=1)
    order = sorted(range(m), key=lambda e: (-counts[e], -means[e], e))
    return np.array(order[:k], dtype=np.int64)


def splat_field(points, grid: GridSpec, sigma: float) -> np.ndarray:
    """Sum of unit-amplitude isotropic Gaussians sampled at voxel centers."""
    if not sigma > 0.0:
        raise AnalysisError("sigma must be positive")
    field = np.zeros(grid.dims, dtype=float)
    if len(points) == 0:
        return field
    ax = grid.axis_coordinates()
    for p in np.atleast_2d(np.asarray(points, dtype=float)):
        gx = np.exp(-((ax[0] - p[0]) ** 2) / (2.0 * sigma**2))
        gy = np.exp(-((ax[1] - p[1]) ** 2) / (2.0 * sigma**2))
        gz = np.exp(-((ax[2] - p[2]) ** 2) / (2.0 * sigma**2))
        field += np.einsum("i,j,k->ijk", gx, gy, gz)
    return field


def splat_to_grid(points, grid: GridSpec, sigma: float, threshold: float) -> VoxelMask:
    """Gaussian-splat points onto the grid and binarize at ``threshold``."""
    field = splat_field(points, grid, sigma)
    # Flatten with ix fastest: transpose (ix, iy, iz) -> (iz, iy, ix) then ravel.
    return VoxelMask(grid, (field > threshold).transpose(2, 1, 0).ravel())


def cortical_fraction(hu_values, threshold: float = 1000.0) -> float:
    """Fraction of grid values strictly above the cortical HU threshold."""
    vals = np.asarray(hu_values, dtype=float).ravel()
    if vals.size == 0:
        raise AnalysisError("empty HU grid")
    return float(np.mean(vals > threshold))


SENSITIVITY_PARAMETERS = (
    "rho_cortical",
    "rho_cancellous",
    "e_cortical",
    "e_cancellous",
    "contact_e",
    "contact_nu",
    "t_contact",
    "s0",
    "muscle_length_scale",
    "muscle_force_scale",
    "yield_scale",
)


@dataclass(frozen=True)
class SensitivitySpec:
    """Perturbation protocol: parameters x {-p, +p}, each repeated."""

    parameters: tuple = SENSITIVITY_PARAMETERS
    perturbation: float = 0.10
    repeats: int = 5

    def __post_init__(self):
        unknown = [p for p in self.parameters if p not in SENSITIVITY_PARAMETERS]
        if unknown:
            raise AnalysisError(f"unknown sensitivity parameters: {unknown}")
        if self.repeats < 1:
            raise AnalysisError("repeats must be positive")


def perturb_config(config: SyntheticModelConfig, parameter: str, factor: float) -> SyntheticModelConfig:
    """Return a config with one named physical parameter scaled by ``factor``.

    Density overrides are resolved from the HU mapping before scaling so a
    factor of exactly 1.0 reproduces the baseline bit-for-bit.
    ``muscle_length_scale`` is carried but has no effect on the synthetic
    model; ``muscle_force_scale`` scales the driving load, ``yield_scale``
    scales both yield limits.
    """
    if parameter == "rho_cortical":
        return replace(config, rho_cortical=config.effective_rho("cortical") * factor)
    if parameter == "rho_cancellous":
        return replace(config, rho_cancellous=config.effective_rho("cancellous") * factor)
    if parameter == "e_cortical":
        return replace(config, e_cortical_gpa=config.e_cortical_gpa * factor)
    if parameter == "e_cancellous":
        return replace(config, e_cancellous_gpa=config.e_cancellous_gpa * factor)
    if parameter == "contact_e":
        return replace(config, contact=replace(config.contact, youngs_kpa=config.contact.youngs_kpa * factor))
    if parameter == "contact_nu":
        return replace(config, contact=replace(config.contact, poisson=config.contact.poisson * factor))
    if parameter == "t_contact":
        return replace(config, contact=replace(config.contact, thickness_mm=config.contact.thickness_mm * factor))
    if parameter == "s0":
        return replace(config, stimulus=replace(config.stimulus, s0=config.stimulus.s0 * factor))
    if parameter == "muscle_length_scale":
        return replace(config, muscle_length_scale=config.muscle_length_scale * factor)
    if parameter == "muscle_force_scale":
        return replace(config, load_scale=config.load_scale * factor)
    if parameter == "yield_scale":
        return replace(
            config,
            yield_cortical_mpa=config.yield_cortical_mpa * factor,
            yield_cancellous_mpa=config.yield_cancellous_mpa * factor,
        )
    raise AnalysisError(f"unknown sensitivity parameter {parameter!r}")


@dataclass(frozen=True)
class SensitivityCell:
    case: str
    parameter: str
    direction: str  # "-" | "+"
    factor: float
    mean_relative_change: float | None
    f_values: tuple
    n_evaluations: int
    error: str | None = None


def sensitivity_run(
    case_name: str,
    make_evaluator,
    base_config: SyntheticModelConfig,
    baseline_phi: DesignVector,
    spec: SensitivitySpec = SensitivitySpec(),
    weights: ObjectiveWeights = ObjectiveWeights(),
) -> list:
    """Perturb each named parameter both ways and re-score the baseline design.

    ``make_evaluator`` maps a config to an evaluator. Each cell averages the
    relative change in the apposition objective over ``spec.repeats``
    repeated evaluations (identical for the deterministic built-in model,
    kept for protocol parity with stochastic evaluators). Evaluator failures
    are recorded in the cell and the run continues. Returns
    2 * len(parameters) cells; total evaluations = cells * repeats.
    """
    base_eval = make_evaluator(base_config)
    f_base = f_opt(base_eval.evaluate(baseline_phi).averages(), weights)
    denom = abs(f_base) if abs(f_base) > 1e-12 else 1.0

    cells = []
    for parameter in spec.parameters:
        for sign, direction in ((-1.0, "-"), (1.0, "+")):
            factor = 1.0 + sign * spec.perturbation
            try:
                evaluator = make_evaluator(perturb_config(base_config, parameter, factor))
                f_vals = tuple(
                    f_opt(evaluator.evaluate(baseline_phi).averages(), weights)
                    for _ in range(spec.repeats)
                )
                rel = float(np.mean([(f - f_base) / denom for f in f_vals]))
                cells.append(
                    SensitivityCell(case_name, parameter, direction, factor, rel, f_vals, spec.repeats)
                )
            except Exception as exc:
                cells.append(
                    SensitivityCell(
                        case_name, parameter, direction, factor, None, (), spec.repeats,
                        error=f"{type(exc).__name__}: {exc}",
                    )
                )
    return cells


def convergence_summary(curves) -> dict:
    """Aligned per-iteration mean/std of best-so-far curves.

    Shorter curves are padded with their last value so trials of unequal
    length can still be aggregated.
    """
    arrays = [np.asarray(c, dtype=float).ravel() for c in curves]
    if not arrays or any(a.size == 0 for a in arrays):
        raise AnalysisError("need at least one non-empty curve")
    n = max(a.size for a in arrays)
    padded = np.stack([np.concatenate([a, np.full(n - a.size, a[-1])]) for a in arrays])
    return {
        "iterations": list(range(1, n + 1)),
        "mean": padded.mean(axis=0).tolist(),
        "std": padded.std(axis=0).tolist(),
    }


def save_mask(json_path, mask: VoxelMask) -> None:
    """Write the JSON header and the adjacent raw 0/1 byte file."""
    path = Path(json_path)
    bin_path = path.with_suffix(".bin")
    header = {
        "dims": list(mask.grid.dims),
        "spacing": list(mask.grid.spacing),
        "origin": list(mask.grid.origin),
        "values_file": bin_path.name,
    }
    bin_path.write_bytes(mask.values.tobytes())
    path.write_text(json.dumps(header, indent=2) + "\n")


def load_mask(json_path) -> VoxelMask:
    path = Path(json_path)
    header = json.loads(path.read_text())
    try:
        grid = GridSpec(tuple(header["dims"]), tuple(header["spacing"]), tuple(header["origin"]))
        raw = (path.parent / header["values_file"]).read_bytes()
    except KeyError as exc:
        raise AnalysisError(f"mask header missing field {exc}") from exc
    return VoxelMask(grid, np.frombuffer(raw, dtype=np.uint8))
