"""Reconstruction evaluators: the contract plus a deterministic synthetic model.

An evaluator scores one candidate design with per-interface, per-timestep
apposition fractions and per-side worst-case safety factors over a single
chewing cycle (62 uniform samples of 0.62 s by default). The built-in
synthetic model replaces an external musculoskeletal simulation with a fully
documented closed form so that every downstream result has an analytic or
grid-search oracle:

* Each interface carries ``elements_per_interface`` contact elements. A
  normalized chewing waveform ``w(t) = sin^2(pi t)``, boosted by 50% inside
  the bolus-engagement window, drives a nominal gap closure of
  ``peak_gap_mm * load_scale``.
* Misaligning the design away from the planted optimum ``phi_star`` opens a
  per-element gap ``m_e = (sum_c scale_c * |phi_c - phi*_c|) * (1 + 0.2 u_e)``
  where ``u_e`` in [0, 1) comes from a documented integer hash of the element
  index; the left interface reads the left-plane angles plus the vertical
  offset, the right interface the right-plane angles plus the vertical
  offset, and the middle interface (two-segment cases) the intermediate-cut
  offset plus the mean of the four angles (weighted by the mean angle scale).
* Element penetration ``d_e(t) = max(0, peak_gap * load_scale * w(t) - m_e)``
  is clipped to 0.999 of the contact-layer thickness, converted to a contact
  pressure, and turned into a stimulus via the linear-elastic proxy
  ``S = stimulus_gain * 1000 * p^2 / (2 E_region) / rho_region`` (mJ/g, with
  p and E in MPa and rho in g/cm^3). ``stimulus_gain`` stands in for the
  load magnification between the soft interface layer and the bone elements
  so that the default remodeling threshold is informative.
* Apposition at a timestep is the fraction of elements whose stimulus
  strictly exceeds the remodeling threshold; the per-side safety factor uses
  the side's maximum element pressure (as MPa, factor 1.0) per bone region.
  The middle interface contributes to apposition only.

The model uses no random numbers: identical designs give bit-identical
results, and independent candidates may be evaluated concurrently.

External evaluators are supported through a subprocess protocol: one JSON
request ``{"phi": {...}}`` on stdin, one JSON result (same schema as
:func:`result_to_json`) on stdout.
"""

from __future__ import annotations

import json
import subprocess
from dataclasses import dataclass, field, replace
from typing import Protocol

import numpy as np

from .bone import ContactParams, StimulusParams, hu_to_density
from .design import COMPONENT_NAMES, DesignVector, FeasibleRegion

__all__ = [
    "EvaluatorError",
    "InfeasibleDesignError",
    "EvaluationResult",
    "SyntheticModelConfig",
    "SyntheticEvaluator",
    "ExternalEvaluator",
    "Evaluator",
    "element_coefficient",
    "element_region",
    "synthetic_element_penetration",
    "synthetic_element_stimulus",
    "assemble_result",
    "result_to_json",
    "result_from_json",
]

BOLUS_BOOST = 0.5
HETEROGENEITY = 0.2
CLIP_FRACTION = 0.999

_INTERFACES = ("left", "right", "middle")
_SIDES = ("left", "right")


class EvaluatorError(ValueError):
    pass


class InfeasibleDesignError(EvaluatorError):
    pass


@dataclass(frozen=True, eq=False)
class EvaluationResult:
    """Per-interface apposition traces and per-side worst safety factors."""

    apposition: dict  # interface -> (n,) fractions in [0, 1]
    sf_worst: dict  # side -> (n,) safety factors, +inf allowed

    def __post_init__(self):
        appo = {k: np.asarray(v, dtype=float).ravel() for k, v in self.apposition.items()}
        sf = {k: np.asarray(v, dtype=float).ravel() for k, v in self.sf_worst.items()}
        if not appo or any(k not in _INTERFACES for k in appo):
            raise EvaluatorError(f"interfaces must be among {_INTERFACES}")
        if set(sf) != set(_SIDES):
            raise EvaluatorError(f"safety factors must cover sides {_SIDES}")
        lengths = {a.size for a in appo.values()} | {a.size for a in sf.values()}
        if len(lengths) != 1 or 0 in lengths:
            raise EvaluatorError("all traces must share one nonzero length")
        for name, a in appo.items():
            if np.any(a < 0.0) or np.any(a > 1.0):
                raise EvaluatorError(f"apposition[{name}] outside [0, 1]")
        for name, a in sf.items():
            if np.any(np.isnan(a)) or np.any(a < 0.0):
                raise EvaluatorError(f"sf_worst[{name}] must be nonnegative and not NaN")
        object.__setattr__(self, "apposition", appo)
        object.__setattr__(self, "sf_worst", sf)

    @property
    def n(self) -> int:
        return next(iter(self.apposition.values())).size

    def averages(self) -> dict:
        """Cycle-averaged apposition per interface."""
        return {k: float(v.mean()) for k, v in self.apposition.items()}


class Evaluator(Protocol):
    region: FeasibleRegion

    def evaluate(self, phi: DesignVector) -> EvaluationResult: ...


@dataclass(frozen=True)
class SyntheticModelConfig:
    """Closed-form response model parameters (all documented above).

    ``misalignment_scale`` has one entry per design component, mm of gap per
    degree (angles) or per mm (lengths). ``rho_cortical``/``rho_cancellous``
    override the HU->density mapping when set; ``load_scale`` scales the
    driving gap closure (a maximum-muscle-force proxy) and
    ``muscle_length_scale`` is accepted for protocol compatibility but has no
    effect on this model.
    """

    phi_star: DesignVector
    misalignment_scale: tuple = (0.002, 0.002, 0.002, 0.002, 0.01, 0.02)
    elements_per_interface: int = 200
    peak_gap_mm: float = 0.15
    bolus_window: tuple = (0.55, 0.80)
    cortical_hu: float = 1600.0
    cancellous_hu: float = 350.0
    cortical_fraction: float = 0.5
    stimulus_gain: float = 1500.0
    n_steps: int = 62
    contact: ContactParams = field(default_factory=ContactParams)
    stimulus: StimulusParams = field(default_factory=StimulusParams)
    e_cortical_gpa: float = 13.7
    e_cancellous_gpa: float = 1.1
    rho_cortical: float | None = None
    rho_cancellous: float | None = None
    yield_cortical_mpa: float = 100.0
    yield_cancellous_mpa: float = 5.0
    load_scale: float = 1.0
    muscle_length_scale: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.peak_gap_mm < self.contact.thickness_mm:
            raise EvaluatorError("peak gap must lie in (0, contact thickness)")
        t_a, t_b = self.bolus_window
        if not 0.0 <= t_a <= t_b <= 1.0:
            raise EvaluatorError("bolus window must be within [0, 1]")
        if self.elements_per_interface < 1 or self.n_steps < 1:
            raise EvaluatorError("element and timestep counts must be positive")
        if len(self.misalignment_scale) < self.phi_star.dims:
            raise EvaluatorError("misalignment_scale must cover every design component")
        if not 0.0 <= self.cortical_fraction <= 1.0:
            raise EvaluatorError("cortical_fraction must be in [0, 1]")

    def effective_rho(self, region: str) -> float:
        if region == "cortical":
            return self.rho_cortical if self.rho_cortical is not None else hu_to_density(self.cortical_hu)
        return self.rho_cancellous if self.rho_cancellous is not None else hu_to_density(self.cancellous_hu)


_MASK64 = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    z = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def element_coefficient(e: int) -> float:
    """Deterministic per-element coefficient u_e in [0, 1) (splitmix64 of e)."""
    return _splitmix64(e) / 2.0**64


def element_region(e: int, cortical_fraction: float = 0.5) -> str:
    """Deterministic region label for element e (salted splitmix64 hash)."""
    return "cortical" if _splitmix64(e ^ 0x5851F42D4C957F2D) / 2.0**64 < cortical_fraction else "cancellous"


def _waveform(t_norm, config: SyntheticModelConfig):
    t = np.asarray(t_norm, dtype=float)
    w = np.sin(np.pi * t) ** 2
    t_a, t_b = config.bolus_window
    return w * (1.0 + BOLUS_BOOST * ((t >= t_a) & (t <= t_b)))


def _interface_misalignment(config: SyntheticModelConfig, phi: DesignVector) -> dict:
    delta = np.abs(phi.to_array() - config.phi_star.to_array())
    s = np.asarray(config.misalignment_scale, dtype=float)
    out = {
        "left": s[0] * delta[0] + s[1] * delta[1] + s[4] * delta[4],
        "right": s[2] * delta[2] + s[3] * delta[3] + s[4] * delta[4],
    }
    if phi.dims == 6:
        mean_angle_gap = abs(phi.angles().mean() - config.phi_star.angles().mean())
        out["middle"] = s[5] * delta[5] + s[:4].mean() * mean_angle_gap
    return out


def synthetic_element_penetration(
    config: SyntheticModelConfig, phi: DesignVector, e: int, t_norm: float
) -> float:
    """Penetration depth (mm) of element ``e`` of the left interface at ``t_norm``.

    Exposes the model's closed form for one element; :class:`SyntheticEvaluator`
    applies the same form per interface. ``t_norm`` must be in [0, 1].
    """
    if not 0.0 <= t_norm <= 1.0:
        raise EvaluatorError("t_norm must be in [0, 1]")
    m_e = _interface_misalignment(config, phi)["left"] * (
        1.0 + HETEROGENEITY * element_coefficient(e)
    )
    d = max(0.0, config.peak_gap_mm * config.load_scale * float(_waveform(t_norm, config)) - m_e)
    return min(d, CLIP_FRACTION * config.contact.thickness_mm)


def _pressure_kpa(d, contact: ContactParams):
    nu = contact.poisson
    stiffness = (1.0 - nu) * contact.youngs_kpa / ((1.0 + nu) * (1.0 - 2.0 * nu))
    return -stiffness * np.log1p(-np.asarray(d, dtype=float) / contact.thickness_mm)


def synthetic_element_stimulus(
    config: SyntheticModelConfig, phi: DesignVector, e: int, t_norm: float
) -> tuple:
    """(stimulus mJ/g, max principal stress MPa, region) for one element.

    The stimulus uses the documented proxy S = gain * 1000 * p^2 / (2 E) / rho
    with p = contact pressure in MPa and E the region modulus in MPa; the
    reported stress is the contact pressure itself (factor 1.0).
    """
    d = synthetic_element_penetration(config, phi, e, t_norm)
    region = element_region(e, config.cortical_fraction)
    p_mpa = float(_pressure_kpa(d, config.contact)) / 1000.0
    e_mpa = 1000.0 * (config.e_cortical_gpa if region == "cortical" else config.e_cancellous_gpa)
    sed_mj_mm3 = p_mpa**2 / (2.0 * e_mpa)
    s = config.stimulus_gain * 1000.0 * sed_mj_mm3 / config.effective_rho(region)
    return s, p_mpa, region


class SyntheticEvaluator:
    """Deterministic built-in evaluator over a feasible region."""

    def __init__(self, region: FeasibleRegion, config: SyntheticModelConfig):
        if config.phi_star.dims != region.dims:
            raise EvaluatorError("planted optimum arity does not match the region")
        if not region.contains(config.phi_star):
            raise InfeasibleDesignError("planted optimum lies outside the feasible region")
        self.region = region
        self.config = config
        m = config.elements_per_interface
        self._u = np.array([element_coefficient(e) for e in range(m)])
        self._cortical = np.array(
            [element_region(e, config.cortical_fraction) == "cortical" for e in range(m)]
        )
        self._t = np.linspace(0.0, 1.0, config.n_steps)

    def _interfaces(self) -> tuple:
        return ("left", "right", "middle") if self.region.dims == 6 else ("left", "right")

    def _penetration(self, phi: DesignVector, interface: str) -> np.ndarray:
        """(elements, n_steps) penetration depths for one interface."""
        cfg = self.config
        m_e = _interface_misalignment(cfg, phi)[interface] * (1.0 + HETEROGENEITY * self._u)
        drive = cfg.peak_gap_mm * cfg.load_scale * _waveform(self._t, cfg)
        d = np.maximum(0.0, drive[None, :] - m_e[:, None])
        return np.minimum(d, CLIP_FRACTION * cfg.contact.thickness_mm)

    def element_stimuli(self, phi: DesignVector) -> dict:
        """interface -> (elements, n_steps) stimulus arrays (mJ/g)."""
        cfg = self.config
        e_mpa = np.where(self._cortical, cfg.e_cortical_gpa, cfg.e_cancellous_gpa) * 1000.0
        rho = np.where(
            self._cortical, cfg.effective_rho("cortical"), cfg.effective_rho("cancellous")
        )
        out = {}
        for interface in self._interfaces():
            p_mpa = _pressure_kpa(self._penetration(phi, interface), cfg.contact) / 1000.0
            out[interface] = cfg.stimulus_gain * 1000.0 * p_mpa**2 / (2.0 * e_mpa[:, None]) / rho[:, None]
        return out

    def element_pressures(self, phi: DesignVector) -> dict:
        """interface -> (elements, n_steps) contact pressures (MPa)."""
        return {
            interface: _pressure_kpa(self._penetration(phi, interface), self.config.contact) / 1000.0
            for interface in self._interfaces()
        }

    def evaluate(self, phi: DesignVector) -> EvaluationResult:
        if phi.dims != self.region.dims:
            raise EvaluatorError("design arity does not match the region")
        if not self.region.contains(phi):
            raise InfeasibleDesignError("design outside the feasible region")
        cfg = self.config
        return assemble_result(
            self.element_stimuli(phi),
            self.element_pressures(phi),
            self._cortical,
            cfg.stimulus,
            cfg.yield_cortical_mpa,
            cfg.yield_cancellous_mpa,
        )


def assemble_result(
    stimuli: dict,
    pressures_mpa: dict,
    cortical_mask,
    stimulus: StimulusParams = StimulusParams(),
    yield_cortical_mpa: float = 100.0,
    yield_cancellous_mpa: float = 5.0,
) -> EvaluationResult:
    """Count threshold exceedances into apposition fractions and side SFs.

    ``stimuli`` and ``pressures_mpa`` map interface names to (elements,
    timesteps) arrays; apposition at each step is the fraction of elements
    whose stimulus strictly exceeds the remodeling threshold. The left/right
    interfaces double as the penalty sides: each side's worst safety factor
    takes the minimum of yield-over-max-pressure across its cortical and
    cancellous element groups, with unloaded groups (zero pressure or no
    elements) treated as +inf.
    """
    cortical = np.asarray(cortical_mask, dtype=bool)
    apposition = {}
    for interface, s in stimuli.items():
        arr = np.atleast_2d(np.asarray(s, dtype=float))
        if arr.shape[0] == 0:
            raise EvaluatorError(f"interface {interface!r} has no elements")
        apposition[interface] = (arr > stimulus.threshold).mean(axis=0)
    sf_worst = {}
    for side in _SIDES:
        if side not in pressures_mpa:
            raise EvaluatorError(f"missing pressures for side {side!r}")
        p = np.atleast_2d(np.asarray(pressures_mpa[side], dtype=float))
        n = p.shape[1]
        maxp_cort = p[cortical].max(axis=0) if cortical.any() else np.zeros(n)
        maxp_canc = p[~cortical].max(axis=0) if (~cortical).any() else np.zeros(n)
        with np.errstate(divide="ignore"):
            sf_cort = np.where(maxp_cort > 0.0, yield_cortical_mpa / maxp_cort, np.inf)
            sf_canc = np.where(maxp_canc > 0.0, yield_cancellous_mpa / maxp_canc, np.inf)
        sf_worst[side] = np.minimum(sf_cort, sf_canc)
    return EvaluationResult(apposition, sf_worst)


def result_to_json(result: EvaluationResult) -> str:
    """Serialize a result; +inf safety factors become the string "inf"."""

    def encode(arr):
        return ["inf" if np.isinf(x) else float(x) for x in arr]

    return json.dumps(
        {
            "apposition": {k: [float(x) for x in v] for k, v in result.apposition.items()},
            "sf_worst": {k: encode(v) for k, v in result.sf_worst.items()},
        }
    )


def result_from_json(text: str) -> EvaluationResult:
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise EvaluatorError(f"malformed evaluator response: {exc}") from exc

    def decode(values):
        return [np.inf if v == "inf" else float(v) for v in values]

    try:
        return EvaluationResult(
            {k: np.array(v, dtype=float) for k, v in payload["apposition"].items()},
            {k: np.array(decode(v)) for k, v in payload["sf_worst"].items()},
        )
    except (KeyError, TypeError) as exc:
        raise EvaluatorError(f"evaluator response missing fields: {exc}") from exc


def phi_to_json(phi: DesignVector) -> str:
    payload = {name: getattr(phi, name) for name in COMPONENT_NAMES if getattr(phi, name) is not None}
    return json.dumps({"phi": payload})


def phi_from_json(text: str) -> DesignVector:
    payload = json.loads(text)["phi"]
    return DesignVector(
        theta_lr=float(payload["theta_lr"]),
        theta_lp=float(payload["theta_lp"]),
        theta_rr=float(payload["theta_rr"]),
        theta_rp=float(payload["theta_rp"]),
        l_z=float(payload["l_z"]),
        l_rdp=float(payload["l_rdp"]) if "l_rdp" in payload else None,
    )


class ExternalEvaluator:
    """Evaluator backed by a subprocess speaking the JSON protocol.

    For every evaluation the command is run once with ``{"phi": {...}}`` on
    stdin and must print a result JSON document on stdout.
    """

    def __init__(self, region: FeasibleRegion, command: list, timeout: float = 600.0):
        self.region = region
        self.command = list(command)
        self.timeout = timeout

    def evaluate(self, phi: DesignVector) -> EvaluationResult:
        if not self.region.contains(phi):
            raise InfeasibleDesignError("design outside the feasible region")
        proc = subprocess.run(
            self.command,
            input=phi_to_json(phi),
            capture_output=True,
            text=True,
            timeout=self.timeout,
        )
        if proc.returncode != 0:
            raise EvaluatorError(
                f"external evaluator exited with {proc.returncode}: {proc.stderr.strip()}"
            )
        return result_from_json(proc.stdout)


def perturbed(config: SyntheticModelConfig, **overrides) -> SyntheticModelConfig:
    """Convenience wrapper around dataclasses.replace for config overrides."""
    return replace(config, **overrides)
