"""Case bundle loading and validation.

A case JSON file carries the defect class, the feasible-region bounds, the
donor-bone CT descriptors, and the evaluator section (the built-in synthetic
model or an external command). Validation reports every failed field at
once.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .bone import ContactParams, StimulusParams
from .design import DesignVector, FeasibleRegion
from .evaluator import ExternalEvaluator, SyntheticEvaluator, SyntheticModelConfig

__all__ = ["CaseError", "CaseBundle", "load_case", "save_case", "make_evaluator", "builtin_case_path"]

_BOUND_FIELDS = ("alpha_r", "alpha_p", "beta_r", "beta_p", "z")


class CaseError(ValueError):
    pass


@dataclass(frozen=True)
class CaseBundle:
    name: str
    defect_class: str  # "B" | "S" | "RB"
    region: FeasibleRegion
    synthetic_config: SyntheticModelConfig | None
    external_command: tuple | None
    registration_inputs: dict | None
    raw: dict

    @property
    def segment_count(self) -> int:
        return 2 if self.defect_class == "RB" else 1


def _synthetic_config(section: dict, donor: dict, dims: int, errors: list) -> SyntheticModelConfig | None:
    phi_star_raw = section.get("phi_star")
    if not isinstance(phi_star_raw, list) or len(phi_star_raw) != dims:
        errors.append(f"evaluator.phi_star: expected a {dims}-component list")
        return None
    kwargs = {}
    for key in (
        "misalignment_scale",
        "elements_per_interface",
        "peak_gap_mm",
        "bolus_window",
        "cortical_fraction",
        "stimulus_gain",
        "n_steps",
        "e_cortical_gpa",
        "e_cancellous_gpa",
        "load_scale",
    ):
        if key in section:
            val = section[key]
            kwargs[key] = tuple(val) if isinstance(val, list) else val
    if "contact" in section:
        kwargs["contact"] = ContactParams(**section["contact"])
    if "stimulus" in section:
        kwargs["stimulus"] = StimulusParams(**section["stimulus"])
    try:
        return SyntheticModelConfig(
            phi_star=DesignVector.from_array(phi_star_raw),
            cortical_hu=float(donor.get("cortical_hu", 1600.0)),
            cancellous_hu=float(donor.get("cancellous_hu", 350.0)),
            **kwargs,
        )
    except (TypeError, ValueError) as exc:
        errors.append(f"evaluator: {exc}")
        return None


def _parse_case(payload: dict, source: str) -> CaseBundle:
    errors = []
    name = payload.get("name")
    if not isinstance(name, str) or not name:
        errors.append("name: required non-empty string")
        name = "?"
    defect = payload.get("defect_class")
    if defect not in ("B", "S", "RB"):
        errors.append("defect_class: must be one of B, S, RB")
        defect = "B"
    two_segment = defect == "RB"
    dims = 6 if two_segment else 5

    bounds = payload.get("bounds")
    region = None
    if not isinstance(bounds, dict):
        errors.append("bounds: required object")
    else:
        missing = [f for f in _BOUND_FIELDS if f not in bounds]
        if two_segment and "r" not in bounds:
            missing.append("r")
        if not two_segment and "r" in bounds:
            errors.append("bounds.r: only allowed for RB cases")
        for f in missing:
            errors.append(f"bounds.{f}: required for defect class {defect}")
        if not missing and "bounds.r: only allowed for RB cases" not in errors:
            try:
                region = FeasibleRegion(
                    alpha_r=float(bounds["alpha_r"]),
                    alpha_p=float(bounds["alpha_p"]),
                    beta_r=float(bounds["beta_r"]),
                    beta_p=float(bounds["beta_p"]),
                    z=float(bounds["z"]),
                    r=float(bounds["r"]) if two_segment else None,
                    segment_count=2 if two_segment else 1,
                )
            except (TypeError, ValueError) as exc:
                errors.append(f"bounds: {exc}")

    donor = payload.get("donor")
    if not isinstance(donor, dict) or "cortical_hu" not in donor or "cancellous_hu" not in donor:
        errors.append("donor: required object with cortical_hu and cancellous_hu")
        donor = {}

    evaluator = payload.get("evaluator")
    synthetic = None
    external = None
    if not isinstance(evaluator, dict):
        errors.append("evaluator: required object")
    elif evaluator.get("type") == "synthetic":
        synthetic = _synthetic_config(evaluator, donor, dims, errors)
    elif evaluator.get("type") == "external":
        cmd = evaluator.get("command")
        if not isinstance(cmd, list) or not cmd:
            errors.append("evaluator.command: required non-empty list for external type")
        else:
            external = tuple(str(c) for c in cmd)
    else:
        errors.append("evaluator.type: must be 'synthetic' or 'external'")

    if errors:
        listing = "\n  - ".join(errors)
        raise CaseError(f"invalid case file {source}:\n  - {listing}")
    return CaseBundle(
        name=name,
        defect_class=defect,
        region=region,
        synthetic_config=synthetic,
        external_command=external,
        registration_inputs=payload.get("registration"),
        raw=payload,
    )


def load_case(path) -> CaseBundle:
    p = Path(path)
    if not p.exists():
        raise CaseError(f"case file not found: {p}")
    try:
        payload = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise CaseError(f"invalid case file {p}: {exc}") from exc
    return _parse_case(payload, str(p))


def save_case(path, bundle: CaseBundle) -> None:
    Path(path).write_text(json.dumps(bundle.raw, indent=2, sort_keys=True) + "\n")


def make_evaluator(bundle: CaseBundle, config: SyntheticModelConfig | None = None):
    """Evaluator for a case; ``config`` overrides the synthetic section."""
    if bundle.external_command is not None:
        return ExternalEvaluator(bundle.region, list(bundle.external_command))
    cfg = config if config is not None else bundle.synthetic_config
    if cfg is None:
        raise CaseError(f"case {bundle.name!r} has no usable evaluator")
    return SyntheticEvaluator(bundle.region, cfg)


def builtin_case_path(name: str) -> Path:
    """Path of one of the shipped case fixtures (generic1..3, patient1..3)."""
    res = resources.files("reconplan.data").joinpath("cases").joinpath(f"{name}.json")
    with resources.as_file(res) as p:
        if not p.exists():
            raise CaseError(f"no built-in case named {name!r}")
        return p
