"""Patient-specific muscle and ligament parameter updates.

Muscle optimal/maximum lengths preserve the template's max-to-optimal ratio
at the post-registration length; maximum forces come from scan cross
sections via two linear PCSA regressions (averaged), scaled at 40 N/cm^2 and
split across branches with fixed proportions. The regression/ratio tables
ship as versioned JSON data files.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

__all__ = [
    "AnatomyError",
    "PcsaEstimate",
    "FORCE_PER_CM2",
    "LIGAMENT_SLACK_MM",
    "muscle_length_ratios",
    "pcsa_tables",
    "update_muscle",
    "pcsa_estimate",
    "max_force",
    "ligament_rest",
]

LIGAMENT_SLACK_MM = {"stm": 1.5, "sphm": 5.5}


class AnatomyError(ValueError):
    pass


@lru_cache(maxsize=None)
def _load(name: str) -> dict:
    with resources.files("reconplan.data").joinpath(name).open() as fh:
        return json.load(fh)


def muscle_length_ratios() -> dict:
    return _load("muscle_length_ratios.json")["ratios"]


def pcsa_tables() -> dict:
    return _load("pcsa_tables.json")


FORCE_PER_CM2 = 40.0  # N per cm^2 of PCSA; mirrored in the data file


def update_muscle(length_cur_mm: float, muscle_id: str) -> tuple:
    """(optimal length, maximum length) from the post-registration length.

    The optimal length is the current one; the maximum preserves the
    template ratio for the muscle.
    """
    if not length_cur_mm > 0.0:
        raise AnatomyError("current muscle length must be positive")
    ratios = muscle_length_ratios()
    key = muscle_id.upper()
    if key not in ratios:
        raise AnatomyError(f"unknown muscle {muscle_id!r}")
    return length_cur_mm, ratios[key] * length_cur_mm


@dataclass(frozen=True)
class PcsaEstimate:
    """Weber- and Buchner-regression PCSA estimates and their mean (cm^2)."""

    wpcs: float
    bpcs: float
    mean: float


def pcsa_estimate(scs_cm2: float, group: str) -> PcsaEstimate:
    """PCSA from a scan cross section via both regressions, averaged.

    Negative regression outputs (possible at small sections given the
    negative intercepts) are clamped to zero with a warning.
    """
    if scs_cm2 < 0.0:
        raise AnatomyError("scan cross section must be nonnegative")
    regs = pcsa_tables()["regressions"]
    key = group.lower()
    if key not in regs:
        raise AnatomyError(f"unknown muscle group {group!r}")
    values = {}
    for method in ("wpcs", "bpcs"):
        coef = regs[key][method]
        est = coef["slope"] * scs_cm2 + coef["intercept"]
        if est < 0.0:
            warnings.warn(
                f"{group} {method.upper()} regression gave {est:.3f} cm^2 at "
                f"SCS={scs_cm2:g}; clamped to 0",
                stacklevel=2,
            )
            est = 0.0
        values[method] = est
    return PcsaEstimate(values["wpcs"], values["bpcs"], 0.5 * (values["wpcs"] + values["bpcs"]))


def max_force(pcsa_cm2: float, group: str) -> dict:
    """Per-branch maximum forces (N) from a group PCSA.

    The group force is 40 N/cm^2 * PCSA; branches receive their fixed
    proportions, with the last branch taking the remainder so the partition
    is exact.
    """
    if pcsa_cm2 < 0.0:
        raise AnatomyError("PCSA must be nonnegative")
    allocation = pcsa_tables()["branch_allocation"]
    key = group.lower()
    if key not in allocation:
        raise AnatomyError(f"unknown muscle group {group!r}")
    total = FORCE_PER_CM2 * pcsa_cm2
    branches = list(allocation[key].items())
    forces = {name: prop * total for name, prop in branches[:-1]}
    forces[branches[-1][0]] = total - sum(forces.values())
    return forces


def ligament_rest(length_cur_mm: float, group: str) -> float:
    """Updated rest length: current length plus the family slack offset."""
    if not length_cur_mm > 0.0:
        raise AnatomyError("current ligament length must be positive")
    key = group.lower()
    if key not in LIGAMENT_SLACK_MM:
        raise AnatomyError(f"unknown ligament group {group!r}")
    return length_cur_mm + LIGAMENT_SLACK_MM[key]
