"""CT-derived bone material formulas and mechanical stimulus metrics.

Units are mixed by convention of the source fields and are stated on every
function: CT attenuation in Hounsfield units (HU), apparent density in
g/cm^3, elastic moduli in GPa for bone and kPa for the contact layer,
stresses in MPa, strain energy density in mJ/mm^3 (== MPa), and the
density-normalized stimulus in mJ/g. All functions are pure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "BoneModelError",
    "RHO_MIN",
    "RHO_MAX",
    "HU_MIN",
    "HU_MAX",
    "CORTICAL_HU_THRESHOLD",
    "BoneMaterial",
    "ContactParams",
    "StimulusParams",
    "SymTensor3",
    "default_material",
    "hu_to_density",
    "classify_region",
    "contact_pressure",
    "sed",
    "stimulus_exceeds",
    "worst_safety_factor",
]

RHO_MIN = 0.7  # g/cm^3
RHO_MAX = 1.8
HU_MIN = 350.0
HU_MAX = 1700.0
CORTICAL_HU_THRESHOLD = 1000.0


class BoneModelError(ValueError):
    pass


@dataclass(frozen=True)
class BoneMaterial:
    """Region-wise bone material: density, stiffness and yield limit."""

    region: str  # "cortical" | "cancellous"
    rho: float  # g/cm^3
    youngs_gpa: float
    poisson: float
    yield_mpa: float

    def __post_init__(self):
        if self.region not in ("cortical", "cancellous"):
            raise BoneModelError(f"unknown region {self.region!r}")
        if not (RHO_MIN <= self.rho <= RHO_MAX):
            raise BoneModelError(f"density {self.rho} outside [{RHO_MIN}, {RHO_MAX}]")


def default_material(region: str, hu: float | None = None) -> BoneMaterial:
    """Default cortical/cancellous material, density mapped from ``hu`` if given."""
    if region == "cortical":
        rho = hu_to_density(hu) if hu is not None else RHO_MAX
        return BoneMaterial("cortical", rho, 13.7, 0.3, 100.0)
    if region == "cancellous":
        rho = hu_to_density(hu) if hu is not None else RHO_MIN
        return BoneMaterial("cancellous", rho, 1.1, 0.3, 5.0)
    raise BoneModelError(f"unknown region {region!r}")


@dataclass(frozen=True)
class ContactParams:
    """Elastic-foundation contact layer: modulus (kPa), Poisson ratio, thickness (mm)."""

    youngs_kpa: float = 30.0
    poisson: float = 0.3
    thickness_mm: float = 0.2

    def __post_init__(self):
        if not (0.0 < self.poisson < 0.5):
            raise BoneModelError("contact Poisson ratio must be in (0, 0.5)")
        if not self.thickness_mm > 0.0:
            raise BoneModelError("contact thickness must be positive")


@dataclass(frozen=True)
class StimulusParams:
    """Remodeling set-point (mJ/g) and lazy-zone half-width."""

    s0: float = 0.036
    delta: float = 0.1

    def __post_init__(self):
        if not self.s0 > 0.0:
            raise BoneModelError("S0 must be positive")
        if self.delta < 0.0:
            raise BoneModelError("delta must be nonnegative")

    @property
    def threshold(self) -> float:
        """Apposition threshold S0 * (1 + delta), mJ/g."""
        return self.s0 * (1.0 + self.delta)


@dataclass(frozen=True)
class SymTensor3:
    """Symmetric 3x3 tensor by its six independent components."""

    xx: float
    yy: float
    zz: float
    xy: float = 0.0
    yz: float = 0.0
    xz: float = 0.0

    def to_matrix(self) -> np.ndarray:
        return np.array(
            [
                [self.xx, self.xy, self.xz],
                [self.xy, self.yy, self.yz],
                [self.xz, self.yz, self.zz],
            ]
        )


def hu_to_density(hu: float) -> float:
    """Apparent density (g/cm^3) from a mean HU value.

    Linear between (350 HU, 0.7) and (1700 HU, 1.8); values outside the
    calibration interval are clamped to the endpoints.
    """
    if not math.isfinite(hu):
        raise BoneModelError("HU must be finite")
    rho = RHO_MIN + (RHO_MAX - RHO_MIN) * (hu - HU_MIN) / (HU_MAX - HU_MIN)
    return min(RHO_MAX, max(RHO_MIN, rho))


def classify_region(hu: float) -> str:
    """"cortical" for HU strictly above 1000, else "cancellous"."""
    if not math.isfinite(hu):
        raise BoneModelError("HU must be finite")
    return "cortical" if hu > CORTICAL_HU_THRESHOLD else "cancellous"


def contact_pressure(d_mm: float, params: ContactParams = ContactParams()) -> float:
    """Elastic-foundation contact pressure (kPa) at penetration depth ``d_mm``.

    p = -(1-nu) E / ((1+nu)(1-2nu)) * ln(1 - d/t); monotone increasing and
    singular as d approaches the layer thickness t, so d must satisfy
    0 <= d < t.
    """
    if d_mm < 0.0:
        raise BoneModelError("penetration depth must be nonnegative")
    if d_mm >= params.thickness_mm:
        raise BoneModelError("penetration depth must stay below the layer thickness")
    nu = params.poisson
    stiffness = (1.0 - nu) * params.youngs_kpa / ((1.0 + nu) * (1.0 - 2.0 * nu))
    return -stiffness * math.log1p(-d_mm / params.thickness_mm)


def sed(stress: SymTensor3, strain: SymTensor3) -> float:
    """Strain energy density 1/2 sum_ij sigma_ij eps_ij (mJ/mm^3 for MPa stress).

    The full-tensor double sum counts each off-diagonal pair twice.
    """
    return 0.5 * float(np.sum(stress.to_matrix() * strain.to_matrix()))


def stimulus_exceeds(
    sed_per_cm3: float, rho: float, params: StimulusParams = StimulusParams()
) -> bool:
    """True iff the density-normalized stimulus strictly exceeds the threshold.

    ``sed_per_cm3`` is the strain energy density in mJ/cm^3 (multiply a
    mJ/mm^3 value by 1000) so that dividing by ``rho`` in g/cm^3 yields the
    stimulus in mJ/g. Boundary equality does not count as apposition.
    """
    if not rho > 0.0:
        raise BoneModelError("density must be positive")
    return sed_per_cm3 / rho > params.threshold


def worst_safety_factor(
    maxp_cortical_mpa: float,
    maxp_cancellous_mpa: float,
    cortical: BoneMaterial | None = None,
    cancellous: BoneMaterial | None = None,
) -> float:
    """min(yield_cortical / maxP_cortical, yield_cancellous / maxP_cancellous).

    A branch with zero stress is unloaded and treated as +inf; if both are
    zero the result is +inf (never NaN).
    """
    if maxp_cortical_mpa < 0.0 or maxp_cancellous_mpa < 0.0:
        raise BoneModelError("maximum principal stresses must be nonnegative")
    y_cort = cortical.yield_mpa if cortical is not None else 100.0
    y_canc = cancellous.yield_mpa if cancellous is not None else 5.0
    sf_cort = y_cort / maxp_cortical_mpa if maxp_cortical_mpa > 0.0 else math.inf
    sf_canc = y_canc / maxp_cancellous_mpa if maxp_cancellous_mpa > 0.0 else math.inf
    return min(sf_cort, sf_canc)
