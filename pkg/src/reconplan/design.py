"""Surgical design vector and per-case feasible region.

A design is four cut-plane angles (degrees), a vertical donor offset (mm)
and, for two-segment reconstructions only, an intermediate-cut offset (mm).
The feasible region is a symmetric box around the zero (baseline) design;
normalization maps each bound to +/-100 for reporting.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["DesignError", "DesignVector", "FeasibleRegion", "COMPONENT_NAMES"]

COMPONENT_NAMES = ("theta_lr", "theta_lp", "theta_rr", "theta_rp", "l_z", "l_rdp")


class DesignError(ValueError):
    pass


@dataclass(frozen=True)
class DesignVector:
    """Cut-plane angles (deg), donor vertical offset and RDP offset (mm).

    ``l_rdp`` is present exactly for two-segment (ramus-body class) cases.
    """

    theta_lr: float
    theta_lp: float
    theta_rr: float
    theta_rp: float
    l_z: float
    l_rdp: float | None = None

    @property
    def dims(self) -> int:
        return 5 if self.l_rdp is None else 6

    def to_array(self) -> np.ndarray:
        vals = [self.theta_lr, self.theta_lp, self.theta_rr, self.theta_rp, self.l_z]
        if self.l_rdp is not None:
            vals.append(self.l_rdp)
        return np.array(vals, dtype=float)

    @classmethod
    def from_array(cls, arr) -> "DesignVector":
        a = np.asarray(arr, dtype=float).ravel()
        if a.size == 5:
            return cls(*a)
        if a.size == 6:
            return cls(*a[:5], l_rdp=float(a[5]))
        raise DesignError(f"design vector must have 5 or 6 components, got {a.size}")

    def angles(self) -> np.ndarray:
        return np.array([self.theta_lr, self.theta_lp, self.theta_rr, self.theta_rp])


@dataclass(frozen=True)
class FeasibleRegion:
    """Symmetric box bounds for one case; all range parameters are half-widths."""

    alpha_r: float
    alpha_p: float
    beta_r: float
    beta_p: float
    z: float
    r: float | None = None
    segment_count: int = 1

    def __post_init__(self):
        if self.segment_count not in (1, 2):
            raise DesignError("segment_count must be 1 or 2")
        if (self.r is not None) != (self.segment_count == 2):
            raise DesignError("r must be present iff segment_count == 2")
        for name in ("alpha_r", "alpha_p", "beta_r", "beta_p", "z"):
            if not getattr(self, name) > 0:
                raise DesignError(f"range parameter {name} must be positive")
        if self.r is not None and not self.r > 0:
            raise DesignError("range parameter r must be positive")

    @property
    def dims(self) -> int:
        return 5 if self.segment_count == 1 else 6

    def half_widths(self) -> np.ndarray:
        hw = [self.alpha_r, self.alpha_p, self.beta_r, self.beta_p, self.z]
        if self.segment_count == 2:
            hw.append(self.r)
        return np.array(hw, dtype=float)

    def bounds(self) -> np.ndarray:
        """(dims, 2) array of [lower, upper] per component."""
        hw = self.half_widths()
        return np.stack([-hw, hw], axis=1)

    def baseline(self) -> DesignVector:
        return DesignVector.from_array(np.zeros(self.dims))

    def _check_arity(self, phi: DesignVector) -> np.ndarray:
        if phi.dims != self.dims:
            raise DesignError(
                f"design has {phi.dims} components but region expects {self.dims}"
            )
        return phi.to_array()

    def contains(self, phi: DesignVector) -> bool:
        """True iff every component is within its symmetric bound (inclusive)."""
        a = self._check_arity(phi)
        return bool(np.all(np.abs(a) <= self.half_widths()))

    def normalize(self, phi: DesignVector) -> np.ndarray:
        """Affine map of a feasible design onto [-100, 100] per component."""
        a = self._check_arity(phi)
        if not self.contains(phi):
            raise DesignError("design outside the feasible region")
        return 100.0 * a / self.half_widths()

    def denormalize(self, normalized) -> DesignVector:
        """Inverse of :meth:`normalize`; round-trips exactly."""
        v = np.asarray(normalized, dtype=float).ravel()
        if v.size != self.dims:
            raise DesignError(
                f"normalized vector has {v.size} components, expected {self.dims}"
            )
        if np.any(np.abs(v) > 100.0):
            raise DesignError("normalized components must lie in [-100, 100]")
        return DesignVector.from_array(v * self.half_widths() / 100.0)

    def from_unit_cube(self, u) -> DesignVector:
        """Map a point of [0,1)^dims linearly onto the region."""
        u = np.asarray(u, dtype=float).ravel()
        if u.size != self.dims:
            raise DesignError(f"unit point has {u.size} components, expected {self.dims}")
        hw = self.half_widths()
        return DesignVector.from_array((2.0 * u - 1.0) * hw)
