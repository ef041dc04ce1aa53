"""Chewing-cycle averaging and the two planning objectives.

The primary score rewards total cycle-averaged apposition across the
resection interfaces and penalizes imbalance between them; the
safety-factor variant subtracts a squared-hinge penalty for time steps
where either side's worst-case safety factor drops below the desired one.
Scores are maximized; ``to_minimization`` flips the sign for the optimizer.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from typing import Mapping

import numpy as np

__all__ = [
    "ObjectiveError",
    "ObjectiveWeights",
    "cycle_average",
    "f_opt",
    "sf_penalty",
    "f_sf",
    "to_minimization",
]

SIDES = ("left", "right")


class ObjectiveError(ValueError):
    pass


@dataclass(frozen=True)
class ObjectiveWeights:
    """Objective weights; ``ordered_pairs`` doubles the imbalance penalty by
    counting each interface pair in both orders."""

    w1: float = 0.5
    w2: float = 0.5
    w_side: float = 0.5
    sf_desired: float = 1.0
    ordered_pairs: bool = False

    def __post_init__(self):
        for name in ("w1", "w2", "w_side", "sf_desired"):
            if getattr(self, name) < 0.0:
                raise ObjectiveError(f"{name} must be nonnegative")


def cycle_average(trace) -> float:
    """Arithmetic mean of a per-timestep trace."""
    arr = np.asarray(trace, dtype=float).ravel()
    if arr.size == 0:
        raise ObjectiveError("empty trace")
    return float(arr.mean())


def f_opt(averages: Mapping[str, float], weights: ObjectiveWeights = ObjectiveWeights()) -> float:
    """Apposition objective: W1 * sum of averages - W2 * pairwise imbalance.

    ``averages`` maps interface name to its cycle-averaged apposition (two
    interfaces for single-segment cases, three with a middle interface for
    two-segment ones). Each unordered pair is counted once unless
    ``ordered_pairs`` is set.
    """
    if not 2 <= len(averages) <= 3:
        raise ObjectiveError(f"expected 2 or 3 interfaces, got {len(averages)}")
    vals = [float(averages[k]) for k in sorted(averages)]
    imbalance = sum(abs(a - b) for a, b in combinations(vals, 2))
    if weights.ordered_pairs:
        imbalance *= 2.0
    return weights.w1 * sum(vals) - weights.w2 * imbalance


def sf_penalty(
    sf_worst: Mapping[str, np.ndarray], weights: ObjectiveWeights = ObjectiveWeights()
) -> float:
    """Mean squared-hinge penalty for sub-threshold worst-case safety factors.

    (1/n) * sum_i sum_side w_side * max(0, SF_desired - SF_worst)^2; an
    infinite safety factor (unloaded side) contributes zero.
    """
    if set(sf_worst) != set(SIDES):
        raise ObjectiveError(f"safety-factor traces must cover sides {SIDES}")
    left = np.asarray(sf_worst["left"], dtype=float).ravel()
    right = np.asarray(sf_worst["right"], dtype=float).ravel()
    if left.size != right.size:
        raise ObjectiveError("side traces differ in length")
    if left.size == 0:
        raise ObjectiveError("empty safety-factor traces")
    total = 0.0
    for trace in (left, right):
        shortfall = np.maximum(0.0, weights.sf_desired - trace)  # inf SF -> 0
        total += weights.w_side * float(np.sum(shortfall**2))
    return total / left.size


def f_sf(
    averages: Mapping[str, float],
    sf_worst: Mapping[str, np.ndarray],
    weights: ObjectiveWeights = ObjectiveWeights(),
) -> float:
    """Safety-factor-regularized objective: f_opt minus the penalty."""
    return f_opt(averages, weights) - sf_penalty(sf_worst, weights)


def to_minimization(score: float) -> float:
    """Loss for the minimizing optimizer: the negated score."""
    return -score
