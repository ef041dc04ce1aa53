"""Bayesian-optimization driver for the surgical design search.

One run per seed: a deterministic Sobol' initialization (skip 1000, then
every 101st element) mapped linearly onto the feasible region, followed by
sequential expected-improvement acquisition with an exploration safeguard
that multiplicatively inflates the kernel whenever the posterior uncertainty
at the proposal drops below ``t_sigma`` times the fitted noise level.

Everything is deterministic given the seed list: the Sobol' phase is shared
across seeds, hyperparameter fitting uses fixed documented starts, and the
acquisition candidate stream is derived from (seed, iteration). Seeds are
independent and may execute concurrently.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf
from scipy.stats import qmc

from .design import DesignVector, FeasibleRegion
from .evaluator import Evaluator
from .gp import GpModel, Predictor, fit_gp, inflate_kernel
from .objective import ObjectiveWeights, f_opt, f_sf, to_minimization

__all__ = [
    "BoError",
    "BoConfig",
    "TraceRecord",
    "SeedTrace",
    "BoResult",
    "sobol_points",
    "ei_plus",
    "propose_next",
    "safeguard_check",
    "run",
]

# Grid step used to displace duplicate proposals: 1/1000 of each range.
_DUPLICATE_STEP = 1e-3


class BoError(ValueError):
    pass


@dataclass(frozen=True)
class BoConfig:
    """Driver settings; ``t_sigma`` defaults to 0.5 for one-segment regions
    and 0.6 for two-segment ones when left unset."""

    n_sobol: int = 25
    sobol_skip: int = 1000
    sobol_leap: int = 100
    n_iterations: int = 50
    t_sigma: float | None = None
    seeds: tuple = (0, 1, 2, 3, 4)
    n_candidates: int = 5000
    n_refine: int = 20
    inflation_factor: float = 1.5
    max_inflations: int = 5
    duplicate_tol: float = 1e-9
    warm_start: tuple = ()
    fit_seed: int = 0

    def __post_init__(self):
        if min(self.n_sobol, self.n_iterations, self.n_candidates, self.n_refine) < 1:
            raise BoError("counts must be positive")
        if self.t_sigma is not None and not self.t_sigma > 0.0:
            raise BoError("t_sigma must be positive")

    def resolved_t_sigma(self, region: FeasibleRegion) -> float:
        if self.t_sigma is not None:
            return self.t_sigma
        return 0.5 if region.segment_count == 1 else 0.6


def sobol_points(dims: int, config: BoConfig = BoConfig()) -> np.ndarray:
    """Skip/leap-decimated unscrambled Sobol' points in the unit cube.

    Discards the first ``sobol_skip`` sequence elements, then keeps every
    (leap+1)-th, yielding ``n_sobol`` points. The generator is drawn in one
    power-of-two block so the sequence is identical across calls.
    """
    if dims not in (5, 6):
        raise BoError("design space has 5 or 6 dimensions")
    stride = config.sobol_leap + 1
    needed = config.sobol_skip + (config.n_sobol - 1) * stride + 1
    block = 1 << max(needed - 1, 1).bit_length()
    raw = qmc.Sobol(d=dims, scramble=False).random(block)
    return raw[config.sobol_skip :: stride][: config.n_sobol]


def ei_plus(mu, variance, f_min) -> np.ndarray | float:
    """Expected improvement for minimization at predictive variance ``variance``.

    (f_min - mu) Phi(z) + sqrt(variance) phi(z) with z = (f_min - mu)/sqrt(variance);
    nonnegative. Accepts scalars or arrays; variance must be positive.
    """
    mu_arr = np.asarray(mu, dtype=float)
    s = np.asarray(variance, dtype=float)
    if np.any(s <= 0.0):
        raise BoError("predictive variance must be positive")
    sd = np.sqrt(s)
    z = (f_min - mu_arr) / sd
    cdf = 0.5 * (1.0 + erf(z / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * z**2) / math.sqrt(2.0 * math.pi)
    out = np.maximum(0.0, (f_min - mu_arr) * cdf + sd * pdf)
    return float(out) if np.isscalar(mu) or np.ndim(mu) == 0 else out


def _candidates(bounds: np.ndarray, n: int, seed: int) -> np.ndarray:
    lo, hi = bounds[:, 0], bounds[:, 1]
    block = 1 << max(n - 1, 1).bit_length()  # draw a power-of-2 block, then slice
    u = qmc.Sobol(d=len(bounds), scramble=True, seed=seed).random(block)[:n]
    return lo + u * (hi - lo)


# Shrinking coordinate-walk step sizes as fractions of each range; the last
# level sets the resolution of the acquisition argmax.
_REFINE_FRACTIONS = (0.05, 0.01, 0.002, 4e-4, 8e-5, 2e-5)


def _refine(predict, f_min, x0, ei0, bounds):
    """Coordinate pattern walk of one candidate with shrinking steps."""
    span = bounds[:, 1] - bounds[:, 0]
    x, best = x0.copy(), ei0
    for frac in _REFINE_FRACTIONS:
        for j in range(len(x)):
            for direction in (1.0, -1.0):
                for _ in range(6):
                    trial = x.copy()
                    trial[j] = np.clip(trial[j] + direction * frac * span[j], bounds[j, 0], bounds[j, 1])
                    if trial[j] == x[j]:
                        break
                    mu, _, var_q = predict(trial[None, :])
                    val = float(ei_plus(mu, var_q, f_min)[0])
                    if val > best * (1.0 + 1e-12) + 1e-300:
                        x, best = trial, val
                    else:
                        break
    return x, best


def propose_next(model: GpModel, bounds, config: BoConfig, seed: int) -> tuple:
    """Maximize EI+ over a seeded candidate set with local refinement.

    Returns (x, ei_value). Deterministic given the seed. Proposals that fall
    within ``duplicate_tol`` of an evaluated point are displaced by one
    candidate-grid step (0.1% of a coordinate range).
    """
    bounds = np.asarray(bounds, dtype=float)
    if model.n_obs == 0:
        raise BoError("propose_next needs a fitted model with observations")
    predict = Predictor(model)
    f_min = float(np.min(model.y))
    cand = _candidates(bounds, config.n_candidates, seed)
    mu, _, var_q = predict(cand)
    ei = ei_plus(mu, var_q, f_min)
    order = np.argsort(-ei)
    best_x, best_ei = cand[order[0]].copy(), float(ei[order[0]])
    for idx in order[: config.n_refine]:
        x, val = _refine(predict, f_min, cand[idx].copy(), float(ei[idx]), bounds)
        if val > best_ei:
            best_x, best_ei = x, val

    # Duplicate guard: nudge exact re-proposals off the evaluated point.
    span = bounds[:, 1] - bounds[:, 0]
    for attempt in range(64):
        dist = np.min(np.linalg.norm(model.x - best_x, axis=1))
        if dist > config.duplicate_tol:
            break
        j = attempt % len(best_x)
        step = _DUPLICATE_STEP * span[j]
        moved = best_x[j] + step if best_x[j] + step <= bounds[j, 1] else best_x[j] - step
        best_x = best_x.copy()
        best_x[j] = moved
    return best_x, best_ei


def safeguard_check(model: GpModel, x_next, t_sigma: float) -> bool:
    """True when the proposal's posterior uncertainty is acceptably large.

    Accept iff sigma_F(x_next) >= t_sigma * sigma_noise (the fitted
    observation-noise standard deviation); otherwise the caller should
    inflate the kernel and re-propose.
    """
    _, var_f, _ = Predictor(model)(np.asarray(x_next, dtype=float)[None, :])
    return math.sqrt(float(var_f[0])) >= t_sigma * math.sqrt(model.noise_var)


@dataclass(frozen=True)
class TraceRecord:
    index: int  # 1-based over all evaluations of the seed
    phase: str  # "sobol" | "warm" | "bo"
    iteration: int  # 1-based within the phase
    phi: DesignVector
    y: float  # minimization loss
    best_so_far: float
    ei: float | None = None
    safeguard_rounds: int = 0
    safeguard_capped: bool = False
    sigma_f: float | None = None
    lengthscales: tuple | None = None
    noise_var: float | None = None


@dataclass
class SeedTrace:
    seed: int
    records: list = field(default_factory=list)
    error: str | None = None

    @property
    def best_so_far(self) -> np.ndarray:
        return np.array([r.best_so_far for r in self.records])

    def best_record(self) -> TraceRecord:
        return min(self.records, key=lambda r: r.y)

    def bo_best_curve(self) -> np.ndarray:
        """Best-so-far restricted to the sequential-iteration rows."""
        return np.array([r.best_so_far for r in self.records if r.phase == "bo"])


@dataclass
class BoResult:
    traces: list

    def completed(self) -> list:
        return [t for t in self.traces if t.error is None and t.records]

    def best_designs(self) -> dict:
        return {t.seed: t.best_record().phi for t in self.completed()}

    def best_losses(self) -> dict:
        return {t.seed: t.best_record().y for t in self.completed()}

    def aggregate(self) -> dict:
        """Per-iteration mean/std of the sequential best-so-far curves."""
        curves = [t.bo_best_curve() for t in self.completed()]
        if not curves:
            return {"iterations": [], "mean": [], "std": []}
        n = min(len(c) for c in curves)
        stack = np.stack([c[:n] for c in curves])
        return {
            "iterations": list(range(1, n + 1)),
            "mean": stack.mean(axis=0).tolist(),
            "std": stack.std(axis=0).tolist(),
        }


def _objective_loss(result, objective: str, weights: ObjectiveWeights) -> float:
    averages = result.averages()
    if objective == "fopt":
        score = f_opt(averages, weights)
    elif objective == "fsf":
        score = f_sf(averages, result.sf_worst, weights)
    else:
        raise BoError(f"unknown objective {objective!r} (expected 'fopt' or 'fsf')")
    return to_minimization(score)


def _run_seed(evaluator: Evaluator, objective: str, weights, config: BoConfig, seed: int) -> SeedTrace:
    region = evaluator.region
    bounds = region.bounds()
    t_sigma = config.resolved_t_sigma(region)
    trace = SeedTrace(seed=seed)
    xs, ys = [], []
    best = math.inf

    def record(phase, iteration, phi, loss, **extra):
        nonlocal best
        best = min(best, loss)
        xs.append(phi.to_array())
        ys.append(loss)
        trace.records.append(
            TraceRecord(
                index=len(trace.records) + 1,
                phase=phase,
                iteration=iteration,
                phi=phi,
                y=loss,
                best_so_far=best,
                **extra,
            )
        )

    try:
        for i, u in enumerate(sobol_points(region.dims, config), start=1):
            phi = region.from_unit_cube(u)
            record("sobol", i, phi, _objective_loss(evaluator.evaluate(phi), objective, weights))
        for i, phi in enumerate(config.warm_start, start=1):
            record("warm", i, phi, _objective_loss(evaluator.evaluate(phi), objective, weights))

        spans = bounds[:, 1] - bounds[:, 0]
        for it in range(1, config.n_iterations + 1):
            x_arr = np.array(xs)
            y_arr = np.array(ys)
            std_y = max(float(np.std(y_arr)), 1e-8)
            hyper_bounds = {
                "lengthscales": np.stack([1e-2 * spans, 1e2 * spans], axis=1),
                "sigma_f": (1e-3 * std_y, 1e1 * std_y),
                "noise_var": (1e-8 * std_y**2, 1.0 * std_y**2),
            }
            model = fit_gp(x_arr, y_arr, hyper_bounds, seed=config.fit_seed)
            rounds = 0
            capped = False
            proposal_seed = seed * 1_000_003 + it
            x_next, ei_val = propose_next(model, bounds, config, proposal_seed)
            while not safeguard_check(model, x_next, t_sigma):
                if rounds >= config.max_inflations:
                    capped = True
                    break
                rounds += 1
                model = model.with_kernel(inflate_kernel(model.kernel, config.inflation_factor))
                x_next, ei_val = propose_next(model, bounds, config, proposal_seed + 7919 * rounds)
            phi = DesignVector.from_array(np.clip(x_next, bounds[:, 0], bounds[:, 1]))
            loss = _objective_loss(evaluator.evaluate(phi), objective, weights)
            record(
                "bo",
                it,
                phi,
                loss,
                ei=ei_val,
                safeguard_rounds=rounds,
                safeguard_capped=capped,
                sigma_f=model.kernel.sigma_f,
                lengthscales=model.kernel.lengthscales,
                noise_var=model.noise_var,
            )
    except Exception as exc:  # evaluator failures abort this seed only
        trace.error = f"{type(exc).__name__}: {exc}"
    return trace


def run(
    evaluator: Evaluator,
    objective: str = "fopt",
    weights: ObjectiveWeights = ObjectiveWeights(),
    config: BoConfig = BoConfig(),
    threads: int = 1,
) -> BoResult:
    """Run the full multi-seed optimization; seeds never share state."""
    if objective not in ("fopt", "fsf"):
        raise BoError(f"unknown objective {objective!r} (expected 'fopt' or 'fsf')")
    seeds = list(config.seeds)
    if threads > 1 and len(seeds) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            traces = list(
                pool.map(lambda s: _run_seed(evaluator, objective, weights, config, s), seeds)
            )
    else:
        traces = [_run_seed(evaluator, objective, weights, config, s) for s in seeds]
    return BoResult(traces)
