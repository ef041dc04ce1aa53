"""Gaussian-process surrogate with an anisotropic Matern 5/2 kernel.

Exact conditioning on noisy observations, constant prior mean set to the
dataset mean, marginal-likelihood hyperparameter fitting by deterministic
multi-start coordinate search, and multiplicative kernel inflation for the
acquisition safeguard. Models are immutable after construction; posterior
queries are safe to run concurrently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import cho_solve, cholesky

__all__ = [
    "GpError",
    "KernelParams",
    "GpModel",
    "Predictor",
    "kernel_eval",
    "gram_matrix",
    "cross_covariance",
    "posterior",
    "log_marginal_likelihood",
    "fit_hyperparameters",
    "fit_gp",
    "inflate_kernel",
]


class GpError(ValueError):
    pass


@dataclass(frozen=True)
class KernelParams:
    """Signal standard deviation and one lengthscale per input dimension."""

    sigma_f: float
    lengthscales: tuple

    def __post_init__(self):
        ls = tuple(float(l) for l in np.atleast_1d(self.lengthscales))
        object.__setattr__(self, "lengthscales", ls)
        if not self.sigma_f > 0.0 or any(not l > 0.0 for l in ls):
            raise GpError("kernel hyperparameters must be strictly positive")

    @property
    def dims(self) -> int:
        return len(self.lengthscales)


def _scaled_r(x1, x2, params: KernelParams) -> np.ndarray:
    """Pairwise lengthscale-weighted Euclidean distance r between row sets."""
    a = np.atleast_2d(np.asarray(x1, dtype=float))
    b = np.atleast_2d(np.asarray(x2, dtype=float))
    if a.shape[1] != params.dims or b.shape[1] != params.dims:
        raise GpError("input dimension does not match the kernel lengthscales")
    a = a / params.lengthscales
    b = b / params.lengthscales
    d2 = np.maximum(
        0.0,
        np.sum(a**2, axis=1)[:, None] + np.sum(b**2, axis=1)[None, :] - 2.0 * a @ b.T,
    )
    return np.sqrt(d2)


def _matern52(r: np.ndarray, sigma_f: float) -> np.ndarray:
    sr = math.sqrt(5.0) * r
    return sigma_f**2 * (1.0 + sr + sr**2 / 3.0) * np.exp(-sr)


def kernel_eval(x, x_prime, params: KernelParams) -> float:
    """Matern 5/2 covariance sigma_f^2 (1 + sqrt5 r + 5/3 r^2) exp(-sqrt5 r)
    with r the lengthscale-weighted distance between the two points."""
    return float(_matern52(_scaled_r(x, x_prime, params), params.sigma_f)[0, 0])


def gram_matrix(x, params: KernelParams) -> np.ndarray:
    return _matern52(_scaled_r(x, x, params), params.sigma_f)


def cross_covariance(x_query, x_data, params: KernelParams) -> np.ndarray:
    return _matern52(_scaled_r(x_query, x_data, params), params.sigma_f)


def _jittered_cholesky(k: np.ndarray) -> tuple:
    """Lower Cholesky factor of k + jitter*I, escalating jitter 10x per try.

    Jitter starts at 1e-10 * mean diagonal and is capped at 1e-4 * mean
    diagonal before giving up.
    """
    scale = float(np.trace(k)) / max(len(k), 1) or 1.0
    jitter = 0.0
    for attempt in range(8):
        try:
            return cholesky(k + jitter * np.eye(len(k)), lower=True), jitter
        except np.linalg.LinAlgError:
            pass
        except ValueError:
            pass
        jitter = 1e-10 * scale * 10.0**attempt
        if jitter > 1e-4 * scale:
            break
    raise GpError("kernel matrix is not positive definite even at maximum jitter")


@dataclass(frozen=True, eq=False)
class GpModel:
    """Immutable GP: kernel, noise variance, constant prior mean, dataset."""

    kernel: KernelParams
    noise_var: float
    mean: float = 0.0
    x: np.ndarray | None = None
    y: np.ndarray | None = None

    def __post_init__(self):
        if not self.noise_var > 0.0:
            raise GpError("noise variance must be strictly positive")
        if (self.x is None) != (self.y is None):
            raise GpError("x and y must be given together")
        if self.x is not None:
            x = np.atleast_2d(np.asarray(self.x, dtype=float))
            y = np.asarray(self.y, dtype=float).ravel()
            if len(x) != y.size:
                raise GpError("x and y lengths differ")
            object.__setattr__(self, "x", x)
            object.__setattr__(self, "y", y)

    @property
    def n_obs(self) -> int:
        return 0 if self.x is None else len(self.x)

    def with_kernel(self, kernel: KernelParams) -> "GpModel":
        return replace(self, kernel=kernel)


class Predictor:
    """Caches the Cholesky factorization of one model for repeated queries."""

    def __init__(self, model: GpModel):
        self.model = model
        if model.n_obs:
            k_nn = gram_matrix(model.x, model.kernel) + model.noise_var * np.eye(model.n_obs)
            self._low, _ = _jittered_cholesky(k_nn)
            self._alpha = cho_solve((self._low, True), model.y - model.mean)

    def __call__(self, x_query) -> tuple:
        """(mean, latent variance, predictive variance) arrays at the queries."""
        xq = np.atleast_2d(np.asarray(x_query, dtype=float))
        model = self.model
        prior_var = model.kernel.sigma_f**2
        if model.n_obs == 0:
            mu = np.full(len(xq), model.mean)
            var_f = np.full(len(xq), prior_var)
        else:
            k_q = cross_covariance(xq, model.x, model.kernel)
            mu = model.mean + k_q @ self._alpha
            solved = cho_solve((self._low, True), k_q.T)
            var_f = np.maximum(0.0, prior_var - np.einsum("ij,ji->i", k_q, solved))
        return mu, var_f, var_f + model.noise_var


def posterior(model: GpModel, x_query) -> tuple:
    """Posterior mean, latent variance and predictive variance at the query.

    Accepts a single point (d,) or a batch (Q, d); returns floats for a
    single point and arrays for a batch. The predictive variance adds the
    observation-noise variance to the latent one. An empty dataset returns
    the prior.
    """
    xq = np.asarray(x_query, dtype=float)
    single = xq.ndim == 1
    mu, var_f, var_q = Predictor(model)(xq)
    if single:
        return float(mu[0]), float(var_f[0]), float(var_q[0])
    return mu, var_f, var_q


def log_marginal_likelihood(x, y, kernel: KernelParams, noise_var: float, mean: float) -> float:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    k = gram_matrix(x, kernel) + noise_var * np.eye(len(x))
    try:
        low, _ = _jittered_cholesky(k)
    except GpError:
        return -np.inf
    resid = y - mean
    alpha = cho_solve((low, True), resid)
    return float(
        -0.5 * resid @ alpha - np.sum(np.log(np.diag(low))) - 0.5 * len(x) * math.log(2.0 * math.pi)
    )


def _default_bounds(x: np.ndarray, y: np.ndarray) -> dict:
    spans = x.max(axis=0) - x.min(axis=0)
    spans = np.where(spans > 0.0, spans, 1.0)
    std_y = max(float(np.std(y)), 1e-8)
    return {
        "lengthscales": np.stack([1e-2 * spans, 1e2 * spans], axis=1),
        "sigma_f": (1e-3 * std_y, 1e1 * std_y),
        "noise_var": (1e-8 * std_y**2, 1.0 * std_y**2),
    }


def _coordinate_search(objective, z0, z_lo, z_hi, sweeps=(2.0, 1.0, 0.5, 0.25)):
    """Deterministic pattern search in log-parameter space.

    For each sweep step size, each coordinate walks in the improving
    direction while the objective keeps increasing (at most 8 steps).
    """
    z = np.clip(z0, z_lo, z_hi)
    best = objective(z)
    for step in sweeps:
        for j in range(len(z)):
            for direction in (1.0, -1.0):
                for _ in range(8):
                    trial = z.copy()
                    trial[j] = np.clip(trial[j] + direction * step, z_lo[j], z_hi[j])
                    if trial[j] == z[j]:
                        break
                    val = objective(trial)
                    if val > best + 1e-12:
                        z, best = trial, val
                    else:
                        break
    return z, best


def fit_hyperparameters(
    x, y, bounds: dict | None = None, n_starts: int = 8, seed: int = 0
) -> tuple:
    """Maximize the log marginal likelihood; returns (KernelParams, noise_var).

    Multi-start coordinate search in log space with ``n_starts`` starting
    points: the first at the heuristic center (lengthscale = one third of
    each data span, sigma_f = std(y), noise = 1e-2 var(y)), the rest drawn
    log-uniformly inside the bounds from a generator seeded with ``seed``.
    Deterministic for fixed inputs and seed. Requires >= 3 observations.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    if len(x) < 3:
        raise GpError("hyperparameter fitting needs at least 3 observations")
    d = x.shape[1]
    b = bounds if bounds is not None else _default_bounds(x, y)
    ls_lo, ls_hi = np.asarray(b["lengthscales"], dtype=float).T.reshape(2, d)
    lo = np.log(np.concatenate([[b["sigma_f"][0]], ls_lo, [b["noise_var"][0]]]))
    hi = np.log(np.concatenate([[b["sigma_f"][1]], ls_hi, [b["noise_var"][1]]]))
    mean = float(y.mean())

    def objective(z):
        sigma_f = math.exp(z[0])
        lengthscales = tuple(np.exp(z[1 : 1 + d]))
        noise_var = math.exp(z[-1])
        return log_marginal_likelihood(x, y, KernelParams(sigma_f, lengthscales), noise_var, mean)

    spans = np.where(x.max(axis=0) - x.min(axis=0) > 0.0, x.max(axis=0) - x.min(axis=0), 1.0)
    std_y = max(float(np.std(y)), 1e-8)
    center = np.log(np.concatenate([[std_y], spans / 3.0, [1e-2 * std_y**2]]))
    rng = np.random.default_rng(seed)
    starts = [center] + [rng.uniform(lo, hi) for _ in range(max(0, n_starts - 1))]

    best_z, best_val = None, -np.inf
    for z0 in starts:
        z, val = _coordinate_search(objective, z0, lo, hi)
        if val > best_val:
            best_z, best_val = z, val
    if best_z is None or not np.isfinite(best_val):
        raise GpError("marginal-likelihood optimization failed on every start")
    kernel = KernelParams(math.exp(best_z[0]), tuple(np.exp(best_z[1 : 1 + d])))
    return kernel, math.exp(best_z[-1])


def fit_gp(x, y, bounds: dict | None = None, n_starts: int = 8, seed: int = 0) -> GpModel:
    """Fit hyperparameters and return the conditioned model."""
    kernel, noise_var = fit_hyperparameters(x, y, bounds, n_starts, seed)
    y_arr = np.asarray(y, dtype=float).ravel()
    return GpModel(kernel, noise_var, float(y_arr.mean()), x, y_arr)


def inflate_kernel(params: KernelParams, factor: float) -> KernelParams:
    """Multiply the signal std and every lengthscale by ``factor``."""
    if not factor > 0.0:
        raise GpError("inflation factor must be positive")
    return KernelParams(params.sigma_f * factor, tuple(l * factor for l in params.lengthscales))
