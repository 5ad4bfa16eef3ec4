"""Gaussian process regression with an RBF-ARD kernel, trained by multi-start
maximum likelihood with analytic gradients. Serves as the low-dimensional
baseline surrogate."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular
from scipy.optimize import minimize

from .errors import NumericalFailure
from .stats import ObservationSet

logger = logging.getLogger(__name__)

_JITTERS = tuple(10.0**e for e in range(-10, -3))  # 1e-10 .. 1e-4
_NOISE_FLOOR = 1e-8


def _ard_sqdist(x1: np.ndarray, x2: np.ndarray, ell2: np.ndarray) -> np.ndarray:
    """Sum_d (x1 - x2)_d^2 / ell2_d, accumulated per dimension to bound memory."""
    out = np.zeros((x1.shape[0], x2.shape[0]))
    for d in range(x1.shape[1]):
        diff = x1[:, d, None] - x2[None, :, d]
        out += diff**2 / ell2[d]
    return out


def rbf_ard(x1: np.ndarray, x2: np.ndarray, sigma_f2: float, ell2: np.ndarray) -> np.ndarray:
    return sigma_f2 * np.exp(-0.5 * _ard_sqdist(x1, x2, ell2))


def _chol_with_jitter(k: np.ndarray):
    for jitter in (0.0,) + _JITTERS:
        try:
            return cho_factor(k + jitter * np.eye(k.shape[0]), lower=True), jitter
        except np.linalg.LinAlgError:
            continue
    raise NumericalFailure("kernel matrix not positive definite after max jitter 1e-4")


@dataclass(eq=False)
class GpModel:
    """Fitted GP posterior. Hyperparameters live in the standardized-target space;
    y_mean/y_scale map predictions back to original units."""

    train_inputs: np.ndarray
    train_targets: np.ndarray            # standardized targets
    sigma_f2: float
    ell2: np.ndarray                     # per-dimension squared lengthscales
    sigma_eps2: float
    m0: float = 0.0
    y_mean: float = 0.0
    y_scale: float = 1.0
    _chol: tuple = field(init=False, repr=False)
    _alpha: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.train_inputs = np.atleast_2d(np.asarray(self.train_inputs, dtype=float))
        self.train_targets = np.atleast_1d(np.asarray(self.train_targets, dtype=float))
        self.ell2 = np.atleast_1d(np.asarray(self.ell2, dtype=float))
        if np.any(self.ell2 <= 0):
            raise ValueError("squared lengthscales must be positive")
        self.refactor()

    def refactor(self):
        """Recompute the cached Cholesky factor (call after any hyperparameter change)."""
        k = rbf_ard(self.train_inputs, self.train_inputs, self.sigma_f2, self.ell2)
        k[np.diag_indices_from(k)] += self.sigma_eps2
        self._chol, jitter = _chol_with_jitter(k)
        if jitter:
            logger.debug("kernel factored with jitter %.1e", jitter)
        self._alpha = cho_solve(self._chol, self.train_targets - self.m0)

    def predict(self, xs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean and variance (original units), vectorized over query rows."""
        xs = np.atleast_2d(np.asarray(xs, dtype=float))
        k_star = rbf_ard(xs, self.train_inputs, self.sigma_f2, self.ell2)
        mu = self.m0 + k_star @ self._alpha
        v = solve_triangular(self._chol[0], k_star.T, lower=True)
        var = np.maximum(self.sigma_f2 - np.sum(v**2, axis=0), 0.0)
        return mu * self.y_scale + self.y_mean, var * self.y_scale**2

    def density_mean(self, xs: np.ndarray) -> np.ndarray:
        return self.predict(xs)[0]

    def log_marginal_likelihood(self) -> float:
        y = self.train_targets - self.m0
        n = y.size
        return float(-0.5 * y @ self._alpha - np.log(np.diag(self._chol[0])).sum()
                     - 0.5 * n * np.log(2.0 * np.pi))


def gp_posterior(model: GpModel, x: np.ndarray) -> tuple[float, float]:
    """Scalar posterior mean and variance at a single point."""
    mu, var = model.predict(np.asarray(x, dtype=float)[None, :])
    return float(mu[0]), float(var[0])


def neg_log_marginal_likelihood(theta: np.ndarray, x: np.ndarray, y: np.ndarray):
    """Negative LML and its gradient in theta = [log ell_d ..., log sigma_f2, log sigma_eps2]."""
    d = x.shape[1]
    ell2 = np.exp(2.0 * theta[:d])
    sigma_f2 = float(np.exp(theta[d]))
    sigma_eps2 = float(np.exp(theta[d + 1]))

    kf = rbf_ard(x, x, sigma_f2, ell2)
    k = kf + sigma_eps2 * np.eye(x.shape[0])
    try:
        chol, _ = _chol_with_jitter(k)
    except NumericalFailure:
        return 1e25, np.zeros_like(theta)
    alpha = cho_solve(chol, y)
    nll = 0.5 * y @ alpha + np.log(np.diag(chol[0])).sum() + 0.5 * y.size * np.log(2 * np.pi)

    k_inv = cho_solve(chol, np.eye(x.shape[0]))
    a = np.outer(alpha, alpha) - k_inv
    grad = np.empty_like(theta)
    for dd in range(d):
        diff2 = (x[:, dd, None] - x[None, :, dd]) ** 2
        dk = kf * (diff2 / ell2[dd])            # dK/d(log ell_dd)
        grad[dd] = -0.5 * np.sum(a * dk)
    grad[d] = -0.5 * np.sum(a * kf)             # dK/d(log sigma_f2) = kf
    grad[d + 1] = -0.5 * sigma_eps2 * np.trace(a)
    return float(nll), grad


def gp_fit(data: ObservationSet, restarts: int = 8, seed=0) -> GpModel:
    """Maximum-likelihood GP fit with multi-start local ascent.

    Targets are standardized internally; restarts draw lengthscales log-uniform
    over [1e-2, 1e2] x per-dimension data width, signal variance over [1e-2, 1e2]
    and noise variance over [1e-8, 1e-1].
    """
    if len(data) < 2:
        raise ValueError("need at least two observations")
    x = data.inputs
    y_raw = data.outputs
    y_mean = float(y_raw.mean())
    y_scale = float(y_raw.std())
    if y_scale <= 0:
        y_scale = 1.0
    y = (y_raw - y_mean) / y_scale

    widths = x.max(axis=0) - x.min(axis=0)
    widths[widths <= 0] = 1.0
    rng = np.random.default_rng(seed)

    d = x.shape[1]
    # optimizer box matches the restart-draw ranges
    lo = np.concatenate([np.log(1e-2 * widths), [np.log(1e-2), np.log(1e-8)]])
    hi = np.concatenate([np.log(1e2 * widths), [np.log(1e2), np.log(1e-1)]])
    opt_bounds = list(zip(lo, hi))

    best = None
    for _ in range(max(1, restarts)):
        ell0 = widths * 10.0 ** rng.uniform(-2, 2, size=d)
        sf0 = 10.0 ** rng.uniform(-2, 2)
        se0 = 10.0 ** rng.uniform(-8, -1)
        theta0 = np.concatenate([np.log(ell0), [np.log(sf0), np.log(se0)]])
        res = minimize(neg_log_marginal_likelihood, theta0, args=(x, y),
                       jac=True, method="L-BFGS-B", bounds=opt_bounds)
        if best is None or res.fun < best.fun:
            best = res
    theta = best.x
    return GpModel(
        train_inputs=x,
        train_targets=y,
        sigma_f2=float(np.exp(theta[d])),
        ell2=np.exp(2.0 * theta[:d]),
        sigma_eps2=max(float(np.exp(theta[d + 1])), _NOISE_FLOOR),
        y_mean=y_mean,
        y_scale=y_scale,
    )
