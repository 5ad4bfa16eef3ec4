"""Statistical substrate: stratified sampling, Gaussian priors, Karhunen-Loeve
expansions of covariance kernels, weighted kernel density estimation, and the
log-density error metric used to score surrogate output distributions."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalFailure

logger = logging.getLogger(__name__)

_LOG_FLOOR = 1e-16
_DENSITY_FLOOR = 1e-300


@dataclass(frozen=True, eq=False)
class Bounds:
    """Axis-aligned box bounds of the search space."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lower = np.atleast_1d(np.asarray(self.lower, dtype=float))
        upper = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lower.shape != upper.shape or lower.ndim != 1 or lower.size == 0:
            raise ValueError("lower and upper must be nonempty 1-d arrays of equal length")
        if not np.all(lower < upper):
            raise ValueError("every lower bound must be strictly below its upper bound")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @classmethod
    def symmetric(cls, half_width: float, dim: int) -> "Bounds":
        return cls(np.full(dim, -float(half_width)), np.full(dim, float(half_width)))

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def widths(self) -> np.ndarray:
        return self.upper - self.lower

    @property
    def diameter(self) -> float:
        """Euclidean length of the box diagonal."""
        return float(np.sqrt(np.sum(self.widths**2)))

    def contains(self, xs: np.ndarray) -> np.ndarray:
        xs = np.atleast_2d(np.asarray(xs, dtype=float))
        return np.all((xs >= self.lower) & (xs <= self.upper), axis=1)


@dataclass
class ObservationSet:
    """Labeled dataset of input vectors and scalar outputs, grown one batch at a time."""

    inputs: np.ndarray
    outputs: np.ndarray

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        self.outputs = np.atleast_1d(np.asarray(self.outputs, dtype=float))
        if self.inputs.shape[0] != self.outputs.shape[0]:
            raise ValueError("inputs and outputs must have matching first dimension")

    def __len__(self) -> int:
        return self.outputs.size

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def extended(self, xs: np.ndarray, ys: np.ndarray) -> "ObservationSet":
        xs = np.atleast_2d(np.asarray(xs, dtype=float))
        ys = np.atleast_1d(np.asarray(ys, dtype=float))
        return ObservationSet(np.vstack([self.inputs, xs]), np.concatenate([self.outputs, ys]))


@dataclass(frozen=True)
class StandardNormalPrior:
    """Independent standard normal prior over the search coordinates."""

    dim: int

    def density(self, xs: np.ndarray) -> np.ndarray | float:
        return prior_density(self._check(xs))

    def log_density(self, xs: np.ndarray) -> np.ndarray | float:
        xs = self._check(xs)
        d = xs.shape[-1]
        return -0.5 * np.sum(xs**2, axis=-1) - 0.5 * d * np.log(2.0 * np.pi)

    def sample(self, n: int, seed) -> np.ndarray:
        rng = np.random.default_rng(seed)
        return rng.standard_normal((n, self.dim))

    def _check(self, xs) -> np.ndarray:
        xs = np.asarray(xs, dtype=float)
        if xs.shape[-1] != self.dim:
            raise ValueError(f"expected dimension {self.dim}, got {xs.shape[-1]}")
        return xs


def prior_density(xs: np.ndarray) -> np.ndarray | float:
    """Product of per-dimension standard normal densities.

    Accepts a single vector or an (n, d) matrix; returns a scalar or an (n,) array.
    """
    xs = np.asarray(xs, dtype=float)
    d = xs.shape[-1]
    out = (2.0 * np.pi) ** (-0.5 * d) * np.exp(-0.5 * np.sum(xs**2, axis=-1))
    return float(out) if np.ndim(out) == 0 else out


def lhs_sample(n: int, bounds: Bounds, seed) -> np.ndarray:
    """Latin hypercube sample: exactly one point per axis-aligned stratum per dimension."""
    if bounds.dim == 0:
        raise ValueError("bounds must have at least one dimension")
    if n < 1:
        raise ValueError("sample count must be >= 1")
    rng = np.random.default_rng(seed)
    strata = np.column_stack([rng.permutation(n) for _ in range(bounds.dim)])
    u = (strata + rng.uniform(size=(n, bounds.dim))) / n
    return bounds.lower + u * bounds.widths


# --- Karhunen-Loeve expansion -------------------------------------------------


@dataclass(frozen=True, eq=False)
class RandomFieldBasis:
    """Truncated eigenbasis of a covariance kernel sampled on a sensor grid.

    Coefficients are standardized: a field is synthesized as sum_i x_i sqrt(lam_i)
    phi_i with each search coordinate x_i ~ N(0, 1), so the eigenvalue scaling is
    absorbed into the mode amplitude and search bounds are dimension-uniform.
    """

    eigenvalues: np.ndarray
    modes: np.ndarray
    sensor_grid: np.ndarray
    is_complex: bool = field(default=False)

    def __post_init__(self):
        lam = np.asarray(self.eigenvalues, dtype=float)
        modes = np.asarray(self.modes)
        grid = np.asarray(self.sensor_grid, dtype=float)
        if modes.shape != (lam.size, grid.size):
            raise ValueError("modes must be (n_modes, n_sensors)")
        if np.any(np.diff(lam) > 1e-12 * max(1.0, abs(lam[0]) if lam.size else 1.0)):
            raise ValueError("eigenvalues must be sorted descending")
        if np.any(lam < 0):
            raise ValueError("eigenvalues must be nonnegative (clamp before constructing)")
        gram = modes @ modes.conj().T
        if not np.allclose(gram, np.eye(lam.size), atol=1e-8):
            raise ValueError("mode rows must be orthonormal under the discrete inner product")
        object.__setattr__(self, "eigenvalues", lam)
        object.__setattr__(self, "modes", modes)
        object.__setattr__(self, "sensor_grid", grid)
        object.__setattr__(self, "is_complex", bool(np.iscomplexobj(modes)))

    @property
    def n_modes(self) -> int:
        return self.eigenvalues.size

    @property
    def n_sensors(self) -> int:
        return self.sensor_grid.size

    @property
    def coeff_dim(self) -> int:
        """Search-space dimension: m for real bases, 2m (interleaved re/im) for complex."""
        return 2 * self.n_modes if self.is_complex else self.n_modes


def rbf_kernel(variance: float, lengthscale: float):
    """Squared-exponential kernel builder: k(s, s') = v * exp(-(s-s')^2 / (2 l^2))."""

    def build(grid: np.ndarray) -> np.ndarray:
        d = grid[:, None] - grid[None, :]
        return variance * np.exp(-0.5 * d**2 / lengthscale**2)

    return build


def complex_exp_kernel(variance: float, lengthscale: float):
    """Complex Hermitian kernel k(s, s') = v * exp(i(s-s')) * exp(-(s-s')^2 / l)."""

    def build(grid: np.ndarray) -> np.ndarray:
        d = grid[:, None] - grid[None, :]
        return variance * np.exp(1j * d) * np.exp(-(d**2) / lengthscale)

    return build


def kl_expand(kernel_spec, sensor_grid: np.ndarray, n_modes: int) -> RandomFieldBasis:
    """Eigendecompose a kernel matrix on the sensor grid and keep the top modes.

    kernel_spec may be a callable producing the kernel matrix from the grid, or
    the matrix itself. The matrix must be Hermitian positive semidefinite;
    eigenvalues more negative than tolerance raise NumericalFailure, small
    negative ones are clamped to zero.
    """
    grid = np.asarray(sensor_grid, dtype=float)
    kernel = kernel_spec(grid) if callable(kernel_spec) else np.asarray(kernel_spec)
    if kernel.shape != (grid.size, grid.size):
        raise ValueError("kernel matrix shape must match the sensor grid")
    if n_modes < 1 or n_modes > grid.size:
        raise ValueError("n_modes must be between 1 and the grid size")
    if not np.allclose(kernel, kernel.conj().T, atol=1e-10):
        raise ValueError("kernel matrix must be Hermitian")
    kernel = 0.5 * (kernel + kernel.conj().T)

    evals, evecs = np.linalg.eigh(kernel)
    order = np.argsort(evals)[::-1][:n_modes]
    lam = evals[order]
    tol = 1e-10 * max(1.0, float(evals.max())) if evals.size else 0.0
    if lam.min() < -tol:
        raise NumericalFailure(f"kernel eigenvalue {lam.min():.3e} below -{tol:.1e}")
    lam = np.clip(lam, 0.0, None)
    modes = evecs[:, order].T
    if not np.iscomplexobj(kernel):
        modes = modes.real
    return RandomFieldBasis(lam, modes, grid)


def synthesize_fields(xs: np.ndarray, basis: RandomFieldBasis) -> np.ndarray:
    """Map coefficient vectors to fields on the sensor grid: sum_i x_i sqrt(lam_i) phi_i.

    Complex bases take 2m coordinates per point, interleaved (re0, im0, re1, im1, ...).
    Returns an (n, n_sensors) array (complex for complex bases).
    """
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    if basis.is_complex:
        if xs.shape[1] != 2 * basis.n_modes:
            raise ValueError(f"expected {2 * basis.n_modes} coordinates, got {xs.shape[1]}")
        coeff = xs[:, 0::2] + 1j * xs[:, 1::2]
    else:
        if xs.shape[1] != basis.n_modes:
            raise ValueError(f"expected {basis.n_modes} coordinates, got {xs.shape[1]}")
        coeff = xs
    return (coeff * np.sqrt(basis.eigenvalues)) @ basis.modes


def synthesize_field(x: np.ndarray, basis: RandomFieldBasis) -> np.ndarray:
    """Single-point convenience wrapper around synthesize_fields."""
    return synthesize_fields(np.asarray(x, dtype=float)[None, :], basis)[0]


# --- Weighted kernel density estimation ----------------------------------------


@dataclass(frozen=True, eq=False)
class PdfEstimate:
    """Density values of a scalar quantity on a fixed grid."""

    grid: np.ndarray
    density: np.ndarray
    bandwidth: float

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=float)
        density = np.asarray(self.density, dtype=float)
        if grid.shape != density.shape or grid.ndim != 1:
            raise ValueError("grid and density must be 1-d arrays of equal length")
        if np.any(np.diff(grid) <= 0):
            raise ValueError("grid must be strictly increasing")
        if np.any(density < 0):
            raise ValueError("density must be nonnegative")
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "density", density)

    def interp(self, ys: np.ndarray) -> np.ndarray:
        """Linear interpolation; values outside the grid clamp to the edge density."""
        return np.interp(np.asarray(ys, dtype=float), self.grid, self.density)


def _normalized_weights(values: np.ndarray, weights: np.ndarray) -> np.ndarray:
    if values.shape != weights.shape or values.ndim != 1:
        raise ValueError("values and weights must be 1-d arrays of equal length")
    if np.any(weights < 0):
        raise ValueError("weights must be nonnegative")
    total = weights.sum()
    if not total > 0:
        raise ValueError("weights must not all be zero")
    return weights / total


def scott_bandwidth(values: np.ndarray, weights: np.ndarray) -> float:
    """Scott's rule with Kish effective sample size: n_eff^(-1/5) * weighted std.

    Falls back to 1.0 for degenerate data (a single sample or zero spread).
    """
    values = np.asarray(values, dtype=float)
    w = _normalized_weights(values, np.asarray(weights, dtype=float))
    n_eff = 1.0 / np.sum(w**2)
    mean = w @ values
    var = w @ (values - mean) ** 2
    bw = np.sqrt(var) * n_eff ** (-0.2)
    if not np.isfinite(bw) or bw <= 1e-12 * max(1.0, abs(mean)):
        return 1.0
    return float(bw)


def kde_grid(values: np.ndarray, weights: np.ndarray, n_points: int = 512,
             pad_bandwidths: float = 5.0) -> np.ndarray:
    """Evaluation grid spanning the data range padded by a few bandwidths."""
    values = np.asarray(values, dtype=float)
    bw = scott_bandwidth(values, weights)
    lo = values.min() - pad_bandwidths * bw
    hi = values.max() + pad_bandwidths * bw
    return np.linspace(lo, hi, n_points)


def weighted_kde(values: np.ndarray, weights: np.ndarray, grid: np.ndarray,
                 chunk: int = 4096) -> PdfEstimate:
    """Gaussian kernel density estimate with nonnegative sample weights."""
    values = np.asarray(values, dtype=float)
    grid = np.asarray(grid, dtype=float)
    w = _normalized_weights(values, np.asarray(weights, dtype=float))
    bw = scott_bandwidth(values, w)
    norm = 1.0 / (bw * np.sqrt(2.0 * np.pi))
    density = np.zeros_like(grid)
    for start in range(0, values.size, chunk):
        block = slice(start, start + chunk)
        z = (grid[None, :] - values[block, None]) / bw
        density += w[block] @ np.exp(-0.5 * z**2)
    return PdfEstimate(grid, norm * density, bw)


def log_pdf_error(p_approx: PdfEstimate, p_true: PdfEstimate,
                  floor: float = _LOG_FLOOR, support_frac: float = 1e-12) -> float:
    """Integrated absolute log10-density difference over the truth support.

    Both densities are floored before the log; the integration range is the span
    of grid points where the true density exceeds support_frac of its peak.
    """
    if p_approx.grid.shape != p_true.grid.shape or not np.allclose(p_approx.grid, p_true.grid):
        raise ValueError("densities must be evaluated on the same grid")
    mask = p_true.density > support_frac * p_true.density.max()
    idx = np.flatnonzero(mask)
    if idx.size < 2:
        return 0.0
    sl = slice(idx[0], idx[-1] + 1)
    la = np.log10(np.maximum(p_approx.density[sl], floor))
    lt = np.log10(np.maximum(p_true.density[sl], floor))
    return float(np.trapezoid(np.abs(la - lt), p_true.grid[sl]))
