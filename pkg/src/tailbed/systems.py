"""Black-box truth maps: a stochastic-infection-rate SIR epidemic, a dispersive
nonlinear wave solver (fractional dispersion, cubic nonlinearity, selective
high-wavenumber dissipation), and a tabulated-dataset stand-in for proprietary
simulation codes."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np
import scipy.fft

from .errors import NotInPoolError, NumericalFailure
from .stats import (
    Bounds,
    RandomFieldBasis,
    complex_exp_kernel,
    kl_expand,
    rbf_kernel,
    synthesize_fields,
)

logger = logging.getLogger(__name__)

# Cumulative count of clamped negative infection rates (advisory diagnostics).
negative_beta_clamps = 0


# --- SIR epidemic with stochastic infection rate --------------------------------


def default_sir_basis(n_modes: int = 2, n_sensors: int = 125, variance: float = 0.1,
                      lengthscale: float = 1.0, horizon: float = 45.0) -> RandomFieldBasis:
    grid = np.linspace(0.0, horizon, n_sensors)
    return kl_expand(rbf_kernel(variance, lengthscale), grid, n_modes)


@dataclass(frozen=True, eq=False)
class SirConfig:
    """Susceptible/Infected/Recovered model with a time-varying infection rate
    beta(t) = beta0 * (field(t) + phi0) synthesized from a random-field basis."""

    basis: RandomFieldBasis
    gamma: float = 0.1      # recovery rate, 1/day
    delta: float = 0.0      # immunity-loss rate
    beta0: float = 3e-9     # infection-rate scale
    phi0: float = 2.55      # offset keeping beta nonnegative near the prior bulk
    infected0: float = 50.0
    population: float = 1e8
    horizon: float = 45.0   # days
    dt: float = 0.1         # days

    def __post_init__(self):
        for name in ("gamma", "beta0", "dt", "horizon", "population"):
            if not getattr(self, name) >= 0 or (name != "beta0" and getattr(self, name) == 0):
                raise ValueError(f"{name} must be positive")
        if self.basis.sensor_grid[-1] < self.horizon - 1e-9:
            raise ValueError("basis sensor grid must cover the integration horizon")

    def fingerprint(self) -> str:
        parts = (self.gamma, self.delta, self.beta0, self.phi0, self.infected0,
                 self.population, self.horizon, self.dt, self.basis.n_modes,
                 self.basis.n_sensors)
        raw = "sir|" + "|".join(repr(p) for p in parts)
        raw += "|" + repr(self.basis.eigenvalues.sum())
        return hashlib.sha256(raw.encode()).hexdigest()


def sir_qoi_batch(xs: np.ndarray, cfg: SirConfig, chunk: int = 8192) -> np.ndarray:
    """Infected count at the horizon for each coefficient vector (RK4 at cfg.dt)."""
    global negative_beta_clamps
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    n_steps = int(round(cfg.horizon / cfg.dt))
    # beta is needed at step endpoints and midpoints for the RK4 stages
    t_half = np.arange(2 * n_steps + 1) * (cfg.dt / 2.0)
    grid = cfg.basis.sensor_grid
    j = np.clip(np.searchsorted(grid, t_half, side="right") - 1, 0, grid.size - 2)
    frac = (t_half - grid[j]) / (grid[j + 1] - grid[j])

    out = np.empty(xs.shape[0])
    for start in range(0, xs.shape[0], chunk):
        block = slice(start, min(start + chunk, xs.shape[0]))
        fields = synthesize_fields(xs[block], cfg.basis)
        beta_s = cfg.beta0 * (fields + cfg.phi0)
        n_neg = int(np.count_nonzero(beta_s < 0))
        if n_neg:
            negative_beta_clamps += n_neg
            logger.warning("clamped %d negative infection-rate values to 0", n_neg)
            beta_s = np.maximum(beta_s, 0.0)
        beta = beta_s[:, j] * (1.0 - frac) + beta_s[:, j + 1] * frac

        s = np.full(beta.shape[0], cfg.population - cfg.infected0)
        i = np.full(beta.shape[0], cfg.infected0)
        r = np.zeros(beta.shape[0])
        gamma, delta, dt = cfg.gamma, cfg.delta, cfg.dt

        def rhs(b, s, i, r):
            infect = b * i * s
            return (-infect + delta * r, infect - gamma * i, gamma * i - delta * r)

        for k in range(n_steps):
            b0, bh, b1 = beta[:, 2 * k], beta[:, 2 * k + 1], beta[:, 2 * k + 2]
            ds1, di1, dr1 = rhs(b0, s, i, r)
            ds2, di2, dr2 = rhs(bh, s + 0.5 * dt * ds1, i + 0.5 * dt * di1, r + 0.5 * dt * dr1)
            ds3, di3, dr3 = rhs(bh, s + 0.5 * dt * ds2, i + 0.5 * dt * di2, r + 0.5 * dt * dr2)
            ds4, di4, dr4 = rhs(b1, s + dt * ds3, i + dt * di3, r + dt * dr3)
            s = s + dt / 6.0 * (ds1 + 2 * ds2 + 2 * ds3 + ds4)
            i = i + dt / 6.0 * (di1 + 2 * di2 + 2 * di3 + di4)
            r = r + dt / 6.0 * (dr1 + 2 * dr2 + 2 * dr3 + dr4)
        out[block] = i
    return out


def sir_qoi(x: np.ndarray, cfg: SirConfig) -> float:
    return float(sir_qoi_batch(np.asarray(x, dtype=float)[None, :], cfg)[0])


def sir_trajectories(xs: np.ndarray, cfg: SirConfig) -> np.ndarray:
    """Full (n, n_steps+1, 3) S/I/R trajectories, for conservation checks."""
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    n_steps = int(round(cfg.horizon / cfg.dt))
    t_half = np.arange(2 * n_steps + 1) * (cfg.dt / 2.0)
    grid = cfg.basis.sensor_grid
    j = np.clip(np.searchsorted(grid, t_half, side="right") - 1, 0, grid.size - 2)
    frac = (t_half - grid[j]) / (grid[j + 1] - grid[j])
    fields = synthesize_fields(xs, cfg.basis)
    beta_s = np.maximum(cfg.beta0 * (fields + cfg.phi0), 0.0)
    beta = beta_s[:, j] * (1.0 - frac) + beta_s[:, j + 1] * frac

    traj = np.empty((xs.shape[0], n_steps + 1, 3))
    s = np.full(xs.shape[0], cfg.population - cfg.infected0)
    i = np.full(xs.shape[0], cfg.infected0)
    r = np.zeros(xs.shape[0])
    traj[:, 0] = np.stack([s, i, r], axis=1)
    gamma, delta, dt = cfg.gamma, cfg.delta, cfg.dt

    def rhs(b, s, i, r):
        infect = b * i * s
        return (-infect + delta * r, infect - gamma * i, gamma * i - delta * r)

    for k in range(n_steps):
        b0, bh, b1 = beta[:, 2 * k], beta[:, 2 * k + 1], beta[:, 2 * k + 2]
        ds1, di1, dr1 = rhs(b0, s, i, r)
        ds2, di2, dr2 = rhs(bh, s + 0.5 * dt * ds1, i + 0.5 * dt * di1, r + 0.5 * dt * dr1)
        ds3, di3, dr3 = rhs(bh, s + 0.5 * dt * ds2, i + 0.5 * dt * di2, r + 0.5 * dt * dr2)
        ds4, di4, dr4 = rhs(b1, s + dt * ds3, i + dt * di3, r + dt * dr3)
        s = s + dt / 6.0 * (ds1 + 2 * ds2 + 2 * ds3 + ds4)
        i = i + dt / 6.0 * (di1 + 2 * di2 + 2 * di3 + di4)
        r = r + dt / 6.0 * (dr1 + 2 * dr2 + 2 * dr3 + dr4)
        traj[:, k + 1] = np.stack([s, i, r], axis=1)
    return traj


# --- Dispersive nonlinear wave model ---------------------------------------------


def default_mmt_basis(n_modes: int = 1, n_x: int = 512, variance: float = 1.0,
                      lengthscale: float = 0.35) -> RandomFieldBasis:
    grid = np.arange(n_x) / n_x
    return kl_expand(complex_exp_kernel(variance, lengthscale), grid, n_modes)


@dataclass(frozen=True, eq=False)
class MmtConfig:
    """One-dimensional dispersive wave equation on the unit-periodic domain:
    i u_t = |dx|^alpha u + lam |u|^2 u + i D u, with selective dissipation
    D(k) = -(|k| - k_star)^2 above the cutoff wavenumber."""

    basis: RandomFieldBasis
    alpha: float = 0.5
    lam: float = -0.5
    k_star: float = 20.0
    n_x: int = 512
    dt: float = 1e-3
    horizon: float = 20.0
    dealias: bool = True

    def __post_init__(self):
        if self.n_x < 4 or (self.n_x & (self.n_x - 1)) != 0:
            raise ValueError("n_x must be a power of two")
        if self.basis.n_sensors != self.n_x:
            raise ValueError("basis must live on the solver grid")
        if not (self.dt > 0 and self.horizon > 0):
            raise ValueError("dt and horizon must be positive")

    def fingerprint(self) -> str:
        parts = (self.alpha, self.lam, self.k_star, self.n_x, self.dt, self.horizon,
                 self.dealias, self.basis.n_modes)
        raw = "mmt|" + "|".join(repr(p) for p in parts)
        raw += "|" + repr(complex(self.basis.eigenvalues.sum()))
        return hashlib.sha256(raw.encode()).hexdigest()

    def stepper_key(self):
        return (self.alpha, self.lam, self.k_star, self.n_x, self.dt, self.dealias)


class MmtStepper:
    """Integrating-factor RK4 stepper in spectral space.

    The linear part (dispersion + selective dissipation) is advanced exactly by
    its matrix exponential; the cubic term is evaluated pseudo-spectrally in
    physical space with 2/3-rule dealiasing.
    """

    def __init__(self, alpha: float, lam: float, k_star: float, n_x: int, dt: float,
                 dealias: bool = True):
        idx = scipy.fft.fftfreq(n_x, d=1.0 / n_x)  # integer mode indices
        k = 2.0 * np.pi * idx                      # angular wavenumbers on [0, 1)
        damping = np.where(np.abs(k) > k_star, -((np.abs(k) - k_star) ** 2), 0.0)
        lin = -1j * np.abs(k) ** alpha + damping
        self.exp_half = np.exp(0.5 * dt * lin)
        self.exp_full = np.exp(dt * lin)
        self.mask = (np.abs(idx) < n_x / 3.0) if dealias else np.ones(n_x, dtype=bool)
        self.lam = lam
        self.dt = dt

    def nonlinear(self, uhat: np.ndarray) -> np.ndarray:
        u = scipy.fft.ifft(uhat, axis=-1)
        cubic = scipy.fft.fft(np.abs(u) ** 2 * u, axis=-1)
        return -1j * self.lam * np.where(self.mask, cubic, 0.0)

    def step(self, uhat: np.ndarray) -> np.ndarray:
        dt, eh, ef = self.dt, self.exp_half, self.exp_full
        a = self.nonlinear(uhat)
        b = self.nonlinear(eh * (uhat + 0.5 * dt * a))
        c = self.nonlinear(eh * uhat + 0.5 * dt * b)
        d = self.nonlinear(ef * uhat + dt * eh * c)
        return ef * uhat + dt / 6.0 * (ef * a + 2.0 * eh * (b + c) + d)


@lru_cache(maxsize=16)
def _cached_stepper(key) -> MmtStepper:
    alpha, lam, k_star, n_x, dt, dealias = key
    return MmtStepper(alpha, lam, k_star, n_x, dt, dealias)


def mmt_step(state: np.ndarray, cfg: MmtConfig) -> np.ndarray:
    """Advance a spectral field (or batch of fields) by one time step."""
    return _cached_stepper(cfg.stepper_key()).step(np.asarray(state, dtype=complex))


def spectral_energy(uhat: np.ndarray) -> np.ndarray:
    """Total squared spectral magnitude, summed over wavenumbers."""
    return np.sum(np.abs(uhat) ** 2, axis=-1)


def mmt_evolve(uhat: np.ndarray, cfg: MmtConfig, nan_check_interval: int = 100) -> np.ndarray:
    stepper = _cached_stepper(cfg.stepper_key())
    n_steps = int(round(cfg.horizon / cfg.dt))
    for step in range(n_steps):
        uhat = stepper.step(uhat)
        if (step % nan_check_interval == nan_check_interval - 1 or step == n_steps - 1) \
                and not np.all(np.isfinite(uhat.view(float))):
            raise NumericalFailure(f"non-finite spectral state detected at step {step + 1}")
    return uhat


def mmt_qoi_batch(xs: np.ndarray, cfg: MmtConfig, chunk: int = 4096) -> np.ndarray:
    """Spatial maximum of |Re u(., horizon)| for each coefficient vector."""
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    out = np.empty(xs.shape[0])
    for start in range(0, xs.shape[0], chunk):
        block = slice(start, min(start + chunk, xs.shape[0]))
        u0 = synthesize_fields(xs[block], cfg.basis)
        uhat = mmt_evolve(scipy.fft.fft(u0, axis=-1), cfg)
        u = scipy.fft.ifft(uhat, axis=-1)
        out[block] = np.max(np.abs(u.real), axis=-1)
    return out


def mmt_qoi(x: np.ndarray, cfg: MmtConfig) -> float:
    return float(mmt_qoi_batch(np.asarray(x, dtype=float)[None, :], cfg)[0])


# --- Tabulated dataset system ----------------------------------------------------


@dataclass(frozen=True, eq=False)
class TabulatedSystem:
    """Precomputed input/output table queried by nearest-neighbor matching."""

    inputs: np.ndarray
    outputs: np.ndarray
    match_tolerance: float = 1e-9

    def __post_init__(self):
        inputs = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        outputs = np.atleast_1d(np.asarray(self.outputs, dtype=float))
        if inputs.shape[0] != outputs.size or inputs.shape[0] < 1:
            raise ValueError("need at least one row and matching input/output counts")
        for start in range(0, inputs.shape[0], 1024):
            block = inputs[start:start + 1024]
            d2 = np.sum((block[:, None, :] - inputs[None, :, :]) ** 2, axis=-1)
            np.fill_diagonal(d2[:, start:start + block.shape[0]], np.inf)
            if np.any(d2 <= self.match_tolerance**2):
                raise ValueError("duplicate input rows within match tolerance")
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "outputs", outputs)

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(self.inputs.tobytes())
        h.update(self.outputs.tobytes())
        h.update(repr(self.match_tolerance).encode())
        return h.hexdigest()


def tabulated_qoi(x: np.ndarray, sys: TabulatedSystem) -> float:
    """Output of the stored input nearest to x (must lie within match tolerance)."""
    x = np.asarray(x, dtype=float)
    d2 = np.sum((sys.inputs - x) ** 2, axis=1)
    nearest = int(np.argmin(d2))
    if d2[nearest] > sys.match_tolerance**2:
        raise NotInPoolError(
            f"nearest stored input is {np.sqrt(d2[nearest]):.3e} away "
            f"(tolerance {sys.match_tolerance:.3e}); propose pool members only")
    return float(sys.outputs[nearest])


def save_tabulated(sys: TabulatedSystem, path) -> None:
    """Delimited text: input columns then the QoI column, one header row."""
    header = ",".join([f"x{i + 1}" for i in range(sys.dim)] + ["y"])
    table = np.column_stack([sys.inputs, sys.outputs])
    np.savetxt(path, table, delimiter=",", header=header, comments="")


def load_tabulated(path, match_tolerance: float = 1e-9) -> TabulatedSystem:
    with open(path) as f:
        header = f.readline().strip().split(",")
    if header[-1] != "y" or not all(c.startswith("x") for c in header[:-1]):
        raise ValueError("expected header 'x1,...,xD,y'")
    table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return TabulatedSystem(table[:, :-1], table[:, -1], match_tolerance)


# --- Driver-facing wrappers -------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SirSystem:
    cfg: SirConfig
    bounds: Bounds

    @property
    def dim(self) -> int:
        return self.cfg.basis.n_modes

    @property
    def basis(self) -> RandomFieldBasis:
        return self.cfg.basis

    def evaluate(self, xs: np.ndarray) -> np.ndarray:
        return sir_qoi_batch(xs, self.cfg)

    def fingerprint(self) -> str:
        return self.cfg.fingerprint()


@dataclass(frozen=True, eq=False)
class MmtSystem:
    cfg: MmtConfig
    bounds: Bounds

    @property
    def dim(self) -> int:
        return 2 * self.cfg.basis.n_modes

    @property
    def basis(self) -> RandomFieldBasis:
        return self.cfg.basis

    def evaluate(self, xs: np.ndarray) -> np.ndarray:
        return mmt_qoi_batch(xs, self.cfg)

    def fingerprint(self) -> str:
        return self.cfg.fingerprint()


@dataclass(frozen=True, eq=False)
class TabulatedSearchSystem:
    table: TabulatedSystem
    bounds: Bounds
    basis = None

    @property
    def dim(self) -> int:
        return self.table.dim

    def evaluate(self, xs: np.ndarray) -> np.ndarray:
        xs = np.atleast_2d(np.asarray(xs, dtype=float))
        return np.array([tabulated_qoi(x, self.table) for x in xs])

    def candidate_pool(self) -> np.ndarray:
        return self.table.inputs

    def snap(self, xs: np.ndarray, exclude: np.ndarray | None = None) -> np.ndarray:
        """Nearest unused pool rows for a set of proposal points."""
        xs = np.atleast_2d(np.asarray(xs, dtype=float))
        used = set() if exclude is None else {tuple(row) for row in np.atleast_2d(exclude)}
        chosen = []
        for x in xs:
            d2 = np.sum((self.table.inputs - x) ** 2, axis=1)
            for idx in np.argsort(d2):
                row = self.table.inputs[idx]
                if tuple(row) not in used:
                    used.add(tuple(row))
                    chosen.append(row)
                    break
        return np.array(chosen)

    def fingerprint(self) -> str:
        return self.table.fingerprint()
