"""Danger scores, acquisition functions, Monte Carlo acquisition optimization,
and distance-constrained greedy batch selection."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Protocol

import numpy as np

from .stats import Bounds, PdfEstimate, prior_density

logger = logging.getLogger(__name__)

_SCORE_FLOOR = 1e-300


class SurrogateModel(Protocol):
    def predict(self, xs: np.ndarray) -> tuple[np.ndarray, np.ndarray]: ...

    def density_mean(self, xs: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True, eq=False)
class AcquisitionField:
    """Monte Carlo candidates with -log10 acquisition scores, best (lowest) first."""

    candidates: np.ndarray
    log10_scores: np.ndarray
    bounds: Bounds

    def __post_init__(self):
        if self.candidates.shape[0] != self.log10_scores.size:
            raise ValueError("one score per candidate required")
        if np.any(np.diff(self.log10_scores) < 0):
            raise ValueError("scores must be sorted ascending (-log10, lower is better)")


@dataclass(frozen=True, eq=False)
class Batch:
    """Selected acquisition batch; scores are log10 a(x), non-increasing."""

    points: np.ndarray
    scores: np.ndarray


def danger_score(xs: np.ndarray, surrogate: SurrogateModel, p_out: PdfEstimate,
                 floor: float = _SCORE_FLOOR) -> np.ndarray:
    """Likelihood ratio w(x) = p_x(x) / p_mu(mu(x)).

    Large where inputs are probable and the predicted output is rare under the
    surrogate output density. mu values beyond the density grid clamp to the edge
    density (occurrences are logged).
    """
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    mu = surrogate.density_mean(xs)
    n_outside = int(np.count_nonzero((mu < p_out.grid[0]) | (mu > p_out.grid[-1])))
    if n_outside:
        logger.debug("%d surrogate means fell outside the output-density grid", n_outside)
    p_mu = np.maximum(p_out.interp(mu), floor)
    return prior_density(xs) / p_mu


def acq_us(xs: np.ndarray, surrogate: SurrogateModel) -> np.ndarray:
    """Uncertainty sampling: a(x) = predictive variance."""
    return surrogate.predict(np.atleast_2d(np.asarray(xs, dtype=float)))[1]


def acq_uslw(xs: np.ndarray, surrogate: SurrogateModel, p_out: PdfEstimate) -> np.ndarray:
    """Likelihood-weighted uncertainty sampling: a(x) = w(x) * variance."""
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    return danger_score(xs, surrogate, p_out) * surrogate.predict(xs)[1]


def mc_optimize(surrogate: SurrogateModel, acq, bounds: Bounds, n_q: int, seed,
                shard_size: int = 16384, candidates: np.ndarray | None = None
                ) -> AcquisitionField:
    """Score acquisition values on uniform Monte Carlo candidates.

    acq is a callable (xs, surrogate) -> scores. A candidate pool may be passed
    explicitly (tabulated-dataset searches restrict candidates to stored inputs).
    Returns the field sorted by -log10 score ascending, so stronger candidates
    come first and the sampled prefix for a fixed seed is independent of n_q.
    """
    if candidates is None:
        if n_q < 1:
            raise ValueError("n_q must be >= 1")
        rng = np.random.default_rng(seed)
        u = rng.uniform(size=(n_q, bounds.dim))
        candidates = bounds.lower + u * bounds.widths
    else:
        candidates = np.atleast_2d(np.asarray(candidates, dtype=float))

    scores = np.empty(candidates.shape[0])
    for start in range(0, candidates.shape[0], shard_size):
        block = slice(start, min(start + shard_size, candidates.shape[0]))
        scores[block] = acq(candidates[block], surrogate)
    bad = ~np.isfinite(scores)
    if np.any(bad):
        logger.warning("floored %d non-finite acquisition scores", int(bad.sum()))
        scores[bad] = _SCORE_FLOOR
    log10_scores = -np.log10(np.maximum(scores, _SCORE_FLOOR))
    order = np.argsort(log10_scores, kind="stable")
    return AcquisitionField(candidates[order], log10_scores[order], bounds)


def batch_select(field: AcquisitionField, n_b: int, r_l: float) -> Batch:
    """Greedy batch selection under a minimum pairwise distance constraint.

    Repeatedly takes the best remaining candidate and eliminates everything
    within r_min = r_l * sqrt(sum_d (width_d)^2) of it. Returns a short batch
    with a warning if the pool is exhausted first.
    """
    if n_b < 1:
        raise ValueError("batch size must be >= 1")
    if not 0.0 <= r_l < 1.0:
        raise ValueError("r_l must lie in [0, 1)")
    r_min = r_l * field.bounds.diameter
    pts = field.candidates
    alive = np.ones(pts.shape[0], dtype=bool)
    chosen: list[int] = []
    cursor = 0
    while len(chosen) < n_b:
        while cursor < pts.shape[0] and not alive[cursor]:
            cursor += 1
        if cursor == pts.shape[0]:
            warnings.warn(
                f"candidate pool exhausted after {len(chosen)} of {n_b} picks "
                f"(r_l={r_l} too large for this pool)", stacklevel=2)
            break
        idx = cursor
        chosen.append(idx)
        alive[idx] = False
        if r_min > 0.0:
            d2 = np.sum((pts[alive] - pts[idx]) ** 2, axis=1)
            keep = d2 >= r_min**2
            alive[np.flatnonzero(alive)] = keep
    sel = np.array(chosen, dtype=int)
    return Batch(pts[sel], -field.log10_scores[sel])


def min_pairwise_distance(points: np.ndarray) -> float:
    points = np.atleast_2d(points)
    if points.shape[0] < 2:
        return np.inf
    d2 = np.sum((points[:, None, :] - points[None, :, :]) ** 2, axis=-1)
    np.fill_diagonal(d2, np.inf)
    return float(np.sqrt(d2.min()))
