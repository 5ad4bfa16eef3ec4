"""Experiment orchestration: truth-density construction and caching, the
sequential acquisition loop, repeated-campaign comparison, persistence, and the
delimited-text log formats consumed by external tooling."""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import time
import warnings
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path

import numpy as np

from . import __version__
from .acquisition import acq_us, acq_uslw, batch_select, danger_score, mc_optimize
from .dno import DnoConfig, dno_train, load_ensemble, save_ensemble
from .errors import TrainingFailure
from .gp import GpModel, gp_fit
from .stats import (
    Bounds,
    ObservationSet,
    PdfEstimate,
    StandardNormalPrior,
    kde_grid,
    lhs_sample,
    log_pdf_error,
    prior_density,
    weighted_kde,
)
from .systems import (
    MmtConfig,
    MmtSystem,
    SirConfig,
    SirSystem,
    TabulatedSearchSystem,
    default_mmt_basis,
    default_sir_basis,
    load_tabulated,
)

logger = logging.getLogger(__name__)

# Seed-stream ids for deriving independent per-component generators
_STREAM_INIT, _STREAM_PROBES, _STREAM_TRAIN, _STREAM_MC, _STREAM_LHS = range(1, 6)


def derived_seed(master: int, stream: int, iteration: int = 0) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(master), int(stream), int(iteration)])


@dataclass
class ExperimentConfig:
    """Full description of one sequential-search experiment."""

    name: str = "experiment"
    output_dir: str = "runs/experiment"
    seed: int = 0
    acquisition: str = "uslw"        # lhs | us | uslw
    n_init: int = 3
    init_mode: str = "lhs"           # lhs | prior
    n_iter: int = 10
    n_b: int = 1
    r_l: float = 0.025
    n_q: int = 100_000
    n_pmu: int = 100_000
    pdf_grid_points: int = 512
    export_fields: bool = False
    field_grid_points: int = 65
    system: dict = field(default_factory=lambda: {"kind": "sir"})
    surrogate: dict = field(default_factory=lambda: {"kind": "dno"})
    truth: dict = field(default_factory=dict)

    def __post_init__(self):
        if min(self.n_init, self.n_iter + 1, self.n_b, self.n_q, self.n_pmu) < 1:
            raise ValueError("all counts must be >= 1 (n_iter may be 0)")
        if self.acquisition not in ("lhs", "us", "uslw"):
            raise ValueError(f"unknown acquisition '{self.acquisition}'")
        if self.init_mode not in ("lhs", "prior"):
            raise ValueError(f"unknown init mode '{self.init_mode}'")
        if self.acquisition == "lhs" and not self.export_fields:
            warnings.warn("acquisition=lhs ignores surrogate-driven selection fields "
                          "(n_q, r_l)", stacklevel=2)

    @property
    def n_test(self) -> int:
        return int(self.truth.get("n_test", 20_000))

    @property
    def truth_seed(self) -> int:
        return int(self.truth.get("seed", 10_000))

    @property
    def e0(self) -> float:
        default = 1e7 if self.system.get("kind", "sir") == "sir" else 1.0
        return float(self.system.get("e0", default))


def clone_config(cfg: ExperimentConfig, **updates) -> ExperimentConfig:
    clone = copy.deepcopy(cfg)
    for key, value in updates.items():
        setattr(clone, key, value)
    return clone


def build_system(system_cfg: dict):
    """Instantiate a truth map from its config table."""
    params = dict(system_cfg)
    kind = params.pop("kind", "sir")
    params.pop("e0", None)
    bound = float(params.pop("bound", 6.0))
    if kind == "sir":
        n_modes = int(params.pop("n_modes", 2))
        basis = default_sir_basis(
            n_modes=n_modes,
            n_sensors=int(params.pop("n_sensors", 125)),
            variance=float(params.pop("kernel_variance", 0.1)),
            lengthscale=float(params.pop("kernel_lengthscale", 1.0)),
            horizon=float(params.get("horizon", 45.0)),
        )
        cfg = SirConfig(basis=basis, **params)
        return SirSystem(cfg, Bounds.symmetric(bound, n_modes))
    if kind == "mmt":
        n_modes = int(params.pop("n_modes", 1))
        n_x = int(params.get("n_x", 512))
        basis = default_mmt_basis(
            n_modes=n_modes,
            n_x=n_x,
            variance=float(params.pop("kernel_variance", 1.0)),
            lengthscale=float(params.pop("kernel_lengthscale", 0.35)),
        )
        cfg = MmtConfig(basis=basis, **params)
        return MmtSystem(cfg, Bounds.symmetric(bound, 2 * n_modes))
    if kind == "tabulated":
        table = load_tabulated(params["path"],
                               match_tolerance=float(params.get("match_tolerance", 1e-9)))
        lo = table.inputs.min(axis=0)
        hi = table.inputs.max(axis=0)
        pad = 1e-9 * np.maximum(1.0, np.abs(hi))
        return TabulatedSearchSystem(table, Bounds(lo - pad, hi + pad))
    raise ValueError(f"unknown system kind '{kind}'")


# --- Truth density ---------------------------------------------------------------


@dataclass(eq=False)
class TruthPdf:
    inputs: np.ndarray
    outputs: np.ndarray
    weights: np.ndarray
    pdf: PdfEstimate
    cache_path: Path | None = None


def build_truth_pdf(system, bounds: Bounds, n_test: int, seed: int, e0: float = 1.0,
                    cache_dir=None, grid_points: int = 512,
                    max_failure_frac: float = 1e-3) -> TruthPdf:
    """Monte Carlo truth density of the QoI: LHS test inputs weighted by the
    prior, passed through the system, normalized by e0 and density-estimated.
    Cached to disk keyed by the system fingerprint, sample count, and seed."""
    cache_path = None
    if cache_dir is not None:
        key = hashlib.sha256(
            f"{system.fingerprint()}|{n_test}|{seed}|{e0!r}|{grid_points}|"
            f"{bounds.lower.tobytes().hex()}|{bounds.upper.tobytes().hex()}".encode()
        ).hexdigest()[:16]
        cache_path = Path(cache_dir) / f"truth_{key}.npz"
        if cache_path.exists():
            with np.load(cache_path) as data:
                return TruthPdf(data["inputs"], data["outputs"], data["weights"],
                                PdfEstimate(data["grid"], data["density"],
                                            float(data["bandwidth"])),
                                cache_path)

    if isinstance(system, TabulatedSearchSystem):
        # a tabulated map is only evaluable on its stored rows
        inputs = system.candidate_pool()
        if inputs.shape[0] > n_test:
            keep = np.random.default_rng(seed).choice(inputs.shape[0], n_test,
                                                      replace=False)
            inputs = inputs[np.sort(keep)]
    else:
        inputs = lhs_sample(n_test, bounds, seed)
    outputs = system.evaluate(inputs)
    ok = np.isfinite(outputs)
    n_failed = int(np.count_nonzero(~ok))
    if n_failed > max_failure_frac * n_test:
        raise RuntimeError(f"{n_failed}/{n_test} system evaluations failed")
    if n_failed:
        warnings.warn(f"dropped {n_failed} failed test evaluations", stacklevel=2)
        inputs, outputs = inputs[ok], outputs[ok]
    weights = prior_density(inputs)
    values = outputs / e0
    grid = kde_grid(values, weights, n_points=grid_points)
    pdf = weighted_kde(values, weights, grid)

    if cache_path is not None:
        cache_path.parent.mkdir(parents=True, exist_ok=True)
        np.savez_compressed(cache_path, inputs=inputs, outputs=outputs, weights=weights,
                            grid=pdf.grid, density=pdf.density, bandwidth=pdf.bandwidth)
    return TruthPdf(inputs, outputs, weights, pdf, cache_path)


# --- Logs --------------------------------------------------------------------------


_LOG_COLUMNS = ("iteration", "n_samples", "log_pdf_error", "wall_time_s",
                "batch_points", "batch_qois")


@dataclass
class IterationRecord:
    iteration: int
    n_samples: int
    log_pdf_error: float
    wall_time_s: float
    batch_points: np.ndarray
    batch_qois: np.ndarray

    def to_row(self) -> list[str]:
        pts = ";".join(" ".join(f"{v:.17g}" for v in p) for p in self.batch_points)
        qois = ";".join(f"{v:.17g}" for v in self.batch_qois)
        return [str(self.iteration), str(self.n_samples), f"{self.log_pdf_error:.17g}",
                f"{self.wall_time_s:.6f}", pts, qois]

    @classmethod
    def from_row(cls, row: list[str]) -> "IterationRecord":
        pts = np.array([[float(v) for v in p.split(" ")] for p in row[4].split(";") if p])
        qois = np.array([float(v) for v in row[5].split(";") if v])
        if pts.size == 0:
            pts = pts.reshape(0, 0)
        return cls(int(row[0]), int(row[1]), float(row[2]), float(row[3]), pts, qois)


@dataclass
class ExperimentLog:
    records: list
    output_dir: Path
    log_path: Path
    checkpoint_path: Path | None = None

    @property
    def errors(self) -> np.ndarray:
        return np.array([r.log_pdf_error for r in self.records])

    @property
    def sample_counts(self) -> np.ndarray:
        return np.array([r.n_samples for r in self.records])


def load_log(path) -> list:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if tuple(header) != _LOG_COLUMNS:
            raise ValueError(f"unexpected log header {header}")
        return [IterationRecord.from_row(row) for row in reader]


def _write_pdf_csv(path, pdf: PdfEstimate) -> None:
    np.savetxt(path, np.column_stack([pdf.grid, pdf.density]), delimiter=",",
               header="grid,density", comments="")


# --- Experiment loop ----------------------------------------------------------------


def _fit_surrogate(data: ObservationSet, surrogate_cfg: dict, system, seed):
    params = dict(surrogate_cfg)
    kind = params.pop("kind", "dno")
    if kind == "dno":
        restarts = params.pop("restarts", None)
        if restarts is not None:
            logger.debug("ignoring gp-only 'restarts' for dno surrogate")
        return dno_train(data, system.basis, DnoConfig(**params), seed=seed)
    if kind == "gp":
        return gp_fit(data, restarts=int(params.pop("restarts", 8)), seed=seed)
    raise ValueError(f"unknown surrogate kind '{kind}'")


def _surrogate_pdf(surrogate, inputs, weights, grid, e0: float) -> PdfEstimate:
    """Error-metric density: the mean model re-evaluated on the frozen truth inputs."""
    mu = surrogate.predict(inputs)[0]
    return weighted_kde(np.asarray(mu) / e0, weights, grid)


def _acquisition_callable(kind: str, p_out):
    if kind == "us":
        return acq_us
    if kind == "uslw":
        return partial(acq_uslw, p_out=p_out)
    raise ValueError(f"'{kind}' is not a surrogate-driven acquisition")


def _save_surrogate(surrogate, path: Path) -> None:
    if isinstance(surrogate, GpModel):
        np.savez_compressed(path, kind="gp", inputs=surrogate.train_inputs,
                            targets=surrogate.train_targets, sigma_f2=surrogate.sigma_f2,
                            ell2=surrogate.ell2, sigma_eps2=surrogate.sigma_eps2,
                            m0=surrogate.m0, y_mean=surrogate.y_mean,
                            y_scale=surrogate.y_scale)
    else:
        save_ensemble(surrogate, path)


def load_surrogate(path: Path):
    with np.load(path) as data:
        if "kind" in data and str(data["kind"]) == "gp":
            return GpModel(train_inputs=data["inputs"], train_targets=data["targets"],
                           sigma_f2=float(data["sigma_f2"]), ell2=data["ell2"],
                           sigma_eps2=float(data["sigma_eps2"]), m0=float(data["m0"]),
                           y_mean=float(data["y_mean"]), y_scale=float(data["y_scale"]))
    return load_ensemble(path)


def _export_iteration_fields(outdir: Path, iteration: int, surrogate, bounds: Bounds,
                             p_out, acq_kind: str, data: ObservationSet, n_init: int,
                             next_points: np.ndarray, grid_points: int) -> None:
    """Write gridded 2D mean/variance/danger/acquisition fields plus a sample table."""
    fields_dir = outdir / "fields"
    fields_dir.mkdir(exist_ok=True)
    g1 = np.linspace(bounds.lower[0], bounds.upper[0], grid_points)
    g2 = np.linspace(bounds.lower[1], bounds.upper[1], grid_points)
    xx, yy = np.meshgrid(g1, g2, indexing="ij")
    pts = np.column_stack([xx.ravel(), yy.ravel()])
    mu, var = surrogate.predict(pts)
    w = danger_score(pts, surrogate, p_out) if p_out is not None else np.full(len(pts), np.nan)
    if acq_kind == "uslw":
        a = w * var
    else:
        a = var
    for name, values in (("mean", mu), ("variance", var), ("danger", w),
                         ("acquisition", a)):
        np.savetxt(fields_dir / f"iter{iteration:04d}_{name}.csv",
                   np.column_stack([pts, values]), delimiter=",",
                   header="x1,x2,value", comments="")
    rows = []
    for p in data.inputs[:n_init]:
        rows.append((p[0], p[1], "init"))
    for p in data.inputs[n_init:]:
        rows.append((p[0], p[1], "acquired"))
    for p in np.atleast_2d(next_points):
        rows.append((p[0], p[1], "next"))
    with open(fields_dir / f"iter{iteration:04d}_samples.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["x1", "x2", "kind"])
        for row in rows:
            writer.writerow([f"{row[0]:.17g}", f"{row[1]:.17g}", row[2]])


def run_experiment(cfg: ExperimentConfig, resume: bool = False) -> ExperimentLog:
    """Execute the sequential search loop.

    Initialization, per-iteration training, candidate generation, and the LHS
    baseline each use independent seed streams derived from cfg.seed, so a
    resumed run reproduces the remaining trajectory of an uninterrupted one.
    The log file is appended and flushed every iteration.
    """
    outdir = Path(cfg.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    system = build_system(cfg.system)
    bounds = system.bounds
    prior = StandardNormalPrior(system.dim)
    e0 = cfg.e0

    manifest = {
        "config": _config_dict(cfg),
        "versions": {"tailbed": __version__, "numpy": np.__version__},
    }
    (outdir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))

    truth = build_truth_pdf(
        system, bounds, cfg.n_test, cfg.truth_seed, e0=e0,
        cache_dir=cfg.truth.get("cache_dir", outdir / "truth_cache"),
        grid_points=cfg.pdf_grid_points)
    _write_pdf_csv(outdir / "pdf_truth.csv", truth.pdf)

    surrogate_driven = cfg.acquisition in ("us", "uslw")
    need_pout = cfg.acquisition == "uslw" or cfg.export_fields
    probes = lhs_sample(cfg.n_pmu, bounds, derived_seed(cfg.seed, _STREAM_PROBES)) \
        if need_pout else None
    probe_weights = prior.density(probes) if need_pout else None
    pool_based = isinstance(system, TabulatedSearchSystem)

    log_path = outdir / "log.csv"
    state_path = outdir / "state.npz"
    records: list[IterationRecord] = []
    start_iter = 0
    resumed = resume and state_path.exists()
    if resumed:
        with np.load(state_path) as st:
            data = ObservationSet(st["inputs"], st["outputs"])
            start_iter = int(st["iteration"])
        records = [r for r in load_log(log_path) if r.iteration <= start_iter]
        logger.info("resuming %s at iteration %d (%d samples)",
                    cfg.name, start_iter, len(data))
    else:
        init_seed = derived_seed(cfg.seed, _STREAM_INIT)
        if cfg.init_mode == "lhs":
            x0 = lhs_sample(cfg.n_init, bounds, init_seed)
        else:
            x0 = np.clip(prior.sample(cfg.n_init, init_seed), bounds.lower, bounds.upper)
        if pool_based:
            x0 = system.snap(x0)
        data = ObservationSet(x0, system.evaluate(x0))

    # rewrite the log from the kept records so a partially written tail never
    # survives a resume
    log_file = open(log_path, "w", newline="")
    log_writer = csv.writer(log_file)
    log_writer.writerow(_LOG_COLUMNS)
    for r in records:
        log_writer.writerow(r.to_row())
    log_file.flush()

    def persist_state(iteration: int):
        np.savez_compressed(state_path, inputs=data.inputs, outputs=data.outputs,
                            iteration=iteration)

    def record(iteration: int, error: float, elapsed: float, pts, qois):
        rec = IterationRecord(iteration, len(data), error, elapsed,
                              np.atleast_2d(pts) if np.size(pts) else np.empty((0, system.dim)),
                              np.atleast_1d(qois) if np.size(qois) else np.empty(0))
        records.append(rec)
        log_writer.writerow(rec.to_row())
        log_file.flush()

    def fit(iteration: int):
        seed = derived_seed(cfg.seed, _STREAM_TRAIN, iteration)
        try:
            return _fit_surrogate(data, cfg.surrogate, system, seed)
        except TrainingFailure:
            logger.warning("training failed at iteration %d; retrying with fresh seed",
                           iteration)
            retry = derived_seed(cfg.seed, _STREAM_TRAIN, 10_000_000 + iteration)
            return _fit_surrogate(data, cfg.surrogate, system, retry)

    def error_of(surrogate) -> float:
        p_mu = _surrogate_pdf(surrogate, truth.inputs, truth.weights, truth.pdf.grid, e0)
        return log_pdf_error(p_mu, truth.pdf)

    try:
        t0 = time.perf_counter()
        surrogate = fit(start_iter)
        if start_iter == 0 and not resumed:
            record(0, error_of(surrogate), time.perf_counter() - t0,
                   np.empty((0, system.dim)), np.empty(0))
            persist_state(0)

        for i in range(start_iter + 1, cfg.n_iter + 1):
            t0 = time.perf_counter()
            p_out = None
            if need_pout:
                # acquisition-side output density stays in raw QoI units so it is
                # directly comparable with surrogate means (e0 only normalizes the
                # error-metric densities)
                mu_probes = np.asarray(surrogate.density_mean(probes))
                grid = kde_grid(mu_probes, probe_weights, n_points=cfg.pdf_grid_points)
                p_out = weighted_kde(mu_probes, probe_weights, grid)
            if surrogate_driven:
                pool = None
                if pool_based:
                    pool = _unused_pool(system, data)
                acq = _acquisition_callable(cfg.acquisition, p_out)
                acq_field = mc_optimize(surrogate, acq, bounds, cfg.n_q,
                                        derived_seed(cfg.seed, _STREAM_MC, i),
                                        candidates=pool)
                batch = batch_select(acq_field, cfg.n_b, cfg.r_l)
                pts = batch.points
            else:
                pts = lhs_sample(cfg.n_b, bounds, derived_seed(cfg.seed, _STREAM_LHS, i))
                if pool_based:
                    pts = system.snap(pts, exclude=data.inputs)
            if cfg.export_fields and system.dim == 2:
                _export_iteration_fields(outdir, i, surrogate, bounds, p_out,
                                         cfg.acquisition, data, cfg.n_init, pts,
                                         cfg.field_grid_points)
            qois = system.evaluate(pts)
            data = data.extended(pts, qois)
            surrogate = fit(i)
            record(i, error_of(surrogate), time.perf_counter() - t0, pts, qois)
            persist_state(i)
    finally:
        log_file.close()

    checkpoint_path = outdir / "checkpoint.npz"
    _save_surrogate(surrogate, checkpoint_path)
    p_mu = _surrogate_pdf(surrogate, truth.inputs, truth.weights, truth.pdf.grid, e0)
    _write_pdf_csv(outdir / "pdf_final.csv", p_mu)
    return ExperimentLog(records, outdir, log_path, checkpoint_path)


def _unused_pool(system: TabulatedSearchSystem, data: ObservationSet) -> np.ndarray:
    pool = system.candidate_pool()
    used = {tuple(row) for row in data.inputs}
    keep = np.array([tuple(row) not in used for row in pool])
    return pool[keep] if keep.any() else pool


def _config_dict(cfg: ExperimentConfig) -> dict:
    return {
        "name": cfg.name, "output_dir": str(cfg.output_dir), "seed": cfg.seed,
        "acquisition": cfg.acquisition, "n_init": cfg.n_init, "init_mode": cfg.init_mode,
        "n_iter": cfg.n_iter, "n_b": cfg.n_b, "r_l": cfg.r_l, "n_q": cfg.n_q,
        "n_pmu": cfg.n_pmu, "pdf_grid_points": cfg.pdf_grid_points,
        "export_fields": cfg.export_fields, "field_grid_points": cfg.field_grid_points,
        "system": cfg.system, "surrogate": cfg.surrogate, "truth": dict(cfg.truth),
    }


# --- Campaigns ----------------------------------------------------------------------


@dataclass
class CampaignResult:
    table_path: Path
    names: list
    medians: dict
    stds: dict
    trajectories: dict


def compare_campaign(cfgs: list, n_repeats: int, seeds: list,
                     output_path=None) -> CampaignResult:
    """Run each config n_repeats times (seeds shared across configs) and tabulate
    per-iteration median and standard deviation of the log-density error."""
    if len(seeds) < n_repeats:
        raise ValueError("need one seed per repeat")
    base = _config_dict(cfgs[0])
    for other in cfgs[1:]:
        diff = {k for k in base
                if k not in ("name", "output_dir", "surrogate", "acquisition")
                and _config_dict(other)[k] != base[k]}
        if diff:
            warnings.warn(f"campaign configs differ beyond surrogate/acquisition: {diff}",
                          stacklevel=2)

    shared_cache = str(Path(cfgs[0].output_dir) / "truth_cache")
    trajectories: dict = {}
    for cfg in cfgs:
        runs = []
        for r in range(n_repeats):
            truth_cfg = dict(cfg.truth)
            truth_cfg.setdefault("cache_dir", shared_cache)
            run_cfg = clone_config(
                cfg, seed=int(seeds[r]), truth=truth_cfg,
                output_dir=str(Path(cfg.output_dir) / cfg.name / f"rep{r}"))
            try:
                runs.append(run_experiment(run_cfg).errors)
            except Exception:
                logger.exception("repeat %d of '%s' aborted; column marked missing",
                                 r, cfg.name)
                runs.append(None)
        trajectories[cfg.name] = runs

    n_records = max(len(t) for runs in trajectories.values() for t in runs if t is not None)
    names = [cfg.name for cfg in cfgs]
    medians, stds = {}, {}
    for name in names:
        mat = np.full((n_repeats, n_records), np.nan)
        for r, t in enumerate(trajectories[name]):
            if t is not None:
                mat[r, :len(t)] = t
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)  # all-NaN slices stay NaN
            medians[name] = np.nanmedian(mat, axis=0)
            stds[name] = np.nanstd(mat, axis=0)

    if output_path is None:
        output_path = Path(cfgs[0].output_dir) / "campaign.csv"
    output_path = Path(output_path)
    output_path.parent.mkdir(parents=True, exist_ok=True)
    n_init = cfgs[0].n_init
    n_b = cfgs[0].n_b
    with open(output_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["iteration", "n_samples"]
                        + [f"{n}_median" for n in names] + [f"{n}_std" for n in names])
        for i in range(n_records):
            row = [str(i), str(n_init + i * n_b)]
            row += [f"{medians[n][i]:.17g}" for n in names]
            row += [f"{stds[n][i]:.17g}" for n in names]
            writer.writerow(row)
    return CampaignResult(output_path, names, medians, stds, trajectories)
