"""Command-line entry points: build truth densities, run experiments, run
repeated campaigns, and export 2D field grids for plotting."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .acquisition import danger_score
from .driver import (
    ExperimentConfig,
    _export_iteration_fields,
    build_system,
    build_truth_pdf,
    clone_config,
    compare_campaign,
    load_log,
    load_surrogate,
    run_experiment,
)
from .stats import StandardNormalPrior, kde_grid, lhs_sample, weighted_kde

logger = logging.getLogger(__name__)


def load_config(path) -> ExperimentConfig:
    with open(path, "rb") as f:
        raw = tomllib.load(f)
    exp = dict(raw.get("experiment", {}))
    exp.setdefault("name", Path(path).stem)
    return ExperimentConfig(
        system=raw.get("system", {"kind": "sir"}),
        surrogate=raw.get("surrogate", {"kind": "dno"}),
        truth=raw.get("truth", {}),
        **exp,
    )


def load_campaign_spec(path):
    with open(path, "rb") as f:
        raw = tomllib.load(f)
    base = load_config(path)
    camp = raw.get("campaign", {})
    repeats = int(camp.get("repeats", 1))
    seeds = [int(s) for s in camp.get("seeds", range(repeats))]
    variants = []
    for var in camp.get("variants", [{"name": base.name}]):
        cfg = clone_config(base, name=var.get("name", base.name))
        if "acquisition" in var:
            cfg.acquisition = var["acquisition"]
        if "surrogate" in var:
            cfg.surrogate = {**base.surrogate, **var["surrogate"]}
        variants.append(cfg)
    return variants, repeats, seeds


def _cmd_truth(args) -> int:
    cfg = load_config(args.config)
    system = build_system(cfg.system)
    cache_dir = cfg.truth.get("cache_dir", Path(cfg.output_dir) / "truth_cache")
    truth = build_truth_pdf(system, system.bounds, cfg.n_test, cfg.truth_seed,
                            e0=cfg.e0, cache_dir=cache_dir,
                            grid_points=cfg.pdf_grid_points)
    print(f"truth density cached at {truth.cache_path} "
          f"({truth.inputs.shape[0]} test samples)")
    return 0


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    if args.output_dir:
        cfg = clone_config(cfg, output_dir=args.output_dir)
    log = run_experiment(cfg, resume=args.resume)
    final = log.records[-1]
    print(f"{cfg.name}: {len(log.records)} records, {final.n_samples} samples, "
          f"final log-pdf error {final.log_pdf_error:.4g}")
    print(f"log: {log.log_path}")
    return 0


def _cmd_campaign(args) -> int:
    variants, repeats, seeds = load_campaign_spec(args.config)
    result = compare_campaign(variants, repeats, seeds, output_path=args.output)
    print(f"campaign table: {result.table_path}")
    for name in result.names:
        print(f"  {name}: final median error {result.medians[name][-1]:.4g}")
    return 0


def _cmd_export_field(args) -> int:
    run_dir = Path(args.run_dir)
    import json

    manifest = json.loads((run_dir / "manifest.json").read_text())
    cfg = ExperimentConfig(**manifest["config"])
    system = build_system(cfg.system)
    if system.dim != 2:
        print("field export supports 2D systems only", file=sys.stderr)
        return 2
    surrogate = load_surrogate(run_dir / "checkpoint.npz")
    prior = StandardNormalPrior(system.dim)
    from .driver import _STREAM_PROBES, derived_seed

    probes = lhs_sample(cfg.n_pmu, system.bounds, derived_seed(cfg.seed, _STREAM_PROBES))
    weights = prior.density(probes)
    mu = np.asarray(surrogate.density_mean(probes))
    p_out = weighted_kde(mu, weights, kde_grid(mu, weights, n_points=cfg.pdf_grid_points))
    records = load_log(run_dir / "log.csv")
    data_inputs = np.vstack([r.batch_points for r in records if r.batch_points.size]
                            or [np.empty((0, 2))])
    from .stats import ObservationSet

    init = lhs_sample(cfg.n_init, system.bounds, derived_seed(cfg.seed, 1)) \
        if cfg.init_mode == "lhs" else None
    all_inputs = np.vstack([init, data_inputs]) if init is not None else data_inputs
    data = ObservationSet(all_inputs, np.zeros(all_inputs.shape[0]))
    _export_iteration_fields(run_dir, records[-1].iteration + 1, surrogate, system.bounds,
                             p_out, cfg.acquisition, data, cfg.n_init,
                             np.empty((0, 2)), args.grid)
    print(f"fields written under {run_dir / 'fields'}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="tailbed", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p_truth = sub.add_parser("truth", help="build and cache the truth output density")
    p_truth.add_argument("--config", required=True)
    p_truth.set_defaults(func=_cmd_truth)

    p_run = sub.add_parser("run", help="run one experiment")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--output-dir", default=None)
    p_run.add_argument("--resume", action="store_true",
                       help="continue from the last persisted iteration")
    p_run.set_defaults(func=_cmd_run)

    p_camp = sub.add_parser("campaign", help="run repeated experiments and tabulate")
    p_camp.add_argument("--config", required=True)
    p_camp.add_argument("--output", default=None, help="campaign table path")
    p_camp.set_defaults(func=_cmd_campaign)

    p_field = sub.add_parser("export-field",
                             help="export 2D mean/variance/danger/acquisition grids")
    p_field.add_argument("--run-dir", required=True)
    p_field.add_argument("--grid", type=int, default=65)
    p_field.set_defaults(func=_cmd_export_field)

    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
