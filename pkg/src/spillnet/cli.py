"""Command-line entry point.

Four subcommands wire a declarative TOML config to the library:

    spillnet simulate --config cfg.toml --out data/
    spillnet estimate --data data/ --estimators twfe,gps --out reports.json
    spillnet mc       --config cfg.toml --out results/
    spillnet fk       --config cfg.toml --out results/

Exit statuses: 0 success, 2 usage/config error, 3 numerical failure.  Given
the same config and seed every command reproduces its outputs byte for byte
(wall-clock stamps are confined to run_meta.json); interrupted sweeps resume
from the completed-replication log.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
import time
from pathlib import Path

import numpy as np

from .config import RunConfig, load_config
from .core import (
    ConfigId,
    EstimatorError,
    InputError,
    SolverError,
    config_params,
    load_dataset,
    save_dataset,
)
from .dgp import simulate_dataset
from .estimators import ESTIMATORS
from .feynman_kac import distance_profile
from .harness import (
    event_study_panel,
    run_mc,
    summarize,
    uncertainty_table,
    write_records_csv,
    write_summary_csv,
)
from .pde import StructuralParams

__all__ = ["main"]


def _write_meta(out: Path, command: str, started: float) -> None:
    meta = {
        "command": command,
        "started_unix": started,
        "finished_unix": time.time(),
    }
    with open(out / "run_meta.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(
            cfg,
            sim_seed=args.seed,
            plan=dataclasses.replace(cfg.plan, base_seed=args.seed),
            fk=dataclasses.replace(cfg.fk, seed=args.seed),
        )
    if getattr(args, "workers", None) is not None:
        cfg = dataclasses.replace(cfg, plan=dataclasses.replace(cfg.plan, n_workers=args.workers))
    return cfg


def cmd_simulate(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    started = time.time()
    out = Path(args.out)
    dataset = simulate_dataset(cfg.sim_config, cfg.settings, cfg.sim_seed)
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(dataset, out)
    _write_meta(out, "simulate", started)
    print(f"wrote dataset ({dataset.n_units} units) to {out}")
    return 0


def cmd_estimate(args) -> int:
    names = [n.strip() for n in args.estimators.split(",") if n.strip()]
    unknown = [n for n in names if n not in ESTIMATORS]
    if unknown:
        raise InputError(f"unknown estimator(s) {unknown}; valid: {sorted(ESTIMATORS)}")
    dataset = load_dataset(args.data)
    reports = []
    for name in names:
        reports.append(json.loads(ESTIMATORS[name](dataset).to_json()))
    payload = json.dumps(reports, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(payload + "\n")
        print(f"wrote {len(reports)} report(s) to {args.out}")
    else:
        print(payload)
    return 0


def cmd_mc(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    started = time.time()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    partial = out / "mc_records.partial.csv"
    records = run_mc(cfg.plan, partial_path=partial, progress=args.verbose)
    write_records_csv(records, out / "mc_records.csv")
    summary = summarize(records)
    write_summary_csv(summary, out / "mc_summary.csv")
    from .plots import plot_mc_summary

    plot_mc_summary(summary, out / "mc_summary.png")
    if cfg.event_study:
        _emit_event_study(cfg, out)
    if cfg.uncertainty:
        _emit_uncertainty(cfg, out, seed=cfg.plan.base_seed)
    if partial.exists():
        partial.unlink()
    _write_meta(out, "mc", started)
    print(f"wrote {len(records)} records to {out}")
    return 0


def _emit_event_study(cfg: RunConfig, out: Path) -> None:
    from .plots import plot_event_study

    kappa = cfg.event_study_kappa
    panel_a = event_study_panel(
        kappa, None, T=20, treat_time=5, M=cfg.event_study_replications,
        base_seed=cfg.plan.base_seed, mode=cfg.event_study_mode,
    )
    panel_b = event_study_panel(
        kappa,
        StructuralParams(2.0, 0.5, kappa, 0.4),
        T=20,
        treat_time=5,
        M=cfg.event_study_replications,
        base_seed=cfg.plan.base_seed,
        mode=cfg.event_study_mode,
    )
    with open(out / "event_study.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        names = sorted(panel_a.paths)
        writer.writerow(["panel", "horizon", "true_effect"] + names)
        for panel_name, panel in (("A", panel_a), ("B", panel_b)):
            for i, k in enumerate(panel.horizons):
                writer.writerow(
                    [panel_name, int(k), "%.17g" % panel.true_path[i]]
                    + ["%.17g" % panel.paths[n][i] for n in names]
                )
    plot_event_study(panel_a, out / "event_study_panel_a.png", title="no spillovers")
    plot_event_study(panel_b, out / "event_study_panel_b.png", title="full spillover model")


def _fit_posterior(cfg: RunConfig, which: ConfigId, seed: int):
    """Posterior (mean, cov) for the path-integral commands."""
    if cfg.fk.posterior == "point":
        theta = config_params(which).as_array()
        return theta, np.zeros((4, 4))
    from .estimators import full_gmm

    dataset = simulate_dataset(which, cfg.settings, seed)
    report = full_gmm(dataset, hac=cfg.hac)
    theta = np.array(
        [report.estimates[k] for k in ("nu_s", "nu_n", "kappa", "lam")]
    )
    return theta, np.asarray(report.covariance)


def _emit_uncertainty(cfg: RunConfig, out: Path, seed: int) -> None:
    from .plots import plot_uncertainty_bands

    theta, cov = _fit_posterior(cfg, cfg.fk.config, seed)
    rows = uncertainty_table(
        theta,
        cov,
        settings=cfg.settings,
        bands=cfg.fk.bands,
        t=cfg.fk.t,
        dt=cfg.fk.dt,
        B=cfg.fk.draws,
        M=cfg.fk.paths,
        seed=seed,
    )
    with open(out / "uncertainty.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["band_lo", "band_hi", "mean", "total_variance", "within_pct", "parameter_pct"]
        )
        for r in rows:
            writer.writerow(
                [
                    "%.17g" % r["band_lo"],
                    "%.17g" % r["band_hi"],
                    "%.17g" % r["mean"],
                    "%.17g" % r["total_variance"],
                    "%.17g" % r["within_pct"],
                    "%.17g" % r["parameter_pct"],
                ]
            )
    plot_uncertainty_bands(rows, out / "uncertainty.png")


def cmd_fk(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    started = time.time()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    theta, cov = _fit_posterior(cfg, cfg.fk.config, cfg.fk.seed)
    source = lambda x, alpha: cfg.settings.s0 * (x[:, 0] > cfg.settings.border) * (
        1.0 + 0.3 * np.asarray(alpha)
    )
    from .core import SpatialDomain

    eval_domain = SpatialDomain(
        x1_extent=(cfg.settings.border - 250.0, cfg.settings.border + 250.0),
        x2_extent=(-200.0, 300.0),
        alpha_range=cfg.settings.domain.alpha_range,
    )
    rows = distance_profile(
        (theta, cov),
        source,
        cfg.fk.distances,
        t=cfg.fk.t,
        dt=cfg.fk.dt,
        B=cfg.fk.draws,
        M=cfg.fk.paths,
        seed=cfg.fk.seed,
        border=cfg.settings.border,
        domain=eval_domain,
    )
    with open(out / "profile.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["distance", "mean", "lo68", "hi68", "lo95", "hi95"])
        for r in rows:
            writer.writerow(["%.17g" % r[k] for k in ("distance", "mean", "lo68", "hi68", "lo95", "hi95")])
    from .plots import plot_distance_profile

    plot_distance_profile(rows, out / "profile.png")
    _emit_uncertainty(cfg, out, seed=cfg.fk.seed)
    _write_meta(out, "fk", started)
    print(f"wrote profile and decomposition to {out}")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spillnet",
        description="simulate, estimate, and benchmark spatial-network treatment effects",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="generate a synthetic dataset")
    p_sim.add_argument("--config", required=True)
    p_sim.add_argument("--out", required=True)
    p_sim.add_argument("--seed", type=int)
    p_sim.set_defaults(fn=cmd_simulate)

    p_est = sub.add_parser("estimate", help="run estimators on a dataset directory")
    p_est.add_argument("--data", required=True)
    p_est.add_argument("--estimators", required=True, help="comma-separated estimator names")
    p_est.add_argument("--out", default=None)
    p_est.set_defaults(fn=cmd_estimate)

    p_mc = sub.add_parser("mc", help="run the replication study")
    p_mc.add_argument("--config", required=True)
    p_mc.add_argument("--out", required=True)
    p_mc.add_argument("--seed", type=int)
    p_mc.add_argument("--workers", type=int)
    p_mc.add_argument("--verbose", action="store_true")
    p_mc.set_defaults(fn=cmd_mc)

    p_fk = sub.add_parser("fk", help="path-integral profile and uncertainty split")
    p_fk.add_argument("--config", required=True)
    p_fk.add_argument("--out", required=True)
    p_fk.add_argument("--seed", type=int)
    p_fk.set_defaults(fn=cmd_fk)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (InputError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (SolverError, EstimatorError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
