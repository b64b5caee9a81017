"""Command-line entry point: ``sgmlab <command> [--config PATH] [--seed INT] [--out DIR] [--threads INT]``.

Every config key is also a flag of the same name (``--n_grid 64..4096``,
``--generator torus``); flags override the INI file.  The exit status is 0
exactly when every check the command performs passes.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from ..dimension import default_epsilon_grid, fit_minkowski_dimension, fit_wasserstein_pq_dimension, covering_profile
from ..measure_ot import read_measure_csv, multiscale_wp_upper_bound, wasserstein_p_entropic, wasserstein_p_exact
from .config import config_keys, load_config
from .experiments import (
    plot_rate,
    run_dim_estimate,
    run_emp_rate,
    run_pipeline_rate,
    run_train_score,
    write_fit,
    write_records,
)

COMMAND_EXPERIMENT = {
    "emp-rate": "emp_rate",
    "pipeline-rate": "pipeline_rate",
    "dim": "dim_estimate",
    "train-score": "train_score",
    "checks": "identity_checks",
}


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="INI file with experiment keys")
    parser.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    for key, default in config_keys().items():
        if key == "experiment":
            continue
        kind = str if isinstance(default, (list, str)) else type(default)
        parser.add_argument(f"--{key}", type=kind, default=None, help=f"default: {default!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sgmlab", description="Score-based generative model rate experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    wp = sub.add_parser("wp", help="W_p between two measure CSV files")
    wp.add_argument("first", type=Path)
    wp.add_argument("second", type=Path)
    wp.add_argument("--method", choices=("exact", "entropic", "multiscale"), default="exact")
    wp.add_argument("--reg", type=float, default=None, help="entropic regularisation")
    wp.add_argument("--s_level", type=int, default=0)
    wp.add_argument("--t_level", type=int, default=6)
    _add_config_flags(wp)

    dim = sub.add_parser("dim", help="covering profile and dimension estimates")
    dim.add_argument("measure", type=Path, nargs="?", help="measure CSV; omitted means sample from the config generator")
    _add_config_flags(dim)

    for name in ("emp-rate", "pipeline-rate", "train-score", "checks"):
        _add_config_flags(sub.add_parser(name))
    return parser


def _config(args, command: str):
    overrides = {k: getattr(args, k) for k in config_keys() if k != "experiment" and getattr(args, k, None) is not None}
    overrides["experiment"] = COMMAND_EXPERIMENT.get(command, "emp_rate")
    return load_config(args.config, overrides)


def _slope_ok(cfg, fit) -> bool:
    if not cfg.has_slope_window:
        return True
    return not fit.degenerate and cfg.slope_min <= fit.slope <= cfg.slope_max


def _rate(cfg, out: Path, runner, title: str) -> int:
    records, fit = runner(cfg)
    write_records(records, out / "records.csv")
    write_fit(fit, out / "fit.csv")
    plot_rate(records, fit, "wp", out / f"{cfg.experiment}.svg", title)
    ok = _slope_ok(cfg, fit)
    window = f" window [{cfg.slope_min}, {cfg.slope_max}]" if cfg.has_slope_window else ""
    print(f"{'PASS' if ok else 'FAIL'} slope {fit.slope:.4f} +- {fit.stderr_slope:.4f} over {fit.n_points} sizes{window}")
    return 0 if ok else 1


def _wp(args, cfg) -> int:
    a, b = read_measure_csv(args.first), read_measure_csv(args.second)
    if args.method == "exact":
        value = wasserstein_p_exact(a, b, cfg.p)[0]
    elif args.method == "entropic":
        value = wasserstein_p_entropic(a, b, cfg.p, reg=args.reg)
    else:
        value = multiscale_wp_upper_bound(a, b, cfg.p, args.s_level, args.t_level) ** (1.0 / cfg.p)
    print(repr(float(value)))
    return 0


def _dim(args, cfg, out: Path) -> int:
    if args.measure is None:
        records, estimates = run_dim_estimate(cfg)
        write_records(records, out / "records.csv")
        n, rep, mink, wpq, profile = estimates[-1]
    else:
        mu = read_measure_csv(args.measure)
        grid = cfg.epsilons or default_epsilon_grid(mu.points)
        mink = fit_minkowski_dimension(mu.points, grid)
        wpq = fit_wasserstein_pq_dimension(mu, cfg.p, cfg.q, grid)
        profile = covering_profile(mu, grid)
    profile.to_csv(out / "profile.csv")
    (out / "dimension.json").write_text(
        json.dumps({"minkowski": json.loads(mink.to_json()), "wasserstein_pq": json.loads(wpq.to_json())}, indent=2)
    )
    print(f"minkowski {mink.slope:.3f} (r2 {mink.r_squared:.3f}), wasserstein_pq {wpq.slope:.3f}{' saturated' if wpq.saturated else ''}")
    return 0


def _train(cfg, out: Path) -> int:
    from ..score_model import write_loss_trace

    score, trace, hp = run_train_score(cfg)
    score.params.save(out / "model.txt")
    write_loss_trace(trace, out / "loss.csv")
    print(f"loss {trace[0]:.4g} -> {trace[-1]:.4g} over {len(trace) - 1} steps, {hp.kappa:.3g} step ratio")
    return 0


def _checks(cfg, out: Path) -> int:
    from .checks import run_identity_checks

    records, results = run_identity_checks(cfg)
    write_records(records, out / "records.csv")
    for r in results:
        print(r.line())
    return 0 if all(r.passed for r in results) else 1


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _config(args, args.command)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(cfg.to_ini())
    try:
        return _dispatch(args, cfg, out)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def _dispatch(args, cfg, out: Path) -> int:
    if args.command == "wp":
        return _wp(args, cfg)
    if args.command == "dim":
        return _dim(args, cfg, out)
    if args.command == "emp-rate":
        return _rate(cfg, out, run_emp_rate, f"empirical W_{cfg.p:g}, {cfg.generator} d={cfg.d} D={cfg.D}")
    if args.command == "pipeline-rate":
        return _rate(cfg, out, run_pipeline_rate, f"sampler W_{cfg.p:g}, {cfg.generator} d={cfg.d} D={cfg.D}")
    if args.command == "train-score":
        return _train(cfg, out)
    return _checks(cfg, out)


if __name__ == "__main__":
    sys.exit(main())
