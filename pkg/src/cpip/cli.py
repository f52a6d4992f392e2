"""Command-line interface.

Exit codes: 0 ok, 2 config error, 3 data error, 4 numerical degeneracy.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .estimation import curve_from_predictions, positivity_diagnostic
from .inference import DegenerateVarianceError, infer
from .io import (
    ConfigError,
    PolicyConfig,
    header_lines,
    load_config,
    read_data,
    render_csv,
    write_dataset_csv,
)
from .nuisance import (
    ConvergenceWarning,
    DataError,
    assign_folds,
    cross_fit_predict,
    fit_nuisances,
    fit_propensity,
    predict_propensity,
)
from .simulation import (
    REGIMES,
    REPORT_COLUMNS,
    SETUPS,
    generate,
    run_benchmark,
    setup_config,
)
from .tilt import DegenerateKernelError, TiltConfig, cpip_coupling, pushforward, tilted_marginals

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _grid_override(args, grid: np.ndarray) -> np.ndarray:
    given = [args.delta_min, args.delta_max, args.delta_points]
    if all(v is None for v in given):
        return grid
    if any(v is None for v in given):
        raise ConfigError("--delta-min, --delta-max and --delta-points go together")
    if args.delta_points < 1 or (args.delta_points > 1 and args.delta_max <= args.delta_min):
        raise ConfigError("--delta grid must be increasing with at least one point")
    return np.linspace(args.delta_min, args.delta_max, args.delta_points)


def _with_grid(cfg: PolicyConfig, grid: np.ndarray) -> PolicyConfig:
    cfg.tilt = TiltConfig(cfg.tilt.nu, cfg.tilt.cost, grid)
    return cfg


def _parse_pi(text: str, K: int) -> np.ndarray:
    try:
        pi = np.array([float(x) for x in text.split(",")])
    except ValueError:
        raise ConfigError(f"--pi must be comma-separated numbers, got {text!r}") from None
    if pi.shape != (K,):
        raise ConfigError(f"--pi needs {K} entries, got {pi.size}")
    if np.any(pi < 0) or abs(pi.sum() - 1) > 1e-9:
        raise ConfigError("--pi must be a probability vector")
    return pi / pi.sum()


def _emit(text: str, out) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _seed(args, cfg: PolicyConfig | None = None) -> int:
    if args.seed is not None:
        return args.seed
    return cfg.seed if cfg is not None else 0


def cmd_tilt(args) -> int:
    cfg = load_config(args.config)
    cfg = _with_grid(cfg, _grid_override(args, cfg.tilt.delta_grid))
    tilt = cfg.tilt
    if (args.pi is None) == (args.data is None):
        raise ConfigError("give exactly one of --pi or --data")
    if args.pi is not None:
        pi = _parse_pi(args.pi, tilt.K)[None, :]
    else:
        data = read_data(args.data, cfg.actions, cfg.data)
        model = fit_propensity(data, floor=cfg.prop_floor)
        pi = predict_propensity(model, data.W)
    rows = []
    for d in tilt.delta_grid:
        src, tgt = tilted_marginals(pi, tilt, d)
        push = pushforward(pi, tilt, d)
        avg = [x.mean(axis=0) for x in (pi, src, tgt, push)]
        for k, label in enumerate(cfg.actions.labels):
            rows.append([d, label, avg[0][k], tilt.nu[k], avg[1][k], avg[2][k], avg[3][k]])
    cols = ["delta", "action", "pi", "nu", "pi_star", "nu_star", "nu_pushforward"]
    _emit(render_csv(cols, rows, header_lines("tilt", _seed(args, cfg), cfg.digest())), args.out)
    return EXIT_OK


def cmd_couple(args) -> int:
    cfg = load_config(args.config)
    tilt = cfg.tilt
    if args.delta is not None:
        delta = args.delta
    elif len(tilt.delta_grid) == 1:
        delta = float(tilt.delta_grid[0])
    else:
        raise ConfigError("--delta is required when the config holds a delta grid")
    pi = _parse_pi(args.pi, tilt.K)
    coupling = cpip_coupling(pi, tilt.nu, tilt.cost, delta)
    labels = cfg.actions.labels
    rows = [[lab, *coupling.joint[i], coupling.source[i]] for i, lab in enumerate(labels)]
    rows.append(["target_marginal", *coupling.target, coupling.joint.sum()])
    cols = ["source\\target", *labels, "source_marginal"]
    meta = header_lines("couple", _seed(args, cfg), cfg.digest()) + [f"# delta={delta!r}"]
    _emit(render_csv(cols, rows, meta), args.out)
    return EXIT_OK


def cmd_estimate(args) -> int:
    cfg = load_config(args.config)
    cfg = _with_grid(cfg, _grid_override(args, cfg.tilt.delta_grid))
    k_folds = args.folds or cfg.k_folds
    B = args.bootstrap or cfg.B
    alpha = args.alpha or cfg.alpha
    seed = _seed(args, cfg)
    data = read_data(args.data, cfg.actions, cfg.data)
    folds = assign_folds(data.n, k_folds, seed)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", ConvergenceWarning)
        pairs = fit_nuisances(data, folds, floor=cfg.prop_floor)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    pi_hat, q_hat = cross_fit_predict(data, folds, pairs)
    curve = curve_from_predictions(data.Y, data.A, pi_hat, q_hat, cfg.tilt)
    bands = infer(curve, B=B, alpha=alpha, seed=seed)
    report = positivity_diagnostic(pi_hat, cfg.tilt, threshold=cfg.positivity_threshold) \
        if cfg.tilt.cost.is_destination else None

    cols = ["delta"]
    for p in bands:
        cols += [f"mu_{p}_plugin", f"mu_{p}_onestep", f"sigma_{p}",
                 f"{p}_lower_pointwise", f"{p}_upper_pointwise",
                 f"{p}_lower_uniform", f"{p}_upper_uniform"]
    if report is not None:
        cols += ["positivity_max_ratio", "positivity_flag"]
    rows = []
    for j, d in enumerate(curve.delta_grid):
        row = [d]
        for p, b in bands.items():
            plug = curve.mu_S_plugin if p == "S" else curve.mu_T_plugin
            row += [plug[j], b.estimates[j], b.sigma[j], b.lower_pointwise[j],
                    b.upper_pointwise[j], b.lower_uniform[j], b.upper_uniform[j]]
        if report is not None:
            row += [report.max_ratio[j], int(report.flagged[j])]
        rows.append(row)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    meta = header_lines("estimate", seed, cfg.digest())
    (out / "curve.csv").write_text(render_csv(cols, rows, meta))
    summary = {
        "version": __version__,
        "seed": seed,
        "config_sha256": cfg.digest(),
        "n": data.n,
        "k_folds": k_folds,
        "B": B,
        "alpha": alpha,
        "critical_values": {p: b.critical_value for p, b in bands.items()},
        "pointwise_value": next(iter(bands.values())).pointwise_value,
        "positivity": None if report is None else {
            "threshold": report.threshold,
            "max_ratio": report.max_ratio.tolist(),
            "flagged_deltas": report.delta_grid[report.flagged].tolist(),
        },
        "nuisances": [p.to_dict() for p in pairs],
        "convergence_warnings": [str(w.message) for w in caught],
    }
    (out / "estimate.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    if report is not None and report.any_flagged:
        print(f"warning: positivity ratio exceeds {report.threshold:g} at "
              f"{int(report.flagged.sum())} delta value(s)", file=sys.stderr)
    return EXIT_OK


def cmd_simulate(args) -> int:
    if args.emit_data:
        sample = generate(args.n, args.seed or 0)
        write_dataset_csv(args.emit_data, sample.dataset,
                          header_lines("simulate", args.seed or 0, None))
        return EXIT_OK
    seed = args.seed or 0
    default_grid = np.linspace(-2.0, 2.0, 100)
    grid = _grid_override(args, default_grid)
    if args.config:
        cfg = load_config(args.config)
        if cfg.tilt.K != 3:
            raise ConfigError("simulation configs need exactly 3 actions")
        setups = {"custom": TiltConfig(cfg.tilt.nu, cfg.tilt.cost, grid)}
        digest = cfg.digest()
    else:
        ids = sorted(SETUPS) if args.setup == "all" else [int(args.setup)]
        setups = {i: setup_config(i, grid) for i in ids}
        digest = None
    regimes = tuple(args.regimes.split(",")) if args.regimes else REGIMES
    if any(r not in REGIMES for r in regimes):
        raise ConfigError(f"--regimes must be drawn from {','.join(REGIMES)}")
    report = run_benchmark(setups, n=args.n, reps=args.reps, delta_grid=grid,
                           regimes=regimes, seed=seed, k_folds=args.folds or 5,
                           n_mc=args.n_mc, threads=args.threads)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    meta = header_lines("simulate", seed, digest)
    (out / "report.csv").write_text(render_csv(REPORT_COLUMNS, report.rows(), meta))
    (out / "report.json").write_text(report.to_json() + "\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cpip", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, grid=True):
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int, default=os.cpu_count() or 1)
        p.add_argument("--out", help="output file (tilt, couple) or directory")
        if grid:
            p.add_argument("--delta-min", type=float)
            p.add_argument("--delta-max", type=float)
            p.add_argument("--delta-points", type=int)

    p = sub.add_parser("tilt", help="tilted marginals and pushforward per delta")
    p.add_argument("--config", required=True)
    p.add_argument("--pi", help="explicit propensity vector, comma separated")
    p.add_argument("--data", help="CSV data; propensities are fitted and averaged")
    common(p)
    p.set_defaults(func=cmd_tilt)

    p = sub.add_parser("couple", help="coupling matrix at one delta")
    p.add_argument("--config", required=True)
    p.add_argument("--pi", required=True)
    p.add_argument("--delta", type=float)
    common(p, grid=False)
    p.set_defaults(func=cmd_couple)

    p = sub.add_parser("estimate", help="one-step estimates with uniform bands")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--folds", type=int)
    p.add_argument("--bootstrap", type=int)
    p.add_argument("--alpha", type=float)
    common(p)
    p.set_defaults(func=cmd_estimate, out="estimate_out")

    p = sub.add_parser("simulate", help="plug-in vs one-step benchmark")
    p.add_argument("--setup", default="all", choices=["1", "2", "3", "all"])
    p.add_argument("--config")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--reps", type=int, default=200)
    p.add_argument("--n-mc", type=int, default=10**6)
    p.add_argument("--folds", type=int)
    p.add_argument("--regimes", help="comma list from correct,Q,pi")
    p.add_argument("--emit-data", metavar="FILE", help="write one generated dataset and exit")
    common(p)
    p.set_defaults(func=cmd_simulate, out="simulate_out")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (DegenerateKernelError, DegenerateVarianceError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
