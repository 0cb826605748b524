"""Command-line front end.

Subcommands:
  simulate      run a closed-loop scenario, write CSV (and SVG / plot data)
  verify-metric certify the scenario's metric on the configured grid
  geodesic      one-shot geodesic solve with diagnostics
  batch         run several scenario configs in parallel

Exit codes: 0 success; 1 config/solver error; 2 divergence detected;
3 verification failure; 4 geodesic optimizer diverged.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .config import ScenarioConfig
from .errors import (CCMControlError, ConfigError, InfeasibleConstraint,
                     MetricError, OptimizerDiverged)
from .geometry import clenshaw_curtis, solve_geodesic, speed_profile
from .sim import simulate
from .verify import (certify_rate, check_dual_ccm, check_killing,
                     check_matched_invariance, check_parameter_coupling)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_DIVERGED = 2
EXIT_VERIFY_FAILED = 3
EXIT_GEODESIC_DIVERGED = 4


def _common_flags() -> argparse.ArgumentParser:
    c = argparse.ArgumentParser(add_help=False)
    c.add_argument("--out", default=".", help="output directory (created if absent)")
    c.add_argument("--svg", action="store_true", help="also write an SVG chart")
    c.add_argument("--plot-data", action="store_true",
                   help="also write pre-split plot data as JSON")
    c.add_argument("--dump-effective-config", action="store_true",
                   help="print the fully resolved configuration and continue")
    c.add_argument("--quiet", action="store_true", help="suppress the run summary")
    c.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE", help="override a config entry (repeatable)")
    return c


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ccmctl",
        description="Adaptive geodesic feedback: simulation, metric "
                    "verification, and geodesic diagnostics.")
    sub = parser.add_subparsers(dest="command", required=True)
    common = _common_flags()

    p_sim = sub.add_parser("simulate", parents=[common],
                           help="run a closed-loop scenario")
    p_sim.add_argument("config", help="scenario config file")
    p_sim.set_defaults(func=cmd_simulate)

    p_ver = sub.add_parser("verify-metric", parents=[common],
                           help="certify the metric on the configured grid")
    p_ver.add_argument("config", help="scenario config file")
    p_ver.set_defaults(func=cmd_verify)

    p_geo = sub.add_parser("geodesic", parents=[common],
                           help="solve one geodesic and print diagnostics")
    p_geo.add_argument("config", help="scenario config file (metric source)")
    p_geo.add_argument("p", help="start state, comma-separated")
    p_geo.add_argument("q", help="end state, comma-separated")
    p_geo.add_argument("--theta", default=None,
                       help="metric parameters, comma-separated")
    p_geo.set_defaults(func=cmd_geodesic)

    p_bat = sub.add_parser("batch", parents=[common],
                           help="run several scenarios in parallel")
    p_bat.add_argument("configs", nargs="+", help="scenario config files")
    p_bat.add_argument("--workers", type=int, default=2)
    p_bat.set_defaults(func=cmd_batch)
    return parser


def _say(args, message: str):
    if not args.quiet:
        print(message)


def _load(args) -> ScenarioConfig:
    cfg = ScenarioConfig.from_file(args.config, overrides=args.overrides)
    if args.dump_effective_config:
        print(cfg.effective_text(), end="")
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _stem(cfg: ScenarioConfig, args) -> str:
    return cfg.values.get("output.prefix") or Path(args.config).stem


def cmd_simulate(args) -> int:
    cfg = _load(args)
    model = cfg.build_model()
    metric = cfg.build_metric()
    controller = cfg.build_controller()
    setpoint = cfg.build_setpoint()
    solver = cfg.build_solver(metric)
    log = simulate(model, metric, controller, setpoint, solver=solver,
                   **cfg.sim_kwargs())
    out = _out_dir(args)
    stem = _stem(cfg, args)
    csv_path = out / f"{stem}.csv"
    log.to_csv(csv_path)
    if args.plot_data:
        log.to_plot_data(out / f"{stem}_plot.json")
    if args.svg:
        log.write_svg(out / f"{stem}.svg")
    err = log.tracking_error()
    _say(args, f"wrote {csv_path} ({log.t.size} rows)")
    if log.diverged:
        _say(args, f"diverged at t = {log.divergence_time:.4g} s "
                   f"(state left radius {log.meta['blowup_radius']:.4g})")
        return EXIT_DIVERGED
    _say(args, f"final tracking error {err[-1]:.6g}, peak {err.max():.6g}, "
               f"final energy {log.E[-1]:.6g}")
    return EXIT_OK


def cmd_verify(args) -> int:
    cfg = _load(args)
    model = cfg.build_model()
    metric = cfg.build_metric()
    grid = cfg.build_grid()
    v = cfg.values
    lam = v["verify.lambda"]
    try:
        dual = check_dual_ccm(model, metric, grid, lam)
        killing = check_killing(model, metric, grid)
        coupling = check_parameter_coupling(model, metric, grid)
        invariance = check_matched_invariance(
            model, metric, grid, lam, v["verify.theta_m_samples"])
        certified = certify_rate(model, metric, grid, lo=0.0,
                                 hi=v["verify.rate_max"],
                                 resolution=v["verify.rate_resolution"])
    except MetricError as e:
        _say(args, f"metric invalid on grid: {e}")
        return EXIT_VERIFY_FAILED
    killing_ok = killing <= v["verify.eps_killing"]
    coupling_ok = coupling <= v["verify.eps_coupling"]
    all_ok = dual.passed and killing_ok and coupling_ok and invariance.passed
    dual.lambda_certified = certified.lambda_certified
    dual.killing_residual_max = killing
    dual.coupling_residual_max = coupling

    _say(args, dual.summary())
    _say(args, f"matched invariance  : {'pass' if invariance.passed else 'FAIL'} "
               f"({len(invariance.samples)} samples)")
    _say(args, f"overall            : {'pass' if all_ok else 'FAIL'}")

    out = _out_dir(args)
    stem = _stem(cfg, args)
    payload = {
        "rate": lam,
        "passed": dual.passed,
        "max_eigenvalue": dual.max_eigenvalue,
        "worst_x": None if dual.worst_x is None else dual.worst_x.tolist(),
        "worst_theta": None if dual.worst_theta is None else dual.worst_theta.tolist(),
        "lambda_certified": certified.lambda_certified,
        "killing_residual_max": killing,
        "coupling_residual_max": coupling,
        "matched_invariance_passed": invariance.passed,
        "all_passed": all_ok,
    }
    with open(out / f"{stem}_verify.json", "w") as fh:
        json.dump(payload, fh, indent=1)
    return EXIT_OK if all_ok else EXIT_VERIFY_FAILED


def _parse_vector(text: str, label: str) -> np.ndarray:
    try:
        return np.array([float(p) for p in text.replace("[", "").replace("]", "").split(",")])
    except ValueError:
        raise ConfigError(f"cannot parse {label} vector from {text!r}") from None


def cmd_geodesic(args) -> int:
    cfg = _load(args)
    metric = cfg.build_metric()
    p = _parse_vector(args.p, "p")
    q = _parse_vector(args.q, "q")
    theta = None if args.theta is None else _parse_vector(args.theta, "theta")
    if p.size != metric.dim or q.size != metric.dim:
        raise ConfigError(f"endpoints must have {metric.dim} components")
    v = cfg.values
    geo = solve_geodesic(p, q, metric, theta=theta, tol=v["solver.tol"],
                         num_nodes=v["solver.nodes"],
                         quad_order=v["solver.quad_order"],
                         max_iter=v["solver.max_iter"])
    rule = clenshaw_curtis(v["solver.quad_order"])
    sp = speed_profile(geo, metric, theta, rule)
    mean_speed = float(np.mean(sp))
    const_resid = (float(np.max(np.abs(sp - mean_speed)) / max(mean_speed, 1e-30)))
    print(f"energy             : {geo.energy:.12g}")
    print(f"converged          : {geo.converged}")
    print(f"iterations         : {geo.iterations}")
    print(f"gradient norm      : {geo.grad_norm:.3e}")
    print(f"speed constancy    : {const_resid:.3e} (relative)")
    if not args.quiet:
        print("nodes (s, x):")
        for s, xk in zip(geo.abscissae, geo.nodes):
            print(f"  {s:8.6f}  {np.array2string(xk, precision=8)}")
    return EXIT_OK


def _batch_worker(task) -> tuple:
    path, out_root, overrides, svg, plot_data = task
    argv = ["simulate", path, "--out", str(Path(out_root) / Path(path).stem),
            "--quiet"]
    for item in overrides:
        argv += ["--set", item]
    if svg:
        argv.append("--svg")
    if plot_data:
        argv.append("--plot-data")
    return path, main(argv)


def cmd_batch(args) -> int:
    tasks = [(path, args.out, args.overrides, args.svg, args.plot_data)
             for path in args.configs]
    results = []
    if args.workers <= 1 or len(tasks) == 1:
        results = [_batch_worker(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            results = list(pool.map(_batch_worker, tasks))
    code = EXIT_OK
    for path, rc in results:
        _say(args, f"{path}: exit {rc}")
        code = max(code, rc)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_ERROR
    except OptimizerDiverged as e:
        print(f"geodesic solve diverged: {e}", file=sys.stderr)
        return (EXIT_GEODESIC_DIVERGED if args.command == "geodesic"
                else EXIT_ERROR)
    except (MetricError, InfeasibleConstraint) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR
    except CCMControlError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
