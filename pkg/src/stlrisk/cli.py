"""Command line interface.

Subcommands: parse, risk, tighten, encode, solve, simulate, experiment.
Exit codes: 0 success, 2 bad input or configuration, 3 infeasible
problem, 4 numeric failure in the solver.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import (
    ConfigError,
    ExperimentConfig,
    load_experiment_config,
    load_system,
)
from .formulas import FormulaError, format_formula, horizon, parse
from .milp import (
    MilpError,
    encode_deterministic_stl,
    parse_lp,
    solve_milp,
    write_lp,
)
from .mpc import (
    run_experiment,
    sample_noise,
    simulate_closed_loop,
    write_trajectory_csv,
)
from .risk import RiskError, RiskSpec, eval_risk
from .semantics import Ensemble, stl_risk
from .tightening import (
    SystemError_,
    describe_tightened,
    tighten_formula,
)
from .formulas import atom_nodes

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3
EXIT_NUMERIC = 4


def _vector(text: str) -> np.ndarray:
    try:
        parts = [p for p in text.replace(",", " ").split() if p]
        return np.array([float(p) for p in parts])
    except ValueError:
        raise ConfigError(f"cannot parse vector {text!r}") from None


def _load_samples(path: str) -> np.ndarray:
    if path.endswith(".npy"):
        return np.load(path).reshape(-1)
    with open(path, "r", encoding="utf-8") as fh:
        return _vector(fh.read())


def _load_ensemble(path: str) -> Ensemble:
    if not path.endswith(".npy"):
        raise ConfigError("ensemble must be a .npy array of shape (M, T+1, n)")
    return Ensemble(np.load(path))


def _risk_spec(args) -> RiskSpec:
    return RiskSpec(args.measure, level=args.level, weight=args.weight)


def _cmd_parse(args) -> int:
    f = parse(args.formula, dim=args.dim, steps_per_unit=args.steps_per_unit)
    print(format_formula(f))
    print(f"horizon: {horizon(f)}")
    return EXIT_OK


def _cmd_risk(args) -> int:
    spec = _risk_spec(args)
    if args.samples is not None:
        value = eval_risk(spec, _load_samples(args.samples))
    else:
        if args.ensemble is None or args.formula is None:
            raise ConfigError("need either --samples or --ensemble with --formula")
        ens = _load_ensemble(args.ensemble)
        f = parse(args.formula, dim=ens.states.shape[2],
                  steps_per_unit=args.steps_per_unit)
        value = stl_risk(ens, args.time, f, spec)
    print(f"{value:.12g}")
    return EXIT_OK


def _delta_map(args, f):
    atoms = []
    for node in atom_nodes(f):
        if node.pred not in atoms:
            atoms.append(node.pred)
    deltas = {p: args.delta for p in atoms}
    for spec in args.delta_atom or []:
        try:
            idx_text, val_text = spec.split("=", 1)
            idx, val = int(idx_text), float(val_text)
        except ValueError:
            raise ConfigError(f"bad --delta-atom {spec!r}, expected INDEX=DELTA")
        if not (0 <= idx < len(atoms)):
            raise ConfigError(f"--delta-atom index {idx} out of range")
        deltas[atoms[idx]] = val
    return deltas


def _cmd_tighten(args) -> int:
    sys_ = load_system(args.system)
    f = parse(args.formula, dim=sys_.n, steps_per_unit=args.steps_per_unit)
    if horizon(f) > sys_.horizon:
        raise ConfigError("formula horizon exceeds the system horizon")
    deltas = _delta_map(args, f)
    g = tighten_formula(f, sys_, deltas, saturation_step=args.saturation)
    print(describe_tightened(g))
    seen = []
    for node in atom_nodes(g):
        sched = node.pred
        if sched in seen:
            continue
        seen.append(sched)
        margins = " ".join(f"{v:.6g}" for v in sched.margins)
        print(f"atom {len(seen) - 1} [{sched.label}] sign {sched.sign} "
              f"delta {sched.delta:g} margins: {margins}")
    return EXIT_OK


def _cmd_encode(args) -> int:
    sys_ = load_system(args.system)
    f = parse(args.formula, dim=sys_.n, steps_per_unit=args.steps_per_unit)
    if args.tighten:
        f = tighten_formula(f, sys_, _delta_map(args, f),
                            saturation_step=args.saturation)
    x0 = _vector(args.x0)
    u_bounds = None
    if args.u_max is not None:
        u_bounds = (np.full(sys_.m, -args.u_max), np.full(sys_.m, args.u_max))
    enc = encode_deterministic_stl(
        f, sys_, x0, N=args.horizon, u_bounds=u_bounds, eps=args.eps
    )
    write_lp(enc.model, args.out)
    print(f"written: {args.out}")
    print(f"variables: {enc.model.n_vars} ({enc.n_binaries} binary)")
    print(f"constraints: {enc.model.n_rows}")
    return EXIT_OK


def _cmd_solve(args) -> int:
    if args.model is not None:
        with open(args.model, "r", encoding="utf-8") as fh:
            model = parse_lp(fh.read())
    else:
        if args.system is None or args.formula is None or args.x0 is None:
            raise ConfigError("need MODEL.lp or --system, --formula and --x0")
        sys_ = load_system(args.system)
        f = parse(args.formula, dim=sys_.n, steps_per_unit=args.steps_per_unit)
        if args.tighten:
            f = tighten_formula(f, sys_, _delta_map(args, f),
                                saturation_step=args.saturation)
        u_bounds = None
        if args.u_max is not None:
            u_bounds = (np.full(sys_.m, -args.u_max), np.full(sys_.m, args.u_max))
        enc = encode_deterministic_stl(
            f, sys_, _vector(args.x0), N=args.horizon, u_bounds=u_bounds,
            eps=args.eps,
        )
        model = enc.model
    sol = solve_milp(model, max_nodes=args.max_nodes, time_limit=args.time_limit)
    print(f"status: {sol.status}")
    print(f"nodes: {sol.nodes}")
    if sol.x is None:
        return EXIT_INFEASIBLE if sol.status == "infeasible" else EXIT_NUMERIC
    print(f"objective: {sol.objective:.12g}")
    if args.print_solution:
        for name, v in zip(model.names, sol.x):
            print(f"  {name} = {v:.12g}")
    return EXIT_OK


def _experiment_config(args) -> ExperimentConfig:
    if args.config is not None:
        return load_experiment_config(args.config)
    return ExperimentConfig()


def _cmd_simulate(args) -> int:
    cfg = _experiment_config(args)
    rng = np.random.default_rng(cfg.seed + args.run)
    noise = sample_noise(rng, cfg, cfg.fine_steps)
    rec = simulate_closed_loop(cfg, tightened=args.type == 2, noise=noise)
    print(f"type: {args.type}")
    print(f"goal_reached: {rec.goal_reached}")
    print(f"obstacle_violated: {rec.obstacle_violated}")
    print(f"formation_ok: {rec.formation_ok}")
    print(f"infeasible_windows: {list(rec.infeasible_windows)}")
    print(f"control_cost: {rec.control_cost:.12g}")
    if args.out is not None:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        path = out / f"traj_type{args.type}_run{args.run}.csv"
        write_trajectory_csv(path, cfg, rec)
        print(f"trajectory: {path}")
    return EXIT_OK


def _cmd_experiment(args) -> int:
    cfg = _experiment_config(args)
    echo = None if args.quiet else print
    summary = run_experiment(
        cfg,
        args.out,
        runs=args.runs,
        save_trajectories=args.save_trajectories,
        echo=echo,
    )
    for type_id in ("1", "2"):
        s = summary["types"][type_id]
        print(
            f"type {type_id}: goal_rate {s['goal_rate']:.3f} "
            f"obstacle_rate {s['obstacle_rate']:.3f} "
            f"formation_rate {s['formation_rate']:.3f} "
            f"infeasible_windows {s['infeasible_windows']}"
        )
    print(f"outputs in {args.out}")
    return EXIT_OK


def _add_formula_opts(p: argparse.ArgumentParser) -> None:
    p.add_argument("--steps-per-unit", type=float, default=1.0,
                   help="discrete steps per formula time unit")


def _add_tighten_opts(p: argparse.ArgumentParser) -> None:
    p.add_argument("--delta", type=float, default=0.5,
                   help="risk bound applied to every atom")
    p.add_argument("--delta-atom", action="append", metavar="INDEX=DELTA",
                   help="override the bound for one atom (repeatable)")
    p.add_argument("--saturation", type=int, default=None,
                   help="clamp margins beyond this step")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="stlrisk",
        description="Risk-aware STL: evaluation, tightening, MILP synthesis",
    )
    ap.add_argument("--version", action="version", version=f"stlrisk {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("parse", help="parse a formula and print its normal form")
    p.add_argument("formula")
    p.add_argument("--dim", type=int, default=None)
    _add_formula_opts(p)
    p.set_defaults(func=_cmd_parse)

    p = sub.add_parser("risk", help="evaluate a risk measure")
    p.add_argument("--measure", required=True)
    p.add_argument("--level", type=float, default=None)
    p.add_argument("--weight", type=float, default=None)
    p.add_argument("--samples", help="text or .npy file of scalar samples")
    p.add_argument("--ensemble", help=".npy array (M, T+1, n) of trajectories")
    p.add_argument("--formula")
    p.add_argument("--time", type=int, default=0)
    _add_formula_opts(p)
    p.set_defaults(func=_cmd_risk)

    p = sub.add_parser("tighten", help="risk-tighten a formula against a system")
    p.add_argument("--system", required=True, help="system JSON file")
    p.add_argument("--formula", required=True)
    _add_formula_opts(p)
    _add_tighten_opts(p)
    p.set_defaults(func=_cmd_tighten)

    p = sub.add_parser("encode", help="write the deterministic MILP as an LP file")
    p.add_argument("--system", required=True)
    p.add_argument("--formula", required=True)
    p.add_argument("--x0", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--horizon", type=int, default=None)
    p.add_argument("--u-max", type=float, default=None)
    p.add_argument("--eps", type=float, default=1e-6)
    p.add_argument("--tighten", action="store_true")
    _add_formula_opts(p)
    _add_tighten_opts(p)
    p.set_defaults(func=_cmd_encode)

    p = sub.add_parser("solve", help="solve an LP file or an encoded formula")
    p.add_argument("model", nargs="?", default=None, help="LP file")
    p.add_argument("--system")
    p.add_argument("--formula")
    p.add_argument("--x0")
    p.add_argument("--horizon", type=int, default=None)
    p.add_argument("--u-max", type=float, default=None)
    p.add_argument("--eps", type=float, default=1e-6)
    p.add_argument("--tighten", action="store_true")
    p.add_argument("--max-nodes", type=int, default=200_000)
    p.add_argument("--time-limit", type=float, default=None)
    p.add_argument("--print-solution", action="store_true")
    _add_formula_opts(p)
    _add_tighten_opts(p)
    p.set_defaults(func=_cmd_solve)

    p = sub.add_parser("simulate", help="one closed-loop MPC run")
    p.add_argument("--config", help="experiment JSON config")
    p.add_argument("--type", type=int, choices=(1, 2), default=2,
                   help="1 nominal, 2 risk-tightened")
    p.add_argument("--run", type=int, default=0, help="run index (seeds noise)")
    p.add_argument("--out", help="directory for the trajectory CSV")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("experiment", help="full paired Type 1 / Type 2 study")
    p.add_argument("--config", help="experiment JSON config")
    p.add_argument("--out", default="experiment_out")
    p.add_argument("--runs", type=int, default=None)
    p.add_argument("--save-trajectories", action="store_true")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=_cmd_experiment)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FormulaError, RiskError, SystemError_, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MilpError as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
