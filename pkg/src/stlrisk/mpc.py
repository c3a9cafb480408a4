"""Closed-loop MPC under STL risk constraints: two-agent reach-avoid.

The plant runs on a fine Euler grid; the controller plans on a coarser
grid whose one-step matrices compound the fine ones.  Each control step
re-anchors the mission formula to the current time, optionally
risk-tightens it against the prediction covariance, and solves a MILP
for the mean trajectory.  Type 1 runs plan on the raw predicates, Type
2 runs on the tightened ones; both face identical disturbance draws.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .formulas import (
    AffinePredicate,
    And,
    Atom,
    Formula,
    Or,
    Release,
    TrueLiteral,
    Until,
    always,
    conj,
    disj,
    eventually,
)
from .milp import StlEncoder, solve_lp, solve_milp, write_lp
from .tightening import LtvSystem, mean_rollout, tighten_formula

__all__ = [
    "two_agent_fine_system",
    "controller_system",
    "mission_predicates",
    "mission_formula",
    "shift_formula",
    "sample_noise",
    "WindowPlan",
    "plan_window",
    "export_full_window0",
    "RunRecord",
    "simulate_closed_loop",
    "run_experiment",
    "write_trajectory_csv",
]

# Combined state layout: (px1, py1, vx1, vy1, px2, py2, vx2, vy2).
_POS1 = (0, 1)
_VEL = (2, 3, 6, 7)


def two_agent_fine_system(cfg: ExperimentConfig):
    """One fine Euler step of both double integrators.

    Returns (A, B, w_cov); the additive noise hits velocities only.
    """
    dt = cfg.dt_sys
    A1 = np.eye(4)
    A1[0, 2] = dt
    A1[1, 3] = dt
    B1 = np.zeros((4, 2))
    B1[2, 0] = dt
    B1[3, 1] = dt
    A = np.block([[A1, np.zeros((4, 4))], [np.zeros((4, 4)), A1]])
    B = np.block([[B1, np.zeros((4, 2))], [np.zeros((4, 2)), B1]])
    w_cov = np.zeros((8, 8))
    for i in _VEL:
        w_cov[i, i] = cfg.noise_variance
    return A, B, w_cov


def _compound(A, B, w_cov, k: int):
    """Matrices of k chained steps: x' = A^k x + (sum A^j B) u + noise."""
    n, m = B.shape
    Ac = np.eye(n)
    Bc = np.zeros((n, m))
    Sc = np.zeros((n, n))
    for _ in range(k):
        Bc = A @ Bc + B
        Sc = A @ Sc @ A.T + w_cov
        Ac = A @ Ac
    return Ac, Bc, Sc


def controller_system(cfg: ExperimentConfig, horizon: int) -> LtvSystem:
    """Coarse-grid LTI system over the given number of control steps."""
    A, B, w_cov = two_agent_fine_system(cfg)
    Ac, Bc, Sc = _compound(A, B, w_cov, cfg.ratio)
    return LtvSystem(A=Ac, B=Bc, w_cov=Sc, horizon=horizon)


def _box_outside_preds(center, half, px: int, py: int, tag: str, dim: int = 8):
    """Four predicates, each putting position (px, py) beyond one face."""
    cx, cy = center
    out = {}
    for name, idx, sign, offset in (
        ("xlo", px, -1.0, -(cx - half)),
        ("xhi", px, 1.0, -(cx + half)),
        ("ylo", py, -1.0, -(cy - half)),
        ("yhi", py, 1.0, -(cy + half)),
    ):
        a = np.zeros(dim)
        a[idx] = sign
        out[f"{tag}_{name}"] = AffinePredicate(a, sign * offset, label=f"{tag}_{name}")
    return out


def _box_inside_preds(center, half, px: int, py: int, tag: str, dim: int = 8):
    """Four predicates whose conjunction keeps (px, py) inside the box."""
    cx, cy = center
    out = {}
    for name, idx, sign, bound in (
        ("xlo", px, 1.0, -(cx - half)),
        ("xhi", px, -1.0, cx + half),
        ("ylo", py, 1.0, -(cy - half)),
        ("yhi", py, -1.0, cy + half),
    ):
        a = np.zeros(dim)
        a[idx] = sign
        out[f"{tag}_{name}"] = AffinePredicate(a, bound, label=f"{tag}_{name}")
    return out


def mission_predicates(cfg: ExperimentConfig) -> dict[str, AffinePredicate]:
    preds: dict[str, AffinePredicate] = {}
    preds.update(_box_outside_preds(cfg.obstacle_center, cfg.obstacle_half, 0, 1, "obs1"))
    preds.update(_box_outside_preds(cfg.obstacle_center, cfg.obstacle_half, 4, 5, "obs2"))
    preds.update(_box_inside_preds(cfg.goal_center, cfg.goal_half, 0, 1, "goal"))
    lim = cfg.formation_limit
    for name, i, j in (("form_x", 0, 4), ("form_y", 1, 5)):
        for side, sgn in (("lo", 1.0), ("hi", -1.0)):
            a = np.zeros(8)
            a[i] = sgn
            a[j] = -sgn
            preds[f"{name}{side}"] = AffinePredicate(a, lim, label=f"{name}{side}")
    return preds


def mission_formula(cfg: ExperimentConfig):
    """Reach-avoid mission and the per-predicate risk bound map.

    Always avoid both obstacles, eventually sit in the goal box during
    the last stretch, and keep the two agents within the formation
    limit from formation_start_time on.  Intervals are in control
    steps.
    """
    preds = mission_predicates(cfg)
    S = cfg.ctrl_steps
    goal_a = int(round(cfg.goal_start_time / cfg.dt_ctrl))
    form_a = int(round(cfg.formation_start_time / cfg.dt_ctrl))
    if not (0 <= goal_a <= S and 0 <= form_a <= S):
        raise ValueError("phase start times must fall inside the mission")
    avoid1 = disj([Atom(preds[f"obs1_{s}"]) for s in ("xlo", "xhi", "ylo", "yhi")])
    avoid2 = disj([Atom(preds[f"obs2_{s}"]) for s in ("xlo", "xhi", "ylo", "yhi")])
    reach = conj([Atom(preds[f"goal_{s}"]) for s in ("xlo", "xhi", "ylo", "yhi")])
    form = conj(
        [Atom(preds[k]) for k in ("form_xlo", "form_xhi", "form_ylo", "form_yhi")]
    )
    phi = conj(
        [
            always(0, S, And((avoid1, avoid2))),
            eventually(goal_a, S, reach),
            always(form_a, S, form),
        ]
    )
    deltas: dict[AffinePredicate, float] = {}
    for key, p in preds.items():
        if key.startswith("obs"):
            deltas[p] = cfg.delta_obstacle
        elif key.startswith("goal"):
            deltas[p] = cfg.delta_goal
        else:
            deltas[p] = cfg.delta_formation
    return phi, deltas, preds


def shift_formula(f: Formula, c: int) -> Formula:
    """Re-anchor top-level temporal windows c steps into the mission.

    [a, b] becomes [max(0, a-c), b-c]; a window entirely in the past
    collapses to TRUE (its obligation can no longer be influenced).
    Operands keep their own relative clocks.
    """
    if c <= 0:
        return f
    if isinstance(f, And):
        return conj([shift_formula(g, c) for g in f.children])
    if isinstance(f, Or):
        return disj([shift_formula(g, c) for g in f.children])
    if isinstance(f, (Until, Release)):
        if f.end - c < 0:
            return TrueLiteral()
        return type(f)(max(0, f.start - c), f.end - c, f.left, f.right)
    return f


def sample_noise(rng: np.random.Generator, cfg: ExperimentConfig, steps: int):
    """Student-t velocity disturbances for a whole mission, (steps, 8)."""
    nu = cfg.noise_dof
    scale = float(np.sqrt(cfg.noise_variance * (nu - 2.0) / nu))
    w = np.zeros((steps, 8))
    w[:, list(_VEL)] = rng.standard_t(nu, size=(steps, len(_VEL))) * scale
    return w


@dataclass(frozen=True)
class WindowPlan:
    feasible: bool
    controls: np.ndarray | None
    objective: float | None
    nodes: int
    status: str


def _window_model(cfg, sys_c: LtvSystem, x_now, formula: Formula, horizon: int):
    """Encoded window MILP plus the L1 effort and goal-distance cost."""
    m = sys_c.m
    u_lim = np.full(m, cfg.u_max)
    enc = StlEncoder(
        sys_c,
        x_now,
        horizon,
        u_bounds=(-u_lim, u_lim),
        eps=cfg.eps,
        substitute_states=True,
        one_sided=True,
    )
    enc.encode(formula)
    b = enc.builder
    for k in range(horizon):
        for i in range(m):
            u = int(enc.u_idx[k, i])
            s = b.add_var(f"su_{k}_{i}", 0.0)
            b.add_constraint({s: 1.0, u: -1.0}, ">=", 0.0)
            b.add_constraint({s: 1.0, u: 1.0}, ">=", 0.0)
            b.add_objective_term(s, cfg.control_weight)
    for k in range(1, horizon + 1):
        for ci, comp in enumerate(_POS1):
            coeffs, const = enc.state_terms(k, comp)
            g = cfg.goal_center[ci]
            d = b.add_var(f"dg_{k}_{ci}", 0.0)
            row = {j: -cj for j, cj in coeffs.items()}
            row[d] = row.get(d, 0.0) + 1.0
            b.add_constraint(row, ">=", const - g)
            row = dict(coeffs)
            row[d] = row.get(d, 0.0) + 1.0
            b.add_constraint(row, ">=", g - const)
            b.add_objective_term(d, cfg.goal_weight)
    return b.build(), enc


def export_full_window0(cfg: ExperimentConfig, tightened: bool, path) -> bool:
    """Write the first planning window at the fine controller rate.

    The experiment plans at cfg.dt_ctrl; this re-derives the same
    window-0 problem with the controller period set to two system
    steps and exports it unsolved, so the model can be replayed at
    full fidelity with an outside solver.  Returns False (no file)
    when the mission length is not a multiple of that period.
    """
    full_dt = 2.0 * cfg.dt_sys
    steps = cfg.mission_time / full_dt
    if abs(steps - round(steps)) > 1e-9:
        return False
    full = replace(cfg, dt_ctrl=full_dt)
    base, deltas, _ = mission_formula(full)
    S = full.ctrl_steps
    sys0 = controller_system(full, S)
    f0 = base
    if tightened:
        f0 = tighten_formula(
            base, sys0, deltas, saturation_step=min(full.saturation_steps, S)
        )
    model, _ = _window_model(full, sys0, _start_state(full), f0, S)
    write_lp(model, path)
    return True


def plan_window(
    cfg: ExperimentConfig,
    sys_c: LtvSystem,
    x_now: np.ndarray,
    formula: Formula,
    horizon: int,
    export_path=None,
    warm: np.ndarray | None = None,
) -> WindowPlan:
    """One receding-horizon MILP on the mean dynamics.

    Minimizes control_weight * sum |u| + goal_weight * sum of agent-1
    L1 distances to the goal center, subject to the encoded formula.
    A ``warm`` control sequence (typically the previous window's plan
    shifted one step) primes the search: its discrete choices are
    frozen and the controls re-optimized by a single LP, and that
    repaired plan seeds branch and bound as the incumbent.  A node or
    time cap that still produced an integral incumbent counts as
    feasible; no incumbent at all counts as infeasible.
    """
    model, enc = _window_model(cfg, sys_c, x_now, formula, horizon)
    if export_path is not None:
        write_lp(model, export_path)
    incumbent = None
    if warm is not None and warm.shape == (horizon, sys_c.m):
        if np.all(np.abs(warm) <= cfg.u_max + 1e-9):
            traj = mean_rollout(sys_c, x_now, warm)
            pinned = enc.pattern_bounds(model, traj)
            if pinned is not None:
                rep = solve_lp(model, pinned[0], pinned[1])
                if rep.status == "optimal":
                    incumbent = (rep.x, rep.objective)
    sol = solve_milp(
        model,
        max_nodes=cfg.max_nodes_per_window,
        time_limit=cfg.time_limit_per_window,
        rel_gap=cfg.milp_rel_gap,
        branch_groups=enc.branch_groups(),
        incumbent=incumbent,
    )
    if sol.x is None:
        return WindowPlan(False, None, None, sol.nodes, sol.status)
    controls = sol.x[enc.u_idx].reshape(horizon, sys_c.m)
    return WindowPlan(True, controls, sol.objective, sol.nodes, sol.status)


@dataclass(frozen=True)
class RunRecord:
    states: np.ndarray  # (fine_steps + 1, 8) realized fine trajectory
    controls: np.ndarray  # (ctrl_steps, 4) applied first moves
    infeasible_windows: tuple[int, ...]
    goal_reached: bool
    obstacle_violated: bool
    formation_ok: bool
    control_cost: float
    solver_nodes: int


def _start_state(cfg: ExperimentConfig) -> np.ndarray:
    x = np.zeros(8)
    x[0], x[1] = cfg.start1
    x[4], x[5] = cfg.start2
    return x


def simulate_closed_loop(
    cfg: ExperimentConfig,
    tightened: bool,
    noise: np.ndarray,
    export_window0=None,
    window0_plan: WindowPlan | None = None,
) -> RunRecord:
    """Roll the mission once against a presampled disturbance array.

    The first window sees the same state and formula in every run, so
    callers doing repeated runs can solve it once and pass the result
    as ``window0_plan``; its node count still lands in solver_nodes.
    Later windows warm-start from the previous plan shifted one step.
    """
    S = cfg.ctrl_steps
    ratio = cfg.ratio
    if noise.shape != (S * ratio, 8):
        raise ValueError(f"noise must have shape ({S * ratio}, 8)")
    A_f, B_f, _ = two_agent_fine_system(cfg)
    base, deltas, _ = mission_formula(cfg)
    states = np.empty((S * ratio + 1, 8))
    x = _start_state(cfg)
    states[0] = x
    applied = np.zeros((S, 4))
    infeasible: list[int] = []
    nodes = 0
    prev_controls: np.ndarray | None = None
    for c in range(S):
        N_c = S - c
        sys_c = controller_system(cfg, N_c)
        f_c = shift_formula(base, c)
        if tightened and not isinstance(f_c, TrueLiteral):
            f_c = tighten_formula(
                f_c,
                sys_c,
                deltas,
                saturation_step=min(cfg.saturation_steps, N_c),
            )
        if isinstance(f_c, TrueLiteral):
            u0 = np.zeros(4)
            prev_controls = None
        else:
            if c == 0 and window0_plan is not None:
                plan = window0_plan
            else:
                warm = None
                if prev_controls is not None and prev_controls.shape[0] == N_c + 1:
                    warm = prev_controls[1:]
                plan = plan_window(
                    cfg,
                    sys_c,
                    x,
                    f_c,
                    N_c,
                    export_path=export_window0 if c == 0 else None,
                    warm=warm,
                )
            nodes += plan.nodes
            if plan.feasible:
                u0 = plan.controls[0]
                prev_controls = plan.controls
            else:
                infeasible.append(c)
                u0 = np.zeros(4)
                prev_controls = None
        applied[c] = u0
        for s in range(ratio):
            idx = c * ratio + s
            x = A_f @ x + B_f @ u0 + noise[idx]
            states[idx + 1] = x
    return RunRecord(
        states=states,
        controls=applied,
        infeasible_windows=tuple(infeasible),
        goal_reached=_goal_hit(cfg, states),
        obstacle_violated=_obstacle_hit(cfg, states),
        formation_ok=_formation_ok(cfg, states),
        control_cost=float(np.abs(applied).sum()),
        solver_nodes=nodes,
    )


def _obstacle_hit(cfg: ExperimentConfig, states: np.ndarray) -> bool:
    ox, oy = cfg.obstacle_center
    h = cfg.obstacle_half
    for px, py in ((0, 1), (4, 5)):
        inside = (np.abs(states[:, px] - ox) < h) & (np.abs(states[:, py] - oy) < h)
        if inside.any():
            return True
    return False


def _goal_hit(cfg: ExperimentConfig, states: np.ndarray) -> bool:
    t = np.arange(states.shape[0]) * cfg.dt_sys
    window = (t >= cfg.goal_start_time - 1e-9) & (t <= cfg.mission_time + 1e-9)
    gx, gy = cfg.goal_center
    inside = (np.abs(states[:, 0] - gx) <= cfg.goal_half) & (
        np.abs(states[:, 1] - gy) <= cfg.goal_half
    )
    return bool((window & inside).any())


def _formation_ok(cfg: ExperimentConfig, states: np.ndarray) -> bool:
    t = np.arange(states.shape[0]) * cfg.dt_sys
    window = (t >= cfg.formation_start_time - 1e-9) & (t <= cfg.mission_time + 1e-9)
    gap = np.maximum(
        np.abs(states[:, 0] - states[:, 4]), np.abs(states[:, 1] - states[:, 5])
    )
    return bool(np.all(gap[window] <= cfg.formation_limit + 1e-12))


def write_trajectory_csv(path, cfg: ExperimentConfig, rec: RunRecord) -> None:
    """Fine-grid trajectory with applied controls and realized margins."""
    ox, oy = cfg.obstacle_center
    gx, gy = cfg.goal_center
    header = (
        ["t", "px1", "py1", "vx1", "vy1", "px2", "py2", "vx2", "vy2"]
        + ["ux1", "uy1", "ux2", "uy2"]
        + ["obs1_margin", "obs2_margin", "goal_margin", "form_margin"]
    )
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for idx in range(rec.states.shape[0]):
            t = idx * cfg.dt_sys
            x = rec.states[idx]
            c = min(idx // cfg.ratio, rec.controls.shape[0] - 1)
            u = rec.controls[c]
            obs1 = max(
                abs(x[0] - ox) - cfg.obstacle_half, abs(x[1] - oy) - cfg.obstacle_half
            )
            obs2 = max(
                abs(x[4] - ox) - cfg.obstacle_half, abs(x[5] - oy) - cfg.obstacle_half
            )
            goal = min(
                cfg.goal_half - abs(x[0] - gx), cfg.goal_half - abs(x[1] - gy)
            )
            form = cfg.formation_limit - max(abs(x[0] - x[4]), abs(x[1] - x[5]))
            row = [t, *x, *u, obs1, obs2, goal, form]
            w.writerow(f"{v:.12g}" for v in row)


def run_experiment(
    cfg: ExperimentConfig,
    out_dir,
    runs: int | None = None,
    save_trajectories: bool = False,
    echo=None,
) -> dict:
    """Paired Type 1 (nominal) / Type 2 (tightened) study.

    Run r of both types shares the disturbance stream seeded with
    seed + r.  Writes runs.csv, summary.json, and the window-0 LP of
    run 0 for each type into out_dir; returns the summary dict.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_runs = cfg.runs if runs is None else int(runs)
    rows = []
    summary: dict = {"version": 1, "config": cfg.to_dict(), "types": {}}
    base, deltas, _ = mission_formula(cfg)
    S = cfg.ctrl_steps
    sys0 = controller_system(cfg, S)
    x0 = _start_state(cfg)
    for type_id, tightened in ((1, False), (2, True)):
        t0 = time.perf_counter()
        # Window 0 never sees noise, so one solve serves every run.
        f0 = base
        if tightened:
            f0 = tighten_formula(
                base, sys0, deltas, saturation_step=min(cfg.saturation_steps, S)
            )
        w0 = plan_window(
            cfg, sys0, x0, f0, S, export_path=out / f"window0_type{type_id}.lp"
        )
        full_name = f"window0_type{type_id}_full.lp"
        has_full = export_full_window0(cfg, tightened, out / full_name)
        goal = obstacle = formation = infeasible = 0
        costs = []
        for r in range(n_runs):
            rng = np.random.default_rng(cfg.seed + r)
            noise = sample_noise(rng, cfg, cfg.fine_steps)
            rec = simulate_closed_loop(cfg, tightened, noise, window0_plan=w0)
            goal += rec.goal_reached
            obstacle += rec.obstacle_violated
            formation += rec.formation_ok
            infeasible += len(rec.infeasible_windows)
            costs.append(rec.control_cost)
            rows.append(
                (
                    type_id,
                    r,
                    int(rec.goal_reached),
                    int(rec.obstacle_violated),
                    int(rec.formation_ok),
                    len(rec.infeasible_windows),
                    rec.control_cost,
                    rec.solver_nodes,
                )
            )
            if save_trajectories:
                write_trajectory_csv(out / f"traj_type{type_id}_run{r}.csv", cfg, rec)
            if echo is not None and (r + 1) % 10 == 0:
                echo(f"type {type_id}: {r + 1}/{n_runs} runs")
        wall = time.perf_counter() - t0
        summary["types"][str(type_id)] = {
            "runs": n_runs,
            "goal_rate": goal / n_runs,
            "obstacle_rate": obstacle / n_runs,
            "formation_rate": formation / n_runs,
            "infeasible_windows": infeasible,
            "mean_control_cost": float(np.mean(costs)),
            "wall_time_s": wall,
            "lp_file": f"window0_type{type_id}.lp",
        }
        if has_full:
            summary["types"][str(type_id)]["full_lp_file"] = full_name
        if echo is not None:
            echo(
                f"type {type_id}: goal {goal}/{n_runs}, "
                f"obstacle {obstacle}/{n_runs}, {wall:.1f}s"
            )
    with open(out / "runs.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(
            [
                "type",
                "run",
                "goal_reached",
                "obstacle_violated",
                "formation_ok",
                "infeasible_windows",
                "control_cost",
                "solver_nodes",
            ]
        )
        for row in rows:
            w.writerow(
                [
                    row[0],
                    row[1],
                    row[2],
                    row[3],
                    row[4],
                    row[5],
                    f"{row[6]:.12g}",
                    row[7],
                ]
            )
    with open(out / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
    return summary
