"""Command-line front end: ``koopgame <subcommand> [options]``.

Every subcommand writes its artifacts under ``--out-dir``.  Single solves
exit with status 1 when the solver did not converge; batch commands always
exit 0 and record per-item status instead.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import RunConfig
from .errors import GridMismatchError, KoopGameError

__all__ = ["main", "build_parser", "compare_fields", "field_grid"]


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.workers is not None:
        cfg.workers = args.workers
    if args.out_dir is not None:
        cfg.out_dir = args.out_dir
    cfg.validate()
    Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
    return cfg


def _out(cfg: RunConfig, name: Optional[str], default: str) -> Path:
    p = Path(name or default)
    return p if p.is_absolute() or p.parent != Path(".") else Path(cfg.out_dir) / p


def _game(cfg: RunConfig):
    from .game import TurretDefenseGame
    return TurretDefenseGame(v_A=cfg.game.v_A, horizon=cfg.game.T,
                             running_weight=cfg.game.running_weight)


def _plan(cfg: RunConfig):
    from .resolvent import make_plan
    q = cfg.quadrature
    return make_plan(cfg.game.T, q.m, q.delta, q.h, q.N, q.target)


def _write(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable))


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.bool_):
        return bool(o)
    raise TypeError(f"not serializable: {type(o).__name__}")


def _need(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise KoopGameError(f"missing {what} artifact: {p}")
    return p


def field_grid(n_r: int, n_alpha: int, r_range=(0.1, 1.0), alpha_range=(0.0, math.pi)) -> np.ndarray:
    """Row-major ``(r0, alpha0)`` grid, ``r`` varying slowest."""
    if n_r < 1 or n_alpha < 1:
        raise GridMismatchError("the initial-condition grid is empty")
    R, A = np.meshgrid(np.linspace(*r_range, n_r), np.linspace(*alpha_range, n_alpha), indexing="ij")
    return np.c_[R.ravel(), A.ravel()]


def _load_model(path):
    from .edmdc import KoopmanControlModel
    return KoopmanControlModel.load(_need(path, "model"))


def _load_policy(path):
    from .alternation import load_policy
    return load_policy(_need(path, "policy"))


def _policy_trajectory(policy, game, x0, dt):
    """Closed-loop rollout from one point, returned as a Trajectory."""
    from .alternation import policy_rollout_field
    from .game import Trajectory
    fld = policy_rollout_field(policy, game, np.asarray(x0, dtype=float)[None], dt, keep_states=True)
    states = fld.states[0]
    vals = policy.evaluate(states[:-1])
    u = np.clip(vals["u"], -1.0, 1.0)
    heading = np.mod(np.arctan2(vals["v_perp"], vals["v"]), 2 * np.pi)
    tr = Trajectory(dt * np.arange(states.shape[0]), states, u[:, None], heading[:, None])
    tr.realized_cost = float(fld.V[0])
    tr.domain_exit = bool(fld.domain_exit[0])
    return tr


def _field_rows_csv(points, rT, aT, V, path: Path) -> None:
    from .alternation import RolloutField, write_field_csv
    write_field_csv(RolloutField(points[:, 0], points[:, 1], np.asarray(rT), np.asarray(aT),
                                 np.asarray(V), np.zeros(len(V), dtype=bool)), path)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    """Sample the training grid, fit EDMDc and write the model JSON."""
    from .dictionary import build_rff
    from .edmdc import fit_edmdc, generate_training_data, turret_grid

    cfg = _config(args)
    game = _game(cfg)
    tg = cfg.training_grid
    dc = cfg.dictionary
    dictionary = build_rff(cfg.seed, dc.n_rff, dc.variance)
    data = generate_training_data(game, dictionary, turret_grid(tg.n_r, tg.n_alpha, tg.n_u, tg.n_heading),
                                  cfg.dt)
    model = fit_edmdc(data, dictionary, control_lifting=dc.control_lifting, v_A=cfg.game.v_A,
                      holdout=dc.holdout, seed=cfg.seed, rcond=dc.rcond,
                      running_weight=cfg.game.running_weight)
    out = _out(cfg, args.out, "model.json")
    model.save(out)
    md = model.metadata
    print(f"wrote {out}: holdout RMSE {md['holdout_rmse']:.3e}, "
          f"train residual {md['train_residual_fro']:.3e}")
    return 0


def cmd_solve_mcp(args) -> int:
    """One MCP equilibrium (or a batch with ``--grid``)."""
    from .game import write_trajectory_csv
    from .mcp import assemble_mcp, batch_solve, solve_mcp, validate_in_truth

    cfg = _config(args)
    model = _load_model(args.model)
    T = args.T if args.T is not None else cfg.game.T
    n_steps = int(round(T / model.dt))
    tol = args.tol if args.tol is not None else cfg.mcp.tol
    max_iter = args.max_iter if args.max_iter is not None else cfg.mcp.max_iter
    game = _game(cfg)
    if args.grid:
        pts = field_grid(*args.grid)
        res = batch_solve(model, pts, n_steps=n_steps, tol=tol, max_iter=max_iter, workers=cfg.workers)
        manifest = res.manifest()
        for i, eq in enumerate(res.results):
            if eq is not None:
                p = _out(cfg, None, f"mcp_traj_{i:04d}.csv")
                write_trajectory_csv(eq.trajectory, p, game)
                manifest[i]["trajectory"] = str(p)
        _write({"points": manifest, "failures": res.failures}, _out(cfg, args.manifest, "mcp_manifest.json"))
        if args.field:
            rT = [eq.trajectory.states[-1, 0] if eq else np.nan for eq in res.results]
            aT = [eq.trajectory.states[-1, 1] if eq else np.nan for eq in res.results]
            _field_rows_csv(pts, rT, aT, res.values, _out(cfg, args.field, "mcp_field.csv"))
        n_ok = sum(s == "converged" for s in res.status)
        print(f"batch: {n_ok}/{len(pts)} converged")
        return 0
    x0 = np.array([args.r0, args.alpha0], dtype=float)
    eq = solve_mcp(assemble_mcp(model, x0, n_steps), tol=tol, max_iter=max_iter)
    out = _out(cfg, args.out, "mcp_traj.csv")
    write_trajectory_csv(eq.trajectory, out, game)
    report = eq.to_json()
    truth = validate_in_truth(eq, game)
    report.update(truth_cost=truth["truth_cost"], state_divergence=truth["state_divergence"],
                  trajectory=str(out))
    _write(report, _out(cfg, args.report, "mcp_report.json"))
    print(f"{eq.diagnostics['status']}: V = {eq.model_cost:.6f}, {eq.classification.value}")
    return 0 if eq.converged else 1


def cmd_solve_resolvent_policy(args) -> int:
    """Run the alternating best-response iteration and write the policy JSON."""
    from .alternation import (AlternationState, alternate_to_equilibrium, initial_policies,
                              save_policy, turret_resolvent_game)

    cfg = _config(args)
    b = cfg.basis
    a = cfg.alternation
    rg = turret_resolvent_game(_game(cfg), n_centroids=b.n_centroids, n_eval=b.n_eval,
                               neighbour_value=b.neighbour_value, plan=_plan(cfg))
    state = AlternationState(initial_policies(rg), rng=np.random.default_rng(cfg.seed))
    rounds = args.rounds if args.rounds is not None else a.rounds
    t0 = time.perf_counter()
    state = alternate_to_equilibrium(state, rg, rounds=rounds, perturbation=a.perturbation,
                                     stall_window=a.stall_window, stall_tol=a.stall_tol,
                                     stall_measure=a.stall_measure, max_iter=a.max_iter,
                                     verbose=args.verbose)
    out = _out(cfg, args.out, "policy.json")
    save_policy(state, rg, out)
    print(f"wrote {out}: {state.round} rounds, converged={state.converged}, "
          f"J = {state.round_values[-1]:.6f}, {time.perf_counter() - t0:.1f} s")
    return 0 if state.converged else 1


def cmd_rollout_policy(args) -> int:
    """Closed-loop truth rollout of a feedback policy from one point."""
    from .game import cost_report, write_trajectory_csv

    cfg = _config(args)
    game = _game(cfg)
    policy = _load_policy(args.policy)
    tr = _policy_trajectory(policy, game, (args.r0, args.alpha0), cfg.dt)
    out = _out(cfg, args.out, "policy_traj.csv")
    write_trajectory_csv(tr, out, game)
    rep = cost_report(game, tr)
    rep.update(value=tr.realized_cost, domain_exit=tr.domain_exit, trajectory=str(out),
               x0=[args.r0, args.alpha0])
    _write(rep, _out(cfg, args.report, "policy_report.json"))
    print(f"V = {tr.realized_cost:.6f}, {rep['classification']}")
    return 0


def _interpolate(pts, values, n_r, n_alpha, fine):
    from scipy.interpolate import RegularGridInterpolator
    r = np.unique(pts[:, 0])
    a = np.unique(pts[:, 1])
    interp = RegularGridInterpolator((r, a), np.asarray(values).reshape(n_r, n_alpha))
    q = field_grid(*fine)
    return q, interp(q)


def cmd_value_field(args) -> int:
    """Value field ``V(r0, alpha0)`` over a grid by either method."""
    from .alternation import policy_rollout_field, write_field_csv
    from .mcp import batch_solve

    cfg = _config(args)
    game = _game(cfg)
    pts = field_grid(*args.grid)
    out = _out(cfg, args.out, f"{args.method}_field.csv")
    if args.method == "resolvent":
        fld = policy_rollout_field(_load_policy(args.policy), game, pts, cfg.dt)
        write_field_csv(fld, out)
        values = fld.V
        print(f"wrote {out}: {len(pts)} points, {int(fld.domain_exit.sum())} domain exits")
    else:
        model = _load_model(args.model)
        res = batch_solve(model, pts, n_steps=cfg.n_steps, tol=cfg.mcp.tol,
                          max_iter=cfg.mcp.max_iter, workers=cfg.workers)
        rT = [eq.trajectory.states[-1, 0] if eq else np.nan for eq in res.results]
        aT = [eq.trajectory.states[-1, 1] if eq else np.nan for eq in res.results]
        _field_rows_csv(pts, rT, aT, res.values, out)
        _write({"points": res.manifest(), "failures": res.failures},
               out.with_name(out.stem + "_manifest.json"))
        values = res.values
        n_ok = sum(s == "converged" for s in res.status)
        print(f"wrote {out}: {n_ok}/{len(pts)} converged")
    if args.interpolate:
        if min(args.grid) < 2:
            raise GridMismatchError("interpolation needs at least 2 points per axis")
        q, v = _interpolate(pts, values, *args.grid, args.interpolate)
        path = out.with_name(out.stem + "_interp.csv")
        with open(path, "w") as fh:
            fh.write("r0,alpha0,V\n")
            for (r, a), val in zip(q, v):
                fh.write(f"{r!r},{a!r},{float(val)!r}\n")
    return 0


def compare_fields(a: dict, b: dict, threshold: float = 0.05) -> dict:
    """Per-cell value deltas between two field tables on the same grid.

    Raises
    ------
    GridMismatchError
        When the grids are empty or differ.
    """
    if len(a["V"]) == 0 or len(b["V"]) == 0:
        raise GridMismatchError("empty field")
    if len(a["V"]) != len(b["V"]) or not (np.allclose(a["r0"], b["r0"], atol=1e-9)
                                           and np.allclose(a["alpha0"], b["alpha0"], atol=1e-9)):
        raise GridMismatchError("fields are not on the same initial-condition grid")
    d = np.asarray(b["V"]) - np.asarray(a["V"])
    ok = np.isfinite(d)
    absd = np.abs(d[ok])
    cells = [{"r0": float(r), "alpha0": float(al), "delta": float(x),
              "agree": bool(np.isfinite(x) and abs(x) <= threshold)}
             for r, al, x in zip(a["r0"], a["alpha0"], d)]
    return {
        "n_cells": int(len(d)),
        "n_compared": int(ok.sum()),
        "sup_abs_delta": float(absd.max()) if absd.size else float("nan"),
        "mean_abs_delta": float(absd.mean()) if absd.size else float("nan"),
        "threshold": threshold,
        "n_disagree": int(sum(not c["agree"] for c in cells)),
        "cells": cells,
    }


def cmd_compare(args) -> int:
    """Compare two field CSVs."""
    from .alternation import read_field_csv

    cfg = _config(args)
    a = read_field_csv(_need(args.field_a, "field"))
    b = read_field_csv(_need(args.field_b, "field"))
    rep = compare_fields(a, b, args.threshold)
    rep.update(field_a=str(args.field_a), field_b=str(args.field_b))
    out = _out(cfg, args.out, "comparison.json")
    _write(rep, out)
    print(f"wrote {out}: mean |dV| = {rep['mean_abs_delta']:.4f}, sup |dV| = {rep['sup_abs_delta']:.4f}, "
          f"{rep['n_disagree']} cells above {args.threshold}")
    return 0


def cmd_validate(args) -> int:
    """Quadrature plan check, and model accuracy when a model is given."""
    from .edmdc import model_error_report

    cfg = _config(args)
    plan = _plan(cfg)
    rep = {"plan": plan.to_dict()}
    ok = plan.oracle_error <= cfg.quadrature.target
    if args.model:
        model = _load_model(args.model)
        err = model_error_report(model, _game(cfg), n_test=args.n_test, seed=cfg.seed)
        rep["model"] = err
        ok = ok and max(err["rollout_rmse"], default=0.0) <= args.rmse_bound
    rep["ok"] = bool(ok)
    out = _out(cfg, args.out, "validation.json")
    _write(rep, out)
    print(f"wrote {out}: ok={ok}")
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="RunConfig JSON file")
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int)
    common.add_argument("--out-dir")

    p = argparse.ArgumentParser(prog="koopgame", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", parents=[common], help="fit an EDMDc model")
    s.add_argument("--out")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("solve-mcp", parents=[common], help="MCP equilibrium from (r0, alpha0)")
    s.add_argument("--model", required=True)
    s.add_argument("--r0", type=float, default=0.5)
    s.add_argument("--alpha0", type=float, default=math.pi / 2)
    s.add_argument("--T", type=float)
    s.add_argument("--tol", type=float)
    s.add_argument("--max-iter", type=int)
    s.add_argument("--out")
    s.add_argument("--report")
    s.add_argument("--grid", type=int, nargs=2, metavar=("N_R", "N_ALPHA"),
                   help="solve a batch over a grid instead of one point")
    s.add_argument("--manifest")
    s.add_argument("--field")
    s.set_defaults(func=cmd_solve_mcp)

    s = sub.add_parser("solve-resolvent-policy", parents=[common],
                       help="alternating best responses on the resolvent cost")
    s.add_argument("--rounds", type=int)
    s.add_argument("--out")
    s.add_argument("--verbose", action="store_true")
    s.set_defaults(func=cmd_solve_resolvent_policy)

    s = sub.add_parser("rollout-policy", parents=[common], help="closed-loop rollout of a policy")
    s.add_argument("--policy", required=True)
    s.add_argument("--r0", type=float, default=0.5)
    s.add_argument("--alpha0", type=float, default=math.pi / 2)
    s.add_argument("--out")
    s.add_argument("--report")
    s.set_defaults(func=cmd_rollout_policy)

    s = sub.add_parser("value-field", parents=[common], help="value field over a grid")
    s.add_argument("--method", choices=("mcp", "resolvent"), required=True)
    s.add_argument("--model")
    s.add_argument("--policy")
    s.add_argument("--grid", type=int, nargs=2, default=(10, 10), metavar=("N_R", "N_ALPHA"))
    s.add_argument("--interpolate", type=int, nargs=2, metavar=("N_R", "N_ALPHA"),
                   help="also write a bilinear interpolation onto a finer grid")
    s.add_argument("--out")
    s.set_defaults(func=cmd_value_field)

    s = sub.add_parser("compare", parents=[common], help="compare two field CSVs")
    s.add_argument("field_a")
    s.add_argument("field_b")
    s.add_argument("--threshold", type=float, default=0.05)
    s.add_argument("--out")
    s.set_defaults(func=cmd_compare)

    s = sub.add_parser("validate", parents=[common], help="check the quadrature plan and a model")
    s.add_argument("--model")
    s.add_argument("--n-test", type=int, default=100)
    s.add_argument("--rmse-bound", type=float, default=5e-2)
    s.add_argument("--out")
    s.set_defaults(func=cmd_validate)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "value-field":
        need = "policy" if args.method == "resolvent" else "model"
        if getattr(args, need) is None:
            print(f"error: --{need} is required for method {args.method}", file=sys.stderr)
            return 2
    try:
        return args.func(args)
    except KoopGameError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
