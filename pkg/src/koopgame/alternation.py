"""Feedback equilibria by alternating best responses on the resolvent cost.

Each player optimizes its own policy coefficients against the frozen
opponent, subject to its own sampled constraints: the turret keeps
``|u| <= 1`` on the evaluation grid, the agent keeps its speed in the
annulus ``0.9 v_A^2 <= v^2 + v_perp^2 <= v_A^2`` and does not approach at
``r = 1``; both keep ``alpha`` from leaving ``[0, pi]`` through the
boundary derivative ``alpha' = r v_perp - u``.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.optimize import minimize

from ._kernels import KERNELS
from .dictionary import BasisEvaluation, MonomialBasis, RbfBasis, build_rbf_evaluation
from .errors import NonFiniteError
from .game import GameSpec, LinearQuadraticGame, TurretDefenseGame, _closed_loop
from .resolvent import FeedbackPolicy, ResolventCost, ResolventPlan, make_plan

__all__ = [
    "FeedbackPolicy",
    "PlayerProblem",
    "ResolventGame",
    "turret_resolvent_game",
    "lq_resolvent_game",
    "initial_policies",
    "AlternationState",
    "best_response",
    "alternate_to_equilibrium",
    "policy_rollout_field",
    "write_field_csv",
    "read_field_csv",
]


@dataclass
class PlayerProblem:
    """One player's side of the game.

    Attributes
    ----------
    player : {"u", "v"}
    channels : tuple of str
        Policy channels the player owns.
    sense : float
        ``+1`` to minimize ``J_total``, ``-1`` to maximize it.
    constraints : callable
        ``constraints(policy) -> list`` of SLSQP inequality dicts over the
        player's flattened coefficients, given the frozen opponent.
    """

    player: str
    channels: tuple
    sense: float
    constraints: object


@dataclass
class ResolventGame:
    """A game prepared for the resolvent pipeline."""

    game: GameSpec
    cost: ResolventCost
    policy_basis: object
    players: Dict[str, PlayerProblem]
    boundary: dict = field(default_factory=dict)

    @property
    def basis_eval(self) -> BasisEvaluation:
        return self.cost.be


# ---------------------------------------------------------------------------
# Turret
# ---------------------------------------------------------------------------

def turret_resolvent_game(game: Optional[TurretDefenseGame] = None, n_centroids: int = 5,
                          n_eval: int = 25, neighbour_value: float = 0.85,
                          plan: Optional[ResolventPlan] = None, n_boundary: Optional[int] = None,
                          annulus: float = 0.9) -> ResolventGame:
    """Turret game on an RBF basis with sampled constraints.

    The same basis carries the value functions and the three policy
    channels ``u``, ``v`` and ``v_perp``.
    """
    game = game or TurretDefenseGame()
    basis = RbfBasis((0.0, 0.0), (1.0, math.pi), (n_centroids, n_centroids), (n_eval, n_eval),
                     0.1, neighbour_value)
    be = build_rbf_evaluation(basis)
    plan = plan or make_plan(game.horizon)
    cost = ResolventCost(be, game, plan)
    nb_pts = n_eval if n_boundary is None else n_boundary
    rb = np.linspace(0.0, 1.0, nb_pts)
    ab = np.linspace(0.0, math.pi, nb_pts)
    G = be.G
    Ga0 = basis.evaluate(np.c_[rb, np.zeros(nb_pts)])[0]
    Gapi = basis.evaluate(np.c_[rb, np.full(nb_pts, math.pi)])[0]
    Gr1 = basis.evaluate(np.c_[np.ones(nb_pts), ab])[0]
    vA2 = game.v_A ** 2
    nb = basis.n_basis
    Z = np.zeros_like(Ga0)

    def turret_cons(policy):
        q0 = rb * (Ga0 @ policy.coefs["v_perp"])
        qpi = rb * (Gapi @ policy.coefs["v_perp"])
        return [
            {"type": "ineq", "fun": lambda x: 1.0 - G @ x, "jac": lambda x: -G},
            {"type": "ineq", "fun": lambda x: 1.0 + G @ x, "jac": lambda x: G},
            {"type": "ineq", "fun": lambda x: q0 - Ga0 @ x, "jac": lambda x: -Ga0},
            {"type": "ineq", "fun": lambda x: Gapi @ x - qpi, "jac": lambda x: Gapi},
        ]

    def agent_cons(policy):
        u0 = Ga0 @ policy.coefs["u"]
        upi = Gapi @ policy.coefs["u"]

        def sq(x):
            v, q = G @ x[:nb], G @ x[nb:]
            return v * v + q * q

        def sqj(x):
            v, q = G @ x[:nb], G @ x[nb:]
            return np.hstack([2 * v[:, None] * G, 2 * q[:, None] * G])

        return [
            {"type": "ineq", "fun": lambda x: vA2 - sq(x), "jac": lambda x: -sqj(x)},
            {"type": "ineq", "fun": lambda x: sq(x) - annulus * vA2, "jac": sqj},
            {"type": "ineq", "fun": lambda x: -Gr1 @ x[:nb],
             "jac": lambda x: np.hstack([-Gr1, np.zeros_like(Gr1)])},
            {"type": "ineq", "fun": lambda x: rb * (Ga0 @ x[nb:]) - u0,
             "jac": lambda x: np.hstack([Z, rb[:, None] * Ga0])},
            {"type": "ineq", "fun": lambda x: upi - rb * (Gapi @ x[nb:]),
             "jac": lambda x: np.hstack([Z, -rb[:, None] * Gapi])},
        ]

    players = {
        "u": PlayerProblem("u", ("u",), -1.0, turret_cons),
        "v": PlayerProblem("v", ("v", "v_perp"), 1.0, agent_cons),
    }
    boundary = {"r_boundary": rb, "alpha_boundary": ab, "G_alpha0": Ga0, "G_alphapi": Gapi,
                "G_r1": Gr1}
    return ResolventGame(game, cost, basis, players, boundary)


def initial_policies(rg: ResolventGame) -> FeedbackPolicy:
    """Least-squares fit of the starting policies on the evaluation grid.

    ``u = 1 - (alpha - pi)^4 / pi^4``, ``v = cos(pi - 0.5 r alpha)`` and
    ``v_perp = sin(pi - 0.5 r alpha)`` for the turret game; zero feedback
    for other games.
    """
    be = rg.basis_eval
    Phi = rg.policy_basis.evaluate(be.points)[0]
    pinv = np.linalg.pinv(Phi, rcond=1e-10)
    if isinstance(rg.game, TurretDefenseGame):
        r, a = be.points.T
        vA = rg.game.v_A
        vals = {"u": 1.0 - (a - np.pi) ** 4 / np.pi ** 4,
                "v": vA * np.cos(np.pi - 0.5 * r * a),
                "v_perp": vA * np.sin(np.pi - 0.5 * r * a)}
    else:
        vals = {c: np.zeros(be.points.shape[0]) for c in rg.cost.spec.channels}
    return FeedbackPolicy(rg.policy_basis, {k: pinv @ v for k, v in vals.items()})


# ---------------------------------------------------------------------------
# Scalar LQ
# ---------------------------------------------------------------------------

def lq_resolvent_game(game: LinearQuadraticGame, domain=(-1.0, 1.0), value_degree: int = 2,
                      n_eval: int = 21, plan: Optional[ResolventPlan] = None) -> ResolventGame:
    """Scalar LQ game with affine feedback and a monomial value basis.

    Affine policies keep the monomial span invariant, so the generator is
    represented exactly.
    """
    vb = MonomialBasis((domain[0],), (domain[1],), value_degree, (n_eval,))
    be = build_rbf_evaluation(vb)
    pb = MonomialBasis((domain[0],), (domain[1],), 1, (n_eval,))
    plan = plan or make_plan(game.horizon)
    cost = ResolventCost(be, game, plan)
    players = {
        "u": PlayerProblem("u", ("u",), -1.0, lambda policy: []),
        "v": PlayerProblem("v", ("v",), 1.0, lambda policy: []),
    }
    return ResolventGame(game, cost, pb, players)


def lq_saddle_policy(rg: ResolventGame) -> FeedbackPolicy:
    """Stationary saddle feedback ``u = k_u x``, ``v = k_v x`` as coefficients."""
    ku, kv = rg.game.stationary_gains()
    return FeedbackPolicy(rg.policy_basis, {"u": np.array([0.0, ku]), "v": np.array([0.0, kv])})


# ---------------------------------------------------------------------------
# Alternation
# ---------------------------------------------------------------------------

@dataclass
class AlternationState:
    """Policies and history of an alternation run.

    ``history`` holds one record per completed player optimization and
    ``round_values`` the objective after each full round (index 0 is the
    starting value).
    """

    policy: FeedbackPolicy
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    round: int = 0
    history: List[dict] = field(default_factory=list)
    round_values: List[float] = field(default_factory=list)
    converged: bool = False
    converged_round: Optional[int] = None
    stall_values: List[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"policy": self.policy.to_dict(), "round": self.round, "history": self.history,
                "round_values": self.round_values, "converged": self.converged,
                "converged_round": self.converged_round,
                "stall_values": self.stall_values}


def best_response(player: str, state: AlternationState, rg: ResolventGame, *, max_iter: int = 100,
                  tol: float = 1e-10, start: Optional[np.ndarray] = None) -> dict:
    """Optimize one player's coefficients against the frozen opponent.

    Uses SLSQP with the analytic resolvent gradient and the player's own
    sampled constraints, capped at ``max_iter`` iterations.  The returned
    policy is the best feasible iterate seen (or the final iterate when none
    was feasible).

    Returns
    -------
    dict
        ``policy``, ``J`` (J_total at the returned policy), ``status``,
        ``nit``, ``max_violation``.
    """
    pp = rg.players[player]
    base = state.policy
    chans = pp.channels
    x0 = base.flat(chans) if start is None else np.asarray(start, dtype=float)
    cons = pp.constraints(base)
    best = {"val": math.inf, "x": x0.copy(), "feasible": False}

    def violation(x):
        worst = 0.0
        for c in cons:
            worst = max(worst, float(np.max(-c["fun"](x), initial=0.0)))
        return worst

    def obj(x):
        pol = base.with_flat(chans, x)
        val = rg.cost.evaluate(pol, grad=True)
        f = pp.sense * val.J_total
        g = pp.sense * np.concatenate([val.gradients[c] for c in chans])
        if not math.isfinite(f):
            raise NonFiniteError("objective became non-finite")
        feas = violation(x) <= 1e-6
        if (feas and not best["feasible"]) or (feas == best["feasible"] and f < best["val"]):
            best.update(val=f, x=x.copy(), feasible=feas)
        return f, g

    res = minimize(obj, x0, jac=True, method="SLSQP", constraints=cons,
                   options={"maxiter": max_iter, "ftol": tol})
    x = best["x"] if best["feasible"] or not np.all(np.isfinite(res.x)) else res.x
    if best["feasible"] and violation(res.x) <= 1e-6:
        f_res = obj(res.x)[0]
        if f_res <= best["val"]:
            x = res.x
    pol = base.with_flat(chans, x)
    J = rg.cost.evaluate(pol).J_total
    return {"policy": pol, "J": J, "status": int(res.status), "message": str(res.message),
            "nit": int(res.nit), "max_violation": violation(x)}


def _stall_value(measure: str, prev: np.ndarray, cur: np.ndarray) -> float:
    if measure == "pointwise":
        return float(np.mean(np.abs(cur - prev)) / max(np.mean(np.abs(cur)), 1e-12))
    if measure == "total":
        return float(abs(cur.mean() - prev.mean()) / max(abs(cur.mean()), 1e-12))
    if measure == "scaled":
        scale = max(abs(cur.mean()), float(np.mean(np.abs(cur))), 1e-12)
        return float(abs(cur.mean() - prev.mean()) / scale)
    raise ValueError(f"unknown stall measure {measure!r}")


def alternate_to_equilibrium(state: AlternationState, rg: ResolventGame, *, rounds: int = 100,
                             perturbation: float = 1e-3, stall_window: int = 3,
                             stall_tol: float = 1e-3, max_iter: int = 100,
                             order: Sequence[str] = ("u", "v"), stall_measure: str = "pointwise",
                             verbose: bool = False) -> AlternationState:
    """Alternate best responses with perturbed warm starts.

    Each optimization starts from the previous coefficients plus Gaussian
    noise of scale ``perturbation``.  The run is declared converged once the
    relative change of the cost stays below ``stall_tol`` for
    ``stall_window`` consecutive rounds.  ``stall_measure`` selects the
    change: ``"pointwise"`` is ``mean|dJ(x_i)| / mean|J(x_i)|`` over the
    evaluation grid, ``"total"`` is ``|dJ_total| / |J_total|`` and
    ``"scaled"`` is ``|dJ_total| / max(|J_total|, mean|J(x_i)|)``.  The
    last iterate is always returned.
    """
    cur = rg.cost.evaluate(state.policy).J_pointwise
    if not state.round_values:
        state.round_values.append(float(cur.mean()))
    t0 = time.perf_counter()
    for _ in range(rounds):
        state.round += 1
        for p in order:
            pp = rg.players[p]
            x = state.policy.flat(pp.channels)
            x = x + perturbation * state.rng.normal(size=x.size)
            try:
                out = best_response(p, state, rg, max_iter=max_iter, start=x)
            except (NonFiniteError, ArithmeticError, ValueError) as exc:
                state.history.append({"round": state.round, "player": p, "failed": str(exc)})
                continue
            state.policy = out["policy"]
            state.history.append({"round": state.round, "player": p, "J": out["J"],
                                  "status": out["status"], "nit": out["nit"],
                                  "max_violation": out["max_violation"],
                                  "elapsed": time.perf_counter() - t0})
        prev, cur = cur, rg.cost.evaluate(state.policy).J_pointwise
        state.round_values.append(float(cur.mean()))
        state.stall_values.append(_stall_value(stall_measure, prev, cur))
        if verbose:
            print(f"round {state.round}: J = {cur.mean():.6f}, "
                  f"change = {state.stall_values[-1]:.2e}", flush=True)
        recent = state.stall_values[-stall_window:]
        if len(recent) == stall_window and max(recent) < stall_tol:
            state.converged = True
            state.converged_round = state.round
            break
    return state


# ---------------------------------------------------------------------------
# Closed-loop fields
# ---------------------------------------------------------------------------

@dataclass
class RolloutField:
    """Closed-loop outcomes over a grid of initial conditions."""

    r0: np.ndarray
    alpha0: np.ndarray
    rT: np.ndarray
    alphaT: np.ndarray
    V: np.ndarray
    domain_exit: np.ndarray
    states: Optional[np.ndarray] = None

    def rows(self):
        return zip(self.r0, self.alpha0, self.rT, self.alphaT, self.V)


def policy_rollout_field(policy: FeedbackPolicy, game: TurretDefenseGame, initial_grid,
                         dt: float = 0.01, keep_states: bool = False) -> RolloutField:
    """RK4 closed-loop rollouts of the turret game from every grid point.

    The policies are evaluated at every RK4 stage; the turret rate is
    saturated at 1 and the agent velocity at norm ``v_A``.
    """
    X0 = np.ascontiguousarray(np.atleast_2d(np.asarray(initial_grid, dtype=float)))
    basis = policy.basis
    coef = np.ascontiguousarray(np.vstack([policy.coefs["u"], policy.coefs["v"], policy.coefs["v_perp"]]))
    n = int(round(game.horizon / dt))
    states, running = KERNELS.turret_closed_loop(
        X0, np.ascontiguousarray(basis.centroids), np.ascontiguousarray(basis.scale), basis.eps2,
        coef, float(dt), n, game.running_weight, 1.0, game.v_A)
    if not np.all(np.isfinite(states)):
        raise NonFiniteError("closed-loop rollout diverged")
    xT = states[:, -1]
    V = game.terminal_cost(xT) + running
    exit_ = ~np.all(game.in_domain(states, tol=1e-6), axis=1)
    return RolloutField(X0[:, 0], X0[:, 1], xT[:, 0], xT[:, 1], V, exit_,
                        states if keep_states else None)


FIELD_HEADER = ["r0", "alpha0", "rT", "alphaT", "V"]


def write_field_csv(fld: RolloutField, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(FIELD_HEADER)
        for row in fld.rows():
            w.writerow([repr(float(v)) for v in row])


def read_field_csv(path) -> dict:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header = rows[0]
    data = np.array([[float(c) if c != "" else np.nan for c in r] for r in rows[1:]]).reshape(-1, len(header))
    return {h: data[:, i] for i, h in enumerate(header)}


def save_policy(state: AlternationState, rg: ResolventGame, path) -> None:
    out = state.to_dict()
    out["plan"] = rg.cost.plan.to_dict()
    Path(path).write_text(json.dumps(out))


def load_policy(path) -> FeedbackPolicy:
    d = json.loads(Path(path).read_text())
    basis = RbfBasis.from_dict(d["policy"]["basis"])
    return FeedbackPolicy(basis, {k: np.asarray(v, dtype=float) for k, v in d["policy"]["coefs"].items()})
