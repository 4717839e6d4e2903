"""Acceptance criteria, one recorded line each.

Run ``pytest tests/test_acceptance.py -v``; the terminal summary lists
``criterion N: PASS|FAIL`` with the measured values.  ``-m "not slow"``
skips the long end-to-end runs (criteria 8, 9 and 11).
"""

import collections
import math
import time

import numpy as np
import pytest
from scipy.linalg import expm

from koopgame.alternation import (AlternationState, alternate_to_equilibrium, initial_policies,
                                  policy_rollout_field, turret_resolvent_game)
from koopgame.cli import _policy_trajectory, field_grid
from koopgame.config import AlternationConfig
from koopgame.dictionary import MonomialBasis, build_rbf_evaluation, build_rff
from koopgame.edmdc import (GridSpec, fit_edmdc, generate_training_data, model_error_report,
                            turret_grid)
from koopgame.game import (FunctionGame, LinearQuadraticGame, TrajectoryClass, evaluate_cost,
                           integrate_flow, lq_saddle_recursion, mirror_trajectory,
                           saddle_point_deviation_test)
from koopgame.mcp import assemble_mcp, batch_solve, lcp_enumerate, lq_mcp, solve_lcp, solve_mcp
from koopgame.resolvent import (FeedbackPolicy, FieldClosedLoop, ResolventCost, assemble_generator,
                                cost_functional, make_plan, resolvent_apply)


def wrap(a):
    return np.abs(np.mod(np.asarray(a) + np.pi, 2 * np.pi) - np.pi)


# ---------------------------------------------------------------------------
# 1-2: resolvent quadrature
# ---------------------------------------------------------------------------

def test_c01_quadrature_oracle(criterion):
    t0 = time.perf_counter()
    plan = make_plan(1.0)
    be = build_rbf_evaluation(MonomialBasis((0.0,), (1.0,), 4, (25,)))
    spec = FieldClosedLoop(lambda X: -X, lambda X: X[:, 0])
    L = assemble_generator(be, spec).L
    x = be.points[:, 0]
    err = np.abs(be.G @ resolvent_apply(plan, L, be.fit(x), 1.0) - math.exp(-1) * x).max()
    dt = time.perf_counter() - t0
    ok = err <= 1e-6 and dt < 1.0
    criterion(1, ok, f"max error {err:.2e} (<= 1e-6), {dt:.3f} s (< 1 s)")
    assert ok


def test_c02_running_cost_identity(criterion):
    plan = make_plan(1.0)
    be = build_rbf_evaluation(MonomialBasis((0.0,), (1.0,), 4, (25,)))
    spec = FieldClosedLoop(lambda X: -X, lambda X: 0.0 * X[:, 0], lambda X: X[:, 0])
    J = cost_functional(plan, be, spec, eval_points=np.array([[1.0]])).J_pointwise[0]
    err = abs(J - (1 - math.exp(-1)))
    ok = err <= 1e-6
    criterion(2, ok, f"|J(1) - (1 - 1/e)| = {err:.2e} (<= 1e-6)")
    assert ok


# ---------------------------------------------------------------------------
# 3-4: EDMDc
# ---------------------------------------------------------------------------

def test_c03_edmdc_linear_recovery(criterion):
    t0 = time.perf_counter()
    A = np.array([[-0.3, 1.0], [-1.0, -0.2]])
    Bu = np.array([[0.0], [1.0]])
    Bv = np.array([[0.5], [0.0]])
    game = FunctionGame(2, (1, 1), lambda x, u, v: x @ A.T + u @ Bu.T + v @ Bv.T,
                        lambda x: 0.0 * x[..., 0], horizon=1.0)
    ax = np.linspace(-1, 1, 5)
    grid = GridSpec((ax, ax), (np.linspace(-1, 1, 3),), (np.linspace(-1, 1, 3),))
    d = build_rff(N_rff=0, explicit_observables=["x0", "x1"])
    model = fit_edmdc(generate_training_data(game, d, grid, 0.01), d, control_lifting="identity",
                      running_weight=None, holdout=0.0)
    M = np.zeros((4, 4))
    M[:2, :2], M[:2, 2:3], M[:2, 3:4] = A, Bu, Bv
    E = expm(0.01 * M)
    err = max(np.abs(model.K - E[:2, :2]).max(), np.abs(model.K_u - E[:2, 2:3]).max(),
              np.abs(model.K_v - E[:2, 3:4]).max())
    dt = time.perf_counter() - t0
    ok = err <= 1e-8 and dt < 10.0
    criterion(3, ok, f"max |K - K_zoh| = {err:.2e} (<= 1e-8), {dt:.2f} s (< 10 s)")
    assert ok


def test_c04_edmdc_turret_accuracy(criterion, turret_game):
    t0 = time.perf_counter()
    d = build_rff(seed=0)
    data = generate_training_data(turret_game, d, turret_grid())
    lifted = fit_edmdc(data, d, seed=0)
    base = fit_edmdc(data, d, control_lifting="unlifted", seed=0)
    rl = np.array(model_error_report(lifted, turret_game, n_test=100, seed=0)["rollout_rmse"])
    rb = np.array(model_error_report(base, turret_game, n_test=100, seed=0)["rollout_rmse"])
    dt = time.perf_counter() - t0
    ok = bool(np.all(rl <= 5e-2) and np.all(rl < rb) and dt < 120)
    criterion(4, ok, f"lifted RMSE (r, alpha) = ({rl[0]:.2e}, {rl[1]:.2e}) (<= 5e-2), "
                     f"unlifted ({rb[0]:.2e}, {rb[1]:.2e}), {dt:.1f} s (< 120 s)")
    assert ok


# ---------------------------------------------------------------------------
# 5-7: MCP
# ---------------------------------------------------------------------------

def test_c05_mcp_oracles(criterion):
    t0 = time.perf_counter()
    worst_res = worst_err = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        A = rng.normal(size=(10, 10))
        S = rng.normal(size=(10, 10))
        M = A @ A.T + (S - S.T) + 0.1 * np.eye(10)
        q = rng.normal(size=10)
        res = solve_lcp(M, q)
        worst_res = max(worst_res, res.residual)
        worst_err = max(worst_err, np.abs(res.z - lcp_enumerate(M, q)).max())
    game = LinearQuadraticGame()
    Ad, Bu, Bv = game.zoh_matrices(0.01)
    W = game.sampled_stage_matrix(0.01)
    _, Ku, Kv = lq_saddle_recursion(Ad, Bu, Bv, W, game.q_T, 100)
    prob = lq_mcp(Ad, Bu, Bv, W, game.q_T, 0.7, 100)
    w, _ = prob.split(prob.solve(np.zeros((100, 2))).z)
    x = prob.outputs(w)[:, 0]
    lq_err = max(np.abs(w[:, 0] - Ku * x[:-1]).max(), np.abs(w[:, 1] - Kv * x[:-1]).max())
    dt = time.perf_counter() - t0
    ok = worst_res <= 1e-8 and worst_err <= 1e-8 and lq_err <= 1e-6 and dt < 60
    criterion(5, ok, f"LCP residual {worst_res:.1e}, vs enumeration {worst_err:.1e} (<= 1e-8); "
                     f"LQ vs Riccati {lq_err:.1e} (<= 1e-6); {dt:.1f} s (< 60 s)")
    assert ok


def test_c06_mcp_turret_structure(criterion, turret_model):
    t0 = time.perf_counter()
    ul = solve_mcp(assemble_mcp(turret_model, [0.5, 0.0], 100))
    t_ul = time.perf_counter() - t0
    u_max = np.abs(ul.trajectory.controls_u).max()
    head = wrap(ul.trajectory.controls_v[:, 0] - np.pi).max()
    t0 = time.perf_counter()
    con = solve_mcp(assemble_mcp(turret_model, [1.0, 3 * math.pi / 4], 100))
    t_con = time.perf_counter() - t0
    r_min = con.trajectory.states[:, 0].min()
    ok_ul = ul.converged and u_max <= 0.05 and head <= 0.1
    ok_con = con.converged and r_min >= 0.95
    ok = ok_ul and ok_con and max(t_ul, t_con) < 300
    criterion(6, ok, f"from (0.5, 0): converged={ul.converged}, max|u| = {u_max:.3f} (<= 0.05), "
                     f"heading error {head:.3f} rad (<= 0.1); from (1, 3pi/4): converged={con.converged}, "
                     f"min r = {r_min:.4f} (>= 0.95); solves {t_ul:.1f} s, {t_con:.1f} s")
    assert ok


def test_c07_saddle_deviation_suite(criterion, turret_model, turret_game):
    worst = 0.0
    n_conv = 0
    tested = []
    for r0 in (0.3, 0.6, 0.9):
        for a0 in (0.5, 1.5, 2.5):
            eq = solve_mcp(assemble_mcp(turret_model, [r0, a0], 100))
            n_conv += eq.converged
            tr = eq.trajectory
            rep = saddle_point_deviation_test(turret_game, tr.controls_u, tr.controls_v, [r0, a0], 200, 0,
                                              rollout=turret_model.rollout_batch)
            worst = max(worst, rep.max_gain_u_deviator, rep.max_gain_v_deviator)
            tested += [rep.n_tested_u, rep.n_tested_v]
    ok = n_conv == 9 and worst <= 2e-2
    criterion(7, ok, f"{n_conv}/9 converged, max deviation gain {worst:.2e} (<= 2e-2), "
                     f"{sum(tested)}/3600 deviations admissible (fewest per player and point {min(tested)})")
    assert ok


# ---------------------------------------------------------------------------
# 8-10: resolvent alternation
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def alternation_run():
    rg = turret_resolvent_game(n_centroids=5, n_eval=15)
    a = AlternationConfig()
    t0 = time.perf_counter()
    st = AlternationState(initial_policies(rg), np.random.default_rng(0))
    st = alternate_to_equilibrium(st, rg, rounds=30, perturbation=a.perturbation,
                                  stall_window=a.stall_window, stall_tol=a.stall_tol,
                                  stall_measure=a.stall_measure, max_iter=a.max_iter)
    return rg, st, time.perf_counter() - t0


def interior_points(n=21):
    R, A = np.meshgrid(np.linspace(0.3, 1.0, n), np.linspace(0.5, 2.6, n), indexing="ij")
    return np.c_[R.ravel(), A.ravel()]


@pytest.mark.slow
def test_c08_alternation_convergence(criterion, alternation_run):
    rg, st, dt = alternation_run
    u = st.policy.evaluate(interior_points())["u"]
    tail = ", ".join(f"{v:.1e}" for v in st.stall_values[-3:])
    ok = st.converged and u.min() >= 0.9 and dt <= 3600
    criterion(8, ok, f"converged={st.converged} (round {st.converged_round}) after {st.round} rounds, "
                     f"last changes [{tail}] (< 1e-3 x 3); interior min u = {u.min():.3f} (>= 0.9); "
                     f"{dt:.0f} s")
    assert ok


@pytest.mark.slow
def test_c09_closed_loop_field(criterion, alternation_run):
    rg, st, _ = alternation_run
    game = rg.game
    pts = field_grid(10, 10)
    fld = policy_rollout_field(st.policy, game, pts)
    upper = (fld.alphaT - fld.alpha0).max()
    lower = fld.alphaT.min()
    ok_alpha = lower >= -1e-6 and upper <= 1e-3
    V = fld.V.reshape(10, 10)
    ok_sign = V[-1, -1] < 0 < V[-1, 0]
    sym = 0.0
    for x0 in ((0.5, 0.7), (0.8, 2.0), (1.0, 2.5)):
        fb = _policy_trajectory(st.policy, game, x0, 0.01)
        tr = integrate_flow(game, fb.states[0], fb.controls_u, fb.controls_v, 0.01)
        m = mirror_trajectory(tr)
        again = integrate_flow(game, m.states[0], m.controls_u, m.controls_v, 0.01)
        sym = max(sym, abs(evaluate_cost(game, again) - evaluate_cost(game, tr)),
                  float(np.abs(again.states - m.states).max()))
    ok_sym = sym <= 1e-9
    ok = ok_alpha and ok_sign and ok_sym
    worst = np.argmax(fld.alphaT - fld.alpha0)
    criterion(9, ok, f"min alpha_T = {lower:.1e} (>= 0), max alpha_T - alpha0 = {upper:.3e} (<= 1e-3) "
                     f"at (r0, alpha0) = ({fld.r0[worst]:.2f}, {fld.alpha0[worst]:.2f}); "
                     f"V(1, pi) = {V[-1, -1]:.3f} < 0 < V(1, 0) = {V[-1, 0]:.3f}: {ok_sign}; "
                     f"mirror residual {sym:.1e} (<= 1e-9)")
    assert ok


def test_c10_gradient_checks(criterion, turret_game):
    plan = make_plan(1.0)
    be = build_rbf_evaluation(turret_resolvent_game().policy_basis)
    n = len(be.points)
    pol = FeedbackPolicy(be.basis, {"u": be.fit(0.8 * np.ones(n)), "v": be.fit(-0.3 * np.ones(n)),
                                    "v_perp": be.fit(0.9 * np.ones(n))})
    cost = ResolventCost(be, turret_game, plan)
    g = cost.evaluate(pol, grad=True).gradients
    chans = list(g)
    flat = np.concatenate([g[c] for c in chans])
    x0 = pol.flat(chans)
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(20):
        d = rng.normal(size=x0.size)
        d /= np.linalg.norm(d)
        fp = cost.evaluate(pol.with_flat(chans, x0 + 1e-5 * d)).J_total
        fm = cost.evaluate(pol.with_flat(chans, x0 - 1e-5 * d)).J_total
        an = flat @ d
        worst = max(worst, abs((fp - fm) / 2e-5 - an) / max(abs(an), 1e-3))
    ok = worst <= 1e-4
    criterion(10, ok, f"max relative error over 20 directions {worst:.2e} (<= 1e-4)")
    assert ok


# ---------------------------------------------------------------------------
# 11: classification ratio
# ---------------------------------------------------------------------------

@pytest.mark.slow
def test_c11_classification_ratio(criterion, turret_model):
    t0 = time.perf_counter()
    res = batch_solve(turret_model, field_grid(10, 10), n_steps=100)
    counts = collections.Counter(eq.classification for eq in res.results if eq is not None)
    n_conv = sum(s == "converged" for s in res.status)
    present = all(counts[c] > 0 for c in TrajectoryClass)
    regular_top = counts[TrajectoryClass.REGULAR] == max(counts.values())
    ok = present and regular_top
    summary = ", ".join(f"{c.value} {counts[c]}" for c in TrajectoryClass)
    criterion(11, ok, f"{summary}; {n_conv}/100 converged; {time.perf_counter() - t0:.0f} s")
    assert ok
