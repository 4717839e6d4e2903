import math

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from koopgame.config import RunConfig
from koopgame.dictionary import build_rbf_evaluation, build_rff, lift, turret_rbf_basis
from koopgame.game import TurretDefenseGame
from koopgame.mcp import fischer_burmeister, recover_headings, solve_lcp
from koopgame.resolvent import make_plan, resolvent_apply

finite = st.floats(-1e3, 1e3, allow_nan=False)
unit = st.floats(0.0, 1.0)

RFF = build_rff()
PLANS = [make_plan(1.0, N=n) for n in (50, 100, 200, 400, 800, 1600)]
RBF = build_rbf_evaluation(turret_rbf_basis())


@given(finite, finite)
def test_fb_zero_set(a, b):
    phi = float(fischer_burmeister(a, b)[0])
    complementary = min(a, b) == 0.0 and max(a, b) >= 0.0
    if complementary:
        assert phi == 0.0
    elif min(a, b) < -1e-6 or min(a, b) > 1e-6:
        assert phi != 0.0


@given(finite, finite)
def test_fb_sign(a, b):
    # Non-negative exactly on the non-negative quadrant.
    phi = float(fischer_burmeister(a, b)[0])
    if min(a, b) >= 0.0:
        assert phi >= -1e-12 * max(1.0, a, b)
    elif min(a, b) < -1e-12 * max(1.0, abs(a), abs(b)):
        assert phi < 0.0


@given(unit, st.floats(0.0, math.pi))
def test_lift_recovers_state(r, alpha):
    psi = lift(RFF, [r, alpha])
    assert psi[0] == r and psi[1] == alpha and psi[2] == math.cos(alpha)
    assert np.all(np.abs(psi[3:]) <= 1.0)


@given(st.floats(0.05, 1.0), st.floats(-math.pi, math.pi))
def test_heading_round_trip(r, psi):
    nu, nq = TurretDefenseGame().lifted_controls(np.array([r]), np.array([psi]))
    back = recover_headings(np.array([r]), np.atleast_1d(nu), np.atleast_1d(nq))[0]
    assert abs(math.remainder(back - psi, 2 * math.pi)) <= 1e-12


@settings(max_examples=25, deadline=None)
@given(st.floats(-3.0, 0.0))
def test_quadrature_converges_in_n(lam):
    # Sup-norm error over t; the pointwise error changes sign and can vanish
    # by accident at a single t.
    ts = np.linspace(0.05, 1.0, 20)
    errs = [max(abs(resolvent_apply(p, np.array([[lam]]), np.array([1.0]), t)[0] - math.exp(lam * t))
                for t in ts) for p in PLANS]
    for prev, cur in zip(errs, errs[1:]):
        assert cur <= prev or max(prev, cur) <= 1e-8
    assert errs[-1] <= 1e-8


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-2.0, 2.0), min_size=6, max_size=6))
def test_rbf_quadratic_reconstruction(c):
    r, a = RBF.points.T
    f = c[0] + c[1] * r + c[2] * a + c[3] * r * r + c[4] * r * a + c[5] * a * a
    if np.linalg.norm(f) < 1e-6:
        return
    e = RBF.G @ RBF.fit(f) - f
    assert np.linalg.norm(e) <= 1e-2 * np.linalg.norm(f)


def test_rbf_refinement_reduces_residual():
    pts = turret_rbf_basis().eval_points()
    r, a = pts.T
    f = 1 + r + a + r * r + r * a + a * a
    res = []
    for n in (3, 5, 7):
        be = build_rbf_evaluation(turret_rbf_basis(n, 25))
        res.append(np.abs(be.G @ be.fit(f) - f).max())
    assert res[0] > res[1] > res[2]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_lcp_complementarity(seed):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(6, 6))
    M = A @ A.T + 0.1 * np.eye(6)
    q = rng.normal(size=6)
    res = solve_lcp(M, q)
    w = M @ res.z + q
    assert res.z.min() >= -1e-8 and w.min() >= -1e-8
    assert abs(res.z @ w) <= 1e-7


@given(st.floats(0.1, 5.0), st.sampled_from([0.5, 1.0, 2.0]), st.integers(1, 8),
       st.integers(0, 10 ** 6), st.sampled_from(["pointwise", "total", "scaled"]),
       st.one_of(st.none(), st.integers(10, 500)))
def test_config_round_trip(v_A, T, workers, seed, measure, N):
    cfg = RunConfig()
    cfg.game.v_A, cfg.game.T, cfg.workers, cfg.seed = v_A, T, workers, seed
    cfg.alternation.stall_measure = measure
    cfg.quadrature.N = N
    back = RunConfig.from_dict(cfg.to_dict())
    assert back == cfg and back.to_json() == cfg.to_json()
