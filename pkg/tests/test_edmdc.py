import math

import numpy as np
import pytest
from scipy.linalg import expm

from koopgame.dictionary import build_rff
from koopgame.edmdc import (GridSpec, KoopmanControlModel, TrainingSet, fit_edmdc,
                            generate_training_data, model_error_report, training_residual,
                            turret_grid)
from koopgame.errors import RankDeficientError
from koopgame.game import FunctionGame, integrate_flow

A = np.array([[-0.3, 1.0], [-1.0, -0.2]])
BU = np.array([[0.0], [1.0]])
BV = np.array([[0.5], [0.0]])


def linear_game():
    def f(x, u, v):
        return x @ A.T + u @ BU.T + v @ BV.T
    return FunctionGame(2, (1, 1), f, lambda x: x[..., 0] * 0.0, horizon=1.0)


def identity_dictionary():
    return build_rff(N_rff=0, explicit_observables=["x0", "x1"])


def linear_grid(n=5):
    ax = np.linspace(-1, 1, n)
    return GridSpec((ax, ax), (np.linspace(-1, 1, 3),), (np.linspace(-1, 1, 3),))


def zoh(dt):
    M = np.zeros((4, 4))
    M[:2, :2] = A
    M[:2, 2:3] = BU
    M[:2, 3:4] = BV
    E = expm(M * dt)
    return E[:2, :2], E[:2, 2:3], E[:2, 3:4]


@pytest.fixture(scope="module")
def linear_model():
    d = identity_dictionary()
    data = generate_training_data(linear_game(), d, linear_grid(), 0.01)
    return fit_edmdc(data, d, control_lifting="identity", running_weight=None, holdout=0.0), data


class TestTrainingData:
    def test_product_count(self, turret_game):
        ts = generate_training_data(turret_game, None, turret_grid(11, 11, 5, 8))
        assert len(ts) == 4840

    def test_run_away_keeps_alpha(self, turret_game):
        grid = GridSpec((np.array([0.5]), np.array([0.7])), (np.array([0.0]),), (np.array([math.pi]),))
        ts = generate_training_data(turret_game, None, grid)
        assert abs(ts.Y[0, 1] - 0.7) < 1e-15

    def test_origin_is_fixed(self, turret_game):
        # At r = 0 only the turret moves alpha, so a still turret leaves x fixed.
        grid = GridSpec((np.array([0.0]), np.array([1.1])), (np.array([0.0, 1.0]),), (np.array([2.0]),))
        ts = generate_training_data(turret_game, None, grid)
        assert np.array_equal(ts.Y[0], ts.X[0])
        assert ts.Y[1, 0] == 0.0 and ts.Y[1, 1] == pytest.approx(1.1 - ts.dt)

    def test_matches_integrator(self, turret_game):
        ts = generate_training_data(turret_game, None, turret_grid(3, 3, 2, 2))
        i = 17
        tr = integrate_flow(turret_game, ts.X[i], ts.U[i:i + 1], ts.V[i:i + 1], ts.dt)
        assert np.allclose(tr.states[1], ts.Y[i], atol=1e-15)

    def test_empty_axis(self, turret_game):
        with pytest.raises(ValueError):
            generate_training_data(turret_game, None, turret_grid(0, 3, 2, 2))


class TestFit:
    def test_linear_recovery(self, linear_model):
        model, _ = linear_model
        K, Ku, Kv = zoh(0.01)
        assert np.abs(model.K - K).max() <= 1e-8
        assert np.abs(model.K_u - Ku).max() <= 1e-8
        assert np.abs(model.K_v - Kv).max() <= 1e-8

    def test_duplication_invariance(self, linear_model):
        model, data = linear_model
        dd = TrainingSet(*(np.concatenate([a, a]) for a in (data.X, data.U, data.V, data.Y)), data.dt)
        m2 = fit_edmdc(dd, identity_dictionary(), control_lifting="identity", running_weight=None, holdout=0.0)
        assert np.allclose(m2.K, model.K, atol=1e-12)
        assert np.allclose(m2.K_u, model.K_u, atol=1e-12)

    def test_zero_dynamics(self):
        game = FunctionGame(2, (1, 1), lambda x, u, v: 0.0 * x, lambda x: x[..., 0], horizon=1.0)
        d = identity_dictionary()
        data = generate_training_data(game, d, linear_grid(4))
        m = fit_edmdc(data, d, control_lifting="identity", running_weight=None)
        assert np.allclose(m.K, np.eye(2), atol=1e-12)
        assert np.allclose(m.B, 0.0, atol=1e-12)

    def test_rank_deficient(self, turret_game):
        d = build_rff()
        data = generate_training_data(turret_game, d, turret_grid(1, 1, 1, 1))
        with pytest.raises(RankDeficientError):
            fit_edmdc(data, d)

    def test_perfect_model_report(self, linear_model):
        model, _ = linear_model
        rep = model_error_report(model, linear_game(), n_test=10, seed=0)
        assert max(rep["rollout_rmse"]) <= 1e-8
        assert max(rep["one_step_rmse"]) <= 1e-8

    def test_training_residual(self, linear_model):
        model, data = linear_model
        assert training_residual(model, data) < 1e-10


class TestTurretModel:
    def test_holdout_recorded(self, turret_model):
        md = turret_model.metadata
        assert md["n_holdout"] == int(0.2 * md["n_samples"])
        # The RFF coordinates oscillate on a 0.1 length scale and dominate the
        # all-coordinate figure; the state block is predicted far better.
        assert md["holdout_rmse"] < 0.06
        assert max(md["holdout_state_rmse"]) < 1e-4

    def test_cost_matrices(self, turret_model):
        d = turret_model.dictionary
        Q = turret_model.Q_g
        i, j = d.index_of("x0"), d.index_of("cos(x1)")
        assert Q[i, j] == 1.0 and np.count_nonzero(Q) == 1
        assert np.allclose(turret_model.Q_h, 0.1 * turret_model.dt * Q)

    def test_cost_of_lifted_state(self, turret_model):
        psi = turret_model.lift(np.array([[0.5, 1.0]]))
        z = np.append(psi[0], 1.0)
        assert z @ turret_model.Q_g @ z == pytest.approx(0.5 * math.cos(1.0))

    def test_ellipse_and_inversion(self, turret_model, rng):
        from koopgame.mcp import recover_headings
        r = rng.uniform(0.05, 1, 50)
        psi = rng.uniform(0, 2 * math.pi, 50)
        nu, nq = turret_model.lifted_agent_controls(r, psi).T
        assert np.allclose(nu ** 2 + r ** 2 * nq ** 2, r ** 4)
        back = recover_headings(r, nu, nq)
        assert np.allclose(np.exp(1j * back), np.exp(1j * psi))

    def test_rollout_consistency(self, turret_model, rng):
        U = rng.uniform(-1, 1, (20, 1))
        V = rng.uniform(0, 2 * math.pi, (20, 1))
        ro = turret_model.rollout([0.5, 1.0], U, V)
        costs, states = turret_model.rollout_batch(np.array([0.5, 1.0]), U[None], V[None])
        assert np.allclose(states[0], ro.trajectory.states)
        assert costs[0] == pytest.approx(ro.cost)

    def test_save_load_identical(self, turret_model, tmp_path):
        turret_model.save(tmp_path / "a.json")
        m = KoopmanControlModel.load(tmp_path / "a.json")
        m.save(tmp_path / "b.json")
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
        assert np.array_equal(m.K, turret_model.K)
        assert np.array_equal(m.Q_h, turret_model.Q_h)

    def test_empty_report(self, turret_model, turret_game):
        rep = model_error_report(turret_model, turret_game, n_test=0)
        assert rep["rollout_rmse"] == [] and rep["n_test"] == 0
