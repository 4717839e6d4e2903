import math

import numpy as np
import pytest

from koopgame.errors import InadmissibleStrategyError, NonFiniteError
from koopgame.game import (FunctionGame, LinearQuadraticGame, Trajectory, TrajectoryClass,
                           TurretDefenseGame, classify_trajectory, cost_report, evaluate_cost,
                           integrate_batch, integrate_flow, lq_saddle_recursion, mirror_trajectory,
                           read_trajectory_csv, saddle_point_deviation_test, simulate_lq_saddle,
                           write_trajectory_csv)


def decay_game(horizon=1.0, running=None):
    return FunctionGame(1, (1, 1), lambda x, u, v: -x, lambda x: x[..., 0],
                        running_cost=running, horizon=horizon)


def hold(n, value):
    return np.full((n, 1), float(value))


class TestIntegrator:
    def test_exponential_decay(self):
        tr = integrate_flow(decay_game(), [1.0], hold(100, 0), hold(100, 0), 0.01)
        assert abs(tr.states[-1, 0] - math.exp(-1)) <= 1e-8
        assert abs(tr.realized_cost - math.exp(-1)) <= 1e-8

    def test_running_cost_integral(self):
        game = decay_game(running=lambda x, u, v: x[..., 0])
        tr = integrate_flow(game, [1.0], hold(100, 0), hold(100, 0), 0.01)
        assert abs(tr.running_integral - (1 - math.exp(-1))) <= 1e-8

    def test_run_away_keeps_alpha(self, turret_game):
        tr = integrate_flow(turret_game, [0.5, 0.0], hold(100, 0), hold(100, math.pi), 0.01)
        assert np.all(np.abs(tr.states[:, 1]) < 1e-15)
        assert np.all(np.diff(tr.states[:, 0]) < 0)

    def test_constrained_hold(self, turret_game):
        # cos(psi) = 0 keeps r = 1, sin(psi) = 1 cancels u = 1.
        a0 = 3 * math.pi / 4
        tr = integrate_flow(turret_game, [1.0, a0], hold(100, 1), hold(100, math.pi / 2), 0.01)
        assert abs(tr.states[-1, 0] - 1.0) < 1e-12
        assert abs(tr.states[-1, 1] - a0) < 1e-12
        assert abs(tr.realized_cost - math.cos(a0) * 1.1) <= 1e-6

    def test_turret_origin_is_fixed(self, turret_game):
        tr = integrate_flow(turret_game, [0.0, 1.0], hold(10, 0), hold(10, 0.3), 0.01)
        assert np.all(tr.states[:, 0] == 0.0)
        assert tr.realized_cost == 0.0

    def test_running_cost_identity(self, turret_game):
        x = np.array([[0.3, 0.4], [1.0, math.pi]])
        h = turret_game.running_cost(x, None, None)
        assert np.allclose(h, 0.1 * x[:, 0] * np.cos(x[:, 1]))

    def test_batch_matches_single(self, turret_game, rng):
        X0 = np.c_[rng.uniform(0.2, 1, 4), rng.uniform(0, math.pi, 4)]
        U = rng.uniform(-1, 1, (4, 20, 1))
        V = rng.uniform(0, 2 * math.pi, (4, 20, 1))
        states, running, terminal = integrate_batch(turret_game, X0, U, V, 0.01)
        for b in range(4):
            tr = integrate_flow(turret_game, X0[b], U[b], V[b], 0.01)
            assert np.allclose(tr.states, states[b], atol=1e-13)
            assert np.isclose(tr.realized_cost, running[b] + terminal[b], atol=1e-13)

    def test_non_finite_rejected(self):
        game = FunctionGame(1, (1, 1), lambda x, u, v: x ** 3, lambda x: x[..., 0], horizon=1.0)
        with pytest.raises(NonFiniteError), np.errstate(over="ignore", invalid="ignore"):
            integrate_flow(game, [1e3], hold(100, 0), hold(100, 0), 0.1)

    def test_evaluate_cost_matches(self, turret_game):
        tr = integrate_flow(turret_game, [0.7, 1.0], hold(50, 0.5), hold(50, 2.0), 0.02)
        assert abs(evaluate_cost(turret_game, tr) - tr.realized_cost) < 1e-10


class TestTrajectory:
    def test_length_check(self):
        with pytest.raises(ValueError):
            Trajectory(np.arange(3.0), np.zeros((3, 2)), np.zeros((3, 1)), np.zeros((2, 1)))

    def test_monotone_times(self):
        with pytest.raises(ValueError):
            Trajectory(np.array([0.0, 0.2, 0.1]), np.zeros((3, 2)), np.zeros((2, 1)), np.zeros((2, 1)))

    @staticmethod
    def make(alpha, r):
        n = len(alpha)
        return Trajectory(0.1 * np.arange(n), np.c_[r, alpha], np.zeros((n - 1, 1)), np.zeros((n - 1, 1)))

    def test_classes(self):
        t = np.linspace(0, 1, 11)
        ul = self.make(np.maximum(1.0 - t / 0.6, 0.0), np.full(11, 0.5))
        con = self.make(np.full(11, 2.0), np.minimum(0.8 + t, 1.0))
        reg = self.make(np.full(11, 1.5), np.full(11, 0.5))
        assert classify_trajectory(ul) is TrajectoryClass.UNIVERSAL_LINE
        assert classify_trajectory(con) is TrajectoryClass.CONSTRAINED
        assert classify_trajectory(reg) is TrajectoryClass.REGULAR

    def test_mirror_is_involution(self, turret_game, rng):
        tr = integrate_flow(turret_game, [0.6, 1.2], rng.uniform(-1, 1, (20, 1)),
                            rng.uniform(0, 2 * math.pi, (20, 1)), 0.01)
        back = mirror_trajectory(mirror_trajectory(tr))
        assert np.allclose(back.states, tr.states)
        assert np.allclose(np.mod(back.controls_v, 2 * math.pi), np.mod(tr.controls_v, 2 * math.pi))

    def test_mirror_matches_reflected_dynamics(self, turret_game, rng):
        tr = integrate_flow(turret_game, [0.6, 1.2], rng.uniform(-1, 1, (20, 1)),
                            rng.uniform(0, 2 * math.pi, (20, 1)), 0.01)
        m = mirror_trajectory(tr)
        again = integrate_flow(turret_game, m.states[0], m.controls_u, m.controls_v, 0.01)
        assert np.allclose(again.states, m.states, atol=1e-12)
        assert abs(again.realized_cost - tr.realized_cost) < 1e-12

    def test_csv_round_trip(self, turret_game, tmp_path):
        tr = integrate_flow(turret_game, [0.6, 1.2], hold(10, 0.3), hold(10, 2.0), 0.01)
        path = tmp_path / "traj.csv"
        write_trajectory_csv(tr, path, turret_game)
        header = path.read_text().splitlines()[0]
        assert header == "t,r,alpha,u,v,v_perp,h"
        back = read_trajectory_csv(path, turret_game)
        assert np.allclose(back.states, tr.states)
        assert np.allclose(np.mod(back.controls_v, 2 * math.pi), tr.controls_v)

    def test_cost_report(self, turret_game):
        tr = integrate_flow(turret_game, [1.0, 3 * math.pi / 4], hold(100, 1), hold(100, math.pi / 2), 0.01)
        rep = cost_report(turret_game, tr)
        assert rep["classification"] == "Constrained"
        assert abs(rep["g_term"] + rep["h_integral"] - rep["J"]) < 1e-15


class TestDeviation:
    def test_lq_saddle_resists(self):
        game = LinearQuadraticGame(q_T=1.0)
        dt, n = 0.01, 100
        A, Bu, Bv = game.zoh_matrices(dt)
        P, Ku, Kv = lq_saddle_recursion(A, Bu, Bv, game.sampled_stage_matrix(dt), game.q_T, n)
        x, u, v = simulate_lq_saddle(A, Bu, Bv, Ku, Kv, 0.8)
        rep = saddle_point_deviation_test(game, u[:, None], v[:, None], [0.8], 200, 0, dt=dt)
        assert abs(rep.V - P[0] * 0.64) < 1e-6
        assert rep.max_gain_u_deviator <= 1e-6
        assert rep.max_gain_v_deviator <= 1e-6

    def test_turret_still_is_not_saddle(self, turret_game):
        n = 100
        v_star = hold(n, math.pi / 2)
        rep = saddle_point_deviation_test(turret_game, hold(n, 0), v_star, [0.5, math.pi / 2], 100, 0)
        assert rep.max_gain_u_deviator > 0

    def test_zero_deviations(self, turret_game):
        rep = saddle_point_deviation_test(turret_game, hold(10, 0), hold(10, 0), [0.5, 1.0], 0, 0)
        assert rep.max_gain_u_deviator == 0.0 and rep.max_gain_v_deviator == 0.0

    def test_inadmissible_candidate(self, turret_game):
        with pytest.raises(InadmissibleStrategyError):
            saddle_point_deviation_test(turret_game, hold(10, 2.0), hold(10, 0), [0.5, 1.0], 5, 0)

    def test_custom_rollout_needs_open_loop(self, turret_game):
        with pytest.raises(ValueError):
            saddle_point_deviation_test(turret_game, lambda t, x: np.zeros((len(x), 1)), hold(10, 0),
                                        [0.5, 1.0], 5, 0, rollout=lambda *a: None)
