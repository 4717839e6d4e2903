import math

import numpy as np
import pytest

from koopgame.dictionary import (MonomialBasis, RbfBasis, RffDictionary, build_rbf_evaluation,
                                 build_rff, lift, turret_rbf_basis)
from koopgame.errors import NonFiniteError, RankDeficientError


class TestRff:
    def test_deterministic(self):
        a, b = build_rff(seed=7), build_rff(seed=7)
        assert np.array_equal(a.frequencies, b.frequencies)
        assert np.array_equal(a.offsets, b.offsets)

    def test_explicit_block_only(self):
        d = build_rff(N_rff=0)
        assert d.size == 3
        assert np.allclose(lift(d, [0.3, 1.0]), [0.3, 1.0, math.cos(1.0)])

    def test_offsets_range(self):
        d = build_rff(N_rff=2000)
        assert d.offsets.min() >= 0 and d.offsets.max() < 2 * math.pi
        assert abs(d.frequencies.std() - 10.0) < 0.5

    def test_origin_entries(self):
        d = build_rff(seed=1)
        psi = lift(d, [0.0, 0.0])
        assert np.allclose(psi[:3], [0.0, 0.0, 1.0])
        assert np.allclose(psi[3:], np.cos(d.offsets))

    def test_third_entry_at_pi(self):
        assert lift(build_rff(), [1.0, math.pi])[2] == pytest.approx(-1.0)

    def test_identity_recovers_state(self, rng):
        d = build_rff()
        X = np.c_[rng.uniform(0, 1, 1000), rng.uniform(0, math.pi, 1000)]
        P = lift(d, X)
        assert np.array_equal(P[:, :2], X)
        assert np.all(np.abs(P[:, 3:]) <= 1.0)

    def test_non_finite_input(self):
        with pytest.raises(NonFiniteError):
            lift(build_rff(), [np.nan, 0.0])

    def test_round_trip(self, tmp_path):
        d = build_rff(seed=4, N_rff=12)
        d.save(tmp_path / "d.json")
        e = RffDictionary.load(tmp_path / "d.json")
        assert np.array_equal(d.frequencies, e.frequencies) and e.explicit_observables == d.explicit_observables

    def test_bad_observable(self):
        with pytest.raises(ValueError):
            build_rff(explicit_observables=["tan(x0)"])


class TestRbf:
    def test_default_layout(self):
        b = turret_rbf_basis()
        c = b.centroids
        assert c.shape == (25, 2)
        assert c[:, 0].min() == pytest.approx(-0.1) and c[:, 1].max() == pytest.approx(1.1 * math.pi)
        assert b.eval_points().shape == (625, 2)

    def test_neighbour_value(self):
        b = turret_rbf_basis()
        G, _ = b.evaluate(b.centroids[:2])
        assert G[0, 0] == 1.0
        assert G[0, 1] == pytest.approx(b.neighbour_value)

    def test_single_centroid(self):
        b = RbfBasis((0.0,), (1.0,), (1,), (5,))
        G, _ = b.evaluate(b.centroids)
        assert G[0, 0] == 1.0

    def test_full_rank_and_constant_fit(self):
        be = build_rbf_evaluation(turret_rbf_basis())
        c = be.fit(np.ones(be.points.shape[0]))
        assert np.abs(be.G @ c - 1.0).max() <= 1e-3

    def test_derivative_matches_differences(self, rng):
        b = turret_rbf_basis()
        coef = rng.normal(size=b.n_basis)
        X = np.c_[rng.uniform(0.05, 0.95, 50), rng.uniform(0.1, 3.0, 50)]
        _, dG = b.evaluate(X)
        step = 1e-6
        for k in range(2):
            e = np.zeros(2)
            e[k] = step
            fd = (b.evaluate(X + e)[0] - b.evaluate(X - e)[0]) @ coef / (2 * step)
            an = dG[k] @ coef
            assert np.abs(fd - an).max() / np.abs(an).max() <= 1e-5

    def test_rank_deficiency(self):
        b = RbfBasis((0.0,), (1.0,), (5,), (2,))
        with pytest.raises(RankDeficientError):
            build_rbf_evaluation(b)

    def test_round_trip(self):
        b = turret_rbf_basis(4, 9)
        assert RbfBasis.from_dict(b.to_dict()) == b


class TestMonomial:
    def test_exact_polynomial(self):
        be = build_rbf_evaluation(MonomialBasis(degree=3))
        x = be.points[:, 0]
        c = be.fit(1 - 2 * x + x ** 3)
        assert np.allclose(c, [1, -2, 0, 1])
        assert np.allclose(be.dG[0] @ c, -2 + 3 * x ** 2)

    def test_two_dimensional(self):
        b = MonomialBasis((0.0, 0.0), (1.0, 1.0), 2, (5, 5))
        assert b.n_basis == 6
        G, dG = b.evaluate(np.array([[0.5, 2.0]]))
        assert dG.shape == (2, 1, 6)
