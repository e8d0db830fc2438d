import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.optimize import linear_sum_assignment

from brenierlab.coupling import (
    BistochasticMeasure,
    gamma_identity,
    gamma_shift,
    mk_distance,
    permutation_coupling,
    product_coupling,
    random_bistochastic,
    random_permutation_mixture,
    transport_lp,
)
from brenierlab.torus import TorusGrid, squared_distance_matrix

G4 = TorusGrid(1, 4)


def _assignment_distance(p, q, grid):
    """Oracle: equal-mass atoms, so the MK problem is an assignment problem."""
    c = squared_distance_matrix(grid)
    N = grid.size
    cost = c[np.arange(N)][:, np.arange(N)] + c[p][:, q]
    r, s = linear_sum_assignment(cost)
    return np.sqrt(cost[r, s].sum() / N)


class TestBistochastic:
    def test_validation(self):
        with pytest.raises(ValueError):
            BistochasticMeasure(G4, np.eye(4))
        with pytest.raises(ValueError):
            BistochasticMeasure(G4, np.full((3, 3), 1 / 9))
        bad = np.eye(4) / 4
        bad[0, 0], bad[0, 1] = 0.3, -0.05
        with pytest.raises(ValueError):
            BistochasticMeasure(G4, bad)

    def test_shift_structure(self):
        g = gamma_shift(G4, 1)
        i, j = g.support()
        np.testing.assert_array_equal(j, (i + 1) % 4)
        assert g.free_motion_action() == pytest.approx(0.5 / 16)

    def test_shift_2d(self):
        g = TorusGrid(2, 3)
        m = gamma_shift(g, (1, 0))
        i, j = m.support()
        np.testing.assert_array_equal(j, (i + 3) % 9)

    def test_blend_and_transpose(self):
        a, b = gamma_identity(G4), gamma_shift(G4, 1)
        m = a.blend(b, 0.25)
        assert m.mass[0, 0] == pytest.approx(0.75 / 4)
        np.testing.assert_allclose(b.transpose().mass, gamma_shift(G4, -1).mass)

    @given(st.integers(0, 10_000), st.sampled_from([0.5, 1.0, 4.0]))
    def test_random_is_bistochastic(self, seed, heat):
        m = random_bistochastic(G4, seed, heat)
        assert m.marginal_residual() < 1e-12
        assert np.all(m.mass > 0)

    def test_mixture_is_sparse(self):
        m = random_permutation_mixture(TorusGrid(1, 8), 3)
        assert m.marginal_residual() < 1e-12
        assert np.count_nonzero(m.mass) <= 24

    def test_serialization_roundtrip(self):
        m = random_bistochastic(G4, 5)
        np.testing.assert_allclose(BistochasticMeasure.from_csv(m.to_csv(), G4).mass, m.mass)
        np.testing.assert_allclose(BistochasticMeasure.from_json(m.to_json()).mass, m.mass)


class TestTransport:
    def test_transport_lp_1d_oracle(self):
        # two atoms each; crossing is worse than matching in order
        cost = np.array([[0.0, 1.0], [1.0, 0.0]])
        value, plan = transport_lp([0.5, 0.5], [0.3, 0.7], cost)
        assert value == pytest.approx(0.2)
        np.testing.assert_allclose(plan.sum(axis=0), [0.3, 0.7])

    def test_unbalanced_rejected(self):
        with pytest.raises(ValueError):
            transport_lp([1.0], [0.5], np.zeros((1, 1)))

    def test_identity_to_shift(self):
        d, plan = mk_distance(gamma_identity(G4), gamma_shift(G4, 1))
        assert d == pytest.approx(0.25)
        assert plan.cost() == pytest.approx(d**2)

    @given(st.permutations(range(6)), st.permutations(range(6)))
    def test_permutations_match_assignment_oracle(self, p, q):
        g = TorusGrid(1, 6)
        d, plan = mk_distance(permutation_coupling(g, p), permutation_coupling(g, q))
        assert d == pytest.approx(_assignment_distance(np.array(p), np.array(q), g), abs=1e-9)
        np.testing.assert_allclose(plan.source_marginal(), permutation_coupling(g, p).mass, atol=1e-12)
        np.testing.assert_allclose(plan.target_marginal(), permutation_coupling(g, q).mass, atol=1e-12)

    @given(st.integers(0, 1000), st.integers(0, 1000))
    def test_metric_properties(self, s1, s2):
        a, b = random_permutation_mixture(G4, s1), random_bistochastic(G4, s2)
        dab, _ = mk_distance(a, b)
        dba, _ = mk_distance(b, a)
        assert dab == pytest.approx(dba, abs=1e-9)
        assert mk_distance(a, a)[0] < 1e-7
        c = product_coupling(G4)
        assert dab <= mk_distance(a, c)[0] + mk_distance(c, b)[0] + 1e-9

    def test_blend_distance_frozen(self):
        # cheapest move sends (i, i) to (i+1, i+2): both coordinates move one
        # cell, cost 1/16 + 1/16 per unit mass, so d^2 = s / 8
        mu, nu = gamma_identity(G4), gamma_shift(G4, 2)
        for s, expected in [(0.25, np.sqrt(1 / 32)), (1.0, np.sqrt(1 / 8))]:
            d, _ = mk_distance(mu, mu.blend(nu, s))
            assert d == pytest.approx(expected)
