import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from brenierlab.brenier import solve_exact
from brenierlab.coupling import (
    TransportPlan4,
    gamma_identity,
    gamma_shift,
    mk_distance,
    random_permutation_mixture,
)
from brenierlab.fields import DensityPath, regularize_density, uniform_times
from brenierlab.flows import GeneralizedFlow, PathLattice, density_of_flow
from brenierlab.surgery import (
    SurgeryBudget,
    SurgeryError,
    lattice_projection,
    refined_steps,
    surgery_pipeline,
    t1_recondition,
    t2_diffuse,
    t3_straighten,
)
from brenierlab.torus import Mollifier, TorusGrid

G4 = TorusGrid(1, 4)


def _still_flow(grid, steps):
    lat = PathLattice(grid, steps)
    paths = np.repeat(np.arange(grid.size)[:, None], steps + 1, axis=1)
    return GeneralizedFlow.from_cell_paths(lat, paths, np.full(grid.size, 1 / grid.size))


class TestRefinedSteps:
    @pytest.mark.parametrize("steps,eps,expected", [(2, 0.25, 4), (4, 0.25, 4), (2, 0.125, 8), (3, 0.1, 30)])
    def test_values(self, steps, eps, expected):
        assert refined_steps(steps, eps) == expected

    def test_irrational_rejected(self):
        with pytest.raises(ValueError):
            refined_steps(2, 1 / np.pi)


class TestT1:
    def test_identity_plan_keeps_flow(self):
        eta = solve_exact(gamma_shift(G4, 1), steps=2).flow
        _, plan = mk_distance(gamma_shift(G4, 1), gamma_shift(G4, 1))
        out = t1_recondition(eta, plan)
        assert out.action() == pytest.approx(eta.action())
        np.testing.assert_allclose(out.endpoint_coupling(), eta.endpoint_coupling())

    def test_quarter_shift_of_constant_path(self):
        # atoms (x, x) -> (x + 1/4, x): path t -> x + (1 - t)/4, action (1/4)^2 / 2
        mu = gamma_identity(G4)
        nu = gamma_shift(G4, -1).transpose()
        x = np.arange(4)
        plan = TransportPlan4(mu, nu, x, x, (x + 1) % 4, x, np.full(4, 0.25))
        out = t1_recondition(_still_flow(G4, 4), plan)
        assert out.action() == pytest.approx(1 / 32)
        np.testing.assert_allclose(out.positions[0, :, 0], 0.25 * (1 - uniform_times(4)))

    def test_identity_to_half_shift_endpoints(self):
        mu, nu = gamma_identity(G4), gamma_shift(G4, 2)
        eta = solve_exact(mu, steps=2).flow
        _, plan = mk_distance(mu, nu)
        out = t1_recondition(eta, plan)
        np.testing.assert_allclose(out.endpoint_coupling(), nu.mass, atol=1e-9)

    def test_mismatched_plan(self):
        _, plan = mk_distance(gamma_shift(G4, 1), gamma_shift(G4, 2))
        with pytest.raises(ValueError):
            t1_recondition(_still_flow(G4, 2), plan)

    @given(st.integers(0, 500))
    def test_sqrt_action_triangle(self, seed):
        mu, nu = random_permutation_mixture(G4, seed), random_permutation_mixture(G4, seed + 1)
        eta = solve_exact(mu, steps=2).flow
        d, plan = mk_distance(mu, nu)
        out = t1_recondition(eta, plan)
        assert np.sqrt(out.action()) <= np.sqrt(eta.action()) + d / np.sqrt(2) + 1e-9


class TestT2:
    def test_straight_path_reparametrized(self):
        # identity kernel, eps = 1/4: action 1/8 becomes (1/8) / (1 - 1/2)
        eta = GeneralizedFlow(G4, uniform_times(4), (np.arange(5) / 8.0)[None, :, None], [1.0])
        assert eta.action() == pytest.approx(1 / 8)
        out = t2_diffuse(eta, 0.25)
        assert out.action() == pytest.approx(1 / 4)

    def test_constant_path_zero_action(self):
        out = t2_diffuse(_still_flow(G4, 4), 0.25)
        assert out.action() == 0.0

    def test_endpoints_and_ramps(self):
        g = TorusGrid(1, 32)
        eta = _still_flow(g, 8).mixture(_still_flow(g, 8), 0.5)
        out = t2_diffuse(eta, 0.25)
        np.testing.assert_allclose(out.endpoint_coupling(), eta.endpoint_coupling(), atol=1e-15)
        Q = density_of_flow(out, "cic")
        times = out.time_grid
        ramp = (times <= 0.25) | (times >= 0.75)
        np.testing.assert_allclose(Q.frames[ramp], 1.0, atol=1e-12)

    @given(st.integers(0, 1000))
    def test_action_formula_with_kernel(self, seed):
        # nodes of a T=4 path land exactly on the middle window of the T=8 grid,
        # so the kernel and time-rescaling terms add up with no quadrature error
        g = TorusGrid(1, 64)
        eps = 0.25
        rng = np.random.default_rng(seed)
        paths = rng.integers(0, 64, size=(5, 5))
        eta = GeneralizedFlow.from_cell_paths(PathLattice(g, 4), paths, np.full(5, 0.2))
        eta = eta.resampled(uniform_times(8))
        k = Mollifier(eps, g)
        out = t2_diffuse(eta, eps, k)
        expected = k.second_moment() / eps + eta.action() / (1 - 2 * eps)
        assert out.action() == pytest.approx(expected, rel=1e-10)
        np.testing.assert_allclose(out.endpoint_coupling(), eta.endpoint_coupling(), atol=1e-15)

    def test_eps_off_grid(self):
        with pytest.raises(ValueError):
            t2_diffuse(_still_flow(G4, 2), 0.25)


class TestT3AndProjection:
    def test_same_density_keeps_flow(self):
        eta = _still_flow(G4, 4)
        target = DensityPath.uniform(G4, 4)
        out, psi = t3_straighten(eta, target)
        assert psi.is_identity
        np.testing.assert_allclose(out.positions, eta.positions)

    def test_density_lower_bound_enforced(self):
        eta = _still_flow(G4, 2)
        frames = np.ones((3, 4))
        frames[1] = [1.8, 1.8, 0.2, 0.2]
        with pytest.raises(ValueError):
            t3_straighten(eta, DensityPath(G4, uniform_times(2), frames))

    def test_projection_is_exactly_admissible(self):
        g = TorusGrid(1, 8)
        eta = _still_flow(g, 4)
        eta = GeneralizedFlow(g, eta.time_grid, eta.positions + 0.03, eta.mass)
        frames = np.ones((5, 8))
        frames[2] = 1 + 0.2 * np.cos(2 * np.pi * np.arange(8) / 8)
        target = DensityPath(g, uniform_times(4), frames)
        out = lattice_projection(eta, target)
        assert out.is_lattice()
        np.testing.assert_allclose(out.cell_marginals()[1:-1], target.cell_masses()[1:-1], atol=1e-12)


class TestPipeline:
    def test_identity_to_half_shift(self):
        mu, nu = gamma_identity(G4), gamma_shift(G4, 2)
        res = surgery_pipeline(mu, nu, None, 0.25, steps=4)
        assert res.residuals.max_residual <= 1e-6
        exact = solve_exact(nu, res.target).action
        assert res.certified_action >= exact - 1e-9
        assert res.budget.total == pytest.approx(res.certified_action - res.base_action, abs=1e-9)

    def test_equal_data_costs_order_eps(self):
        mu = random_permutation_mixture(G4, 1)
        res = surgery_pipeline(mu, mu, None, 0.25, steps=2)
        assert res.dmk < 1e-7
        assert res.budget.estim1 == pytest.approx(0.0, abs=1e-12)
        assert res.certified_action >= solve_exact(mu, res.target).action - 1e-9

    def test_report_is_serializable(self):
        import json

        res = surgery_pipeline(gamma_identity(G4), gamma_shift(G4, 1), None, 0.25, steps=2)
        rep = json.loads(res.to_json())
        assert set(rep["budget"]) == {"estim1", "estim2", "estim3", "projection", "total"}
        assert "smallness_lhs" in rep["conditions"]

    def test_low_density_rejected_with_stage(self):
        frames = np.ones((3, 4))
        frames[1] = [1.4, 1.4, 0.6, 0.6]
        rho = DensityPath(G4, uniform_times(2), frames)
        with pytest.raises(SurgeryError) as err:
            surgery_pipeline(gamma_identity(G4), gamma_shift(G4, 1), rho, 0.25)
        assert err.value.stage == "input"

    def test_bad_eps(self):
        with pytest.raises(SurgeryError):
            surgery_pipeline(gamma_identity(G4), gamma_identity(G4), None, 0.5)

    def test_budget_accounting(self):
        b = SurgeryBudget(0.1, -0.05, 0.2, projection=0.01)
        assert b.total == pytest.approx(0.25)
        assert b.negative_parts() == ["estim2"]

    def test_regularized_target_used(self):
        res = surgery_pipeline(gamma_identity(G4), gamma_shift(G4, 1), None, 0.25, steps=2)
        ref = regularize_density(DensityPath.uniform(G4, 2), 0.25, res.flow.time_grid)
        np.testing.assert_allclose(res.target.frames, ref.frames)
