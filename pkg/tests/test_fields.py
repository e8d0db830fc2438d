import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from brenierlab.fields import (
    DensityPath,
    FieldPath,
    divergence,
    e_norm,
    l2_time_sup_space,
    lipschitz_product_bound,
    regularize_density,
    regularize_field,
    spatial_lipschitz,
    time_derivative_l2,
    uniform_times,
)
from brenierlab.torus import TorusGrid

G8 = TorusGrid(1, 8)
frames8 = arrays(np.float64, (3, 8), elements=st.floats(-3, 3))


def _field(frames, grid=G8):
    return FieldPath(grid, uniform_times(len(frames) - 1), frames)


class TestFieldPath:
    def test_shape_checks(self):
        with pytest.raises(ValueError):
            FieldPath(G8, [0.0, 1.0], np.zeros((3, 8)))
        with pytest.raises(ValueError):
            FieldPath(G8, [0.0, 1.0], np.zeros((2, 7)))
        with pytest.raises(ValueError):
            FieldPath(G8, [1.0, 0.0], np.zeros((2, 8)))

    def test_tau_support_enforced(self):
        frames = np.zeros((5, 8))
        frames[1:4] = 1.0
        FieldPath(G8, uniform_times(4), frames.copy(), tau=0.2)
        frames[0] = 1.0
        with pytest.raises(ValueError):
            FieldPath(G8, uniform_times(4), frames, tau=0.2)
        with pytest.raises(ValueError):
            FieldPath(G8, uniform_times(4), np.zeros((5, 8)), tau=0.25)

    def test_json_roundtrip(self):
        f = _field(np.random.default_rng(0).normal(size=(3, 8)))
        g = FieldPath.from_json(f.to_json())
        np.testing.assert_allclose(g.frames, f.frames)
        assert "t,cell" in f.to_csv().splitlines()[0]


class TestDensityPath:
    def test_unit_mass_required(self):
        with pytest.raises(ValueError):
            DensityPath(G8, [0.0, 1.0], np.full((2, 8), 2.0))
        with pytest.raises(ValueError):
            DensityPath(G8, [0.0, 1.0], np.array([[2.0, 0.0] * 4, [1.0] * 8]) * np.array([1, -1] * 4))

    def test_uniform_and_cell_masses(self):
        rho = DensityPath.uniform(G8, 4)
        assert rho.is_admissible()
        np.testing.assert_allclose(rho.cell_masses(), np.full((5, 8), 1 / 8))
        back = DensityPath.from_cell_masses(G8, rho.time_grid, rho.cell_masses())
        np.testing.assert_allclose(back.frames, rho.frames)


class TestENorm:
    def test_hand_computed_value(self):
        # Lipschitz part: jump of 1 over h = 1/4; time part: sup |df| = 1 over dt = 1
        g = TorusGrid(1, 4)
        f = FieldPath(g, [0.0, 1.0], np.array([[0, 1, 0, 0], [0, 0, 0, 0]], dtype=float))
        assert spatial_lipschitz(f.frames[0], g) == pytest.approx(4.0)
        assert time_derivative_l2(f) == pytest.approx(1.0)
        assert e_norm(f) == pytest.approx(5.0)

    def test_vector_lipschitz(self):
        g = TorusGrid(1, 4)
        frame = np.zeros((4, 2))
        frame[1] = [3.0, 4.0]
        assert spatial_lipschitz(frame, g) == pytest.approx(20.0)

    def test_constant_field_has_zero_norm(self):
        assert e_norm(_field(np.full((3, 8), 7.0))) == 0.0

    @given(frames8, st.floats(-4, 4))
    def test_absolute_homogeneity(self, fr, c):
        f = _field(fr)
        assert e_norm(f.scaled(c)) == pytest.approx(abs(c) * e_norm(f), rel=1e-9, abs=1e-9)

    @given(frames8, frames8)
    def test_triangle_inequality(self, a, b):
        fa, fb = _field(a), _field(b)
        assert e_norm(fa + fb) <= e_norm(fa) + e_norm(fb) + 1e-9

    @given(frames8, frames8)
    def test_product_bound(self, a, b):
        lipschitz_product_bound(_field(a), _field(b))

    def test_needs_two_frames(self):
        with pytest.raises(ValueError):
            e_norm(FieldPath(G8, [0.0], np.zeros((1, 8))))


class TestRegularization:
    def _rho(self, n=64, steps=4, seed=0):
        g = TorusGrid(1, n)
        rng = np.random.default_rng(seed)
        fr = np.ones((steps + 1, n))
        fr[1:-1] = rng.uniform(0.5, 1.5, size=(steps - 1, n))
        fr[1:-1] /= fr[1:-1].mean(axis=1, keepdims=True)
        return DensityPath(g, uniform_times(steps), fr)

    @pytest.mark.parametrize("eps", [0.25, 0.125, 0.0625])
    def test_ramps_are_exactly_uniform(self, eps):
        times = uniform_times(32)
        r = regularize_density(self._rho(), eps, times)
        ramp = (times <= eps) | (times >= 1 - eps)
        assert np.all(r.frames[ramp] == 1.0)
        assert not np.all(r.frames[~ramp] == 1.0)
        np.testing.assert_allclose(r.masses(), 1.0, atol=1e-12)

    def test_middle_frame_is_mollified_source(self):
        rho = self._rho(steps=2)
        r = regularize_density(rho, 0.25, uniform_times(4))
        from brenierlab.torus import Mollifier, mollify_density

        np.testing.assert_allclose(r.frames[2], mollify_density(rho.frames[1], Mollifier(0.25, rho.grid)))

    def test_preserves_lower_bound(self):
        rho = self._rho()
        r = regularize_density(rho, 0.125, uniform_times(16))
        assert r.frames.min() >= rho.frames.min() - 1e-12

    def test_field_regularization_zero_on_ramps(self):
        g = TorusGrid(1, 16)
        fr = np.random.default_rng(3).normal(size=(9, 16))
        xi = FieldPath(g, uniform_times(8), fr)
        out = regularize_field(xi, 0.25)
        assert np.all(out.frames[:3] == 0) and np.all(out.frames[-3:] == 0)
        assert out.tau is None

    def test_smooth_field_error_scales_with_eps(self):
        g = TorusGrid(1, 256)
        x = g.cell_centers[:, 0]
        times = uniform_times(64)
        fr = np.sin(np.pi * times)[:, None] * np.sin(2 * np.pi * x)[None, :]
        xi = FieldPath(g, times, fr)
        errs = [l2_time_sup_space(xi - regularize_field(xi, e)) for e in (0.25, 0.125, 0.0625)]
        slope = np.polyfit(np.log([0.25, 0.125, 0.0625]), np.log(errs), 1)[0]
        assert slope > 0.8


class TestDivergence:
    def test_divergence_of_gradient_like_field(self):
        g = TorusGrid(1, 64)
        x = g.cell_centers[:, 0]
        v = np.sin(2 * np.pi * x)[:, None]
        np.testing.assert_allclose(divergence(v, g), 2 * np.pi * np.cos(2 * np.pi * x), atol=0.02)

    @given(arrays(np.float64, (6, 6, 2), elements=st.floats(-2, 2)))
    def test_divergence_has_zero_mean(self, v):
        assert abs(divergence(v, TorusGrid(2, 6)).mean()) < 1e-12
