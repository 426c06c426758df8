import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aggfit.grid import AliasingError, GridError, GridFunction, PeriodicGrid

from oracles import direct_convolve, quad_periodic, tophat_cosine_coeff

PI = np.pi


def band_limited(draw_coeffs, grid, k_max=8):
    x = grid.x
    a, b = draw_coeffs
    f = a[0] * np.ones_like(x)
    for k in range(1, k_max + 1):
        f = f + a[k] * np.cos(2 * PI * k * x / grid.length) + b[k] * np.sin(2 * PI * k * x / grid.length)
    return f


coeffs = st.tuples(
    st.lists(st.floats(-1, 1), min_size=9, max_size=9).map(np.array),
    st.lists(st.floats(-1, 1), min_size=9, max_size=9).map(np.array),
)


class TestConstruction:
    def test_nodes_cover_one_period_without_endpoint(self):
        g = PeriodicGrid(PI, 64)
        assert g.x[0] == pytest.approx(-PI / 2)
        assert g.x[-1] == pytest.approx(PI / 2 - g.h)
        assert np.allclose(np.diff(g.x), g.h)

    @pytest.mark.parametrize("n", [6, 7, 65])
    def test_rejects_small_or_odd(self, n):
        with pytest.raises(GridError):
            PeriodicGrid(PI, n)

    def test_rejects_nonpositive_length(self):
        with pytest.raises(GridError):
            PeriodicGrid(0.0, 64)

    def test_gridfunction_length_and_grid_checks(self):
        g, g2 = PeriodicGrid(PI, 64), PeriodicGrid(PI, 32)
        with pytest.raises(GridError):
            GridFunction(g, np.zeros(10))
        with pytest.raises(GridError):
            GridFunction(g, np.zeros(64)) + GridFunction(g2, np.zeros(32))


class TestIntegrate:
    def test_constant(self):
        assert PeriodicGrid(PI, 64).integrate(np.ones(64)) == pytest.approx(PI, abs=1e-14)

    def test_full_period_cosine(self):
        g = PeriodicGrid(PI, 64)
        assert abs(g.integrate(np.cos(2 * g.x))) < 1e-12

    def test_gaussian_against_adaptive_quadrature(self):
        # exp(-x^2) has a slope jump at the seam, so the rule is only second
        # order here; its error is the Euler-Maclaurin endpoint series
        g = PeriodicGrid(PI, 256)
        ref = quad_periodic(lambda x: np.exp(-x * x), PI)
        a, b, h = -PI / 2, PI / 2, g.h
        d1 = lambda x: -2 * x * np.exp(-x * x)
        d3 = lambda x: (12 * x - 8 * x ** 3) * np.exp(-x * x)
        corrected = g.integrate(np.exp(-g.x ** 2)) - h ** 2 / 12 * (d1(b) - d1(a)) + h ** 4 / 720 * (d3(b) - d3(a))
        assert corrected == pytest.approx(ref, abs=1e-10)

    def test_smooth_periodic_against_adaptive_quadrature(self):
        g = PeriodicGrid(PI, 256)
        f = lambda x: np.exp(np.sin(2 * x) + 0.5 * np.cos(4 * x))
        assert g.integrate(f(g.x)) == pytest.approx(quad_periodic(f, PI), abs=1e-12)


class TestConvolve:
    def test_zero_kernel(self):
        g = PeriodicGrid(PI, 64)
        f = np.random.default_rng(0).standard_normal(64)
        assert np.all(g.convolve(f, np.zeros(64)) == 0)

    def test_constant_density(self):
        g = PeriodicGrid(PI, 64)
        W = -np.exp(-g.x ** 2)
        out = g.convolve(np.full(64, 1 / PI), W)
        assert np.allclose(out, g.integrate(W) / PI, atol=1e-14)

    def test_cosine_against_direct_sum(self):
        g = PeriodicGrid(PI, 128)
        c = np.cos(2 * PI * g.x / PI)
        out = g.convolve(c, c)
        assert np.allclose(out, direct_convolve(c, c, PI), atol=1e-10)
        assert np.allclose(out, (PI / 2) * c, atol=1e-10)

    def test_random_against_direct_sum(self):
        g = PeriodicGrid(2.5, 64)
        rng = np.random.default_rng(1)
        f, w = rng.standard_normal(64), rng.standard_normal(64)
        assert np.allclose(g.convolve(f, w), direct_convolve(f, w, 2.5), atol=1e-12)

    def test_even_stays_even(self):
        g = PeriodicGrid(PI, 64)
        f, w = np.cos(2 * g.x) + g.x ** 2, np.exp(-np.abs(g.x))
        out = g.convolve(g.symmetrize(f), g.symmetrize(w))
        assert np.allclose(out, g.reflect(out), atol=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_mass_multiplies_and_symmetric(self, seed):
        g = PeriodicGrid(PI, 64)
        rng = np.random.default_rng(seed)
        f, w = rng.standard_normal(64), rng.standard_normal(64)
        lhs = g.integrate(g.convolve(f, w))
        rhs = g.integrate(f) * g.integrate(w)
        assert lhs == pytest.approx(rhs, rel=1e-10, abs=1e-12)
        assert np.allclose(g.convolve(f, w), g.convolve(w, f), atol=1e-12)


class TestDiff:
    def test_constant(self):
        g = PeriodicGrid(PI, 64)
        assert np.allclose(g.diff(np.full(64, 3.0)), 0, atol=1e-13)

    def test_sine(self):
        g = PeriodicGrid(PI, 64)
        a = 2 * PI / PI
        assert np.allclose(g.diff(np.sin(a * g.x)), a * np.cos(a * g.x), atol=1e-10)

    def test_second_derivative_against_finite_differences(self):
        g = PeriodicGrid(PI, 128)
        f = lambda x: np.exp(np.cos(2 * PI * x / PI))
        fine = 1e-4
        fd = (f(g.x + fine) - 2 * f(g.x) + f(g.x - fine)) / fine ** 2
        assert np.allclose(g.diff(f(g.x), 2), fd, atol=1e-6 * 50)
        # Richardson-extrapolated differences reach the stated 1e-6
        fd2 = (4 * fd - (f(g.x + 2 * fine) - 2 * f(g.x) + f(g.x - 2 * fine)) / (2 * fine) ** 2) / 3
        assert np.allclose(g.diff(f(g.x), 2), fd2, atol=1e-6)

    def test_bad_order(self):
        with pytest.raises(GridError):
            PeriodicGrid(PI, 64).diff(np.zeros(64), 3)

    @settings(max_examples=30, deadline=None)
    @given(coeffs)
    def test_first_twice_is_second(self, c):
        g = PeriodicGrid(PI, 64)
        f = band_limited(c, g)
        assert np.allclose(g.diff(g.diff(f, 1), 1), g.diff(f, 2), atol=1e-9)


class TestCosineCoeff:
    def test_constant_projection(self):
        g = PeriodicGrid(PI, 64)
        assert g.cosine_coeff(np.full(64, 1 / PI), 0) == pytest.approx(1 / np.sqrt(PI), abs=1e-14)

    @pytest.mark.parametrize("k", [0, 1, 5, 31])
    def test_orthonormal(self, k):
        g = PeriodicGrid(PI, 64)
        c = g.cosine_coeffs(g.basis(k))
        expect = np.zeros(32)
        expect[k] = 1.0
        assert np.allclose(c, expect, atol=1e-12)
        assert g.cosine_coeff(g.basis(k), k) == pytest.approx(1.0, abs=1e-12)

    def test_aliasing_error(self):
        g = PeriodicGrid(PI, 64)
        with pytest.raises(AliasingError):
            g.cosine_coeff(np.zeros(64), 32)
        with pytest.raises(AliasingError):
            g.cosine_coeffs(np.zeros(64), 32)

    def test_tophat_against_closed_form(self):
        # the indicator's edges fall midway between nodes, so the rectangle
        # rule has an O(h) error; compare on a fine grid with that tolerance
        g = PeriodicGrid(PI, 4096)
        W = np.where(np.abs(g.x) <= 0.5, -1.0, 0.0)
        for k in range(8):
            assert g.cosine_coeff(W, k) == pytest.approx(tophat_cosine_coeff(k, 0.5, PI), abs=2 * g.h)

    @settings(max_examples=30, deadline=None)
    @given(coeffs)
    def test_parseval_for_even_functions(self, c):
        g = PeriodicGrid(PI, 64)
        f = g.symmetrize(band_limited(c, g))
        assert np.sum(g.cosine_coeffs(f) ** 2) == pytest.approx(g.integrate(f * f), rel=1e-9, abs=1e-12)

    def test_sine_coefficients(self):
        g = PeriodicGrid(PI, 64)
        s = np.sqrt(2 / PI) * np.sin(2 * PI * 3 * g.x / PI)
        c = g.sine_coeffs(s)
        assert c[3] == pytest.approx(1.0, abs=1e-12)
        assert np.abs(np.delete(c, 3)).max() < 1e-12


class TestSymmetry:
    def test_reflect_is_involution_and_matches_formula(self):
        g = PeriodicGrid(PI, 64)
        f = np.sin(2 * g.x) + g.x
        r = g.reflect(f)
        assert np.allclose(g.reflect(r), f)
        # node 0 (-L/2) and node N/2 (0) map to themselves
        assert r[32] == f[32]
        assert np.allclose(r[1:], f[1:][::-1])

    def test_shift(self):
        g = PeriodicGrid(PI, 64)
        f = np.arange(64.0)
        assert g.shift(f, 3)[3] == 0.0

    def test_trig_interpolate_exact_at_nodes_and_for_band_limited(self):
        g = PeriodicGrid(PI, 64)
        f = np.cos(2 * g.x) + 0.3 * np.sin(6 * g.x)
        assert np.allclose(g.trig_interpolate(f, g.x), f, atol=1e-12)
        y = np.linspace(-1.5, 1.5, 17)
        assert np.allclose(g.trig_interpolate(f, y), np.cos(2 * y) + 0.3 * np.sin(6 * y), atol=1e-12)
