import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aggfit.approximators import (
    ApproximatorError,
    FourierKernel,
    FourierPotential,
    GradientError,
    NetworkApproximator,
    ParamVector,
    approximator_from_description,
    constrain_kernel,
    constrain_potential,
    gradient,
    init_params,
    kernel_on_grid,
    potential_on_grid,
    realize_approximator,
)
from aggfit.grid import PeriodicGrid

PI = np.pi
G = PeriodicGrid(PI, 128)


class TestEvalRaw:
    def test_zero_fourier_kernel(self):
        fk = FourierKernel(20, PI)
        assert np.all(fk.eval_raw(np.zeros(fk.size), G.x) == 0)

    def test_zero_network_is_log2(self):
        net = NetworkApproximator((16, 16), "softplus", PI)
        assert np.allclose(net.eval_raw(np.zeros(net.size), G.x), np.log(2), atol=1e-15)

    def test_fourier_potential_single_cosine(self):
        fp = FourierPotential(12, PI)
        theta = np.zeros(fp.size)
        theta[1] = 1.0
        y = np.linspace(-2, 2, 41)
        assert np.allclose(fp.eval_raw(theta, y), np.cos(2 * PI * y / PI), atol=1e-14)

    def test_fourier_potential_sine_slot(self):
        fp = FourierPotential(3, 2.0)
        theta = np.zeros(fp.size)
        theta[fp.n_modes + 2] = 1.0  # b_2
        assert np.allclose(fp.eval_raw(theta, G.x), np.sin(2 * PI * 2 * G.x / 2.0), atol=1e-14)

    def test_parameter_counts(self):
        assert FourierKernel(20).size == 21
        assert FourierPotential(12).size == 25
        assert NetworkApproximator((16, 16)).size == 16 + 16 + 256 + 16 + 16 + 1

    @pytest.mark.parametrize("act", ["softplus", "relu", "mixed"])
    def test_network_output_nonnegative(self, act):
        net = NetworkApproximator((8, 8, 8), act, PI)
        for seed in range(10):
            theta = np.random.default_rng(seed).standard_normal(net.size)
            assert np.all(net.eval_raw(theta, G.x) >= 0)

    def test_bad_descriptions(self):
        with pytest.raises(ApproximatorError):
            NetworkApproximator((4,), "tanh")
        with pytest.raises(ApproximatorError):
            approximator_from_description({"kind": "spline"})


class TestConstrainKernel:
    def test_constant_raw(self):
        assert np.all(constrain_kernel(np.full(64, 3.7)) == 0)

    def test_quadratic_raw(self):
        assert np.allclose(constrain_kernel(np.abs(G.x) ** 2), -G.x ** 2, atol=1e-15)

    def test_random_networks(self):
        net = NetworkApproximator((16, 16), "softplus", PI)
        for seed in range(100):
            W = np.asarray(kernel_on_grid(net, np.random.default_rng(seed).standard_normal(net.size), G))
            assert np.abs(W - G.reflect(W)).max() < 1e-10
            assert W.max() == 0.0 and np.all(W <= 0)


class TestConstrainPotential:
    def test_constant(self):
        assert np.allclose(constrain_potential(np.full(128, 5.0), G), 0, atol=1e-15)

    def test_shifted_cosine(self):
        assert np.allclose(constrain_potential(np.cos(2 * G.x) + 1, G), np.cos(2 * G.x), atol=1e-14)

    def test_random_networks(self):
        net = NetworkApproximator((16, 16), "mixed", PI)
        for seed in range(100):
            V = potential_on_grid(net, np.random.default_rng(seed).standard_normal(net.size), G)
            assert abs(G.integrate(np.asarray(V))) < 1e-10


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(["fourier", "network"]))
def test_constrained_outputs_are_admissible(seed, family):
    rng = np.random.default_rng(seed)
    if family == "fourier":
        ka, pa = FourierKernel(20, PI), FourierPotential(12, PI)
    else:
        ka = pa = NetworkApproximator((8, 8), "softplus", PI)
    W = np.asarray(kernel_on_grid(ka, rng.standard_normal(ka.size), G))
    V = np.asarray(potential_on_grid(pa, rng.standard_normal(pa.size), G))
    assert np.abs(W - G.reflect(W)).max() < 1e-10 and W.max() == 0.0
    assert abs(G.integrate(V)) < 1e-10


class TestGradient:
    def test_quadratic(self):
        p = np.random.default_rng(0).standard_normal(7)
        assert np.allclose(gradient(lambda t: (t ** 2).sum(), p), 2 * p, atol=1e-14)

    def test_frozen_segment_has_zero_gradient(self):
        pv = ParamVector.concat([("W", np.arange(3.0)), ("V", np.ones(4))])
        g = gradient(lambda q: (q.segment("W") ** 3).sum(), pv)
        assert np.all(g[3:] == 0.0)
        assert np.allclose(g[:3], 3 * np.arange(3.0) ** 2)

    def test_non_finite_raises(self):
        import jax.numpy as jnp

        with pytest.raises(GradientError, match=r"encountered in \w+"):
            gradient(lambda t: jnp.sqrt(t[0] - 1.0) + t[1], np.array([1.0, 2.0]))

    def test_network_loss_against_finite_differences(self):
        from oracles import central_difference_grad, fd_relative_errors

        net = NetworkApproximator((6, 6), "softplus", PI)
        target = -G.x ** 2

        def loss(t):
            d = kernel_on_grid(net, t, G) - target
            return G.h * (d * d).sum()

        for seed in range(3):
            theta = init_params(net, seed)
            g = gradient(loss, theta)
            fd = central_difference_grad(lambda t: float(loss(t)), theta)
            assert fd_relative_errors(g, fd, float(loss(theta)), theta).max() <= 1e-5


class TestInit:
    def test_deterministic(self):
        for a in (FourierKernel(), NetworkApproximator()):
            assert np.array_equal(init_params(a, 42), init_params(a, 42))
            assert not np.array_equal(init_params(a, 42), init_params(a, 43))

    def test_fourier_scale(self):
        draws = np.concatenate([init_params(FourierKernel(), s) for s in range(1000)])
        assert abs(draws.std() / 0.1 - 1) < 0.2

    def test_network_glorot_with_zero_biases(self):
        net = NetworkApproximator((16, 16))
        theta = init_params(net, 3)
        for w, b in net.unpack(theta):
            assert np.all(b == 0)
            lim = np.sqrt(6 / (w.shape[0] + w.shape[1]))
            assert np.abs(w).max() <= lim

    def test_network_outputs_finite(self):
        net = NetworkApproximator((16, 16))
        for s in range(100):
            assert np.all(np.isfinite(net.eval_raw(init_params(net, s), G.x)))

    def test_unknown_scheme(self):
        with pytest.raises(ApproximatorError):
            init_params(FourierKernel(), 0, "he-normal")


class TestParamVector:
    def test_layout_and_segments(self):
        pv = ParamVector.concat([("W", np.arange(3.0)), ("log_kappa", [0.5])])
        assert pv.size == 4 and pv.names() == ["W", "log_kappa"]
        assert np.array_equal(pv.replace_segment("W", np.zeros(3)).values, [0, 0, 0, 0.5])
        with pytest.raises(ApproximatorError):
            ParamVector((("a", 2),), np.zeros(3))

    def test_json_round_trip(self):
        pv = ParamVector.concat([("W", np.random.default_rng(0).standard_normal(5)), ("V", np.ones(2))])
        back = ParamVector.from_json(json.loads(json.dumps(pv.to_json())))
        assert back.layout == pv.layout and np.array_equal(back.values, pv.values)

    def test_malformed_json(self):
        with pytest.raises(ApproximatorError):
            ParamVector.from_json({"values": [1.0]})


class TestExpressiveness:
    @pytest.mark.parametrize("k", [1, 3, 7, 20])
    def test_fourier_kernel_fits_shifted_basis_exactly(self, k):
        target = -G.basis(k)
        target = target - target.max()
        fk = FourierKernel(20, PI)
        A = fk.design(np.abs(G.x))
        theta = np.linalg.lstsq(A, -target, rcond=None)[0]
        W = np.asarray(kernel_on_grid(fk, theta, G))
        assert G.norm(W - target) < 1e-8


class TestRealizeStored:
    def test_fourier_shorthand_and_network(self, tmp_path):
        fk = FourierKernel(4, PI)
        theta = np.array([0.0, 1.0, 0.0, 0.0, 0.0])
        W = realize_approximator({"approximator": {"kind": "fourier", "n_modes": 4}, "values": theta.tolist()}, G)
        assert np.allclose(W, np.asarray(kernel_on_grid(fk, theta, G)))
        net = NetworkApproximator((4,), "softplus", PI)
        th = init_params(net, 1)
        path = tmp_path / "v.json"
        path.write_text(json.dumps({"approximator": net.describe(), "values": th.tolist()}))
        V = realize_approximator({"path": str(path)}, G, role="potential")
        assert np.allclose(V, np.asarray(potential_on_grid(net, th, G)))

    def test_wrong_size(self):
        with pytest.raises(ApproximatorError):
            realize_approximator({"approximator": {"kind": "fourier-kernel", "n_modes": 4}, "values": [0.0]}, G)
