import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nngp_cert.attack import (
    MAX_STEPS,
    DegenerateStart,
    boundary_search,
    dual_exponent,
    lp_norm,
)
from nngp_cert.randnet import (
    AffineModel,
    empirical_kernel,
    forward,
    forward_batch,
    gradient,
    init_random,
    preactivation_margin,
)
from nngp_cert.zoo import fc_arch, reference_archs

ARCHS = reference_archs()
WIDTHS = {"fc": [32, 32, 32], "conv": [4, 4], "skip": [3, 3, 3]}


def _net(name, seed=0):
    return init_random(ARCHS[name], WIDTHS[name], seed)


class TestInit:
    def test_zero_bias_when_sigma_b_zero(self):
        net = _net("fc")
        assert all(np.all(b == 0) for b in net.biases.values())

    def test_first_layer_weight_variance(self):
        arch = fc_arch(64)
        net = init_random(arch, [512, 8, 8], 1)
        W = net.weights[1]
        se = math.sqrt(2 / W.size) / 64
        assert abs(W.var() - 1 / 64) < 4 * se

    def test_deterministic(self):
        a, b, c = _net("conv", 3), _net("conv", 3), _net("conv", 4)
        for pos in a.weights:
            np.testing.assert_array_equal(a.weights[pos], b.weights[pos])
        assert not np.array_equal(a.weights[1], c.weights[1])

    def test_width_count_checked(self):
        with pytest.raises(ValueError):
            init_random(ARCHS["fc"], [8], 0)

    def test_skip_channel_mismatch(self):
        with pytest.raises(ValueError, match="skip"):
            init_random(ARCHS["skip"], [3, 4, 5], 0)


class TestForward:
    @pytest.mark.parametrize("name", ["fc", "skip"])
    def test_zero_input_gives_zero_when_unbiased(self, name):
        net = _net(name)
        assert net.value(np.zeros(net.n_inputs)) == 0.0

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 10_000), scale=st.floats(0.01, 100))
    def test_positive_homogeneity(self, seed, scale):
        net = _net("fc", seed % 7)
        x = np.random.default_rng(seed).standard_normal(net.n_inputs)
        assert net.value(scale * x) == pytest.approx(scale * net.value(x), rel=1e-9, abs=1e-12)

    def test_one_layer_by_hand(self):
        arch = fc_arch(3, hidden=1)
        net = init_random(arch, [5], 2)
        x = np.array([0.2, -0.4, 0.9])
        W1 = net.weights[1][:, :, 0]
        W2 = net.weights[2][:, :, 0]
        expect = (W2 @ np.maximum(W1 @ x, 0))[0]
        assert net.value(x) == pytest.approx(expect, rel=1e-13)

    @pytest.mark.parametrize("name", list(ARCHS))
    def test_batch_matches_single(self, name):
        net = _net(name)
        X = np.random.default_rng(5).standard_normal((6, net.n_inputs))
        np.testing.assert_allclose(forward_batch(net, X), [net.value(x) for x in X], rtol=1e-12)
        phi, _ = forward(net, X[0])
        assert phi == pytest.approx(net.value(X[0]), rel=1e-12)


class TestGradient:
    @pytest.mark.parametrize("name", list(ARCHS))
    def test_central_differences(self, name):
        net = _net(name, 11)
        rng = np.random.default_rng(12)
        h = 1e-5
        checked = 0
        while checked < 100:
            x = rng.standard_normal(net.n_inputs)
            # a step of h moves each pre-activation by at most h times a weight bound
            if preactivation_margin(net, x) < 1e-3:
                continue
            g = gradient(net, x)
            fd = np.empty_like(x)
            for i in range(len(x)):
                e = np.zeros_like(x)
                e[i] = h
                fd[i] = (net.value(x + e) - net.value(x - e)) / (2 * h)
            assert np.linalg.norm(g - fd) <= 1e-4 * max(np.linalg.norm(fd), 1e-8)
            checked += 1

    def test_affine_model(self):
        m = AffineModel(np.array([1.0, -2.0]), 0.5)
        phi, g = m.value_and_grad(np.array([1.0, 1.0]))
        assert phi == -0.5
        np.testing.assert_array_equal(g, [1.0, -2.0])


class TestEmpiricalKernel:
    def test_needs_draws(self):
        with pytest.raises(ValueError):
            empirical_kernel(ARCHS["fc"], [8, 8, 8], np.ones((2, 8)), 10, 0)

    @pytest.mark.parametrize("name", list(ARCHS))
    def test_diag_nonnegative_and_duplicates(self, name):
        arch = ARCHS[name]
        x = np.random.default_rng(0).standard_normal(arch.n_inputs)
        y = np.random.default_rng(1).standard_normal(arch.n_inputs)
        K = empirical_kernel(arch, WIDTHS[name], np.stack([x, x, y]), 100, 2)
        assert np.all(np.diag(K) >= 0)
        # the fully connected path takes an eigen square root, so equality is up to rounding
        np.testing.assert_allclose(K[0], K[1], rtol=1e-7)
        np.testing.assert_allclose(K, K.T, rtol=1e-10)


def _affine_case(p, seed):
    rng = np.random.default_rng(seed)
    n = 6
    w = rng.standard_normal(n)
    x0 = np.full(n, 0.5)
    # |phi0| small enough that the closest boundary point stays inside the box
    target = 0.05 * rng.uniform(0.2, 1.0)
    b = target * lp_norm(w, dual_exponent(p)) - w @ x0
    return AffineModel(w, b), x0, target


class TestBoundarySearch:
    @pytest.mark.parametrize("p", [1.0, 2.0, math.inf])
    @pytest.mark.parametrize("seed", range(5))
    def test_affine_dual_norm_oracle(self, p, seed):
        model, x0, target = _affine_case(p, seed)
        rec = boundary_search(model, x0, p, tolerance=1e-10)
        assert rec.converged and not rec.censored
        assert rec.distance == pytest.approx(target, abs=1e-9)

    @pytest.mark.parametrize("p", [1.0, 2.0, math.inf])
    @pytest.mark.parametrize("name", list(ARCHS))
    def test_flip_postconditions(self, p, name):
        net = _net(name, 21)
        x0 = np.random.default_rng(22).uniform(0, 1, net.n_inputs)
        rec = boundary_search(net, x0, p)
        if rec.censored:
            assert rec.x_adv is None
            return
        assert np.sign(rec.phi_adv) != np.sign(rec.phi0)
        assert np.all(rec.x_adv >= -1e-12) and np.all(rec.x_adv <= 1 + 1e-12)
        assert lp_norm(rec.x_adv - x0, p) == pytest.approx(rec.distance, rel=1e-9)
        assert rec.iterations <= MAX_STEPS

    def test_tolerance_monotone(self):
        net = _net("fc", 23)
        x0 = np.random.default_rng(24).uniform(0, 1, net.n_inputs)
        coarse = boundary_search(net, x0, 2.0, tolerance=1e-2)
        fine = boundary_search(net, x0, 2.0, tolerance=1e-5)
        assert fine.distance <= coarse.distance + 1e-2

    def test_bisection_steps_bounded(self):
        model, x0, target = _affine_case(2.0, 0)
        tol = 1e-6
        rec = boundary_search(model, x0, 2.0, tolerance=tol)
        flips = rec.iterations
        span = lp_norm(np.ones_like(x0), 2.0)
        assert rec.bisection_steps <= flips * (math.ceil(math.log2(span / tol)) + 1)

    def test_censored_when_no_flip(self):
        rec = boundary_search(AffineModel(np.ones(3), 10.0), np.full(3, 0.5), 2.0)
        assert rec.censored and rec.x_adv is None and math.isnan(rec.distance)

    def test_degenerate_start(self):
        with pytest.raises(DegenerateStart):
            boundary_search(AffineModel(np.ones(2), -1.0), np.full(2, 0.5), 1.0)

    def test_start_outside_box(self):
        with pytest.raises(ValueError):
            boundary_search(AffineModel(np.ones(2)), np.array([1.5, 0.0]), 1.0)

    def test_bad_norm(self):
        with pytest.raises(ValueError):
            boundary_search(AffineModel(np.ones(2), 0.1), np.full(2, 0.5), 3.0)
