import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import mp_reference as ref
from nngp_cert.arch import Skip
from nngp_cert.kernel import (
    ArchKernel,
    KernelDomainError,
    LinearKernel,
    input_field,
    kernel_diag,
    kernel_fields,
    kernel_matrix,
    kernel_pairs,
    propagate_layer,
    psi,
    rkhs_distance,
    smoothness_constants,
)
from nngp_cert.randnet import empirical_kernel
from nngp_cert.zoo import conv_arch, fc_arch, reference_archs, skip_arch

ARCHS = reference_archs()


def _psi_direct(t):
    return (math.sqrt(1 - t * t) + (math.pi - math.acos(t)) * t) / math.pi


class TestPsi:
    def test_endpoints(self):
        assert psi(1.0) == 1.0
        assert psi(-1.0) == 0.0
        assert psi(0.0) == pytest.approx(1 / math.pi, rel=1e-15)

    def test_clamps_within_tolerance(self):
        assert psi(1.0 + 5e-13) == 1.0
        assert psi(-1.0 - 5e-13) == 0.0

    def test_domain_error(self):
        with pytest.raises(KernelDomainError):
            psi(1.001)
        with pytest.raises(KernelDomainError):
            psi(np.array([0.0, -1.5]))

    @pytest.mark.parametrize("t", [-1 + 1e-15, -1 + 1e-9, -0.999999, -0.99, -0.97, -0.9])
    def test_relative_accuracy_near_minus_one(self, t):
        # the closed form cancels catastrophically here; values are O((1+t)^1.5)
        assert ref.rel_err(psi(t), ref.psi(t)) < 1e-13
        assert ref.rel_err(psi(np.array([t]))[0], ref.psi(t)) < 1e-13

    @given(st.floats(-1.0, 1.0))
    def test_range_and_lower_bounds(self, t):
        v = psi(t)
        assert 0.0 <= v <= 1.0
        assert v >= t - 1e-15
        assert v == pytest.approx(_psi_direct(t), abs=1e-15)


class TestRecursion:
    def test_fc_input_layer(self):
        arch = fc_arch(5, hidden=1, sigma_w=1.0)
        rng = np.random.default_rng(0)
        x, y = rng.standard_normal((2, 5))
        f = input_field(arch, x, y)
        assert f.K_xy[0, 0] == pytest.approx(x @ y / 5, rel=1e-13)

    def test_nonlinear_diagonal_collapses(self):
        arch = fc_arch(4, hidden=2, sigma_w=1.7, sigma_b=0.3)
        x = np.array([0.3, -1.0, 2.0, 0.5])
        fields = kernel_fields(arch, x, x)
        k1 = fields[0].K_xx[0, 0]
        k2 = fields[1].K_xx[0, 0]
        assert k2 == pytest.approx(0.3**2 + 1.7**2 / 2 * k1, rel=1e-13)

    def test_conv_nonlinear_diagonal_collapses(self):
        arch = conv_arch()
        x = np.random.default_rng(1).standard_normal(arch.n_inputs)
        f1, f2 = kernel_fields(arch, x, x)[:2]
        layer = arch.layer(2)
        # on the diagonal V = K, so each pixel sums the patch of K's diagonal
        diag = np.diagonal(f1.K_xx)
        grid = arch.grids[1]
        expect = [layer.sigma_b**2 + layer.sigma_w**2 / 2 *
                  sum(diag[grid.shift_index(o)[a]] for o in layer.patch.offsets)
                  for a in range(grid.size)]
        np.testing.assert_allclose(np.diagonal(f2.K_xx), expect, rtol=1e-12)

    def test_skip_adds_stored_field(self):
        arch = skip_arch()
        rng = np.random.default_rng(2)
        x, y = rng.standard_normal((2, arch.n_inputs))
        fields = kernel_fields(arch, x, y)
        pos = next(i for i, layer in enumerate(arch.layers, 1) if isinstance(layer, Skip))
        k = arch.layer(pos).k
        np.testing.assert_allclose(fields[pos - 1].K_xy,
                                   fields[pos - 2].K_xy + fields[pos - 2 - k].K_xy, rtol=1e-13)

    def test_propagate_layer_matches_full_pass(self):
        for arch in ARCHS.values():
            rng = np.random.default_rng(3)
            x, y = rng.standard_normal((2, arch.n_inputs))
            fields = kernel_fields(arch, x, y)
            earlier = {f.layer: f for f in fields}
            for f, nxt in zip(fields[:-1], fields[1:]):
                got = propagate_layer(f, arch, earlier)
                np.testing.assert_allclose(got.K_xy, nxt.K_xy, rtol=1e-12, atol=1e-14)

    def test_skip_needs_earlier_field(self):
        arch = skip_arch()
        x = np.ones(arch.n_inputs)
        fields = kernel_fields(arch, x, x)
        pos = next(i for i, layer in enumerate(arch.layers, 1) if isinstance(layer, Skip))
        with pytest.raises(ValueError, match="skip"):
            propagate_layer(fields[pos - 2], arch)

    def test_shape_mismatch(self):
        arch = conv_arch()
        with pytest.raises(ValueError):
            kernel_matrix(arch, np.ones((2, 5)))

    def test_fields_nonnegative_after_nonlinear(self):
        arch = conv_arch()
        rng = np.random.default_rng(4)
        x, y = rng.standard_normal((2, arch.n_inputs))
        for f in kernel_fields(arch, x, y)[1:]:
            assert np.all(f.K_xy >= -1e-15)


class TestOneHiddenLayerOracle:
    def test_closed_form(self):
        arch = fc_arch(6, hidden=1, sigma_w=math.sqrt(2.0))
        rng = np.random.default_rng(5)
        X = rng.standard_normal((4, 6))
        K = kernel_matrix(arch, X)
        norms = np.linalg.norm(X, axis=1)
        cos = np.clip(X @ X.T / np.outer(norms, norms), -1, 1)
        expect = np.outer(norms, norms) / 6 * np.vectorize(_psi_direct)(cos)
        np.testing.assert_allclose(K, expect, rtol=1e-12)

    def test_width_4096_monte_carlo(self):
        # brute-force weight draws, independent of the library's samplers
        n, width, heads, draws = 6, 4096, 256, 60
        arch = fc_arch(n, hidden=1, sigma_w=math.sqrt(2.0))
        rng = np.random.default_rng(6)
        X = rng.standard_normal((5, n))
        acc = np.zeros((5, 5))
        for _ in range(draws):
            W1 = rng.standard_normal((width, n)) / math.sqrt(n)
            W2 = rng.standard_normal((heads, width)) * math.sqrt(2.0 / width)
            out = W2 @ np.maximum(W1 @ X.T, 0.0)
            acc += out.T @ out / heads
        est = acc / draws
        K = kernel_matrix(arch, X)
        assert np.linalg.norm(est - K) / np.linalg.norm(K) < 0.03


class TestMatrix:
    @pytest.mark.parametrize("name", list(ARCHS))
    def test_symmetric_psd(self, name):
        arch = ARCHS[name]
        X = np.random.default_rng(7).standard_normal((8, arch.n_inputs))
        K = kernel_matrix(arch, X)
        np.testing.assert_allclose(K, K.T, rtol=0, atol=0)
        assert np.linalg.eigvalsh(K).min() >= -1e-10 * np.abs(K).max()
        np.testing.assert_allclose(np.diag(K), kernel_diag(arch, X), rtol=1e-12)

    def test_rectangular_and_pairs_agree(self):
        arch = ARCHS["conv"]
        rng = np.random.default_rng(8)
        A = rng.standard_normal((3, arch.n_inputs))
        B = rng.standard_normal((3, arch.n_inputs))
        R = kernel_matrix(arch, A, B)
        np.testing.assert_allclose(np.diag(R), kernel_pairs(arch, A, B), rtol=1e-12)
        full = kernel_matrix(arch, np.vstack([A, B]))
        np.testing.assert_allclose(R, full[:3, 3:], rtol=1e-12)

    def test_duplicate_point(self):
        arch = ARCHS["skip"]
        x = np.random.default_rng(9).standard_normal(arch.n_inputs)
        K = kernel_matrix(arch, np.stack([x, x]))
        np.testing.assert_allclose(K[0], K[1], rtol=1e-14)
        assert rkhs_distance(K[0, 0], K[0, 1], K[1, 1]) == pytest.approx(0.0, abs=1e-7)

    def test_linear_kernel(self):
        X = np.eye(3)
        np.testing.assert_array_equal(LinearKernel()(X), np.eye(3))

    @pytest.mark.parametrize("name", list(ARCHS))
    def test_random_network_covariance(self, name):
        arch = ARCHS[name]
        n_hidden = sum(1 for layer in arch.layers if layer.kind in ("input_conv", "nonlinear"))
        X = np.random.default_rng(10).standard_normal((4, arch.n_inputs))
        est = empirical_kernel(arch, [128] * n_hidden + [128], X, 300, 11)
        K = kernel_matrix(arch, X)
        assert np.linalg.norm(est - K) / np.linalg.norm(K) < 0.08


class TestRkhsDistance:
    def test_values(self):
        assert rkhs_distance(4.0, 0.0, 9.0) == pytest.approx(math.sqrt(13.0))
        assert rkhs_distance(1.0, 1.0, 1.0) == 0.0

    def test_rounding_clamped_but_real_negatives_raise(self):
        assert rkhs_distance(1.0, 1.0 + 1e-12, 1.0) == 0.0
        with pytest.raises(KernelDomainError):
            rkhs_distance(1.0, 2.0, 1.0)


class TestSmoothness:
    def test_m_from_grids(self):
        for arch in ARCHS.values():
            c = smoothness_constants(arch)
            assert c.M == pytest.approx(math.sqrt(arch.input_grid.size /
                                                  arch.pre_flatten_grid.size))
            assert c.C > 0
        assert smoothness_constants(ARCHS["conv"]).M == pytest.approx(2.0)

    @pytest.mark.parametrize("name", list(ARCHS))
    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 2**31))
    def test_norm_lower_bound_and_lipschitz(self, name, seed):
        arch = ARCHS[name]
        k = ArchKernel(arch)
        rng = np.random.default_rng(seed)
        x = rng.standard_normal(arch.n_inputs) * rng.uniform(0.1, 10)
        y = x + rng.standard_normal(arch.n_inputs) * rng.uniform(1e-3, 3)
        K = k(np.stack([x, y]))
        assert K[0, 0] >= k.C**2 * (x @ x) * (1 - 1e-12)
        d = rkhs_distance(K[0, 0], K[0, 1], K[1, 1])
        assert d <= k.M * k.C * np.linalg.norm(x - y) * (1 + 1e-9) + 1e-12
