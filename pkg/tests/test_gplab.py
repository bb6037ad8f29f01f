import math

import numpy as np
import pytest

from nngp_cert.gplab import (
    Ball,
    NotPSDError,
    Segment,
    ball_grid,
    borell_tis_check,
    build_ensemble,
    condition_on_anchor,
    crossing_probability,
    dudley_check,
    ensemble_from_gram,
    expected_max_abs_normal,
    factorize,
    l1_cloud,
    rice_bound,
    rice_check,
    sample,
    segment_grid,
)
from nngp_cert.kernel import ArchKernel, LinearKernel
from nngp_cert.zoo import reference_archs

LIN = LinearKernel()


class TestFactorize:
    def test_identity_needs_no_jitter(self):
        ens = build_ensemble(LIN, np.eye(4))
        np.testing.assert_array_equal(ens.gram, np.eye(4))
        assert ens.jitter_used == 0.0

    def test_duplicate_point_gets_jitter(self):
        x = np.array([[1.0, 2.0, 0.5]])
        ens = build_ensemble(LIN, np.vstack([x, x, [[0.0, 1.0, 0.0]]]))
        assert ens.jitter_used > 0
        assert ens.jitter_used <= 1e-6 * np.max(np.diag(ens.gram))

    def test_reconstruction(self):
        arch = reference_archs()["conv"]
        pts = np.random.default_rng(0).standard_normal((20, arch.n_inputs))
        ens = build_ensemble(ArchKernel(arch), pts)
        recon = ens.factor @ ens.factor.T
        target = ens.gram + ens.jitter_used * np.eye(20)
        assert np.linalg.norm(recon - target) / np.linalg.norm(target) < 1e-8
        np.testing.assert_array_equal(ens.factor, np.tril(ens.factor))

    def test_not_psd(self):
        with pytest.raises(NotPSDError) as info:
            factorize(np.array([[1.0, 2.0], [2.0, 1.0]]))
        assert info.value.eigenvalues[0] == pytest.approx(-1.0)


class TestSample:
    def test_zero_gram(self):
        ens = ensemble_from_gram(np.zeros((3, 3)))
        assert np.all(sample(ens, 50, 0) == 0)

    def test_scalar_variance(self):
        draws = sample(ensemble_from_gram(np.array([[4.0]])), 100_000, 1)[:, 0]
        se = 4.0 * math.sqrt(2 / 100_000)
        assert abs(draws.var() - 4.0) < 3 * se

    def test_covariance_entrywise(self):
        K = np.array([[2.0, 0.6, -0.3], [0.6, 1.0, 0.2], [-0.3, 0.2, 0.5]])
        draws = sample(ensemble_from_gram(K), 100_000, 2)
        emp = draws.T @ draws / len(draws)
        se = np.sqrt((np.outer(np.diag(K), np.diag(K)) + K**2) / len(draws))
        assert np.all(np.abs(emp - K) < 3.5 * se)

    def test_reproducible(self):
        ens = ensemble_from_gram(np.eye(3))
        np.testing.assert_array_equal(sample(ens, 3000, 7), sample(ens, 3000, 7))
        assert not np.array_equal(sample(ens, 10, 7), sample(ens, 10, 8))

    def test_prefix_stable_across_trial_counts(self):
        ens = ensemble_from_gram(np.eye(2))
        np.testing.assert_array_equal(sample(ens, 5000, 3)[:1500], sample(ens, 1500, 3))


class TestConditioning:
    def test_anchor_and_shrinkage(self):
        arch = reference_archs()["skip"]
        pts = np.random.default_rng(3).standard_normal((12, arch.n_inputs))
        ens = build_ensemble(ArchKernel(arch), pts)
        cond = condition_on_anchor(ens, 0, 1.7)
        assert cond.mean[0] == 1.7
        assert cond.gram[0, 0] == 0.0
        assert np.all(np.diag(cond.gram) <= np.diag(ens.gram) + 1e-12)
        eig = np.linalg.eigvalsh(cond.gram)
        assert eig.min() >= -1e-8 * np.abs(ens.gram).max()

    def test_linear_kernel_oracle(self):
        pts = np.array([[1.0, 0, 0], [2.0, 1.0, 0], [0, 3.0, -1.0], [0.5, 0, 2.0]])
        cond = condition_on_anchor(build_ensemble(LIN, pts), 0, 2.0)
        # given w1 = 2, phi(x) = 2 x1 + w2 x2 + w3 x3
        np.testing.assert_allclose(cond.mean, 2.0 * pts[:, 0])
        np.testing.assert_allclose(cond.gram, pts[:, 1:] @ pts[:, 1:].T, atol=1e-12)

    def test_zero_anchor_variance(self):
        with pytest.raises(ValueError):
            condition_on_anchor(ensemble_from_gram(np.diag([0.0, 1.0])), 0, 1.0)


class TestGrids:
    @pytest.mark.parametrize("p", [1.0, 2.0, math.inf])
    def test_ball_grid_inside(self, p):
        x0 = np.array([3.0, -1.0, 0.5, 2.0])
        pts = ball_grid(x0, 0.7, p, 256, 0)
        assert len(pts) == 257
        np.testing.assert_array_equal(pts[0], x0)
        d = np.linalg.norm(pts[1:] - x0, ord=p, axis=1)
        assert np.all(d < 0.7)
        assert np.sum(d > 0.7 * (1 - 1e-6)) >= 128

    def test_segment_grid_endpoints(self):
        pts = segment_grid(np.zeros(2), np.array([0.0, 2.0]), 3.0, 7)
        np.testing.assert_allclose(pts[-1], [0.0, 3.0])
        np.testing.assert_array_equal(pts[0], [0.0, 0.0])

    def test_degenerate_region(self):
        with pytest.raises(ValueError):
            crossing_probability(LIN, np.ones(2), Ball(0.0), 16, 100, 0)
        with pytest.raises(ValueError):
            crossing_probability(LIN, np.ones(2), Segment((1.0, 0.0), -1.0), 16, 100, 0)


class TestCrossing:
    def test_parallel_segment_never_crosses(self):
        est = crossing_probability(LIN, np.array([10.0, 0.0]), Segment((1.0, 0.0), 1.0), 64,
                                   20_000, 0)
        assert est.estimate == 0.0

    def test_orthogonal_segment_cauchy_oracle(self):
        est = crossing_probability(LIN, np.array([10.0, 0.0]), Segment((0.0, 1.0), 1.0), 64,
                                   50_000, 1)
        assert abs(est.estimate - math.atan(0.1) / math.pi) <= 3 * est.stderr

    def test_grid_refinement(self):
        arch = reference_archs()["fc"]
        k = ArchKernel(arch)
        x0 = np.random.default_rng(4).standard_normal(arch.n_inputs)
        coarse = crossing_probability(k, x0, Ball(0.8), 64, 20_000, 5)
        fine = crossing_probability(k, x0, Ball(0.8), 128, 20_000, 5)
        assert fine.estimate >= coarse.estimate - 3 * math.hypot(coarse.stderr, fine.stderr)


class TestRice:
    def test_linear_closed_form(self):
        x0, v = np.array([10.0, 0.0]), np.array([0.0, 1.0])
        for r in (0.5, 1.0, 4.0):
            assert rice_bound(LIN, x0, v, r, 256) == pytest.approx(math.atan(r / 10) / math.pi,
                                                                  rel=1e-6)

    def test_shrinks_with_r(self):
        x0, v = np.array([10.0, 0.0]), np.array([0.0, 1.0])
        rep = rice_check(LIN, x0, v, 1e-4, 32, 2000, 0)
        assert rep.mean_count == 0.0
        assert rep.rice_bound < 1e-5 and rep.coarse_bound < 1e-5

    def test_rejects_long_segment(self):
        with pytest.raises(ValueError):
            rice_check(LIN, np.array([1.0, 0.0]), np.array([0.0, 1.0]), 1.0, 16, 100, 0)

    @pytest.mark.parametrize("name", list(reference_archs()))
    def test_arch_counts_below_bounds(self, name):
        arch = reference_archs()[name]
        k = ArchKernel(arch)
        rng = np.random.default_rng(6)
        x0 = rng.standard_normal(arch.n_inputs)
        v = rng.standard_normal(arch.n_inputs)
        rep = rice_check(k, x0, v, 0.3 * np.linalg.norm(x0), 128, 5000, 7)
        assert rep.mean_count <= rep.rice_bound + 3 * rep.stderr
        assert rep.rice_bound <= rep.coarse_bound


class TestBorellTis:
    def test_single_point_gaussian_tail(self):
        rep = borell_tis_check(ensemble_from_gram(np.array([[2.0]])), trials=20_000, seed=0)
        assert rep.sigma == pytest.approx(math.sqrt(2.0))
        assert all(r.passed for r in rep.rows)

    def test_zero_threshold_is_vacuous(self):
        rep = borell_tis_check(ensemble_from_gram(np.eye(3)), t_values=[0.0], seed=1)
        assert rep.rows[0].bound == 1.0 and rep.rows[0].passed

    def test_requires_enough_trials(self):
        with pytest.raises(ValueError):
            borell_tis_check(ensemble_from_gram(np.eye(2)), trials=500)

    def test_arch_ensemble(self):
        arch = reference_archs()["fc"]
        pts = np.random.default_rng(2).standard_normal((32, arch.n_inputs))
        rep = borell_tis_check(build_ensemble(ArchKernel(arch), pts), seed=3)
        assert [r.t for r in rep.rows] == pytest.approx([rep.sigma, 2 * rep.sigma,
                                                         3 * rep.sigma])
        assert all(r.passed for r in rep.rows)


class TestDudleyCheck:
    def test_one_dimensional_half_normal(self):
        rep = dudley_check(1, 0, 40_000, 0)
        assert rep.esup == pytest.approx(math.sqrt(2 / math.pi), abs=4 * rep.stderr)
        assert rep.esup <= rep.bound

    def test_single_center_point(self):
        rep = dudley_check(5, 0, 1000, 1, cloud=np.zeros((1, 5)))
        assert rep.esup == 0.0

    def test_high_dimension_matches_max_abs(self):
        rep = dudley_check(256, 4096, 10_000, 2)
        assert rep.esup == pytest.approx(rep.einf, abs=4 * rep.stderr + 1e-3)
        assert rep.esup <= rep.bound

    def test_cloud_inside_ball(self):
        assert np.all(np.abs(l1_cloud(10, 500, 3)).sum(axis=1) < 1)

    def test_expected_max_abs(self):
        assert expected_max_abs_normal(1) == pytest.approx(math.sqrt(2 / math.pi), rel=1e-10)
        w = np.abs(np.random.default_rng(4).standard_normal((40_000, 16))).max(axis=1)
        assert expected_max_abs_normal(16) == pytest.approx(w.mean(), abs=4 * w.std() / 200)
