import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats as sps

from nngp_cert.attack import AttackRecord
from nngp_cert.stats import fit_loglog, percentile_profile


class TestFitLogLog:
    @given(c=st.floats(1e-3, 1e3), a=st.floats(-2, 2))
    def test_exact_power_law(self, c, a):
        xs = np.array([64.0, 256.0, 1024.0, 4096.0])
        fit = fit_loglog(xs, c * xs**a)
        assert fit.slope == pytest.approx(a, abs=1e-9)
        assert fit.intercept == pytest.approx(math.log(c), abs=1e-8)

    def test_constant_has_zero_slope(self):
        fit = fit_loglog([1, 2, 3, 4], [5, 5, 5, 5])
        assert fit.slope == pytest.approx(0.0, abs=1e-15) and fit.r2 == 1.0

    @settings(max_examples=30)
    @given(seed=st.integers(0, 10_000))
    def test_matches_linregress(self, seed):
        rng = np.random.default_rng(seed)
        xs = np.sort(rng.uniform(1, 100, 6)) + np.arange(6)
        ys = rng.uniform(0.1, 10, 6)
        ref = sps.linregress(np.log(xs), np.log(ys))
        fit = fit_loglog(xs, ys)
        assert fit.slope == pytest.approx(ref.slope, rel=1e-9, abs=1e-12)
        assert fit.stderr == pytest.approx(ref.stderr, rel=1e-9, abs=1e-12)
        assert fit.r2 == pytest.approx(ref.rvalue**2, rel=1e-9, abs=1e-12)

    @pytest.mark.parametrize("xs,ys", [([1, 2], [1, 2]), ([1, 2, 3], [1, 0, 2]),
                                       ([1, -2, 3], [1, 2, 3]), ([2, 2, 2], [1, 2, 3])])
    def test_rejects_bad_input(self, xs, ys):
        with pytest.raises(ValueError):
            fit_loglog(xs, ys)


class TestPercentileProfile:
    def test_uniform_is_linear(self):
        d = np.linspace(0.01, 1, 400)
        prof = percentile_profile(d)
        assert prof.fit.r2 > 0.999
        assert prof.fit.slope == pytest.approx(1.0, rel=0.01)
        assert prof.percentiles[0] == pytest.approx(0.5 / 400)

    def test_filters_records(self):
        recs = [AttackRecord(1.0, np.zeros(1), np.zeros(1), float(i), 1, True, False)
                for i in range(1, 121)]
        recs += [AttackRecord(2.0, np.zeros(1), np.zeros(1), 0.5, 1, True, False)] * 50
        recs += [AttackRecord(1.0, np.zeros(1), None, math.nan, 1, False, True)] * 10
        prof = percentile_profile(recs, p=1.0)
        assert len(prof.distances) == 120

    def test_too_few(self):
        with pytest.raises(ValueError):
            percentile_profile(np.ones(99))
