import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import stats

from cbilab.errors import SampleError
from cbilab.flow import fclt_gamma2, invariant_laplace
from cbilab.mechanisms import CbiParams
from cbilab.metrics import (
    FAIL,
    INCONCLUSIVE,
    NO_CONTRACTION,
    PASS,
    fclt_variance_empirical,
    fit_decay,
    log_inequality_holds,
    time_average,
    tv_histogram,
    w1_empirical,
    wlog_coupled,
)
from cbilab.sde import CbiModel, SimConfig, simulate_coupled, simulate_path

samples = arrays(np.float64, 12, elements=st.floats(-1e3, 1e3, allow_nan=False))


class TestW1:
    @pytest.mark.parametrize(
        "a, b, expected", [([0, 2], [1, 3], 1.0), ([0, 0], [0, 2], 1.0), ([1.5, -2.0], [1.5, -2.0], 0.0)]
    )
    def test_examples(self, a, b, expected):
        assert w1_empirical(a, b) == expected

    @pytest.mark.parametrize("n, m", [(10, 10), (7, 13), (100, 31), (1, 50)])
    def test_matches_scipy(self, rng, n, m):
        a, b = rng.exponential(size=n), rng.normal(size=m)
        assert w1_empirical(a, b) == pytest.approx(stats.wasserstein_distance(a, b), rel=1e-12, abs=1e-14)

    @settings(max_examples=100, deadline=None)
    @given(samples, samples, samples)
    def test_metric_axioms(self, s, t, u):
        assert w1_empirical(s, s) == 0.0
        assert w1_empirical(s, t) == w1_empirical(t, s)
        assert w1_empirical(s, u) <= w1_empirical(s, t) + w1_empirical(t, u) + 1e-9

    @settings(max_examples=50, deadline=None)
    @given(samples, samples, st.floats(-100, 100))
    def test_translation_invariance(self, s, t, c):
        # shift by a dyadic rational so that x + c is exact
        c = round(c * 8) / 8
        assert w1_empirical(s + c, t + c) == pytest.approx(w1_empirical(s, t), rel=1e-12, abs=1e-9)

    def test_empty_rejected(self):
        with pytest.raises(SampleError):
            w1_empirical([], [1.0])

    def test_convolution_contraction(self, rng):
        n = 5000
        s, t = np.sort(rng.gamma(2.0, size=n)), np.sort(rng.exponential(3.0, size=n))
        g = rng.normal(0.0, 2.0, size=n)
        before = w1_empirical(s, t)
        after = w1_empirical(s + g, t + g)
        se = np.abs(s - t).std(ddof=1) / math.sqrt(n)
        assert after <= before + 3 * se

    def test_convexity(self, rng):
        s1, t1 = rng.normal(0, 1, 400), rng.normal(1, 1, 400)
        s2, t2 = rng.exponential(1, 400), rng.exponential(2, 400)
        mixed = w1_empirical(np.concatenate([s1, s2]), np.concatenate([t1, t2]))
        assert mixed <= 0.5 * (w1_empirical(s1, t1) + w1_empirical(s2, t2)) + 1e-12


class TestWlog:
    def test_identical_starts(self, cir_model):
        ce = simulate_coupled(cir_model, 1.0, 1.0, SimConfig(dt=1e-2, horizon=1.0, n_paths=50))
        assert wlog_coupled(ce, 1.0)[0] == 0.0

    def test_deterministic_gap(self):
        ce = simulate_coupled(CbiModel(CbiParams(0.0, 1.0, 0.0)), 0.0, 5.0,
                              SimConfig(dt=1e-2, horizon=1.0, n_paths=5))
        gap = 5.0 * 0.99**100
        assert wlog_coupled(ce, 1.0)[0] == pytest.approx(math.log1p(gap), rel=1e-12)


class TestTv:
    def test_identical(self, rng):
        s = rng.normal(size=1000)
        assert tv_histogram(s, s).value == 0.0

    def test_disjoint(self, rng):
        assert tv_histogram(rng.uniform(0, 1, 500), rng.uniform(2, 3, 700)).value == 1.0

    def test_same_law_small(self):
        r = np.random.default_rng(5)
        est = tv_histogram(r.gamma(1.0, size=100_000), r.gamma(1.0, size=100_000))
        assert est.value <= 0.02

    @settings(max_examples=40, deadline=None)
    @given(samples, samples, st.integers(1, 40))
    def test_bounds_and_refinement(self, s, t, k):
        coarse = tv_histogram(s, t, k).value
        fine = tv_histogram(s, t, 2 * k).value
        assert 0.0 <= coarse <= 1.0
        assert fine >= coarse - 1e-12

    def test_explicit_edges_keep_outliers(self):
        est = tv_histogram([-10.0, 0.5], [0.5, 10.0], [0.0, 1.0])
        assert est.value == 0.5 and est.n_bins == 3


class TestFitDecay:
    def test_exact_exponential(self):
        t = np.array([1.0, 2.0, 3.0, 4.0])
        fit = fit_decay(t, np.exp(-2.0 * t), target_rate=2.0)
        assert fit.fitted_rate == pytest.approx(2.0, rel=1e-12)
        assert fit.verdict == PASS

    def test_noisy_exponential(self, rng):
        t = np.linspace(0.25, 3.0, 12)
        y = 5.0 * np.exp(-t) + rng.normal(0.0, 1e-4, t.size)
        fit = fit_decay(t, y, np.full(t.size, 1e-4), target_rate=1.0)
        assert 0.98 <= fit.fitted_rate <= 1.02

    def test_constant_series(self):
        t = np.arange(1.0, 9.0)
        fit = fit_decay(t, np.full(t.size, 0.3), target_rate=1.0)
        assert fit.fitted_rate == pytest.approx(0.0, abs=1e-12)
        assert fit.verdict == FAIL

    def test_growth(self):
        t = np.arange(1.0, 9.0)
        assert fit_decay(t, np.exp(0.5 * t), target_rate=1.0).verdict == NO_CONTRACTION

    def test_too_few_points(self):
        t = np.arange(1.0, 7.0)
        y = np.exp(-t)
        # standard errors above a third of the value remove all but three points
        se = np.where(t > 3, y, 0.0)
        fit = fit_decay(t, y, se)
        assert fit.verdict == INCONCLUSIVE and math.isnan(fit.fitted_rate)
        assert fit.used.sum() == 3


class TestTimeAverage:
    def test_constant_path(self):
        t = np.linspace(0.0, 50.0, 501)
        ta = time_average(t, np.full(t.size, 2.5), "identity")
        assert ta.value == 2.5

    def test_short_horizon_flag(self):
        t = np.linspace(0.0, 1.0, 101)
        with pytest.warns(RuntimeWarning):
            ta = time_average(t, t, "identity", rate=1.0)
        assert ta.short_horizon

    @pytest.mark.slow
    def test_cir_identity(self, cir_model):
        tr = simulate_path(cir_model, 0.0, SimConfig(dt=1e-3, horizon=1000.0, master_seed=4))
        ta = time_average(tr.times, tr.values, "identity")
        assert abs(ta.value - 1.0) < 3 * ta.stderr

    @pytest.mark.slow
    def test_cir_laplace(self, cir_model, cir):
        tr = simulate_path(cir_model, 0.0, SimConfig(dt=1e-3, horizon=1000.0, master_seed=14))
        ta = time_average(tr.times, tr.values, ("exp", 1.0))
        assert abs(ta.value - invariant_laplace(cir, 1.0)) < 3 * ta.stderr


class TestFclt:
    def test_degenerate_at_zero(self):
        params = CbiParams(0.0, 1.0, 1.0)
        tr = simulate_path(CbiModel(params), 0.0, SimConfig(dt=1e-2, horizon=200.0))
        est = fclt_variance_empirical(tr.times, tr.values, params, 1.0)
        assert est.variance == 0.0

    @pytest.mark.slow
    def test_stderr_scaling(self, cir_model, cir):
        sim = SimConfig(dt=1e-3, horizon=8000.0, master_seed=5, record_every=1e-2)
        tr = simulate_path(cir_model, 0.0, sim)
        half = tr.times.size // 2 + 1
        short = fclt_variance_empirical(tr.times[:half], tr.values[:half], cir, 1.0)
        full = fclt_variance_empirical(tr.times, tr.values, cir, 1.0)
        assert 1.15 <= short.stderr / full.stderr <= 1.75
        # the corrected analytic variance is the estimator's target
        assert abs(full.variance - fclt_gamma2(cir, 1.0)) <= 3 * full.stderr

    def test_too_short(self, cir):
        t = np.linspace(0.0, 15.0, 151)
        with pytest.raises(SampleError):
            fclt_variance_empirical(t, np.ones_like(t), cir, 1.0)


class TestLogInequality:
    def test_small_a_large_d_violates(self):
        # log(1 + a d) reaches log 2 at a d = 1 while the right side is about 2a log(1+d)
        assert not log_inequality_holds(1e-3, 1e3)

    def test_region_where_it_holds(self):
        a = np.logspace(-3, 3, 40)[:, None]
        d = np.logspace(-3, 3, 40)[None, :]
        ok = log_inequality_holds(a, d)
        assert ok[a[:, 0] >= 1.0].all()
