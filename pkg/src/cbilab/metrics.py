"""Empirical distances, decay-rate fits and ergodic averages.

``wlog_coupled`` reports ``E[log(1 + |X - Y|)]`` under the simulated coupling.
That is an upper bound on the log-Wasserstein distance, not the infimum:
for a concave cost the sorted pairing is not guaranteed to be optimal.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import SampleError
from .mechanisms import CbiParams, phi_eval, psi_eval
from .sde import CoupledEnsemble, _time_index


def _as_sample(x, name):
    a = np.asarray(x, dtype=float).ravel()
    if a.size == 0:
        raise SampleError(f"{name} is empty")
    if not np.all(np.isfinite(a)):
        raise SampleError(f"{name} contains non-finite values")
    return a


# ---------------------------------------------------------------------------
# Wasserstein
# ---------------------------------------------------------------------------


def w1_empirical(samples_a, samples_b) -> float:
    """Exact ``W_1`` between two empirical measures on the line.

    Equal sizes use the sorted pairing; otherwise the two quantile functions
    are integrated over the merged grid of probability levels.
    """
    a = np.sort(_as_sample(samples_a, "samples_a"))
    b = np.sort(_as_sample(samples_b, "samples_b"))
    if a.size == b.size:
        return float(np.mean(np.abs(a - b)))
    # quantile levels at which either step function jumps
    levels = np.union1d(np.arange(1, a.size + 1) / a.size, np.arange(1, b.size + 1) / b.size)
    widths = np.diff(np.concatenate([[0.0], levels]))
    ia = np.minimum(np.ceil(levels * a.size - 1e-9).astype(int) - 1, a.size - 1)
    ib = np.minimum(np.ceil(levels * b.size - 1e-9).astype(int) - 1, b.size - 1)
    return float(np.sum(widths * np.abs(a[ia] - b[ib])))


def wlog_coupled(coupled: CoupledEnsemble, t: float) -> Tuple[float, float]:
    """Mean and standard error of ``log(1 + |X_t - Y_t|)`` over the coupled pairs."""
    x, y = coupled.at(t)
    d = np.log1p(np.abs(x - y))
    d = d[np.isfinite(d)]
    if d.size == 0:
        raise SampleError("no finite pairs at this time")
    se = float(d.std(ddof=1) / math.sqrt(d.size)) if d.size > 1 else math.inf
    return float(d.mean()), se


def w1_coupled(coupled: CoupledEnsemble, t: float) -> Tuple[float, float]:
    """Mean and standard error of ``|X_t - Y_t|``, an upper bound on ``W_1``."""
    x, y = coupled.at(t)
    d = np.abs(x - y)
    d = d[np.isfinite(d)]
    return float(d.mean()), float(d.std(ddof=1) / math.sqrt(d.size))


# ---------------------------------------------------------------------------
# total variation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TvEstimate:
    """Histogram plug-in estimate of the total-variation distance.

    ``null_bias`` approximates the value the estimator would return for two
    independent samples of one law with the same binned masses; it is the
    natural noise scale of the estimate.
    """

    value: float
    n_bins: int
    bias_flag: bool
    null_bias: float

    def __float__(self):
        return self.value


def fd_edges(pooled: np.ndarray) -> np.ndarray:
    """Freedman–Diaconis bin edges on the pooled sample."""
    lo, hi = float(pooled.min()), float(pooled.max())
    if hi == lo:
        return np.array([lo - 0.5, hi + 0.5])
    q75, q25 = np.percentile(pooled, [75, 25])
    h = 2.0 * (q75 - q25) * pooled.size ** (-1.0 / 3.0)
    if not h > 0:
        h = (hi - lo) / max(1.0, math.sqrt(pooled.size))
    k = int(min(max(1, math.ceil((hi - lo) / h)), 10**6))
    return np.linspace(lo, hi, k + 1)


def tv_histogram(samples_a, samples_b, binning: Union[None, int, Sequence[float]] = None) -> TvEstimate:
    """``½ Σ |p̂_i - q̂_i|`` over shared bins.

    Parameters
    ----------
    binning : None, int or array of edges
        ``None`` uses Freedman–Diaconis on the pooled sample; an integer gives
        that many equal-width bins over the pooled range.
    """
    a = _as_sample(samples_a, "samples_a")
    b = _as_sample(samples_b, "samples_b")
    pooled = np.concatenate([a, b])
    if binning is None:
        edges = fd_edges(pooled)
    elif np.isscalar(binning):
        lo, hi = float(pooled.min()), float(pooled.max())
        if hi == lo:
            lo, hi = lo - 0.5, hi + 0.5
        edges = np.linspace(lo, hi, int(binning) + 1)
    else:
        edges = np.asarray(binning, dtype=float)
        if np.any(np.diff(edges) <= 0):
            raise ValueError("bin edges must increase")
        # samples outside the supplied edges go to two overflow bins
        edges = np.concatenate([[-np.inf], edges, [np.inf]])
    pa = np.histogram(a, edges)[0] / a.size
    pb = np.histogram(b, edges)[0] / b.size
    value = float(min(1.0, 0.5 * np.abs(pa - pb).sum()))
    pool_p = (pa * a.size + pb * b.size) / (a.size + b.size)
    expected = pool_p * min(a.size, b.size)
    bias_flag = bool(np.any((expected > 0) & (expected < 5)))
    null = 0.5 * math.sqrt(2.0 / math.pi) * float(
        np.sum(np.sqrt(pool_p * (1.0 / a.size + 1.0 / b.size)))
    )
    return TvEstimate(value, len(edges) - 1, bias_flag, min(null, 1.0))


# ---------------------------------------------------------------------------
# decay fit
# ---------------------------------------------------------------------------

PASS = "pass"
FAIL = "fail"
NO_CONTRACTION = "no contraction"
INCONCLUSIVE = "inconclusive"


@dataclass(frozen=True)
class DecayFit:
    times: np.ndarray
    values: np.ndarray
    stderr: np.ndarray
    used: np.ndarray
    fitted_rate: float
    rate_se: float
    intercept: float
    r_squared: float
    target_rate: float
    band: Tuple[float, float]
    verdict: str

    @property
    def passed(self) -> bool:
        return self.verdict == PASS

    def summary(self) -> str:
        lo, hi = self.band
        return (
            f"rate={self.fitted_rate:.4f}±{self.rate_se:.4f} target={self.target_rate:.4f} "
            f"band=[{lo * self.target_rate:.4f}, {hi * self.target_rate:.4f}] "
            f"points={int(self.used.sum())} verdict={self.verdict}"
        )


def fit_decay(
    times,
    values,
    stderr=None,
    target_rate: float = 1.0,
    band: Tuple[float, float] = (0.8, 1.3),
    min_points: int = 4,
    noise_factor: float = 3.0,
) -> DecayFit:
    """Weighted least squares of ``log value`` on ``t``; the rate is minus the slope.

    Points whose standard error exceeds ``value / noise_factor`` are dropped.
    With fewer than ``min_points`` usable points the verdict is
    ``"inconclusive"`` and the rate is ``nan``.  A rate significantly below
    zero (growth) gives ``"no contraction"``.
    """
    t = np.asarray(times, dtype=float)
    y = np.asarray(values, dtype=float)
    se = np.zeros_like(y) if stderr is None else np.asarray(stderr, dtype=float)
    used = np.isfinite(y) & (y > 0) & (se * noise_factor <= y)
    if used.sum() < min_points:
        nan = math.nan
        return DecayFit(t, y, se, used, nan, nan, nan, nan, target_rate, band, INCONCLUSIVE)
    tu, yu, su = t[used], np.log(y[used]), se[used] / y[used]
    if np.all(su > 0):
        w = 1.0 / su**2
    else:
        w = np.ones_like(tu)
    W = w.sum()
    tbar = (w * tu).sum() / W
    ybar = (w * yu).sum() / W
    stt = (w * (tu - tbar) ** 2).sum()
    slope = (w * (tu - tbar) * (yu - ybar)).sum() / stt
    intercept = ybar - slope * tbar
    resid = yu - (intercept + slope * tu)
    ss_tot = (w * (yu - ybar) ** 2).sum()
    r2 = 1.0 - (w * resid**2).sum() / ss_tot if ss_tot > 0 else 1.0
    n = tu.size
    # scale by the residual variance so misspecified weights do not overstate precision
    sigma2 = max((w * resid**2).sum() / (n - 2), 1.0 if np.all(su > 0) else 0.0)
    rate_se = math.sqrt(sigma2 / stt)
    rate = -slope
    lo, hi = band
    if rate + 2.0 * rate_se < 0.0:
        verdict = NO_CONTRACTION
    elif lo * target_rate <= rate <= hi * target_rate:
        verdict = PASS
    else:
        verdict = FAIL
    return DecayFit(t, y, se, used, float(rate), float(rate_se), float(intercept), float(r2),
                    float(target_rate), band, verdict)


# ---------------------------------------------------------------------------
# ergodic averages
# ---------------------------------------------------------------------------


def _resolve_f(f) -> Callable[[np.ndarray], np.ndarray]:
    if callable(f):
        return f
    if f == "identity":
        return lambda x: x
    if f == "log1p":
        return np.log1p
    if isinstance(f, tuple) and f[0] == "exp":
        lam = float(f[1])
        return lambda x: np.exp(-lam * x)
    if f == "exp":
        return lambda x: np.exp(-x)
    raise ValueError(f"unknown observable {f!r}")


@dataclass(frozen=True)
class TimeAverage:
    value: float
    stderr: float
    batch_means: np.ndarray
    horizon: float
    short_horizon: bool


def _batch_integrals(times, vals, n_batches):
    """Trapezoid integrals of ``vals`` over ``n_batches`` equal index blocks."""
    seg = 0.5 * (vals[1:] + vals[:-1]) * np.diff(times)
    n = seg.size - seg.size % n_batches
    if n == 0:
        raise SampleError("path too short for the requested number of batches")
    blocks = seg[:n].reshape(n_batches, -1)
    lengths = np.diff(times)[:n].reshape(n_batches, -1).sum(axis=1)
    return blocks.sum(axis=1), lengths, seg


def time_average(
    times,
    path,
    f="identity",
    n_batches: int = 20,
    rate: Optional[float] = None,
) -> TimeAverage:
    """``(1/t) ∫_0^t f(X_s) ds`` by the trapezoid rule, with batch-means standard error.

    ``short_horizon`` is set (and a warning issued) when the horizon is below
    ``10 / rate``.
    """
    times = np.asarray(times, dtype=float)
    x = np.asarray(path, dtype=float)
    if times.size != x.size or times.size < 2:
        raise SampleError("times and path must have equal length >= 2")
    vals = _resolve_f(f)(x)
    horizon = times[-1] - times[0]
    ints, lengths, seg = _batch_integrals(times, vals, n_batches)
    value = float(seg.sum() / horizon)
    means = ints / lengths
    se = float(means.std(ddof=1) / math.sqrt(n_batches)) if n_batches > 1 else math.inf
    short = rate is not None and rate > 0 and horizon < 10.0 / rate
    if short:
        warnings.warn("horizon shorter than 10 mixing times", RuntimeWarning, stacklevel=2)
    return TimeAverage(value, se, means, float(horizon), bool(short))


@dataclass(frozen=True)
class FcltEstimate:
    variance: float
    stderr: float
    n_batches: int
    batch_length: float
    mean: float


def fclt_observable(params: CbiParams, lam: float) -> Callable[[np.ndarray], np.ndarray]:
    """``y ↦ e^{-λy} (yφ(λ) - ψ(λ))``, the generator applied to ``e^{-λy}``."""
    phi, psi = phi_eval(params, lam), psi_eval(params, lam)
    return lambda y: np.exp(-lam * y) * (y * phi - psi)


def fclt_variance_empirical(
    times,
    path,
    params: CbiParams,
    lam: float,
    burn_in: Optional[float] = None,
    batch_length: Optional[float] = None,
) -> FcltEstimate:
    """Batch-means estimate of the long-run variance of ``L f_λ(X_s)``.

    Parameters
    ----------
    burn_in : float, optional
        Discarded initial time, default ``10 / b``.
    batch_length : float, optional
        Default ``20 / b``; fixed batch length means the standard error falls
        like ``horizon^{-1/2}``.
    """
    times = np.asarray(times, dtype=float)
    x = np.asarray(path, dtype=float)
    rate = params.b if params.b > 0 else 1.0
    burn = 10.0 / rate if burn_in is None else burn_in
    blen = 20.0 / rate if batch_length is None else batch_length
    keep = times >= times[0] + burn
    t, y = times[keep], x[keep]
    g = fclt_observable(params, lam)(y)
    if np.all(g == 0.0):
        return FcltEstimate(0.0, 0.0, 0, blen, 0.0)
    dt = np.diff(t)
    n_per = int(round(blen / np.median(dt)))
    n_b = (t.size - 1) // n_per
    if n_b < 2:
        raise SampleError("path too short for two batches after burn-in")
    seg = 0.5 * (g[1:] + g[:-1]) * dt
    seg = seg[: n_b * n_per].reshape(n_b, n_per)
    lengths = dt[: n_b * n_per].reshape(n_b, n_per).sum(axis=1)
    ints = seg.sum(axis=1)
    mean = ints.sum() / lengths.sum()
    centred = ints - mean * lengths
    var = float(np.sum(centred**2) / ((n_b - 1) * lengths.mean()))
    se = var * math.sqrt(2.0 / (n_b - 1))
    return FcltEstimate(var, float(se), int(n_b), float(lengths.mean()), float(mean))


# ---------------------------------------------------------------------------
# elementary inequality
# ---------------------------------------------------------------------------


def log_inequality_holds(a, d, C: float = 2.0):
    """Test ``log(1 + a d) <= C min{a, log(1 + d)} + C a log(1 + d)`` elementwise."""
    a = np.asarray(a, dtype=float)
    d = np.asarray(d, dtype=float)
    lhs = np.log1p(a * d)
    ld = np.log1p(d)
    rhs = C * np.minimum(a, ld) + C * a * ld
    return lhs <= rhs * (1 + 1e-12) + 1e-15
