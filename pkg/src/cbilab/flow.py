"""The backward flow ``dv/dt = -φ(v)`` and the transforms built from it.

All trajectories are integrated with an embedded Runge–Kutta pair (DOP853)
and carry the running integral ``∫_0^t ψ(v_s) ds`` as a second state variable
so that both share one error control.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy.integrate import solve_ivp

from .errors import ConditionError, FlowError
from .mechanisms import (
    CbiParams,
    FiniteAtoms,
    ZeroMeasure,
    _invariant_integral,
    branching_jump,
    immigration_jump,
    phi_eval,
    psi_eval,
    psi_slope_at_zero,
)

RTOL = 1e-10
ATOL = 1e-12

#: marker requesting the large-λ limit v̄
INF = math.inf
LAMBDA_MAX = 1e8
#: starts tried, in order, until v from λ and λ/10 agree
_LAMBDA_LADDER = tuple(10.0**k for k in range(8, 21, 2))
STABILIZATION_TOL = 1e-6


# ---------------------------------------------------------------------------
# fast mechanism closures
# ---------------------------------------------------------------------------


def mechanism_functions(params: CbiParams):
    """Return scalar callables ``(phi, psi)`` with fast paths for atoms and zero measures."""

    def jump_fn(measure, kernel, fallback):
        if isinstance(measure, ZeroMeasure) or measure.is_zero():
            return lambda lam: 0.0
        if isinstance(measure, FiniteAtoms):
            z, w = measure.positions, measure.masses
            return lambda lam: float(np.dot(w, kernel(lam, z)))
        return fallback

    def phi_kernel(lam, z):
        return np.expm1(-lam * z) + lam * z

    def psi_kernel(lam, z):
        return -np.expm1(-lam * z)

    b, half_s2, beta = params.b, 0.5 * params.sigma2, params.beta
    m_jump = jump_fn(params.m, phi_kernel, lambda lam: branching_jump(params.m, lam))
    nu_jump = jump_fn(params.nu, psi_kernel, lambda lam: immigration_jump(params.nu, lam))

    def phi(lam):
        if lam <= 0.0:
            return 0.0
        return b * lam + half_s2 * lam * lam + m_jump(lam)

    def psi(lam):
        if lam <= 0.0:
            return 0.0
        return beta * lam + nu_jump(lam)

    return phi, psi


# ---------------------------------------------------------------------------
# flow
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FlowSolution:
    """``v_t(λ)`` and ``∫_0^t ψ(v_s(λ)) ds`` sampled on ``grid``."""

    lambda0: float
    grid: np.ndarray
    v: np.ndarray
    psi_integral: np.ndarray
    tolerance: float

    def __post_init__(self):
        for name in ("grid", "v", "psi_integral"):
            getattr(self, name).setflags(write=False)

    @property
    def final(self) -> float:
        return float(self.v[-1])


def _integrate(phi, psi, lam, grid, rtol=RTOL, atol=ATOL):
    """Integrate the augmented system; returns arrays ``(v, q)`` on ``grid``."""
    grid = np.asarray(grid, dtype=float)
    n = len(grid)
    if lam == 0.0:
        return np.zeros(n), np.zeros(n)
    if grid[-1] == grid[0]:
        return np.full(n, lam), np.zeros(n)

    def rhs(_t, y):
        v = y[0] if y[0] > 0.0 else 0.0
        return [-phi(v), psi(v)]

    sol = solve_ivp(
        rhs,
        (grid[0], grid[-1]),
        [lam, 0.0],
        method="DOP853",
        t_eval=grid,
        rtol=rtol,
        atol=atol,
    )
    if sol.status != 0 or sol.y.shape[1] != n:
        t_fail = float(sol.t[-1]) if len(sol.t) else float(grid[0])
        raise FlowError(f"flow integration failed: {sol.message}", time=t_fail)
    v = np.maximum(sol.y[0], 0.0)
    return v, sol.y[1]


def solve_v(
    params: CbiParams,
    lam: float,
    horizon: float,
    grid: Optional[Sequence[float]] = None,
    *,
    rtol: float = RTOL,
    atol: float = ATOL,
) -> FlowSolution:
    """Solve ``∂v/∂t = -φ(v)``, ``v_0 = λ`` on ``[0, horizon]``.

    Parameters
    ----------
    params : CbiParams
    lam : float
        Initial value, nonnegative.
    horizon : float
        Final time, positive.
    grid : sequence of float, optional
        Output times in ``[0, horizon]``; defaults to 101 equispaced points.

    Returns
    -------
    FlowSolution

    Raises
    ------
    FlowError
        If the integrator fails (the failing time is attached).
    """
    if not lam >= 0:
        raise ValueError("lambda must be nonnegative")
    if not horizon > 0:
        raise ValueError("horizon must be positive")
    if grid is None:
        grid = np.linspace(0.0, horizon, 101)
    grid = np.asarray(grid, dtype=float)
    if grid[0] != 0.0:
        grid = np.concatenate([[0.0], grid])
    if np.any(np.diff(grid) < 0) or grid[-1] > horizon * (1 + 1e-12):
        raise ValueError("grid must be increasing within [0, horizon]")
    phi, psi = mechanism_functions(params)
    v, q = _integrate(phi, psi, float(lam), grid, rtol, atol)
    return FlowSolution(float(lam), grid, v, q, rtol)


def flow_value(params: CbiParams, lam: float, t: float) -> tuple:
    """``(v_t(λ), ∫_0^t ψ(v_s(λ)) ds)`` at a single time."""
    if t == 0 or lam == 0:
        return float(lam), 0.0
    sol = solve_v(params, lam, t, [0.0, t])
    return sol.final, float(sol.psi_integral[-1])


def riccati_flow(b: float, sigma2: float, lam, t):
    """Closed-form flow for ``φ(v) = b v + σ² v²/2`` (no branching jumps)."""
    lam = np.asarray(lam, dtype=float)
    half = 0.5 * sigma2
    if b == 0.0:
        return lam / (1.0 + half * lam * t)
    e = math.exp(-b * t)
    # (1 - e^{-bt}) / b, written to stay accurate for small b t
    frac = -math.expm1(-b * t) / b
    return lam * e / (1.0 + half * lam * frac)


def transition_laplace(params: CbiParams, x: float, t: float, lam: float) -> float:
    """``E_x[exp(-λ X_t)] = exp(-x v_t(λ) - ∫_0^t ψ(v_s(λ)) ds)``."""
    if x < 0 or t < 0 or lam < 0:
        raise ValueError("x, t and lambda must be nonnegative")
    if lam == 0:
        return 1.0
    if t == 0:
        return math.exp(-x * lam)
    v, q = flow_value(params, lam, t)
    return math.exp(-x * v - q)


def invariant_laplace(params: CbiParams, lam: float) -> float:
    """Laplace transform ``exp(-∫_0^λ ψ(u)/φ(u) du)`` of the invariant law.

    Raises
    ------
    ConditionError
        When the integral diverges or ``b < 0``.
    """
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    if lam == 0:
        return 1.0
    if params.b < 0:
        raise ConditionError("invariant law", "b < 0: the process is supercritical")
    val = _invariant_integral(params, lam)
    if not math.isfinite(val):
        raise ConditionError("invariant law", "∫_0^λ ψ(u)/φ(u) du diverges")
    return math.exp(-val)


def first_moment(params: CbiParams, x: float, t: float) -> float:
    """``E_x[X_t] = e^{-bt} x + (β + ∫ z ν(dz)) ∫_0^t e^{-bs} ds``."""
    drift = psi_slope_at_zero(params)
    if not math.isfinite(drift):
        raise ConditionError("first moment", "∫ z ν(dz) is infinite")
    b = params.b
    if t == 0:
        return float(x)
    if b == 0:
        return x + drift * t
    return math.exp(-b * t) * x + drift * (-math.expm1(-b * t) / b)


def fclt_gamma2(params: CbiParams, lam: float) -> float:
    """Asymptotic variance of ``t^{-1/2} ∫_0^t L f_λ(X_s) ds`` with ``f_λ(y) = e^{-λy}``.

    Equals ``-2 ∫ f_λ L f_λ dπ``, i.e.
    ``(2ψ(λ) - 2φ(λ)ψ(2λ)/φ(2λ)) · exp(-∫_0^{2λ} ψ/φ)``.
    """
    if not lam > 0:
        raise ValueError("lambda must be positive")
    phi2 = phi_eval(params, 2 * lam)
    if phi2 <= 0:
        raise ConditionError("fclt", "φ(2λ) must be positive")
    psi1 = psi_eval(params, lam)
    if psi1 == 0.0 and psi_eval(params, 2 * lam) == 0.0:
        return 0.0
    prefactor = 2.0 * psi1 - 2.0 * phi_eval(params, lam) * psi_eval(params, 2 * lam) / phi2
    return max(prefactor, 0.0) * invariant_laplace(params, 2 * lam)


def fclt_gamma2_reference(params: CbiParams, lam: float) -> float:
    """The composition ``(2ψ(λ) + φ(λ)ψ(2λ)/φ(2λ)) · exp(-∫_0^{2λ} ψ/φ)``.

    Kept for comparison only: it does not equal the variance of the
    functional (see :func:`fclt_gamma2`).
    """
    phi2 = phi_eval(params, 2 * lam)
    if phi2 <= 0:
        raise ConditionError("fclt", "φ(2λ) must be positive")
    pre = 2 * psi_eval(params, lam) + phi_eval(params, lam) * psi_eval(params, 2 * lam) / phi2
    return pre * invariant_laplace(params, 2 * lam)


def vbar(params: CbiParams, t: float, lam_max: float = LAMBDA_MAX) -> float:
    """``lim_{λ→∞} v_t(λ)``, certified by comparing starts at ``λ`` and ``λ/10``.

    The comparison starts at ``lam_max`` and moves up by two decades at a time
    (to 1e20) while the two values still disagree; with weak branching the
    approach to the limit is only algebraic in ``λ``.
    """
    if not t > 0:
        raise ValueError("t must be positive")
    if params.m.is_zero():
        def v_at(lam):
            return float(riccati_flow(params.b, params.sigma2, lam, t))
    else:
        def v_at(lam):
            return flow_value(params, lam, t)[0]
    return _stabilised(v_at, lam_max)


def _stabilised(v_at: Callable[[float], float], lam_max: float = LAMBDA_MAX) -> float:
    hi = lo = math.nan
    for lam in (lam_max,) + tuple(l for l in _LAMBDA_LADDER if l > lam_max):
        hi, lo = v_at(lam), v_at(lam / 10)
        if _is_stable(hi, lo):
            return hi
    _check_stable(hi, lo)
    return hi


def _is_stable(hi, lo) -> bool:
    return math.isfinite(hi) and abs(hi - lo) <= STABILIZATION_TOL * abs(hi)


def _check_stable(hi, lo):
    if not _is_stable(hi, lo):
        raise FlowError(
            "large-λ limit does not stabilise "
            f"(v={hi!r} from λ_max vs {lo!r} from λ_max/10); Grey's condition likely fails"
        )


# ---------------------------------------------------------------------------
# environment flow
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EnvironmentPath:
    """Right-continuous piecewise-constant ``ξ`` (and optionally ``Z``) on ``times``."""

    times: np.ndarray
    xi: np.ndarray
    z: Optional[np.ndarray] = None

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        xi = np.asarray(self.xi, dtype=float)
        if times.ndim != 1 or times.shape != xi.shape:
            raise ValueError("times and xi must be 1-d arrays of equal length")
        if times[0] != 0.0 or np.any(np.diff(times) <= 0):
            raise ValueError("times must start at 0 and increase strictly")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "xi", xi)
        if self.z is not None:
            object.__setattr__(self, "z", np.asarray(self.z, dtype=float))

    @classmethod
    def constant(cls, horizon: float, n: int = 2):
        return cls(np.linspace(0.0, horizon, n), np.zeros(n))


@dataclass(frozen=True)
class EnvFlowSolution:
    """``v^ξ_{r,t}(λ)`` for grid points ``r <= t``; ``vbar`` is set when the limit was requested."""

    t: float
    lambda0: float
    times: np.ndarray
    xi: np.ndarray
    v_env: np.ndarray
    vbar: Optional[float] = None

    @property
    def v0(self) -> float:
        return float(self.v_env[0])


def _env_backward(flow_step: Callable[[float, float], float], path: EnvironmentPath, lam, t):
    times, xi = path.times, path.xi
    k_end = int(np.searchsorted(times, t, side="right")) - 1
    out_t = np.append(times[: k_end + 1], t) if times[k_end] < t else times[: k_end + 1].copy()
    vals = np.empty(len(out_t))
    v = float(lam)
    vals[-1] = v
    upper = t
    j = len(out_t) - 1
    for k in range(k_end, -1, -1):
        dur = upper - times[k]
        if dur > 0:
            v = flow_step(v, dur)
        if times[k] < upper:
            j -= 1
        vals[j] = v
        if k > 0:
            v *= math.exp(xi[k] - xi[k - 1])
        upper = times[k]
    return out_t, vals


def solve_v_env(
    params: CbiParams,
    path: EnvironmentPath,
    lam: Union[float, None],
    t: float,
) -> EnvFlowSolution:
    """Environment-modulated flow ``v^ξ_{r,t}(λ)`` integrated backward in ``r`` from ``t``.

    On each interval where ξ is constant the ordinary flow applies; across a
    grid point the value is rescaled by ``e^{ξ(r) - ξ(r-)}`` so that
    ``e^{ξ(r)} v_{r,t}`` is continuous.  Pass ``lam=flow.INF`` for ``v̄``.
    """
    if not t > 0:
        raise ValueError("t must be positive")
    if t > path.times[-1] + 1e-12 * max(1.0, t):
        raise ValueError("environment path shorter than t")
    if params.m.is_zero():
        b, half = params.b, 0.5 * params.sigma2

        def step(v, dur):
            if b == 0.0:
                return v / (1.0 + half * v * dur)
            frac = -math.expm1(-b * dur) / b
            return v * math.exp(-b * dur) / (1.0 + half * v * frac)

    else:
        phi, psi = mechanism_functions(params)

        def step(v, dur):
            return float(_integrate(phi, psi, v, [0.0, dur])[0][-1])

    if lam is None or math.isinf(lam):
        runs = {}

        def v_at(lam):
            runs[lam] = _env_backward(step, path, lam, t)
            return float(runs[lam][1][0])

        v0 = _stabilised(v_at)
        times, hi = next(r for r in runs.values() if r[1][0] == v0)
        return EnvFlowSolution(t, math.inf, times, _xi_at(path, times), hi, v0)
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    times, vals = _env_backward(step, path, lam, t)
    return EnvFlowSolution(t, float(lam), times, _xi_at(path, times), vals)


def _xi_at(path: EnvironmentPath, r):
    idx = np.searchsorted(path.times, r, side="right") - 1
    return path.xi[idx]
