"""Lévy measures, branching/immigration mechanisms and their integrability checks.

Four measure families are supported: finite sums of atoms, power-law densities
``c z^p`` (optionally cut off at ``z_max``), tempered power laws
``c z^p exp(-theta z)`` and the zero measure.  Every integral against a density
is split at ``z = 1`` and then evaluated decade by decade; a stable ratio between
successive decades is used either to sum the geometric remainder in closed form or
to declare divergence.  Divergent integrals are reported as ``inf``.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Tuple

import numpy as np
from scipy import integrate, special

from .errors import ConditionError, MeasureError

logger = logging.getLogger(__name__)

ABS_TOL = 1e-10
REL_TOL = 1e-8
OVERFLOW = 1e15
MAX_DECADES = 400

POSITIVE = (0.0, math.inf)
REAL_LINE = (-math.inf, math.inf)

Domain = Tuple[float, float]


# ---------------------------------------------------------------------------
# measures
# ---------------------------------------------------------------------------


class LevyMeasure:
    """Base class of the supported jump measures.

    Domains are half-open intervals ``(lo, hi]``.
    """

    #: lower edge of the small-jump singularity index used by Grey's test
    def activity_index(self) -> float:
        return 0.0

    def is_zero(self) -> bool:
        return False

    def to_dict(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class ZeroMeasure(LevyMeasure):
    def is_zero(self) -> bool:
        return True

    def to_dict(self) -> dict:
        return {"kind": "zero"}


@dataclass(frozen=True)
class FiniteAtoms(LevyMeasure):
    """``sum_i w_i delta_{z_i}``; positions may be negative for environment measures."""

    atoms: Tuple[Tuple[float, float], ...]

    def __init__(self, atoms: Sequence[Tuple[float, float]]):
        cleaned = tuple((float(z), float(w)) for z, w in atoms)
        for z, w in cleaned:
            if not (math.isfinite(z) and math.isfinite(w)):
                raise MeasureError(f"non-finite atom ({z}, {w})")
            if w <= 0:
                raise MeasureError(f"atom mass must be positive, got {w}")
            if z == 0:
                raise MeasureError("atoms at the origin are not allowed")
        object.__setattr__(self, "atoms", cleaned)

    @property
    def positions(self) -> np.ndarray:
        return np.array([z for z, _ in self.atoms], dtype=float)

    @property
    def masses(self) -> np.ndarray:
        return np.array([w for _, w in self.atoms], dtype=float)

    def is_zero(self) -> bool:
        return len(self.atoms) == 0

    def to_dict(self) -> dict:
        return {"kind": "atoms", "atoms": [[z, w] for z, w in self.atoms]}


@dataclass(frozen=True)
class PowerLawDensity(LevyMeasure):
    """Density ``coefficient * z**exponent`` on ``(0, z_max]``."""

    coefficient: float
    exponent: float
    z_max: float = math.inf

    def __post_init__(self):
        if not self.coefficient > 0:
            raise MeasureError("power-law coefficient must be positive")
        if not self.z_max > 0:
            raise MeasureError("power-law cutoff must be positive")

    def density(self, z: float) -> float:
        return self.coefficient * z**self.exponent

    @property
    def support(self) -> Domain:
        return (0.0, self.z_max)

    def activity_index(self) -> float:
        return -1.0 - self.exponent

    def to_dict(self) -> dict:
        out = {"kind": "power", "coefficient": self.coefficient, "exponent": self.exponent}
        if math.isfinite(self.z_max):
            out["z_max"] = self.z_max
        return out


@dataclass(frozen=True)
class TemperedPowerLaw(LevyMeasure):
    """Density ``coefficient * z**exponent * exp(-tempering * z)`` on ``(0, inf)``."""

    coefficient: float
    exponent: float
    tempering: float

    def __post_init__(self):
        if not self.coefficient > 0:
            raise MeasureError("tempered coefficient must be positive")
        if not self.tempering > 0:
            raise MeasureError("tempering rate must be positive")

    def density(self, z: float) -> float:
        return self.coefficient * z**self.exponent * math.exp(-self.tempering * z)

    @property
    def support(self) -> Domain:
        return (0.0, math.inf)

    def activity_index(self) -> float:
        return -1.0 - self.exponent

    def to_dict(self) -> dict:
        return {
            "kind": "tempered",
            "coefficient": self.coefficient,
            "exponent": self.exponent,
            "tempering": self.tempering,
        }


_DENSITIES = (PowerLawDensity, TemperedPowerLaw)


def measure_from_dict(spec: dict) -> LevyMeasure:
    """Inverse of ``LevyMeasure.to_dict``."""
    kind = spec.get("kind")
    if kind == "zero":
        return ZeroMeasure()
    if kind == "atoms":
        return FiniteAtoms([tuple(a) for a in spec["atoms"]])
    if kind == "power":
        return PowerLawDensity(
            float(spec["coefficient"]), float(spec["exponent"]), float(spec.get("z_max", math.inf))
        )
    if kind == "tempered":
        return TemperedPowerLaw(
            float(spec["coefficient"]), float(spec["exponent"]), float(spec["tempering"])
        )
    raise MeasureError(f"unknown measure kind {kind!r}")


# ---------------------------------------------------------------------------
# integration
# ---------------------------------------------------------------------------


def _decade_series(piece: Callable[[int], Optional[float]], bounded: bool = False) -> float:
    """Sum ``piece(0) + piece(1) + ...`` where each piece is one decade.

    ``piece`` returns ``None`` once the domain is exhausted.  On unbounded
    domains a ratio between successive pieces that is stable to 1e-7 is
    treated as a geometric tail; bounded domains are always summed in full.
    """
    total = 0.0
    prev = None
    prev_ratio = None
    quiet = 0
    for k in range(MAX_DECADES):
        c = piece(k)
        if c is None:
            return total
        total += c
        if not math.isfinite(total) or abs(total) > OVERFLOW:
            return math.copysign(math.inf, total if total != 0 else c)
        if abs(c) <= 1e-3 * ABS_TOL + 1e-3 * REL_TOL * abs(total):
            quiet += 1
            if quiet >= 2:
                return total
            prev, prev_ratio = c, None
            continue
        quiet = 0
        if not bounded and prev is not None and prev != 0.0 and (c > 0) == (prev > 0):
            ratio = c / prev
            if prev_ratio is not None and abs(ratio - prev_ratio) <= 1e-7 * abs(ratio):
                if ratio >= 1.0 - 1e-7:
                    return math.copysign(math.inf, c)
                return total + c * ratio / (1.0 - ratio)
            prev_ratio = ratio
        else:
            prev_ratio = None
        prev = c
    # no convergence within MAX_DECADES decades
    return math.copysign(math.inf, total)


def _quad(g: Callable[[float], float], a: float, b: float) -> float:
    with warnings.catch_warnings():
        # roundoff warnings on tiny decades are expected; the decade series
        # only needs the value, not scipy's error estimate
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        val, _err = integrate.quad(g, a, b, epsabs=ABS_TOL, epsrel=REL_TOL, limit=200)
    if not math.isfinite(val):
        return math.inf
    return val


def _density_integral(measure, integrand, lo: float, hi: float) -> float:
    s_lo, s_hi = measure.support
    lo, hi = max(lo, s_lo), min(hi, s_hi)
    if not lo < hi:
        return 0.0

    def g(z):
        return integrand(z) * measure.density(z)

    total = 0.0
    if lo < 1.0:
        top = min(hi, 1.0)
        if lo > 0.0:
            n_dec = max(1, math.ceil(math.log10(top / lo)))

            def down(k):
                if k >= n_dec:
                    return None
                return _quad(g, max(lo, top * 10.0 ** (-(k + 1))), top * 10.0**-k)

        else:

            def down(k):
                return _quad(g, top * 10.0 ** (-(k + 1)), top * 10.0**-k)

        total += _decade_series(down, bounded=lo > 0.0)
    if hi > 1.0 and math.isfinite(total):
        base = max(lo, 1.0)

        def up(k):
            a = base * 10.0**k
            if a >= hi:
                return None
            return _quad(g, a, min(hi, a * 10.0))

        total += _decade_series(up, bounded=math.isfinite(hi))
    return total


def levy_integral(
    measure: LevyMeasure,
    integrand: Callable[[float], float],
    domain: Domain = POSITIVE,
) -> float:
    """Integrate ``integrand`` against ``measure`` over ``(lo, hi]``.

    Returns ``inf`` (or ``-inf``) when the integral diverges or exceeds ``1e15``.
    """
    lo, hi = domain
    if isinstance(measure, ZeroMeasure):
        return 0.0
    if isinstance(measure, FiniteAtoms):
        terms = [w * integrand(z) for z, w in measure.atoms if lo < z <= hi]
        val = math.fsum(terms)
        if abs(val) > OVERFLOW:
            return math.copysign(math.inf, val)
        return val
    if isinstance(measure, _DENSITIES):
        if hi <= 0.0:
            raise MeasureError("density measures live on (0, inf); empty negative domain")
        return _density_integral(measure, integrand, max(lo, 0.0), hi)
    raise MeasureError(f"unsupported measure variant {type(measure).__name__}")


def total_mass(measure: LevyMeasure, domain: Domain = POSITIVE) -> float:
    return levy_integral(measure, lambda z: 1.0, domain)


# ---------------------------------------------------------------------------
# parameters and mechanisms
# ---------------------------------------------------------------------------


class MeasureCondition:
    """Outcome of the joint small/large-jump integrability check."""

    __slots__ = ("passed", "m_value", "nu_value", "reason")

    def __init__(self, passed, m_value, nu_value, reason=""):
        self.passed = passed
        self.m_value = m_value
        self.nu_value = nu_value
        self.reason = reason

    def __bool__(self):
        return self.passed

    def __repr__(self):
        return (
            f"MeasureCondition(passed={self.passed}, m_value={self.m_value!r}, "
            f"nu_value={self.nu_value!r})"
        )


def _has_nonpositive_atoms(measure: LevyMeasure) -> bool:
    return isinstance(measure, FiniteAtoms) and any(z <= 0 for z, _ in measure.atoms)


def measure_condition(m: LevyMeasure, nu: LevyMeasure) -> MeasureCondition:
    """Check that ``∫(z∧z²) m(dz)`` and ``∫(1∧z) nu(dz)`` are finite."""
    if _has_nonpositive_atoms(m) or _has_nonpositive_atoms(nu):
        return MeasureCondition(False, math.nan, math.nan, "jump measures must live on (0, inf)")
    mv = levy_integral(m, lambda z: min(z, z * z))
    nv = levy_integral(nu, lambda z: min(1.0, z))
    ok = math.isfinite(mv) and math.isfinite(nv)
    reason = "" if ok else ("branching measure" if not math.isfinite(mv) else "immigration measure")
    return MeasureCondition(ok, mv, nv, reason)


@dataclass(frozen=True)
class CbiParams:
    """Admissible CBI parameters ``(beta, b, sigma, m, nu)``."""

    beta: float
    b: float
    sigma: float
    m: LevyMeasure = field(default_factory=ZeroMeasure)
    nu: LevyMeasure = field(default_factory=ZeroMeasure)

    def __post_init__(self):
        if not self.beta >= 0:
            raise ConditionError("admissibility", f"beta must be >= 0, got {self.beta}")
        if not self.sigma >= 0:
            raise ConditionError("admissibility", f"sigma must be >= 0, got {self.sigma}")
        if not math.isfinite(self.b):
            raise ConditionError("admissibility", "b must be finite")
        cond = measure_condition(self.m, self.nu)
        if not cond:
            raise ConditionError("measure condition", f"{cond.reason} fails integrability")

    @classmethod
    def from_sigma2(cls, beta, b, sigma2, m=None, nu=None):
        return cls(beta, b, math.sqrt(sigma2), m or ZeroMeasure(), nu or ZeroMeasure())

    @property
    def sigma2(self) -> float:
        return self.sigma * self.sigma

    def to_dict(self) -> dict:
        return {
            "beta": self.beta,
            "b": self.b,
            "sigma": self.sigma,
            "m": self.m.to_dict(),
            "nu": self.nu.to_dict(),
        }


# Closed forms by analytic continuation of the Gamma integral, used where
# quadrature would lose accuracy (large λ) and the exponent avoids the poles.
_CLOSED_FORM_MIN_RATIO = 0.1


def _gamma_closed_form_ok(measure, pole) -> bool:
    # the integral itself diverges at 0 once the exponent reaches pole - 1
    if not isinstance(measure, _DENSITIES) or measure.exponent in (pole, pole - 1.0):
        return False
    if measure.exponent < pole - 1.0:
        return False
    return isinstance(measure, TemperedPowerLaw) or math.isinf(measure.z_max)


def branching_jump(measure: LevyMeasure, lam: float) -> float:
    """``∫(e^{-λz} - 1 + λz) m(dz)``."""
    if _gamma_closed_form_ok(measure, -2.0):
        c, p = measure.coefficient, measure.exponent
        g = special.gamma(p + 1.0)
        if isinstance(measure, PowerLawDensity):
            return float(c * g * lam ** (-p - 1.0))
        theta = measure.tempering
        x = lam / theta
        if x >= _CLOSED_FORM_MIN_RATIO:
            a = -p - 1.0
            return float(c * g * theta**a * (math.expm1(a * math.log1p(x)) - a * x))
    return levy_integral(measure, lambda z: math.expm1(-lam * z) + lam * z)


def immigration_jump(measure: LevyMeasure, lam: float) -> float:
    """``∫(1 - e^{-λz}) ν(dz)``."""
    if _gamma_closed_form_ok(measure, -1.0):
        c, p = measure.coefficient, measure.exponent
        g = special.gamma(p + 1.0)
        if isinstance(measure, PowerLawDensity):
            return float(-c * g * lam ** (-p - 1.0))
        theta = measure.tempering
        a = -p - 1.0
        return float(-c * g * theta**a * math.expm1(a * math.log1p(lam / theta)))
    return levy_integral(measure, lambda z: -math.expm1(-lam * z))


def phi_eval(params: CbiParams, lam: float) -> float:
    """Branching mechanism ``b λ + σ²λ²/2 + ∫(e^{-λz} - 1 + λz) m(dz)``."""
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    if lam == 0:
        return 0.0
    return params.b * lam + 0.5 * params.sigma2 * lam * lam + branching_jump(params.m, lam)


def psi_eval(params: CbiParams, lam: float) -> float:
    """Immigration mechanism ``β λ + ∫(1 - e^{-λz}) ν(dz)``."""
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    if lam == 0:
        return 0.0
    return params.beta * lam + immigration_jump(params.nu, lam)


def psi_slope_at_zero(params: CbiParams) -> float:
    """``ψ'(0) = β + ∫ z ν(dz)``, possibly infinite."""
    return params.beta + levy_integral(params.nu, lambda z: z)


def psi_is_zero(params: CbiParams) -> bool:
    return params.beta == 0 and params.nu.is_zero()


def grey_by_family(params: CbiParams) -> bool:
    """Grey's condition decided from the parametric family.

    ``φ`` grows like ``λ²`` with a Gaussian part and like ``λ^α`` when the
    branching density behaves as ``z^{-1-α}`` near 0; the integral of ``1/φ``
    converges exactly when the growth is superlinear.
    """
    if params.sigma > 0:
        return True
    return params.m.activity_index() > 1.0


# ---------------------------------------------------------------------------
# condition report
# ---------------------------------------------------------------------------


@dataclass
class MechanismReport:
    grey_holds: bool
    grey_status: str
    grey_theta: float
    grey_integral: float
    grey_tail: float
    log_moment: float
    invariant_exists: bool
    invariant_integral: float
    first_moment_tail: float
    notes: list = field(default_factory=list)

    @property
    def grey_value(self) -> float:
        return self.grey_integral + self.grey_tail

    def to_dict(self) -> dict:
        return {
            "grey_holds": self.grey_holds,
            "grey_status": self.grey_status,
            "grey_theta": self.grey_theta,
            "grey_integral": self.grey_integral,
            "grey_tail": self.grey_tail,
            "log_moment": self.log_moment,
            "invariant_exists": self.invariant_exists,
            "invariant_integral": self.invariant_integral,
            "first_moment_tail": self.first_moment_tail,
            "notes": list(self.notes),
        }


GREY_CAP = 1e8


def _positive_threshold(params: CbiParams) -> Optional[float]:
    """Smallest convenient θ with φ > 0 on (θ, ∞), or None if φ never turns positive."""
    if params.b >= 0 and (params.b > 0 or params.sigma > 0 or not params.m.is_zero()):
        return 1.0
    grid = np.logspace(-6, math.log10(GREY_CAP), 200)
    vals = np.array([phi_eval(params, x) for x in grid])
    pos = vals > 0
    if not pos[-1]:
        return None
    # last sign change, then a safety factor above the root
    idx = np.nonzero(~pos)[0]
    root = grid[idx[-1] + 1] if len(idx) else grid[0]
    return max(1.0, 2.0 * float(root))


def _grey_integral(params: CbiParams, theta: float) -> Tuple[float, float]:
    def g(s):
        lam = math.exp(s)
        return lam / phi_eval(params, lam)

    lo, hi = math.log(theta), math.log(GREY_CAP)
    edges = np.linspace(lo, hi, 12)
    body = math.fsum(_quad(g, a, b) for a, b in zip(edges[:-1], edges[1:]))
    cap = GREY_CAP
    if params.sigma > 0:
        # φ(λ) >= bλ + σ²λ²/2, exact when m = 0
        half = 0.5 * params.sigma2
        if params.b != 0:
            tail = math.log1p(params.b / (half * cap)) / params.b
        else:
            tail = 1.0 / (half * cap)
    else:
        p = math.log(phi_eval(params, cap) / phi_eval(params, cap / 2)) / math.log(2.0)
        tail = cap / ((p - 1.0) * phi_eval(params, cap)) if p > 1.0 + 1e-3 else math.inf
    return body, tail


def _invariant_integral(params: CbiParams, lam: float) -> float:
    """``∫_0^λ ψ(u)/φ(u) du`` or ``inf`` when it diverges at 0."""
    if psi_is_zero(params):
        return 0.0
    if params.b < 0:
        return math.inf

    def ratio(u):
        return psi_eval(params, u) / phi_eval(params, u)

    slope = psi_slope_at_zero(params)
    if params.b > 0 and math.isfinite(slope):
        eps = 1e-6 * min(lam, 1.0)
        return slope / params.b * eps + _quad(ratio, eps, lam)
    top = min(lam, 1.0)

    def down(k):
        return _quad(ratio, top * 10.0 ** (-(k + 1)), top * 10.0**-k)

    head = _decade_series(down)
    if not math.isfinite(head):
        return math.inf
    return head + (_quad(ratio, top, lam) if lam > top else 0.0)


def invariant_integral(params: CbiParams, lam: float) -> float:
    """Public form of ``∫_0^λ ψ/φ``; raises when no invariant law exists."""
    val = _invariant_integral(params, lam)
    if not math.isfinite(val):
        raise ConditionError("invariant law", "∫_0^λ ψ(u)/φ(u) du diverges")
    return val


def check_conditions(params: CbiParams) -> MechanismReport:
    """Evaluate Grey's condition, the log/first moments of ν and invariant-law existence."""
    notes = []
    theta = _positive_threshold(params)
    if theta is None:
        grey_holds, status = False, "inapplicable"
        body = tail = math.nan
        theta = math.nan
        notes.append("φ(λ) <= 0 on the whole tested range; Grey's condition inapplicable")
    else:
        body, tail = _grey_integral(params, theta)
        grey_holds = grey_by_family(params)
        status = "holds" if grey_holds else "fails"
        if grey_holds != math.isfinite(tail):
            notes.append(
                "numeric Grey tail disagrees with the family rule; the family rule is reported"
            )
    log_moment = levy_integral(params.nu, math.log, (1.0, math.inf))
    first_tail = levy_integral(params.nu, lambda z: z, (1.0, math.inf))
    if params.b < 0:
        inv_val = math.inf
    else:
        inv_val = _invariant_integral(params, 1.0)
    inv_exists = math.isfinite(inv_val) and not (params.b < 0)
    if params.b > 0 and inv_exists != math.isfinite(log_moment):
        notes.append("invariant-law existence disagrees with the log-moment criterion")
        logger.warning("log-moment cross-check failed for %r", params)
    return MechanismReport(
        grey_holds=grey_holds,
        grey_status=status,
        grey_theta=theta,
        grey_integral=body,
        grey_tail=tail,
        log_moment=log_moment,
        invariant_exists=inv_exists,
        invariant_integral=inv_val,
        first_moment_tail=first_tail,
        notes=notes,
    )


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


def _power_inverse(u, p, lo, hi):
    q = p + 1.0
    if q == 0.0:
        return lo * np.exp(u * math.log(hi / lo))
    a = lo**q
    b = hi**q if math.isfinite(hi) else 0.0
    return (a + u * (b - a)) ** (1.0 / q)


def sample_jump(
    measure: LevyMeasure,
    domain: Domain,
    rng: np.random.Generator,
    size=None,
):
    """Draw from ``measure`` restricted to ``(lo, hi]`` and normalised."""
    lo, hi = domain
    if isinstance(measure, ZeroMeasure):
        raise MeasureError("cannot sample from the zero measure")
    mass = total_mass(measure, domain)
    if not mass > 0:
        raise MeasureError(f"measure has no mass on {domain}")
    if not math.isfinite(mass):
        raise MeasureError(f"measure has infinite mass on {domain}; raise the cutoff")
    n = 1 if size is None else int(np.prod(size))
    if isinstance(measure, FiniteAtoms):
        z, w = measure.positions, measure.masses
        keep = (z > lo) & (z <= hi)
        z, w = z[keep], w[keep]
        cdf = np.cumsum(w)
        cdf /= cdf[-1]
        idx = np.searchsorted(cdf, rng.random(n), side="right")
        out = z[np.minimum(idx, len(z) - 1)]
    elif isinstance(measure, PowerLawDensity):
        lo, hi = max(lo, 0.0), min(hi, measure.z_max)
        out = _power_inverse(rng.random(n), measure.exponent, lo, hi)
    elif isinstance(measure, TemperedPowerLaw):
        out = _sample_tempered(measure, max(lo, 0.0), hi, rng, n)
    else:
        raise MeasureError(f"unsupported measure variant {type(measure).__name__}")
    if size is None:
        return float(out[0])
    return out.reshape(size)


def _sample_tempered(measure: TemperedPowerLaw, lo, hi, rng, n):
    p, theta = measure.exponent, measure.tempering
    out = np.empty(n)
    filled = 0
    while filled < n:
        k = max(16, 2 * (n - filled))
        if p > -1.0:
            z = rng.gamma(p + 1.0, 1.0 / theta, size=k)
            acc = (z > lo) & (z <= hi)
        elif math.isfinite(hi) or p < -1.0:
            # lo > 0 here, otherwise the mass would be infinite
            z = _power_inverse(rng.random(k), p, lo, hi)
            acc = rng.random(k) < np.exp(-theta * (z - lo))
        else:
            z = lo + rng.exponential(1.0 / theta, size=k)
            acc = rng.random(k) < lo / z
        z = z[acc][: n - filled]
        out[filled : filled + len(z)] = z
        filled += len(z)
    return out
