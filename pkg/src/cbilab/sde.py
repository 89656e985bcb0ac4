"""Euler simulation of CBI, nonlinear-branching (CNBI) and random-environment (CBIRE) equations.

Every path is driven by its own set of random streams derived from
``(master_seed, path_index, tag)``.  A coupled ensemble advances two initial
states through the same streams: the Gaussian increment is shared, and jump
counts are Poisson quantiles of a shared uniform evaluated at each member's
own rate, so the member with the smaller rate accepts a prefix of the other's
jump marks.
"""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

from . import _kernels as K
from .errors import ConditionError, ConfigError, MeasureError
from .flow import EnvironmentPath
from .mechanisms import (
    CbiParams,
    FiniteAtoms,
    LevyMeasure,
    PowerLawDensity,
    TemperedPowerLaw,
    ZeroMeasure,
    levy_integral,
    measure_condition,
    measure_from_dict,
    total_mass,
)

logger = logging.getLogger(__name__)

THREADS_ENV = "CBILAB_THREADS"
BLOCK = 256


# ---------------------------------------------------------------------------
# model description
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NonlinearRates:
    """State-dependent rates ``γ₀`` (drift), ``γ₁`` (diffusion variance), ``γ₂`` (branching intensity).

    ``γ₀`` is affine ``beta - b x`` unless ``table`` is given, in which case it is
    the piecewise-linear interpolant of the table, extended linearly.
    ``γ₁ = c1 x^alpha`` and ``γ₂ = c2 x^delta`` with exponents in ``[1, 2]``.
    """

    beta: float = 0.0
    b: float = 0.0
    alpha: float = 1.0
    delta: float = 1.0
    c1: float = 1.0
    c2: float = 1.0
    table: Optional[Tuple[Tuple[float, float], ...]] = None

    def __post_init__(self):
        if self.table is not None:
            tab = tuple((float(a), float(v)) for a, v in self.table)
            xs = [a for a, _ in tab]
            if len(tab) < 2 or any(b2 <= a2 for a2, b2 in zip(xs, xs[1:])):
                raise ConfigError("gamma0 table needs >= 2 strictly increasing abscissae")
            object.__setattr__(self, "table", tab)
        for name in ("alpha", "delta"):
            e = getattr(self, name)
            if not 1.0 <= e <= 2.0:
                raise ConditionError("rate exponents", f"{name}={e} outside [1, 2]")
        if self.c1 < 0 or self.c2 < 0:
            raise ConditionError("rate positivity", "γ₁ and γ₂ coefficients must be >= 0")
        if self.gamma0(0.0) < 0:
            raise ConditionError("boundary", "γ₀(0) must be >= 0")

    def gamma0(self, x):
        if self.table is None:
            return self.beta - self.b * x
        xs = np.array([a for a, _ in self.table])
        ys = np.array([v for _, v in self.table])
        return K.gamma0(float(x), np.array([0.0] * K.P_TABLE + [1.0]), xs, ys)

    def gamma1(self, x):
        return self.c1 * x**self.alpha if x > 0 else 0.0

    def gamma2(self, x):
        return self.c2 * x**self.delta if x > 0 else 0.0

    @property
    def dissipativity(self) -> float:
        """Largest ``A`` with ``γ₀(y) - γ₀(x) <= -A (y - x)`` for ``x <= y``."""
        if self.table is None:
            return self.b
        xs = np.array([a for a, _ in self.table])
        ys = np.array([v for _, v in self.table])
        return float(-np.max(np.diff(ys) / np.diff(xs)))

    @property
    def growth_exponent(self) -> float:
        return max(self.alpha, self.delta)

    def to_dict(self) -> dict:
        out = {"alpha": self.alpha, "delta": self.delta, "c1": self.c1, "c2": self.c2}
        if self.table is None:
            out.update(beta=self.beta, b=self.b)
        else:
            out["table"] = [list(r) for r in self.table]
        return out


def _check_env_measure(mu: LevyMeasure):
    if not isinstance(mu, (FiniteAtoms, ZeroMeasure)):
        raise MeasureError("environment jump measures must be finite atoms or zero")


@dataclass(frozen=True)
class EnvironmentParams:
    b_E: float = 0.0
    sigma_E: float = 0.0
    mu_E: LevyMeasure = field(default_factory=ZeroMeasure)

    def __post_init__(self):
        if self.sigma_E < 0:
            raise ConditionError("admissibility", "sigma_E must be >= 0")
        _check_env_measure(self.mu_E)

    def _small(self, f):
        return levy_integral(self.mu_E, f, (-1.0, 1.0)) + sum(
            w * f(z) for z, w in getattr(self.mu_E, "atoms", ()) if z == -1.0
        )

    def _large(self, f):
        return sum(w * f(z) for z, w in getattr(self.mu_E, "atoms", ()) if abs(z) > 1.0)

    @property
    def a_E(self) -> float:
        """Drift of ``ξ``: ``b_E - σ_E²/2 - ∫_{[-1,1]} (e^z - 1 - z) μ_E(dz)``."""
        return (
            self.b_E
            - 0.5 * self.sigma_E**2
            - self._small(lambda z: math.expm1(z) - z)
        )

    @property
    def mean_Z1(self) -> float:
        """``E[Z_1] = b_E + ∫_{|z|>1} (e^z - 1) μ_E(dz)``."""
        return self.b_E + self._large(math.expm1)

    def to_dict(self) -> dict:
        return {"b_E": self.b_E, "sigma_E": self.sigma_E, "mu_E": self.mu_E.to_dict()}


class ModelSpec:
    """Common interface: ``kind``, ``dissipativity_rate`` and ``to_dict``."""

    kind = ""

    @property
    def dissipativity_rate(self) -> float:
        raise NotImplementedError

    def rates(self) -> NonlinearRates:
        raise NotImplementedError


@dataclass(frozen=True)
class CbiModel(ModelSpec):
    params: CbiParams
    kind = "cbi"

    @property
    def dissipativity_rate(self) -> float:
        return self.params.b

    @property
    def m(self):
        return self.params.m

    @property
    def nu(self):
        return self.params.nu

    def rates(self) -> NonlinearRates:
        p = self.params
        return NonlinearRates(beta=p.beta, b=p.b, c1=p.sigma2, c2=1.0)

    def to_dict(self) -> dict:
        return {"kind": self.kind, **self.params.to_dict()}


@dataclass(frozen=True)
class CnbiModel(ModelSpec):
    gammas: NonlinearRates
    m: LevyMeasure = field(default_factory=ZeroMeasure)
    nu: LevyMeasure = field(default_factory=ZeroMeasure)
    kind = "cnbi"

    def __post_init__(self):
        cond = measure_condition(self.m, self.nu)
        if not cond:
            raise ConditionError("measure condition", f"{cond.reason} fails integrability")

    @property
    def dissipativity_rate(self) -> float:
        return self.gammas.dissipativity

    def rates(self) -> NonlinearRates:
        return self.gammas

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "rates": self.gammas.to_dict(),
            "m": self.m.to_dict(),
            "nu": self.nu.to_dict(),
        }


@dataclass(frozen=True)
class CbireModel(ModelSpec):
    params: CbiParams
    env: EnvironmentParams
    kind = "cbire"

    @property
    def dissipativity_rate(self) -> float:
        return self.params.b - self.env.mean_Z1

    @property
    def m(self):
        return self.params.m

    @property
    def nu(self):
        return self.params.nu

    def rates(self) -> NonlinearRates:
        p = self.params
        return NonlinearRates(beta=p.beta, b=p.b, c1=p.sigma2, c2=1.0)

    def to_dict(self) -> dict:
        return {"kind": self.kind, **self.params.to_dict(), "env": self.env.to_dict()}


def model_from_dict(d: dict) -> ModelSpec:
    kind = d.get("kind", "cbi")
    if kind == "cnbi":
        r = dict(d["rates"])
        if "table" in r:
            r["table"] = tuple(tuple(row) for row in r["table"])
        return CnbiModel(
            NonlinearRates(**r), measure_from_dict(d["m"]), measure_from_dict(d["nu"])
        )
    params = CbiParams(
        float(d["beta"]),
        float(d["b"]),
        float(d["sigma"]),
        measure_from_dict(d["m"]),
        measure_from_dict(d["nu"]),
    )
    if kind == "cbi":
        return CbiModel(params)
    if kind == "cbire":
        e = d["env"]
        return CbireModel(
            params, EnvironmentParams(float(e["b_E"]), float(e["sigma_E"]), measure_from_dict(e["mu_E"]))
        )
    raise ConfigError(f"unknown model kind {kind!r}", field="model.kind")


# ---------------------------------------------------------------------------
# simulation configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SimConfig:
    """Step size, horizon, jump truncation, seeding and output grid.

    ``record_grid`` defaults to ``record_every``-spaced times (or every step).
    Every record time must be an integer multiple of ``dt``.
    """

    dt: float = 1e-3
    horizon: float = 1.0
    jump_cutoff: float = 1e-3
    master_seed: int = 0
    n_paths: int = 1000
    record_grid: Optional[Tuple[float, ...]] = None
    record_every: Optional[float] = None

    def __post_init__(self):
        if not self.dt > 0:
            raise ConfigError("dt must be positive", field="dt")
        if not self.horizon > 0:
            raise ConfigError("horizon must be positive", field="horizon")
        if not self.jump_cutoff >= 0:
            raise ConfigError("jump_cutoff must be >= 0", field="jump_cutoff")
        if self.n_paths < 1:
            raise ConfigError("n_paths must be >= 1", field="n_paths")
        if not 0 <= self.master_seed < 2**64:
            raise ConfigError("master_seed must fit in 64 bits", field="master_seed")
        if self.record_grid is not None:
            object.__setattr__(self, "record_grid", tuple(float(t) for t in self.record_grid))
        self.record_steps()  # validates the grid

    @property
    def n_steps(self) -> int:
        n = round(self.horizon / self.dt)
        if abs(n * self.dt - self.horizon) > 1e-9 * self.horizon:
            raise ConfigError("horizon must be a multiple of dt", field="horizon")
        return int(n)

    def record_steps(self) -> np.ndarray:
        n = self.n_steps
        if self.record_grid is None:
            every = self.record_every or self.dt
            stride = round(every / self.dt)
            if stride < 1 or abs(stride * self.dt - every) > 1e-9 * every:
                raise ConfigError("record_every must be a multiple of dt", field="record_every")
            steps = np.arange(0, n + 1, stride, dtype=np.int64)
            if steps[-1] != n:
                steps = np.append(steps, n)
            return steps
        times = np.asarray(self.record_grid, dtype=float)
        steps = np.rint(times / self.dt).astype(np.int64)
        if np.any(np.abs(steps * self.dt - times) > 1e-9 * np.maximum(times, self.dt)):
            raise ConfigError("record times must be multiples of dt", field="record_grid")
        if np.any(np.diff(steps) <= 0):
            raise ConfigError("record times must be strictly increasing", field="record_grid")
        if steps[0] < 0 or steps[-1] > n:
            raise ConfigError("record times must lie in [0, horizon]", field="record_grid")
        return steps

    def record_times(self) -> np.ndarray:
        return self.record_steps() * self.dt

    def replace(self, **kw) -> "SimConfig":
        d = {f: getattr(self, f) for f in self.__dataclass_fields__}
        d.update(kw)
        return SimConfig(**d)


# ---------------------------------------------------------------------------
# compilation of a model into kernel arrays
# ---------------------------------------------------------------------------


def _infinite_activity(mu: LevyMeasure) -> bool:
    if isinstance(mu, (FiniteAtoms, ZeroMeasure)):
        return False
    return not math.isfinite(total_mass(mu))


def _mark_arrays(mu: LevyMeasure, lo: float):
    """Kernel encoding of ``mu`` restricted to ``(lo, inf)``."""
    empty = np.zeros(0)
    if isinstance(mu, ZeroMeasure) or mu.is_zero():
        return K.MARK_NONE, np.zeros(4), empty, empty
    if isinstance(mu, FiniteAtoms):
        z, w = mu.positions, mu.masses
        keep = z > lo
        z, w = z[keep], w[keep]
        if z.size == 0:
            return K.MARK_NONE, np.zeros(4), empty, empty
        cdf = np.cumsum(w) / w.sum()
        cdf[-1] = 1.0
        return K.MARK_ATOMS, np.zeros(4), z, cdf
    if isinstance(mu, PowerLawDensity):
        return K.MARK_POWER, np.array([mu.exponent, lo, mu.z_max, 0.0]), empty, empty
    if isinstance(mu, TemperedPowerLaw):
        return K.MARK_TEMPERED, np.array([mu.exponent, mu.tempering, lo, math.inf]), empty, empty
    raise MeasureError(f"unsupported measure variant {type(mu).__name__}")


@dataclass
class _Compiled:
    par: np.ndarray
    tx: np.ndarray
    ty: np.ndarray
    branch: tuple
    immig: tuple
    env: tuple


def compile_model(model: ModelSpec, jump_cutoff: float) -> _Compiled:
    rates = model.rates()
    par = np.zeros(K.N_PAR)
    par[K.P_BETA] = rates.beta
    par[K.P_B] = rates.b
    par[K.P_C1] = rates.c1
    par[K.P_ALPHA] = rates.alpha
    par[K.P_C2] = rates.c2
    par[K.P_DELTA] = rates.delta
    if rates.table is not None:
        par[K.P_TABLE] = 1.0
        tx = np.array([a for a, _ in rates.table])
        ty = np.array([v for _, v in rates.table])
    else:
        tx = ty = np.zeros(2)

    m, nu = model.m, model.nu
    eps_m = 0.0
    if _infinite_activity(m):
        if not jump_cutoff > 0:
            raise ConfigError("jump_cutoff must be > 0 for infinite-activity m", field="jump_cutoff")
        eps_m = jump_cutoff
        par[K.P_S2] = levy_integral(m, lambda z: z * z, (0.0, eps_m))
    par[K.P_COMP] = levy_integral(m, lambda z: z, (eps_m, math.inf))
    par[K.P_MB] = total_mass(m, (eps_m, math.inf))
    if not math.isfinite(par[K.P_COMP]):
        raise ConditionError("measure condition", "∫_{z>1} z m(dz) must be finite")

    eps_n = 0.0
    if _infinite_activity(nu):
        if not jump_cutoff > 0:
            raise ConfigError("jump_cutoff must be > 0 for infinite-activity nu", field="jump_cutoff")
        eps_n = jump_cutoff
        par[K.P_IMM_DRIFT] = levy_integral(nu, lambda z: z, (0.0, eps_n))
    par[K.P_MI] = total_mass(nu, (eps_n, math.inf))

    ez = ecdf = np.zeros(0)
    if isinstance(model, CbireModel):
        env = model.env
        par[K.P_ENV] = 1.0
        par[K.P_SIGMA_E] = env.sigma_E
        par[K.P_ENV_DRIFT] = env.b_E - env._small(math.expm1)
        par[K.P_XI_DRIFT] = env.a_E - env._small(lambda z: z)
        if isinstance(env.mu_E, FiniteAtoms) and not env.mu_E.is_zero():
            ez = env.mu_E.positions
            w = env.mu_E.masses
            par[K.P_ME] = float(w.sum())
            ecdf = np.cumsum(w) / w.sum()
            ecdf[-1] = 1.0
    return _Compiled(
        par, tx, ty, _mark_arrays(m, eps_m), _mark_arrays(nu, eps_n), (ez, ecdf)
    )


# ---------------------------------------------------------------------------
# results
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Trajectory:
    times: np.ndarray
    values: np.ndarray
    martingale: np.ndarray
    failed_at: Optional[float] = None

    @property
    def failed(self) -> bool:
        return self.failed_at is not None


@dataclass(frozen=True)
class Ensemble:
    """``values[i, j]`` is path ``i`` at ``times[j]``."""

    x0: float
    times: np.ndarray
    values: np.ndarray
    martingale: np.ndarray
    failures: np.ndarray  # failure time per path, nan when the path survived
    master_seed: int

    @property
    def endpoint(self) -> np.ndarray:
        return self.values[:, -1]

    def at(self, t: float) -> np.ndarray:
        return self.values[:, _time_index(self.times, t)]

    def martingale_check(self) -> np.ndarray:
        """``|mean| / stderr`` of the compensated-noise part at each record time."""
        return _martingale_z(self.martingale)


@dataclass(frozen=True)
class CoupledEnsemble:
    """Pairs ``(X, Y)`` from ``x0 <= y0`` driven by identical noise."""

    x0: float
    y0: float
    times: np.ndarray
    X: np.ndarray
    Y: np.ndarray
    mart_X: np.ndarray
    mart_Y: np.ndarray
    noise_digest: np.ndarray  # shape (n_paths, 2); columns equal by construction
    failures: np.ndarray
    master_seed: int

    @property
    def shared_noise(self) -> bool:
        return bool(np.array_equal(self.noise_digest[:, 0], self.noise_digest[:, 1]))

    @property
    def ordering_fraction(self) -> float:
        """Fraction of (path, time) pairs with ``X <= Y``."""
        ok = np.isfinite(self.X) & np.isfinite(self.Y)
        return float(np.mean((self.X <= self.Y)[ok]))

    def gap(self) -> np.ndarray:
        return np.abs(self.X - self.Y)

    def mean_gap(self) -> Tuple[np.ndarray, np.ndarray]:
        g = self.gap()
        n = g.shape[0]
        return g.mean(axis=0), g.std(axis=0, ddof=1) / math.sqrt(n)

    def at(self, t: float):
        j = _time_index(self.times, t)
        return self.X[:, j], self.Y[:, j]

    def martingale_check(self) -> np.ndarray:
        return np.maximum(_martingale_z(self.mart_X), _martingale_z(self.mart_Y))


def _martingale_z(mart):
    n = mart.shape[0]
    mean = mart.mean(axis=0)
    se = mart.std(axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.full(mart.shape[1], np.inf)
    with np.errstate(invalid="ignore", divide="ignore"):
        z = np.where(se > 0, np.abs(mean) / se, np.where(mean == 0, 0.0, np.inf))
    return z


def _time_index(times, t):
    j = int(np.argmin(np.abs(times - t)))
    if abs(times[j] - t) > 1e-9 * max(1.0, abs(t)):
        raise ValueError(f"t={t} is not on the record grid")
    return j


# ---------------------------------------------------------------------------
# drivers
# ---------------------------------------------------------------------------


def default_threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "")))
    except ValueError:
        return os.cpu_count() or 1


def _run(model, x0s, config: SimConfig, path_ids, threads=None):
    comp = compile_model(model, config.jump_cutoff)
    steps = config.record_steps()
    x0s = np.asarray(x0s, dtype=float)
    if np.any(x0s < 0) or not np.all(np.isfinite(x0s)):
        raise ConfigError("initial states must be finite and >= 0", field="x0")
    path_ids = np.asarray(path_ids, dtype=np.int64)
    P, Km, R = path_ids.size, x0s.size, steps.size
    out = np.empty((P, Km, R))
    mart = np.empty((P, Km, R))
    fail = np.empty((P, Km), dtype=np.int64)
    digest = np.empty((P, Km))
    bk, bpar, bz, bcdf = comp.branch
    ik, ipar, iz, icdf = comp.immig
    ez, ecdf = comp.env

    def work(lo, hi):
        K.simulate_block(
            path_ids[lo:hi], np.uint64(config.master_seed), x0s, config.dt, config.n_steps, steps,
            comp.par, comp.tx, comp.ty,
            bk, bpar, bz, bcdf,
            ik, ipar, iz, icdf,
            ez, ecdf,
            out[lo:hi], mart[lo:hi], fail[lo:hi], digest[lo:hi],
        )

    blocks = [(lo, min(lo + BLOCK, P)) for lo in range(0, P, BLOCK)]
    n_threads = threads or default_threads()
    if n_threads <= 1 or len(blocks) == 1:
        for lo, hi in blocks:
            work(lo, hi)
    else:
        with ThreadPoolExecutor(n_threads) as pool:
            list(pool.map(lambda b: work(*b), blocks))
    fail_t = np.where(fail >= 0, fail * config.dt, np.nan)
    if np.any(fail >= 0):
        logger.warning("%d trajectories overflowed", int(np.sum(fail >= 0)))
    return steps * config.dt, out, mart, fail_t, digest


def simulate_path(model: ModelSpec, x0: float, config: SimConfig, path_index: int = 0) -> Trajectory:
    """One trajectory, deterministic in ``(config.master_seed, path_index)``."""
    times, out, mart, fail, _ = _run(model, [x0], config, [path_index], threads=1)
    f = fail[0, 0]
    return Trajectory(times, out[0, 0], mart[0, 0], None if np.isnan(f) else float(f))


def simulate_ensemble(model: ModelSpec, x0: float, config: SimConfig, threads=None) -> Ensemble:
    """``config.n_paths`` independent trajectories from ``x0``."""
    times, out, mart, fail, _ = _run(model, [x0], config, np.arange(config.n_paths), threads)
    return Ensemble(float(x0), times, out[:, 0], mart[:, 0], fail[:, 0], config.master_seed)


def simulate_coupled(
    model: ModelSpec, x0: float, y0: float, config: SimConfig, threads=None
) -> CoupledEnsemble:
    """Pairs from ``min(x0, y0)`` and ``max(x0, y0)`` sharing every random draw."""
    x0, y0 = sorted((float(x0), float(y0)))
    times, out, mart, fail, digest = _run(
        model, [x0, y0], config, np.arange(config.n_paths), threads
    )
    return CoupledEnsemble(
        x0, y0, times, out[:, 0], out[:, 1], mart[:, 0], mart[:, 1], digest, fail,
        config.master_seed,
    )


def simulate_environment(env: EnvironmentParams, config: SimConfig, path_index: int = 0) -> EnvironmentPath:
    """Paths of ``ξ`` and ``Z`` built from one Brownian motion and one Poisson measure.

    Uses the stream a CBIRE simulation with the same seed and path index reads,
    so the returned environment is the one that drove that trajectory.
    """
    model = CbireModel(CbiParams(0.0, 0.0, 0.0), env)
    comp = compile_model(model, config.jump_cutoff)
    steps = config.record_steps()
    xi = np.empty((1, steps.size))
    z = np.empty((1, steps.size))
    K.environment_block(
        np.array([path_index], dtype=np.int64), np.uint64(config.master_seed), config.dt,
        config.n_steps, steps, comp.par, comp.env[0], comp.env[1], xi, z,
    )
    times = steps * config.dt
    return EnvironmentPath(times, xi[0], z[0])


# ---------------------------------------------------------------------------
# generator
# ---------------------------------------------------------------------------


def _test_function(name: str, lam: Optional[float]):
    """Return ``(V, V', V'', jump_fn)`` where ``jump_fn(x, z)`` is ``V(x+z) - V(x)``."""
    if name == "log1p":
        return (
            math.log1p,
            lambda x: 1.0 / (1.0 + x),
            lambda x: -1.0 / (1.0 + x) ** 2,
            lambda x, z: math.log1p(z / (1.0 + x)),
        )
    if name == "power":
        if lam is None or not 1.0 <= lam <= 2.0:
            raise ValueError("power test function needs lambda in [1, 2]")
        return (
            lambda x: (1.0 + x) ** lam,
            lambda x: lam * (1.0 + x) ** (lam - 1.0),
            lambda x: lam * (lam - 1.0) * (1.0 + x) ** (lam - 2.0),
            lambda x, z: (1.0 + x) ** lam * math.expm1(lam * math.log1p(z / (1.0 + x))),
        )
    if name == "exp":
        if lam is None or lam < 0:
            raise ValueError("exp test function needs lambda >= 0")
        return (
            lambda x: math.exp(-lam * x),
            lambda x: -lam * math.exp(-lam * x),
            lambda x: lam * lam * math.exp(-lam * x),
            lambda x, z: math.exp(-lam * x) * math.expm1(-lam * z),
        )
    raise ValueError(f"unknown test function {name!r}")


def generator_apply(model: ModelSpec, test_fn: str, x: float, lam: Optional[float] = None) -> float:
    """Evaluate ``L V(x)`` for ``V`` in {``log1p``, ``power`` (``(1+x)^λ``), ``exp`` (``e^{-λx}``)}.

    Jump terms use ``V(x+z) - V(x) - z V'(x)`` (branching) and ``V(x+z) - V(x)``
    (immigration), integrated with :func:`levy_integral`.

    Raises
    ------
    ConditionError
        When a jump integral diverges; the message names the missing moment.
    """
    if x < 0:
        raise ValueError("x must be >= 0")
    V, dV, d2V, inc = _test_function(test_fn, lam)
    rates = model.rates()
    out = rates.gamma0(x) * dV(x) + 0.5 * rates.gamma1(x) * d2V(x)

    g2 = rates.gamma2(x)
    if g2 > 0 and not model.m.is_zero():
        dv = dV(x)

        def branch(z):
            return inc(x, z) - z * dv

        jm = levy_integral(model.m, branch)
        if not math.isfinite(jm):
            raise ConditionError("branching moment", f"jump integral of {test_fn} diverges")
        out += g2 * jm
    if not model.nu.is_zero():
        jn = levy_integral(model.nu, lambda z: inc(x, z))
        if not math.isfinite(jn):
            need = {"log1p": "log-moment", "power": f"{lam}-moment", "exp": "mass"}[test_fn]
            raise ConditionError(f"immigration {need}", f"∫ (V(x+z) - V(x)) ν(dz) diverges")
        out += jn
    if isinstance(model, CbireModel):
        env = model.env
        out += env.b_E * x * dV(x) + 0.5 * env.sigma_E**2 * x * x * d2V(x)
        for z, w in getattr(env.mu_E, "atoms", ()):
            jump = V(x * math.exp(z)) - V(x)
            if abs(z) <= 1.0:
                jump -= x * math.expm1(z) * dV(x)
            out += w * jump
    return out


def log1p_generator_bound(model: ModelSpec) -> float:
    """Constant dominating ``L log(1+x)`` for a CBI model, assembled term by term.

    ``β + |b| + ∫_{(0,1]} z ν + ∫_{z>1} log(1+z) ν + ∫_{z>1} z m``.
    """
    rates = model.rates()
    if rates.table is not None:
        raise ValueError("bound assembled for affine drift only")
    c = rates.beta + abs(rates.b)
    c += levy_integral(model.nu, lambda z: z, (0.0, 1.0))
    c += levy_integral(model.nu, math.log1p, (1.0, math.inf))
    c += rates.c2 * levy_integral(model.m, lambda z: z, (1.0, math.inf)) if rates.delta == 1.0 else math.inf
    return c
