"""Built-in scenarios and the experiment runners behind ``cbilab run``."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import platform
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from . import __version__
from .config import Scenario, model_to_config, sim_to_config
from .errors import CbiLabError, ConditionError
from .flow import (
    INF,
    EnvironmentPath,
    fclt_gamma2,
    fclt_gamma2_reference,
    invariant_laplace,
    solve_v_env,
    transition_laplace,
    vbar,
)
from .mechanisms import CbiParams, FiniteAtoms, ZeroMeasure, check_conditions
from .metrics import (
    INCONCLUSIVE,
    NO_CONTRACTION,
    PASS,
    fclt_variance_empirical,
    fit_decay,
    time_average,
    tv_histogram,
    w1_empirical,
    wlog_coupled,
)
from .sde import (
    CbiModel,
    CbireModel,
    CnbiModel,
    EnvironmentParams,
    ModelSpec,
    NonlinearRates,
    SimConfig,
    generator_apply,
    log1p_generator_bound,
    simulate_coupled,
    simulate_ensemble,
    simulate_environment,
    simulate_path,
)

logger = logging.getLogger(__name__)

FAIL = "fail"
REFUSED = "refused"

Row = Tuple[float, float, float, float]


@dataclass
class ExperimentResult:
    rows: List[Row]
    verdicts: Dict[str, str]
    summary: Dict[str, object] = field(default_factory=dict)

    @property
    def overall(self) -> str:
        vals = list(self.verdicts.values())
        if all(v == PASS for v in vals):
            return PASS
        if any(v not in (PASS, INCONCLUSIVE) for v in vals):
            return FAIL
        return INCONCLUSIVE

    @property
    def exit_code(self) -> int:
        return {PASS: 0, INCONCLUSIVE: 2}.get(self.overall, 1)


# ---------------------------------------------------------------------------
# catalog
# ---------------------------------------------------------------------------

CIR = CbiParams.from_sigma2(1.0, 1.0, 2.0)
CIR_MODEL = CbiModel(CIR)
DECAY_GRID = tuple(np.round(np.arange(0.25, 3.0001, 0.25), 10))
TV_GRID = tuple(np.round(np.arange(0.5, 4.0001, 0.5), 10))


def _builtin() -> List[Scenario]:
    cir_tv = CbiModel(CbiParams.from_sigma2(1.0, 1.0, 2.0, nu=FiniteAtoms([(1.0, 1.0)])))
    cnbi = CnbiModel(
        NonlinearRates(beta=1.0, b=1.0, alpha=1.5, delta=1.2), FiniteAtoms([(0.5, 1.0)])
    )
    cbire = CbireModel(CIR, EnvironmentParams(0.0, 0.3))
    cbire_hot = CbireModel(CIR, EnvironmentParams(1.5, 0.3))
    jumpy = CbiModel(
        CbiParams(1.0, 1.0, math.sqrt(2.0), FiniteAtoms([(2.0, 1.0)]), FiniteAtoms([(math.e, 1.0)]))
    )
    decay = SimConfig(dt=1e-3, horizon=3.0, n_paths=10_000, master_seed=1, record_grid=DECAY_GRID)
    return [
        Scenario("cir-check", "mechanism-report", CIR_MODEL, SimConfig(),
                 description="integrability conditions, Grey's condition and invariant-law existence"),
        Scenario("cir-flow", "flow-eval", CIR_MODEL,
                 SimConfig(horizon=20.0), {"lambda": 1.0, "x": 0.0,
                                           "times": [0.5, 1.0, 2.0, 5.0, 10.0, 20.0]},
                 description="transition Laplace transform converging to the invariant transform"),
        Scenario("cir-w1", "w1-decay", CIR_MODEL, decay, {"x0": 0.0, "y0": 5.0},
                 description="W1 contraction at the dissipativity rate for a subcritical CBI process"),
        Scenario("cir-wlog", "wlog-decay", CIR_MODEL, decay, {"x0": 0.0, "y0": 5.0},
                 description="log-Wasserstein coupling bound for a CBI process"),
        Scenario("cir-tv", "tv-decay", cir_tv,
                 SimConfig(dt=1e-3, horizon=4.0, n_paths=100_000, master_seed=2, record_grid=TV_GRID),
                 {"x0": 0.0, "y0": 5.0},
                 description="total-variation decay under Grey's condition with jump immigration"),
        Scenario("cir-invariant", "invariant-convergence", CIR_MODEL,
                 SimConfig(dt=5e-3, horizon=10.0, n_paths=100_000, master_seed=3,
                           record_grid=(1.0, 2.0, 5.0, 10.0)),
                 {"x0": 0.0, "tolerance": 0.05},
                 description="weak convergence of the transition law to the invariant law"),
        Scenario("cir-slln", "slln", CIR_MODEL,
                 SimConfig(dt=1e-3, horizon=1000.0, n_paths=1, master_seed=4, record_every=1e-3),
                 {"observable": "exp", "lambda": 1.0},
                 description="strong law of large numbers for time averages"),
        Scenario("fclt-cir", "fclt", CIR_MODEL,
                 SimConfig(dt=1e-3, horizon=10_000.0, n_paths=1, master_seed=5, record_every=1e-2),
                 {"lambda": 1.0, "tolerance": 0.15},
                 description="functional central limit theorem for additive functionals"),
        Scenario("cnbi-w1", "w1-decay", cnbi, decay, {"x0": 0.0, "y0": 5.0},
                 description="W1 contraction for nonlinear branching with power-law rates"),
        Scenario("cbire-w1", "w1-decay", cbire, decay, {"x0": 0.0, "y0": 5.0},
                 description="W1 contraction for CBI in a Levy random environment"),
        Scenario("cbire-w1-supercritical", "w1-decay", cbire_hot, decay,
                 {"x0": 0.0, "y0": 5.0, "expect": "no-contraction"},
                 description="no contraction once the environment drift exceeds b"),
        Scenario("cbire-tv", "cbire-tv", cbire,
                 SimConfig(dt=1e-3, horizon=3.0, n_paths=50_000, master_seed=6, record_grid=TV_GRID[:6]),
                 {"x0": 0.0, "y0": 5.0, "env_paths": 100},
                 description="total-variation bound through the environment flow limit"),
        Scenario("lyapunov-log", "lyapunov-scan", jumpy, SimConfig(),
                 {"test_function": "log1p"},
                 description="log(1+x) Lyapunov bound for the CBI generator"),
        Scenario("lyapunov-power", "lyapunov-scan", cnbi, SimConfig(),
                 {"test_function": "power", "lambda": 1.5},
                 description="(1+x)^lambda Lyapunov bound for the nonlinear generator"),
    ]


def list_scenarios() -> List[Tuple[str, str, str]]:
    """``(name, experiment, description)`` in catalog order."""
    return [(s.name, s.experiment, s.description) for s in _builtin()]


def get_scenario(name: str) -> Scenario:
    for s in _builtin():
        if s.name == name:
            return s
    raise KeyError(f"no built-in scenario named {name!r}")


# ---------------------------------------------------------------------------
# preconditions
# ---------------------------------------------------------------------------


def _cbi_params(model: ModelSpec) -> CbiParams:
    if isinstance(model, (CbiModel, CbireModel)):
        return model.params
    raise ConditionError("model kind", "this experiment needs a CBI or CBIRE model")


def _require_dissipative(model: ModelSpec):
    a = model.dissipativity_rate
    if not a > 0:
        raise ConditionError(
            "dissipativity", f"the contraction rate A must be positive, got A={a:g}"
        )


def _require_log_moment(params: CbiParams):
    rep = check_conditions(params)
    if not math.isfinite(rep.log_moment):
        raise ConditionError("log-moment", "∫_{z>1} log z ν(dz) is infinite")
    return rep


def _require_grey(params: CbiParams):
    rep = check_conditions(params)
    if not rep.grey_holds:
        raise ConditionError("Grey's condition", f"status {rep.grey_status}")
    return rep


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------


def _exp_mechanism(sc: Scenario) -> ExperimentResult:
    params = _cbi_params(sc.model)
    rep = check_conditions(params)
    verdicts = {"invariant_law": PASS if rep.invariant_exists else FAIL}
    if params.b > 0:
        agree = rep.invariant_exists == math.isfinite(rep.log_moment)
        verdicts["log_moment_crosscheck"] = PASS if agree else FAIL
    return ExperimentResult([], verdicts, {"report": rep.to_dict()})


def _exp_flow(sc: Scenario) -> ExperimentResult:
    params = _cbi_params(sc.model)
    lam, x = float(sc.params["lambda"]), float(sc.params["x"])
    times = sc.params["times"] or list(sc.sim.record_times())
    try:
        limit = invariant_laplace(params, lam)
    except ConditionError:
        limit = math.nan
    rows = [(float(t), transition_laplace(params, x, float(t), lam), 0.0, limit) for t in times]
    ok = all(0.0 < r[1] <= 1.0 for r in rows)
    return ExperimentResult(rows, {"range": PASS if ok else FAIL},
                            {"invariant_laplace": limit})


def _exp_w1(sc: Scenario) -> ExperimentResult:
    expect = sc.params["expect"]
    if expect not in ("contraction", "no-contraction"):
        raise CbiLabError(f"expect must be contraction or no-contraction, got {expect!r}")
    A = sc.model.dissipativity_rate
    if expect == "contraction":
        _require_dissipative(sc.model)
    x0, y0 = float(sc.params["x0"]), float(sc.params["y0"])
    ce = simulate_coupled(sc.model, x0, y0, sc.sim)
    gap, se = ce.mean_gap()
    bound = abs(y0 - x0) * np.exp(-A * ce.times)
    rows = [(float(t), float(g), float(s), float(b)) for t, g, s, b in zip(ce.times, gap, se, bound)]
    keep = ce.times > 0
    lo, hi = sc.params["band"]
    target = A if A > 0 else abs(A) or 1.0
    fit = fit_decay(ce.times[keep], gap[keep], se[keep], target, band=(lo, hi))
    verdicts = {}
    if expect == "contraction":
        within = bool(np.all(gap <= bound + 3 * se))
        verdicts["gronwall_bound"] = PASS if within else FAIL
        verdicts["decay_rate"] = fit.verdict
    else:
        verdicts["no_contraction"] = PASS if fit.verdict == NO_CONTRACTION else FAIL
    verdicts["ordering"] = PASS if ce.ordering_fraction >= 0.99 else FAIL
    summary = {
        "dissipativity_rate": A,
        "fitted_rate": fit.fitted_rate,
        "rate_stderr": fit.rate_se,
        "fit_verdict": fit.verdict,
        "ordering_fraction": ce.ordering_fraction,
        "shared_noise": ce.shared_noise,
        "max_martingale_z": float(np.max(ce.martingale_check())),
    }
    return ExperimentResult(rows, verdicts, summary)


def _exp_wlog(sc: Scenario) -> ExperimentResult:
    params = _cbi_params(sc.model)
    _require_dissipative(sc.model)
    _require_log_moment(params)
    x0, y0 = float(sc.params["x0"]), float(sc.params["y0"])
    ce = simulate_coupled(sc.model, x0, y0, sc.sim)
    rows, ok = [], True
    for t in ce.times:
        val, se = wlog_coupled(ce, t)
        bound = math.log1p(math.exp(-params.b * t) * abs(y0 - x0))
        ok &= val <= bound + 3 * se
        rows.append((float(t), val, se, bound))
    return ExperimentResult(rows, {"log_bound": PASS if ok else FAIL})


def tv_series(model, x0, y0, sim: SimConfig):
    """TV estimates between independent ensembles started at ``x0`` and ``y0``."""
    ea = simulate_ensemble(model, x0, sim)
    eb = simulate_ensemble(model, y0, sim.replace(master_seed=(sim.master_seed + 0x5BD1E995) % 2**64))
    out = []
    for j, t in enumerate(ea.times):
        est = tv_histogram(ea.values[:, j], eb.values[:, j])
        out.append((float(t), est))
    return out


def _exp_tv(sc: Scenario) -> ExperimentResult:
    params = _cbi_params(sc.model)
    _require_dissipative(sc.model)
    _require_log_moment(params)
    _require_grey(params)
    x0, y0 = float(sc.params["x0"]), float(sc.params["y0"])
    series = tv_series(sc.model, x0, y0, sc.sim)
    rows = []
    for t, est in series:
        bound = 1.0 - math.exp(-abs(y0 - x0) * vbar(params, t)) if t > 0 else 1.0
        rows.append((t, est.value, est.null_bias, bound))
    arr = np.array([r for r in rows if r[0] > 0])
    lo, hi = sc.params["band"]
    fit = fit_decay(arr[:, 0], arr[:, 1], arr[:, 2], params.b, band=(lo, hi))
    return ExperimentResult(rows, {"decay_rate": fit.verdict},
                            {"fitted_rate": fit.fitted_rate, "rate_stderr": fit.rate_se,
                             "points_used": int(fit.used.sum())})


def _gamma_reference(params: CbiParams, n, seed):
    """Exact draws from the invariant Gamma law when there are no jumps."""
    if not (params.m.is_zero() and params.nu.is_zero() and params.sigma > 0 and params.b > 0):
        return None
    shape = 2.0 * params.beta / params.sigma2
    scale = params.sigma2 / (2.0 * params.b)
    return np.random.default_rng(seed).gamma(shape, scale, size=n)


def _exp_invariant(sc: Scenario) -> ExperimentResult:
    params = _cbi_params(sc.model)
    _require_dissipative(sc.model)
    ens = simulate_ensemble(sc.model, float(sc.params["x0"]), sc.sim)
    tol = float(sc.params["tolerance"])
    ref = _gamma_reference(params, sc.sim.n_paths, sc.sim.master_seed + 1)
    rows = []
    lams = [float(v) for v in sc.params["lambdas"]]
    target = {lam: invariant_laplace(params, lam) for lam in lams}
    for j, t in enumerate(ens.times):
        x = ens.values[:, j]
        if ref is not None:
            rows.append((float(t), w1_empirical(x, ref), math.nan, tol))
        else:
            gaps = [abs(np.mean(np.exp(-lam * x)) - target[lam]) for lam in lams]
            rows.append((float(t), float(max(gaps)), math.nan, tol))
    verdicts = {"final_distance": PASS if rows[-1][1] <= tol else FAIL}
    summary = {"final_distance": rows[-1][1]}
    if ref is not None:
        tv = tv_histogram(ens.endpoint, ref)
        verdicts["final_tv"] = PASS if tv.value <= tol else FAIL
        summary.update(final_tv=tv.value, tv_bias_flag=tv.bias_flag)
    return ExperimentResult(rows, verdicts, summary)


def _observable_target(params: CbiParams, obs: str, lam: float):
    if obs == "exp":
        return ("exp", lam), invariant_laplace(params, lam)
    if obs == "identity":
        from .flow import first_moment

        return "identity", first_moment(params, 0.0, 1e6)
    if obs == "log1p":
        return "log1p", math.nan
    raise CbiLabError(f"unknown observable {obs!r}")


def _exp_slln(sc: Scenario) -> ExperimentResult:
    params = _cbi_params(sc.model)
    _require_dissipative(sc.model)
    _require_log_moment(params)
    f, target = _observable_target(params, sc.params["observable"], float(sc.params["lambda"]))
    tr = simulate_path(sc.model, float(sc.params["x0"]), sc.sim)
    ta = time_average(tr.times, tr.values, f, int(sc.params["batches"]), rate=params.b)
    rows = []
    n = tr.times.size
    for frac in (0.125, 0.25, 0.5, 1.0):
        k = max(2, int(round(frac * (n - 1))) + 1)
        sub = time_average(tr.times[:k], tr.values[:k], f, int(sc.params["batches"]))
        rows.append((float(tr.times[k - 1]), sub.value, sub.stderr, target))
    if math.isnan(target):
        verdict = INCONCLUSIVE
    else:
        verdict = PASS if abs(ta.value - target) <= 3 * ta.stderr else FAIL
    return ExperimentResult(rows, {"time_average": verdict},
                            {"value": ta.value, "stderr": ta.stderr, "target": target})


def _exp_fclt(sc: Scenario) -> ExperimentResult:
    params = _cbi_params(sc.model)
    _require_dissipative(sc.model)
    lam = float(sc.params["lambda"])
    analytic = fclt_gamma2(params, lam)
    tr = simulate_path(sc.model, float(sc.params["x0"]), sc.sim)
    kw = {k: sc.params[k] for k in ("batch_length", "burn_in") if sc.params[k] is not None}
    rows = []
    n = tr.times.size
    for frac in (0.125, 0.25, 0.5, 1.0):
        k = int(round(frac * (n - 1))) + 1
        est = fclt_variance_empirical(tr.times[:k], tr.values[:k], params, lam, **kw)
        rows.append((float(tr.times[k - 1]), est.variance, est.stderr, analytic))
    final = rows[-1][1]
    tol = float(sc.params["tolerance"])
    if analytic == 0.0:
        ok = final == 0.0
    else:
        ok = abs(final - analytic) <= tol * analytic
    summary = {
        "gamma2_analytic": analytic,
        "gamma2_empirical": final,
        "gamma2_empirical_stderr": rows[-1][2],
        "relative_error": (final - analytic) / analytic if analytic else math.nan,
        "alternative_closed_form": fclt_gamma2_reference(params, lam),
    }
    return ExperimentResult(rows, {"gamma2": PASS if ok else FAIL}, summary)


def _exp_cbire_tv(sc: Scenario) -> ExperimentResult:
    if not isinstance(sc.model, CbireModel):
        raise ConditionError("model kind", "cbire-tv needs a CBIRE model")
    params = sc.model.params
    _require_grey(params)
    _require_dissipative(sc.model)
    x0, y0 = float(sc.params["x0"]), float(sc.params["y0"])
    series = tv_series(sc.model, x0, y0, sc.sim)
    n_env = int(sc.params["env_paths"])
    env_sim = sc.sim.replace(record_grid=None, record_every=sc.sim.dt, n_paths=1)
    paths = [simulate_environment(sc.model.env, env_sim, i) for i in range(n_env)]
    rows, ok, mean_vbar = [], True, {}
    for t, est in series:
        if t == 0:
            rows.append((t, est.value, est.null_bias, 1.0))
            continue
        vb = np.array([solve_v_env(params, p, INF, t).vbar for p in paths])
        mean_vbar[t] = float(vb.mean())
        # quenched coupling bound 1 - exp(-|x - y| v̄), averaged over environments
        bound = float(np.mean(-np.expm1(-abs(y0 - x0) * vb)))
        ok &= est.value <= bound + 3 * est.null_bias
        rows.append((t, est.value, est.null_bias, bound))
    return ExperimentResult(rows, {"tv_bound": PASS if ok else FAIL},
                            {"mean_vbar": {repr(k): v for k, v in mean_vbar.items()}})


def lyapunov_scan(model: ModelSpec, test_function: str, lam=None, x_max=1e6, points=200):
    """Evaluate ``LV`` (or ``LV/V`` for powers) on ``{0} ∪ logspace(-3, log10 x_max)``."""
    xs = np.concatenate([[0.0], np.logspace(-3, math.log10(x_max), points - 1)])
    vals = []
    for x in xs:
        lv = generator_apply(model, test_function, float(x), lam)
        if test_function == "power":
            lv /= (1.0 + x) ** lam
        vals.append(lv)
    return xs, np.array(vals)


def _exp_lyapunov(sc: Scenario) -> ExperimentResult:
    tf = sc.params["test_function"]
    lam = sc.params["lambda"]
    lam = None if lam is None else float(lam)
    xs, vals = lyapunov_scan(sc.model, tf, lam, float(sc.params["x_max"]), int(sc.params["points"]))
    certified = float(np.max(vals))
    finite = bool(np.all(np.isfinite(vals)))
    verdicts = {"finite": PASS if finite else FAIL}
    bound = certified
    if tf == "log1p" and sc.model.rates().table is None and sc.model.rates().delta == 1.0:
        bound = log1p_generator_bound(sc.model)
        verdicts["assembled_bound"] = PASS if certified <= bound else FAIL
    rows = [(float(x), float(v), 0.0, bound) for x, v in zip(xs, vals)]
    return ExperimentResult(rows, verdicts, {"grid_constant": certified, "assembled_bound": bound})


RUNNERS: Dict[str, Callable[[Scenario], ExperimentResult]] = {
    "mechanism-report": _exp_mechanism,
    "flow-eval": _exp_flow,
    "w1-decay": _exp_w1,
    "wlog-decay": _exp_wlog,
    "tv-decay": _exp_tv,
    "invariant-convergence": _exp_invariant,
    "slln": _exp_slln,
    "fclt": _exp_fclt,
    "cbire-tv": _exp_cbire_tv,
    "lyapunov-scan": _exp_lyapunov,
}


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

CSV_COLUMNS = ("t", "estimate", "stderr", "theoretical_bound")


def _fmt(x) -> str:
    return repr(float(x))


def write_csv(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _versions() -> dict:
    import numba
    import scipy

    return {
        "cbilab": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "numba": numba.__version__,
    }


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if math.isfinite(f) else repr(f)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def run_scenario(sc: Scenario, out_dir: Optional[str] = None) -> ExperimentResult:
    """Run ``sc`` and, when ``out_dir`` is given, write ``<name>.csv`` and ``<name>.json``.

    Precondition failures propagate as :class:`ConditionError` before any
    simulation starts.
    """
    result = RUNNERS[sc.experiment](sc)
    out_dir = out_dir or sc.output
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        write_csv(os.path.join(out_dir, f"{sc.name}.csv"), result.rows)
        report = {
            "scenario": sc.name,
            "experiment": sc.experiment,
            "description": sc.description,
            "overall": result.overall,
            "verdicts": result.verdicts,
            "summary": result.summary,
            "master_seed": sc.sim.master_seed,
            "versions": _versions(),
            "config": sc.to_dict(),
        }
        with open(os.path.join(out_dir, f"{sc.name}.json"), "w", encoding="utf-8") as fh:
            json.dump(_jsonable(report), fh, indent=2)
    return result
