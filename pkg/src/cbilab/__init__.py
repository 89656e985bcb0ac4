"""Simulation and verification of exponential ergodicity for CBI-type processes."""

__version__ = "0.1.0"

from .errors import CbiLabError, ConditionError, ConfigError, FlowError, MeasureError, SampleError
from .mechanisms import (
    CbiParams,
    FiniteAtoms,
    MechanismReport,
    PowerLawDensity,
    TemperedPowerLaw,
    ZeroMeasure,
    check_conditions,
    levy_integral,
    measure_condition,
    phi_eval,
    psi_eval,
    sample_jump,
)
from .flow import (
    EnvironmentPath,
    EnvFlowSolution,
    FlowSolution,
    fclt_gamma2,
    first_moment,
    invariant_laplace,
    solve_v,
    solve_v_env,
    transition_laplace,
    vbar,
)
from .sde import (
    CbiModel,
    CbireModel,
    CnbiModel,
    CoupledEnsemble,
    EnvironmentParams,
    NonlinearRates,
    SimConfig,
    generator_apply,
    simulate_coupled,
    simulate_ensemble,
    simulate_environment,
    simulate_path,
)
from .metrics import (
    DecayFit,
    fclt_variance_empirical,
    fit_decay,
    log_inequality_holds,
    time_average,
    tv_histogram,
    w1_empirical,
    wlog_coupled,
)
