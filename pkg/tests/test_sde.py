import math

import numpy as np
import pytest

from cbilab.errors import ConditionError, ConfigError
from cbilab.flow import first_moment, invariant_laplace
from cbilab.mechanisms import CbiParams, FiniteAtoms, PowerLawDensity, TemperedPowerLaw, ZeroMeasure, phi_eval, psi_eval
from cbilab.sde import (
    CbiModel,
    CbireModel,
    CnbiModel,
    EnvironmentParams,
    NonlinearRates,
    SimConfig,
    generator_apply,
    log1p_generator_bound,
    model_from_dict,
    simulate_coupled,
    simulate_ensemble,
    simulate_environment,
    simulate_path,
)

CNBI = CnbiModel(NonlinearRates(beta=1.0, b=1.0, alpha=1.5, delta=1.2), FiniteAtoms([(0.5, 1.0)]))
MODELS = {
    "cir": CbiModel(CbiParams.from_sigma2(1.0, 1.0, 2.0)),
    "jumps": CbiModel(CbiParams(0.5, 1.0, 0.5, FiniteAtoms([(2.0, 1.0)]), FiniteAtoms([(1.0, 0.5)]))),
    "stable": CbiModel(CbiParams(0.5, 1.0, 0.0, PowerLawDensity(0.3, -2.5), TemperedPowerLaw(0.5, -1.5, 1.0))),
    "cnbi": CNBI,
    "cbire": CbireModel(CbiParams.from_sigma2(1.0, 1.0, 2.0),
                        EnvironmentParams(0.2, 0.3, FiniteAtoms([(-0.5, 0.5), (1.5, 0.2)]))),
}


@pytest.fixture(params=sorted(MODELS))
def model(request):
    return MODELS[request.param]


class TestSimConfig:
    def test_record_grid_validation(self):
        with pytest.raises(ConfigError):
            SimConfig(dt=0.1, horizon=1.0, record_grid=(0.25,))
        with pytest.raises(ConfigError):
            SimConfig(dt=0.1, horizon=1.0, record_grid=(0.5, 0.3))

    def test_default_grid_every_step(self):
        assert SimConfig(dt=0.25, horizon=1.0).record_times().tolist() == [0.0, 0.25, 0.5, 0.75, 1.0]


class TestModels:
    def test_rates_exponents_checked(self):
        with pytest.raises(ConditionError):
            NonlinearRates(beta=1.0, b=1.0, alpha=2.5)

    def test_dissipativity(self):
        assert MODELS["cir"].dissipativity_rate == 1.0
        assert CNBI.dissipativity_rate == 1.0
        env = EnvironmentParams(0.3, 0.2, FiniteAtoms([(2.0, 1.0)]))
        expected = 1.0 - (0.3 + math.expm1(2.0))
        assert CbireModel(CbiParams(1.0, 1.0, 0.0), env).dissipativity_rate == pytest.approx(expected)

    def test_environment_drift(self):
        env = EnvironmentParams(0.0, 1.0)
        assert env.a_E == -0.5 and env.mean_Z1 == 0.0
        compensated = EnvironmentParams(0.4, 0.0, FiniteAtoms([(math.log(2.0), 1.0)]))
        assert compensated.mean_Z1 == 0.4
        assert compensated.a_E == pytest.approx(0.4 - (1.0 - math.log(2.0)))

    @pytest.mark.parametrize("name", sorted(MODELS))
    def test_dict_round_trip(self, name):
        m = MODELS[name]
        assert model_from_dict(m.to_dict()).to_dict() == m.to_dict()


class TestPaths:
    def test_frozen_process(self):
        model = CbiModel(CbiParams(0.0, 0.0, 0.0))
        tr = simulate_path(model, 5.0, SimConfig(dt=0.01, horizon=2.0))
        assert np.all(tr.values == 5.0)

    def test_deterministic_ode(self):
        model = CbiModel(CbiParams(1.0, 1.0, 0.0))
        for dt in (1e-2, 1e-3):
            tr = simulate_path(model, 0.0, SimConfig(dt=dt, horizon=3.0))
            err = np.max(np.abs(tr.values + np.expm1(-tr.times)))
            assert err < dt
            # Euler recursion x_{k+1} = x_k + (1 - x_k) dt solved exactly
            k = np.rint(tr.times / dt)
            np.testing.assert_allclose(tr.values, 1.0 - (1.0 - dt) ** k, rtol=1e-12, atol=1e-14)

    def test_nonnegative(self, model):
        ens = simulate_ensemble(model, 0.5, SimConfig(dt=1e-2, horizon=2.0, n_paths=400, master_seed=3))
        assert np.all(ens.values >= 0.0)

    def test_martingale_part_centred(self, model):
        sim = SimConfig(dt=1e-2, horizon=2.0, n_paths=4000, master_seed=9, record_grid=(0.5, 1.0, 2.0))
        ens = simulate_ensemble(model, 1.0, sim)
        assert np.all(ens.martingale_check() < 4.0)

    def test_thread_count_does_not_matter(self, model):
        sim = SimConfig(dt=1e-2, horizon=1.0, n_paths=700, master_seed=5)
        one = simulate_ensemble(model, 1.0, sim, threads=1)
        many = simulate_ensemble(model, 1.0, sim, threads=4)
        assert np.array_equal(one.values, many.values)
        assert np.array_equal(one.martingale, many.martingale)

    def test_path_matches_ensemble_member(self):
        sim = SimConfig(dt=1e-2, horizon=1.0, n_paths=10, master_seed=5)
        ens = simulate_ensemble(MODELS["jumps"], 1.0, sim)
        assert np.array_equal(simulate_path(MODELS["jumps"], 1.0, sim, 7).values, ens.values[7])

    @pytest.mark.slow
    def test_mean_at_t10(self):
        sim = SimConfig(dt=1e-2, horizon=10.0, n_paths=100_000, master_seed=21, record_grid=(10.0,))
        x = simulate_ensemble(MODELS["cir"], 0.0, sim).endpoint
        se = x.std(ddof=1) / math.sqrt(x.size)
        assert abs(x.mean() - first_moment(MODELS["cir"].params, 0.0, 10.0)) < 3 * se


class TestCoupling:
    def test_equal_starts_identical(self, model):
        ce = simulate_coupled(model, 2.0, 2.0, SimConfig(dt=1e-2, horizon=1.0, n_paths=200, master_seed=1))
        assert np.array_equal(ce.X, ce.Y)

    def test_shared_noise_and_order(self, model):
        ce = simulate_coupled(model, 0.0, 5.0, SimConfig(dt=1e-3, horizon=1.0, n_paths=500, master_seed=2,
                                                         record_every=0.1))
        assert ce.shared_noise
        assert ce.ordering_fraction >= 0.99

    def test_sorted_starts(self):
        ce = simulate_coupled(MODELS["cir"], 5.0, 0.0, SimConfig(dt=1e-2, horizon=0.1, n_paths=4))
        assert (ce.x0, ce.y0) == (0.0, 5.0)

    def test_drift_only_gap(self):
        model = CbiModel(CbiParams(0.0, 1.0, 0.0))
        dt = 1e-3
        ce = simulate_coupled(model, 0.0, 5.0, SimConfig(dt=dt, horizon=2.0, n_paths=3, record_every=0.5))
        gap, _ = ce.mean_gap()
        np.testing.assert_allclose(gap, 5.0 * (1 - dt) ** np.rint(ce.times / dt), rtol=1e-12)
        assert np.all(np.abs(gap - 5.0 * np.exp(-ce.times)) <= 5.0 * dt)

    def test_gap_below_bound(self):
        sim = SimConfig(dt=1e-3, horizon=2.0, n_paths=4000, master_seed=4, record_grid=(0.5, 1.0, 2.0))
        ce = simulate_coupled(MODELS["cir"], 0.0, 5.0, sim)
        gap, se = ce.mean_gap()
        assert np.all(gap[1:] <= 5.0 * np.exp(-ce.times[1:]) * (1 + 3 * se[1:] / gap[1:]))


class TestEnvironment:
    def test_pure_drift(self):
        sim = SimConfig(dt=0.1, horizon=2.0)
        path = simulate_environment(EnvironmentParams(0.7, 0.0), sim)
        np.testing.assert_allclose(path.xi, 0.7 * path.times, rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(path.z, 0.7 * path.times, rtol=1e-12, atol=1e-14)

    def test_exponential_martingale(self):
        # E[e^{ξ_1}] = E[1 + Z_1] = 1 when b_E = 0
        sim = SimConfig(dt=0.25, horizon=1.0)
        vals = np.array([math.exp(simulate_environment(EnvironmentParams(0.0, 1.0), sim, i).xi[-1])
                         for i in range(20_000)])
        se = vals.std(ddof=1) / math.sqrt(vals.size)
        assert abs(vals.mean() - 1.0) < 3 * se

    def test_environment_matches_cbire_stream(self):
        env = EnvironmentParams(0.0, 0.4)
        model = CbireModel(CbiParams(0.0, 0.0, 0.0), env)
        sim = SimConfig(dt=0.01, horizon=1.0, n_paths=1)
        tr = simulate_path(model, 1.0, sim)
        path = simulate_environment(env, sim)
        # without branching X_t = prod (1 + ΔZ) = e^{ξ_t} up to Euler error
        assert tr.values[-1] == pytest.approx(math.exp(path.xi[-1]), rel=0.05)


class TestGenerator:
    def test_log1p_at_zero(self):
        assert generator_apply(CbiModel(CbiParams(1.0, 1.0, 0.0)), "log1p", 0.0) == 1.0

    @pytest.mark.parametrize("x", [1.0, 10.0, 1e3, 1e6])
    def test_log1p_drift_only(self, x):
        lv = generator_apply(CbiModel(CbiParams(1.0, 1.0, 0.0)), "log1p", x)
        assert lv == pytest.approx((1.0 - x) / (1.0 + x), rel=1e-12)
        assert lv <= 2.0

    def test_exponential_identity(self, cir):
        params = cir
        lv = generator_apply(CbiModel(params), "exp", 1.0, 1.0)
        expected = math.exp(-1.0) * (-psi_eval(params, 1.0) + phi_eval(params, 1.0))
        assert lv == pytest.approx(expected, rel=1e-12)
        assert lv == pytest.approx(math.exp(-1.0), rel=1e-12)

    @pytest.mark.parametrize("name", ["jumps", "stable"])
    def test_exponential_identity_with_jumps(self, name):
        params = MODELS[name].params
        for x in (0.0, 0.7, 3.0):
            for lam in (0.5, 2.0):
                lv = generator_apply(MODELS[name], "exp", x, lam)
                expected = math.exp(-lam * x) * (x * phi_eval(params, lam) - psi_eval(params, lam))
                assert lv == pytest.approx(expected, rel=1e-7, abs=1e-12)

    def test_invariant_law_annihilates_generator(self, cir):
        # ∫ L f dπ = 0: e^{-x}(x φ - ψ) integrates to φ·(-d/dλ L) - ψ L at λ=1
        lam, h = 1.0, 1e-5
        d = (invariant_laplace(cir, lam + h) - invariant_laplace(cir, lam - h)) / (2 * h)
        assert phi_eval(cir, lam) * -d - psi_eval(cir, lam) * invariant_laplace(cir, lam) == pytest.approx(0, abs=1e-9)

    def test_log1p_bound(self):
        model = MODELS["jumps"]
        xs = np.concatenate([[0.0], np.logspace(-3, 6, 200)])
        lv = np.array([generator_apply(model, "log1p", float(x)) for x in xs])
        assert np.all(np.isfinite(lv))
        assert lv.max() <= log1p_generator_bound(model)

    def test_power_cnbi_bounded_ratio(self):
        xs = np.concatenate([[0.0], np.logspace(-3, 6, 200)])
        ratio = np.array([generator_apply(CNBI, "power", float(x), 1.5) / (1 + x) ** 1.5 for x in xs])
        assert np.all(np.isfinite(ratio))
        assert ratio.max() < 10.0

    def test_cbire_environment_terms(self):
        # no branching, only the environment: L x = x (b_E + ∫_{|z|>1}(e^z - 1) μ_E)
        env = EnvironmentParams(0.3, 0.5, FiniteAtoms([(2.0, 0.1), (0.5, 1.0)]))
        model = CbireModel(CbiParams(0.0, 0.0, 0.0), env)
        lv = generator_apply(model, "power", 2.0, 1.0)
        assert lv == pytest.approx(2.0 * env.mean_Z1, rel=1e-10)
