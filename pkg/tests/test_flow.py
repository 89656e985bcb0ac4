import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from cbilab.errors import ConditionError, FlowError
from cbilab.flow import (
    INF,
    EnvironmentPath,
    fclt_gamma2,
    fclt_gamma2_reference,
    first_moment,
    flow_value,
    invariant_laplace,
    solve_v,
    solve_v_env,
    transition_laplace,
    vbar,
)
from cbilab.mechanisms import CbiParams, FiniteAtoms, PowerLawDensity, ZeroMeasure

from .conftest import CORPUS


def riccati(b, s2, lam, t):
    """Closed-form flow for φ(v) = b v + s2 v²/2, written out independently."""
    e = math.exp(-b * t)
    return b * lam * e / (b + 0.5 * s2 * lam * (1.0 - e))


def gamma_transform(beta, b, s2, lam):
    return (1.0 + s2 * lam / (2.0 * b)) ** (-2.0 * beta / s2)


class TestSolveV:
    def test_linear(self):
        params = CbiParams(0.0, 1.0, 0.0)
        assert solve_v(params, 1.0, 1.0).final == pytest.approx(math.exp(-1.0), rel=1e-9)

    def test_riccati_point(self, cir):
        assert solve_v(cir, 1.0, math.log(2.0)).final == pytest.approx(1.0 / 3.0, rel=1e-9)

    def test_zero_is_fixed(self):
        params = CbiParams(0.0, 1.0, 1.0)
        sol = solve_v(params, 0.0, 5.0)
        assert np.all(sol.v == 0.0) and np.all(sol.psi_integral == 0.0)

    def test_grid_and_immutability(self, cir):
        sol = solve_v(cir, 2.0, 3.0, [1.0, 2.0, 3.0])
        assert sol.grid[0] == 0.0 and sol.v[0] == 2.0
        with pytest.raises(ValueError):
            sol.v[0] = 1.0

    @pytest.mark.parametrize("lam", [0.1, 1.0, 7.5, 300.0])
    def test_matches_riccati_grid(self, cir, lam):
        grid = np.linspace(0.0, 5.0, 26)
        sol = solve_v(cir, lam, 5.0, grid)
        ref = np.array([riccati(1.0, 2.0, lam, t) for t in grid])
        np.testing.assert_allclose(sol.v, ref, rtol=1e-8)

    def test_psi_integral_cir(self, cir):
        # ψ(v) = v and ∫_0^t v_s ds = log(1 + λ(1 - e^{-t})) for this model
        lam, t = 2.0, 1.5
        _, q = flow_value(cir, lam, t)
        assert q == pytest.approx(math.log1p(lam * -math.expm1(-t)), rel=1e-9)

    @pytest.mark.parametrize("params", CORPUS[:4], ids=lambda p: f"b{p.b}")
    def test_semiflow(self, params):
        for s in (0.3, 1.0):
            for t in (0.5, 2.0):
                for lam in (0.5, 3.0):
                    direct = flow_value(params, lam, s + t)[0]
                    composed = flow_value(params, flow_value(params, lam, s)[0], t)[0]
                    assert composed == pytest.approx(direct, rel=1e-7)

    @settings(max_examples=30, deadline=None)
    @given(st.floats(0.0, 50.0), st.floats(0.0, 50.0), st.floats(0.01, 5.0))
    def test_monotone_in_lambda(self, l1, l2, t):
        params = CORPUS[2]
        lo, hi = sorted((l1, l2))
        assert flow_value(params, lo, t)[0] <= flow_value(params, hi, t)[0] * (1 + 1e-9) + 1e-12


class TestTransforms:
    def test_trivial_cases(self, cir):
        assert transition_laplace(cir, 3.0, 2.0, 0.0) == 1.0
        assert transition_laplace(cir, 3.0, 0.0, 0.7) == math.exp(-3.0 * 0.7)
        assert invariant_laplace(cir, 0.0) == 1.0

    @pytest.mark.parametrize("beta, b, s2", [(1.0, 1.0, 2.0), (0.5, 2.0, 0.5), (3.0, 0.7, 1.0)])
    @pytest.mark.parametrize("lam", [0.1, 1.0, 10.0])
    def test_invariant_gamma(self, beta, b, s2, lam):
        params = CbiParams.from_sigma2(beta, b, s2)
        assert invariant_laplace(params, lam) == pytest.approx(gamma_transform(beta, b, s2, lam), rel=1e-8)

    def test_degenerate_invariant(self):
        params = CbiParams(0.0, 1.0, 1.0)
        assert invariant_laplace(params, 5.0) == 1.0

    def test_invariant_refuses_supercritical(self):
        with pytest.raises(ConditionError):
            invariant_laplace(CbiParams.from_sigma2(1.0, -1.0, 2.0), 1.0)

    def test_transition_converges(self, cir):
        assert transition_laplace(cir, 0.0, 30.0, 1.0) == pytest.approx(0.5, rel=1e-9)

    def test_invariant_against_quadrature(self):
        params = CORPUS[2]
        from cbilab.mechanisms import phi_eval, psi_eval

        oracle = integrate.quad(lambda u: psi_eval(params, u) / phi_eval(params, u), 0, 2.0,
                                epsabs=1e-12, epsrel=1e-10)[0]
        assert invariant_laplace(params, 2.0) == pytest.approx(math.exp(-oracle), rel=1e-7)

    @pytest.mark.parametrize("params", CORPUS, ids=lambda p: f"b{p.b}")
    def test_completely_monotone(self, params):
        h = 0.25
        f = np.array([invariant_laplace(params, h * k) for k in range(12)])
        for order in (1, 2, 3):
            d = np.diff(f, n=order) * (-1) ** order
            assert np.all(d >= -1e-10)

    @pytest.mark.parametrize("params", [CORPUS[0], CORPUS[1], CORPUS[2]], ids=["cir", "atoms", "stable"])
    def test_chapman_kolmogorov(self, params):
        x, s, t, lam = 1.3, 0.7, 1.1, 2.0
        vs, qs = flow_value(params, lam, s)
        vt, qt = flow_value(params, vs, t)
        direct = transition_laplace(params, x, s + t, lam)
        assert math.exp(-x * vt - qt - qs) == pytest.approx(direct, rel=1e-7)

    # finite-difference bias is O(h Var), so only finite-variance branching is used
    @pytest.mark.parametrize("params", [CORPUS[0], CORPUS[1], CORPUS[3]], ids=["cir", "atoms", "tempered"])
    def test_derivative_is_first_moment(self, params):
        x, t, h = 2.0, 0.8, 1e-6
        slope = -math.log(transition_laplace(params, x, t, h)) / h
        assert slope == pytest.approx(first_moment(params, x, t), rel=1e-5)


class TestFirstMoment:
    def test_time_zero(self, cir):
        assert first_moment(cir, 4.2, 0.0) == 4.2

    def test_long_time_limit(self):
        assert first_moment(CbiParams(1.0, 1.0, 0.0), 1.0, 200.0) == pytest.approx(1.0, rel=1e-12)

    def test_with_immigration_atom(self):
        params = CbiParams(2.0, 1.0, 0.0, ZeroMeasure(), FiniteAtoms([(1.0, 1.0)]))
        assert first_moment(params, 0.0, 1.0) == pytest.approx(3.0 * (1 - math.exp(-1.0)), rel=1e-12)

    def test_infinite_mean_refused(self):
        params = CbiParams(0.0, 1.0, 0.0, ZeroMeasure(), PowerLawDensity(1.0, -1.5))
        with pytest.raises(ConditionError):
            first_moment(params, 0.0, 1.0)


def _gamma2_quadrature(beta, b, s2, lam):
    """-2 ∫ f L f dπ for f = e^{-λy} under the Gamma invariant law, by quadrature."""
    shape, scale = 2 * beta / s2, s2 / (2 * b)
    dens = lambda y: y ** (shape - 1) * math.exp(-y / scale) / (math.gamma(shape) * scale**shape)
    phi = b * lam + 0.5 * s2 * lam * lam
    psi = beta * lam
    lf = lambda y: math.exp(-lam * y) * (y * phi - psi)
    return -2.0 * integrate.quad(lambda y: math.exp(-lam * y) * lf(y) * dens(y), 0, np.inf,
                                 epsabs=1e-13, epsrel=1e-11)[0]


class TestFcltGamma2:
    @pytest.mark.parametrize("beta, b, s2, lam", [(1.0, 1.0, 2.0, 1.0), (2.0, 1.5, 1.0, 0.5),
                                                  (0.5, 0.5, 0.5, 2.0)])
    def test_against_generator_quadrature(self, beta, b, s2, lam):
        params = CbiParams.from_sigma2(beta, b, s2)
        assert fclt_gamma2(params, lam) == pytest.approx(_gamma2_quadrature(beta, b, s2, lam), rel=1e-8)

    def test_cir_value(self, cir):
        assert fclt_gamma2(cir, 1.0) == pytest.approx(2.0 / 9.0, rel=1e-10)
        assert fclt_gamma2_reference(cir, 1.0) == pytest.approx(8.0 / 9.0, rel=1e-10)

    def test_no_immigration(self):
        assert fclt_gamma2(CbiParams(0.0, 1.0, 1.0), 0.8) == 0.0

    def test_small_lambda(self, cir):
        assert fclt_gamma2(cir, 1e-9) < 1e-8


class TestVbar:
    def test_pure_quadratic(self):
        params = CbiParams(0.0, 0.0, math.sqrt(2.0))
        assert vbar(params, 1.0) == pytest.approx(1.0, rel=1e-7)

    def test_cir_limit(self, cir):
        # λ → ∞ in the Riccati solution: b / ((σ²/2)(e^{bt} - 1))
        assert vbar(cir, 0.5) == pytest.approx(1.0 / math.expm1(0.5), rel=1e-7)

    def test_stable_branching(self):
        # φ(λ) = Γ(-1/2)... use m = z^{-2.5}: φ = c λ^{1.5}, so v̄_t = (0.5 c t)^{-2}
        params = CbiParams(0.0, 0.0, 0.0, PowerLawDensity(1.0, -2.5), ZeroMeasure())
        c = math.gamma(-1.5)
        assert vbar(params, 1.0) == pytest.approx((0.5 * c) ** -2, rel=1e-5)

    def test_no_grey_raises(self):
        with pytest.raises(FlowError):
            vbar(CbiParams(0.0, 1.0, 0.0), 1.0)


class TestEnvironmentFlow:
    def test_zero_environment(self, cir):
        path = EnvironmentPath.constant(2.0, 11)
        res = solve_v_env(cir, path, 1.5, 2.0)
        assert res.v0 == pytest.approx(flow_value(cir, 1.5, 2.0)[0], rel=1e-8)

    def test_zero_environment_with_jumps(self):
        params = CORPUS[2]
        path = EnvironmentPath.constant(1.0, 5)
        assert solve_v_env(params, path, 2.0, 1.0).v0 == pytest.approx(
            flow_value(params, 2.0, 1.0)[0], rel=1e-8)

    def test_quadratic_blow_down(self):
        params = CbiParams(0.0, 0.0, math.sqrt(2.0))
        res = solve_v_env(params, EnvironmentPath.constant(1.0, 3), INF, 1.0)
        assert res.vbar == pytest.approx(1.0, rel=1e-7)

    @pytest.mark.parametrize("c", [-0.5, 0.3, 1.0])
    def test_linear_drift_environment(self, c):
        params = CbiParams(0.0, 1.0, 0.0)
        times = np.linspace(0.0, 1.0, 201)
        res = solve_v_env(params, EnvironmentPath(times, c * times), 1.0, 1.0)
        assert res.v0 == pytest.approx(math.exp(c - 1.0), rel=1e-9)

    def test_continuity_of_scaled_flow(self, cir):
        times = np.linspace(0.0, 1.0, 6)
        xi = np.array([0.0, 0.4, -0.2, 0.1, 0.5, 0.3])
        res = solve_v_env(cir, EnvironmentPath(times, xi), 2.0, 1.0)
        # between grid points only the ordinary flow acts
        for k in range(len(times) - 1):
            inner = res.v_env[k + 1] * math.exp(xi[k + 1] - xi[k])
            assert res.v_env[k] == pytest.approx(riccati(1.0, 2.0, inner, 0.2), rel=1e-12)
