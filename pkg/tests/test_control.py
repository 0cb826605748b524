"""Controller pieces: min-norm input, adaptation laws, robust term,
extended feedforward, deadzone, projection, and the combined evaluation."""

import numpy as np
import pytest

from ccmcontrol.control import (ControllerConfig, adapt_extended,
                                adapt_matched, apply_deadzone,
                                apply_projection, combined_step,
                                extended_feedforward, min_norm_input,
                                robust_offset_constant, robust_term)
from ccmcontrol.errors import InfeasibleConstraint, InvariantViolation
from ccmcontrol.geometry import GeodesicSolver, MetricField
from ccmcontrol.sim import AdaptiveState
from ccmcontrol.systems import (Setpoint, SystemModel, underactuated3,
                                underactuated3_metric)


@pytest.fixture(scope="module")
def model():
    return underactuated3()


@pytest.fixture(scope="module")
def metric():
    return underactuated3_metric()


def bench_geodesic(metric, x, theta_em, x_d=(0.0, 0.0, 0.0)):
    return GeodesicSolver(metric).solve(np.asarray(x_d, float),
                                        np.asarray(x, float), theta=theta_em)


def planar_model(f, B, p_m=0, p_em=0):
    m = np.asarray(B(np.zeros(2))).shape[1]
    return SystemModel(
        n=2, m=m, p_m=p_m, p_em=p_em,
        f=f, B=B,
        phi=lambda x: np.zeros((p_m, m)),
        varrho=lambda x: np.zeros((p_em, 2)),
        varrho_dx1=lambda x: np.zeros(p_em),
        indicator=np.eye(m)[:, 0] if m > 1 else np.array([1.0]),
        theta_true_m=np.zeros(p_m),
        theta_true_em=np.zeros(p_em),
    )


class TestMinNormInput:
    def test_constraint_terms_and_boundary_solution(self, model, metric):
        th_em = np.array([1.0])
        geo = bench_geodesic(metric, [1.0, 1.0, 1.0], th_em)
        sp = Setpoint(np.zeros(3))
        u, slack = min_norm_input(geo, metric, th_em, model, sp, lam=0.1)
        M1 = metric.metric(geo.q, th_em)
        a = 2.0 * model.input_matrix(geo.q).T @ (M1 @ geo.tangent1)
        M0 = metric.metric(geo.p, th_em)
        b = (-0.2 * geo.energy
             - 2.0 * float((M1 @ geo.tangent1) @ model.drift(geo.q, th_em))
             + 2.0 * float((M0 @ geo.tangent0) @ sp.xdot_d))
        assert slack <= 1e-9
        if b < 0:
            # active constraint: u is the projection of 0 onto a^T u = b
            assert np.isclose(float(a @ u), b, rtol=1e-12, atol=1e-12)
            assert np.allclose(u, (b / float(a @ a)) * a, rtol=1e-12)

    def test_zero_input_when_drift_already_contracts(self):
        m = planar_model(lambda x: -10.0 * x, lambda x: np.array([[0.0], [1.0]]))
        flat = MetricField.constant(np.eye(2))
        geo = GeodesicSolver(flat).solve(np.zeros(2), np.array([0.8, -0.6]))
        u, slack = min_norm_input(geo, flat, np.zeros(0), m, Setpoint(np.zeros(2)), lam=0.1)
        assert np.allclose(u, 0.0)
        assert slack < 0.0

    def test_minimum_norm_among_feasible_inputs(self):
        m = planar_model(lambda x: np.array([x[1], -x[0]]),
                         lambda x: np.array([[1.0, 0.0], [0.0, 2.0]]))
        flat = MetricField.constant(np.eye(2))
        x = np.array([1.0, 0.5])
        geo = GeodesicSolver(flat).solve(np.zeros(2), x)
        sp = Setpoint(np.zeros(2), u_d=np.zeros(2))
        u, slack = min_norm_input(geo, flat, np.zeros(0), m, sp, lam=0.1)
        a = 2.0 * m.input_matrix(x).T @ geo.tangent1
        b = -0.2 * geo.energy - 2.0 * float(geo.tangent1 @ m.f(x))
        assert b < 0 and float(a @ u) <= b + 1e-9
        rng = np.random.default_rng(5)
        for _ in range(40):
            w = rng.normal(size=2)
            if float(a @ w) > 0:
                w = w - 2.0 * (float(a @ w) / float(a @ a)) * a
            cand = u + w   # still feasible: a^T cand <= b
            assert np.linalg.norm(cand) >= np.linalg.norm(u) - 1e-12

    def test_infeasible_when_input_has_no_authority(self):
        m = planar_model(lambda x: x.copy(), lambda x: np.zeros((2, 1)))
        flat = MetricField.constant(np.eye(2))
        geo = GeodesicSolver(flat).solve(np.zeros(2), np.array([1.0, 0.0]))
        with pytest.raises(InfeasibleConstraint):
            min_norm_input(geo, flat, np.zeros(0), m, Setpoint(np.zeros(2)), lam=0.1)


class TestAdaptationLaws:
    def test_matched_law_formula(self, model, metric):
        th_em = np.array([0.4])
        geo = bench_geodesic(metric, [0.9, -0.4, 1.2], th_em)
        g = np.array([3.0, 7.0])
        rate = adapt_matched(geo, metric, th_em, model, g)
        M1 = metric.metric(geo.q, th_em)
        proj = model.input_matrix(geo.q).T @ (M1 @ geo.tangent1)
        expected = -g * (model.regressor_m(geo.q) @ proj)
        assert np.allclose(rate, expected, rtol=1e-12)

    def test_extended_law_formula(self, model, metric):
        th_em = np.array([-0.3])
        geo = bench_geodesic(metric, [1.4, 0.2, -0.8], th_em)
        rate = adapt_extended(geo, metric, th_em, model, 5.0)
        M1 = metric.metric(geo.q, th_em)
        expected = -5.0 * (model.regressor_em(geo.q) @ (M1 @ geo.tangent1))
        assert np.allclose(rate, expected, rtol=1e-12)

    def test_scalar_gain_broadcasts(self, model, metric):
        th_em = np.array([0.0])
        geo = bench_geodesic(metric, [0.5, 0.5, 0.5], th_em)
        assert np.allclose(adapt_matched(geo, metric, th_em, model, 2.0),
                           adapt_matched(geo, metric, th_em, model, [2.0, 2.0]))

    def test_gain_validation(self, model, metric):
        th_em = np.array([0.0])
        geo = bench_geodesic(metric, [0.5, 0.5, 0.5], th_em)
        with pytest.raises(ValueError):
            adapt_matched(geo, metric, th_em, model, [1.0, -1.0])
        with pytest.raises(ValueError):
            adapt_matched(geo, metric, th_em, model, [1.0, 2.0, 3.0])
        with pytest.raises(ValueError):
            adapt_matched(geo, metric, th_em, model, np.array([[1.0, 0.5], [0.5, 1.0]]))

    def test_diagonal_matrix_gain_accepted(self, model, metric):
        th_em = np.array([0.0])
        geo = bench_geodesic(metric, [1.0, 0.0, 0.0], th_em)
        assert np.allclose(adapt_matched(geo, metric, th_em, model, np.diag([2.0, 4.0])),
                           adapt_matched(geo, metric, th_em, model, [2.0, 4.0]))


class TestRobustTerm:
    def test_formula_on_benchmark(self, model, metric):
        th_em = np.array([0.0])
        x = np.array([1.1, -0.6, 0.7])
        geo = bench_geodesic(metric, x, th_em)
        r = robust_term(geo, metric, th_em, model, kappa=2.0)
        M1 = metric.metric(geo.q, th_em)
        proj = float(model.b_k(geo.q) @ (M1 @ geo.tangent1))
        phi_norm2 = x[2] ** 2 + x[0] ** 4
        assert np.allclose(r, [-2.0 * proj * phi_norm2], rtol=1e-12)

    def test_offset_constant(self, model):
        assert robust_offset_constant(model, 2.0) == 0.25
        assert robust_offset_constant(model, 0.5) == 1.0
        with pytest.raises(ValueError):
            robust_offset_constant(model, 0.0)


class TestExtendedFeedforward:
    def test_constant_regressor_telescopes(self, model, metric):
        # d varrho_11/dx1 = 1, so the path integral collapses to x1 - xd1
        th_em = np.array([0.8])
        geo = bench_geodesic(metric, [1.3, -0.7, 0.4], th_em)
        u_ff = extended_feedforward(geo, np.array([2.5]), model)
        assert np.allclose(u_ff, [2.5 * 1.3], rtol=1e-9)

    def test_zero_rate_short_circuits(self, model, metric):
        geo = bench_geodesic(metric, [1.0, 1.0, 1.0], np.array([1.0]))
        assert np.array_equal(extended_feedforward(geo, np.zeros(1), model),
                              np.zeros(1))

    def test_nonzero_setpoint_offset(self, model, metric):
        th_em = np.array([0.2])
        geo = GeodesicSolver(metric).solve(np.array([0.5, 0.1, -0.2]),
                                           np.array([-1.1, 0.6, 0.9]), theta=th_em)
        u_ff = extended_feedforward(geo, np.array([-1.5]), model)
        assert np.allclose(u_ff, [-1.5 * (-1.1 - 0.5)], rtol=1e-9)


class TestDeadzone:
    def test_boundary_inclusive_euclidean(self):
        gs1 = np.array([0.3, 0.4, 0.0])   # norm exactly 0.5
        rm, rem, active = apply_deadzone([1.0, 2.0], [3.0], gs1, radius=0.5)
        assert active and np.all(rm == 0) and np.all(rem == 0)
        rm, rem, active = apply_deadzone([1.0, 2.0], [3.0], gs1 * 1.01, radius=0.5)
        assert not active
        assert np.allclose(rm, [1.0, 2.0]) and np.allclose(rem, [3.0])

    def test_metric_norm_differs_from_euclidean(self):
        M = np.diag([4.0, 1.0, 1.0])
        gs1 = np.array([0.5, 0.0, 0.0])   # euclidean 0.5, metric norm 1.0
        _, _, active = apply_deadzone([1.0], [1.0], gs1, radius=0.6,
                                      norm="metric", metric_matrix=M)
        assert not active
        _, _, active = apply_deadzone([1.0], [1.0], gs1, radius=0.6)
        assert active

    def test_metric_norm_requires_matrix(self):
        with pytest.raises(ValueError):
            apply_deadzone([1.0], [1.0], np.ones(3), radius=0.1, norm="metric")


class TestProjection:
    def test_interior_rates_untouched(self):
        r = apply_projection([0.0, 0.5], [4.0, -4.0], [[-1, 1], [-1, 1]])
        assert np.allclose(r, [4.0, -4.0])

    def test_outward_rate_zeroed_at_faces(self):
        bounds = [[-1.0, 1.0], [-1.0, 1.0]]
        r = apply_projection([1.0, -1.0], [0.7, -0.7], bounds)
        assert np.allclose(r, 0.0)
        r = apply_projection([1.0, -1.0], [-0.7, 0.7], bounds)
        assert np.allclose(r, [-0.7, 0.7])   # inward rates pass

    def test_tiny_overshoot_tolerated(self):
        r = apply_projection([1.0 + 5e-10], [1.0], [[-1.0, 1.0]])
        assert r[0] == 0.0

    def test_violation_beyond_tolerance_raises(self):
        with pytest.raises(InvariantViolation):
            apply_projection([1.0 + 1e-6], [0.0], [[-1.0, 1.0]])

    def test_none_bounds_pass_through(self):
        assert np.allclose(apply_projection([5.0], [3.0], None), [3.0])


class TestControllerConfig:
    def test_resolved_materializes_gains_and_bounds(self, model):
        cfg = ControllerConfig(gamma_m=15.0, gamma_em=[7.0],
                               theta_bounds_m=[[-2, 2], [-2, 2]],
                               theta_bounds_em=[[-2, 2]])
        r = cfg.resolved(model)
        assert np.allclose(r.gamma_m, [15.0, 15.0])
        assert np.allclose(r.gamma_em, [7.0])
        assert r.theta_bounds_m.shape == (2, 2)
        assert r.theta_bounds_em.shape == (1, 2)

    def test_rejects_bad_settings(self):
        with pytest.raises(ValueError):
            ControllerConfig(lam=0.0)
        with pytest.raises(ValueError):
            ControllerConfig(kappa=-1.0)
        with pytest.raises(ValueError):
            ControllerConfig(robust=True, kappa=0.0)
        with pytest.raises(ValueError):
            ControllerConfig(deadzone_radius=-0.1)
        with pytest.raises(ValueError):
            ControllerConfig(deadzone_norm="manhattan")

    def test_rejects_inverted_bounds(self, model):
        cfg = ControllerConfig(theta_bounds_m=[[2, -2], [-2, 2]])
        with pytest.raises(ValueError):
            cfg.resolved(model)


class TestCombinedStep:
    def setpoint(self):
        return Setpoint(np.zeros(3))

    def state(self):
        return AdaptiveState(t=0.0, x=np.array([1.0, 1.0, 1.0]),
                             theta_m=np.array([0.0, -0.5]),
                             theta_em=np.array([1.0]))

    def test_assembles_documented_sum(self, model, metric):
        st = self.state()
        cfg = ControllerConfig(lam=0.1, gamma_m=15.0, gamma_em=15.0).resolved(model)
        out = combined_step(st, cfg, model, metric, self.setpoint())
        geo = bench_geodesic(metric, st.x, st.theta_em)
        assert np.isclose(out.E, geo.energy, rtol=1e-10)
        u_mn, slack = min_norm_input(geo, metric, st.theta_em, model,
                                     self.setpoint(), cfg.lam)
        assert np.allclose(out.u_ccm, u_mn, rtol=1e-10)
        assert np.isclose(out.constraint_slack, slack, atol=1e-12)
        rate_em = adapt_extended(geo, metric, st.theta_em, model, cfg.gamma_em)
        rate_m = adapt_matched(geo, metric, st.theta_em, model, cfg.gamma_m)
        assert np.allclose(out.theta_dot_em, rate_em, rtol=1e-10)
        assert np.allclose(out.theta_dot_m, rate_m, rtol=1e-10)
        expected_u = (u_mn + extended_feedforward(geo, rate_em, model)
                      + model.regressor_m(st.x).T @ st.theta_m)
        assert np.allclose(out.u, expected_u, rtol=1e-9)
        assert out.constraint_slack <= 1e-9
        assert out.geodesic_converged

    def test_robust_mode_adds_term(self, model, metric):
        st = self.state()
        base = ControllerConfig(adapt_m=False, adapt_em=False).resolved(model)
        rob = ControllerConfig(adapt_m=False, adapt_em=False, robust=True,
                               kappa=1.0).resolved(model)
        out0 = combined_step(st, base, model, metric, self.setpoint())
        out1 = combined_step(st, rob, model, metric, self.setpoint())
        geo = bench_geodesic(metric, st.x, st.theta_em)
        assert np.allclose(out1.u - out0.u,
                           robust_term(geo, metric, st.theta_em, model, 1.0),
                           rtol=1e-9)

    def test_adaptation_switches_off(self, model, metric):
        cfg = ControllerConfig(adapt_m=False, adapt_em=False).resolved(model)
        out = combined_step(self.state(), cfg, model, metric, self.setpoint())
        assert np.all(out.theta_dot_m == 0) and np.all(out.theta_dot_em == 0)

    def test_metric_deadzone_reports_sqrt_energy(self, model, metric):
        cfg = ControllerConfig(deadzone=True, deadzone_radius=100.0,
                               deadzone_norm="metric").resolved(model)
        out = combined_step(self.state(), cfg, model, metric, self.setpoint())
        assert out.deadzone_active
        assert np.all(out.theta_dot_m == 0) and np.all(out.theta_dot_em == 0)
        # geodesics have constant speed, so the endpoint metric norm is sqrt(E)
        assert np.isclose(out.gs1_norm, np.sqrt(out.E), rtol=1e-5)

    def test_euclidean_deadzone_norm_logged(self, model, metric):
        cfg = ControllerConfig(deadzone=True, deadzone_radius=1e-6).resolved(model)
        out = combined_step(self.state(), cfg, model, metric, self.setpoint())
        geo = bench_geodesic(metric, self.state().x, self.state().theta_em)
        assert not out.deadzone_active
        assert np.isclose(out.gs1_norm, np.linalg.norm(geo.tangent1), rtol=1e-10)

    def test_projection_freezes_rate_at_face(self, model, metric):
        st = AdaptiveState(t=0.0, x=np.array([1.0, 1.0, 1.0]),
                           theta_m=np.array([0.0, -0.5]),
                           theta_em=np.array([2.0]))   # at upper bound
        cfg = ControllerConfig(gamma_m=15.0, gamma_em=15.0, projection=True,
                               theta_bounds_m=[[-2, 2], [-2, 2]],
                               theta_bounds_em=[[-2, 2]]).resolved(model)
        out = combined_step(st, cfg, model, metric, self.setpoint())
        geo = bench_geodesic(metric, st.x, st.theta_em)
        raw = adapt_extended(geo, metric, st.theta_em, model, cfg.gamma_em)
        if raw[0] > 0:
            assert out.theta_dot_em[0] == 0.0
        else:
            assert np.allclose(out.theta_dot_em, raw, rtol=1e-10)
