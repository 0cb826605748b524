"""Geodesic feedback and adaptation laws.

The controller works on the minimizing geodesic gamma from the desired state
(s = 0) to the current state (s = 1). Its endpoint tangent, weighted by the
metric, drives everything: the min-norm stabilizing input, the matched and
extended-matched adaptation laws, the robust term, and the feedforward that
cancels the metric's dependence on the moving parameter estimate.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import InfeasibleConstraint, InvariantViolation
from .geometry import (DEFAULT_NUM_NODES, DEFAULT_QUAD_ORDER, Geodesic,
                       GeodesicSolver, MetricField, QuadratureRule,
                       chebyshev_lobatto, clenshaw_curtis,
                       interpolation_matrix)
from .systems import Setpoint, SystemModel

__all__ = [
    "ControllerConfig",
    "ControlOutput",
    "min_norm_input",
    "adapt_matched",
    "adapt_extended",
    "robust_term",
    "extended_feedforward",
    "apply_deadzone",
    "apply_projection",
    "combined_step",
]


def _gain_vector(gamma, size: int, label: str) -> np.ndarray:
    """Accept a positive scalar, vector, or diagonal matrix of gains."""
    if gamma is None:
        return np.ones(size)
    g = np.asarray(gamma, dtype=float)
    if g.ndim == 2:
        if not np.allclose(g, np.diag(np.diag(g))):
            raise ValueError(f"{label} must be diagonal")
        g = np.diag(g)
    g = np.atleast_1d(g)
    if g.size == 1 and size != 1:
        g = np.full(size, float(g[0]))
    if g.shape != (size,):
        raise ValueError(f"{label} must have {size} entries")
    if np.any(g <= 0):
        raise ValueError(f"{label} entries must be positive")
    return g


def _bounds_array(bounds, size: int, label: str):
    if bounds is None:
        return None
    b = np.asarray(bounds, dtype=float).reshape(size, 2)
    if np.any(b[:, 0] > b[:, 1]):
        raise ValueError(f"{label} has lower bound above upper bound")
    return b


@dataclass
class ControllerConfig:
    """Gains, bounds, and mode switches for the combined controller.

    lam is the contraction rate enforced by the min-norm constraint; gamma_m
    and gamma_em are diagonal adaptation gains; kappa the robust gain with
    energy-offset constant K = m / (2 kappa); deadzone_radius the tangent
    threshold below which adaptation freezes; theta_bounds_* optional
    (p, 2) boxes for projection.
    """

    lam: float = 0.1
    gamma_m: Optional[np.ndarray] = None
    gamma_em: Optional[np.ndarray] = None
    kappa: float = 1.0
    deadzone_radius: float = 0.0
    theta_bounds_m: Optional[np.ndarray] = None
    theta_bounds_em: Optional[np.ndarray] = None
    adapt_m: bool = True
    adapt_em: bool = True
    robust: bool = False
    deadzone: bool = False
    projection: bool = False
    deadzone_norm: str = "euclidean"

    def __post_init__(self):
        if self.lam <= 0:
            raise ValueError("contraction rate lam must be positive")
        if self.kappa < 0:
            raise ValueError("kappa must be nonnegative")
        if self.robust and self.kappa == 0:
            raise ValueError("robust mode requires kappa > 0")
        if self.deadzone_radius < 0:
            raise ValueError("deadzone radius must be nonnegative")
        if self.deadzone_norm not in ("euclidean", "metric"):
            raise ValueError("deadzone_norm must be 'euclidean' or 'metric'")

    def resolved(self, model: SystemModel) -> "ControllerConfig":
        """Copy with gains/bounds materialized against the model's sizes."""
        return ControllerConfig(
            lam=self.lam,
            gamma_m=_gain_vector(self.gamma_m, model.p_m, "gamma_m"),
            gamma_em=_gain_vector(self.gamma_em, model.p_em, "gamma_em"),
            kappa=self.kappa,
            deadzone_radius=self.deadzone_radius,
            theta_bounds_m=_bounds_array(self.theta_bounds_m, model.p_m, "theta_bounds_m"),
            theta_bounds_em=_bounds_array(self.theta_bounds_em, model.p_em, "theta_bounds_em"),
            adapt_m=self.adapt_m,
            adapt_em=self.adapt_em,
            robust=self.robust,
            deadzone=self.deadzone,
            projection=self.projection,
            deadzone_norm=self.deadzone_norm,
        )


@dataclass
class ControlOutput:
    """Everything one controller evaluation produces.

    gs1_norm is the endpoint-tangent magnitude in the norm the deadzone
    tests (Euclidean unless deadzone_norm = 'metric'); constraint_slack is
    a^T u - b for the active min-norm constraint, <= 0 when satisfied.
    """

    u: np.ndarray
    u_ccm: np.ndarray
    theta_dot_m: np.ndarray
    theta_dot_em: np.ndarray
    E: float
    constraint_slack: float
    geodesic_converged: bool
    geodesic_iterations: int
    gs1_norm: float = 0.0
    deadzone_active: bool = False


def _constraint_terms(geo: Geodesic, metric: MetricField, theta_em,
                      model: SystemModel, setpoint: Setpoint, lam: float):
    """(a, b) of the half-space a^T u <= b equivalent to Edot <= -2 lam E.

    Written in the doubled convention: a = 2 B^T M1 gs1 and
    b = -2 lam E - 2 gs1^T M1 [f - varrho^T th_em + B u_d] + 2 gs0^T M0 xdot_d,
    where Edot = 2 gs1^T M1 xdot - 2 gs0^T M0 xdot_d along trajectories.
    """
    x = geo.q
    M1 = metric.metric(x, theta_em)
    M0 = metric.metric(geo.p, theta_em)
    B = model.input_matrix(x)
    drift = model.drift(x, theta_em)
    w1 = M1 @ geo.tangent1
    a = 2.0 * (B.T @ w1)
    b = (-2.0 * lam * geo.energy
         - 2.0 * float(w1 @ (drift + B @ setpoint.u_d))
         + 2.0 * float((M0 @ geo.tangent0) @ setpoint.xdot_d))
    return a, b


def min_norm_input(geo: Geodesic, metric: MetricField, theta_em,
                   model: SystemModel, setpoint: Setpoint, lam: float):
    """Smallest input satisfying the geodesic energy-decrease constraint.

    Solves min u^T u s.t. a^T u <= b (one affine constraint, closed form):
    u = 0 when the constraint is slack at zero, else the projection
    u = (b / ||a||^2) a onto the boundary. Returns (u_ccm, slack) with
    slack = a^T u - b <= 0 at the solution; the enforced inequality is
    Edot <= -2 lam E along the closed loop.

    Raises InfeasibleConstraint when decrease is required (b < 0) but the
    input has no authority on the geodesic tangent (||a|| ~ 0).
    """
    a, b = _constraint_terms(geo, metric, theta_em, model, setpoint, lam)
    if b >= 0.0:
        u = np.zeros(model.m)
        return u, float(-b)
    norm2 = float(a @ a)
    if norm2 <= 1e-24:
        raise InfeasibleConstraint(
            f"energy decrease required (b={b:.3e}) but input direction vanished at x={geo.q.tolist()}")
    u = (b / norm2) * a
    return u, float(a @ u - b)


def adapt_matched(geo: Geodesic, metric: MetricField, theta_em,
                  model: SystemModel, gamma_m) -> np.ndarray:
    """Matched adaptation law: th_m_dot = -Gamma_m phi(x) B^T M1 gs1."""
    g = _gain_vector(gamma_m, model.p_m, "gamma_m")
    x = geo.q
    M1 = metric.metric(x, theta_em)
    proj = model.input_matrix(x).T @ (M1 @ geo.tangent1)
    return -g * (model.regressor_m(x) @ proj)


def adapt_extended(geo: Geodesic, metric: MetricField, theta_em,
                   model: SystemModel, gamma_em) -> np.ndarray:
    """Extended-matched adaptation law: th_em_dot = -Gamma_em varrho(x) M1 gs1."""
    g = _gain_vector(gamma_em, model.p_em, "gamma_em")
    x = geo.q
    M1 = metric.metric(x, theta_em)
    return -g * (model.regressor_em(x) @ (M1 @ geo.tangent1))


def robust_term(geo: Geodesic, metric: MetricField, theta_em,
                model: SystemModel, kappa: float) -> np.ndarray:
    """Per-channel robust input u_i = -kappa b_i^T M1 gs1 ||phi_i||^2.

    With this term and estimates frozen anywhere in the bound box, the energy
    obeys Edot <= -2 lam E + K ||width||^2 with K = m / (2 kappa).
    """
    x = geo.q
    M1 = metric.metric(x, theta_em)
    proj = model.input_matrix(x).T @ (M1 @ geo.tangent1)   # (m,)
    phi = model.regressor_m(x)                             # (p_m, m)
    col_norm2 = np.einsum("ij,ij->j", phi, phi)
    return -kappa * proj * col_norm2


def robust_offset_constant(model: SystemModel, kappa: float) -> float:
    """K = m / (2 kappa), the energy-rate offset constant of the robust law."""
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    return model.m / (2.0 * kappa)


def extended_feedforward(geo: Geodesic, theta_dot_em, model: SystemModel,
                         rule: QuadratureRule | None = None) -> np.ndarray:
    """Input correction cancelling the metric's motion under adaptation:

        u_ff = indicator * sum_i th_em_dot_i * int_0^1 r_i(gamma(s)) . gamma_s(s) ds,

    with r_i = (d varrho_i1 / dx1, 0, ..., 0). When d varrho_i1/dx1 is
    constant the integral telescopes to that constant times (x_1 - x_d1),
    independent of the geodesic's shape.
    """
    rates = np.atleast_1d(np.asarray(theta_dot_em, dtype=float))
    if rates.size == 0 or not np.any(rates):
        return np.zeros(model.m)
    if rule is None:
        rule = clenshaw_curtis(DEFAULT_QUAD_ORDER)
    s, D = chebyshev_lobatto(geo.nodes.shape[0])
    P = interpolation_matrix(s, rule.abscissae)
    C = P @ geo.nodes
    V1 = (P @ D @ geo.nodes)[:, 0]       # first tangent component at abscissae
    dr = np.array([np.asarray(model.varrho_dx1(c), dtype=float).reshape(model.p_em)
                   for c in C])          # (K, p_em)
    integrals = rule.weights @ (dr * V1[:, None])
    return model.indicator * float(rates @ integrals)


def apply_deadzone(theta_dot_m, theta_dot_em, gs1, radius: float,
                   norm: str = "euclidean", metric_matrix=None):
    """Zero both adaptation rates when the endpoint tangent is inside the
    deadzone, boundary inclusive. `norm` selects the Euclidean tangent norm
    or the metric norm sqrt(gs1^T M gs1) (pass M via metric_matrix)."""
    gs1 = np.asarray(gs1, dtype=float)
    if norm == "metric":
        if metric_matrix is None:
            raise ValueError("metric deadzone norm needs the endpoint metric")
        measure = float(np.sqrt(max(gs1 @ (metric_matrix @ gs1), 0.0)))
    else:
        measure = float(np.linalg.norm(gs1))
    if measure <= radius:
        return (np.zeros_like(np.atleast_1d(theta_dot_m)),
                np.zeros_like(np.atleast_1d(theta_dot_em)), True)
    return (np.atleast_1d(np.asarray(theta_dot_m, float)),
            np.atleast_1d(np.asarray(theta_dot_em, float)), False)


def apply_projection(theta, theta_dot, bounds) -> np.ndarray:
    """Zero rate components that point out of the bound box at its faces.

    Per coordinate: rate -> 0 iff (theta_i at the upper bound and rate > 0)
    or (theta_i at the lower bound and rate < 0); inward and interior rates
    pass through. The estimate itself must already be inside the box (up to
    1e-9, else the upstream integrator broke the invariant).
    """
    if bounds is None:
        return np.atleast_1d(np.asarray(theta_dot, float))
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    rate = np.array(np.atleast_1d(theta_dot), dtype=float, copy=True)
    b = np.asarray(bounds, dtype=float).reshape(theta.size, 2)
    over = np.maximum(theta - b[:, 1], b[:, 0] - theta)
    if np.any(over > 1e-9):
        i = int(np.argmax(over))
        raise InvariantViolation(
            f"estimate component {i} = {theta[i]!r} outside bounds "
            f"[{b[i, 0]!r}, {b[i, 1]!r}]")
    at_hi = theta >= b[:, 1] - 1e-12
    at_lo = theta <= b[:, 0] + 1e-12
    rate[at_hi & (rate > 0)] = 0.0
    rate[at_lo & (rate < 0)] = 0.0
    return rate


def combined_step(state, config: ControllerConfig, model: SystemModel,
                  metric: MetricField, setpoint: Setpoint,
                  solver: GeodesicSolver | None = None,
                  rule: QuadratureRule | None = None) -> ControlOutput:
    """One controller evaluation at the given adaptive state.

    Order: geodesic -> adaptation rates (extended first; the input depends
    algebraically on the extended rate) -> deadzone -> projection ->
    min-norm input -> feedforward assembly

        u = u_d + u_ccm + u_ff(th_em_dot) + phi(x)^T th_m_hat [+ robust].
    """
    if solver is None:
        solver = GeodesicSolver(metric)
    geo = solver.solve(setpoint.x_d, state.x, theta=state.theta_em)

    rate_em = np.zeros(model.p_em)
    rate_m = np.zeros(model.p_m)
    if config.adapt_em and model.p_em:
        rate_em = adapt_extended(geo, metric, state.theta_em, model, config.gamma_em)
    if config.adapt_m and model.p_m:
        rate_m = adapt_matched(geo, metric, state.theta_em, model, config.gamma_m)

    deadzone_active = False
    gs1_norm = float(np.linalg.norm(geo.tangent1))
    if config.deadzone:
        if config.deadzone_norm == "metric":
            m_end = metric.metric(geo.q, state.theta_em)
            gs1_norm = float(np.sqrt(max(geo.tangent1 @ (m_end @ geo.tangent1), 0.0)))
        else:
            m_end = None
        rate_m, rate_em, deadzone_active = apply_deadzone(
            rate_m, rate_em, geo.tangent1, config.deadzone_radius,
            norm=config.deadzone_norm, metric_matrix=m_end)
    if config.projection:
        rate_m = apply_projection(state.theta_m, rate_m, config.theta_bounds_m)
        rate_em = apply_projection(state.theta_em, rate_em, config.theta_bounds_em)

    u_ccm, slack = min_norm_input(geo, metric, state.theta_em, model, setpoint, config.lam)
    u = setpoint.u_d + u_ccm
    if model.p_em:
        u = u + extended_feedforward(geo, rate_em, model, rule)
    if model.p_m:
        u = u + model.regressor_m(state.x).T @ state.theta_m
    if config.robust:
        u = u + robust_term(geo, metric, state.theta_em, model, config.kappa)

    return ControlOutput(
        u=u,
        u_ccm=u_ccm,
        theta_dot_m=rate_m,
        theta_dot_em=rate_em,
        E=geo.energy,
        constraint_slack=slack,
        geodesic_converged=geo.converged,
        geodesic_iterations=geo.iterations,
        gs1_norm=gs1_norm,
        deadzone_active=deadzone_active,
    )
