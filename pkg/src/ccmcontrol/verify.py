"""Grid-based certification of contraction conditions for a metric field.

All checks sample a box in (x, theta) space. They certify the dual
contraction inequality, the Killing-field conditions on the input columns,
the metric/parameter coupling identity used by the extended-matched
adaptation law, and invariance of the certificate under matched-parameter
perturbations of the drift. Nothing is proven between grid points; the grid
is the certificate.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import MetricError
from .geometry import MetricField
from .systems import SystemModel, jacobian_fd

__all__ = [
    "VerificationGrid",
    "ContractionReport",
    "MatchedInvarianceReport",
    "check_dual_ccm",
    "check_killing",
    "check_parameter_coupling",
    "check_matched_invariance",
    "certify_rate",
    "null_space_basis",
]


@dataclass
class VerificationGrid:
    """Cartesian sampling box. Each range is (lo, hi, count); count = 1 pins
    the dimension at lo."""

    x_ranges: list
    theta_ranges: list
    eps_psd: float = 1e-8

    def __post_init__(self):
        for lo, hi, count in list(self.x_ranges) + list(self.theta_ranges):
            if not (np.isfinite(lo) and np.isfinite(hi)):
                raise ValueError("grid ranges must be finite")
            if count < 1 or (count >= 2 and hi <= lo):
                raise ValueError(f"bad grid range ({lo}, {hi}, {count})")

    def x_axes(self):
        return [np.linspace(lo, hi, int(count)) for lo, hi, count in self.x_ranges]

    def theta_axes(self):
        return [np.linspace(lo, hi, int(count)) for lo, hi, count in self.theta_ranges]

    def points(self):
        """Yield (x, theta) in lexicographic grid order (x axes outer)."""
        xa = self.x_axes()
        ta = self.theta_axes()
        shape = [a.size for a in xa] + [a.size for a in ta]
        nx = len(xa)
        for idx in np.ndindex(*shape):
            x = np.array([xa[i][idx[i]] for i in range(nx)])
            th = np.array([ta[j][idx[nx + j]] for j in range(len(ta))])
            yield x, th

    @staticmethod
    def benchmark_default(eps_psd: float = 1e-8) -> "VerificationGrid":
        """61 x 41 box over x1 in [-3, 3], th1 in [-2, 2], x2 = x3 = 0."""
        return VerificationGrid(
            x_ranges=[(-3.0, 3.0, 61), (0.0, 0.0, 1), (0.0, 0.0, 1)],
            theta_ranges=[(-2.0, 2.0, 41)],
            eps_psd=eps_psd,
        )


@dataclass
class ContractionReport:
    rate: float
    passed: bool
    max_eigenvalue: float
    worst_x: Optional[np.ndarray] = None
    worst_theta: Optional[np.ndarray] = None
    lambda_certified: Optional[float] = None
    killing_residual_max: Optional[float] = None
    coupling_residual_max: Optional[float] = None

    def summary(self) -> str:
        lines = [
            f"rate lambda        : {self.rate:.6g}",
            f"max eigenvalue     : {self.max_eigenvalue:.6g}",
            f"passed             : {self.passed}",
        ]
        if self.worst_x is not None:
            lines.append(f"worst point x      : {np.array2string(self.worst_x, precision=6)}")
            lines.append(f"worst point theta  : {np.array2string(self.worst_theta, precision=6)}")
        if self.lambda_certified is not None:
            lines.append(f"lambda certified   : {self.lambda_certified:.6g}")
        if self.killing_residual_max is not None:
            lines.append(f"killing residual   : {self.killing_residual_max:.6g}")
        if self.coupling_residual_max is not None:
            lines.append(f"coupling residual  : {self.coupling_residual_max:.6g}")
        return "\n".join(lines)


def null_space_basis(B: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """Orthonormal basis of the left null space of B (columns orthogonal to
    range(B)), shape (n, n - rank)."""
    U, S, _ = np.linalg.svd(B, full_matrices=True)
    rank = int(np.sum(S > tol * max(1.0, S[0] if S.size else 0.0)))
    return U[:, rank:]


def _split_theta(theta: np.ndarray, model: SystemModel, metric: MetricField):
    """Map a grid theta onto (drift theta_em, metric theta).

    The grid carries max(p_em, param_dim) coordinates; each consumer reads its
    prefix, padding with zeros when it needs none.
    """
    need = max(model.p_em, metric.param_dim)
    if theta.size != need:
        raise ValueError(
            f"grid supplies {theta.size} parameter(s), need {need} "
            f"(p_em={model.p_em}, metric params={metric.param_dim})")
    th_em = theta[:model.p_em] if model.p_em else np.zeros(0)
    th_me = theta[:metric.param_dim] if metric.param_dim else np.zeros(0)
    return th_em, th_me


def check_dual_ccm(model: SystemModel, metric: MetricField,
                   grid: VerificationGrid, lam: float,
                   matched_theta=None) -> ContractionReport:
    """Check B_perp^T (A W + W A^T - Wdot + 2 lam W) B_perp <= eps_psd I on
    the grid, with A the drift Jacobian and Wdot the transport of W along the
    drift. The drift includes the extended-matched term for the grid's theta;
    passing `matched_theta` additionally augments it with -B phi^T theta_m
    (certifying the true closed uncertainty, not just the nominal model).
    """
    worst = -np.inf
    worst_x = None
    worst_th = None
    th_m = None if matched_theta is None else np.asarray(matched_theta, float)
    for x, theta in grid.points():
        th_em, th_me = _split_theta(theta, model, metric)
        try:
            W = metric.dual(x, th_me)
        except MetricError as e:
            raise MetricError(f"{e} (grid point x={x.tolist()}, theta={theta.tolist()})") from None
        A = model.drift_jac(x, th_em)
        drift = model.drift(x, th_em)
        if th_m is not None:
            A = A - model.matched_term_jac(x, th_m)
            drift = drift - model.input_matrix(x) @ (model.regressor_m(x).T @ th_m)
        Wx = np.asarray(metric.eval_dual_dx(x, th_me), dtype=float)
        Wdot = np.einsum("iab,i->ab", Wx, drift)
        H = A @ W + W @ A.T - Wdot + 2.0 * lam * W
        Bp = null_space_basis(model.input_matrix(x))
        if Bp.shape[1] == 0:
            continue  # fully actuated point: nothing orthogonal to check
        G = Bp.T @ H @ Bp
        eig = float(np.linalg.eigvalsh(0.5 * (G + G.T))[-1])
        if eig > worst:
            worst = eig
            worst_x = x
            worst_th = theta
    if worst_x is None:
        worst = 0.0
    return ContractionReport(
        rate=float(lam),
        passed=bool(worst <= grid.eps_psd),
        max_eigenvalue=float(worst),
        worst_x=worst_x,
        worst_theta=worst_th,
    )


def check_killing(model: SystemModel, metric: MetricField,
                  grid: VerificationGrid) -> float:
    """Max Frobenius residual of the Killing condition for each input column:

        -d_{b_i} W + W (db_i/dx)^T + (db_i/dx) W = 0.
    """
    worst = 0.0
    for x, theta in grid.points():
        _, th_me = _split_theta(theta, model, metric)
        W = metric.dual(x, th_me)
        Wx = np.asarray(metric.eval_dual_dx(x, th_me), dtype=float)
        B = model.input_matrix(x)
        for i in range(model.m):
            bi = B[:, i]
            Jb = jacobian_fd(lambda z, i=i: model.input_matrix(z)[:, i], x)
            R = -np.einsum("iab,i->ab", Wx, bi) + W @ Jb.T + Jb @ W
            worst = max(worst, float(np.linalg.norm(R)))
    return worst


def check_parameter_coupling(model: SystemModel, metric: MetricField,
                             grid: VerificationGrid) -> float:
    """Max residual of the coupling identity tying the metric's parameter
    dependence to the extended-matched structure:

        dM/dth_i + 2 sym(M b_k r_i^T) = 0,   r_i = (d varrho_i1/dx1, 0, ..., 0).

    This is what lets the adaptation rate be cancelled by feedforward: the
    metric's sensitivity to the estimate is exactly an input-direction term.
    """
    worst = 0.0
    for x, theta in grid.points():
        _, th_me = _split_theta(theta, model, metric)
        bk = model.b_k(x)
        dr = np.asarray(model.varrho_dx1(x), dtype=float).reshape(model.p_em)
        M = metric.metric(x, th_me)
        if metric.param_dim == 0:
            Mt = np.zeros((0, metric.dim, metric.dim))
        else:
            Mt = metric.metric_dtheta(x, th_me)
        count = max(model.p_em, metric.param_dim)
        for i in range(count):
            left = Mt[i] if i < metric.param_dim else np.zeros((metric.dim, metric.dim))
            r = np.zeros(metric.dim)
            if i < model.p_em:
                r[0] = dr[i]
            C = np.outer(M @ bk, r)
            R = left + (C + C.T)
            worst = max(worst, float(np.linalg.norm(R)))
    return worst


@dataclass
class MatchedInvarianceReport:
    nominal: ContractionReport
    samples: list  # (theta_m, ContractionReport) pairs
    passed: bool


def check_matched_invariance(model: SystemModel, metric: MetricField,
                             grid: VerificationGrid, lam: float,
                             theta_m_samples: Sequence) -> MatchedInvarianceReport:
    """Re-run the dual contraction check with the drift augmented by the
    matched term -B phi^T theta_m for each sampled theta_m. Passes iff every
    augmented check agrees in pass/fail with the nominal one (the Killing
    condition should make matched terms drop out of the projected block).
    """
    nominal = check_dual_ccm(model, metric, grid, lam)
    runs = []
    ok = True
    for th_m in theta_m_samples:
        rep = check_dual_ccm(model, metric, grid, lam, matched_theta=th_m)
        runs.append((np.asarray(th_m, float), rep))
        ok = ok and (rep.passed == nominal.passed)
    return MatchedInvarianceReport(nominal=nominal, samples=runs, passed=ok)


def certify_rate(model: SystemModel, metric: MetricField,
                 grid: VerificationGrid, lo: float = 0.0, hi: float = 5.0,
                 resolution: float = 1e-3) -> ContractionReport:
    """Largest contraction rate passing on the grid, by bisection on
    [lo, hi] to the given resolution. The returned report is evaluated at the
    certified rate, with lambda_certified set (None if even `lo` fails).
    The inequality is monotone in the rate since W is positive definite,
    which is what makes bisection valid.
    """
    rep_lo = check_dual_ccm(model, metric, grid, lo)
    if not rep_lo.passed:
        rep_lo.lambda_certified = None
        return rep_lo
    rep_hi = check_dual_ccm(model, metric, grid, hi)
    if rep_hi.passed:
        rep_hi.lambda_certified = hi
        return rep_hi
    a, b = lo, hi
    best = rep_lo
    while b - a > resolution:
        mid = 0.5 * (a + b)
        rep = check_dual_ccm(model, metric, grid, mid)
        if rep.passed:
            a, best = mid, rep
        else:
            b = mid
    best.lambda_certified = a
    return best
