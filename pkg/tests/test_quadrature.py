"""Quadrature and spectral differentiation checks.

Oracles are closed forms: the integral of s^k over [0,1] is 1/(k+1) and the
derivative of s^k is k s^(k-1), so exactness claims need no reference data.
"""

import numpy as np
import pytest

from ccmcontrol.geometry import (chebyshev_lobatto, clenshaw_curtis,
                                 interpolation_matrix)


def test_order3_weights_closed_form():
    rule = clenshaw_curtis(3)
    assert np.allclose(rule.abscissae, [0.0, 0.5, 1.0])
    assert np.allclose(rule.weights, [1.0 / 6.0, 4.0 / 6.0, 1.0 / 6.0])


def test_order2_is_trapezoid():
    rule = clenshaw_curtis(2)
    assert np.allclose(rule.abscissae, [0.0, 1.0])
    assert np.allclose(rule.weights, [0.5, 0.5])


@pytest.mark.parametrize("order", [2, 3, 5, 9, 17, 33])
def test_weights_sum_to_interval_length(order):
    rule = clenshaw_curtis(order)
    assert abs(rule.weights.sum() - 1.0) < 1e-14
    assert rule.abscissae[0] == 0.0 and rule.abscissae[-1] == 1.0
    assert np.all(np.diff(rule.abscissae) > 0)


@pytest.mark.parametrize("order", [3, 5, 9, 17])
def test_polynomial_exactness_up_to_order_minus_one(order):
    rule = clenshaw_curtis(order)
    for k in range(order):
        approx = rule.weights @ rule.abscissae**k
        assert abs(approx - 1.0 / (k + 1)) < 1e-13, f"degree {k}"


def test_cubic_with_order5_matches_antiderivative():
    rule = clenshaw_curtis(5)
    assert abs(rule.weights @ rule.abscissae**3 - 0.25) < 1e-15


def test_order_below_two_rejected():
    with pytest.raises(ValueError):
        clenshaw_curtis(1)


@pytest.mark.parametrize("count", [3, 5, 9, 13])
def test_differentiation_matrix_exact_on_polynomials(count):
    s, D = chebyshev_lobatto(count)
    assert np.allclose(s[0], 0.0) and np.allclose(s[-1], 1.0)
    assert np.all(np.diff(s) > 0)
    for k in range(count):
        u = s**k
        du = np.zeros_like(s) if k == 0 else k * s ** (k - 1)
        assert np.max(np.abs(D @ u - du)) < 1e-10 * max(1.0, count**2), f"degree {k}"


def test_interpolation_exact_for_polynomials_and_at_nodes():
    s, _ = chebyshev_lobatto(9)
    targets = np.linspace(0.0, 1.0, 33)
    P = interpolation_matrix(s, targets)
    for k in range(9):
        assert np.max(np.abs(P @ s**k - targets**k)) < 1e-12
    # rows at coinciding targets are unit vectors
    P_self = interpolation_matrix(s, s)
    assert np.allclose(P_self, np.eye(9))


def test_interpolation_converges_for_smooth_function():
    s, _ = chebyshev_lobatto(17)
    targets = np.linspace(0.0, 1.0, 101)
    P = interpolation_matrix(s, targets)
    f = np.exp(np.sin(3.0 * s))
    exact = np.exp(np.sin(3.0 * targets))
    assert np.max(np.abs(P @ f - exact)) < 1e-6
