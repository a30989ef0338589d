import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose

from rgflow import oracles
from rgflow.errors import QuadratureOverflowError
from rgflow.potential import (PotentialDescriptor, QuadratureRule,
                              renormalized_derivatives, renormalized_value,
                              tilted_moments)

GAUSS_MOMENTS = {0: 1.0, 1: 0.0, 2: 1.0, 3: 0.0, 4: 3.0, 5: 0.0, 6: 15.0}


@pytest.mark.parametrize("degree", sorted(GAUSS_MOMENTS))
def test_quadrature_monomial_exactness(degree):
    q = QuadratureRule(order=4, dimension=1)  # exact through degree 7
    nodes, logw = q.rule(1)
    got = float(np.exp(logw) @ nodes[:, 0] ** degree)
    assert_allclose(got, GAUSS_MOMENTS[degree], atol=1e-12)


def test_quadrature_tensor_mixed_moment():
    q = QuadratureRule(order=5, dimension=2)
    nodes, logw = q.rule(2)
    w = np.exp(logw)
    assert_allclose(w @ (nodes[:, 0] ** 2 * nodes[:, 1] ** 4), 3.0, atol=1e-12)
    assert_allclose(w.sum(), 1.0, atol=1e-13)


@settings(max_examples=20, deadline=None)
@given(st.integers(min_value=1, max_value=6))
def test_quadrature_exactness_property(k):
    q = QuadratureRule(order=8, dimension=1)
    nodes, logw = q.rule(1)
    got = float(np.exp(logw) @ nodes[:, 0] ** k)
    assert abs(got - GAUSS_MOMENTS[k]) < 1e-10


def test_quadrature_rejects_high_dimension():
    with pytest.raises(ValueError, match="capped"):
        QuadratureRule(order=10, dimension=4)


def test_zero_potential_smooths_to_zero():
    V0 = PotentialDescriptor.zero(2)
    q = QuadratureRule(order=12, dimension=2)
    c = np.array([[0.8, 0.1], [0.1, 0.5]])
    assert renormalized_value(V0, c, [0.3, -1.2], q) == 0.0
    g, h = renormalized_derivatives(V0, c, [0.3, -1.2], q)
    assert_allclose(g, 0.0)
    assert_allclose(h, 0.0)


def test_quadratic_value_matches_oracle_both_paths():
    V0 = PotentialDescriptor.quadratic([[1.0]])
    q = QuadratureRule(order=40, dimension=1)
    want, wg, wh = oracles.gaussian_smoothed_quadratic(1.0, 1.0, 1.0)
    for method in ("auto", "quadrature"):
        got = renormalized_value(V0, [[1.0]], [1.0], q, method=method)
        assert_allclose(got, want, atol=1e-10)
    g, h = renormalized_derivatives(V0, [[1.0]], [1.0], q, method="quadrature")
    assert_allclose(g[0], wg, atol=1e-10)
    assert_allclose(h[0, 0], wh, atol=1e-10)


def test_zero_covariance_returns_base_potential():
    V0 = PotentialDescriptor.quartic(1.0, -0.3, 0.2, dimension=1)
    q = QuadratureRule(order=24, dimension=1)
    x = np.array([1.7])
    got = renormalized_value(V0, [[0.0]], x, q)
    assert_allclose(got, V0.value(x), rtol=1e-14)


def test_quartic_value_matches_adaptive_oracle():
    V0 = PotentialDescriptor.quartic(1.0, 0.0, 0.0, dimension=1)
    q = QuadratureRule(order=80, dimension=1)
    got = renormalized_value(V0, [[0.5]], [0.0], q)
    want = oracles.quartic_site_value(1.0, 0.0, 0.0, 0.5, 0.0)
    assert abs(got - want) < 1e-8


def test_quartic_hessian_matches_tilted_identity_oracle():
    # hess V_t = 1/c - var/c^2 for the single-site tilted measure
    c = 0.5
    V0 = PotentialDescriptor.quartic(1.0, 0.0, 0.0, dimension=1)
    q = QuadratureRule(order=80, dimension=1)
    _, h = renormalized_derivatives(V0, [[c]], [0.7], q)
    _, var = oracles.quartic_site_moments(1.0, 0.0, 0.0, c, 0.7)
    assert abs(h[0, 0] - (1.0 / c - var / c**2)) < 1e-6


def test_convexity_preserved_for_quadratic_base():
    b = np.array([[1.0, 0.4], [0.4, 0.7]])
    V0 = PotentialDescriptor.quadratic(b)
    q = QuadratureRule(order=20, dimension=2)
    rng = np.random.default_rng(3)
    for c_scale in (0.0, 0.3, 2.0):
        c = c_scale * np.eye(2)
        xs = rng.uniform(-3, 3, size=(20, 2))
        _, hess = renormalized_derivatives(V0, c, xs, q, method="quadrature")
        for hm in hess:
            assert np.linalg.eigvalsh(hm)[0] >= -1e-10


def test_order_doubling_stability():
    V0 = PotentialDescriptor.quartic(1.0, -1.0, 0.0, dimension=1)
    xs = np.linspace(-3.0, 3.0, 11).reshape(-1, 1)
    v1 = renormalized_value(V0, [[0.5]], xs, QuadratureRule(order=80, dimension=1))
    v2 = renormalized_value(V0, [[0.5]], xs, QuadratureRule(order=160, dimension=1))
    assert np.max(np.abs(v1 - v2)) < 1e-8


def test_tilted_hessian_matches_finite_differences():
    V0 = PotentialDescriptor.quartic(0.8, -0.5, 0.1, dimension=1)
    q = QuadratureRule(order=80, dimension=1)
    c = [[0.6]]
    rng = np.random.default_rng(11)
    for x in rng.uniform(-2, 2, size=4):
        _, h = renormalized_derivatives(V0, c, [x], q)
        eps = 1e-3
        vp = renormalized_value(V0, c, [x + eps], q)
        v0 = renormalized_value(V0, c, [x], q)
        vm = renormalized_value(V0, c, [x - eps], q)
        fd = (vp - 2 * v0 + vm) / eps**2
        assert abs(h[0, 0] - fd) / max(abs(fd), 1e-12) < 1e-5


def test_gradient_matches_finite_differences_2d():
    V0 = PotentialDescriptor.quartic([1.0, 0.5], [0.2, -0.1], [0.0, 0.3],
                                     dimension=2)
    q = QuadratureRule(order=24, dimension=2)
    c = np.array([[0.5, 0.1], [0.1, 0.4]])
    x = np.array([0.4, -0.8])
    g, _ = renormalized_derivatives(V0, c, x, q)
    eps = 1e-5
    for k in range(2):
        e = np.zeros(2)
        e[k] = eps
        fd = (renormalized_value(V0, c, x + e, q)
              - renormalized_value(V0, c, x - e, q)) / (2 * eps)
        assert abs(g[k] - fd) < 1e-6


def test_tilted_moments_match_oracle():
    V0 = PotentialDescriptor.quartic(1.0, 0.0, 0.0, dimension=1)
    q = QuadratureRule(order=100, dimension=1)
    log_mass, mean, cov = tilted_moments(V0, [[0.5]], [0.7], q)
    m_or, v_or = oracles.quartic_site_moments(1.0, 0.0, 0.0, 0.5, 0.7)
    assert abs(mean[0] - m_or) < 1e-9
    assert abs(cov[0, 0] - v_or) < 1e-9
    assert abs(-log_mass
               - oracles.quartic_site_value(1.0, 0.0, 0.0, 0.5, 0.7)) < 1e-9


@pytest.mark.filterwarnings("ignore:overflow encountered")
def test_overflow_reports_exponent():
    V0 = PotentialDescriptor.quartic(1.0, 0.0, 0.0, dimension=1)
    q = QuadratureRule(order=8, dimension=1)
    with pytest.raises(QuadratureOverflowError, match="order"):
        renormalized_value(V0, [[1.0]], [1e100], q)


def test_dimension_mismatch_rejected():
    V0 = PotentialDescriptor.quartic(1.0, 0.0, 0.0, dimension=2)
    with pytest.raises(ValueError, match="dimension"):
        V0.value([1.0, 2.0, 3.0])


def test_quartic_requires_nonnegative_coefficient():
    with pytest.raises(ValueError, match="nonnegative"):
        PotentialDescriptor.quartic(-1.0, 0.0, 0.0, dimension=1)
