from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.optimize import minimize_scalar

from boundary_infer.errors import DegenerateDirectionError
from boundary_infer.gof_quadratic import (
    Dataset,
    assemble,
    beta_hat,
    gof_derivative,
    gof_value,
    influence_column_full,
    second_derivative,
)


class _Fits:
    def __init__(self, mu_y, mu_h):
        self.mu_y = mu_y
        self.mu_h = mu_h


def _instance(seed, n=30, J=3):
    rng = np.random.default_rng(seed)
    data = Dataset(rng.standard_normal((n, 1)), rng.standard_normal((n, 1)), rng.standard_normal(n))
    H = rng.standard_normal((n, J))
    fits = _Fits(0.3 * rng.standard_normal(n), 0.3 * rng.standard_normal((n, J)))
    return data, H, fits, rng


def _direct_gof(data, H, fits, a, beta):
    # oracle: the one-step criterion straight from its definition
    r = data.y - fits.mu_y
    f = H @ a
    muf = fits.mu_h @ a
    return np.mean((r - beta * f) ** 2 + 2 * beta * r * muf)


@given(st.integers(0, 10_000), st.floats(-3, 3))
def test_quadratic_matches_definition(seed, beta):
    data, H, fits, rng = _instance(seed)
    g = assemble(data, H, fits)
    a = rng.standard_normal(3)
    assert gof_value(g, a, beta) == pytest.approx(_direct_gof(data, H, fits, a, beta), rel=1e-10, abs=1e-10)


@given(st.integers(0, 10_000))
def test_beta_hat_is_minimiser_and_ratio_identity(seed):
    data, H, fits, rng = _instance(seed)
    g = assemble(data, H, fits)
    a = rng.standard_normal(3)
    b = beta_hat(g, a)
    res = minimize_scalar(lambda t: gof_value(g, a, t), bracket=(-10, 10), tol=1e-12)
    assert abs(res.x - b) <= 1e-6
    lhs = (gof_value(g, a, 0.0) - gof_value(g, a, b)) * (a @ g.H1 @ a)
    assert lhs == pytest.approx((g.H2 @ a) ** 2, rel=1e-10, abs=1e-12)


@given(st.integers(0, 10_000), st.floats(-2, 2))
def test_derivatives_match_finite_differences(seed, beta):
    data, H, fits, rng = _instance(seed)
    g = assemble(data, H, fits)
    a = rng.standard_normal(3)
    h = 1e-5
    fd1 = (gof_value(g, a, beta + h) - gof_value(g, a, beta - h)) / (2 * h)
    fd2 = (gof_value(g, a, beta + h) - 2 * gof_value(g, a, beta) + gof_value(g, a, beta - h)) / h**2
    assert gof_derivative(g, a, beta) == pytest.approx(fd1, rel=1e-6, abs=1e-8)
    assert second_derivative(g, a) == pytest.approx(fd2, rel=1e-4, abs=1e-5)


def test_phi_columns_centred_and_formula():
    data, H, fits, _ = _instance(1)
    g = assemble(data, H, fits)
    np.testing.assert_allclose(g.Phi.mean(axis=0), 0.0, atol=1e-14)
    r = data.y - fits.mu_y
    expect = -2 * (r[:, None] * (H - fits.mu_h) - g.H2)
    np.testing.assert_allclose(g.Phi, expect, atol=1e-14)
    # Phi is the beta-derivative of the full influence column at 0
    a = np.array([0.5, -1.0, 2.0])
    h = 1e-6
    fd = (influence_column_full(g, a, h) - influence_column_full(g, a, -h)) / (2 * h)
    np.testing.assert_allclose(fd, g.Phi @ a, rtol=1e-6, atol=1e-7)


@given(st.integers(0, 10_000), st.floats(-3, 3))
def test_influence_column_has_mean_zero(seed, beta):
    data, H, fits, rng = _instance(seed)
    g = assemble(data, H, fits)
    a = rng.standard_normal(3)
    assert abs(influence_column_full(g, a, beta).mean()) < 1e-10


def test_influence_at_zero_is_centred_squared_residual():
    data, H, fits, _ = _instance(2)
    g = assemble(data, H, fits)
    r = data.y - fits.mu_y
    np.testing.assert_allclose(influence_column_full(g, np.ones(3), 0.0), r**2 - np.mean(r**2))


def test_degenerate_direction():
    data, H, fits, _ = _instance(3)
    g = assemble(data, H, fits)
    with pytest.raises(DegenerateDirectionError):
        beta_hat(g, np.zeros(3))


def test_validation():
    with pytest.raises(ValueError):
        Dataset(np.zeros((3, 1)), np.zeros((4, 1)), np.zeros(3))
    with pytest.raises(ValueError):
        Dataset(np.zeros((3, 1)), np.zeros((3, 1)), np.array([0.0, np.nan, 1.0]))
    data, H, fits, _ = _instance(4)
    with pytest.raises(ValueError):
        assemble(data, H[:5], fits)
    g = assemble(data, H, fits)
    with pytest.raises(ValueError):
        gof_value(g, [1.0], 0.5)
