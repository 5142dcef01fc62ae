from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from boundary_infer.errors import SingularConstraintError
from boundary_infer.rank1_qcqp import (
    ConstraintPencil,
    Rank1Problem,
    project_ellipsoid,
    solve,
    solve_batch,
)


def _spd(rng, J, cond=10.0):
    Q, _ = np.linalg.qr(rng.standard_normal((J, J)))
    return Q @ np.diag(np.geomspace(1.0, cond, J) * rng.uniform(0.5, 2)) @ Q.T


def _random_problem(seed, J=None):
    rng = np.random.default_rng(seed)
    J = J or int(rng.integers(1, 4))
    return Rank1Problem(rng.standard_normal(J), _spd(rng, J), _spd(rng, J),
                        float(rng.uniform(0.2, 5)), float(rng.uniform(0.2, 5)))


def test_hand_worked_example():
    # L-constraint alone gives b^T L^{-1} b = 1 + 1/4 at a = (1, 1/4)/sqrt(1.25),
    # which also satisfies a^T a = 0.85 <= 1
    sol = solve(Rank1Problem([1.0, 1.0], np.diag([1.0, 4.0]), np.eye(2)))
    assert sol.value == pytest.approx(1.25, rel=1e-9)
    np.testing.assert_allclose(sol.a_star, np.array([1.0, 0.25]) / np.sqrt(1.25), atol=1e-6)
    assert sol.active == ("complexity",)


def test_single_constraint_closed_form():
    rng = np.random.default_rng(0)
    for _ in range(20):
        J = 3
        b, L = rng.standard_normal(J), _spd(rng, J)
        c = 2.5
        sol = solve(Rank1Problem(b, L, 1e-9 * np.eye(J), c, 1.0))
        assert sol.value == pytest.approx(c * b @ np.linalg.solve(L, b), rel=1e-9)


def _grid_oracle(p: Rank1Problem, k=2001, zooms=6):
    """Polar grid over directions scaled to the feasible boundary, zoomed around the best."""
    if p.b.shape[0] == 1:
        return float(p.b[0] ** 2 / max(p.L[0, 0] / p.c_L, p.Q[0, 0] / p.c_Q))

    def values(th):
        d = np.column_stack([np.cos(th), np.sin(th)])
        qL = np.einsum("ij,jk,ik->i", d, p.L, d) / p.c_L
        qQ = np.einsum("ij,jk,ik->i", d, p.Q, d) / p.c_Q
        return (d @ p.b) ** 2 / np.maximum(qL, qQ)

    th = np.linspace(0, np.pi, k)
    width = np.pi / (k - 1)
    for _ in range(zooms):
        v = values(th)
        c = th[int(np.argmax(v))]
        th = np.linspace(c - 2 * width, c + 2 * width, k)
        width = 4 * width / (k - 1)
    return float(values(th).max())


@pytest.mark.parametrize("seed", range(15))
def test_two_dimensional_grid_oracle(seed):
    p = _random_problem(seed, J=2)
    assert solve(p).value == pytest.approx(_grid_oracle(p), rel=1e-6)


@given(st.integers(0, 100_000))
def test_feasible_and_certified(seed):
    p = _random_problem(seed)
    sol = solve(p)
    a = sol.a_star
    assert a @ p.L @ a <= p.c_L * (1 + 1e-9)
    assert a @ p.Q @ a <= p.c_Q * (1 + 1e-9)
    assert sol.value == pytest.approx(float(p.b @ a) ** 2, rel=1e-12)
    assert p.b @ a >= 0
    assert sol.certified and sol.gap <= 1e-6 * max(sol.value, 1e-300)


@given(st.integers(0, 100_000), st.floats(0.0, 1.0))
def test_weak_duality(seed, t):
    # every dual value bounds every feasible primal value
    p = _random_problem(seed)
    pencil = ConstraintPencil(p.L, p.Q, p.c_L, p.c_Q)
    assert pencil.dual_raw(p.b, t) >= solve(p).value * (1 - 1e-9)


@given(st.integers(0, 100_000), st.floats(0.1, 10.0))
def test_homogeneity(seed, c):
    p = _random_problem(seed)
    base = solve(p).value
    scaled = solve(Rank1Problem(c * p.b, p.L, p.Q, p.c_L, p.c_Q)).value
    assert scaled == pytest.approx(c**2 * base, rel=1e-8)
    both = solve(Rank1Problem(p.b, p.L, p.Q, c * p.c_L, c * p.c_Q)).value
    assert both == pytest.approx(c * base, rel=1e-8)


@given(st.integers(0, 100_000))
def test_monotone_in_levels(seed):
    p = _random_problem(seed)
    looser = solve(Rank1Problem(p.b, p.L, p.Q, 2 * p.c_L, p.c_Q)).value
    assert looser >= solve(p).value * (1 - 1e-9)


def test_batch_matches_single():
    p = _random_problem(7, J=3)
    rng = np.random.default_rng(1)
    bs = rng.standard_normal((6, 3))
    batch = solve_batch(bs, p.L, p.Q, p.c_L, p.c_Q)
    for b, s in zip(bs, batch):
        assert s.value == pytest.approx(solve(Rank1Problem(b, p.L, p.Q, p.c_L, p.c_Q)).value, rel=1e-12)


def test_zero_b_and_singular_forms():
    sol = solve(Rank1Problem(np.zeros(2), np.eye(2), np.eye(2)))
    assert sol.value == 0.0 and not np.any(sol.a_star)
    with pytest.raises(SingularConstraintError):
        solve(Rank1Problem([1.0, 1.0], np.diag([1.0, 0.0]), np.diag([1.0, 0.0])))


def test_one_form_singular_is_fine():
    # Q singular but L definite: bounded problem
    sol = solve(Rank1Problem([0.0, 1.0], np.eye(2), np.diag([1.0, 0.0]), 4.0, 1.0))
    assert sol.value == pytest.approx(4.0, rel=1e-9)


def test_validation():
    with pytest.raises(ValueError):
        Rank1Problem([1.0, 2.0], np.eye(3), np.eye(2))
    with pytest.raises(ValueError):
        Rank1Problem([1.0], np.eye(1), np.eye(1), c_L=0.0)


@given(st.integers(0, 100_000), st.floats(0.1, 5.0))
def test_project_ellipsoid_kkt(seed, radius):
    rng = np.random.default_rng(seed)
    A = _spd(rng, 3)
    ev, V = np.linalg.eigh(A)
    z = 3 * rng.standard_normal(3)
    x = project_ellipsoid(z, ev, V, radius)
    assert x @ A @ x <= radius * (1 + 1e-9)
    if z @ A @ z <= radius:
        np.testing.assert_array_equal(x, z)
    else:
        # z - x is a non-negative multiple of the outward normal A x
        r = z - x
        nrm = A @ x
        nu = (r @ nrm) / (nrm @ nrm)
        assert nu >= 0
        np.testing.assert_allclose(r, nu * nrm, atol=1e-7 * max(1, np.linalg.norm(z)))
