"""Rank-one objective, two homogeneous quadratic constraints.

Solves

    maximize (b^T a)^2   subject to   a^T L a <= c_L,   a^T Q a <= c_Q.

Maximising ``b^T a`` over an intersection of two centred ellipsoids is a
convex problem, and its Lagrange dual collapses to a scalar search:

    value = min_{t in [0, 1]} g(t),   g(t) = b^T M(t)^{-1} b,
    M(t) = t L / c_L + (1 - t) Q / c_Q.

``g`` is convex in ``t``.  The pencil ``(L / c_L, L / c_L + Q / c_Q)`` is
diagonalised once, after which ``g(t)`` is a sum of ``J`` scalar ratios, so
many right-hand sides ``b`` (bootstrap replicates) share one factorisation.
The minimising ``t`` is found by bisection on the monotone slope ``g'``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import eigh
from scipy.optimize import brentq

from .errors import SingularConstraintError

__all__ = [
    "Rank1Problem",
    "Rank1Solution",
    "ConstraintPencil",
    "solve",
    "solve_batch",
    "project_ellipsoid",
]

_BISECT_STEPS = 64
_FLOOR = 1e-12
_GAP_TOL = 1e-6


@dataclass(frozen=True)
class Rank1Problem:
    """``max (b^T a)^2`` s.t. ``a^T L a <= c_L`` and ``a^T Q a <= c_Q``."""

    b: np.ndarray
    L: np.ndarray
    Q: np.ndarray
    c_L: float = 1.0
    c_Q: float = 1.0

    def __post_init__(self):
        b = np.asarray(self.b, dtype=float).ravel()
        L = np.atleast_2d(np.asarray(self.L, dtype=float))
        Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        J = b.shape[0]
        if L.shape != (J, J) or Q.shape != (J, J):
            raise ValueError("L and Q must be J x J with J = len(b)")
        if not (self.c_L > 0 and self.c_Q > 0):
            raise ValueError("constraint levels must be positive")
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "L", 0.5 * (L + L.T))
        object.__setattr__(self, "Q", 0.5 * (Q + Q.T))


@dataclass(frozen=True)
class Rank1Solution:
    """Maximiser, attained value and dual certificate.

    ``value`` equals ``(b^T a_star)^2`` for the returned feasible
    ``a_star``; ``gap`` is the distance to the dual bound.
    """

    a_star: np.ndarray
    value: float
    t_star: float
    active: tuple[str, ...]
    gap: float = 0.0
    certified: bool = True
    method: str = "dual"


class ConstraintPencil:
    """Simultaneous diagonalisation of the two scaled constraint forms.

    With ``P = L / c_L`` and ``R = Q / c_Q``, finds ``V`` such that
    ``V^T (P + R) V = I`` and ``V^T P V = diag(p)``; then
    ``V^T M(t) V = diag(t p + (1 - t)(1 - p))``.
    """

    def __init__(self, L, Q, c_L: float = 1.0, c_Q: float = 1.0):
        P = np.atleast_2d(np.asarray(L, dtype=float)) / c_L
        R = np.atleast_2d(np.asarray(Q, dtype=float)) / c_Q
        P = 0.5 * (P + P.T)
        R = 0.5 * (R + R.T)
        S = P + R
        scale = max(float(np.trace(S)), np.finfo(float).tiny)
        smin = float(np.linalg.eigvalsh(S)[0])
        if smin <= 1e-13 * scale:
            raise SingularConstraintError(
                "jointly singular constraint forms: L and Q share a null direction"
            )
        p, V = eigh(P, S + 1e-12 * scale * np.eye(S.shape[0]))
        self.P = P
        self.R = R
        self.p = np.clip(p, 0.0, 1.0)
        self.V = V
        self.J = P.shape[0]

    def _denom(self, t: np.ndarray) -> np.ndarray:
        p = self.p
        d = (1.0 - p)[None, :] + np.asarray(t, dtype=float)[:, None] * (2.0 * p - 1.0)[None, :]
        return np.maximum(d, _FLOOR)

    def dual(self, C: np.ndarray, t: np.ndarray) -> np.ndarray:
        """``g(t)`` for each row of the transformed right-hand sides ``C = b V``."""
        return np.sum(C**2 / self._denom(t), axis=1)

    def dual_raw(self, b, t: float) -> float:
        """``b^T M(t)^{-1} b`` for a single ``b`` (used by tests)."""
        C = np.atleast_2d(np.asarray(b, dtype=float)) @ self.V
        return float(self.dual(C, np.array([t]))[0])

    def dual_slope(self, C: np.ndarray, t: np.ndarray) -> np.ndarray:
        """``g'(t)`` for each row of ``C``; non-decreasing in ``t``."""
        return -np.sum(C**2 * (2.0 * self.p - 1.0)[None, :] / self._denom(t) ** 2, axis=1)

    def minimize_dual(self, C: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Minimise the convex ``g`` on [0, 1] by bisection on its slope, one row per ``b``.

        Bisection on the sign of ``g'`` resolves ``t`` to machine precision,
        where a comparison search on ``g`` itself stalls near ``sqrt(eps)``.
        """
        B = C.shape[0]
        lo = np.zeros(B)
        hi = np.ones(B)
        at_lo = self.dual_slope(C, lo) >= 0.0
        at_hi = self.dual_slope(C, hi) <= 0.0
        for _ in range(_BISECT_STEPS):
            mid = 0.5 * (lo + hi)
            up = self.dual_slope(C, mid) > 0.0
            hi = np.where(up, mid, hi)
            lo = np.where(up, lo, mid)
        t = np.where(at_lo, 0.0, np.where(at_hi, 1.0, 0.5 * (lo + hi)))
        return t, self.dual(C, t)

    def solve_many(self, bs: np.ndarray):
        """Vectorised solve for the rows of ``bs``.

        Returns ``(values, A, t, gaps, dual_values, load_P, load_R)`` where
        ``A`` holds the maximisers as rows.
        """
        bs = np.atleast_2d(np.asarray(bs, dtype=float))
        C = bs @ self.V
        t, gdual = self.minimize_dual(C)
        d = self._denom(t)
        Y = C / d
        load_P = np.sum(self.p * Y**2, axis=1)
        load_R = np.sum((1.0 - self.p) * Y**2, axis=1)
        load = np.maximum(load_P, load_R)
        zero = load <= 0.0
        s = np.where(zero, 0.0, 1.0 / np.sqrt(np.where(zero, 1.0, load)))
        A = (Y @ self.V.T) * s[:, None]
        values = np.einsum("ij,ij->i", bs, A) ** 2
        gaps = np.maximum(gdual - values, 0.0)
        return values, A, t, gaps, gdual, load_P * s**2, load_R * s**2


def project_ellipsoid(z: np.ndarray, evals: np.ndarray, evecs: np.ndarray, radius: float) -> np.ndarray:
    """Euclidean projection of ``z`` onto ``{x : x^T A x <= radius}``.

    ``A = evecs diag(evals) evecs^T`` must be PSD.
    """
    z = np.asarray(z, dtype=float)
    zt = evecs.T @ z
    ell = np.clip(evals, 0.0, None)
    if np.sum(ell * zt**2) <= radius:
        return z.copy()
    if radius <= 0:
        keep = ell <= 0
        return evecs @ np.where(keep, zt, 0.0)

    def excess(nu):
        return np.sum(ell * (zt / (1.0 + nu * ell)) ** 2) - radius

    pos = ell > 0
    hi = np.sqrt(np.sum(zt[pos] ** 2 / ell[pos]) / radius) + 1e-300
    while excess(hi) > 0:
        hi *= 2.0
    nu = brentq(excess, 0.0, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=500)
    x = evecs @ (zt / (1.0 + nu * ell))
    # guard against the last ulp of infeasibility
    q = float(x @ (evecs * ell) @ evecs.T @ x)
    if q > radius:
        x *= np.sqrt(radius / q)
    return x


def _pgd_fallback(prob: Rank1Problem, restarts: int = 5, iters: int = 5000, seed: int = 0):
    """Projected gradient ascent on ``b^T a`` with Dykstra projections."""
    P = prob.L / prob.c_L
    R = prob.Q / prob.c_Q
    eP, VP = np.linalg.eigh(P)
    eR, VR = np.linalg.eigh(R)

    def proj(z):
        x = z.copy()
        p_ = np.zeros_like(z)
        q_ = np.zeros_like(z)
        for _ in range(200):
            y = project_ellipsoid(x + p_, eP, VP, 1.0)
            p_ = x + p_ - y
            x_new = project_ellipsoid(y + q_, eR, VR, 1.0)
            q_ = y + q_ - x_new
            if np.linalg.norm(x_new - x) <= 1e-14 * max(1.0, np.linalg.norm(x)):
                x = x_new
                break
            x = x_new
        return x

    rng = np.random.default_rng(seed)
    b = prob.b
    step = 1.0 / max(np.linalg.norm(b), np.finfo(float).tiny)
    best, best_val = np.zeros_like(b), 0.0
    for _ in range(restarts):
        a = proj(rng.standard_normal(b.shape[0]))
        for _ in range(iters):
            a_new = proj(a + step * b)
            if np.linalg.norm(a_new - a) <= 1e-13 * max(1.0, np.linalg.norm(a)):
                a = a_new
                break
            a = a_new
        val = float(b @ a) ** 2
        if val > best_val:
            best, best_val = a, val
    return best, best_val


def _active(lp: float, lr: float) -> tuple[str, ...]:
    act = []
    if lp >= 1.0 - 1e-6:
        act.append("complexity")
    if lr >= 1.0 - 1e-6:
        act.append("curvature")
    return tuple(act)


def solve_batch(bs, L, Q, c_L: float = 1.0, c_Q: float = 1.0) -> list[Rank1Solution]:
    """Solve the problem for several ``b`` sharing the constraint forms."""
    bs = np.atleast_2d(np.asarray(bs, dtype=float))
    pencil = ConstraintPencil(L, Q, c_L, c_Q)
    values, A, t, gaps, _, lp, lr = pencil.solve_many(bs)
    out = []
    for k in range(bs.shape[0]):
        b = bs[k]
        if not np.any(b):
            out.append(Rank1Solution(np.zeros_like(b), 0.0, float(t[k]), ()))
            continue
        a = A[k]
        if b @ a < 0:
            a = -a
        cert = gaps[k] <= _GAP_TOL * values[k]
        if not cert:
            prob = Rank1Problem(b, L, Q, c_L, c_Q)
            a_fb, v_fb = _pgd_fallback(prob)
            warnings.warn(
                "dual certificate failed (gap %.3e); used projected-gradient fallback" % gaps[k],
                RuntimeWarning,
                stacklevel=2,
            )
            if v_fb > values[k]:
                a = a_fb
                lp_k = float(a @ pencil.P @ a)
                lr_k = float(a @ pencil.R @ a)
                out.append(Rank1Solution(a, v_fb, float(t[k]), _active(lp_k, lr_k),
                                         gap=float(gaps[k]), certified=False, method="pgd"))
                continue
        out.append(Rank1Solution(a, float(values[k]), float(t[k]), _active(lp[k], lr[k]),
                                 gap=float(gaps[k]), certified=bool(cert)))
    return out


def solve(p: Rank1Problem) -> Rank1Solution:
    """Solve a single :class:`Rank1Problem`."""
    return solve_batch(p.b[None, :], p.L, p.Q, p.c_L, p.c_Q)[0]
