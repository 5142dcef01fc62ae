"""Mutual-information dissimilarity for a pair of scalar variables.

Along the log-density path ``log q_X q_Y + beta f - log-normaliser`` the
change in goodness-of-fit relative to independence is estimated by

    psi(f, beta) = -beta mean_i f(X_i, Y_i) + log mean_{a,b} exp(beta f(X_a, Y_b)),

an average over all ``n^2`` recombined pairs.  Its first and second
derivatives at ``beta = 0`` are linear and quadratic in the coefficients,
``Hvec^T a`` and ``a^T Omega a``.

Two estimates are combined.  ``psi_star`` is the local one,
``sup (G')^2 / 2`` over ``{a^T L a <= lambda, G'' <= 1}``, computed by the
rank-one QCQP; ``psi_dstar`` is ``-min psi(b, 1)`` over the convex set
``{b^T L b <= sigma lambda}``.  The weight ``pi_star`` is the bootstrap
p-value of ``psi_star`` scaled up by ``log n``.

Pair evaluations use the factorisation of the product Gaussian kernel:
with ``K_x = G_x G_x^T`` and ``K_y = G_y G_y^T`` (pivoted Cholesky),

    h_j(X_a, Y_b) = G_x[a] D_j G_y[b]^T,   D_j = G_x^T diag(C[:, j]) G_y,

so no ``n^2 x J`` table is ever stored.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .errors import ConvergenceError
from .inference import _upper_order_stat, p_value, rademacher_table
from .nuisance_regression import kfold_indices
from .rank1_qcqp import ConstraintPencil, Rank1Problem, solve
from .rkhs_basis import Basis, KernelSpec, build_basis, gaussian_kernel, low_rank_factor

__all__ = [
    "PairSample",
    "MiGof",
    "MiConfig",
    "MiResult",
    "build_mi_gof",
    "pair_objective",
    "mi_objective",
    "mi_objective_grad",
    "mi_grad_hess_at_zero",
    "estimate_psi_star",
    "estimate_psi_dstar",
    "estimate_psi_check",
    "bootstrap_T_mi",
    "mi_lambda_grid",
    "select_lambda_mi",
    "run_mi_test",
]


@dataclass(frozen=True)
class PairSample:
    """Paired scalar observations ``(X_i, Y_i)``."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float).ravel()
        y = np.asarray(self.y, dtype=float).ravel()
        if x.shape != y.shape:
            raise ValueError(f"x and y lengths differ: {x.shape[0]} vs {y.shape[0]}")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise ValueError("pair sample contains non-finite entries")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def points(self) -> np.ndarray:
        return np.column_stack([self.x, self.y])


def _factor(K: np.ndarray) -> np.ndarray:
    G = low_rank_factor(K)
    if G is None:
        lam, U = np.linalg.eigh(K)
        keep = lam > 1e-12 * max(lam[-1], 1.0)
        G = U[:, keep] * np.sqrt(lam[keep])
    return G


@dataclass(frozen=True)
class MiGof:
    """Sufficient statistics of the pair-averaged objective.

    Attributes
    ----------
    Gx, Gy : (n, r_x), (n, r_y) arrays
        Marginal kernel factors at the sample rows in use.
    D : (J, r_x, r_y) array
        ``h_j(X_a, Y_b) = Gx[a] @ D[j] @ Gy[b]``.
    diag_evals : (n, J) array
        ``h_j(X_i, Y_i)``.
    diag_means, pair_means : (J,) arrays
    Omega : (J, J) array
        Second moment over all pairs minus the outer product of ``pair_means``.
    Hvec : (J,) array
        ``pair_means - diag_means``; ``G'(0) = Hvec^T a``.
    Phi : (n, J) array
        Estimated ``phi'_{h_j}(Z_i; 0)``; columns have mean zero.
    """

    Gx: np.ndarray = field(repr=False)
    Gy: np.ndarray = field(repr=False)
    D: np.ndarray = field(repr=False)
    diag_evals: np.ndarray = field(repr=False)
    diag_means: np.ndarray
    pair_means: np.ndarray
    Omega: np.ndarray
    Hvec: np.ndarray
    Phi: np.ndarray = field(repr=False)
    n: int

    @property
    def J(self) -> int:
        return self.D.shape[0]

    def pair_matrix(self, a) -> np.ndarray:
        """``F[a, b] = f(X_a, Y_b)`` for ``f = sum_j a_j h_j``."""
        Da = np.tensordot(np.asarray(a, dtype=float), self.D, axes=1)
        return (self.Gx @ Da) @ self.Gy.T

    def subset(self, idx) -> "MiGof":
        """Statistics recomputed on the rows ``idx`` (pairs among them only)."""
        idx = np.asarray(idx)
        return _assemble(self.Gx[idx], self.Gy[idx], self.D)


def _assemble(Gx: np.ndarray, Gy: np.ndarray, D: np.ndarray) -> MiGof:
    n = Gx.shape[0]
    J = D.shape[0]
    gx = Gx.mean(axis=0)
    gy = Gy.mean(axis=0)
    # h_j at the observed pairs: row-wise Gx[i] D_j Gy[i]
    diag = np.einsum("ip,jpq,iq->ij", Gx, D, Gy, optimize=True)
    dm = diag.mean(axis=0)
    pm = np.einsum("p,jpq,q->j", gx, D, gy)
    # second moment over pairs: tr(D_j Sy D_k^T Sx) / n^2
    Sx = Gx.T @ Gx / n
    Sy = Gy.T @ Gy / n
    Rx = _psd_sqrt(Sx)
    Ry = _psd_sqrt(Sy)
    E = np.einsum("ap,jpq,qb->jab", Rx, D, Ry, optimize=True).reshape(J, -1)
    second = E @ E.T
    Omega = second - np.outer(pm, pm)
    Omega = 0.5 * (Omega + Omega.T)
    Hvec = pm - dm
    row = np.einsum("ip,jpq,q->ij", Gx, D, gy, optimize=True)
    col = np.einsum("iq,jpq,p->ij", Gy, D, gx, optimize=True)
    Phi = -diag + dm + row + col - 2.0 * pm
    return MiGof(
        Gx=Gx, Gy=Gy, D=D, diag_evals=diag, diag_means=dm, pair_means=pm,
        Omega=Omega, Hvec=Hvec, Phi=Phi, n=n,
    )


def _psd_sqrt(S: np.ndarray) -> np.ndarray:
    lam, U = np.linalg.eigh(0.5 * (S + S.T))
    return (U * np.sqrt(np.clip(lam, 0.0, None))) @ U.T


def build_mi_gof(sample: PairSample, spec: KernelSpec) -> tuple[MiGof, Basis]:
    """Basis on the observed pairs and the pair-averaged statistics."""
    if sample.n < 2:
        raise ValueError("need at least two pairs")
    basis = build_basis(sample.points, spec)
    bw = basis.bandwidth
    Gx = _factor(gaussian_kernel(sample.x, sample.x, bw))
    Gy = _factor(gaussian_kernel(sample.y, sample.y, bw))
    # D_j = Gx^T diag(C_j) Gy, with the nodes equal to the sample rows
    D = np.einsum("ip,ij,iq->jpq", Gx, basis.coef, Gy, optimize=True)
    return _assemble(Gx, Gy, D), basis


def _log_mean_exp(F: np.ndarray) -> tuple[float, np.ndarray]:
    m = float(F.max())
    E = np.exp(F - m)
    tot = float(E.sum())
    return m + math.log(tot / F.size), E / tot


def pair_objective(F: np.ndarray, beta: float) -> float:
    """The objective from an ``n x n`` table ``F[a, b] = f(X_a, Y_b)``.

    The observed pairs are the diagonal of ``F``.
    """
    F = np.asarray(F, dtype=float)
    if F.ndim != 2 or F.shape[0] != F.shape[1]:
        raise ValueError("pair table must be square")
    if beta == 0.0:
        return 0.0
    lme, _ = _log_mean_exp(beta * F)
    return float(-beta * np.mean(np.diag(F)) + lme)


def mi_objective(g: MiGof, a, beta: float) -> float:
    """``-beta mean f(X_i, Y_i) + log mean_{a,b} exp(beta f(X_a, Y_b))``."""
    a = np.asarray(a, dtype=float)
    if beta == 0.0:
        return 0.0
    lme, _ = _log_mean_exp(beta * g.pair_matrix(a))
    return float(-beta * (g.diag_evals @ a).mean() + lme)


def mi_objective_grad(g: MiGof, b, hessian: bool = False):
    """Objective at ``beta = 1`` with its gradient (and Hessian) in ``b``.

    The gradient is ``-diag_means + sum_{a,b} w_ab h(X_a, Y_b)`` with the
    softmax weights ``w``; the Hessian is the ``w``-weighted covariance of
    ``h`` over pairs, contracted through the factors without forming pairs.
    """
    b = np.asarray(b, dtype=float)
    lme, W = _log_mean_exp(g.pair_matrix(b))
    val = float(-(g.diag_evals @ b).mean() + lme)
    Mw = g.Gx.T @ W @ g.Gy
    mean_h = np.einsum("jpq,pq->j", g.D, Mw)
    grad = mean_h - g.diag_means
    if not hessian:
        return val, grad
    n, rx = g.Gx.shape
    ry = g.Gy.shape[1]
    KRx = (g.Gx[:, :, None] * g.Gx[:, None, :]).reshape(n, rx * rx)
    KRy = (g.Gy[:, :, None] * g.Gy[:, None, :]).reshape(n, ry * ry)
    T = (KRx.T @ (W @ KRy)).reshape(rx, rx, ry, ry)
    second = np.einsum("jpq,prqs,krs->jk", g.D, T, g.D, optimize=True)
    hess = second - np.outer(mean_h, mean_h)
    return val, grad, 0.5 * (hess + hess.T)


def mi_grad_hess_at_zero(g: MiGof, a) -> tuple[float, float]:
    """``(G'(0), G''(0)) = (Hvec^T a, a^T Omega a)``."""
    a = np.asarray(a, dtype=float)
    return float(g.Hvec @ a), float(max(a @ g.Omega @ a, 0.0))


def estimate_psi_star(g: MiGof, L: np.ndarray, lam: float) -> tuple[float, np.ndarray]:
    """``sup (Hvec^T a)^2 / 2`` over ``{a^T L a <= lam, a^T Omega a <= 1}``."""
    sol = solve(Rank1Problem(g.Hvec, L, g.Omega, lam, 1.0))
    return max(sol.value, 0.0) / 2.0, sol.a_star


def bootstrap_T_mi(g: MiGof, L: np.ndarray, lam: float, xi: np.ndarray) -> np.ndarray:
    """Null bootstrap draws ``sup (mean xi phi')^2 / (2 G'')``."""
    bs = xi.T @ g.Phi / g.n
    return np.maximum(ConstraintPencil(L, g.Omega, lam, 1.0).solve_many(bs)[0], 0.0) / 2.0


def _ball_qp(H: np.ndarray, q: np.ndarray, radius: float) -> np.ndarray:
    """Minimise ``x^T H x / 2 + q^T x`` over ``||x|| <= radius`` for PSD ``H``."""
    lam, U = np.linalg.eigh(H)
    lam = np.clip(lam, 0.0, None)
    qt = U.T @ q
    tiny = 1e-12 * max(float(lam[-1]), 1e-300)
    pos = lam > tiny
    if np.all(np.abs(qt[~pos]) <= 1e-14 * max(np.linalg.norm(qt), 1e-300)):
        x = np.zeros_like(qt)
        x[pos] = -qt[pos] / lam[pos]
        if np.linalg.norm(x) <= radius:
            return U @ x

    def excess(nu):
        return np.linalg.norm(qt / (lam + nu)) - radius

    hi = np.linalg.norm(qt) / radius + 1.0
    while excess(hi) > 0:
        hi *= 2.0
    lo = tiny
    if excess(lo) <= 0:
        nu = lo
    else:
        nu = brentq(excess, lo, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=500)
    x = U @ (-qt / (lam + nu))
    nrm = np.linalg.norm(x)
    return x if nrm <= radius else x * (radius / nrm)


def estimate_psi_dstar(
    g: MiGof,
    L: np.ndarray,
    lam: float,
    sigma: float = 1.0,
    tol: float = 1e-8,
    max_iter: int = 10_000,
) -> tuple[float, np.ndarray]:
    """``-min psi(b, 1)`` over ``{b^T L b <= sigma lam}``.

    Damped projected Newton in coordinates ``c = L^{1/2} b``, where the
    feasible set is a ball; each step minimises the local quadratic model
    over the ball exactly and backtracks along the segment.  Stops when
    the gradient mapping falls below ``tol``.

    Raises
    ------
    ConvergenceError
        After ``max_iter`` iterations; carries the best iterate.
    """
    if not (sigma > 0 and lam > 0):
        raise ValueError("sigma and lambda must be positive")
    lam_L, V = np.linalg.eigh(0.5 * (L + L.T))
    if np.any(lam_L <= 0):
        raise ValueError("complexity form must be positive definite")
    scale = V / np.sqrt(lam_L)  # b = scale @ c
    radius = math.sqrt(sigma * lam)
    J = len(lam_L)

    def evaluate(c, hessian=False):
        out = mi_objective_grad(g, scale @ c, hessian)
        if hessian:
            return out[0], scale.T @ out[1], scale.T @ out[2] @ scale
        return out[0], scale.T @ out[1]

    def proj(c):
        nrm = np.linalg.norm(c)
        return c if nrm <= radius else c * (radius / nrm)

    c = np.zeros(J)
    for _ in range(max_iter):
        f, grad, hess = evaluate(c, hessian=True)
        step_L = max(float(np.linalg.eigvalsh(hess)[-1]), 1e-12)
        if step_L * np.linalg.norm(c - proj(c - grad / step_L)) <= tol:
            return -min(f, 0.0), scale @ c
        target = _ball_qp(hess, grad - hess @ c, radius)
        d = target - c
        slope = float(grad @ d)
        if slope >= 0:
            # model step not a descent direction: fall back to a gradient step
            d = proj(c - grad / step_L) - c
            slope = float(grad @ d)
        t = 1.0
        while True:
            f_new = evaluate(c + t * d)[0]
            if f_new <= f + 1e-4 * t * slope or t < 1e-12:
                break
            t *= 0.5
        if f_new > f:
            return -min(f, 0.0), scale @ c
        c = c + t * d
    raise ConvergenceError(
        "projected Newton did not converge", best=scale @ c, best_value=-min(evaluate(c)[0], 0.0)
    )


def estimate_psi_check(
    psi_star: float, psi_dstar: float, draws_T_mi, n: int
) -> tuple[float, float]:
    """Blend ``pi* psi_star + (1 - pi*) psi_dstar``; returns ``(psi_check, pi_star)``."""
    pi_star = p_value(psi_star / math.log(n), draws_T_mi)
    return pi_star * psi_star + (1.0 - pi_star) * psi_dstar, pi_star


def mi_lambda_grid(L: np.ndarray, size: int = 12) -> np.ndarray:
    """Geometric grid from the smallest to the largest diagonal entry of ``L``."""
    d = np.sort(np.diag(L))
    if d[-1] <= d[0] * (1 + 1e-12):
        return np.array([d[0]])
    return np.geomspace(d[0], d[-1], size)


def _newton_loss(g_tr: MiGof, g_te: MiGof, L: np.ndarray, lam: float) -> float:
    a = estimate_psi_star(g_tr, L, lam)[1]
    gp, gs = mi_grad_hess_at_zero(g_tr, a)
    if not np.any(a) or gs <= 1e-14 * float(a @ a):
        return 0.0
    return mi_objective(g_te, a, -gp / gs)


def select_lambda_mi(g: MiGof, L: np.ndarray, grid, folds: int = 5, seed=0) -> tuple[float, np.ndarray]:
    """Held-out ``psi`` at the training Newton step; one-standard-error rule."""
    grid = np.sort(np.asarray(list(grid), dtype=float))
    if grid.size == 0:
        raise ValueError("lambda grid is empty")
    if grid.size == 1:
        return float(grid[0]), np.zeros(1)
    rng = np.random.default_rng(seed)
    per_fold = np.zeros((folds, grid.size))
    for f, te in enumerate(kfold_indices(g.n, folds, rng)):
        tr = np.setdiff1d(np.arange(g.n), te, assume_unique=True)
        g_tr, g_te = g.subset(tr), g.subset(te)
        for k, lam in enumerate(grid):
            per_fold[f, k] = _newton_loss(g_tr, g_te, L, lam)
    losses = per_fold.mean(axis=0)
    k_min = int(np.argmin(losses))
    se = (per_fold - per_fold[:, [k_min]]).std(axis=0, ddof=1) / math.sqrt(folds)
    ok = losses - losses[k_min] <= se + 1e-12 * max(1.0, abs(losses[k_min]))
    return float(grid[int(np.flatnonzero(ok)[0])]), losses


@dataclass(frozen=True)
class MiConfig:
    """Settings of the independence test."""

    lam: float | str = "cv"
    lambda_grid: tuple[float, ...] | None = None
    sigma: float = 1.0
    M: int = 500
    alpha: float = 0.05
    seed: int = 0
    folds: int = 5

    def __post_init__(self):
        if isinstance(self.lam, str):
            if self.lam != "cv":
                raise ValueError("lam must be a positive number or 'cv'")
        elif not self.lam > 0:
            raise ValueError("lam must be positive")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if int(self.M) < 1:
            raise ValueError("M must be at least 1")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if int(self.folds) < 2:
            raise ValueError("folds must be at least 2")


@dataclass
class MiResult:
    psi_check: float
    psi_star: float
    psi_dstar: float
    pi_star: float
    p_value: float
    critical_value: float
    draws_T: np.ndarray = field(repr=False)
    lambda_used: float
    sigma: float
    n: int
    J: int
    dstar_converged: bool = True

    def to_dict(self) -> dict:
        out = dict(self.__dict__)
        out["draws_T"] = np.asarray(self.draws_T).tolist()
        return out


def run_mi_test(sample: PairSample, spec: KernelSpec, config: MiConfig) -> MiResult:
    """Independence test and two-stage estimate of the mutual information.

    The p-value compares ``psi_star`` with the null bootstrap draws: under
    independence ``psi_check`` agrees with ``psi_star`` only asymptotically,
    and at moderate ``n`` the ``(1 - pi_star) psi_dstar`` term (an
    unpenalised in-sample optimum) sits far above the null draws.
    """
    n = sample.n
    if n < 4 * config.folds:
        raise ValueError(f"need n >= 4*folds = {4 * config.folds}, got n={n}")
    s_cv, s_xi = np.random.SeedSequence(config.seed).spawn(2)
    g, basis = build_mi_gof(sample, spec)
    L = basis.L
    if config.lam == "cv":
        grid = config.lambda_grid or mi_lambda_grid(L)
        lam = select_lambda_mi(g, L, grid, config.folds, int(s_cv.generate_state(1)[0]))[0]
    else:
        lam = float(config.lam)
    psi_star, _ = estimate_psi_star(g, L, lam)
    xi = rademacher_table(n, config.M, s_xi)
    T = bootstrap_T_mi(g, L, lam, xi)
    converged = True
    try:
        psi_dstar, _ = estimate_psi_dstar(g, L, lam, config.sigma)
    except ConvergenceError as exc:
        psi_dstar, converged = float(exc.best_value), False
    psi_check, pi_star = estimate_psi_check(psi_star, psi_dstar, T, n)
    return MiResult(
        psi_check=float(psi_check), psi_star=float(psi_star), psi_dstar=float(psi_dstar),
        pi_star=float(pi_star), p_value=p_value(psi_star, T),
        critical_value=_upper_order_stat(T, config.alpha), draws_T=T,
        lambda_used=float(lam), sigma=float(config.sigma), n=n, J=basis.size,
        dstar_converged=converged,
    )
