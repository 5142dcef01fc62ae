"""Point estimate, multiplier bootstrap, p-value and confidence interval.

Everything here operates on a :class:`~boundary_infer.gof_quadratic.QuadraticGof`.
For ``f = sum_j a_j h_j`` the improvement in fit along ``f`` is
``(H2^T a)^2 / (a^T H1 a)`` and the function class is
``{a : a^T L a <= lambda * G''(a)} = {a : a^T L a <= 2 lambda a^T H1 a}``.
Normalising the curvature to ``a^T H1 a <= 1`` turns the supremum into the
rank-one QCQP with ``b = H2``, ``Q = H1``, ``c_Q = 1`` and ``c_L = 2 lambda``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DegenerateDirectionError
from .gof_quadratic import (
    Dataset,
    QuadraticGof,
    assemble,
    beta_hat,
    gof_value,
    influence_column_full,
)
from .nuisance_regression import DEFAULT_RIDGE_GRID, fit_nuisances, kfold_indices
from .rank1_qcqp import ConstraintPencil, Rank1Problem, solve
from .rkhs_basis import Basis, KernelSpec, build_basis, eval_basis

__all__ = [
    "InferenceConfig",
    "InferenceResult",
    "rademacher_table",
    "estimate_psi",
    "bootstrap_T",
    "bootstrap_U",
    "p_value",
    "pi_n",
    "mixture_draws",
    "confidence_interval",
    "default_lambda_grid",
    "select_lambda",
    "infer_from_gof",
    "run_inference",
]


_RULES = ("gated", "min", "1se")


@dataclass(frozen=True)
class InferenceConfig:
    """Tuning and bootstrap settings.

    Parameters
    ----------
    lam : float or "cv"
        Smoothness bound of the function class, or ``"cv"`` to pick it from
        ``lambda_grid`` by cross-validation.
    lambda_grid : sequence of float or None
        Candidates for ``"cv"``; ``None`` derives a grid from the basis.
    M : int
        Number of bootstrap replicates.
    alpha : float
        Test level; the interval has coverage ``1 - alpha``.
    seed : int
        Master seed for folds, multipliers and the optional split.
    folds : int
        Folds for the lambda cross-validation and the nuisance ridge CV.
    split : bool
        Tune lambda on one half of the sample and estimate on the other.
    lambda_rule : {"gated", "min", "1se"}
        Selection rule for ``"cv"``; see :func:`select_lambda`.
    ridge_grid : sequence of float
        Candidate ridge penalties for the nuisance regressions.
    """

    lam: float | str = "cv"
    lambda_grid: tuple[float, ...] | None = None
    M: int = 500
    alpha: float = 0.05
    seed: int = 0
    folds: int = 5
    split: bool = False
    lambda_rule: str = "gated"
    ridge_grid: tuple[float, ...] = DEFAULT_RIDGE_GRID

    def __post_init__(self):
        if isinstance(self.lam, str):
            if self.lam != "cv":
                raise ValueError("lam must be a positive number or 'cv'")
        elif not (self.lam > 0 and math.isfinite(self.lam)):
            raise ValueError("lam must be positive")
        if self.lambda_grid is not None:
            grid = tuple(float(v) for v in self.lambda_grid)
            if not grid or any(not (v > 0) for v in grid):
                raise ValueError("lambda_grid must be non-empty and positive")
            object.__setattr__(self, "lambda_grid", grid)
        if int(self.M) < 1:
            raise ValueError("M must be at least 1")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if int(self.folds) < 2:
            raise ValueError("folds must be at least 2")
        if self.lambda_rule not in _RULES:
            raise ValueError(f"lambda_rule must be one of {_RULES}")


@dataclass
class InferenceResult:
    """Output of one inference run."""

    psi_hat: float
    a_hat: np.ndarray
    beta_hat_at_a: float
    p_value: float
    pi_n: float
    ci: tuple[float, float]
    draws_T: np.ndarray = field(repr=False)
    draws_U: np.ndarray = field(repr=False)
    draws_V: np.ndarray = field(repr=False)
    lambda_used: float
    n: int
    J: int

    def to_dict(self) -> dict:
        out = asdict(self)
        for key, val in out.items():
            if isinstance(val, np.ndarray):
                out[key] = val.tolist()
        out["ci"] = [float(self.ci[0]), float(self.ci[1])]
        return out


def rademacher_table(n: int, M: int, seed) -> np.ndarray:
    """``n x M`` table of independent random signs."""
    rng = np.random.default_rng(seed)
    return rng.integers(0, 2, size=(n, M)).astype(float) * 2.0 - 1.0


def estimate_psi(g: QuadraticGof, L: np.ndarray, lam: float) -> tuple[float, np.ndarray]:
    """Improvement-in-fit estimate and its maximising direction.

    Returns ``(psi_hat, a_hat)`` where ``psi_hat`` is the value of
    ``max (H2^T a)^2`` s.t. ``a^T L a <= 2 lam`` and ``a^T H1 a <= 1``.
    """
    sol = solve(Rank1Problem(g.H2, L, g.H1, 2.0 * lam, 1.0))
    return max(sol.value, 0.0), sol.a_star


def bootstrap_T(
    g: QuadraticGof, L: np.ndarray, lam: float, M: int = 500, seed=0, xi: np.ndarray | None = None
) -> np.ndarray:
    """Multiplier bootstrap draws of the null statistic.

    ``T_m = sup_a (b_m^T a)^2 / (2 * 2 a^T H1 a)`` over the function class,
    with ``b_m = Phi^T xi_m / n``; equal to a quarter of the QCQP value.
    Pass ``xi`` (``n x M``) to reuse a multiplier table.
    """
    if xi is None:
        xi = rademacher_table(g.n, M, seed)
    bs = xi.T @ g.Phi / g.n
    pencil = ConstraintPencil(L, g.H1, 2.0 * lam, 1.0)
    values = pencil.solve_many(bs)[0]
    return np.maximum(values, 0.0) / 4.0


def bootstrap_U(
    g: QuadraticGof, a_hat, beta_at_a: float, M: int = 500, seed=0, xi: np.ndarray | None = None
) -> np.ndarray:
    """``U_m = |mean_i xi_im (phi(Z_i; 0) - phi(Z_i; beta))|`` along ``a_hat``."""
    if xi is None:
        xi = rademacher_table(g.n, M, seed)
    diff = influence_column_full(g, a_hat, 0.0) - influence_column_full(g, a_hat, beta_at_a)
    return np.abs(xi.T @ diff) / g.n


def p_value(psi_hat: float, draws_T, n: int | None = None) -> float:
    """Share of bootstrap draws strictly above the estimate."""
    draws_T = np.asarray(draws_T, dtype=float)
    if draws_T.size == 0:
        raise ValueError("no bootstrap draws")
    return float(np.mean(draws_T > psi_hat))


def pi_n(psi_hat: float, draws_T, n: int) -> float:
    """Adaptive weight: bootstrap p-value at the inflated statistic ``psi_hat / log n``."""
    if n < 2:
        raise ValueError("pi_n needs n >= 2")
    return p_value(psi_hat / math.log(n), draws_T)


def mixture_draws(draws_T, draws_U, pi: float) -> np.ndarray:
    return pi * np.asarray(draws_T, dtype=float) + (1.0 - pi) * np.asarray(draws_U, dtype=float)


def _upper_order_stat(v: np.ndarray, alpha: float) -> float:
    """``V_(k)`` with ``k = ceil((1 - alpha) M)``."""
    v = np.sort(np.asarray(v, dtype=float))
    k = max(1, math.ceil((1.0 - alpha) * v.size - 1e-9))
    return float(v[k - 1])


def confidence_interval(psi_hat: float, draws_T, draws_U, pi: float, alpha: float) -> tuple[float, float]:
    """Test-inversion interval ``[max(0, psi - s), psi + s]``."""
    s = _upper_order_stat(mixture_draws(draws_T, draws_U, pi), alpha)
    return max(0.0, psi_hat - s), psi_hat + s


def default_lambda_grid(L: np.ndarray, size: int = 12) -> np.ndarray:
    """Geometric grid from half the smallest diagonal of ``L`` to half the largest.

    With unit curvature, ``lambda = L_jj / 2`` is the smallest bound that
    admits the j-th basis function on its own.
    """
    d = np.sort(np.diag(L))
    lo, hi = d[0] / 2.0, d[-1] / 2.0
    if hi <= lo * (1 + 1e-12):
        return np.array([lo])
    return np.geomspace(lo, hi, size)


def _direction_loss(g_tr: QuadraticGof, g_te: QuadraticGof, L: np.ndarray, lam: float) -> float:
    a = estimate_psi(g_tr, L, lam)[1]
    try:
        beta = beta_hat(g_tr, a)
    except DegenerateDirectionError:
        return g_te.const0
    return gof_value(g_te, a, beta)


def select_lambda(
    data: Dataset,
    basis_evals: np.ndarray,
    fits,
    L: np.ndarray,
    lambda_grid,
    folds: int = 5,
    seed=0,
    rule: str = "gated",
) -> tuple[float, np.ndarray]:
    """Pick lambda by held-out one-step goodness-of-fit.

    For each fold, the direction and its step are fitted on the training
    rows and scored by ``G(beta)`` assembled on the held-out rows.

    ``rule="min"`` takes the minimiser of the mean loss (ties to the smaller
    lambda).  ``rule="1se"`` takes the smallest lambda whose mean loss is
    within one standard error of that minimum.  ``rule="gated"`` takes the
    minimiser only if it beats the no-improvement fit (held-out ``G(0)``) by
    more than one standard error, and the smallest lambda otherwise.
    Standard errors come from the per-fold loss differences.

    Returns the selected value and the mean loss per grid point.
    """
    if rule not in _RULES:
        raise ValueError(f"rule must be one of {_RULES}")
    grid = np.sort(np.asarray(list(lambda_grid), dtype=float))
    if grid.size == 0:
        raise ValueError("lambda_grid is empty")
    if grid.size == 1:
        return float(grid[0]), np.zeros(1)
    rng = np.random.default_rng(seed)
    n = data.n
    per_fold = np.zeros((folds, grid.size))
    null_fold = np.zeros(folds)
    for f, te in enumerate(kfold_indices(n, folds, rng)):
        tr = np.setdiff1d(np.arange(n), te, assume_unique=True)
        g_tr = assemble(data.subset(tr), basis_evals[tr], fits.subset(tr))
        g_te = assemble(data.subset(te), basis_evals[te], fits.subset(te))
        null_fold[f] = g_te.const0
        for k, lam in enumerate(grid):
            per_fold[f, k] = _direction_loss(g_tr, g_te, L, lam)
    losses = per_fold.mean(axis=0)
    best = float(np.min(losses))
    tol = 1e-12 * max(1.0, abs(best))
    k_min = int(np.flatnonzero(losses <= best + tol)[0])
    if rule == "min":
        return float(grid[k_min]), losses
    if rule == "gated":
        gain = null_fold - per_fold[:, k_min]
        se = gain.std(ddof=1) / math.sqrt(folds)
        return float(grid[k_min] if gain.mean() > se + tol else grid[0]), losses
    diffs = per_fold - per_fold[:, [k_min]]
    se = diffs.std(axis=0, ddof=1) / math.sqrt(folds)
    ok = losses - best <= se + tol
    return float(grid[int(np.flatnonzero(ok)[0])]), losses


def infer_from_gof(
    g: QuadraticGof, L: np.ndarray, lam: float, alpha: float, xi: np.ndarray
) -> InferenceResult:
    """Estimate, bootstrap and interval for an assembled quadratic and fixed ``lam``."""
    psi, a = estimate_psi(g, L, lam)
    try:
        beta = beta_hat(g, a) if np.any(a) else 0.0
    except DegenerateDirectionError:
        beta = 0.0
    T = bootstrap_T(g, L, lam, xi=xi)
    U = bootstrap_U(g, a, beta, xi=xi)
    pv = p_value(psi, T, g.n)
    pi = pi_n(psi, T, g.n)
    V = mixture_draws(T, U, pi)
    ci = confidence_interval(psi, T, U, pi, alpha)
    return InferenceResult(
        psi_hat=float(psi), a_hat=np.asarray(a), beta_hat_at_a=float(beta),
        p_value=pv, pi_n=pi, ci=ci, draws_T=T, draws_U=U, draws_V=V,
        lambda_used=float(lam), n=g.n, J=g.H2.shape[0],
    )


def _seeds(seed, k: int) -> list[np.random.SeedSequence]:
    return np.random.SeedSequence(seed).spawn(k)


def run_inference(data: Dataset, spec: KernelSpec, config: InferenceConfig) -> InferenceResult:
    """Basis, nuisances, tuning and bootstrap in one call.  Deterministic given the seed."""
    n = data.n
    if n < 4 * config.folds:
        raise ValueError(f"need n >= 4*folds = {4 * config.folds}, got n={n}")
    s_nuis, s_cv, s_xi, s_split = _seeds(config.seed, 4)
    nuis_seed = int(s_nuis.generate_state(1)[0])
    cv_seed = int(s_cv.generate_state(1)[0])

    basis = build_basis(data.points, spec)
    H = eval_basis(basis, data.points)
    L = basis.L

    if not config.split:
        fits = fit_nuisances(data, H, config.folds, config.ridge_grid, seed=nuis_seed)
        if config.lam == "cv":
            grid = config.lambda_grid or default_lambda_grid(L)
            lam = select_lambda(data, H, fits, L, grid, config.folds, cv_seed, config.lambda_rule)[0]
        else:
            lam = float(config.lam)
        g = assemble(data, H, fits)
    else:
        perm = np.random.default_rng(s_split).permutation(n)
        half_a, half_b = np.sort(perm[: n // 2]), np.sort(perm[n // 2:])
        if config.lam == "cv":
            d_a = data.subset(half_a)
            fits_a = fit_nuisances(d_a, H[half_a], config.folds, config.ridge_grid, seed=nuis_seed)
            grid = config.lambda_grid or default_lambda_grid(L)
            lam = select_lambda(
                d_a, H[half_a], fits_a, L, grid, config.folds, cv_seed, config.lambda_rule
            )[0]
        else:
            lam = float(config.lam)
        d_b = data.subset(half_b)
        fits_b = fit_nuisances(d_b, H[half_b], config.folds, config.ridge_grid, seed=nuis_seed)
        g = assemble(d_b, H[half_b], fits_b)

    xi = rademacher_table(g.n, config.M, s_xi)
    return infer_from_gof(g, L, lam, config.alpha, xi)
