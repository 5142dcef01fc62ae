"""Monte Carlo study on a three-predictor regression design.

Latent ``A ~ N(0, V)`` with unit variances and correlations 0.5 is mapped to
``X = 2 Phi(A) - 1`` (uniform margins on (-1, 1)) and

    Y = sin(pi X1) - 2 (X2 - 1/2)^2 + 1(X2 > 0) exp(X1) + eps,   eps ~ U[-6, 6].

For predictor ``j`` the covariates ``W`` are the two remaining columns.
``Y`` does not involve ``X3``, so predictor 3 is a null.

Three methods are compared per replicate:

``oracle``
    The smoothness bound is the smallest one that admits the least-squares
    projection of the true direction ``m(X) - E[m(X) | W]`` onto the basis.
``adaptive``
    The bound is chosen by cross-validation, no sample splitting.
``split``
    Two-half Wald comparison of cross-fitted kernel ridge risks.
"""

from __future__ import annotations

import csv
import json
import math
import time
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import ndtr, ndtri
from scipy.stats import norm, qmc

from .errors import BoundaryInferError
from .gof_quadratic import Dataset, assemble
from .inference import (
    default_lambda_grid,
    infer_from_gof,
    rademacher_table,
    select_lambda,
)
from .nuisance_regression import DEFAULT_RIDGE_GRID, fit_nuisances
from .rkhs_basis import KernelSpec, build_basis, eval_basis

__all__ = [
    "COV",
    "TRUE_PSI",
    "SimConfig",
    "SimReport",
    "SplitResult",
    "generate",
    "regression_fn",
    "conditional_mean",
    "true_psi",
    "true_psi_oracle",
    "oracle_lambda",
    "baseline_split",
    "run_replicate",
    "run_study",
]

COV = np.full((3, 3), 0.5) + 0.5 * np.eye(3)
METHODS = ("oracle", "adaptive", "split")

# E[Var(m(X) | W)] for predictors 1 and 2 from true_psi_oracle(j, log2_nodes=20,
# scrambles=8, seed=20240917), i.e. 8 * 2**20 outer nodes; (value, standard error).
TRUE_PSI = {
    1: (0.8465164485169548, 3.36e-08),
    2: (2.2915104408550606, 9.46e-08),
    3: (0.0, 0.0),
}

_GL_X, _GL_W = np.polynomial.legendre.leggauss(32)


def regression_fn(x: np.ndarray) -> np.ndarray:
    """``E[Y | X = x]`` for rows of an ``(n, 3)`` array."""
    x = np.atleast_2d(x)
    x1, x2 = x[:, 0], x[:, 1]
    return np.sin(np.pi * x1) - 2.0 * (x2 - 0.5) ** 2 + (x2 > 0) * np.exp(x1)


def _others(j: int) -> list[int]:
    if j not in (1, 2, 3):
        raise ValueError("predictor must be 1, 2 or 3")
    return [k for k in range(3) if k != j - 1]


def generate_latent(n: int, seed) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``(X, Y)`` with ``X`` of shape ``(n, 3)``."""
    if n < 1:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((n, 3)) @ np.linalg.cholesky(COV).T
    X = 2.0 * ndtr(A) - 1.0
    y = regression_fn(X) + rng.uniform(-6.0, 6.0, n)
    return X, y


def generate(n: int, seed, predictor: int = 3) -> Dataset:
    """Sample of size ``n`` with ``X = X_predictor`` and ``W`` the other two columns."""
    X, y = generate_latent(n, seed)
    return Dataset(X[:, _others(predictor)], X[:, [predictor - 1]], y)


def _inner_moments(j: int, a_other: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Conditional mean and variance of ``m(X)`` given the other two latents.

    ``A_j | A_rest ~ N(sum(A_rest) / 3, 2 / 3)``.  The integral runs over the
    normal quantile scale and is split where ``A_j = 0`` so the indicator in
    ``m`` never falls inside a quadrature panel.
    """
    mu = a_other.sum(axis=1) / 3.0
    sd = math.sqrt(2.0 / 3.0)
    u0 = ndtr(-mu / sd)
    x_rest = 2.0 * ndtr(a_other) - 1.0
    m1 = np.zeros(len(mu))
    m2 = np.zeros(len(mu))
    for lo, hi in ((np.zeros_like(u0), u0), (u0, np.ones_like(u0))):
        half = (hi - lo) / 2.0
        u = lo[:, None] + half[:, None] * (_GL_X[None, :] + 1.0)
        w = half[:, None] * _GL_W[None, :]
        xj = 2.0 * ndtr(mu[:, None] + sd * ndtri(u)) - 1.0
        if j == 1:
            x1, x2 = xj, x_rest[:, [0]]
        elif j == 2:
            x1, x2 = x_rest[:, [0]], xj
        else:
            x1, x2 = x_rest[:, [0]], x_rest[:, [1]]
            x1, x2 = np.broadcast_to(x1, xj.shape), np.broadcast_to(x2, xj.shape)
        f = np.sin(np.pi * x1) - 2.0 * (x2 - 0.5) ** 2 + (x2 > 0) * np.exp(x1)
        m1 += np.sum(w * f, axis=1)
        m2 += np.sum(w * f * f, axis=1)
    return m1, np.maximum(m2 - m1**2, 0.0)


def conditional_mean(w: np.ndarray, predictor: int) -> np.ndarray:
    """``E[m(X) | W = w]`` where ``w`` holds the two non-predictor columns."""
    w = np.atleast_2d(np.asarray(w, dtype=float))
    a = ndtri((np.clip(w, -1 + 1e-16, 1 - 1e-16) + 1.0) / 2.0)
    return _inner_moments(predictor, a)[0]


def true_psi_oracle(
    predictor: int, log2_nodes: int = 20, scrambles: int = 8, seed: int = 0, chunk: int = 1 << 16
) -> tuple[float, float]:
    """Randomised-QMC value of ``E[Var(m(X) | W)]`` and its standard error.

    Outer integral over the two conditioning latents with scrambled Sobol
    points (``scrambles`` independent randomisations of ``2**log2_nodes``
    points each); inner integral by split Gauss-Legendre quadrature.
    """
    if predictor == 3:
        return 0.0, 0.0
    rest = _others(predictor)
    C = np.linalg.cholesky(COV[np.ix_(rest, rest)])
    N = 1 << log2_nodes
    chunk = min(chunk, N)
    ests = []
    for s in np.random.SeedSequence(seed).spawn(scrambles):
        eng = qmc.Sobol(2, scramble=True, seed=np.random.default_rng(s))
        tot = 0.0
        for _ in range(N // chunk):
            a = ndtri(eng.random(chunk)) @ C.T
            tot += float(_inner_moments(predictor, a)[1].sum())
        ests.append(tot / N)
    ests = np.asarray(ests)
    return float(ests.mean()), float(ests.std(ddof=1) / math.sqrt(scrambles))


def true_psi(predictor: int) -> float:
    """Population improvement in fit from adding ``X_predictor``."""
    _others(predictor)
    return TRUE_PSI[predictor][0]


def oracle_lambda(basis, H: np.ndarray, H1: np.ndarray, data: Dataset, predictor: int) -> float:
    """Smallest bound whose function class contains the projected true direction.

    The direction ``m(X) - E[m(X) | W]`` is projected on the basis columns
    ``H`` by least squares; its ratio ``a^T L a / (2 a^T H1 a)`` is the bound.
    Under the null the direction vanishes and the bound admitting ``h_1``
    alone is used.
    """
    L = basis.L
    fallback = float(np.min(np.diag(L)) / 2.0)
    if predictor == 3:
        return fallback
    full = np.empty((data.n, 3))
    rest = _others(predictor)
    full[:, rest] = data.w
    full[:, predictor - 1] = data.x[:, 0]
    target = regression_fn(full) - conditional_mean(data.w, predictor)
    a, *_ = np.linalg.lstsq(H, target, rcond=None)
    curv = float(a @ H1 @ a)
    if curv <= 0 or not np.any(a):
        return fallback
    return float(a @ L @ a / (2.0 * curv))


@dataclass(frozen=True)
class SplitResult:
    psi_hat: float
    p_value: float
    ci: tuple[float, float]
    se: float
    degenerate: bool = False


def _cv_risk(features: np.ndarray, y: np.ndarray, seed, folds: int, ridge_grid) -> tuple[float, float]:
    """Cross-fitted squared-error risk and the variance of its mean."""
    data = Dataset(features, np.zeros((len(y), 0)), y)
    fits = fit_nuisances(data, np.zeros((len(y), 0)), folds, ridge_grid, seed=seed, cross_fit=True)
    loss = (y - fits.mu_y) ** 2
    return float(loss.mean()), float(loss.var(ddof=1) / len(y))


def baseline_split(
    data: Dataset, alpha: float = 0.05, seed=0, folds: int = 5, ridge_grid=DEFAULT_RIDGE_GRID
) -> SplitResult:
    """Two-half Wald test of the risk difference.

    The full-covariate risk is estimated on one half and the reduced
    (``W``-only) risk on the other, each as the mean cross-fitted squared
    residual of a kernel ridge fit.  ``psi_hat`` is the raw difference;
    the interval is truncated below at zero.
    """
    n = data.n
    if n < 40:
        raise ValueError("baseline_split needs n >= 40")
    s_perm, s1, s2 = np.random.SeedSequence(seed).spawn(3)
    perm = np.random.default_rng(s_perm).permutation(n)
    h1, h2 = np.sort(perm[: n // 2]), np.sort(perm[n // 2:])
    s1 = int(s1.generate_state(1)[0])
    s2 = int(s2.generate_state(1)[0])
    r_full, v_full = _cv_risk(data.points[h1], data.y[h1], s1, folds, ridge_grid)
    r_red, v_red = _cv_risk(data.w[h2], data.y[h2], s2, folds, ridge_grid)
    psi = r_red - r_full
    se = math.sqrt(v_full + v_red)
    z = float(norm.ppf(1.0 - alpha / 2.0))
    if not se > 1e-12 * max(1.0, abs(r_full), abs(r_red)):
        warnings.warn("split baseline: degenerate variance, p-value set to 1", RuntimeWarning)
        return SplitResult(psi, 1.0, (max(0.0, psi), max(0.0, psi)), se, degenerate=True)
    p = float(norm.sf(psi / se))
    return SplitResult(psi, p, (max(0.0, psi - z * se), max(0.0, psi + z * se)), se)


@dataclass(frozen=True)
class SimConfig:
    """Monte Carlo design.

    ``alpha_grid`` sets the levels at which rejection rates are reported;
    intervals are built at level ``ci_alpha``.
    """

    n_grid: tuple[int, ...] = (100, 200, 400, 800, 1600)
    reps: int = 500
    predictors: tuple[int, ...] = (1, 2, 3)
    methods: tuple[str, ...] = METHODS
    alpha_grid: tuple[float, ...] = (0.05,)
    ci_alpha: float = 0.05
    seed: int = 0
    M: int = 500
    basis_size: int = 20
    folds: int = 5
    lambda_rule: str = "gated"
    n_jobs: int = 1
    keep_draws: bool = False

    def __post_init__(self):
        for name in ("n_grid", "predictors", "methods", "alpha_grid"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if not self.n_grid or any(int(n) < 40 for n in self.n_grid):
            raise ValueError("n_grid entries must be at least 40")
        if int(self.reps) < 1:
            raise ValueError("reps must be positive")
        if not self.predictors or any(p not in (1, 2, 3) for p in self.predictors):
            raise ValueError("predictors must be a non-empty subset of {1, 2, 3}")
        if not self.methods or any(m not in METHODS for m in self.methods):
            raise ValueError(f"methods must be a non-empty subset of {METHODS}")
        if any(not 0 < a < 1 for a in self.alpha_grid) or not 0 < self.ci_alpha < 1:
            raise ValueError("levels must lie in (0, 1)")
        if int(self.M) < 1:
            raise ValueError("M must be positive")
        if self.lambda_rule not in ("gated", "min", "1se"):
            raise ValueError("lambda_rule must be 'gated', 'min' or '1se'")


def _rep_seeds(master: int, n: int, predictor: int, rep: int) -> tuple[int, int]:
    ss = np.random.SeedSequence([int(master), int(n), int(predictor), int(rep)])
    data_seed, method_seed = ss.generate_state(2)
    return int(data_seed), int(method_seed)


def run_replicate(config: SimConfig, n: int, predictor: int, rep: int) -> list[dict]:
    """All requested methods on one simulated data set."""
    data_seed, method_seed = _rep_seeds(config.seed, n, predictor, rep)
    data = generate(n, data_seed, predictor)
    base = {"n": n, "predictor": predictor, "rep": rep}
    out = []
    arms = [m for m in config.methods if m in ("oracle", "adaptive")]

    if arms:
        t0 = time.perf_counter()
        shared = None
        try:
            s_nuis, s_cv, s_xi = np.random.SeedSequence(method_seed).spawn(3)
            basis = build_basis(data.points, KernelSpec(basis_size=config.basis_size))
            H = eval_basis(basis, data.points)
            fits = fit_nuisances(data, H, config.folds, seed=int(s_nuis.generate_state(1)[0]))
            g = assemble(data, H, fits)
            xi = rademacher_table(n, config.M, s_xi)
            shared = (basis, H, fits, g, xi, int(s_cv.generate_state(1)[0]))
        except (BoundaryInferError, np.linalg.LinAlgError, ValueError) as exc:
            err = f"{type(exc).__name__}: {exc}"
        t_shared = time.perf_counter() - t0
        for arm in arms:
            t1 = time.perf_counter()
            rec = dict(base, method=arm)
            if shared is None:
                rec["error"] = err
                out.append(rec)
                continue
            basis, H, fits, g, xi, cv_seed = shared
            try:
                if arm == "oracle":
                    lam = oracle_lambda(basis, H, g.H1, data, predictor)
                else:
                    lam = select_lambda(
                        data, H, fits, basis.L, default_lambda_grid(basis.L), config.folds,
                        cv_seed, config.lambda_rule,
                    )[0]
                res = infer_from_gof(g, basis.L, lam, config.ci_alpha, xi)
                rec.update(
                    psi_hat=res.psi_hat, p_value=res.p_value, ci_lower=res.ci[0],
                    ci_upper=res.ci[1], lambda_used=lam, pi_n=res.pi_n,
                )
                if config.keep_draws:
                    rec["draws_T"] = res.draws_T
            except (BoundaryInferError, np.linalg.LinAlgError, ValueError) as exc:
                rec["error"] = f"{type(exc).__name__}: {exc}"
            rec["seconds"] = t_shared + time.perf_counter() - t1
            out.append(rec)

    if "split" in config.methods:
        t1 = time.perf_counter()
        rec = dict(base, method="split")
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                sr = baseline_split(data, config.ci_alpha, seed=method_seed, folds=config.folds)
            rec.update(
                psi_hat=sr.psi_hat, p_value=sr.p_value, ci_lower=sr.ci[0],
                ci_upper=sr.ci[1], se=sr.se, degenerate=sr.degenerate,
            )
        except (BoundaryInferError, np.linalg.LinAlgError, ValueError) as exc:
            rec["error"] = f"{type(exc).__name__}: {exc}"
        rec["seconds"] = time.perf_counter() - t1
        out.append(rec)
    return out


@dataclass
class SimReport:
    """Aggregated metrics (``rows``) plus per-replicate ``records``."""

    rows: list[dict]
    records: list[dict] = field(repr=False, default_factory=list)
    config: dict = field(default_factory=dict)

    def cell(self, n: int, predictor: int, method: str) -> dict:
        for row in self.rows:
            if row["n"] == n and row["predictor"] == predictor and row["method"] == method:
                return row
        raise KeyError((n, predictor, method))

    def cell_records(self, n: int, predictor: int, method: str) -> list[dict]:
        return [
            r for r in self.records
            if r["n"] == n and r["predictor"] == predictor and r["method"] == method
        ]

    def columns(self) -> list[str]:
        return list(self.rows[0].keys()) if self.rows else []

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=self.columns())
            writer.writeheader()
            for row in self.rows:
                writer.writerow(row)

    def to_dict(self) -> dict:
        recs = []
        for r in self.records:
            r = dict(r)
            if "draws_T" in r:
                r["draws_T"] = np.asarray(r["draws_T"]).tolist()
            recs.append(r)
        return {"config": self.config, "rows": self.rows, "records": recs}

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)


def _aggregate(config: SimConfig, records: list[dict]) -> list[dict]:
    rows = []
    for n in config.n_grid:
        for predictor in config.predictors:
            psi0 = true_psi(predictor)
            for method in config.methods:
                cell = [
                    r for r in records
                    if r["n"] == n and r["predictor"] == predictor and r["method"] == method
                ]
                ok = [r for r in cell if "error" not in r]
                row = {"n": n, "predictor": predictor, "method": method, "reps": len(cell),
                       "failures": len(cell) - len(ok)}
                if ok:
                    est = np.array([r["psi_hat"] for r in ok])
                    sq = (est - psi0) ** 2
                    rmse = float(np.sqrt(sq.mean()))
                    rmse_se = float(sq.std(ddof=1) / (2.0 * rmse * math.sqrt(len(ok)))) if (
                        len(ok) > 1 and rmse > 0) else 0.0
                    lo = np.array([r["ci_lower"] for r in ok])
                    hi = np.array([r["ci_upper"] for r in ok])
                    pv = np.array([r["p_value"] for r in ok])
                    row.update(rmse=rmse, rmse_se=rmse_se, mean_estimate=float(est.mean()))
                    for a in config.alpha_grid:
                        row[f"rejection_{a:g}"] = float(np.mean(pv < a))
                    row.update(
                        coverage=float(np.mean((lo <= psi0) & (psi0 <= hi))),
                        mean_width=float(np.mean(hi - lo)),
                    )
                else:
                    row.update(rmse=float("nan"), rmse_se=float("nan"), mean_estimate=float("nan"))
                    for a in config.alpha_grid:
                        row[f"rejection_{a:g}"] = float("nan")
                    row.update(coverage=float("nan"), mean_width=float("nan"))
                row["wallclock"] = float(sum(r.get("seconds", 0.0) for r in cell))
                rows.append(row)
    return rows


def run_study(config: SimConfig, progress=None) -> SimReport:
    """Run every ``(n, predictor, rep)`` cell; deterministic given ``config.seed``.

    ``progress``, if given, is called with a short status string after each
    ``(n, predictor)`` block.
    """
    from joblib import Parallel, delayed

    records: list[dict] = []
    for n in config.n_grid:
        for predictor in config.predictors:
            t0 = time.perf_counter()
            jobs = (delayed(run_replicate)(config, n, predictor, rep) for rep in range(config.reps))
            batches = Parallel(n_jobs=config.n_jobs)(jobs)
            for batch in batches:
                records.extend(batch)
            if progress is not None:
                progress(f"n={n} predictor={predictor} reps={config.reps} "
                         f"done in {time.perf_counter() - t0:.1f}s")
    cfg = asdict(config)
    return SimReport(rows=_aggregate(config, records), records=records, config=cfg)
