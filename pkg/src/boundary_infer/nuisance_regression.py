"""Kernel ridge regression for the conditional-mean nuisances.

Two families of conditional means are needed: ``E[Y | W]`` and
``E[h_j(W, X) | W]`` for every basis function.  Both are fitted with a
centred Gaussian-kernel ridge regression on ``W``; the ridge penalty is
picked by k-fold cross-validation, one value for the outcome and one value
shared by all J basis targets.

The penalised system is ``(K + n * ridge * I) alpha = t - mean(t)``, so the
ridge grid does not need rescaling with the sample size.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .rkhs_basis import gaussian_kernel, low_rank_factor, median_heuristic

__all__ = [
    "DEFAULT_RIDGE_GRID",
    "KernelRidgePredictor",
    "NuisanceFits",
    "fit_nuisances",
    "mu_f",
    "kfold_indices",
]

DEFAULT_RIDGE_GRID = tuple(np.geomspace(1e-6, 10.0, 15))


def kfold_indices(n: int, folds: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Random balanced fold assignment; returns the held-out index sets."""
    perm = rng.permutation(n)
    return [np.sort(perm[k::folds]) for k in range(folds)]


@dataclass(frozen=True)
class KernelRidgePredictor:
    """Fitted ridge regressions, able to predict at new covariate values."""

    w_train: np.ndarray
    bandwidth: float
    alpha_y: np.ndarray
    alpha_h: np.ndarray
    mean_y: float
    mean_h: np.ndarray

    def predict(self, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        w = _as_2d(w)
        Kq = gaussian_kernel(w, self.w_train, self.bandwidth)
        return Kq @ self.alpha_y + self.mean_y, Kq @ self.alpha_h + self.mean_h


@dataclass(frozen=True)
class NuisanceFits:
    """Fitted nuisance values at the sample points.

    ``mu_h[:, j]`` is the fitted ``E[h_j(W, X) | W = w_i]``.
    """

    mu_y: np.ndarray
    mu_h: np.ndarray
    ridge_y: float
    ridge_h: float
    predictor: KernelRidgePredictor | None = field(default=None, repr=False)
    cv_y: np.ndarray | None = field(default=None, repr=False)
    cv_h: np.ndarray | None = field(default=None, repr=False)

    def subset(self, idx) -> "NuisanceFits":
        """Restrict the fitted values to the rows ``idx``."""
        return NuisanceFits(
            mu_y=self.mu_y[idx],
            mu_h=self.mu_h[idx],
            ridge_y=self.ridge_y,
            ridge_h=self.ridge_h,
            predictor=self.predictor,
        )


def _as_2d(a) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    return a


def _ridge_path(
    K_tr: np.ndarray, K_te: np.ndarray, T_tr: np.ndarray, ridges: np.ndarray
) -> np.ndarray:
    """Held-out predictions for every ridge value.

    Returns an array of shape ``(len(ridges), n_te, k)``.
    """
    n_tr = K_tr.shape[0]
    lam, U = np.linalg.eigh(K_tr)
    lam = np.clip(lam, 0.0, None)
    mean = T_tr.mean(axis=0)
    Z = U.T @ (T_tr - mean)
    B = K_te @ U
    out = np.empty((len(ridges), K_te.shape[0], T_tr.shape[1]))
    for r, ridge in enumerate(ridges):
        out[r] = B @ (Z / (lam + n_tr * ridge)[:, None]) + mean
    return out


def _ridge_path_lowrank(
    G_tr: np.ndarray, G_te: np.ndarray, T_tr: np.ndarray, ridges: np.ndarray
) -> np.ndarray:
    """:func:`_ridge_path` for ``K = G G^T`` via a thin SVD of ``G_tr``."""
    n_tr = G_tr.shape[0]
    U, sv, Vt = np.linalg.svd(G_tr, full_matrices=False)
    lam = sv**2
    mean = T_tr.mean(axis=0)
    Z = U.T @ (T_tr - mean)
    B = G_te @ (Vt.T * sv)
    out = np.empty((len(ridges), G_te.shape[0], T_tr.shape[1]))
    for r, ridge in enumerate(ridges):
        out[r] = B @ (Z / (lam + n_tr * ridge)[:, None]) + mean
    return out


def fit_nuisances(
    data,
    basis_evals: np.ndarray,
    folds: int = 5,
    ridge_grid=DEFAULT_RIDGE_GRID,
    *,
    bandwidth: float | None = None,
    seed: int = 0,
    cross_fit: bool = False,
) -> NuisanceFits:
    """Fit ``E[Y|W]`` and ``E[h_j|W]`` by cross-validated kernel ridge regression.

    Parameters
    ----------
    data : Dataset
        Needs attributes ``w`` (n x d2) and ``y`` (n,).
    basis_evals : (n, J) array
        ``h_j(W_i, X_i)``, rows aligned with ``data``.
    folds : int
        Number of CV folds, at least 2.
    ridge_grid : sequence of float
        Candidate penalties.
    bandwidth : float, optional
        Kernel length scale on W; median heuristic when omitted.
    seed : int
        Seeds the fold assignment.
    cross_fit : bool
        Return out-of-fold predictions instead of full-sample fitted values.
    """
    ridges = np.asarray(list(ridge_grid), dtype=float)
    if ridges.size == 0:
        raise ValueError("ridge_grid is empty")
    if np.any(ridges <= 0):
        raise ValueError("ridge values must be positive")
    folds = int(folds)
    if folds < 2:
        raise ValueError("folds must be at least 2")

    w = _as_2d(data.w)
    y = np.asarray(data.y, dtype=float).ravel()
    H = _as_2d(basis_evals)
    n = y.shape[0]
    if w.shape[0] != n or H.shape[0] != n:
        raise ValueError("basis_evals / w rows do not align with y")
    if n < 2 * folds:
        raise ValueError(f"need n >= 2*folds, got n={n}, folds={folds}")
    J = H.shape[1]

    bw = bandwidth if bandwidth is not None else median_heuristic(w)
    K = gaussian_kernel(w, w, bw)
    T = np.column_stack([y, H])

    rng = np.random.default_rng(seed)
    held_out = kfold_indices(n, folds, rng)
    G = low_rank_factor(K)
    oof = np.empty((len(ridges), n, J + 1))
    for te in held_out:
        tr = np.setdiff1d(np.arange(n), te, assume_unique=True)
        if G is None:
            oof[:, te, :] = _ridge_path(K[np.ix_(tr, tr)], K[np.ix_(te, tr)], T[tr], ridges)
        else:
            oof[:, te, :] = _ridge_path_lowrank(G[tr], G[te], T[tr], ridges)

    sq = (oof - T[None]) ** 2
    cv_y = sq[:, :, 0].mean(axis=1)
    cv_h = sq[:, :, 1:].mean(axis=(1, 2)) if J else np.zeros(len(ridges))
    ry = int(np.argmin(cv_y))
    rh = int(np.argmin(cv_h))

    mean = T.mean(axis=0)
    Tc = T - mean
    cy, ch = n * ridges[ry], n * ridges[rh]
    if G is None:
        lam, U = np.linalg.eigh(K)
        lam = np.clip(lam, 0.0, None)
        Z = U.T @ Tc
        alpha_y = U @ (Z[:, 0] / (lam + cy))
        alpha_h = U @ (Z[:, 1:] / (lam + ch)[:, None])
    else:
        # (G G^T + c I)^{-1} t = U diag(1 / (s^2 + c)) U^T t + (t - U U^T t) / c
        U, sv, _ = np.linalg.svd(G, full_matrices=False)
        lam = sv**2
        Z = U.T @ Tc
        alpha_y = U @ (Z[:, 0] / (lam + cy)) + (Tc[:, 0] - U @ Z[:, 0]) / cy
        alpha_h = U @ (Z[:, 1:] / (lam + ch)[:, None]) + (Tc[:, 1:] - U @ Z[:, 1:]) / ch
        fitted_y = U @ (Z[:, 0] * lam / (lam + cy)) + mean[0]
        fitted_h = U @ (Z[:, 1:] * (lam / (lam + ch))[:, None]) + mean[1:]
    predictor = KernelRidgePredictor(
        w_train=w, bandwidth=bw, alpha_y=alpha_y, alpha_h=alpha_h,
        mean_y=float(mean[0]), mean_h=mean[1:],
    )
    if cross_fit:
        mu_y = oof[ry, :, 0].copy()
        mu_h = oof[rh, :, 1:].copy()
    elif G is None:
        mu_y = K @ alpha_y + mean[0]
        mu_h = K @ alpha_h + mean[1:]
    else:
        mu_y, mu_h = fitted_y, fitted_h

    return NuisanceFits(
        mu_y=mu_y, mu_h=mu_h,
        ridge_y=float(ridges[ry]), ridge_h=float(ridges[rh]),
        predictor=predictor, cv_y=cv_y, cv_h=cv_h,
    )


def mu_f(fits: NuisanceFits, a) -> np.ndarray:
    """Fitted ``E[f(W, X) | W]`` at the sample for ``f = sum_j a_j h_j``."""
    a = np.asarray(a, dtype=float).ravel()
    if a.shape[0] != fits.mu_h.shape[1]:
        raise ValueError(f"coefficient length {a.shape[0]} != J={fits.mu_h.shape[1]}")
    return fits.mu_h @ a
