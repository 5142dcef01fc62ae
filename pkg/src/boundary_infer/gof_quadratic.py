"""One-step goodness-of-fit along the regression sub-models, as a quadratic.

For the sub-model ``mu_Y(w) + beta * f(w, x)`` the bias-corrected
goodness-of-fit estimator is

    G(beta) = mean_i [ (r_i - beta f_i)^2 + 2 beta r_i mu_f(W_i) ]

with residuals ``r_i = Y_i - mu_Y(W_i)``.  Writing ``f = sum_j a_j h_j``
this is exactly

    G(beta) = const0 - 2 beta H2^T a + beta^2 a^T H1 a

with ``H1 = mean_i h(Z_i) h(Z_i)^T`` and ``H2 = mean_i r_i (h(Z_i) - mu_h(W_i))``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateDirectionError

__all__ = [
    "Dataset",
    "QuadraticGof",
    "assemble",
    "gof_value",
    "gof_derivative",
    "beta_hat",
    "second_derivative",
    "influence_column_full",
]


@dataclass(frozen=True)
class Dataset:
    """An i.i.d. sample ``Z_i = (W_i, X_i, Y_i)``."""

    w: np.ndarray
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.w, dtype=float)
        x = np.asarray(self.x, dtype=float)
        y = np.asarray(self.y, dtype=float).ravel()
        if w.ndim == 1:
            w = w[:, None]
        if x.ndim == 1:
            x = x[:, None]
        if not (w.shape[0] == x.shape[0] == y.shape[0]):
            raise ValueError(
                f"row counts disagree: w={w.shape[0]}, x={x.shape[0]}, y={y.shape[0]}"
            )
        for name, arr in (("w", w), ("x", x), ("y", y)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite entries")
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def points(self) -> np.ndarray:
        """The predictor matrix ``(W, X)``."""
        return np.hstack([self.w, self.x])

    def subset(self, idx) -> "Dataset":
        return Dataset(self.w[idx], self.x[idx], self.y[idx])


@dataclass(frozen=True)
class QuadraticGof:
    """Quadratic representation of the one-step goodness-of-fit.

    ``Phi[i, j]`` is the estimated derivative of the influence function
    of ``G_{h_j}`` at ``beta = 0``, evaluated at ``Z_i``.  The residuals,
    basis evaluations and fitted ``mu_h`` are kept so the full influence
    function can be evaluated for any ``(a, beta)``.
    """

    H1: np.ndarray
    H2: np.ndarray
    Phi: np.ndarray
    const0: float
    n: int
    resid: np.ndarray = field(repr=False)
    basis_evals: np.ndarray = field(repr=False)
    mu_h: np.ndarray = field(repr=False)


def assemble(data: Dataset, basis_evals: np.ndarray, fits) -> QuadraticGof:
    """Assemble ``H1``, ``H2``, ``Phi`` and ``const0`` from fitted nuisances."""
    hx = np.asarray(basis_evals, dtype=float)
    if hx.ndim == 1:
        hx = hx[:, None]
    n = data.n
    if n == 0:
        raise ValueError("empty dataset")
    mu_y = np.asarray(fits.mu_y, dtype=float).ravel()
    mu_h = np.asarray(fits.mu_h, dtype=float)
    if mu_h.ndim == 1:
        mu_h = mu_h[:, None]
    if not (hx.shape[0] == mu_y.shape[0] == mu_h.shape[0] == n) or mu_h.shape != hx.shape:
        raise ValueError("basis evaluations and nuisance fits do not align with the data")

    r = data.y - mu_y
    c = hx - mu_h
    H1 = hx.T @ hx / n
    H1 = 0.5 * (H1 + H1.T)
    rc = r[:, None] * c
    H2 = rc.mean(axis=0)
    Phi = -2.0 * (rc - H2)
    return QuadraticGof(
        H1=H1, H2=H2, Phi=Phi, const0=float(np.mean(r**2)), n=n,
        resid=r, basis_evals=hx, mu_h=mu_h,
    )


def _coef(g: QuadraticGof, a) -> np.ndarray:
    a = np.asarray(a, dtype=float).ravel()
    if a.shape[0] != g.H2.shape[0]:
        raise ValueError(f"coefficient length {a.shape[0]} != J={g.H2.shape[0]}")
    return a


def gof_value(g: QuadraticGof, a, beta: float) -> float:
    """``G(beta) = const0 - 2 beta H2^T a + beta^2 a^T H1 a``."""
    a = _coef(g, a)
    return float(g.const0 - 2.0 * beta * (g.H2 @ a) + beta**2 * (a @ g.H1 @ a))


def gof_derivative(g: QuadraticGof, a, beta: float) -> float:
    """First derivative of :func:`gof_value` in ``beta``."""
    a = _coef(g, a)
    return float(-2.0 * (g.H2 @ a) + 2.0 * beta * (a @ g.H1 @ a))


def beta_hat(g: QuadraticGof, a) -> float:
    """Minimiser ``H2^T a / a^T H1 a`` of the goodness-of-fit along ``a``."""
    a = _coef(g, a)
    curv = float(a @ g.H1 @ a)
    scale = float(a @ a) * max(1.0, float(np.trace(g.H1)))
    if curv <= 1e-14 * scale or curv <= 0.0:
        raise DegenerateDirectionError("degenerate direction: a^T H1 a is numerically zero")
    return float(g.H2 @ a) / curv


def second_derivative(g: QuadraticGof, a) -> float:
    """``2 a^T H1 a``; constant in ``beta``."""
    a = _coef(g, a)
    return float(2.0 * (a @ g.H1 @ a))


def influence_column_full(g: QuadraticGof, a, beta: float) -> np.ndarray:
    """Estimated influence values ``phi_f(Z_i; beta)`` for ``f = sum_j a_j h_j``.

    ``(r_i - beta f_i)^2 + 2 beta r_i mu_f(W_i) - G(beta)``.
    """
    a = _coef(g, a)
    f = g.basis_evals @ a
    muf = g.mu_h @ a
    r = g.resid
    return (r - beta * f) ** 2 + 2.0 * beta * r * muf - gof_value(g, a, beta)
