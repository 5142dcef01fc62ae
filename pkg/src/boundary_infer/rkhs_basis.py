"""Empirical Gaussian-kernel eigenbasis and its complexity form.

The function class used for the sub-model directions is spanned by the
leading eigenfunctions of a Gaussian kernel.  They are realised from data
with the Nystrom construction: eigendecompose the Gram matrix on a set of
anchor points and extend each eigenvector to a function through a kernel
expansion over the anchors.

With ``K = U diag(Lam) U^T`` on ``m`` anchors, the j-th basis function is

    h_j(x) = sqrt(m) / Lam_j * sum_i k(x, node_i) U[i, j]

so that ``h_j(node_k) = sqrt(m) U[k, j]`` and the basis is orthonormal in
the empirical inner product ``<f, g> = (1/m) sum_k f(node_k) g(node_k)``.
The eigenvalues reported as ``gamma`` are those of ``K / m``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import eigh
from scipy.linalg.lapack import dpstrf
from scipy.spatial.distance import cdist, pdist

from .errors import DegenerateKernelError

__all__ = [
    "KernelSpec",
    "Basis",
    "gaussian_kernel",
    "median_heuristic",
    "build_basis",
    "eval_basis",
    "complexity",
    "low_rank_factor",
]

# Relative eigenvalue floor below which a basis direction is treated as
# numerically absent.
_RANK_TOL = 100 * np.finfo(float).eps


def gaussian_kernel(a: np.ndarray, b: np.ndarray, bandwidth: float) -> np.ndarray:
    """Gaussian kernel matrix ``exp(-|a_i - b_j|^2 / (2 bandwidth^2))``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if a.shape[1] == 0:
        return np.ones((a.shape[0], b.shape[0]))
    d2 = cdist(a, b, metric="sqeuclidean")
    return np.exp(-d2 / (2.0 * bandwidth**2))


def low_rank_factor(K: np.ndarray, tol: float = 1e-12) -> np.ndarray | None:
    """Pivoted Cholesky factor ``G`` with ``K ~= G G^T`` to diagonal residual ``tol``.

    Returns ``None`` when the numerical rank exceeds half the size, in which
    case a dense eigendecomposition is cheaper.
    """
    n = K.shape[0]
    if n == 0:
        return None
    c, piv, rank, info = dpstrf(K, lower=1, tol=tol)
    if info < 0 or rank > n // 2:
        return None
    Lc = np.tril(c[:, :rank])
    G = np.empty((n, rank))
    G[piv - 1] = Lc
    return G


def median_heuristic(points: np.ndarray, max_points: int = 2000) -> float:
    """Median pairwise Euclidean distance, falling back to 1 when degenerate.

    Only the first ``max_points`` rows are used so the cost stays bounded.
    """
    points = np.asarray(points, dtype=float)
    if points.ndim == 1:
        points = points[:, None]
    pts = points[:max_points]
    if pts.shape[0] < 2 or pts.shape[1] == 0:
        return 1.0
    med = float(np.median(pdist(pts)))
    if not np.isfinite(med) or med <= 0.0:
        return 1.0
    return med


@dataclass(frozen=True)
class KernelSpec:
    """Configuration of the Gaussian-kernel basis.

    Parameters
    ----------
    bandwidth : float or None
        Kernel length scale.  ``None`` selects the median pairwise distance.
    basis_size : int
        Number of eigenfunctions ``J`` to keep.
    jitter : float or None
        Diagonal jitter added to the Gram matrix before the eigensolve.
        ``None`` uses ``1e-10 * trace(K) / m``.
    norm : {"inverse_square", "rkhs"}
        Complexity form.  ``"inverse_square"`` uses ``L = diag(1 / gamma_j^2)``;
        ``"rkhs"`` uses the conventional RKHS norm ``L = diag(1 / gamma_j)``.
    """

    bandwidth: float | None = None
    basis_size: int = 20
    jitter: float | None = None
    norm: str = "inverse_square"

    def __post_init__(self):
        if self.bandwidth is not None and not self.bandwidth > 0:
            raise ValueError("bandwidth must be positive")
        if int(self.basis_size) < 1:
            raise ValueError("basis_size must be at least 1")
        if self.jitter is not None and self.jitter < 0:
            raise ValueError("jitter must be non-negative")
        if self.norm not in ("inverse_square", "rkhs"):
            raise ValueError("norm must be 'inverse_square' or 'rkhs'")


@dataclass(frozen=True)
class Basis:
    """Immutable empirical eigenbasis.

    Attributes
    ----------
    nodes : (m, d) array
        Anchor points of the kernel expansion.
    coef : (m, J) array
        Column j holds the expansion weights of ``h_j``.
    gamma : (J,) array
        Eigenvalues of ``K / m`` sorted in decreasing order.
    L : (J, J) array
        Complexity form, ``Gamma(f) = a^T L a``.
    bandwidth : float
        Kernel length scale actually used.
    node_evals : (m, J) array
        ``h_j`` evaluated at the nodes, equal to ``sqrt(m) U``.
    """

    nodes: np.ndarray
    coef: np.ndarray
    gamma: np.ndarray
    L: np.ndarray
    bandwidth: float
    node_evals: np.ndarray = field(repr=False)

    @property
    def size(self) -> int:
        return self.coef.shape[1]


def complexity_matrix(gamma: np.ndarray, norm: str = "inverse_square") -> np.ndarray:
    """Diagonal complexity form for eigenvalues ``gamma``."""
    gamma = np.asarray(gamma, dtype=float)
    if norm == "inverse_square":
        return np.diag(1.0 / gamma**2)
    if norm == "rkhs":
        return np.diag(1.0 / gamma)
    raise ValueError(f"unknown norm {norm!r}")


def build_basis(points: np.ndarray, spec: KernelSpec) -> Basis:
    """Build the J-term Nystrom eigenbasis anchored at ``points``.

    Raises
    ------
    ValueError
        If ``J`` exceeds the number of points or the points are not finite.
    DegenerateKernelError
        If one of the leading ``J`` Gram eigenvalues is numerically zero.
    """
    points = np.asarray(points, dtype=float)
    if points.ndim == 1:
        points = points[:, None]
    m = points.shape[0]
    J = int(spec.basis_size)
    if J > m:
        raise ValueError(f"basis_size J={J} exceeds the number of points m={m}")
    if not np.all(np.isfinite(points)):
        raise ValueError("points contain non-finite entries")

    bw = spec.bandwidth if spec.bandwidth is not None else median_heuristic(points)
    K = gaussian_kernel(points, points, bw)
    jitter = spec.jitter if spec.jitter is not None else 1e-10 * np.trace(K) / m
    Kj = K + jitter * np.eye(m)

    # Gaussian Gram matrices on low-dimensional points are numerically low
    # rank; a pivoted Cholesky factor then gives the leading eigenpairs
    # through a thin SVD at a fraction of the dense cost.
    G = low_rank_factor(K)
    if G is not None and G.shape[1] > J:
        U, sv, _ = np.linalg.svd(G, full_matrices=False)
        lam, U = sv[:J] ** 2, U[:, :J]
    else:
        lam, U = eigh(Kj, subset_by_index=[m - J, m - 1])
        lam = lam[::-1] - jitter
        U = U[:, ::-1]
    top = max(float(lam[0]), 0.0)
    if top <= 0.0 or lam[-1] <= _RANK_TOL * max(top, 1.0):
        raise DegenerateKernelError(
            "degenerate kernel matrix: leading eigenvalues "
            f"{lam[-1]:.3e} (smallest kept) vs {top:.3e}"
        )
    # Fix the eigenvector sign so the basis is reproducible across LAPACK builds.
    signs = np.sign(U[np.argmax(np.abs(U), axis=0), np.arange(J)])
    U = U * signs

    gamma = lam / m
    coef = np.sqrt(m) * U / lam
    return Basis(
        nodes=points.copy(),
        coef=coef,
        gamma=gamma,
        L=complexity_matrix(gamma, spec.norm),
        bandwidth=float(bw),
        node_evals=np.sqrt(m) * U,
    )


def eval_basis(basis: Basis, query: np.ndarray) -> np.ndarray:
    """Evaluate every basis function at the rows of ``query``.

    Returns a ``(q, J)`` array with entry ``(i, j) = h_j(query_i)``.
    """
    query = np.asarray(query, dtype=float)
    if query.ndim == 1:
        query = query[:, None] if basis.nodes.shape[1] == 1 else query[None, :]
    if query.shape[1] != basis.nodes.shape[1]:
        raise ValueError(
            f"query has {query.shape[1]} columns, basis nodes have {basis.nodes.shape[1]}"
        )
    if query.shape[0] == 0:
        return np.zeros((0, basis.size))
    return gaussian_kernel(query, basis.nodes, basis.bandwidth) @ basis.coef


def complexity(basis: Basis, a) -> float:
    """Complexity ``a^T L a`` of ``f = sum_j a_j h_j``."""
    a = np.asarray(a, dtype=float).ravel()
    if a.shape[0] != basis.size:
        raise ValueError(f"coefficient length {a.shape[0]} != J={basis.size}")
    return float(max(a @ basis.L @ a, 0.0))
