"""Low-rank linear algebra primitives.

The proxy covariance of subject ``i`` is ``C_i = M M^T + I`` with
``M = Z_i S^T Gamma L_R`` and ``L_R`` the lower Cholesky factor of ``R R^T``,
so ``M M^T = Z_i S^T Gamma R R^T Gamma^T S Z_i^T`` while ``M`` keeps only
``k2`` columns.  Nothing here forms an ``m x m`` inverse.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import BSpline
from scipy.linalg import lapack

from .model import NumericalError, ProjectionPair

JITTER_START = 1e-10
JITTER_STEPS = 3


@dataclass(frozen=True, eq=False)
class LowRankFactor:
    M: np.ndarray

    @property
    def m(self) -> int:
        return self.M.shape[0]

    @property
    def k2(self) -> int:
        return self.M.shape[1]

    def dense(self) -> np.ndarray:
        return self.M @ self.M.T + np.eye(self.m)


def gamma_matrix(gamma, k1: int, k2: int) -> np.ndarray:
    """Column-major reshape of vec(Gamma)."""
    gamma = np.asarray(gamma, dtype=float)
    if gamma.shape != (k1 * k2,):
        raise ValueError(f"gamma has shape {gamma.shape}, expected ({k1 * k2},)")
    return gamma.reshape(k1, k2, order="F")


def compression_root(R: np.ndarray) -> np.ndarray:
    """Lower-triangular L with L L^T = R R^T."""
    return cholesky_jitter(R @ R.T, name="R R^T")


def low_rank_factor(Z_i, proj: ProjectionPair, gamma, root: np.ndarray | None = None) -> LowRankFactor:
    Z_i = np.asarray(Z_i, dtype=float)
    if Z_i.ndim != 2 or Z_i.shape[1] != proj.q:
        raise ValueError(f"Z_i has shape {Z_i.shape}, expected (m, {proj.q})")
    G = gamma_matrix(gamma, proj.k1, proj.k2)
    if root is None:
        root = compression_root(proj.R)
    return LowRankFactor((Z_i @ proj.S.T) @ (G @ root))


def woodbury_inverse_apply(f: LowRankFactor, v) -> np.ndarray:
    """C^{-1} v = v - M (I + M^T M)^{-1} M^T v."""
    v = np.asarray(v, dtype=float)
    if v.shape[0] != f.m:
        raise ValueError(f"vector has length {v.shape[0]}, expected {f.m}")
    M = f.M
    K = np.eye(f.k2) + M.T @ M
    c = cholesky_jitter(K, name="I + M^T M")
    return v - M @ chol_solve(c, M.T @ v)


def _inverse_sqrt_coefs(M):
    U, s, _ = np.linalg.svd(M, full_matrices=False)
    return U, 1.0 - 1.0 / np.sqrt(1.0 + s * s)


def inverse_sqrt_apply(f: LowRankFactor, A) -> np.ndarray:
    """Apply the symmetric inverse square root W of C = M M^T + I.

    With ``M = U diag(s) V^T``, ``W = I - U diag(1 - 1/sqrt(1 + s^2)) U^T``.
    """
    A = np.asarray(A, dtype=float)
    if A.shape[0] != f.m:
        raise ValueError(f"A has {A.shape[0]} rows, expected {f.m}")
    try:
        U, c = _inverse_sqrt_coefs(f.M)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"SVD of low-rank factor failed: {exc}") from exc
    if A.ndim == 1:
        return A - U @ (c * (U.T @ A))
    return A - U @ (c[:, None] * (U.T @ A))


def kron_row_block(Z_i, S, d_i) -> np.ndarray:
    """Rows of the gamma-regression design for one subject: d_i^T kron (Z_i S^T)."""
    Z_i = np.asarray(Z_i, dtype=float)
    S = np.asarray(S, dtype=float)
    d_i = np.asarray(d_i, dtype=float).ravel()
    if Z_i.shape[1] != S.shape[1]:
        raise ValueError("Z_i and S disagree on q")
    return np.kron(d_i[None, :], Z_i @ S.T)


def _potrf(A):
    c, info = lapack.dpotrf(A, lower=1, clean=1, overwrite_a=0)
    if info != 0:
        raise np.linalg.LinAlgError(f"dpotrf info={info}")
    return c


def cholesky_jitter(A, name: str = "matrix") -> np.ndarray:
    """Lower Cholesky factor, adding diagonal jitter on failure.

    Jitter starts at 1e-10 * trace/k and grows tenfold, at most three times.
    """
    A = np.asarray(A, dtype=float)
    if not np.all(np.isfinite(A)):
        raise NumericalError(f"{name} has non-finite entries")
    try:
        return _potrf(A)
    except np.linalg.LinAlgError:
        pass
    k = A.shape[0]
    scale = max(np.trace(A) / k, np.finfo(float).tiny)
    eps = JITTER_START * scale
    for _ in range(JITTER_STEPS):
        try:
            return _potrf(A + eps * np.eye(k))
        except np.linalg.LinAlgError:
            eps *= 10.0
    raise NumericalError(f"Cholesky factorization of {name} failed after jitter")


def chol_solve(L, b) -> np.ndarray:
    """Solve (L L^T) x = b."""
    x, info = lapack.dpotrs(L, b, lower=1)
    if info != 0:
        raise NumericalError(f"dpotrs info={info}")
    return x


def solve_lower_t(L, z) -> np.ndarray:
    """Solve L^T x = z for lower-triangular L."""
    x, info = lapack.dtrtrs(L, z, lower=1, trans=1)
    if info != 0:
        raise NumericalError(f"dtrtrs info={info}")
    return x


def mvn_sample(mean, cov, rng: np.random.Generator) -> np.ndarray:
    mean = np.asarray(mean, dtype=float)
    L = cholesky_jitter(cov, name="covariance")
    return mean + L @ rng.standard_normal(mean.shape[0])


def mvn_sample_precision(b, P, rng: np.random.Generator, scale: float = 1.0):
    """Draw from N(P^{-1} b, scale^2 P^{-1}); returns (draw, mean)."""
    L = cholesky_jitter(P, name="precision")
    mean = chol_solve(L, np.asarray(b, dtype=float))
    z = rng.standard_normal(len(b))
    return mean + scale * solve_lower_t(L, z), mean


def bspline_basis(times, n_basis: int = 3, boundary=None) -> np.ndarray:
    """Cubic B-spline basis without interior knots and without the intercept column.

    Boundary knots default to the range of ``times``; pass ``boundary`` to
    evaluate new points on a fixed range.
    """
    t = np.asarray(times, dtype=float).ravel()
    if t.size == 0 or not np.all(np.isfinite(t)):
        raise ValueError("times must be a non-empty finite vector")
    if n_basis != 3:
        raise ValueError("only the df=3 cubic basis is supported")
    lo, hi = (t.min(), t.max()) if boundary is None else map(float, boundary)
    if not hi > lo:
        raise ValueError("degenerate time range: all times are equal")
    knots = np.r_[[lo] * 4, [hi] * 4]
    x = np.clip(t, lo, hi)
    B = BSpline.design_matrix(x, knots, 3).toarray()
    return B[:, 1:]
