"""Batched per-subject kernels over stacked arrays.

Every kernel has a numba ``@njit`` version and a pure-numpy version with the
same signature.  The numpy path groups subjects of equal size and uses
batched LAPACK calls; the numba path loops over subjects.  Set
``CME_BACKEND=numpy`` to force the fallback (also used when numba is not
installed).

Rows of subject ``i`` are ``offsets[i]:offsets[i + 1]`` in every stacked array.
"""

from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - exercised only without numba
    NUMBA_AVAILABLE = False

    def njit(*args, **kwargs):
        def wrap(f):
            return f

        return wrap


def _requested_backend() -> str:
    name = os.environ.get("CME_BACKEND", "numba").strip().lower()
    if name not in ("numba", "numpy"):
        raise ValueError(f"CME_BACKEND must be 'numba' or 'numpy', got {name!r}")
    if name == "numba" and not NUMBA_AVAILABLE:
        return "numpy"
    return name


BACKEND = _requested_backend()


# ---------------------------------------------------------------- numpy path

def _size_groups(offsets):
    sizes = np.diff(offsets)
    for m in np.unique(sizes):
        idx = np.flatnonzero(sizes == m)
        rows = offsets[idx][:, None] + np.arange(m)[None, :]
        yield int(m), idx, rows


def project_np(A, M, offsets):
    n = len(offsets) - 1
    P = np.empty((n, M.shape[1], A.shape[1]))
    for m, idx, rows in _size_groups(offsets):
        P[idx] = np.swapaxes(M[rows], 1, 2) @ A[rows]
    return P


def whiten_np(A, B, offsets):
    WA = A.copy()
    for m, idx, rows in _size_groups(offsets):
        Bs = B[rows]
        WA[rows] -= Bs @ (np.swapaxes(Bs, 1, 2) @ A[rows])
    return WA


def right_mult_np(M, T, offsets):
    out = np.empty((M.shape[0], T.shape[2]))
    for m, idx, rows in _size_groups(offsets):
        out[rows] = M[rows] @ T[idx]
    return out


def scale_precision_np(G, Ds, out):
    np.multiply(G, Ds[:, None], out=out)
    out *= Ds[None, :]
    out[np.diag_indices_from(out)] += 1.0
    return out


def sample_d_np(M, r, offsets, root, tau, z):
    n = len(offsets) - 1
    k = M.shape[1]
    d = np.zeros((n, k))
    eye = np.eye(k)
    for m, idx, rows in _size_groups(offsets):
        Ms = M[rows]
        Mt = np.swapaxes(Ms, 1, 2)
        K = eye + Mt @ Ms
        Lk = np.linalg.cholesky(K)
        x = np.linalg.solve(K, Mt @ r[rows][:, :, None])[:, :, 0]
        e = np.linalg.solve(np.swapaxes(Lk, 1, 2), z[idx][:, :, None])[:, :, 0]
        d[idx] = (x + tau * e) @ root.T
    return d


def gamma_moments_np(ZS, r, d, offsets, G):
    k1 = ZS.shape[1]
    k2 = d.shape[1]
    K = k1 * k2
    T = np.einsum("ia,ib,ijk->ajbk", d, d, G).reshape(K, K)
    w = np.add.reduceat(ZS * r[:, None], offsets[:-1], axis=0)
    b = np.einsum("ia,ij->aj", d, w).reshape(K)
    return T, b


def _s2m_one(v, tol):
    # v sorted ascending; returns size of the final noise cluster
    n = v.shape[0]
    cs = np.concatenate(([0.0], np.cumsum(v)))
    while n >= 2:
        s = np.arange(1, n)
        lo = cs[1:n] / s
        hi = (cs[n] - cs[1:n]) / (n - s)
        score = s * lo * lo + (n - s) * hi * hi
        j = int(np.argmax(score))
        if hi[j] - lo[j] < tol:
            break
        n = j + 1
    return n


def s2m_counts_np(abs_draws, tol):
    T, p = abs_draws.shape
    out = np.empty(T, dtype=np.int64)
    for t in range(T):
        v = np.sort(abs_draws[t])
        out[t] = p - _s2m_one(v, tol)
    return out


# ---------------------------------------------------------------- numba path

@njit(cache=True)
def project_nb(A, M, offsets):
    N, c = A.shape
    k = M.shape[1]
    n = offsets.shape[0] - 1
    P = np.zeros((n, k, c))
    for i in range(n):
        for row in range(offsets[i], offsets[i + 1]):
            for j in range(k):
                u = M[row, j]
                for col in range(c):
                    P[i, j, col] += u * A[row, col]
    return P


@njit(cache=True)
def whiten_nb(A, B, offsets):
    c = A.shape[1]
    k = B.shape[1]
    n = offsets.shape[0] - 1
    WA = A.copy()
    P = np.empty((k, c))
    for i in range(n):
        P[:, :] = 0.0
        for row in range(offsets[i], offsets[i + 1]):
            for j in range(k):
                u = B[row, j]
                for col in range(c):
                    P[j, col] += u * A[row, col]
        for row in range(offsets[i], offsets[i + 1]):
            for j in range(k):
                u = B[row, j]
                for col in range(c):
                    WA[row, col] -= u * P[j, col]
    return WA


@njit(cache=True)
def right_mult_nb(M, T, offsets):
    k = M.shape[1]
    n = offsets.shape[0] - 1
    out = np.empty((M.shape[0], T.shape[2]))
    for i in range(n):
        for row in range(offsets[i], offsets[i + 1]):
            for l in range(T.shape[2]):
                acc = 0.0
                for j in range(k):
                    acc += M[row, j] * T[i, j, l]
                out[row, l] = acc
    return out


@njit(cache=True)
def scale_precision_nb(G, Ds, out):
    # lower triangle only (plus diagonal); the Cholesky reads nothing else
    p = Ds.shape[0]
    for j in range(p):
        dj = Ds[j]
        for i in range(j, p):
            out[i, j] = Ds[i] * G[i, j] * dj
        out[j, j] += 1.0
    return out


@njit(cache=True)
def _chol_solve_small(L, v):
    k = L.shape[0]
    y = np.empty(k)
    for a in range(k):
        acc = v[a]
        for b in range(a):
            acc -= L[a, b] * y[b]
        y[a] = acc / L[a, a]
    return _back_sub_t(L, y)


@njit(cache=True)
def _back_sub_t(L, y):
    # solves L^T x = y for lower-triangular L
    k = L.shape[0]
    x = np.empty(k)
    for a in range(k - 1, -1, -1):
        acc = y[a]
        for b in range(a + 1, k):
            acc -= L[b, a] * x[b]
        x[a] = acc / L[a, a]
    return x


@njit(cache=True)
def sample_d_nb(M, r, offsets, root, tau, z):
    n = offsets.shape[0] - 1
    k = M.shape[1]
    d = np.zeros((n, k))
    for i in range(n):
        a = offsets[i]
        b = offsets[i + 1]
        K = np.eye(k)
        v = np.zeros(k)
        for row in range(a, b):
            for j in range(k):
                v[j] += M[row, j] * r[row]
                for l in range(k):
                    K[j, l] += M[row, j] * M[row, l]
        Lk = np.linalg.cholesky(K)
        x = _chol_solve_small(Lk, v)
        e = _back_sub_t(Lk, z[i])
        for j in range(k):
            acc = 0.0
            for l in range(j + 1):
                acc += root[j, l] * (x[l] + tau * e[l])
            d[i, j] = acc
    return d


@njit(cache=True)
def gamma_moments_nb(ZS, r, d, offsets, G):
    k1 = ZS.shape[1]
    n, k2 = d.shape
    K = k1 * k2
    T = np.zeros((K, K))
    bvec = np.zeros(K)
    w = np.zeros(k1)
    for i in range(n):
        w[:] = 0.0
        for row in range(offsets[i], offsets[i + 1]):
            for j in range(k1):
                w[j] += ZS[row, j] * r[row]
        for a in range(k2):
            da = d[i, a]
            for j in range(k1):
                bvec[a * k1 + j] += da * w[j]
            for bb in range(k2):
                dd = da * d[i, bb]
                for j in range(k1):
                    for l in range(k1):
                        T[a * k1 + j, bb * k1 + l] += dd * G[i, j, l]
    return T, bvec


@njit(cache=True)
def s2m_counts_nb(abs_draws, tol):
    T, p = abs_draws.shape
    out = np.empty(T, dtype=np.int64)
    cs = np.zeros(p + 1)
    for t in range(T):
        v = np.sort(abs_draws[t])
        for j in range(p):
            cs[j + 1] = cs[j] + v[j]
        n = p
        while n >= 2:
            best = -1.0
            jbest = 1
            lo_b = 0.0
            hi_b = 0.0
            for s in range(1, n):
                lo = cs[s] / s
                hi = (cs[n] - cs[s]) / (n - s)
                score = s * lo * lo + (n - s) * hi * hi
                if score > best:
                    best = score
                    jbest = s
                    lo_b = lo
                    hi_b = hi
            if hi_b - lo_b < tol:
                break
            n = jbest
        out[t] = p - n
    return out


# ---------------------------------------------------------------- dispatch

_IMPLS = {
    "numpy": dict(
        whiten=whiten_np, project=project_np, right_mult=right_mult_np,
        scale_precision=scale_precision_np, sample_d=sample_d_np,
        gamma_moments=gamma_moments_np, s2m_counts=s2m_counts_np,
    ),
    "numba": dict(
        whiten=whiten_nb, project=project_nb, right_mult=right_mult_nb,
        scale_precision=scale_precision_nb, sample_d=sample_d_nb,
        gamma_moments=gamma_moments_nb, s2m_counts=s2m_counts_nb,
    ),
}


def kernels(backend: str | None = None) -> dict:
    """Kernel table for ``backend`` (default: the one chosen at import)."""
    return _IMPLS[backend or BACKEND]


def whiten(A, B, offsets):
    """A_i - B_i B_i^T A_i for every subject."""
    return _IMPLS[BACKEND]["whiten"](A, B, offsets)


def right_mult(M, T, offsets):
    """Per-subject M_i T_i with T of shape (n, k, l)."""
    return _IMPLS[BACKEND]["right_mult"](M, T, offsets)


def scale_precision(G, Ds, out):
    """Write D^{1/2} G D^{1/2} + I into ``out``.

    The numba kernel fills only the lower triangle; callers must only read
    that part (LAPACK ``lower=1`` routines do).
    """
    return _IMPLS[BACKEND]["scale_precision"](G, Ds, out)


def project(A, M, offsets):
    """Per-subject M_i^T A_i, shape (n, k, c)."""
    return _IMPLS[BACKEND]["project"](A, M, offsets)


def sample_d(M, r, offsets, root, tau, z):
    return _IMPLS[BACKEND]["sample_d"](M, r, offsets, root, float(tau), z)


def gamma_moments(ZS, r, d, offsets, G):
    return _IMPLS[BACKEND]["gamma_moments"](ZS, r, d, offsets, G)


def s2m_counts(abs_draws, tol):
    return _IMPLS[BACKEND]["s2m_counts"](np.ascontiguousarray(abs_draws, dtype=float), float(tol))
