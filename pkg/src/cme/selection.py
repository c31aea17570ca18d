"""Fixed-effects selection by sequential 2-means, interval summaries and evaluation metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels

LEVEL = 0.95


@dataclass(frozen=True, eq=False)
class SelectionResult:
    selected: np.ndarray  # bool, length p
    signal_count_per_draw: np.ndarray
    chosen_count: int
    tol_b: float

    def __post_init__(self):
        if int(np.count_nonzero(self.selected)) != self.chosen_count:
            raise ValueError("chosen_count disagrees with the selection mask")

    @property
    def indices(self) -> np.ndarray:
        return np.flatnonzero(self.selected)


def default_tol(beta_draws) -> float:
    """max_j median|beta_j| / sqrt(T), floored at the smallest positive double."""
    B = np.abs(np.asarray(beta_draws, dtype=float))
    return max(float(np.median(B, axis=0).max()) / np.sqrt(B.shape[0]), np.finfo(float).tiny)


def s2m_counts(beta_draws, tol_b: float) -> np.ndarray:
    """Number of signals in each draw under sequential 2-means on |beta|.

    Each pass splits the current set into two clusters (exact 1-D 2-means on
    sorted values) and keeps the lower cluster for the next pass, until the
    two centres are closer than ``tol_b``.  The final lower set is the noise
    cluster.  With p = 1 the single value counts as a signal iff it is at
    least ``tol_b`` away from zero.
    """
    B = np.abs(np.asarray(beta_draws, dtype=float))
    if B.ndim != 2 or B.shape[0] == 0:
        raise ValueError("beta_draws must be a non-empty T x p matrix")
    if not tol_b > 0:
        raise ValueError("tol_b must be positive")
    if B.shape[1] == 1:
        return (B[:, 0] >= tol_b).astype(np.int64)
    return _kernels.s2m_counts(B, tol_b)


def s2m_select(beta_draws, tol_b: float | None = None) -> SelectionResult:
    """Select H coefficients, H being the most frequent per-draw signal count.

    The H coordinates with the largest posterior median of |beta_j| are kept
    (ties in the mode go to the smaller count).
    """
    B = np.asarray(beta_draws, dtype=float)
    if B.ndim != 2 or B.shape[0] < 2:
        raise ValueError("need at least two draws of beta")
    tol = default_tol(B) if tol_b is None else float(tol_b)
    counts = s2m_counts(B, tol)
    H = int(np.argmax(np.bincount(counts, minlength=B.shape[1] + 1)))
    med = np.median(np.abs(B), axis=0)
    selected = np.zeros(B.shape[1], dtype=bool)
    if H:
        # stable order so ties resolve to the lower index
        selected[np.argsort(-med, kind="stable")[:H]] = True
    return SelectionResult(selected, counts, H, tol)


@dataclass(frozen=True, eq=False)
class IntervalSet:
    lower: np.ndarray
    upper: np.ndarray
    level: float

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower

    def contains(self, values) -> np.ndarray:
        v = np.asarray(values, dtype=float)
        if v.shape != self.lower.shape:
            raise ValueError(f"expected {self.lower.shape[0]} values, got {v.shape}")
        return (self.lower <= v) & (v <= self.upper)


def credible_intervals(draws, level: float = LEVEL) -> IntervalSet:
    """Equal-tailed intervals from per-column type-7 (linear) quantiles."""
    A = np.asarray(draws, dtype=float)
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    if A.ndim != 2 or A.shape[0] < 2:
        raise ValueError("need at least two draws")
    a = 0.5 * (1.0 - level)
    lo, hi = np.quantile(A, [a, 1.0 - a], axis=0, method="linear")
    return IntervalSet(lo, np.maximum(hi, lo), level)


@dataclass(frozen=True)
class CoverageReport:
    coverage: float
    width: float
    coverage_signal: float = float("nan")
    coverage_noise: float = float("nan")
    width_signal: float = float("nan")
    width_noise: float = float("nan")


def coverage_and_width(intervals: IntervalSet, truth, signal=None) -> CoverageReport:
    """Coverage (share of truth inside) and mean width, overall and by group.

    ``signal`` is a boolean mask of true non-zero coordinates; when given,
    the report also splits by signal and zero coordinates.
    """
    hit = intervals.contains(truth)
    w = intervals.width
    out = dict(coverage=float(hit.mean()), width=float(w.mean()))
    if signal is not None:
        signal = np.asarray(signal, dtype=bool)
        if signal.shape != hit.shape:
            raise ValueError("signal mask length mismatch")
        for name, mask in (("signal", signal), ("noise", ~signal)):
            if mask.any():
                out[f"coverage_{name}"] = float(hit[mask].mean())
                out[f"width_{name}"] = float(w[mask].mean())
    return CoverageReport(**out)


def tpr_fpr(selected, beta0) -> tuple:
    """(TPR, FPR); TPR is nan when beta0 has no non-zero entry, likewise FPR with no zeros."""
    sel = np.asarray(selected, dtype=bool)
    truth = np.asarray(beta0, dtype=float) != 0
    if sel.shape != truth.shape:
        raise ValueError(f"selected has length {sel.size}, beta0 has length {truth.size}")
    n_sig = truth.sum()
    n_zero = truth.size - n_sig
    tpr = float((sel & truth).sum() / n_sig) if n_sig else float("nan")
    fpr = float((sel & ~truth).sum() / n_zero) if n_zero else float("nan")
    return tpr, fpr


def mspe(y_true, y_pred) -> float:
    """Mean over subjects of the per-subject mean squared prediction error.

    Both arguments are sequences of per-subject vectors.
    """
    if len(y_true) != len(y_pred) or len(y_true) == 0:
        raise ValueError("y_true and y_pred must hold the same, non-zero number of subjects")
    per = []
    for i, (a, b) in enumerate(zip(y_true, y_pred)):
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        if a.shape != b.shape or a.size == 0:
            raise ValueError(f"subject {i}: shapes {a.shape} and {b.shape} differ or are empty")
        per.append(np.mean((a - b) ** 2))
    return float(np.mean(per))


def mspe_grouped(y_true, y_pred, sizes) -> float:
    """``mspe`` for stacked vectors with consecutive subject blocks of the given sizes."""
    cuts = np.cumsum(sizes)[:-1]
    return mspe(np.split(np.asarray(y_true), cuts), np.split(np.asarray(y_pred), cuts))


def relative_metrics(cme_value, oracle_value) -> float:
    if not oracle_value > 0:
        raise ValueError(f"oracle value must be positive, got {oracle_value}")
    return float(cme_value) / float(oracle_value)


def prediction_risk(X, beta0, beta_hat) -> float:
    """||X beta0 - X beta_hat||^2 / N."""
    X = np.asarray(X, dtype=float)
    r = X @ (np.asarray(beta0, float) - np.asarray(beta_hat, float))
    return float(r @ r / X.shape[0])
