"""Domain types, configuration and validation shared across the package."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Sequence

import numpy as np


class CMEError(Exception):
    """Base class for package errors."""


class DataValidationError(CMEError):
    """Raised when a dataset violates its invariants.

    ``violations`` holds one message per problem found.
    """

    def __init__(self, violations: Sequence[str]):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class ConfigError(CMEError):
    pass


class NumericalError(CMEError):
    """Numerical failure (Cholesky/SVD). ``last_good_iteration`` is set by run_chain."""

    def __init__(self, message: str, last_good_iteration: int | None = None):
        self.last_good_iteration = last_good_iteration
        super().__init__(message)


@dataclass(frozen=True, eq=False)
class SubjectBlock:
    subject_id: Any
    y: np.ndarray
    X: np.ndarray
    Z: np.ndarray

    @property
    def m(self) -> int:
        return int(np.shape(self.y)[0])


@dataclass(frozen=True, eq=False)
class DataSet:
    """Grouped response/design blocks.

    Stacked views (``y``, ``X``, ``Z``, ``offsets``) are built lazily for the
    numeric kernels; rows of subject ``i`` are ``offsets[i]:offsets[i+1]``.
    """

    blocks: tuple
    p: int
    q: int

    @classmethod
    def from_blocks(cls, blocks, p: int | None = None, q: int | None = None) -> "DataSet":
        blocks = tuple(blocks)
        if p is None:
            p = int(np.shape(blocks[0].X)[1]) if blocks else 0
        if q is None:
            q = int(np.shape(blocks[0].Z)[1]) if blocks else 0
        return cls(blocks=blocks, p=int(p), q=int(q))

    @classmethod
    def from_arrays(cls, y, X, Z, groups) -> "DataSet":
        """Build from stacked arrays and a per-row subject label (first-appearance order)."""
        y = np.asarray(y, dtype=float)
        X = np.asarray(X, dtype=float)
        Z = np.asarray(Z, dtype=float)
        groups = np.asarray(groups)
        _, first = np.unique(groups, return_index=True)
        labels = groups[np.sort(first)]
        blocks = [
            SubjectBlock(lab, y[groups == lab], X[groups == lab], Z[groups == lab])
            for lab in labels
        ]
        return cls.from_blocks(blocks, p=X.shape[1], q=Z.shape[1])

    @property
    def n(self) -> int:
        return len(self.blocks)

    @property
    def N(self) -> int:
        return int(sum(b.m for b in self.blocks))

    @property
    def sizes(self) -> np.ndarray:
        return np.array([b.m for b in self.blocks], dtype=np.int64)

    @cached_property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.sizes)]).astype(np.int64)

    @cached_property
    def y(self) -> np.ndarray:
        return np.ascontiguousarray(np.concatenate([np.asarray(b.y, float) for b in self.blocks]))

    @cached_property
    def X(self) -> np.ndarray:
        return np.ascontiguousarray(np.vstack([np.asarray(b.X, float) for b in self.blocks]))

    @cached_property
    def Z(self) -> np.ndarray:
        return np.ascontiguousarray(np.vstack([np.asarray(b.Z, float) for b in self.blocks]))

    @property
    def subject_ids(self) -> list:
        return [b.subject_id for b in self.blocks]

    def with_response(self, y) -> "DataSet":
        """Same designs, new stacked response."""
        y = np.asarray(y, dtype=float)
        if y.shape != (self.N,):
            raise ValueError(f"response has shape {y.shape}, expected ({self.N},)")
        off = self.offsets
        blocks = tuple(
            SubjectBlock(b.subject_id, y[off[i]:off[i + 1]], b.X, b.Z) for i, b in enumerate(self.blocks)
        )
        out = DataSet(blocks, self.p, self.q)
        # share the stacked designs instead of restacking them
        out.__dict__.update(offsets=off, X=self.X, Z=self.Z, y=np.ascontiguousarray(y))
        return out

    def subset(self, indices) -> "DataSet":
        return DataSet(tuple(self.blocks[i] for i in indices), self.p, self.q)


def validate_dataset(d: DataSet) -> DataSet:
    """Return ``d`` unchanged if every invariant holds, else raise with all violations."""
    problems = []
    if d.n == 0:
        raise DataValidationError(["dataset is empty"])
    for i, b in enumerate(d.blocks, start=1):
        y, X, Z = np.asarray(b.y), np.asarray(b.X), np.asarray(b.Z)
        if y.ndim != 1 or y.shape[0] < 1:
            problems.append(f"block {i}: y must be a non-empty vector")
            continue
        m = y.shape[0]
        if X.ndim != 2 or X.shape[0] != m:
            problems.append(f"block {i}: X has shape {X.shape}, expected ({m}, {d.p})")
        elif X.shape[1] != d.p:
            problems.append(f"block {i}: X has {X.shape[1]} columns, expected {d.p}")
        if Z.ndim != 2 or Z.shape[0] != m:
            problems.append(f"block {i}: Z has shape {Z.shape}, expected ({m}, {d.q})")
        elif Z.shape[1] != d.q:
            problems.append(f"block {i}: Z has {Z.shape[1]} columns, expected {d.q}")
        for name, arr in (("y", y), ("X", X), ("Z", Z)):
            if not np.all(np.isfinite(np.asarray(arr, dtype=float))):
                problems.append(f"block {i}: non-finite values in {name}")
    if problems:
        raise DataValidationError(problems)
    return d


@dataclass(frozen=True, eq=False)
class ProjectionPair:
    R: np.ndarray
    S: np.ndarray
    k1: int
    k2: int
    seed: int | None

    @property
    def q(self) -> int:
        return self.R.shape[1]

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.R).tobytes())
        h.update(np.ascontiguousarray(self.S).tobytes())
        return h.hexdigest()


def draw_projection_pair(q: int, k1: int, k2: int, seed) -> ProjectionPair:
    """Draw S (k1 x q, variance 1/k1) and R (k2 x q, variance 1/k2)."""
    if not (1 <= k1 <= q and 1 <= k2 <= q):
        raise ConfigError(f"compression dimensions must satisfy 1 <= k1, k2 <= q; got k1={k1}, k2={k2}, q={q}")
    rng = np.random.default_rng(seed)
    S = rng.normal(0.0, np.sqrt(1.0 / k1), size=(k1, q))
    R = rng.normal(0.0, np.sqrt(1.0 / k2), size=(k2, q))
    S.flags.writeable = False
    R.flags.writeable = False
    return ProjectionPair(R=R, S=S, k1=int(k1), k2=int(k2), seed=seed)


def projection_from_arrays(R, S, seed=None) -> ProjectionPair:
    R = np.array(R, dtype=float)
    S = np.array(S, dtype=float)
    if R.shape[1] != S.shape[1]:
        raise ConfigError("R and S must have the same number of columns")
    R.flags.writeable = False
    S.flags.writeable = False
    return ProjectionPair(R=R, S=S, k1=S.shape[0], k2=R.shape[0], seed=seed)


@dataclass(frozen=True)
class PriorConfig:
    a0: float = 0.01
    b0: float = 0.01
    sigma2_gamma: float = 1.0

    def __post_init__(self):
        if not (self.a0 > 0 and self.b0 > 0 and self.sigma2_gamma > 0):
            raise ConfigError("prior hyperparameters a0, b0, sigma2_gamma must be positive")


@dataclass(frozen=True)
class FitConfig:
    k1: int = 3
    k2: int = 3
    iterations: int = 15_000
    burn_in: int = 5_000
    thin: int = 1
    seed: int = 0
    prior: PriorConfig = field(default_factory=PriorConfig)
    # sequential 2-means threshold; None -> data-driven default in selection
    tol_b: float | None = None

    def __post_init__(self):
        if not self.iterations > self.burn_in >= 0:
            raise ConfigError("need iterations > burn_in >= 0")
        if self.thin < 1:
            raise ConfigError("thin must be >= 1")
        if self.k1 < 1 or self.k2 < 1:
            raise ConfigError("k1 and k2 must be >= 1")

    @property
    def n_keep(self) -> int:
        return len(range(self.burn_in, self.iterations, self.thin))

    def seeds(self) -> dict:
        return split_seed(self.seed)


def split_seed(master) -> dict:
    """Split one master seed into the projection, chain and data seeds."""
    children = np.random.SeedSequence(master).spawn(3)
    names = ("projection", "chain", "data")
    return {k: int(c.generate_state(1, dtype=np.uint64)[0]) for k, c in zip(names, children)}


@dataclass
class ChainState:
    beta: np.ndarray
    tau2: float
    gamma: np.ndarray
    lambda2: np.ndarray
    delta2: float
    nu: np.ndarray
    xi: float
    d: np.ndarray  # n x k2

    def check(self, k1: int | None = None, k2: int | None = None) -> None:
        """Raise AssertionError if a positivity or shape invariant fails."""
        assert self.tau2 > 0 and self.delta2 > 0 and self.xi > 0
        assert np.all(self.lambda2 > 0) and np.all(self.nu > 0)
        assert self.lambda2.shape == self.beta.shape == self.nu.shape
        assert np.all(np.isfinite(self.beta)) and np.all(np.isfinite(self.gamma))
        if k1 is not None and k2 is not None:
            assert self.gamma.shape == (k1 * k2,)
            assert self.d.ndim == 2 and self.d.shape[1] == k2

    def copy(self) -> "ChainState":
        return ChainState(
            beta=self.beta.copy(), tau2=float(self.tau2), gamma=self.gamma.copy(),
            lambda2=self.lambda2.copy(), delta2=float(self.delta2), nu=self.nu.copy(),
            xi=float(self.xi), d=self.d.copy(),
        )


@dataclass(frozen=True, eq=False)
class PosteriorDraws:
    beta_draws: np.ndarray
    tau2_draws: np.ndarray
    gamma_draws: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def n_keep(self) -> int:
        return self.beta_draws.shape[0]

    def gamma_matrix(self, t: int, k1: int, k2: int) -> np.ndarray:
        return self.gamma_draws[t].reshape(k1, k2, order="F")


SIGMA_LABELS = ("diagonal", "block-diagonal", "toeplitz")
# user-supplied Sigma0 (oracle fits from the command line)
TRUTH_LABELS = SIGMA_LABELS + ("custom",)


@dataclass(frozen=True, eq=False)
class TruthSpec:
    beta0: np.ndarray
    Sigma0: np.ndarray
    tau0_sq: float
    sigma_label: str

    def __post_init__(self):
        S = np.asarray(self.Sigma0)
        if not np.allclose(S, S.T, atol=1e-12):
            raise ConfigError("Sigma0 must be symmetric")
        if S.size and np.linalg.eigvalsh(S).min() < -1e-10:
            raise ConfigError("Sigma0 must be positive semi-definite")
        if not np.all(np.isfinite(self.beta0)):
            raise ConfigError("beta0 must be finite")
        if self.sigma_label not in TRUTH_LABELS:
            raise ConfigError(f"unknown sigma label {self.sigma_label!r}")
