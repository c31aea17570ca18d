"""OracleHS baseline: the Horseshoe block of the CME sampler with Sigma fixed at its true value.

Whitening uses ``V_0i = Z_i Sigma0 Z_i^T + I``.  Writing ``Sigma0 = F F^T``
from its eigendecomposition (positive eigenvalues only) gives
``V_0i = M_i M_i^T + I`` with ``M_i = Z_i F``, so the low-rank route of the
CME whitener applies unchanged.  The whitened data are fixed, so they are
computed once per fit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gibbs import WhitenedData, _collect, horseshoe_block, beta_method, predictive_draws
from .model import (
    ChainState,
    DataSet,
    FitConfig,
    PosteriorDraws,
    TruthSpec,
    validate_dataset,
)

EIG_TOL = 1e-12


def sigma_root(Sigma0) -> np.ndarray:
    """F with F F^T = Sigma0, keeping only eigen-directions above a relative tolerance."""
    S = np.asarray(Sigma0, dtype=float)
    if S.size == 0:
        return np.zeros((S.shape[0], 0))
    w, V = np.linalg.eigh(0.5 * (S + S.T))
    keep = w > EIG_TOL * max(1.0, float(np.abs(w).max()))
    return V[:, keep] * np.sqrt(w[keep])


@dataclass(frozen=True, eq=False)
class OracleWhitener:
    """Per-subject factors of V_0i, stacked; ``M`` is N x r with r = rank(Sigma0)."""

    F: np.ndarray
    M: np.ndarray
    offsets: np.ndarray

    @classmethod
    def build(cls, d: DataSet, Sigma0) -> "OracleWhitener":
        F = sigma_root(Sigma0)
        if F.shape[0] != d.q:
            raise ValueError(f"Sigma0 is {F.shape[0]}x{F.shape[0]}, dataset has q={d.q}")
        return cls(F, np.ascontiguousarray(d.Z @ F), d.offsets)

    @property
    def rank(self) -> int:
        return self.F.shape[1]

    def whiten(self, d: DataSet) -> WhitenedData:
        if self.rank == 0:
            y, X = d.y.copy(), d.X.copy()
        else:
            yX = np.ascontiguousarray(np.column_stack([d.y, d.X]))
            lazy = WhitenedData.from_factors(yX, self.M, self.offsets)
            y, X = lazy.y_star, lazy.X_star
        gram = np.asfortranarray(X.T @ X) if d.p <= d.N else None
        xty = X.T @ y if gram is not None else None
        return WhitenedData(y, X, gram, xty)


def init_oracle(p: int) -> ChainState:
    return ChainState(
        beta=np.zeros(p), tau2=1.0, gamma=np.zeros(0), lambda2=np.ones(p),
        delta2=1.0, nu=np.ones(p), xi=1.0, d=np.zeros((0, 0)),
    )


def fit_oracle_hs(d: DataSet, truth: TruthSpec, cfg: FitConfig, rng=None,
                  progress_sink=None) -> PosteriorDraws:
    """Horseshoe regression on data whitened by the true V_0i; returns (beta, tau2) draws.

    ``rng`` defaults to a generator seeded with the chain seed of ``cfg``.
    """
    validate_dataset(d)
    if rng is None:
        rng = np.random.default_rng(cfg.seeds()["chain"])
    ow = OracleWhitener.build(d, truth.Sigma0)
    w = ow.whiten(d)
    buf = np.empty((d.p, d.p), order="F") if d.p <= d.N else None
    holder = [init_oracle(d.p)]

    def step(it):
        holder[0] = horseshoe_block(holder[0], w, cfg.prior, rng, beta_out=buf)
        return holder[0]

    beta, tau2, gamma = _collect(cfg, d.p, 0, step, progress_sink)
    meta = dict(
        model="oracle", iterations=cfg.iterations, burn_in=cfg.burn_in, thin=cfg.thin,
        n=d.n, N=d.N, p=d.p, q=d.q, sigma_rank=ow.rank, sigma_label=truth.sigma_label,
        beta_method=beta_method(d.p, d.N), seed=cfg.seed,
    )
    return PosteriorDraws(beta, tau2, gamma, meta)


def oracle_posterior_predict(draws: PosteriorDraws, X_test, Z_test, truth: TruthSpec, rng,
                             groups=None) -> np.ndarray:
    """Draws from N(X beta_t, tau2_t (Z Sigma0 Z^T + I)) for every stored iteration."""
    X_test = np.asarray(X_test, dtype=float)
    Z_test = np.asarray(Z_test, dtype=float)
    p = draws.beta_draws.shape[1]
    q = np.shape(truth.Sigma0)[0]
    if X_test.ndim != 2 or X_test.shape[1] != p:
        raise ValueError(f"X_test has shape {X_test.shape}, expected (n, {p})")
    if Z_test.ndim != 2 or Z_test.shape != (X_test.shape[0], q):
        raise ValueError(f"Z_test has shape {Z_test.shape}, expected ({X_test.shape[0]}, {q})")
    F = Z_test @ sigma_root(truth.Sigma0)
    mean = draws.beta_draws @ X_test.T
    return predictive_draws(mean, F, draws.tau2_draws, groups, rng)


def oracle_predict_dataset(draws: PosteriorDraws, test: DataSet, truth: TruthSpec, rng) -> np.ndarray:
    groups = np.repeat(np.arange(test.n), test.sizes)
    return oracle_posterior_predict(draws, test.X, test.Z, truth, rng, groups=groups)
