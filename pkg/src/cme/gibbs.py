"""Collapsed Gibbs sampler for the compressed mixed-effects model.

One sweep draws the compressed random effects ``d_i``, then ``gamma`` given
them, then whitens with the fresh ``Gamma`` and runs the Horseshoe block
(delta2, xi, lambda2, nu, tau2, beta) on the homoscedastic regression, which
never reads the ``d_i``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import _kernels
from scipy.linalg import blas, lapack

from .linalg import chol_solve, cholesky_jitter, compression_root, gamma_matrix, solve_lower_t
from .model import (
    ChainState,
    ConfigError,
    DataSet,
    FitConfig,
    NumericalError,
    PosteriorDraws,
    PriorConfig,
    ProjectionPair,
    draw_projection_pair,
    validate_dataset,
)

PROGRESS_EVERY = 100
# keeps IG draws inside the representable range
_FLOOR, _CEIL = 1e-300, 1e300


def rinvgamma(shape, scale, rng: np.random.Generator):
    """Inverse-gamma draw(s) with the given shape and scale."""
    scale = np.asarray(scale, dtype=float)
    size = np.broadcast_shapes(np.shape(shape), scale.shape)
    g = rng.gamma(shape, size=size or None)
    return np.clip(scale / g, _FLOOR, _CEIL)


# ------------------------------------------------------------- precomputation

@dataclass(eq=False)
class Workspace:
    """Per-fit constants: stacked data, Z S^T, the R R^T root and Gram pieces."""

    data: DataSet
    proj: ProjectionPair
    root: np.ndarray
    ZS: np.ndarray
    G: np.ndarray  # n x k1 x k1, (Z_i S^T)^T (Z_i S^T)
    XtX: np.ndarray | None = None
    Xty: np.ndarray | None = None
    yX: np.ndarray = field(init=False)
    # when True, whitened Gram and beta precision are written into reused
    # p x p buffers, so a WhitenedData is only valid until the next whiten()
    reuse_buffers: bool = False

    def __post_init__(self):
        d = self.data
        self.yX = np.ascontiguousarray(np.column_stack([d.y, d.X]))
        self._bufs = None

    def buffers(self):
        if not self.reuse_buffers:
            return None, None
        if self._bufs is None:
            p = self.data.p
            self._bufs = (np.empty((p, p), order="F"), np.empty((p, p), order="F"))
        return self._bufs

    @property
    def use_gram_update(self) -> bool:
        d = self.data
        return self.XtX is not None and d.n * self.proj.k2 < d.N

    def with_data(self, d: DataSet) -> "Workspace":
        """Workspace for ``d``, which must share X and Z with the current data."""
        Xty = d.X.T @ d.y if self.XtX is not None else None
        return Workspace(d, self.proj, self.root, self.ZS, self.G, self.XtX, Xty,
                         reuse_buffers=self.reuse_buffers)

    def factor(self, gamma) -> np.ndarray:
        """Stacked low-rank factors M (N x k2) for every subject."""
        Gm = gamma_matrix(gamma, self.proj.k1, self.proj.k2)
        return self.ZS @ (Gm @ self.root)


def workspace(d: DataSet, proj: ProjectionPair) -> Workspace:
    if proj.q != d.q:
        raise ConfigError(f"projection has q={proj.q}, dataset has q={d.q}")
    ZS = np.ascontiguousarray(d.Z @ proj.S.T)
    off = d.offsets
    G = np.stack([ZS[off[i]:off[i + 1]].T @ ZS[off[i]:off[i + 1]] for i in range(d.n)])
    XtX = Xty = None
    if d.p <= d.N:
        XtX = np.asfortranarray(d.X.T @ d.X)
        Xty = d.X.T @ d.y
    return Workspace(d, proj, compression_root(proj.R), ZS, G, XtX, Xty)


# ------------------------------------------------------------------ whitening

def _inv_sqrt_weight(x):
    # g(x) = (1 - (1 + x)^{-1/2}) / x, written to stay finite at x = 0
    r = np.sqrt(1.0 + np.maximum(x, 0.0))
    return 1.0 / (r * (1.0 + r))


class WhitenedData:
    """Whitened response and design ``y* = C^{-1/2} y``, ``X* = C^{-1/2} X``.

    Built either from explicit arrays or lazily from the stacked low-rank
    factors ``M``.  With ``K_i = I + M_i^T M_i = L_i L_i^T``,
    ``C_i^{-1} = I - (M_i L_i^{-T})(M_i L_i^{-T})^T`` and
    ``C_i^{-1/2} = I - M_i g(M_i^T M_i) M_i^T`` with
    ``g(x) = (1 - (1 + x)^{-1/2}) / x``, so only k x k problems are solved per
    subject.  In the lazy form ``X*`` is materialised on demand and the Gram
    matrix X*^T X* comes from a low-rank correction of the raw one (only its
    lower triangle is kept; ``normal_equations`` returns the full matrix).
    """

    def __init__(self, y_star=None, X_star=None, gram=None, xty=None, *, factors=None):
        self._y_star = y_star
        self._X_star = X_star
        self._gram = gram
        self._gram_lower_only = False
        self.xty = xty
        self._factors = factors  # (yX, M, MtM, Mq, offsets)

    @classmethod
    def from_factors(cls, yX, M, offsets, XtX=None, Xty=None, gram_out=None) -> "WhitenedData":
        k = M.shape[1]
        MtM = _kernels.project(M, M, offsets)
        try:
            LK = np.linalg.cholesky(MtM + np.eye(k))
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"I + M^T M factorization failed: {exc}") from exc
        Linv = np.linalg.inv(LK)
        Mq = _kernels.right_mult(M, np.swapaxes(Linv, 1, 2), offsets)
        w = cls(factors=(yX, M, MtM, Mq, offsets))
        if XtX is not None:
            Q = _kernels.project(yX, Mq, offsets).reshape(-1, yX.shape[1])
            QXt = np.asfortranarray(Q[:, 1:].T)
            if gram_out is None:
                gram_out = np.array(XtX, order="F")
            else:
                np.copyto(gram_out, XtX)
            w._gram = blas.dsyrk(-1.0, QXt, beta=1.0, c=gram_out, trans=0, lower=1, overwrite_c=1)
            w._gram_lower_only = True
            w.xty = Xty - QXt @ Q[:, 0]
        else:
            w._materialise()
        return w

    def _materialise(self):
        yX, M, MtM, _, offsets = self._factors
        ev, V = np.linalg.eigh(MtM)
        B = _kernels.right_mult(M, V * np.sqrt(_inv_sqrt_weight(ev))[:, None, :], offsets)
        WA = _kernels.whiten(yX, B, offsets)
        self._y_star = WA[:, 0].copy()
        self._X_star = WA[:, 1:]

    @property
    def y_star(self) -> np.ndarray:
        if self._y_star is None:
            self._materialise()
        return self._y_star

    @property
    def X_star(self) -> np.ndarray:
        if self._X_star is None:
            self._materialise()
        return self._X_star

    @property
    def N(self) -> int:
        if self._factors is not None:
            return self._factors[0].shape[0]
        return self._X_star.shape[0]

    @property
    def p(self) -> int:
        if self._factors is not None:
            return self._factors[0].shape[1] - 1
        return self._X_star.shape[1]

    def gram_lower(self):
        """(G, b) where only the lower triangle of G is guaranteed valid."""
        if self._gram is None:
            self._gram = self.X_star.T @ self.X_star
            self.xty = self.X_star.T @ self.y_star
        return self._gram, self.xty

    def normal_equations(self):
        """Full (X*^T X*, X*^T y*)."""
        G, b = self.gram_lower()
        if self._gram_lower_only:
            G = np.tril(G) + np.tril(G, -1).T
        return G, b

    def resid_ss(self, beta) -> float:
        """||y* - X* beta||^2."""
        if self._X_star is None:
            yX, _, _, Mq, offsets = self._factors
            r = yX[:, 0] - yX[:, 1:] @ beta
            P = _kernels.project(r[:, None], Mq, offsets)
            return float(r @ r - np.sum(P * P))
        r = self._y_star - self._X_star @ beta
        return float(r @ r)


def whiten(state: ChainState, d: DataSet, proj: ProjectionPair, ws: Workspace | None = None) -> WhitenedData:
    """y_i* = C_i^{-1/2} y_i and X_i* = C_i^{-1/2} X_i for the current gamma."""
    ws = ws or workspace(d, proj)
    M = ws.factor(state.gamma)
    if not np.all(np.isfinite(M)):
        raise NumericalError("low-rank factor has non-finite entries")
    if ws.use_gram_update:
        return WhitenedData.from_factors(ws.yX, M, d.offsets, ws.XtX, ws.Xty, gram_out=ws.buffers()[0])
    return WhitenedData.from_factors(ws.yX, M, d.offsets)


# ----------------------------------------------------------------- init / d

def init_chain(d: DataSet, cfg: FitConfig, rng: np.random.Generator) -> ChainState:
    K = cfg.k1 * cfg.k2
    return ChainState(
        beta=np.zeros(d.p),
        tau2=1.0,
        gamma=rng.normal(0.0, np.sqrt(cfg.prior.sigma2_gamma), size=K),
        lambda2=np.ones(d.p),
        delta2=1.0,
        nu=np.ones(d.p),
        xi=1.0,
        d=np.zeros((d.n, cfg.k2)),
    )


def d_conditional(r_i, M_i, root, tau2):
    """Mean and covariance of d_i | y_i, beta, tau2, gamma via the k2-dimensional route.

    ``r_i = y_i - X_i beta``.  With ``K = I + M^T M`` the conditional is
    ``N(L_R K^{-1} M^T r_i, tau2 L_R K^{-1} L_R^T)``.
    """
    K = np.eye(M_i.shape[1]) + M_i.T @ M_i
    Kinv = np.linalg.inv(K)
    mean = root @ (Kinv @ (M_i.T @ r_i))
    cov = tau2 * root @ Kinv @ root.T
    return mean, cov


def sample_d(state: ChainState, d: DataSet, proj: ProjectionPair, rng, ws: Workspace | None = None) -> np.ndarray:
    ws = ws or workspace(d, proj)
    M = ws.factor(state.gamma)
    r = d.y - d.X @ state.beta
    z = rng.standard_normal((d.n, proj.k2))
    try:
        return _kernels.sample_d(M, r, d.offsets, ws.root, np.sqrt(state.tau2), z)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"d_i conditional covariance factorization failed: {exc}") from exc


# --------------------------------------------------------------------- gamma

def gamma_conditional(state: ChainState, d: DataSet, proj: ProjectionPair, prior: PriorConfig,
                      ws: Workspace | None = None):
    """Return (mean, precision) of gamma | d_i's, beta, tau2."""
    ws = ws or workspace(d, proj)
    r = d.y - d.X @ state.beta
    T, b = _kernels.gamma_moments(ws.ZS, r, state.d, d.offsets, ws.G)
    P = T / state.tau2 + np.eye(T.shape[0]) / prior.sigma2_gamma
    L = cholesky_jitter(P, name="gamma precision")
    return chol_solve(L, b / state.tau2), P


def sample_gamma(state: ChainState, d: DataSet, proj: ProjectionPair, prior: PriorConfig, rng,
                 ws: Workspace | None = None) -> np.ndarray:
    ws = ws or workspace(d, proj)
    r = d.y - d.X @ state.beta
    T, b = _kernels.gamma_moments(ws.ZS, r, state.d, d.offsets, ws.G)
    P = T / state.tau2 + np.eye(T.shape[0]) / prior.sigma2_gamma
    L = cholesky_jitter(P, name="gamma precision")
    mean = chol_solve(L, b / state.tau2)
    return mean + solve_lower_t(L, rng.standard_normal(len(b)))


# ------------------------------------------------------------ horseshoe block

def delta2_params(beta, lambda2, tau2, xi):
    p = len(beta)
    return 0.5 * (p + 1), 1.0 / xi + np.sum(beta * beta / lambda2) / (2.0 * tau2)


def xi_params(delta2):
    return 1.0, 1.0 + 1.0 / delta2


def lambda2_params(beta, nu, delta2, tau2):
    return 1.0, 1.0 / nu + beta * beta / (2.0 * delta2 * tau2)


def nu_params(lambda2):
    return 1.0, 1.0 + 1.0 / lambda2


def sample_horseshoe_aux(state: ChainState, rng):
    """Draw (delta2, xi, lambda2, nu) in that order; returns the new values."""
    a, b = delta2_params(state.beta, state.lambda2, state.tau2, state.xi)
    delta2 = float(rinvgamma(a, b, rng))
    a, b = xi_params(delta2)
    xi = float(rinvgamma(a, b, rng))
    a, b = lambda2_params(state.beta, state.nu, delta2, state.tau2)
    lambda2 = rinvgamma(a, b, rng)
    a, b = nu_params(lambda2)
    nu = rinvgamma(a, b, rng)
    return delta2, xi, lambda2, nu


def tau2_params(beta, w: WhitenedData, delta2, lambda2, prior: PriorConfig):
    shape = prior.a0 + 0.5 * (w.N + len(beta))
    scale = prior.b0 + 0.5 * w.resid_ss(beta) + 0.5 * np.sum(beta * beta / (delta2 * lambda2))
    return shape, scale


def sample_tau2(state: ChainState, w: WhitenedData, prior: PriorConfig, rng, scale_factor: float = 1.0) -> float:
    a, b = tau2_params(state.beta, w, state.delta2, state.lambda2, prior)
    return float(rinvgamma(a, scale_factor * b, rng))


def beta_conditional(w: WhitenedData, tau2, delta2, lambda2):
    """Dense (mean, covariance) of beta | tau2, delta2, Lambda, whitened data."""
    G, b = w.normal_equations()
    A = np.linalg.inv(G + np.diag(1.0 / (delta2 * lambda2)))
    return A @ b, tau2 * A


def beta_method(p: int, N: int) -> str:
    return "cholesky" if p <= N else "structured"


def _scaled_cholesky(G, Ds, out=None):
    # lower Cholesky factor of D^{1/2} G D^{1/2} + I from the lower triangle of G
    if out is None:
        out = np.empty(G.shape, order="F")
    _kernels.scale_precision(G, Ds, out)
    c, info = lapack.dpotrf(out, lower=1, clean=0, overwrite_a=1)
    if info == 0:
        return c
    Gs = np.tril(G) + np.tril(G, -1).T
    P = Ds[:, None] * Gs * Ds[None, :] + np.eye(len(Ds))
    return cholesky_jitter(P, name="beta precision")


def sample_beta(state: ChainState, w: WhitenedData, rng, method: str = "auto",
                out: np.ndarray | None = None) -> np.ndarray:
    """Exact draw from N(A X*^T y*, tau2 A), A = (X*^T X* + (delta2 Lambda)^{-1})^{-1}.

    ``cholesky`` factors the rescaled p x p system ``D^{1/2} G D^{1/2} + I``;
    ``structured`` uses the auxiliary-variable sampler for p > N with
    O(N^2 p) cost (Bhattacharya, Chakraborty & Mallick, 2016).
    """
    if method == "auto":
        method = beta_method(w.p, w.N)
    D = state.delta2 * state.lambda2
    tau = np.sqrt(state.tau2)
    if method == "cholesky":
        G, b = w.gram_lower()
        Ds = np.sqrt(D)
        if not np.all(np.isfinite(Ds)):
            raise NumericalError("non-finite prior scales in the beta update")
        L = _scaled_cholesky(G, Ds, out)
        mean = chol_solve(L, Ds * b)
        theta = mean + tau * solve_lower_t(L, rng.standard_normal(w.p))
        return Ds * theta
    if method == "structured":
        Xs = w.X_star
        u = np.sqrt(D) * rng.standard_normal(w.p)
        v = Xs @ u + rng.standard_normal(w.N)
        XD = Xs * D[None, :]
        K = XD @ Xs.T
        K[np.diag_indices_from(K)] += 1.0
        L = cholesky_jitter(K, name="I + X* D X*^T")
        wv = chol_solve(L, w.y_star / tau - v)
        return tau * (u + XD.T @ wv)
    raise ValueError(f"unknown beta sampling method {method!r}")


def horseshoe_block(state: ChainState, w: WhitenedData, prior: PriorConfig, rng,
                    trace: list | None = None, beta_method: str = "auto",
                    _tau2_scale: float = 1.0, beta_out: np.ndarray | None = None) -> ChainState:
    """Steps (delta2, xi, lambda2, nu, tau2, beta) on whitened data; shared with the oracle."""
    delta2, xi, lambda2, nu = sample_horseshoe_aux(state, rng)
    new = ChainState(state.beta, state.tau2, state.gamma, lambda2, delta2, nu, xi, state.d)
    if trace is not None:
        trace.extend(["delta2", "xi", "lambda2", "nu"])
    new.tau2 = sample_tau2(new, w, prior, rng, scale_factor=_tau2_scale)
    if trace is not None:
        trace.append("tau2")
    new.beta = sample_beta(new, w, rng, method=beta_method, out=beta_out)
    if trace is not None:
        trace.append("beta")
    return new


# --------------------------------------------------------------------- sweep

def gibbs_step(state: ChainState, d: DataSet, proj: ProjectionPair, prior: PriorConfig, rng,
               ws: Workspace | None = None, trace: list | None = None,
               beta_method: str = "auto", _tau2_scale: float = 1.0) -> ChainState:
    ws = ws or workspace(d, proj)
    new_d = sample_d(state, d, proj, rng, ws)
    if trace is not None:
        trace.append("d")
    mid = ChainState(state.beta, state.tau2, state.gamma, state.lambda2, state.delta2,
                     state.nu, state.xi, new_d)
    mid.gamma = sample_gamma(mid, d, proj, prior, rng, ws)
    if trace is not None:
        trace.append("gamma")
    w = whiten(mid, d, proj, ws)
    return horseshoe_block(mid, w, prior, rng, trace=trace, beta_method=beta_method,
                           _tau2_scale=_tau2_scale, beta_out=ws.buffers()[1])


def _collect(cfg: FitConfig, p: int, K: int, step: Callable[[int], ChainState],
             progress_sink=None) -> tuple:
    keep = cfg.n_keep
    beta = np.empty((keep, p))
    tau2 = np.empty(keep)
    gamma = np.empty((keep, K))
    j = 0
    for it in range(cfg.iterations):
        try:
            state = step(it)
        except (NumericalError, np.linalg.LinAlgError, FloatingPointError) as exc:
            raise NumericalError(f"chain aborted at iteration {it}: {exc}",
                                 last_good_iteration=it - 1) from exc
        if it >= cfg.burn_in and (it - cfg.burn_in) % cfg.thin == 0:
            beta[j] = state.beta
            tau2[j] = state.tau2
            gamma[j] = state.gamma
            j += 1
        if progress_sink is not None and (it + 1) % PROGRESS_EVERY == 0:
            progress_sink(it + 1, cfg.iterations)
    return beta, tau2, gamma


def run_chain(d: DataSet, cfg: FitConfig, proj: ProjectionPair, rng, progress_sink=None) -> PosteriorDraws:
    """Run ``cfg.iterations`` sweeps and keep post-burn-in, thinned (beta, tau2, gamma)."""
    if (proj.k1, proj.k2) != (cfg.k1, cfg.k2):
        raise ConfigError("projection dimensions do not match the fit configuration")
    ws = workspace(d, proj)
    ws.reuse_buffers = True
    state = init_chain(d, cfg, rng)
    holder = [state]

    def step(it):
        holder[0] = gibbs_step(holder[0], d, proj, cfg.prior, rng, ws)
        return holder[0]

    beta, tau2, gamma = _collect(cfg, d.p, cfg.k1 * cfg.k2, step, progress_sink)
    meta = dict(
        model="cme", iterations=cfg.iterations, burn_in=cfg.burn_in, thin=cfg.thin,
        k1=cfg.k1, k2=cfg.k2, n=d.n, N=d.N, p=d.p, q=d.q,
        beta_method=beta_method(d.p, d.N), backend=_kernels.BACKEND,
        projection_fingerprint=proj.fingerprint(),
    )
    return PosteriorDraws(beta, tau2, gamma, meta)


@dataclass(frozen=True, eq=False)
class FitResult:
    draws: PosteriorDraws
    proj: ProjectionPair
    seeds: dict


def fit_cme(d: DataSet, cfg: FitConfig, progress_sink=None) -> FitResult:
    """Validate, draw the projection pair once from the master seed, and run the chain."""
    validate_dataset(d)
    seeds = cfg.seeds()
    proj = draw_projection_pair(d.q, cfg.k1, cfg.k2, seeds["projection"])
    rng = np.random.default_rng(seeds["chain"])
    draws = run_chain(d, cfg, proj, rng, progress_sink)
    draws.meta.update(seed=cfg.seed, seeds=seeds)
    return FitResult(draws, proj, seeds)


# ---------------------------------------------------------------- prediction

def _group_index(groups, n_rows):
    if groups is None:
        return np.zeros(n_rows, dtype=np.int64), 1
    groups = np.asarray(groups)
    _, first, inv = np.unique(groups, return_index=True, return_inverse=True)
    # relabel in first-appearance order so draws do not depend on label sorting
    order = np.argsort(np.argsort(first))
    return order[inv].astype(np.int64), len(first)


def predictive_draws(mean, factors, tau2, groups, rng, chunk: int = 2000):
    """mean + tau * (M u_subject + w) for every stored draw.

    ``mean`` is T x n_test; ``factors`` is either n_test x k (shared by all
    draws) or T x n_test x k.
    """
    T, n_test = mean.shape
    gidx, n_sub = _group_index(groups, n_test)
    k = factors.shape[-1]
    out = np.empty_like(mean)
    tau = np.sqrt(tau2)
    for a in range(0, T, chunk):
        b = min(a + chunk, T)
        u = rng.standard_normal((b - a, n_sub, k))
        w = rng.standard_normal((b - a, n_test))
        ur = u[:, gidx, :]
        if factors.ndim == 2:
            re = np.einsum("rk,trk->tr", factors, ur)
        else:
            re = np.einsum("trk,trk->tr", factors[a:b], ur)
        out[a:b] = mean[a:b] + tau[a:b, None] * (re + w)
    return out


def posterior_predict(draws: PosteriorDraws, X_test, Z_test, proj: ProjectionPair, rng,
                      groups=None) -> np.ndarray:
    """Posterior predictive draws (T_keep x n_test).

    ``groups`` labels the subject of each test row; rows of one subject share
    their random effect.  ``None`` treats all rows as one subject.
    """
    X_test = np.asarray(X_test, dtype=float)
    Z_test = np.asarray(Z_test, dtype=float)
    if X_test.shape[1] != draws.beta_draws.shape[1]:
        raise ValueError(f"X_test has {X_test.shape[1]} columns, expected {draws.beta_draws.shape[1]}")
    if Z_test.shape[1] != proj.q or Z_test.shape[0] != X_test.shape[0]:
        raise ValueError(f"Z_test has shape {Z_test.shape}, expected ({X_test.shape[0]}, {proj.q})")
    T = draws.n_keep
    root = compression_root(proj.R)
    Gam = draws.gamma_draws.reshape(T, proj.k2, proj.k1).transpose(0, 2, 1)  # column-major vec
    GR = Gam @ root
    ZS = Z_test @ proj.S.T
    F = np.einsum("rj,tjk->trk", ZS, GR)
    mean = draws.beta_draws @ X_test.T
    return predictive_draws(mean, F, draws.tau2_draws, groups, rng)


def predict_dataset(draws: PosteriorDraws, test: DataSet, proj: ProjectionPair, rng) -> np.ndarray:
    groups = np.repeat(np.arange(test.n), test.sizes)
    return posterior_predict(draws, test.X, test.Z, proj, rng, groups=groups)
