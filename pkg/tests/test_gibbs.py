import os
import subprocess
import sys

import numpy as np
import pytest
from scipy import stats

from cme import gibbs
from cme.gibbs import (
    WhitenedData,
    beta_conditional,
    d_conditional,
    delta2_params,
    gamma_conditional,
    gibbs_step,
    horseshoe_block,
    init_chain,
    lambda2_params,
    nu_params,
    rinvgamma,
    run_chain,
    sample_beta,
    tau2_params,
    whiten,
    workspace,
    xi_params,
)
from cme.linalg import compression_root, gamma_matrix, kron_row_block
from cme.model import (
    ChainState,
    FitConfig,
    NumericalError,
    PosteriorDraws,
    PriorConfig,
    draw_projection_pair,
    projection_from_arrays,
)

from conftest import make_dataset

PRIOR = PriorConfig()


def random_state(rng, d, proj, scale=1.0):
    K = proj.k1 * proj.k2
    return ChainState(
        beta=scale * rng.standard_normal(d.p),
        tau2=float(rng.uniform(0.5, 2.0)),
        gamma=rng.standard_normal(K),
        lambda2=rng.uniform(0.2, 3.0, d.p),
        delta2=float(rng.uniform(0.2, 3.0)),
        nu=rng.uniform(0.2, 3.0, d.p),
        xi=float(rng.uniform(0.2, 3.0)),
        d=rng.standard_normal((d.n, proj.k2)),
    )


def dense_C(Z_i, proj, gamma):
    A = Z_i @ proj.S.T @ gamma_matrix(gamma, proj.k1, proj.k2)
    return A @ proj.R @ proj.R.T @ A.T + np.eye(Z_i.shape[0])


def collapsed_loglik(d, proj, beta, tau2, gamma):
    out = 0.0
    for b in d.blocks:
        C = dense_C(b.Z, proj, gamma)
        out += stats.multivariate_normal.logpdf(b.y, b.X @ beta, tau2 * C)
    return out


def assert_constant(diffs, tol=1e-8):
    diffs = np.asarray(diffs)
    assert np.max(np.abs(diffs - diffs[0])) < tol, diffs - diffs[0]


# ---------------------------------------------------------------- rinvgamma

def test_rinvgamma_vector_scales_are_independent():
    x = rinvgamma(1.0, np.ones(5), np.random.default_rng(0))
    assert x.shape == (5,) and len(np.unique(x)) == 5


def test_rinvgamma_median():
    # xi | delta2 = 1 is IG(1, 2), median 2 / ln 2
    a, b = xi_params(1.0)
    assert (a, b) == (1.0, 2.0)
    x = rinvgamma(a, np.full(100_000, b), np.random.default_rng(1))
    assert abs(np.median(x) / (2 / np.log(2)) - 1) < 0.03


# --------------------------------------------------------------------- init

def test_init_chain(tiny):
    d, proj = tiny
    cfg = FitConfig(k1=2, k2=2, iterations=10, burn_in=5)
    s = init_chain(d, cfg, np.random.default_rng(3))
    s.check(2, 2)
    assert np.array_equal(s.lambda2, np.ones(5))
    t = init_chain(d, cfg, np.random.default_rng(3))
    assert np.array_equal(s.gamma, t.gamma)


# ------------------------------------------------------------------------ d

def test_d_conditional_zero_gamma(tiny):
    d, proj = tiny
    root = compression_root(proj.R)
    M = np.zeros((3, 2))
    mean, cov = d_conditional(np.ones(3), M, root, 1.7)
    assert np.array_equal(mean, np.zeros(2))
    np.testing.assert_allclose(cov, 1.7 * proj.R @ proj.R.T, rtol=0, atol=1e-14)


def test_d_conditional_dense_oracle():
    rng = np.random.default_rng(4)
    proj = draw_projection_pair(2, 1, 1, seed=3)
    Z = rng.standard_normal((2, 2))
    g = np.array([0.8])
    r = rng.standard_normal(2)
    tau2 = 0.6
    root = compression_root(proj.R)
    M = Z @ proj.S.T @ gamma_matrix(g, 1, 1) @ root
    mean, cov = d_conditional(r, M, root, tau2)
    # joint Gaussian of (d, y - X beta)
    A = Z @ proj.S.T @ gamma_matrix(g, 1, 1)
    Sdd = tau2 * proj.R @ proj.R.T
    Sdy = Sdd @ A.T
    Syy = A @ Sdd @ A.T + tau2 * np.eye(2)
    np.testing.assert_allclose(mean, Sdy @ np.linalg.solve(Syy, r), atol=1e-10)
    np.testing.assert_allclose(cov, Sdd - Sdy @ np.linalg.solve(Syy, Sdy.T), atol=1e-10)


def test_d_conditional_zero_residual(tiny):
    d, proj = tiny
    root = compression_root(proj.R)
    M = np.random.default_rng(0).standard_normal((3, 2))
    mean, _ = d_conditional(np.zeros(3), M, root, 1.0)
    assert np.array_equal(mean, np.zeros(2))


def test_sample_d_moments(rng):
    # many copies of one subject give independent draws of the same conditional
    proj = draw_projection_pair(3, 2, 2, seed=5)
    base = make_dataset(rng, n=1, m=3, p=2, q=3)
    b = base.blocks[0]
    from cme.model import DataSet, SubjectBlock
    n = 20_000
    d = DataSet.from_blocks([SubjectBlock(i, b.y, b.X, b.Z) for i in range(n)], 2, 3)
    s = random_state(rng, d, proj)
    ws = workspace(d, proj)
    draws = gibbs.sample_d(s, d, proj, np.random.default_rng(9), ws)
    M = ws.factor(s.gamma)[:3]
    mean, cov = d_conditional(b.y - b.X @ s.beta, M, ws.root, s.tau2)
    se = np.sqrt(np.diag(cov) / n)
    assert np.all(np.abs(draws.mean(0) - mean) < 4 * se)
    np.testing.assert_allclose(np.cov(draws.T), cov, atol=0.05 * np.abs(cov).max())


# -------------------------------------------------------------------- gamma

def test_gamma_prior_when_d_zero(tiny):
    d, proj = tiny
    s = random_state(np.random.default_rng(1), d, proj)
    s.d = np.zeros_like(s.d)
    prior = PriorConfig(sigma2_gamma=2.5)
    mean, P = gamma_conditional(s, d, proj, prior)
    np.testing.assert_allclose(mean, 0.0, atol=1e-15)
    np.testing.assert_allclose(P, np.eye(4) / 2.5, atol=1e-15)


def test_gamma_flat_prior_is_least_squares(tiny):
    d, proj = tiny
    s = random_state(np.random.default_rng(2), d, proj)
    mean, _ = gamma_conditional(s, d, proj, PriorConfig(sigma2_gamma=1e12))
    rows = np.vstack([kron_row_block(b.Z, proj.S, s.d[i]) for i, b in enumerate(d.blocks)])
    r = d.y - d.X @ s.beta
    ls = np.linalg.solve(rows.T @ rows, rows.T @ r)
    np.testing.assert_allclose(mean, ls, atol=1e-6)


def test_gamma_draw_moments_and_determinism(tiny):
    d, proj = tiny
    s = random_state(np.random.default_rng(3), d, proj)
    ws = workspace(d, proj)
    mean, P = gamma_conditional(s, d, proj, PRIOR, ws)
    rng = np.random.default_rng(4)
    G = np.array([gibbs.sample_gamma(s, d, proj, PRIOR, rng, ws) for _ in range(20_000)])
    cov = np.linalg.inv(P)
    assert np.all(np.abs(G.mean(0) - mean) < 4 * np.sqrt(np.diag(cov) / len(G)))
    a = gibbs.sample_gamma(s, d, proj, PRIOR, np.random.default_rng(5), ws)
    b = gibbs.sample_gamma(s, d, proj, PRIOR, np.random.default_rng(5), ws)
    assert np.array_equal(a, b)


# ---------------------------------------------------------------- whitening

def test_whiten_identity_at_zero_gamma(tiny):
    d, proj = tiny
    s = random_state(np.random.default_rng(0), d, proj)
    s.gamma = np.zeros_like(s.gamma)
    w = whiten(s, d, proj)
    np.testing.assert_allclose(w.y_star, d.y, atol=1e-15)
    np.testing.assert_allclose(w.X_star, d.X, atol=1e-15)
    assert w.X_star.shape[0] == d.N


def test_whiten_matches_dense(tiny):
    d, proj = tiny
    s = random_state(np.random.default_rng(6), d, proj)
    w = whiten(s, d, proj)
    for i, b in enumerate(d.blocks):
        C = dense_C(b.Z, proj, s.gamma)
        ev, V = np.linalg.eigh(C)
        W = (V / np.sqrt(ev)) @ V.T
        sl = slice(d.offsets[i], d.offsets[i + 1])
        np.testing.assert_allclose(w.X_star[sl], W @ b.X, atol=1e-10)
        np.testing.assert_allclose(w.y_star[sl], W @ b.y, atol=1e-10)


def test_gram_update_matches_materialised(rng):
    d = make_dataset(rng, n=10, m=6, p=4, q=3)
    proj = draw_projection_pair(3, 2, 2, seed=1)
    ws = workspace(d, proj)
    assert ws.use_gram_update
    s = random_state(rng, d, proj)
    w = whiten(s, d, proj, ws)
    G, b = w.normal_equations()
    np.testing.assert_allclose(G, w.X_star.T @ w.X_star, atol=1e-10)
    np.testing.assert_allclose(b, w.X_star.T @ w.y_star, atol=1e-10)


# ---------------------------------------------------------- horseshoe params

def test_delta2_params_collapse():
    a, b = delta2_params(np.zeros(7), np.ones(7), 1.3, 1.0)
    assert (a, b) == (4.0, 1.0)


def test_tau2_params():
    w = WhitenedData(np.zeros(4), np.random.default_rng(0).standard_normal((4, 3)))
    a, b = tau2_params(np.zeros(3), w, 1.0, np.ones(3), PRIOR)
    assert a == PRIOR.a0 + 3.5 and b == PRIOR.b0
    rng = np.random.default_rng(1)
    y, X = rng.standard_normal(4), rng.standard_normal((4, 3))
    beta, lam = rng.standard_normal(3), rng.uniform(0.5, 2, 3)
    a, b = tau2_params(beta, WhitenedData(y, X), 0.7, lam, PRIOR)
    r = y - X @ beta
    hand = PRIOR.b0 + 0.5 * sum(v * v for v in r) + 0.5 * sum(beta ** 2 / (0.7 * lam))
    assert abs(b - hand) < 1e-12


def test_tau2_draws_positive(tiny):
    d, proj = tiny
    rng = np.random.default_rng(2)
    s = random_state(rng, d, proj)
    w = whiten(s, d, proj)
    assert all(gibbs.sample_tau2(s, w, PRIOR, rng) > 0 for _ in range(1000))


# --------------------------------------------------------------------- beta

def test_beta_ridge_unit_prior():
    p = 4
    y = np.array([1.0, -2.0, 0.5, 3.0])
    w = WhitenedData(y, np.eye(p))
    mean, cov = beta_conditional(w, 1.0, 1.0, np.ones(p))
    np.testing.assert_allclose(mean, y / 2, atol=1e-15)
    np.testing.assert_allclose(cov, np.eye(p) / 2, atol=1e-15)


def _beta_moment_check(method, y, X, s, n=100_000):
    w = WhitenedData(y, X)
    mean, cov = beta_conditional(w, s.tau2, s.delta2, s.lambda2)
    rng = np.random.default_rng(11)
    B = np.array([sample_beta(s, w, rng, method=method) for _ in range(n)])
    se = np.sqrt(np.diag(cov) / n)
    assert np.all(np.abs(B.mean(0) - mean) < 4 * se)
    np.testing.assert_allclose(np.cov(B.T), cov, atol=0.02 * np.abs(cov).max())
    return B


@pytest.mark.slow
def test_beta_cholesky_moments():
    rng = np.random.default_rng(0)
    X, y = rng.standard_normal((8, 3)), rng.standard_normal(8)
    s = ChainState(np.zeros(3), 0.8, np.zeros(0), np.array([0.5, 1.0, 2.0]), 1.5,
                   np.ones(3), 1.0, np.zeros((0, 0)))
    _beta_moment_check("cholesky", y, X, s)


@pytest.mark.slow
def test_beta_paths_agree_p_gt_n():
    rng = np.random.default_rng(1)
    X, y = rng.standard_normal((4, 6)), rng.standard_normal(4)
    s = ChainState(np.zeros(6), 1.2, np.zeros(0), rng.uniform(0.3, 2, 6), 0.9,
                   np.ones(6), 1.0, np.zeros((0, 0)))
    a = _beta_moment_check("structured", y, X, s)
    b = _beta_moment_check("cholesky", y, X, s)
    se = np.sqrt(a.var(0) / len(a) + b.var(0) / len(b))
    assert np.all(np.abs(a.mean(0) - b.mean(0)) < 4 * se)


def test_beta_method_rule():
    assert gibbs.beta_method(5, 5) == "cholesky"
    assert gibbs.beta_method(6, 5) == "structured"
    with pytest.raises(ValueError):
        sample_beta(ChainState(np.zeros(1), 1.0, np.zeros(0), np.ones(1), 1.0, np.ones(1), 1.0,
                               np.zeros((0, 0))), WhitenedData(np.ones(2), np.ones((2, 1))),
                    np.random.default_rng(0), method="qr")


# ----------------------------------------------------------------- conjugacy

def test_conjugacy_d(tiny):
    d, proj = tiny
    rng = np.random.default_rng(21)
    s = random_state(rng, d, proj)
    b = d.blocks[1]
    root = compression_root(proj.R)
    A = b.Z @ proj.S.T @ gamma_matrix(s.gamma, proj.k1, proj.k2)
    r = b.y - b.X @ s.beta
    mean, cov = d_conditional(r, A @ root, root, s.tau2)
    RR = proj.R @ proj.R.T
    diffs = []
    for _ in range(20):
        x = rng.standard_normal(proj.k2) * 2
        joint = (stats.multivariate_normal.logpdf(r, A @ x, s.tau2 * np.eye(len(r)))
                 + stats.multivariate_normal.logpdf(x, np.zeros(proj.k2), s.tau2 * RR))
        diffs.append(stats.multivariate_normal.logpdf(x, mean, cov) - joint)
    assert_constant(diffs)


def test_conjugacy_gamma(tiny):
    d, proj = tiny
    rng = np.random.default_rng(22)
    s = random_state(rng, d, proj)
    mean, P = gamma_conditional(s, d, proj, PRIOR)
    cov = np.linalg.inv(P)
    diffs = []
    for _ in range(20):
        g = rng.standard_normal(len(mean)) * 2
        G = gamma_matrix(g, proj.k1, proj.k2)
        joint = stats.multivariate_normal.logpdf(g, np.zeros(len(g)), PRIOR.sigma2_gamma * np.eye(len(g)))
        for i, b in enumerate(d.blocks):
            mu = b.X @ s.beta + b.Z @ proj.S.T @ G @ s.d[i]
            joint += stats.multivariate_normal.logpdf(b.y, mu, s.tau2 * np.eye(b.m))
        diffs.append(stats.multivariate_normal.logpdf(g, mean, cov) - joint)
    assert_constant(diffs)


def _ig(x, a, b):
    return stats.invgamma.logpdf(x, a, scale=b)


def _beta_prior(beta, tau2, delta2, lambda2):
    return np.sum(stats.norm.logpdf(beta, 0.0, np.sqrt(tau2 * delta2 * lambda2)))


def test_conjugacy_delta2_xi_lambda2_nu(tiny):
    d, proj = tiny
    rng = np.random.default_rng(23)
    s = random_state(rng, d, proj)

    a, b = delta2_params(s.beta, s.lambda2, s.tau2, s.xi)
    pts = rng.uniform(0.05, 5, 20)
    assert_constant([_ig(v, a, b) - (_beta_prior(s.beta, s.tau2, v, s.lambda2) + _ig(v, 0.5, 1 / s.xi))
                     for v in pts])

    a, b = xi_params(s.delta2)
    assert_constant([_ig(v, a, b) - (_ig(s.delta2, 0.5, 1 / v) + _ig(v, 0.5, 1.0)) for v in pts])

    a, b = lambda2_params(s.beta, s.nu, s.delta2, s.tau2)
    diffs = []
    for _ in range(20):
        lam = rng.uniform(0.05, 5, d.p)
        joint = _beta_prior(s.beta, s.tau2, s.delta2, lam) + np.sum(_ig(lam, 0.5, 1 / s.nu))
        diffs.append(np.sum(_ig(lam, a, b)) - joint)
    assert_constant(diffs)

    a, b = nu_params(s.lambda2)
    diffs = []
    for _ in range(20):
        nu = rng.uniform(0.05, 5, d.p)
        diffs.append(np.sum(_ig(nu, a, b)) - np.sum(_ig(s.lambda2, 0.5, 1 / nu) + _ig(nu, 0.5, 1.0)))
    assert_constant(diffs)


def test_conjugacy_tau2_collapsed(tiny):
    d, proj = tiny
    rng = np.random.default_rng(24)
    s = random_state(rng, d, proj)
    w = whiten(s, d, proj)
    a, b = tau2_params(s.beta, w, s.delta2, s.lambda2, PRIOR)
    diffs = []
    for t in rng.uniform(0.1, 5, 20):
        joint = (collapsed_loglik(d, proj, s.beta, t, s.gamma)
                 + _beta_prior(s.beta, t, s.delta2, s.lambda2) + _ig(t, PRIOR.a0, PRIOR.b0))
        diffs.append(_ig(t, a, b) - joint)
    assert_constant(diffs)


def test_conjugacy_beta_collapsed(tiny):
    d, proj = tiny
    rng = np.random.default_rng(25)
    s = random_state(rng, d, proj)
    w = whiten(s, d, proj)
    mean, cov = beta_conditional(w, s.tau2, s.delta2, s.lambda2)
    diffs = []
    for _ in range(20):
        beta = rng.standard_normal(d.p) * 2
        joint = collapsed_loglik(d, proj, beta, s.tau2, s.gamma) + _beta_prior(beta, s.tau2, s.delta2, s.lambda2)
        diffs.append(stats.multivariate_normal.logpdf(beta, mean, cov) - joint)
    assert_constant(diffs)


# --------------------------------------------------------------------- sweep

def test_order_audit(tiny):
    d, proj = tiny
    s = random_state(np.random.default_rng(0), d, proj)
    trace = []
    gibbs_step(s, d, proj, PRIOR, np.random.default_rng(1), trace=trace)
    assert trace == ["d", "gamma", "delta2", "xi", "lambda2", "nu", "tau2", "beta"]


def test_horseshoe_block_never_reads_d(tiny):
    d, proj = tiny
    s = random_state(np.random.default_rng(0), d, proj)
    w = whiten(s, d, proj)
    poisoned = s.copy()
    poisoned.d = np.full_like(s.d, np.nan)
    a = horseshoe_block(s, w, PRIOR, np.random.default_rng(5))
    b = horseshoe_block(poisoned, w, PRIOR, np.random.default_rng(5))
    assert np.array_equal(a.beta, b.beta) and a.tau2 == b.tau2


def test_step_deterministic(tiny):
    d, proj = tiny
    s = random_state(np.random.default_rng(0), d, proj)
    a = gibbs_step(gibbs_step(s, d, proj, PRIOR, r1 := np.random.default_rng(3)), d, proj, PRIOR, r1)
    b = gibbs_step(gibbs_step(s, d, proj, PRIOR, r2 := np.random.default_rng(3)), d, proj, PRIOR, r2)
    assert np.array_equal(a.beta, b.beta) and np.array_equal(a.gamma, b.gamma) and a.tau2 == b.tau2


def test_invariants_over_1000_steps(tiny):
    d, proj = tiny
    rng = np.random.default_rng(8)
    ws = workspace(d, proj)
    s = init_chain(d, FitConfig(k1=2, k2=2), rng)
    for _ in range(1000):
        s = gibbs_step(s, d, proj, PRIOR, rng, ws)
        s.check(2, 2)
        assert s.d.shape == (d.n, 2)


def test_run_chain_rows_and_determinism(tiny):
    d, proj = tiny
    cfg = FitConfig(k1=2, k2=2, iterations=100, burn_in=50, seed=1)
    a = run_chain(d, cfg, proj, np.random.default_rng(2))
    b = run_chain(d, cfg, proj, np.random.default_rng(2))
    assert a.beta_draws.shape == (50, 5) and a.gamma_draws.shape == (50, 4) and a.tau2_draws.shape == (50,)
    assert np.array_equal(a.beta_draws, b.beta_draws)


def test_projection_fixed_for_whole_fit(tiny):
    d, _ = tiny
    cfg = FitConfig(k1=2, k2=2, iterations=60, burn_in=10, seed=4)
    proj = draw_projection_pair(d.q, 2, 2, seed=cfg.seeds()["projection"])
    before = proj.fingerprint()
    run_chain(d, cfg, proj, np.random.default_rng(0))
    assert proj.fingerprint() == before
    fit = gibbs.fit_cme(d, cfg)
    assert fit.proj.fingerprint() == before == fit.draws.meta["projection_fingerprint"]


def test_numerical_failure_reports_iteration(tiny, monkeypatch):
    d, proj = tiny
    cfg = FitConfig(k1=2, k2=2, iterations=20, burn_in=5)
    calls = {"n": 0}
    real = gibbs.sample_tau2

    def flaky(*a, **k):
        calls["n"] += 1
        if calls["n"] == 7:
            raise NumericalError("boom")
        return real(*a, **k)

    monkeypatch.setattr(gibbs, "sample_tau2", flaky)
    with pytest.raises(NumericalError) as ei:
        run_chain(d, cfg, proj, np.random.default_rng(0))
    assert ei.value.last_good_iteration == 5


def test_backends_give_same_chain(tmp_path):
    code = (
        "import numpy as np\n"
        "from conftest import make_dataset\n"
        "from cme.gibbs import fit_cme\n"
        "from cme.model import FitConfig\n"
        "d = make_dataset(np.random.default_rng(0), n=6, m=4, p=7, q=3)\n"
        "f = fit_cme(d, FitConfig(k1=2, k2=2, iterations=40, burn_in=10, seed=3))\n"
        "np.save(r'{out}', f.draws.beta_draws)\n"
    )
    res = {}
    for be in ("numpy", "numba"):
        out = tmp_path / f"{be}.npy"
        env = dict(os.environ, CME_BACKEND=be)
        subprocess.run([sys.executable, "-c", code.format(out=out)], check=True, env=env,
                       cwd=os.path.dirname(__file__))
        res[be] = np.load(out)
    np.testing.assert_allclose(res["numpy"], res["numba"], rtol=1e-7, atol=1e-9)


# --------------------------------------------------------------- prediction

def test_predictive_zero_gamma_is_iid(tiny):
    d, proj = tiny
    T = 50_000
    beta = np.array([1.0, 0.0, -1.0, 0.5, 0.0])
    draws = PosteriorDraws(np.tile(beta, (T, 1)), np.full(T, 2.0), np.zeros((T, 4)))
    b = d.blocks[0]
    P = gibbs.posterior_predict(draws, b.X, b.Z, proj, np.random.default_rng(0), groups=np.zeros(3))
    np.testing.assert_allclose(P.mean(0), b.X @ beta, atol=4 * np.sqrt(2.0 / T))
    np.testing.assert_allclose(np.cov(P.T), 2.0 * np.eye(3), atol=0.06)


def test_predictive_covariance_dense_oracle(tiny):
    d, proj = tiny
    T = 100_000
    rng = np.random.default_rng(3)
    g = rng.standard_normal(4)
    beta = rng.standard_normal(5)
    draws = PosteriorDraws(np.tile(beta, (T, 1)), np.full(T, 0.7), np.tile(g, (T, 1)))
    b = d.blocks[2]
    P = gibbs.posterior_predict(draws, b.X, b.Z, proj, np.random.default_rng(1), groups=np.zeros(3))
    V = 0.7 * dense_C(b.Z, proj, g)
    np.testing.assert_allclose(np.cov(P.T), V, atol=0.03 * np.abs(V).max())


def test_predict_dataset_deterministic(tiny):
    d, proj = tiny
    cfg = FitConfig(k1=2, k2=2, iterations=30, burn_in=10, seed=2)
    fit = gibbs.fit_cme(d, cfg)
    a = gibbs.predict_dataset(fit.draws, d, fit.proj, np.random.default_rng(0))
    b = gibbs.predict_dataset(fit.draws, d, fit.proj, np.random.default_rng(0))
    assert a.shape == (20, d.N) and np.array_equal(a, b)


def test_oracle_regression_shared_block(rng):
    # Gamma = chol(Sigma0) with S = R = I gives C_i = V_0i, so both whiteners agree
    from cme.oracle import OracleWhitener
    q = 3
    d = make_dataset(rng, n=5, m=4, p=3, q=q)
    A = rng.standard_normal((q, q))
    Sigma0 = A @ A.T
    L = np.linalg.cholesky(Sigma0)
    proj = projection_from_arrays(np.eye(q), np.eye(q))
    s = random_state(rng, d, proj)
    s.gamma = L.ravel(order="F")
    wc = whiten(s, d, proj)
    wo = OracleWhitener.build(d, Sigma0).whiten(d)
    np.testing.assert_allclose(wc.y_star, wo.y_star, atol=1e-10)
    np.testing.assert_allclose(wc.X_star, wo.X_star, atol=1e-10)
    a = horseshoe_block(s, wc, PRIOR, np.random.default_rng(4))
    b = horseshoe_block(s, wo, PRIOR, np.random.default_rng(4))
    np.testing.assert_allclose(a.beta, b.beta, atol=1e-8)
    assert abs(a.tau2 - b.tau2) < 1e-8 * a.tau2
