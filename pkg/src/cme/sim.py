"""Simulation harness: data generation, scenario replications and the Geweke joint-distribution test."""

from __future__ import annotations

import math
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterable

import numpy as np

from . import gibbs
from .model import (
    SIGMA_LABELS,
    ConfigError,
    DataSet,
    FitConfig,
    PriorConfig,
    SubjectBlock,
    TruthSpec,
    draw_projection_pair,
    split_seed,
)
from .oracle import fit_oracle_hs, oracle_predict_dataset, sigma_root
from .selection import (
    coverage_and_width,
    credible_intervals,
    mspe_grouped,
    prediction_risk,
    relative_metrics,
    s2m_select,
    tpr_fpr,
)

BETA0_HEAD = (1.0, 0.5, 0.2, 0.1, 0.05)
X_DESIGNS = ("independent", "toeplitz")
M_GRID = (4, 8, 12)
K_GRID = (3, 7, 14)


@dataclass(frozen=True)
class SimScenario:
    p: int = 300
    q: int = 14
    n: int = 36
    m: int = 12
    sigma_label: str = "diagonal"
    x_design: str = "independent"
    k1: int = 3
    k2: int = 3
    replications: int = 10
    test_subjects: int = 12
    seed: int = 0
    tau0_sq: float = 1.0
    iterations: int = 15_000
    burn_in: int = 5_000
    thin: int = 1
    prior: PriorConfig = field(default_factory=PriorConfig)
    tol_b: float | None = None
    oracle: bool = True

    def __post_init__(self):
        if min(self.p, self.q, self.n, self.m, self.test_subjects, self.replications) < 1:
            raise ConfigError("scenario dimensions and replications must be positive")
        if not (1 <= self.k1 <= self.q and 1 <= self.k2 <= self.q):
            raise ConfigError(f"k1, k2 must lie in 1..q={self.q}")
        if self.sigma_label not in SIGMA_LABELS:
            raise ConfigError(f"unknown sigma label {self.sigma_label!r}; choose from {SIGMA_LABELS}")
        if self.x_design not in X_DESIGNS:
            raise ConfigError(f"unknown x_design {self.x_design!r}; choose from {X_DESIGNS}")
        if not self.tau0_sq > 0:
            raise ConfigError("tau0_sq must be positive")
        # validates the sampler settings early
        self.fit_config(0)

    def fit_config(self, seed: int) -> FitConfig:
        return FitConfig(k1=self.k1, k2=self.k2, iterations=self.iterations, burn_in=self.burn_in,
                         thin=self.thin, seed=seed, prior=self.prior, tol_b=self.tol_b)

    def replication_seed(self, rep: int) -> int:
        """Master seed of replication ``rep``; independent of m, k1, k2 and the Sigma label."""
        ss = np.random.SeedSequence(self.seed, spawn_key=(rep,))
        return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def scenario_grid(base: SimScenario | None = None, include_k_grid: bool = False) -> list:
    """The 9 (Sigma x m) settings at ``base``'s k1, k2; optionally the 9 (k1 x k2) settings too."""
    base = base or SimScenario()
    out = [replace(base, sigma_label=s, m=m) for s in SIGMA_LABELS for m in M_GRID]
    if include_k_grid:
        out += [replace(base, k1=a, k2=b) for a in K_GRID for b in K_GRID]
    return out


# ------------------------------------------------------------------ generators

def gen_sigma(label: str, q: int, rng: np.random.Generator | None = None) -> np.ndarray:
    if label == "diagonal":
        return np.diag(np.where(np.arange(q) < math.ceil(q / 2), 0.5, 0.0))
    if label == "toeplitz":
        i = np.arange(q)
        return 0.5 ** np.abs(i[:, None] - i[None, :])
    if label == "block-diagonal":
        if q != 14:
            raise ConfigError("the block-diagonal structure is defined for q = 14 only")
        if rng is None:
            raise ValueError("block-diagonal Sigma needs an rng")
        L = np.zeros((q, 3))
        for col, (a, b) in enumerate(((0, 5), (5, 10), (10, 14))):
            L[a:b, col] = rng.uniform(0.0, 3.0, size=b - a)
        return L @ L.T
    raise ConfigError(f"unknown sigma label {label!r}")


def toeplitz_root(p: int, rho: float = 0.5) -> np.ndarray:
    i = np.arange(p)
    return np.linalg.cholesky(rho ** np.abs(i[:, None] - i[None, :]))


def _subject(rng, m, p, q, beta0, b_root, tau0, x_root, sid):
    # b_i first, then one row at a time, so the first m rows do not depend on m
    b = tau0 * (b_root @ rng.standard_normal(b_root.shape[1]))
    X = np.empty((m, p))
    Z = np.empty((m, q))
    e = np.empty(m)
    for j in range(m):
        x = rng.standard_normal(p)
        X[j] = x if x_root is None else x_root @ x
        Z[j] = rng.standard_normal(q)
        e[j] = rng.standard_normal()
    y = X @ beta0 + Z @ b + tau0 * e
    return SubjectBlock(sid, y, X, Z)


def gen_dataset(s: SimScenario, rep: int = 0, Sigma0=None) -> tuple:
    """(train, test, truth) for replication ``rep`` of scenario ``s``.

    Every subject has its own random stream, drawn row by row, so datasets
    for different m share their leading rows (common random numbers across
    the m grid).  ``Sigma0`` overrides the generated covariance.
    """
    seeds = split_seed(s.replication_seed(rep))
    ss = np.random.SeedSequence(seeds["data"])
    sig_ss, *subj_ss = ss.spawn(1 + s.n + s.test_subjects)
    if Sigma0 is None:
        Sigma0 = gen_sigma(s.sigma_label, s.q, np.random.default_rng(sig_ss))
    Sigma0 = np.asarray(Sigma0, dtype=float)
    beta0 = np.zeros(s.p)
    head = BETA0_HEAD[: s.p]
    beta0[: len(head)] = head
    b_root = sigma_root(Sigma0)
    x_root = toeplitz_root(s.p) if s.x_design == "toeplitz" else None
    tau0 = math.sqrt(s.tau0_sq)
    blocks = [
        _subject(np.random.default_rng(c), s.m, s.p, s.q, beta0, b_root, tau0, x_root, i)
        for i, c in enumerate(subj_ss)
    ]
    train = DataSet.from_blocks(blocks[: s.n], s.p, s.q)
    test = DataSet.from_blocks(blocks[s.n:], s.p, s.q)
    truth = TruthSpec(beta0, Sigma0, s.tau0_sq, s.sigma_label)
    return train, test, truth


# ----------------------------------------------------------------- replication

def _model_metrics(prefix, draws, pred, train, test, truth, tol_b) -> dict:
    beta0 = truth.beta0
    signal = beta0 != 0
    ci = coverage_and_width(credible_intervals(draws.beta_draws), beta0, signal)
    sel = s2m_select(draws.beta_draws, tol_b)
    tpr, fpr = tpr_fpr(sel.selected, beta0)
    pi = coverage_and_width(credible_intervals(pred), test.y)
    beta_bar = draws.beta_draws.mean(axis=0)
    row = dict(
        cov_signal=ci.coverage_signal, cov_noise=ci.coverage_noise,
        width_signal=ci.width_signal, width_noise=ci.width_noise,
        tpr=tpr, fpr=fpr, n_selected=sel.chosen_count,
        mspe=mspe_grouped(test.y, pred.mean(axis=0), test.sizes),
        pred_cov=pi.coverage, pred_width=pi.width,
        risk=prediction_risk(train.X, beta0, beta_bar),
        tau2_mean=float(draws.tau2_draws.mean()),
    )
    return {f"{prefix}_{k}": v for k, v in row.items()}


METRIC_NAMES = ("cov_signal", "cov_noise", "width_signal", "width_noise", "tpr", "fpr", "n_selected",
                "mspe", "pred_cov", "pred_width", "risk", "tau2_mean")


def metric_columns(oracle: bool = True) -> list:
    cols = ["scenario", "sigma", "m", "k1", "k2", "x_design", "rep", "seed", "status", "error", "seconds"]
    cols += [f"cme_{k}" for k in METRIC_NAMES]
    if oracle:
        cols += [f"oracle_{k}" for k in METRIC_NAMES]
        cols += ["rel_pred_width", "rel_mspe"]
    return cols


def scenario_name(s: SimScenario) -> str:
    return f"{s.sigma_label}-m{s.m}-k{s.k1}x{s.k2}-{s.x_design}"


def run_replication(s: SimScenario, rep: int) -> dict:
    """Generate, fit CME (and OracleHS) and score one replication; failures become a row."""
    seed = s.replication_seed(rep)
    row = dict(scenario=scenario_name(s), sigma=s.sigma_label, m=s.m, k1=s.k1, k2=s.k2,
               x_design=s.x_design, rep=rep, seed=seed, status="ok", error="")
    t0 = time.perf_counter()
    try:
        train, test, truth = gen_dataset(s, rep)
        cfg = s.fit_config(seed)
        fit = gibbs.fit_cme(train, cfg)
        pred = gibbs.predict_dataset(fit.draws, test, fit.proj, np.random.default_rng([seed, 1]))
        row.update(_model_metrics("cme", fit.draws, pred, train, test, truth, s.tol_b))
        if s.oracle:
            od = fit_oracle_hs(train, truth, cfg, np.random.default_rng([seed, 2]))
            opred = oracle_predict_dataset(od, test, truth, np.random.default_rng([seed, 3]))
            row.update(_model_metrics("oracle", od, opred, train, test, truth, s.tol_b))
            row["rel_pred_width"] = relative_metrics(row["cme_pred_width"], row["oracle_pred_width"])
            row["rel_mspe"] = relative_metrics(row["cme_mspe"], row["oracle_mspe"])
    except Exception as exc:  # recorded, the scenario keeps going
        row["status"] = "failed"
        row["error"] = f"{type(exc).__name__}: {exc}"
        row["traceback"] = traceback.format_exc(limit=3)
    row["seconds"] = time.perf_counter() - t0
    return row


def run_scenario(s: SimScenario, sink: Callable[[dict], None] | None = None, workers: int = 1,
                 reps: Iterable[int] | None = None) -> list:
    """Run every replication; each row is passed to ``sink`` as it completes.

    Rows are returned in replication order whatever the worker count, and
    their values do not depend on it.
    """
    reps = list(range(s.replications) if reps is None else reps)
    rows = []
    if workers <= 1:
        for r in reps:
            row = run_replication(s, r)
            rows.append(row)
            if sink is not None:
                sink(row)
    else:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            for row in ex.map(run_replication, [s] * len(reps), reps):
                rows.append(row)
                if sink is not None:
                    sink(row)
    return rows


def summarize(rows: list, by=("sigma", "m", "k1", "k2", "x_design")) -> list:
    """Mean (and standard deviation) of every metric column per scenario, over successful rows."""
    groups: dict = {}
    for r in rows:
        if r.get("status", "ok") != "ok":
            continue
        groups.setdefault(tuple(r[k] for k in by), []).append(r)
    out = []
    for key, rs in groups.items():
        agg = dict(zip(by, key))
        agg["replications"] = len(rs)
        cols = [c for c in rs[0] if c.startswith(("cme_", "oracle_", "rel_"))]
        for c in cols:
            v = np.array([float(r[c]) for r in rs])
            agg[f"{c}_mean"] = float(np.nanmean(v)) if np.isfinite(v).any() else float("nan")
            agg[f"{c}_sd"] = float(np.nanstd(v, ddof=1)) if np.isfinite(v).sum() > 1 else float("nan")
        out.append(agg)
    return out


# --------------------------------------------------------------------- Geweke

@dataclass(frozen=True)
class GewekeDims:
    n: int = 4
    m: int = 3
    p: int = 5
    q: int = 3
    k1: int = 2
    k2: int = 2


# tau2 needs a finite variance for its z-score, hence a0 > 2
GEWEKE_PRIOR = PriorConfig(a0=5.0, b0=4.0, sigma2_gamma=1.0)

DEFAULT_TEST_FUNCTIONS = {
    "beta1": lambda t: t["beta"][:, 0],
    "beta1_sq": lambda t: t["beta"][:, 0] ** 2,
    "tau2": lambda t: t["tau2"],
    "log_delta2": lambda t: np.log(t["delta2"]),
    "gamma1": lambda t: t["gamma"][:, 0],
}


@dataclass(frozen=True, eq=False)
class GewekeReport:
    z: dict
    marginal_mean: dict
    successive_mean: dict
    n_samples: int
    seconds: float

    def passed(self, bound: float = 4.0) -> bool:
        return all(abs(v) < bound for v in self.z.values())

    def rows(self) -> list:
        return [dict(function=k, z=self.z[k], marginal_mean=self.marginal_mean[k],
                     successive_mean=self.successive_mean[k]) for k in self.z]


def _prior_draws(T, p, K, prior: PriorConfig, rng) -> dict:
    ig = gibbs.rinvgamma
    xi = ig(0.5, np.ones(T), rng)
    delta2 = ig(0.5, 1.0 / xi, rng)
    nu = ig(0.5, np.ones((T, p)), rng)
    lambda2 = ig(0.5, 1.0 / nu, rng)
    tau2 = ig(prior.a0, np.full(T, prior.b0), rng)
    beta = rng.standard_normal((T, p)) * np.sqrt(tau2 * delta2)[:, None] * np.sqrt(lambda2)
    gamma = rng.normal(0.0, math.sqrt(prior.sigma2_gamma), size=(T, K))
    return dict(beta=beta, tau2=tau2, delta2=delta2, gamma=gamma, xi=xi, lambda2=lambda2, nu=nu)


def _simulate_y(d: DataSet, ws, state, rng) -> np.ndarray:
    tau = math.sqrt(state.tau2)
    dd = tau * rng.standard_normal((d.n, ws.proj.k2)) @ ws.root.T
    Gm = state.gamma.reshape(ws.proj.k1, ws.proj.k2, order="F")
    re = np.einsum("rj,rj->r", ws.ZS @ Gm, np.repeat(dd, d.sizes, axis=0))
    return d.X @ state.beta + re + tau * rng.standard_normal(d.N)


def _chain_se(x, n_chains):
    # chains are independent and start in the stationary law, so their means are iid
    means = x.reshape(n_chains, -1).mean(axis=1)
    return means.std(ddof=1) / math.sqrt(n_chains)


def geweke_joint_test(dims: GewekeDims | None = None, n_samples: int = 50_000, test_functions=None,
                      seed: int = 0, prior: PriorConfig = GEWEKE_PRIOR, n_chains: int = 100,
                      beta_method: str = "auto", _tau2_scale: float = 1.0) -> GewekeReport:
    """Compare marginal-conditional and successive-conditional simulations of the joint law.

    The marginal arm draws parameters from the prior (iid).  The successive
    arm runs ``n_chains`` independent chains, each started from its own prior
    draw, that alternate simulating y given the parameters with one sampler
    sweep given y.  Every chain is stationary from its first step, so the
    standard error of the successive arm comes from the spread of the
    per-chain means, which stays honest however slowly the global shrinkage
    scale mixes.  ``_tau2_scale`` corrupts the tau2 update for sensitivity
    checks.
    """
    dims = dims or GewekeDims()
    fns = test_functions or DEFAULT_TEST_FUNCTIONS
    if n_chains < 2 or n_samples % n_chains:
        raise ValueError("n_samples must be a multiple of n_chains >= 2")
    length = n_samples // n_chains
    t0 = time.perf_counter()
    ss = np.random.SeedSequence(seed)
    s_design, s_proj, s_marg, s_succ = ss.spawn(4)
    rd = np.random.default_rng(s_design)
    blocks = [SubjectBlock(i, np.zeros(dims.m), rd.standard_normal((dims.m, dims.p)),
                           rd.standard_normal((dims.m, dims.q))) for i in range(dims.n)]
    data = DataSet.from_blocks(blocks, dims.p, dims.q)
    proj = draw_projection_pair(dims.q, dims.k1, dims.k2, int(s_proj.generate_state(1)[0]))
    K = dims.k1 * dims.k2

    marg = _prior_draws(n_samples, dims.p, K, prior, np.random.default_rng(s_marg))

    ws0 = gibbs.workspace(data, proj)
    succ = dict(beta=np.empty((n_samples, dims.p)), tau2=np.empty(n_samples),
                delta2=np.empty(n_samples), gamma=np.empty((n_samples, K)))
    t = 0
    with np.errstate(over="ignore", invalid="ignore"):
        for chain_ss in s_succ.spawn(n_chains):
            rng = np.random.default_rng(chain_ss)
            first = _prior_draws(1, dims.p, K, prior, rng)
            state = gibbs.ChainState(
                beta=first["beta"][0], tau2=float(first["tau2"][0]), gamma=first["gamma"][0],
                lambda2=first["lambda2"][0], delta2=float(first["delta2"][0]), nu=first["nu"][0],
                xi=float(first["xi"][0]), d=np.zeros((dims.n, dims.k2)),
            )
            for _ in range(length):
                dt = data.with_response(_simulate_y(data, ws0, state, rng))
                state = gibbs.gibbs_step(state, dt, proj, prior, rng, ws0.with_data(dt),
                                         beta_method=beta_method, _tau2_scale=_tau2_scale)
                succ["beta"][t] = state.beta
                succ["tau2"][t] = state.tau2
                succ["delta2"][t] = state.delta2
                succ["gamma"][t] = state.gamma
                t += 1

        z, mm, sm = {}, {}, {}
        for name, f in fns.items():
            a = np.asarray(f(marg), dtype=float)
            b = np.asarray(f(succ), dtype=float)
            se = math.sqrt(a.var(ddof=1) / len(a) + _chain_se(b, n_chains) ** 2)
            mm[name], sm[name] = float(a.mean()), float(b.mean())
            diff = sm[name] - mm[name]
            z[name] = diff / se if se > 0 and math.isfinite(se) else (0.0 if diff == 0 else math.copysign(math.inf, diff))
    return GewekeReport(z, mm, sm, n_samples, time.perf_counter() - t0)


def scenario_to_dict(s: SimScenario) -> dict:
    d = asdict(s)
    d["prior"] = asdict(s.prior)
    return d


# ------------------------------------------------------- riboflavin stand-in

def riboflavin_standin(seed=0, n_subjects: int = 28, n_rows: int = 71, n_genes: int = 100) -> dict:
    """Synthetic long table shaped like the riboflavin time-course data.

    Subjects have 2 or 3 (or more) observations summing to ``n_rows``; genes
    are correlated log-expressions; the response depends on three genes, a
    smooth time trend and a subject intercept.  Returns column name -> values.
    """
    if n_rows < n_subjects:
        raise ValueError("need at least one row per subject")
    rng = np.random.default_rng(seed)
    sizes = np.full(n_subjects, n_rows // n_subjects)
    sizes[: n_rows - sizes.sum()] += 1
    rng.shuffle(sizes)
    N = int(sizes.sum())
    subject = np.repeat([f"strain{i + 1:02d}" for i in range(n_subjects)], sizes)
    obs = np.concatenate([np.arange(1, m + 1) for m in sizes])
    times = np.concatenate([np.sort(rng.choice(np.arange(1, 11) * 6.0, m, replace=False)) for m in sizes])
    shared = rng.standard_normal((N, 5))
    load = rng.normal(0, 0.6, (5, n_genes))
    genes = 7.0 + shared @ load + 0.5 * rng.standard_normal((N, n_genes))
    G = (genes - genes.mean(0)) / genes.std(0)
    b = np.repeat(rng.normal(0, 0.5, n_subjects), sizes)
    y = -7.0 + 0.6 * G[:, 0] - 0.4 * G[:, 1] + 0.3 * G[:, 2] + np.sin(times / 20.0) + b + 0.3 * rng.standard_normal(N)
    cols = dict(subject=subject, obs=obs, time=times, y=y)
    cols.update({f"gene{j + 1:03d}": genes[:, j] for j in range(n_genes)})
    return cols
