"""Command-line entry point: ``cme <subcommand> [options]``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure.  On failure one JSON object is written to stderr, e.g.
``{"error": "data", "type": "DataFormatError", "message": "..."}``.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, _kernels, gibbs
from . import io as cio
from .model import (
    SIGMA_LABELS,
    ConfigError,
    DataValidationError,
    FitConfig,
    NumericalError,
    PosteriorDraws,
    PriorConfig,
    TruthSpec,
    projection_from_arrays,
)
from .oracle import fit_oracle_hs, oracle_predict_dataset
from .selection import credible_intervals, mspe_grouped, s2m_select
from .sim import (
    M_GRID,
    X_DESIGNS,
    GewekeDims,
    SimScenario,
    geweke_joint_test,
    metric_columns,
    run_scenario,
    scenario_to_dict,
    summarize,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
DEFAULT_OUT = "cme_out"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 by default, which collides with data errors
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


# ------------------------------------------------------------------- config

def _run_config(args) -> cio.RunConfig:
    return cio.load_config(args.config) if args.config else cio.RunConfig()


def _prior(rc: cio.RunConfig) -> PriorConfig:
    return PriorConfig(**rc.prior)


def _fit_config(args, rc: cio.RunConfig) -> FitConfig:
    vals = dict(rc.fit)
    for key in ("k1", "k2", "iterations", "burn_in", "thin", "tol_b"):
        v = getattr(args, key, None)
        if v is not None:
            vals[key] = v
    if args.seed is not None:
        vals["seed"] = args.seed
    return FitConfig(prior=_prior(rc), **vals)


def _schema(args, rc: cio.RunConfig) -> cio.LongSchema:
    vals = dict(rc.data)
    for key in ("y", "subject", "time", "obs"):
        v = getattr(args, f"{key}_col", None)
        if v is not None:
            vals[key] = v
    for key in ("x", "z"):
        v = getattr(args, f"{key}_cols", None)
        if v is not None:
            vals[key] = tuple(s.strip() for s in v.split(",") if s.strip())
    return cio.LongSchema(**vals)


def _echo(args) -> dict:
    return {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}


# ---------------------------------------------------------------- simulate

def cmd_simulate(args) -> int:
    rc = _run_config(args)
    vals = dict(rc.simulate)
    workers = vals.pop("workers", 1) if args.workers is None else args.workers
    vals.pop("workers", None)
    for key in ("k1", "k2", "iterations", "burn_in", "tau0_sq", "x_design"):
        v = getattr(args, key)
        if v is not None:
            vals[key] = v
    if args.reps is not None:
        vals["replications"] = args.reps
    if args.seed is not None:
        vals["seed"] = args.seed
    if args.no_oracle:
        vals["oracle"] = False
    base = SimScenario(prior=_prior(rc), **vals)
    sigmas = args.sigma or [base.sigma_label]
    ms = args.m or [base.m]
    scenarios = [replace(base, sigma_label=s, m=m) for s in sigmas for m in ms]

    out = Path(args.out_dir or DEFAULT_OUT)
    rows = []

    def sink(row):
        _log(f"{row['scenario']} rep {row['rep']}: {row['status']} ({row['seconds']:.1f}s)")

    t0 = time.perf_counter()
    for s in scenarios:
        rows += run_scenario(s, sink=sink, workers=workers)
        cols = metric_columns(base.oracle) + ["traceback"]
        cio.write_dicts(out / "metrics.csv", rows, cols)
    summary = summarize(rows)
    cio.write_dicts(out / "summary.csv", summary)
    cio.write_json(out / "run_meta.json", dict(
        command="simulate", seed=base.seed, scenarios=[scenario_to_dict(s) for s in scenarios],
        replication_seeds={str(r): base.replication_seed(r) for r in range(base.replications)},
        workers=workers, backend=_kernels.BACKEND, seconds=time.perf_counter() - t0,
        config=rc.echo(), args=_echo(args), version=__version__,
    ))
    failed = sum(r["status"] != "ok" for r in rows)
    _log(f"wrote {len(rows)} rows to {out / 'metrics.csv'} ({failed} failed)")
    return EXIT_OK


# --------------------------------------------------------------------- fit

def _draw_summary(names, A) -> list:
    A = np.atleast_2d(A)
    if A.shape[1] == 0:
        return []
    q = np.quantile(A, [0.025, 0.5, 0.975], axis=0)
    mean = A.mean(axis=0)
    return [dict(parameter=nm, mean=float(mean[j]), median=float(q[1, j]),
                 q2_5=float(q[0, j]), q97_5=float(q[2, j])) for j, nm in enumerate(names)]


def cmd_fit(args) -> int:
    rc = _run_config(args)
    cfg = _fit_config(args, rc)
    schema = _schema(args, rc)
    out = Path(args.out_dir or DEFAULT_OUT)
    seeds = cfg.seeds()

    table = cio.load_table(args.data, schema)
    design = None
    if args.riboflavin:
        design = cio.fit_riboflavin_design(table)
        data = design.apply(table)
        names = design.names()
    else:
        data = table.to_dataset()
        names = list(table.x_names)

    train, test = data, None
    if args.train_subjects is not None:
        train, test = cio.split_train_test(data, args.train_subjects, seeds["data"])
        cio.write_csv_long(train, out / "train_data.csv")
        cio.write_csv_long(test, out / "test_data.csv")
        _log(f"split {data.n} subjects into {train.n} train / {test.n} test")

    t0 = time.perf_counter()
    sink = (lambda it, total: _log(f"iteration {it}/{total}")) if args.progress else None
    if args.oracle:
        if args.sigma0 is None:
            raise UsageError("fit --oracle needs --sigma0")
        _, S0 = cio.read_matrix(args.sigma0)
        truth = TruthSpec(np.zeros(train.p), S0, 1.0, "custom")
        draws = fit_oracle_hs(train, truth, cfg, progress_sink=sink)
        cio.write_matrix(out / "sigma0.csv", S0)
        proj = None
    else:
        fit = gibbs.fit_cme(train, cfg, progress_sink=sink)
        draws, proj = fit.draws, fit.proj
        cio.write_matrix(out / "projection_R.csv", proj.R)
        cio.write_matrix(out / "projection_S.csv", proj.S)
    seconds = time.perf_counter() - t0

    K = draws.gamma_draws.shape[1]
    gnames = [f"gamma{j + 1}" for j in range(K)]
    cio.write_matrix(out / "beta_draws.csv", draws.beta_draws, names)
    cio.write_matrix(out / "tau2_draws.csv", draws.tau2_draws[:, None], ["tau2"])
    cio.write_rows(out / "gamma_draws.csv", gnames, ([cio.fmt(v) for v in r] for r in draws.gamma_draws))
    summary = (_draw_summary(names, draws.beta_draws) + _draw_summary(["tau2"], draws.tau2_draws[:, None])
               + _draw_summary(gnames, draws.gamma_draws))
    cio.write_dicts(out / "summary.csv", summary, ["parameter", "mean", "median", "q2_5", "q97_5"])
    meta = dict(
        command="fit", model="oracle" if args.oracle else "cme", data=str(args.data),
        seed=cfg.seed, seeds=seeds, split_seed=seeds["data"] if test is not None else None,
        n=train.n, N=train.N, p=train.p, q=train.q, k1=cfg.k1, k2=cfg.k2,
        n_keep=draws.n_keep, iterations=cfg.iterations, burn_in=cfg.burn_in, thin=cfg.thin,
        prior=dict(a0=cfg.prior.a0, b0=cfg.prior.b0, sigma2_gamma=cfg.prior.sigma2_gamma),
        tol_b=cfg.tol_b, schema=schema.to_dict(), covariates=names,
        design=design.to_dict() if design else None,
        train_subjects=[str(s) for s in train.subject_ids],
        test_subjects=None if test is None else [str(s) for s in test.subject_ids],
        projection_fingerprint=None if proj is None else proj.fingerprint(),
        backend=_kernels.BACKEND, beta_method=draws.meta.get("beta_method"), seconds=seconds,
        config=rc.echo(), args=_echo(args), version=__version__,
    )
    cio.write_json(out / "run_meta.json", meta)
    _log(f"fit {meta['model']} on n={train.n}, N={train.N}, p={train.p} in {seconds:.1f}s -> {out}")
    return EXIT_OK


# ----------------------------------------------------------------- predict

def _load_run(run_dir: Path) -> tuple:
    meta_path = run_dir / "run_meta.json"
    if not meta_path.is_file():
        raise cio.DataFormatError(f"{meta_path}: not found; is {run_dir} a fit output directory?")
    meta = json.loads(meta_path.read_text())
    _, beta = cio.read_matrix(run_dir / "beta_draws.csv")
    _, tau2 = cio.read_matrix(run_dir / "tau2_draws.csv")
    gpath = run_dir / "gamma_draws.csv"
    K = meta["k1"] * meta["k2"] if meta["model"] == "cme" else 0
    gamma = cio.read_matrix(gpath)[1] if K else np.zeros((beta.shape[0], 0))
    return meta, PosteriorDraws(beta, tau2[:, 0], gamma, dict(meta))


def _load_test(args, meta, run_dir: Path):
    if args.data is None:
        path = run_dir / "test_data.csv"
        if not path.is_file():
            raise UsageError("predict needs --data (the fit did not write a held-out split)")
        return cio.load_designed(path), path
    table = cio.load_table(args.data, cio.LongSchema.from_dict(meta["schema"]))
    if meta.get("design"):
        return cio.RiboflavinDesign.from_dict(meta["design"]).apply(table), Path(args.data)
    return table.to_dataset(), Path(args.data)


def cmd_predict(args) -> int:
    run_dir = Path(args.run_dir)
    out = Path(args.out_dir) if args.out_dir else run_dir
    meta, draws = _load_run(run_dir)
    test, path = _load_test(args, meta, run_dir)
    if test.p != meta["p"] or test.q != meta["q"]:
        raise DataValidationError([f"test data has p={test.p}, q={test.q}; the fit used p={meta['p']}, q={meta['q']}"])
    seed = meta["seed"] if args.seed is None else args.seed
    rng = np.random.default_rng([seed, 1])
    if meta["model"] == "cme":
        _, R = cio.read_matrix(run_dir / "projection_R.csv")
        _, S = cio.read_matrix(run_dir / "projection_S.csv")
        proj = projection_from_arrays(R, S, meta["seeds"]["projection"])
        pred = gibbs.predict_dataset(draws, test, proj, rng)
    else:
        _, S0 = cio.read_matrix(run_dir / "sigma0.csv")
        truth = TruthSpec(np.zeros(test.p), S0, 1.0, "custom")
        pred = oracle_predict_dataset(draws, test, truth, rng)

    iv = credible_intervals(pred, args.level)
    point = pred.mean(axis=0)
    med = np.median(pred, axis=0)
    subj = np.repeat([str(s) for s in test.subject_ids], test.sizes)
    obs = np.concatenate([np.arange(1, m + 1) for m in test.sizes])
    y = test.y
    rows = [dict(subject=subj[i], obs=int(obs[i]), y=float(y[i]), mean=float(point[i]), median=float(med[i]),
                 lower=float(iv.lower[i]), upper=float(iv.upper[i])) for i in range(test.N)]
    cio.write_dicts(out / "predictions.csv", rows)
    cio.write_matrix(out / "predictive_draws.csv", pred, [f"{s}_{o}" for s, o in zip(subj, obs)])
    cover = iv.contains(y)
    pmeta = dict(
        command="predict", run_dir=str(run_dir), data=str(path), seed=seed, rng_key=[seed, 1],
        n_test=test.n, N_test=test.N, level=args.level,
        mspe=mspe_grouped(y, point, test.sizes), coverage=float(cover.mean()),
        mean_width=float(iv.width.mean()), args=_echo(args), version=__version__,
    )
    cio.write_json(out / "predict_meta.json", pmeta)
    print(json.dumps(dict(mspe=pmeta["mspe"], coverage=pmeta["coverage"], mean_width=pmeta["mean_width"])))
    return EXIT_OK


# ------------------------------------------------------------------ select

def cmd_select(args) -> int:
    run_dir = Path(args.run_dir)
    out = Path(args.out_dir) if args.out_dir else run_dir
    names, beta = cio.read_matrix(run_dir / "beta_draws.csv")
    res = s2m_select(beta, args.tol_b)
    med = np.median(np.abs(beta), axis=0)
    rows = [dict(index=j + 1, name=nm, median_abs=float(med[j]), selected=int(res.selected[j]))
            for j, nm in enumerate(names)]
    cio.write_dicts(out / "selection.csv", rows)
    cio.write_json(out / "selection_meta.json", dict(
        command="select", run_dir=str(run_dir), tol_b=res.tol_b, chosen_count=res.chosen_count,
        selected=[names[j] for j in res.indices], args=_echo(args), version=__version__,
    ))
    print(json.dumps(dict(chosen_count=res.chosen_count, tol_b=res.tol_b,
                          selected=[names[j] for j in res.indices])))
    return EXIT_OK


# ------------------------------------------------------------------ geweke

def cmd_geweke(args) -> int:
    seed = 0 if args.seed is None else args.seed
    rep = geweke_joint_test(GewekeDims(), n_samples=args.samples, seed=seed, n_chains=args.chains)
    out = Path(args.out_dir or DEFAULT_OUT)
    cio.write_dicts(out / "geweke.csv", rep.rows())
    passed = rep.passed(args.bound)
    cio.write_json(out / "geweke_meta.json", dict(
        command="geweke", seed=seed, n_samples=rep.n_samples, chains=args.chains, bound=args.bound,
        passed=passed, z=rep.z, seconds=rep.seconds, args=_echo(args), version=__version__,
    ))
    for r in rep.rows():
        print(f"{r['function']:>12s}  z = {r['z']:+.3f}")
    print(f"{'PASS' if passed else 'FAIL'} (|z| < {args.bound}) in {rep.seconds:.1f}s")
    return EXIT_OK


# ------------------------------------------------------------------ report

def _cell(r, a, b) -> str:
    va, vb = r.get(f"{a}_mean"), r.get(f"{b}_mean")
    if va is None or vb is None or not (np.isfinite(va) and np.isfinite(vb)):
        return ""
    return f"{va:.2f} ({vb:.2f})"


def report_tables(rows: list) -> tuple:
    """Aggregate metric rows into the two table layouts.

    The selection table has one row per (Sigma, method, k1) and a "TPR (FPR)"
    cell for every (k2, m); the prediction table has one row per (Sigma, k1) and a
    "coverage (relative width)" cell for every (k2, m).
    """
    summ = summarize(rows)
    for r in summ:
        r["m"], r["k1"], r["k2"] = int(r["m"]), int(r["k1"]), int(r["k2"])
    k2s = sorted({r["k2"] for r in summ})
    ms = sorted({r["m"] for r in summ})
    cols = [f"k2={k}|m={m}" for k in k2s for m in ms]
    sigmas = [s for s in SIGMA_LABELS if any(r["sigma"] == s for r in summ)]
    t1, t2 = [], []
    for s in sigmas:
        sub = [r for r in summ if r["sigma"] == s]
        for k1 in sorted({r["k1"] for r in sub}):
            row = dict(sigma=s, method="CME", k1=k1)
            row2 = dict(sigma=s, k1=k1)
            for r in sub:
                if r["k1"] == k1:
                    key = f"k2={r['k2']}|m={r['m']}"
                    row[key] = _cell(r, "cme_tpr", "cme_fpr")
                    row2[key] = _cell(r, "cme_pred_cov", "rel_pred_width")
            t1.append(row)
            t2.append(row2)
        if any("oracle_tpr_mean" in r for r in sub):
            row = dict(sigma=s, method="OracleHS", k1="")
            for r in sub:
                # the oracle does not depend on k1, k2; any k1 column will do
                row[f"k2={r['k2']}|m={r['m']}"] = _cell(r, "oracle_tpr", "oracle_fpr")
            t1.append(row)
    return t1, ["sigma", "method", "k1"] + cols, t2, ["sigma", "k1"] + cols


def _read_metric_rows(paths) -> list:
    rows = []
    for p in paths:
        header, raw = cio.read_table(p)
        for r in raw:
            d = dict(zip(header, r))
            for k, v in d.items():
                if k.startswith(("cme_", "oracle_", "rel_")):
                    d[k] = float(v) if v != "" else float("nan")
            rows.append(d)
    return rows


def cmd_report(args) -> int:
    out = Path(args.out_dir or DEFAULT_OUT)
    paths = args.metrics or [out / "metrics.csv"]
    rows = _read_metric_rows(paths)
    t1, c1, t2, c2 = report_tables(rows)
    cio.write_dicts(out / "table1_tpr_fpr.csv", t1, c1)
    cio.write_dicts(out / "table2_pred_coverage.csv", t2, c2)
    cio.write_dicts(out / "summary.csv", summarize(rows))
    for title, t, c in (("TPR (FPR)", t1, c1), ("coverage (relative width)", t2, c2)):
        print(title)
        print("  ".join(c))
        for r in t:
            print("  ".join(str(r.get(k, "")) for k in c))
        print()
    return EXIT_OK


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="INI file with [fit], [prior], [simulate], [data] sections")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--out-dir", help="output directory (default: cme_out, or the run directory for predict/select)")

    ap = _Parser(prog="cme", description="Compressed mixed-effects regression: fit, predict, select, simulate.")
    ap.add_argument("--version", action="version", version=f"cme {__version__}")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def sampler_flags(p):
        p.add_argument("--k1", type=int)
        p.add_argument("--k2", type=int)
        p.add_argument("--iterations", type=int)
        p.add_argument("--burn-in", dest="burn_in", type=int)

    s = sub.add_parser("simulate", parents=[common], help="run simulation replications to metrics.csv")
    s.add_argument("--sigma", nargs="+", choices=SIGMA_LABELS)
    s.add_argument("--m", nargs="+", type=int, help=f"cluster sizes, e.g. {' '.join(map(str, M_GRID))} (default: the scenario's m)")
    s.add_argument("--reps", type=int)
    s.add_argument("--x-design", dest="x_design", choices=X_DESIGNS)
    s.add_argument("--tau0-sq", dest="tau0_sq", type=float)
    s.add_argument("--workers", type=int)
    s.add_argument("--no-oracle", action="store_true")
    sampler_flags(s)
    s.set_defaults(func=cmd_simulate)

    f = sub.add_parser("fit", parents=[common], help="fit CME (or OracleHS) to a long-format CSV")
    f.add_argument("--data", required=True, type=Path)
    f.add_argument("--y-col")
    f.add_argument("--subject-col")
    f.add_argument("--x-cols", help="comma-separated names or globs (default: x*)")
    f.add_argument("--z-cols", help="comma-separated names or globs (default: same as X)")
    f.add_argument("--time-col")
    f.add_argument("--obs-col")
    f.add_argument("--riboflavin", action="store_true",
                   help="build intercept + 100 standardised genes + 3 time splines, with Z = X")
    f.add_argument("--train-subjects", type=int, help="hold out all but this many subjects")
    f.add_argument("--oracle", action="store_true", help="fit OracleHS with a known Sigma0")
    f.add_argument("--sigma0", type=Path, help="q x q CSV for --oracle")
    f.add_argument("--thin", type=int)
    f.add_argument("--tol-b", dest="tol_b", type=float)
    f.add_argument("--progress", action="store_true")
    sampler_flags(f)
    f.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", parents=[common], help="posterior predictive draws for test subjects")
    p.add_argument("--run-dir", required=True, type=Path)
    p.add_argument("--data", type=Path, help="test CSV (default: the fit's held-out split)")
    p.add_argument("--level", type=float, default=0.95)
    p.set_defaults(func=cmd_predict)

    sl = sub.add_parser("select", parents=[common], help="sequential 2-means selection on stored draws")
    sl.add_argument("--run-dir", required=True, type=Path)
    sl.add_argument("--tol-b", dest="tol_b", type=float)
    sl.set_defaults(func=cmd_select)

    g = sub.add_parser("geweke", parents=[common], help="joint-distribution correctness test of the sampler")
    g.add_argument("--samples", type=int, default=50_000)
    g.add_argument("--chains", type=int, default=100)
    g.add_argument("--bound", type=float, default=4.0)
    g.set_defaults(func=cmd_geweke)

    r = sub.add_parser("report", parents=[common], help="aggregate metrics.csv into table layouts")
    r.add_argument("--metrics", nargs="+", type=Path)
    r.set_defaults(func=cmd_report)
    return ap


def _fail(kind: str, exc: BaseException, code: int) -> int:
    print(json.dumps(dict(error=kind, type=type(exc).__name__, message=str(exc), exit_code=code)),
          file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        return _fail("usage", exc, EXIT_USAGE)
    except (cio.DataFormatError, DataValidationError) as exc:
        return _fail("data", exc, EXIT_DATA)
    except (NumericalError, FloatingPointError, np.linalg.LinAlgError) as exc:
        return _fail("numeric", exc, EXIT_NUMERIC)
    except ValueError as exc:
        return _fail("data", exc, EXIT_DATA)


if __name__ == "__main__":
    sys.exit(main())
