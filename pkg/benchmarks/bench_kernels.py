"""Compare the numba and numpy kernel backends.

Per-kernel timings use one simulation-sized instance (36 subjects of 12
observations, k = 3); the chain timing runs a short fit of the default
scenario in a fresh interpreter per backend, because the backend is fixed at
import time through ``CME_BACKEND``.

    python3 benchmarks/bench_kernels.py [--iterations 500] [--repeat 5]
"""

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from cme import _kernels

CHAIN = """
import json, time
from cme import _kernels
from cme.gibbs import fit_cme
from cme.model import FitConfig
from cme.sim import SimScenario, gen_dataset
s = SimScenario()
train, _, _ = gen_dataset(s, 0)
cfg = FitConfig(k1=3, k2=3, iterations={it} + 10, burn_in=10, seed=1)
fit_cme(train, FitConfig(k1=3, k2=3, iterations=20, burn_in=10, seed=1))  # compile / warm up
t0 = time.perf_counter()
fit_cme(train, cfg)
print(json.dumps(dict(backend=_kernels.BACKEND, seconds=time.perf_counter() - t0)))
"""


def instance(n=36, m=12, k=3, p=300, seed=0):
    rng = np.random.default_rng(seed)
    off = np.arange(0, (n + 1) * m, m, dtype=np.int64)
    N = n * m
    return dict(
        off=off, n=n, k=k,
        A=rng.standard_normal((N, p + 1)),
        M=rng.standard_normal((N, k)),
        r=rng.standard_normal(N),
        z=rng.standard_normal((n, k)),
        d=rng.standard_normal((n, k)),
        T=rng.standard_normal((n, k, k)),
        root=np.linalg.cholesky(np.eye(k) + 0.3),
        B=np.abs(rng.standard_normal((10_000, p))) ** 3,
    )


def calls(K, x):
    ZS = x["M"]
    G = np.stack([ZS[a:b].T @ ZS[a:b] for a, b in zip(x["off"][:-1], x["off"][1:])])
    return {
        "whiten": lambda: K["whiten"](x["A"], x["M"], x["off"]),
        "project": lambda: K["project"](x["A"], x["M"], x["off"]),
        "right_mult": lambda: K["right_mult"](x["M"], x["T"], x["off"]),
        "sample_d": lambda: K["sample_d"](x["M"], x["r"], x["off"], x["root"], 0.7, x["z"]),
        "gamma_moments": lambda: K["gamma_moments"](ZS, x["r"], x["d"], x["off"], G),
        "s2m_counts": lambda: K["s2m_counts"](x["B"], 0.1),
    }


def bench_kernels(repeat):
    x = instance()
    backends = ["numpy"] + (["numba"] if _kernels.NUMBA_AVAILABLE else [])
    table = {}
    for b in backends:
        for name, f in calls(_kernels.kernels(b), x).items():
            f()  # jit compile
            n = 1 if name == "s2m_counts" else 20
            table.setdefault(name, {})[b] = min(timeit.repeat(f, number=n, repeat=repeat)) / n
    return table


def bench_chain(iterations):
    out = {}
    for b in ("numpy", "numba"):
        env = dict(os.environ, CME_BACKEND=b)
        res = subprocess.run([sys.executable, "-c", CHAIN.format(it=iterations)], env=env,
                             capture_output=True, text=True)
        if res.returncode:
            out[b] = None
            print(res.stderr.strip().splitlines()[-1], file=sys.stderr)
        else:
            out[b] = json.loads(res.stdout.strip().splitlines()[-1])["seconds"]
    return out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--iterations", type=int, default=500, help="chain iterations per backend")
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", action="store_true", help="print machine-readable results")
    args = ap.parse_args(argv)

    kt = bench_kernels(args.repeat)
    ct = bench_chain(args.iterations)
    if args.json:
        print(json.dumps(dict(kernels=kt, chain=ct, iterations=args.iterations)))
        return 0
    print(f"{'kernel':<15}{'numpy ms':>12}{'numba ms':>12}{'speed-up':>10}")
    for name, t in kt.items():
        nb = t.get("numba")
        print(f"{name:<15}{1e3 * t['numpy']:>12.3f}" + (f"{1e3 * nb:>12.3f}{t['numpy'] / nb:>9.1f}x" if nb else ""))
    print()
    for b, s in ct.items():
        print(f"chain, {args.iterations} iterations, {b:<6}: " + ("failed" if s is None else f"{s:.2f}s"))
    if all(ct.values()):
        print(f"chain speed-up: {ct['numpy'] / ct['numba']:.2f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
