"""CSV ingestion and output, the riboflavin-style design, config files and train/test splits.

All numeric output goes through :func:`fmt`, which writes 17 significant
digits so that every double survives a write/read cycle bit for bit.  Files
are written whole to a temporary sibling and renamed into place.
"""

from __future__ import annotations

import configparser
import csv
import fnmatch
import json
import os
import tempfile
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .linalg import bspline_basis
from .model import CMEError, ConfigError, DataSet, SubjectBlock, validate_dataset

N_GENES = 100


class DataFormatError(CMEError):
    """Malformed input file: missing columns, unparsable cells, empty table."""


def fmt(v) -> str:
    return format(float(v), ".17g")


# ------------------------------------------------------------------ writing

def atomic_write(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


class _Buffer:
    def __init__(self):
        self.parts = []

    def write(self, s):
        self.parts.append(s)

    def text(self):
        return "".join(self.parts)


def write_rows(path, header, rows) -> Path:
    """Write ``rows`` (sequences) under ``header``; floats are written with 17 digits."""
    buf = _Buffer()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([fmt(v) if isinstance(v, (float, np.floating)) else v for v in r])
    return atomic_write(path, buf.text())


def write_dicts(path, rows, columns=None) -> Path:
    rows = list(rows)
    if columns is None:
        columns = []
        for r in rows:
            columns += [k for k in r if k not in columns]
    return write_rows(path, columns, ([r.get(c, "") for c in columns] for r in rows))


def write_matrix(path, A, header=None) -> Path:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if header is None:
        header = [f"c{j + 1}" for j in range(A.shape[1])]
    return write_rows(path, header, ([fmt(v) for v in row] for row in A))


def write_json(path, obj) -> Path:
    return atomic_write(path, json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


# ------------------------------------------------------------------ reading

def read_table(path) -> tuple:
    """(header, rows) of a CSV file, rows as lists of strings."""
    path = Path(path)
    if not path.is_file():
        raise DataFormatError(f"{path}: no such file")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataFormatError(f"{path}: file is empty")
        header = [h.strip() for h in header]
        rows = [r for r in reader if r]
    if not rows:
        raise DataFormatError(f"{path}: no data rows")
    for i, r in enumerate(rows, start=1):
        if len(r) != len(header):
            raise DataFormatError(f"{path}: row {i} (line {i + 1}) has {len(r)} fields, header has {len(header)}")
    return header, rows


def _numeric(path, header, rows, cols) -> np.ndarray:
    idx = [header.index(c) for c in cols]
    out = np.empty((len(rows), len(idx)))
    for i, r in enumerate(rows):
        for j, k in enumerate(idx):
            try:
                out[i, j] = float(r[k])
            except ValueError:
                raise DataFormatError(
                    f"{path}: row {i + 1} (line {i + 2}), column {cols[j]!r}: cannot parse {r[k]!r} as a number"
                ) from None
    return out


def read_matrix(path) -> tuple:
    """(header, float matrix) of an all-numeric CSV."""
    header, rows = read_table(path)
    return header, _numeric(path, header, rows, header)


@dataclass(frozen=True)
class LongSchema:
    """Column roles of a long-format table.

    ``x`` and ``z`` are lists of names; an entry containing ``*`` or ``?`` is
    a glob over the header.  ``z=None`` means Z = X.
    """

    y: str = "y"
    subject: str = "subject"
    x: tuple = ("x*",)
    z: tuple | None = None
    time: str | None = None
    obs: str | None = None

    def resolve(self, header, path="<table>") -> tuple:
        def expand(names):
            out = []
            for nm in names:
                if any(ch in nm for ch in "*?["):
                    hits = [h for h in header if fnmatch.fnmatchcase(h, nm)]
                    if not hits:
                        raise DataFormatError(f"{path}: no column matches {nm!r}")
                    out += [h for h in hits if h not in out]
                elif nm not in header:
                    raise DataFormatError(f"{path}: missing column {nm!r}")
                elif nm not in out:
                    out.append(nm)
            return out

        for role in ("y", "subject", "time", "obs"):
            nm = getattr(self, role)
            if nm is not None and nm not in header:
                raise DataFormatError(f"{path}: missing {role} column {nm!r}")
        xs = expand(self.x)
        zs = xs if self.z is None else expand(self.z)
        return xs, zs

    def to_dict(self) -> dict:
        return dict(y=self.y, subject=self.subject, x=list(self.x),
                    z=None if self.z is None else list(self.z), time=self.time, obs=self.obs)

    @classmethod
    def from_dict(cls, d) -> "LongSchema":
        return cls(y=d["y"], subject=d["subject"], x=tuple(d["x"]),
                   z=None if d.get("z") is None else tuple(d["z"]), time=d.get("time"), obs=d.get("obs"))


@dataclass(frozen=True, eq=False)
class LongTable:
    """Rows grouped contiguously by subject (first-appearance order, stable within subject)."""

    subject: np.ndarray
    y: np.ndarray
    X: np.ndarray
    x_names: list
    Z: np.ndarray | None = None
    z_names: list | None = None
    time: np.ndarray | None = None
    obs: np.ndarray | None = None

    @property
    def N(self) -> int:
        return self.y.shape[0]

    def groups(self) -> list:
        _, first = np.unique(self.subject, return_index=True)
        return list(self.subject[np.sort(first)])

    def to_dataset(self) -> DataSet:
        Z = self.X if self.Z is None else self.Z
        return validate_dataset(DataSet.from_arrays(self.y, self.X, Z, self.subject))


def load_table(path, schema: LongSchema | None = None) -> LongTable:
    schema = schema or LongSchema()
    header, rows = read_table(path)
    xs, zs = schema.resolve(header, path)
    si = header.index(schema.subject)
    subject = np.array([r[si].strip() for r in rows], dtype=object)
    y = _numeric(path, header, rows, [schema.y])[:, 0]
    X = _numeric(path, header, rows, xs)
    Z = None if schema.z is None else _numeric(path, header, rows, zs)
    time = _numeric(path, header, rows, [schema.time])[:, 0] if schema.time else None
    obs = _numeric(path, header, rows, [schema.obs])[:, 0] if schema.obs else None

    # group subjects contiguously; within a subject keep file order (or obs order)
    _, first, inv = np.unique(subject, return_index=True, return_inverse=True)
    rank = np.argsort(np.argsort(first))[inv]
    keys = (np.arange(len(rows)), rank) if obs is None else (np.arange(len(rows)), obs, rank)
    order = np.lexsort(keys)
    take = lambda a: None if a is None else a[order]
    return LongTable(subject[order], y[order], X[order], xs, take(Z),
                     None if Z is None else zs, take(time), take(obs))


def load_csv_long(path, schema: LongSchema | None = None) -> DataSet:
    """Read a long-format CSV into a validated :class:`DataSet`."""
    return load_table(path, schema).to_dataset()


def dataset_header(d: DataSet) -> list:
    return ["subject", "obs", "y"] + [f"x{j + 1}" for j in range(d.p)] + [f"z{j + 1}" for j in range(d.q)]


DESIGNED_SCHEMA = LongSchema(y="y", subject="subject", x=("x*",), z=("z*",), obs="obs")


def write_csv_long(d: DataSet, path) -> Path:
    """Write a DataSet in the long format read back by ``load_csv_long(path, DESIGNED_SCHEMA)``."""
    def rows():
        for b in d.blocks:
            for j in range(b.m):
                yield ([str(b.subject_id), str(j + 1), fmt(b.y[j])]
                       + [fmt(v) for v in b.X[j]] + [fmt(v) for v in b.Z[j]])

    return write_rows(path, dataset_header(d), rows())


def load_designed(path) -> DataSet:
    header, _ = read_table(path)
    p = sum(1 for h in header if h.startswith("x") and h[1:].isdigit())
    q = sum(1 for h in header if h.startswith("z") and h[1:].isdigit())
    schema = LongSchema(y="y", subject="subject", x=tuple(f"x{j + 1}" for j in range(p)),
                        z=tuple(f"z{j + 1}" for j in range(q)), obs="obs")
    return load_csv_long(path, schema)


# -------------------------------------------------------- riboflavin design

@dataclass(frozen=True)
class RiboflavinDesign:
    """Standardisation and spline settings fitted on one table, reusable on others."""

    means: np.ndarray
    sds: np.ndarray
    boundary: tuple
    n_spline: int = 3

    def names(self) -> list:
        return (["intercept"] + [f"gene{j + 1}" for j in range(len(self.means))]
                + [f"spline{j + 1}" for j in range(self.n_spline)])

    def matrix(self, genes, times) -> np.ndarray:
        G = (np.asarray(genes, float) - self.means) / self.sds
        B = bspline_basis(times, self.n_spline, boundary=self.boundary)
        return np.column_stack([np.ones(G.shape[0]), G, B])

    def apply(self, table: LongTable) -> DataSet:
        genes, times = _ribo_inputs(table)
        X = self.matrix(genes, times)
        return validate_dataset(DataSet.from_arrays(table.y, X, X, table.subject))

    def to_dict(self) -> dict:
        return dict(means=self.means.tolist(), sds=self.sds.tolist(),
                    boundary=list(self.boundary), n_spline=self.n_spline)

    @classmethod
    def from_dict(cls, d) -> "RiboflavinDesign":
        return cls(np.asarray(d["means"], float), np.asarray(d["sds"], float),
                   tuple(d["boundary"]), int(d["n_spline"]))


def _ribo_inputs(table: LongTable):
    if table.time is None:
        raise DataFormatError("riboflavin design needs a time column")
    if table.X.shape[1] < N_GENES:
        raise DataFormatError(f"riboflavin design needs {N_GENES} gene columns, got {table.X.shape[1]}")
    return table.X[:, :N_GENES], table.time


def fit_riboflavin_design(table: LongTable, n_spline: int = 3) -> RiboflavinDesign:
    genes, times = _ribo_inputs(table)
    lo, hi = float(times.min()), float(times.max())
    if not hi > lo:
        raise DataFormatError("degenerate time range: all times are equal")
    sds = genes.std(axis=0)
    if np.any(sds == 0):
        bad = [table.x_names[j] for j in np.flatnonzero(sds == 0)]
        raise DataFormatError(f"constant gene columns cannot be standardised: {bad[:5]}")
    return RiboflavinDesign(genes.mean(axis=0), sds, (lo, hi), n_spline)


def build_riboflavin_design(table: LongTable, n_spline: int = 3) -> DataSet:
    """Intercept, the first 100 covariates standardised over all rows, and a cubic B-spline in time.

    Z equals X, so p = q = 104 with the default three spline columns.
    """
    return fit_riboflavin_design(table, n_spline).apply(table)


# --------------------------------------------------------------- splitting

def split_train_test(d: DataSet, n_train: int, seed) -> tuple:
    """Random subject-level split; subjects keep their original relative order."""
    if not 0 < n_train < d.n:
        raise ValueError(f"n_train must lie in 1..{d.n - 1}, got {n_train}")
    perm = np.random.default_rng(seed).permutation(d.n)
    tr = np.sort(perm[:n_train])
    te = np.sort(perm[n_train:])
    return d.subset(tr), d.subset(te)


# ------------------------------------------------------------------ config

CONFIG_SECTIONS = ("fit", "prior", "simulate", "data")


@dataclass
class RunConfig:
    """Flat key/value settings read from an INI file, one dict per section."""

    fit: dict = field(default_factory=dict)
    prior: dict = field(default_factory=dict)
    simulate: dict = field(default_factory=dict)
    data: dict = field(default_factory=dict)
    source: str | None = None

    def echo(self) -> dict:
        return {s: dict(getattr(self, s)) for s in CONFIG_SECTIONS}


def _coerce(raw: str, kind):
    raw = raw.strip()
    if kind is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    if kind == "float?":
        return None if raw.lower() in ("", "none", "auto") else float(raw)
    if kind == "list":
        return tuple(x.strip() for x in raw.split(",") if x.strip())
    if kind == "str?":
        return None if raw.lower() in ("", "none") else raw
    return raw


CONFIG_KEYS = {
    "fit": dict(k1=int, k2=int, iterations=int, burn_in=int, thin=int, seed=int, tol_b="float?"),
    "prior": dict(a0=float, b0=float, sigma2_gamma=float),
    "simulate": dict(p=int, q=int, n=int, m=int, sigma_label=str, x_design=str, k1=int, k2=int,
                     replications=int, test_subjects=int, seed=int, tau0_sq=float, iterations=int,
                     burn_in=int, thin=int, tol_b="float?", oracle=bool, workers=int),
    "data": dict(y=str, subject=str, x="list", z="list", time="str?", obs="str?"),
}


def load_config(path) -> RunConfig:
    """Parse an INI file; unknown sections or keys raise :class:`ConfigError`."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"{path}: config file not found")
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";",))
    cp.optionxform = str
    try:
        cp.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    cfg = RunConfig(source=str(path))
    for sec in cp.sections():
        if sec not in CONFIG_KEYS:
            raise ConfigError(f"{path}: unknown section [{sec}]; expected one of {list(CONFIG_KEYS)}")
        for key, raw in cp.items(sec):
            kinds = CONFIG_KEYS[sec]
            if key not in kinds:
                raise ConfigError(f"{path}: unknown key {key!r} in [{sec}]")
            try:
                getattr(cfg, sec)[key] = _coerce(raw, kinds[key])
            except ValueError as exc:
                raise ConfigError(f"{path}: [{sec}] {key}: {exc}") from None
    return cfg


def dataclass_kwargs(cls, values: dict) -> dict:
    names = {f.name for f in fields(cls)}
    return {k: v for k, v in values.items() if k in names}
