"""Experiment sweeps, rating-file ingestion and CSV/JSON emission."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from itertools import product
from typing import Optional

import numpy as np

from . import __version__
from .als import DescentConfig, run_descent
from .bounds import (BoundInputs, continuous_bound, discrete_alphabet_bound, lower_bound,
                     theorem1_bound)
from .errors import ConfigurationError, DataError, RankfillError
from .graph import ObservationSet, sample_observations
from .model import (FactorDistribution, columns_for, distortion_report, generate_instance,
                    rank1_baseline, rng_for)
from .rank1 import complete_rank1, rank1_optimal_distortion
from .walkrank import WalkRankConfig, walkrank_run

ALGORITHMS = ("rank1", "walkrank", "als")

COLUMNS = ["n", "m", "alpha", "r", "epsilon", "algorithm", "seed", "rmse", "fit_error",
           "prediction_error", "steps", "wall_ms", "bound_theorem1", "bound_discrete",
           "bound_lower", "error", "bound_rank1", "config_hash", "version"]

SUMMARY_COLUMNS = ["n", "m", "alpha", "r", "epsilon", "algorithm", "instances", "failures",
                   "rmse_mean", "rmse_stderr", "fit_error_mean", "fit_error_stderr",
                   "prediction_error_mean", "prediction_error_stderr", "steps_mean",
                   "bound_theorem1", "bound_discrete", "bound_lower", "bound_rank1",
                   "config_hash", "version"]

VERSION = f"rankfill-{__version__}"


# experiment specs -------------------------------------------------------------

def _as_list(x):
    return list(x) if isinstance(x, (list, tuple)) else [x]


@dataclass
class ExperimentSpec:
    n: list = field(default_factory=lambda: [1000])
    alpha: list = field(default_factory=lambda: [1.0])
    r: list = field(default_factory=lambda: [1])
    epsilon: list = field(default_factory=lambda: [2.0])
    algorithm: str = "rank1"
    config: dict = field(default_factory=dict)
    factors: str = "pm1"
    instances_per_point: int = 10
    seed_base: int = 0
    output: Optional[str] = None
    timing: bool = False

    def __post_init__(self):
        self.n = [int(v) for v in _as_list(self.n)]
        self.alpha = [float(v) for v in _as_list(self.alpha)]
        self.r = [int(v) for v in _as_list(self.r)]
        self.epsilon = [float(v) for v in _as_list(self.epsilon)]
        if self.algorithm not in ALGORITHMS:
            raise ConfigurationError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if self.instances_per_point < 1:
            raise ConfigurationError("instances_per_point must be >= 1")
        if any(v < 1 for v in self.n + self.r) or any(not v > 0 for v in self.alpha + self.epsilon):
            raise ConfigurationError("grid values must be positive")
        FactorDistribution.from_name(self.factors)
        if self.algorithm == "rank1" and any(v != 1 for v in self.r):
            raise ConfigurationError("rank1 completion needs r = 1")
        known = {"walkrank": set(WalkRankConfig.__dataclass_fields__) - {"seed", "alphabet"},
                 "als": set(DescentConfig.__dataclass_fields__) - {"seed", "r", "holdout"},
                 "rank1": set()}[self.algorithm]
        extra = set(self.config) - known
        if extra:
            raise ConfigurationError(f"unknown {self.algorithm} options: {sorted(extra)}")

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentSpec":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown spec keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_file(cls, path) -> "ExperimentSpec":
        try:
            with open(path, encoding="utf-8") as fh:
                return cls.from_dict(json.load(fh))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read spec {path}: {exc}") from exc

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        """Digest of everything that determines the numbers (not output or timing)."""
        data = self.to_dict()
        data.pop("output")
        data.pop("timing")
        blob = json.dumps(data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    def grid(self):
        """Grid points (n, alpha, r, epsilon) in output order."""
        return list(product(self.n, self.alpha, self.r, self.epsilon))

    def tasks(self):
        return [(point, k) for point in self.grid() for k in range(self.instances_per_point)]


def point_bounds(r: int, epsilon: float, alpha: float, factors: str, delta: float = 0.0) -> dict:
    """Analytic companion columns for one grid point (blank where not defined)."""
    dist = FactorDistribution.from_name(factors)
    inputs = BoundInputs(r, epsilon, alpha, delta, dist if dist.is_discrete else None,
                         dist if dist.is_discrete else None)
    out = {"bound_theorem1": theorem1_bound(inputs).value}
    if dist.is_discrete:
        out["bound_discrete"] = discrete_alphabet_bound(r, dist.alphabet.size, inputs.eps_tilde, delta)
        try:
            out["bound_lower"] = lower_bound(inputs).value
        except RankfillError:
            out["bound_lower"] = math.nan
    else:
        out["bound_discrete"] = continuous_bound(r, inputs.eps_tilde, delta).value
        out["bound_lower"] = math.nan
    if r == 1:
        out["bound_rank1"] = rank1_optimal_distortion(epsilon, alpha, rank1_baseline(dist, dist))
    else:
        out["bound_rank1"] = math.nan
    return out


def run_instance(spec: ExperimentSpec, point, k: int) -> dict:
    """One row: generate, sample, complete, measure. Failures land in ``error``."""
    n, alpha, r, eps = point
    seed = spec.seed_base + k
    row = {"n": n, "m": columns_for(n, alpha), "alpha": alpha, "r": r, "epsilon": eps,
           "algorithm": spec.algorithm, "seed": seed, "rmse": math.nan, "fit_error": math.nan,
           "prediction_error": math.nan, "steps": math.nan, "wall_ms": math.nan, "error": ""}
    dist = FactorDistribution.from_name(spec.factors)
    try:
        truth = generate_instance(n, alpha, r, dist, dist, seed)
        obs = sample_observations(truth, eps, seed)
        if spec.algorithm == "rank1":
            t0 = time.perf_counter()
            estimate, _ = complete_rank1(obs)
            report = distortion_report(truth, estimate, obs, wall_ms=(time.perf_counter() - t0) * 1e3)
        elif spec.algorithm == "walkrank":
            cfg = dict(spec.config)
            if "quantization_step" not in cfg and dist.is_discrete:
                cfg["alphabet"] = dist.alphabet
            report = walkrank_run(truth, obs, WalkRankConfig(seed=seed, **cfg)).report
        else:
            _, report = run_descent(truth, obs, DescentConfig(r=r, seed=seed, **spec.config))
        row.update(rmse=report.rmse, fit_error=report.fit_error,
                   prediction_error=report.prediction_error, steps=report.steps,
                   wall_ms=report.wall_ms)
    except RankfillError as exc:
        row["error"] = f"{type(exc).__name__}: {exc}"
    if not spec.timing:
        row["wall_ms"] = math.nan
    return row


def _run_task(args):
    spec, point, k = args
    return run_instance(spec, point, k)


def run_experiment(spec: ExperimentSpec, jobs: int = 1) -> list:
    """All rows of the sweep in (grid point, instance) order.

    With ``jobs > 1`` instances run in a process pool; the order of the
    returned rows does not depend on completion order.
    """
    tasks = [(spec, point, k) for point, k in spec.tasks()]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_run_task, tasks))
    else:
        rows = [_run_task(t) for t in tasks]
    chash = spec.config_hash()
    delta = float(spec.config.get("delta", 0.0))
    cache = {}
    for row in rows:
        key = (row["r"], row["epsilon"], row["alpha"])
        if key not in cache:
            cache[key] = point_bounds(row["r"], row["epsilon"], row["alpha"], spec.factors, delta)
        row.update(cache[key])
        row["config_hash"] = chash
        row["version"] = VERSION
    return rows


def summarize(rows: list) -> list:
    """Mean and standard error over the instances of each grid point."""
    groups = {}
    for row in rows:
        key = (row["n"], row["m"], row["alpha"], row["r"], row["epsilon"], row["algorithm"])
        groups.setdefault(key, []).append(row)
    out = []
    for key, members in groups.items():
        ok = [r for r in members if not r["error"]]
        entry = dict(zip(["n", "m", "alpha", "r", "epsilon", "algorithm"], key))
        entry["instances"] = len(members)
        entry["failures"] = len(members) - len(ok)
        for name in ("rmse", "fit_error", "prediction_error"):
            vals = np.array([r[name] for r in ok], dtype=float)
            vals = vals[~np.isnan(vals)]
            entry[f"{name}_mean"] = float(vals.mean()) if len(vals) else math.nan
            entry[f"{name}_stderr"] = float(vals.std(ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else math.nan
        steps = np.array([r["steps"] for r in ok], dtype=float)
        entry["steps_mean"] = float(steps.mean()) if len(steps) else math.nan
        for name in ("bound_theorem1", "bound_discrete", "bound_lower", "bound_rank1",
                     "config_hash", "version"):
            entry[name] = members[0][name]
        out.append(entry)
    return out


# emission ---------------------------------------------------------------------

def _cell(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return ""
        return repr(v)
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def to_csv(rows: list, columns=COLUMNS) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_cell(row.get(c)) for c in columns])
    return buf.getvalue()


def _json_value(v):
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return None if math.isnan(v) else v
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, np.ndarray):
        return [_json_value(x) for x in v.tolist()]
    if isinstance(v, dict):
        return {k: _json_value(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_json_value(x) for x in v]
    return v


def to_json(rows: list, columns=None) -> str:
    if columns is not None:
        rows = [{c: row.get(c) for c in columns} for row in rows]
    return json.dumps(_json_value(rows), indent=1) + "\n"


def write_text(text: str, path: Optional[str]):
    """Write to ``path``; None or '-' means stdout."""
    if path in (None, "-"):
        sys.stdout.write(text)
        return
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def summary_path(path: str) -> str:
    stem, dot, ext = path.rpartition(".")
    if not dot or "/" in ext:
        return path + ".summary"
    return f"{stem}.summary.{ext}"


# rating triples ---------------------------------------------------------------

DELIMITERS = {"comma": ",", "tab": "\t", "whitespace": None}


@dataclass
class RatingTriples:
    """Sparse ratings, 0-based indices, values rescaled to [-1, 1] when a range is given."""

    rows: int
    cols: int
    row_idx: np.ndarray
    col_idx: np.ndarray
    values: np.ndarray
    value_range: Optional[tuple] = None

    def __post_init__(self):
        self.row_idx = np.asarray(self.row_idx, dtype=np.int64)
        self.col_idx = np.asarray(self.col_idx, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=float)

    @property
    def entries(self):
        return list(zip(self.row_idx.tolist(), self.col_idx.tolist(), self.values.tolist()))

    def observations(self) -> ObservationSet:
        return ObservationSet(self.rows, self.cols, self.row_idx, self.col_idx, self.values)


def _split(line: str, delimiter: str):
    sep = DELIMITERS.get(delimiter, delimiter)
    return line.split() if sep is None else [p.strip() for p in line.split(sep)]


def ingest_triples(path, delimiter: str = "comma", base: int = 1, value_range=None,
                   shape=None) -> RatingTriples:
    """Parse a ``row<d>col<d>value`` file.

    ``value_range=(lo, hi)`` maps values affinely onto [-1, 1]; values outside
    the range are rejected. ``shape`` fixes the matrix size, otherwise it is
    inferred from the largest indices.
    """
    if base not in (0, 1):
        raise ConfigurationError("index base must be 0 or 1")
    if value_range is not None:
        lo, hi = map(float, value_range)
        if not hi > lo:
            raise ConfigurationError(f"empty value range {value_range}")
    rows, cols, vals = [], [], []
    seen = {}
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot open {path}: {exc}") from exc
    with fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = _split(line, delimiter)
            if len(parts) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 fields, got {len(parts)}")
            try:
                i, a, v = int(parts[0]) - base, int(parts[1]) - base, float(parts[2])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: malformed entry {line!r}") from exc
            if i < 0 or a < 0 or (shape is not None and (i >= shape[0] or a >= shape[1])):
                raise DataError(f"{path}:{lineno}: index ({parts[0]}, {parts[1]}) out of range")
            if not math.isfinite(v):
                raise DataError(f"{path}:{lineno}: non-finite value")
            if value_range is not None:
                if not lo <= v <= hi:
                    raise DataError(f"{path}:{lineno}: value {v} outside {value_range}")
                v = 2.0 * (v - lo) / (hi - lo) - 1.0
            if (i, a) in seen:
                raise DataError(f"{path}:{lineno}: duplicate entry ({parts[0]}, {parts[1]}), first at line {seen[(i, a)]}")
            seen[(i, a)] = lineno
            rows.append(i)
            cols.append(a)
            vals.append(v)
    if shape is None:
        shape = (max(rows, default=-1) + 1, max(cols, default=-1) + 1)
    return RatingTriples(int(shape[0]), int(shape[1]), rows, cols, vals,
                         None if value_range is None else (lo, hi))


def emit_triples(triples, path=None, delimiter: str = "comma", base: int = 0) -> str:
    """Write ``row<d>col<d>value`` lines (shortest exact float repr); returns the text."""
    if isinstance(triples, ObservationSet):
        r, c, v = triples.rows, triples.cols, triples.values
    else:
        r, c, v = triples.row_idx, triples.col_idx, triples.values
    sep = DELIMITERS.get(delimiter, delimiter) or " "
    lines = [f"{i + base}{sep}{a + base}{sep}{float(x)!r}" for i, a, x in
             zip(r.tolist(), c.tolist(), v.tolist())]
    text = "\n".join(lines) + ("\n" if lines else "")
    if path is not None:
        write_text(text, path)
    return text


@dataclass
class ComparisonMatrices:
    data: ObservationSet
    iid: ObservationSet
    lowrank: ObservationSet
    lowrank_truth: object  # GroundTruthInstance behind ``lowrank``

    def __iter__(self):
        return iter((self.data, self.iid, self.lowrank))


def make_comparison_matrices(data, rank: int, seed: int) -> ComparisonMatrices:
    """(a) the data, (b) iid U[-1, 1] values on the same entries, (c) a fresh
    rank-``rank`` matrix with U[-1, 1] factors read on the same entries."""
    obs = data.observations() if isinstance(data, RatingTriples) else data
    if rank < 1:
        raise ConfigurationError("rank must be >= 1")
    iid = rng_for(seed, "compare-iid").uniform(-1.0, 1.0, size=len(obs))
    unif = FactorDistribution.uniform_interval()
    truth = generate_instance(obs.n, obs.m / obs.n, rank, unif, unif, seed)
    lowrank = truth.entries(obs.rows, obs.cols)
    return ComparisonMatrices(obs, obs.with_values(iid), obs.with_values(lowrank), truth)


def compare_descent(data, rank: int = 3, seed: int = 0, sweeps: int = 20, lam=None,
                    holdout_size: int = 1000) -> list:
    """Per-sweep fit and held-out prediction error for the three comparison matrices."""
    a, b, c = make_comparison_matrices(data, rank, seed)
    size = min(holdout_size, len(a) // 10)
    if size < 1:
        raise DataError("too few observations for a holdout split")
    rows = []
    for name, obs in (("data", a), ("iid", b), ("lowrank", c)):
        train, holdout = obs.split_holdout(size, seed)
        cfg = DescentConfig(r=rank, lam=lam, sweeps=sweeps, seed=seed, holdout=holdout)
        _, report = run_descent(None, train, cfg)
        for sweep, fit, pred, en in report.error_trajectory:
            rows.append({"matrix": name, "sweep": sweep, "fit_error": fit,
                         "prediction_error": pred, "energy": en})
    return rows


COMPARE_COLUMNS = ["matrix", "sweep", "fit_error", "prediction_error", "energy"]
