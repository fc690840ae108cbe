"""Core domain types: alphabets, factor laws, ground-truth instances, metrics."""
from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigurationError, DimensionError, DataError

ROW_BLOCK = 512


def rng_for(seed: int, role: str, index: int = 0) -> np.random.Generator:
    """Counter-based generator keyed by (seed, role, index).

    Philox streams from distinct keys are independent, so draws for U, V and E
    do not depend on the order in which they are requested.
    """
    role_key = zlib.crc32(role.encode("utf-8"))
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(role_key, int(index)))
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed: int, role: str, index: int = 0) -> int:
    return int(rng_for(seed, role, index).integers(0, 2**31 - 1))


@dataclass(frozen=True)
class DiscreteAlphabet:
    points: tuple
    step: Optional[float] = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 1 or len(pts) == 0:
            raise ConfigurationError("alphabet needs at least one point")
        if np.any(np.diff(pts) <= 0):
            raise ConfigurationError("alphabet points must be strictly increasing")
        if pts[0] < -1 - 1e-12 or pts[-1] > 1 + 1e-12:
            raise ConfigurationError("alphabet points must lie in [-1, 1]")
        object.__setattr__(self, "points", tuple(float(p) for p in pts))

    @classmethod
    def uniform(cls, size: int) -> "DiscreteAlphabet":
        """Evenly spaced grid on [-1, 1] with ``size`` points (step 2/(size-1))."""
        if size < 1:
            raise ConfigurationError("alphabet size must be >= 1")
        if size == 1:
            return cls((0.0,))
        pts = np.linspace(-1.0, 1.0, size)
        pts[np.abs(pts) < 1e-15] = 0.0
        return cls(tuple(pts), step=2.0 / (size - 1))

    @classmethod
    def from_step(cls, delta: float) -> "DiscreteAlphabet":
        """{-1, -1+delta, ..., 1-delta, 1}; the last gap is shorter when 2/delta is fractional."""
        if not 0 < delta <= 2:
            raise ConfigurationError(f"quantization step must be in (0, 2], got {delta}")
        ratio = 2.0 / delta
        k = round(ratio)
        if abs(ratio - k) < 1e-9:
            alpha = cls.uniform(k + 1)
            return cls(alpha.points, step=delta)
        pts = -1.0 + delta * np.arange(int(math.floor(ratio)) + 1)
        pts = np.append(pts, 1.0)
        return cls(tuple(pts), step=delta)

    @property
    def size(self) -> int:
        return len(self.points)

    def array(self) -> np.ndarray:
        return np.asarray(self.points, dtype=float)

    def contains(self, values, atol: float = 1e-12) -> bool:
        vals = np.asarray(values, dtype=float).ravel()
        if vals.size == 0:
            return True
        idx = self.nearest_index(vals)
        return bool(np.all(np.abs(self.array()[idx] - vals) <= atol))

    def nearest_index(self, values) -> np.ndarray:
        """Index of the nearest point; ties go to the point of larger magnitude."""
        pts = self.array()
        vals = np.asarray(values, dtype=float)
        hi = np.clip(np.searchsorted(pts, vals), 1, max(len(pts) - 1, 1))
        if len(pts) == 1:
            return np.zeros(vals.shape, dtype=np.int64)
        lo = hi - 1
        d_lo = np.abs(vals - pts[lo])
        d_hi = np.abs(pts[hi] - vals)
        tie = np.isclose(d_lo, d_hi, rtol=0, atol=1e-12)
        pick_hi = np.where(tie, np.abs(pts[hi]) > np.abs(pts[lo]), d_hi < d_lo)
        return np.where(pick_hi, hi, lo).astype(np.int64)

    def vectors(self, r: int) -> np.ndarray:
        """All N**r vectors of (A_N)^r as a (N**r, r) array, lexicographic order."""
        pts = self.array()
        grids = np.meshgrid(*([pts] * r), indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=1)


@dataclass(frozen=True)
class FactorDistribution:
    """Law of a single factor entry.

    ``kind`` is ``"discrete"`` (weights over ``alphabet``) or ``"uniform"``
    (continuous uniform on [-1, 1]).
    """

    kind: str
    alphabet: Optional[DiscreteAlphabet] = None
    weights: Optional[tuple] = None
    name: str = ""

    def __post_init__(self):
        if self.kind == "uniform":
            return
        if self.kind != "discrete" or self.alphabet is None or self.weights is None:
            raise ConfigurationError(f"invalid factor distribution {self!r}")
        w = np.asarray(self.weights, dtype=float)
        if w.shape != (self.alphabet.size,):
            raise ConfigurationError("weights must match alphabet size")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ConfigurationError("weights must be nonnegative and sum to 1")
        object.__setattr__(self, "weights", tuple(float(x) for x in w))

    @classmethod
    def uniform_interval(cls) -> "FactorDistribution":
        return cls("uniform", name="uniform")

    @classmethod
    def uniform_on(cls, alphabet: DiscreteAlphabet, name: str = "") -> "FactorDistribution":
        w = np.full(alphabet.size, 1.0 / alphabet.size)
        w[-1] = 1.0 - w[:-1].sum()
        return cls("discrete", alphabet, tuple(w), name=name or f"grid{alphabet.size}")

    @classmethod
    def rademacher(cls) -> "FactorDistribution":
        return cls.uniform_on(DiscreteAlphabet((-1.0, 1.0)), name="pm1")

    @classmethod
    def ternary(cls) -> "FactorDistribution":
        return cls.uniform_on(DiscreteAlphabet((-1.0, 0.0, 1.0)), name="ternary")

    @classmethod
    def from_name(cls, name: str) -> "FactorDistribution":
        """Parse ``pm1``, ``ternary``, ``uniform`` or ``gridN``."""
        key = name.strip().lower()
        if key in ("pm1", "rademacher", "sign"):
            return cls.rademacher()
        if key == "ternary":
            return cls.ternary()
        if key in ("uniform", "continuous"):
            return cls.uniform_interval()
        if key.startswith("grid"):
            try:
                size = int(key[4:])
            except ValueError:
                raise ConfigurationError(f"bad grid distribution {name!r}") from None
            return cls.uniform_on(DiscreteAlphabet.uniform(size), name=key)
        raise ConfigurationError(f"unknown factor distribution {name!r}")

    @property
    def is_discrete(self) -> bool:
        return self.kind == "discrete"

    def probs(self) -> np.ndarray:
        return np.asarray(self.weights, dtype=float)

    def sample(self, rng: np.random.Generator, shape) -> np.ndarray:
        if self.kind == "uniform":
            return rng.uniform(-1.0, 1.0, size=shape)
        idx = rng.choice(self.alphabet.size, size=shape, p=self.probs())
        return self.alphabet.array()[idx]

    @property
    def mean(self) -> float:
        if self.kind == "uniform":
            return 0.0
        return float(self.probs() @ self.alphabet.array())

    @property
    def second_moment(self) -> float:
        if self.kind == "uniform":
            return 1.0 / 3.0
        return float(self.probs() @ self.alphabet.array() ** 2)

    def vector_law(self, r: int):
        """Support (K, r) and probabilities (K,) of an iid r-vector."""
        if not self.is_discrete:
            raise ConfigurationError("vector law requires a discrete distribution")
        vecs = self.alphabet.vectors(r)
        p = self.probs()
        grids = np.meshgrid(*([p] * r), indexing="ij")
        w = np.ones(vecs.shape[0])
        for g in grids:
            w = w * g.ravel()
        return vecs, w


def rank1_baseline(p0: FactorDistribution, q0: FactorDistribution) -> float:
    """sqrt(E U^2 E V^2), the error of the all-zero estimate for rank 1."""
    return math.sqrt(p0.second_moment * q0.second_moment)


def columns_for(n: int, alpha: float) -> int:
    # Python's round() breaks ties to even.
    return int(round(n * alpha))


@dataclass
class GroundTruthInstance:
    """M = U V with U (n, r) and V (r, m)."""

    U: np.ndarray
    V: np.ndarray
    p0: Optional[FactorDistribution] = None
    q0: Optional[FactorDistribution] = None
    seed: Optional[int] = None

    def __post_init__(self):
        self.U = np.asarray(self.U, dtype=float)
        self.V = np.asarray(self.V, dtype=float)
        if self.U.ndim != 2 or self.V.ndim != 2 or self.U.shape[1] != self.V.shape[0]:
            raise DimensionError(f"incompatible factors {self.U.shape} and {self.V.shape}")
        self.U.setflags(write=False)
        self.V.setflags(write=False)

    @property
    def n(self) -> int:
        return self.U.shape[0]

    @property
    def m(self) -> int:
        return self.V.shape[1]

    @property
    def r(self) -> int:
        return self.U.shape[1]

    @property
    def alpha(self) -> float:
        return self.m / self.n

    @property
    def shape(self):
        return (self.n, self.m)

    @cached_property
    def M(self) -> np.ndarray:
        out = self.U @ self.V
        out.setflags(write=False)
        return out

    def entries(self, rows, cols) -> np.ndarray:
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        return np.einsum("ek,ke->e", self.U[rows], self.V[:, cols])

    def view(self) -> "FactoredView":
        return FactoredView(self.U, self.V)


def generate_instance(n: int, alpha: float, r: int, p0: FactorDistribution,
                      q0: FactorDistribution, seed: int) -> GroundTruthInstance:
    if n < 1 or r < 1 or not alpha > 0:
        raise ConfigurationError(f"need n >= 1, r >= 1, alpha > 0 (got n={n}, r={r}, alpha={alpha})")
    m = columns_for(n, alpha)
    if m < 1:
        raise ConfigurationError(f"round(n*alpha) = {m} columns")
    for dist in (p0, q0):
        if not isinstance(dist, FactorDistribution):
            raise ConfigurationError(f"not a factor distribution: {dist!r}")
    U = p0.sample(rng_for(seed, "U"), (n, r))
    V = q0.sample(rng_for(seed, "V"), (r, m))
    return GroundTruthInstance(U, V, p0, q0, seed)


@dataclass
class FactorAssignment:
    """Candidate factors: u is (n, r), v is (m, r); row i of v is the column vector of column i."""

    u: np.ndarray
    v: np.ndarray
    alphabet: Optional[DiscreteAlphabet] = None

    def __post_init__(self):
        self.u = np.array(self.u, dtype=float, ndmin=2)
        self.v = np.array(self.v, dtype=float, ndmin=2)
        if self.u.shape[1] != self.v.shape[1]:
            raise DimensionError("u and v must have the same rank")
        if self.alphabet is not None:
            if not (self.alphabet.contains(self.u) and self.alphabet.contains(self.v)):
                raise ConfigurationError("assignment entries outside the alphabet")

    @property
    def r(self) -> int:
        return self.u.shape[1]

    @property
    def shape(self):
        return (self.u.shape[0], self.v.shape[0])

    def view(self) -> "FactoredView":
        return FactoredView(self.u, self.v.T)

    def entries(self, rows, cols) -> np.ndarray:
        return np.einsum("ek,ek->e", self.u[np.asarray(rows)], self.v[np.asarray(cols)])


# matrix views --------------------------------------------------------------

class MatrixView:
    """Read-only matrix accessed by row blocks or by entry lists."""

    shape: tuple

    def rows(self, start: int, stop: int) -> np.ndarray:
        raise NotImplementedError

    def at(self, rows, cols) -> np.ndarray:
        raise NotImplementedError

    def dense(self) -> np.ndarray:
        return self.rows(0, self.shape[0])


class DenseView(MatrixView):
    def __init__(self, array):
        self.array = np.asarray(array, dtype=float)
        if self.array.ndim != 2:
            raise DimensionError("dense view needs a 2-d array")
        self.shape = self.array.shape

    def rows(self, start, stop):
        return self.array[start:stop]

    def at(self, rows, cols):
        return self.array[np.asarray(rows, dtype=np.int64), np.asarray(cols, dtype=np.int64)]


class FactoredView(MatrixView):
    """left (n, k) @ right (k, m), never materialized unless asked."""

    def __init__(self, left, right):
        self.left = np.asarray(left, dtype=float)
        self.right = np.asarray(right, dtype=float)
        if self.left.shape[1] != self.right.shape[0]:
            raise DimensionError("inner dimensions differ")
        self.shape = (self.left.shape[0], self.right.shape[1])

    def rows(self, start, stop):
        return self.left[start:stop] @ self.right

    def at(self, rows, cols):
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        return np.einsum("ek,ke->e", self.left[rows], self.right[:, cols])


def as_view(x) -> MatrixView:
    if isinstance(x, MatrixView):
        return x
    if isinstance(x, (GroundTruthInstance, FactorAssignment)):
        return x.view()
    return DenseView(x)


def _gram_sq_distance(a: FactoredView, b: FactoredView) -> float:
    left = np.hstack([a.left, -b.left])
    right = np.vstack([a.right, b.right])
    return float(np.sum((left.T @ left) * (right @ right.T)))


def squared_error_sum(truth, estimate) -> float:
    """Sum over all entries of (truth - estimate)^2."""
    a, b = as_view(truth), as_view(estimate)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch {a.shape} vs {b.shape}")
    if isinstance(a, FactoredView) and isinstance(b, FactoredView):
        total = _gram_sq_distance(a, b)
        scale = float(np.sum(a.left ** 2) * np.sum(a.right ** 2)) + 1.0
        # cancellation guard: the Gram identity loses relative accuracy near zero
        if total > 1e-6 * scale:
            return total
    n = a.shape[0]
    total = 0.0
    for start in range(0, n, ROW_BLOCK):
        stop = min(n, start + ROW_BLOCK)
        diff = a.rows(start, stop) - b.rows(start, stop)
        total += float(np.sum(diff * diff))
    return total


def rmse(truth, estimate) -> float:
    """Root mean square error over all n*m entries (Frobenius / sqrt(nm))."""
    a = as_view(truth)
    n, m = a.shape
    return math.sqrt(max(squared_error_sum(a, estimate), 0.0) / (n * m))


def fit_and_prediction_error(truth, estimate, obs, holdout=None):
    """(fit, prediction) RMSE restricted to observed entries and to the rest.

    With ``holdout`` (an ObservationSet or (rows, cols) pair) the prediction
    error averages over those entries only.
    """
    a, b = as_view(truth), as_view(estimate)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch {a.shape} vs {b.shape}")
    n, m = a.shape
    rows, cols = obs.rows, obs.cols
    if len(rows) == 0:
        raise DataError("fit error undefined: no observed entries")
    if rows.max() >= n or cols.max() >= m:
        raise DimensionError("observation indices outside the matrix")
    d = a.at(rows, cols) - b.at(rows, cols)
    fit_sq = float(np.sum(d * d))
    fit = math.sqrt(fit_sq / len(rows))
    if holdout is not None:
        h_rows, h_cols = (holdout.rows, holdout.cols) if hasattr(holdout, "rows") else holdout
        if len(h_rows) == 0:
            raise DataError("prediction error undefined: empty holdout")
        dh = a.at(h_rows, h_cols) - b.at(h_rows, h_cols)
        return fit, math.sqrt(float(np.mean(dh * dh)))
    rest = n * m - len(rows)
    if rest <= 0:
        raise DataError("prediction error undefined: every entry is observed")
    total = squared_error_sum(a, b)
    return fit, math.sqrt(max(total - fit_sq, 0.0) / rest)


@dataclass
class DistortionReport:
    rmse: float
    fit_error: float
    prediction_error: float
    steps: int = 0
    cost_trajectory: list = field(default_factory=list)
    wall_ms: float = 0.0
    # per-sweep (sweep, fit, prediction, energy) rows for descent runs
    error_trajectory: list = field(default_factory=list)
    # elapsed milliseconds at the end of each sweep (descent runs)
    sweep_ms: list = field(default_factory=list)

    def decomposition_gap(self, n: int, m: int, observed: int) -> float:
        """Relative violation of rmse^2 nm = fit^2 |E| + pred^2 (nm - |E|)."""
        lhs = self.rmse ** 2 * n * m
        rhs = self.fit_error ** 2 * observed + self.prediction_error ** 2 * (n * m - observed)
        return abs(lhs - rhs) / max(lhs, rhs, 1e-300)


def distortion_report(truth, estimate, obs, **telemetry) -> DistortionReport:
    """Report for an estimate against a known truth; prediction over the complement of E."""
    n, m = as_view(truth).shape
    total = rmse(truth, estimate)
    if len(obs.rows) == 0:
        fit, pred = 0.0, total
    elif len(obs.rows) == n * m:
        fit, pred = total, 0.0
    else:
        fit, pred = fit_and_prediction_error(truth, estimate, obs)
    return DistortionReport(total, fit, pred, **telemetry)


def quantize(assignment: FactorAssignment, delta: float) -> FactorAssignment:
    """Round every factor component to the nearest point of A_delta.

    Product entries move by at most r * delta.
    """
    alphabet = DiscreteAlphabet.from_step(delta)
    pts = alphabet.array()
    u = pts[alphabet.nearest_index(np.clip(assignment.u, -1, 1))]
    v = pts[alphabet.nearest_index(np.clip(assignment.v, -1, 1))]
    return FactorAssignment(u, v, alphabet)
