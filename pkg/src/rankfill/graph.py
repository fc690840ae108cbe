"""Revealed-entry sampling, the bipartite observation graph and its giant component."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigurationError, DataError, NumericalError
from .model import rng_for


@dataclass
class ObservationSet:
    """Revealed entries E with their values; also the edge list of G = (R, C, E)."""

    n: int
    m: int
    rows: np.ndarray
    cols: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.int64).ravel()
        self.cols = np.asarray(self.cols, dtype=np.int64).ravel()
        self.values = np.asarray(self.values, dtype=float).ravel()
        if not (len(self.rows) == len(self.cols) == len(self.values)):
            raise DataError("rows, cols and values must align")
        if len(self.rows):
            if self.rows.min() < 0 or self.rows.max() >= self.n:
                raise DataError("row index out of range")
            if self.cols.min() < 0 or self.cols.max() >= self.m:
                raise DataError("column index out of range")
            flat = self.rows * self.m + self.cols
            if len(np.unique(flat)) != len(flat):
                raise DataError("duplicate observed entry")

    def __len__(self):
        return len(self.rows)

    @property
    def epsilon(self) -> float:
        return len(self.rows) / self.n

    @property
    def edges(self):
        return list(zip(self.rows.tolist(), self.cols.tolist()))

    def with_values(self, values) -> "ObservationSet":
        return ObservationSet(self.n, self.m, self.rows, self.cols, values)

    def subset(self, mask) -> "ObservationSet":
        mask = np.asarray(mask)
        return ObservationSet(self.n, self.m, self.rows[mask], self.cols[mask], self.values[mask])

    def split_holdout(self, size: int, seed: int):
        """Withhold ``size`` uniformly chosen entries; returns (train, holdout)."""
        if not 0 <= size < len(self):
            raise ConfigurationError(f"holdout of {size} from {len(self)} observations")
        pick = rng_for(seed, "holdout").choice(len(self), size=size, replace=False)
        mask = np.zeros(len(self), dtype=bool)
        mask[pick] = True
        return self.subset(~mask), self.subset(mask)


def sample_pattern(n: int, m: int, count: int, seed: int):
    """``count`` distinct cells of an n x m grid, uniformly without replacement.

    Partial Fisher-Yates over the virtual index range [0, nm): only swapped
    positions are stored, so memory is O(count).
    """
    total = n * m
    if not 0 <= count <= total:
        raise ConfigurationError(f"cannot reveal {count} of {total} entries")
    rng = rng_for(seed, "E")
    targets = rng.integers(np.arange(count, dtype=np.int64), total).tolist() if count else []
    swapped = {}
    picked = np.empty(count, dtype=np.int64)
    for t, j in enumerate(targets):
        vt = swapped.get(t, t)
        vj = swapped.get(j, j)
        swapped[j] = vt
        picked[t] = vj
    picked.sort()
    return picked // m, picked % m


def sample_observations(truth, epsilon: float, seed: int) -> ObservationSet:
    """Reveal round(n * epsilon) uniformly random entries of ``truth``."""
    n, m = truth.n, truth.m
    count = int(round(n * epsilon))
    if not 0 < count <= n * m:
        raise ConfigurationError(f"epsilon={epsilon} gives {count} entries for a {n}x{m} matrix")
    rows, cols = sample_pattern(n, m, count, seed)
    return ObservationSet(n, m, rows, cols, truth.entries(rows, cols))


# components ------------------------------------------------------------------

@dataclass
class ComponentLabeling:
    row_label: np.ndarray
    col_label: np.ndarray
    sizes: np.ndarray  # (components, 3): rows, cols, edges
    giant: Optional[int]

    @property
    def count(self) -> int:
        return self.sizes.shape[0]

    def giant_fractions(self):
        """(rows in giant / n, cols in giant / m); zeros when there is no giant."""
        n, m = len(self.row_label), len(self.col_label)
        if self.giant is None:
            return 0.0, 0.0
        r, c, _ = self.sizes[self.giant]
        return r / n, c / m


def _find(parent, x):
    while parent[x] != x:
        parent[x] = parent[parent[x]]
        x = parent[x]
    return x


def connected_components(obs: ObservationSet) -> ComponentLabeling:
    """Union-find labeling of G. Rows are vertices 0..n-1, columns n..n+m-1.

    Labels are numbered in order of first appearance (rows first). The giant is
    the component with most vertices, smallest label on ties, and None if
    every component is a single vertex.
    """
    n, m = obs.n, obs.m
    parent = list(range(n + m))
    size = [1] * (n + m)
    for i, a in zip(obs.rows.tolist(), obs.cols.tolist()):
        x, y = _find(parent, i), _find(parent, n + a)
        if x != y:
            if size[x] < size[y]:
                x, y = y, x
            parent[y] = x
            size[x] += size[y]
    roots = np.fromiter((_find(parent, x) for x in range(n + m)), dtype=np.int64, count=n + m)
    _, first, labels = np.unique(roots, return_index=True, return_inverse=True)
    # relabel by first appearance
    order = np.argsort(first, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    labels = rank[labels]
    k = len(order)
    sizes = np.zeros((k, 3), dtype=np.int64)
    sizes[:, 0] = np.bincount(labels[:n], minlength=k)
    sizes[:, 1] = np.bincount(labels[n:], minlength=k)
    if len(obs):
        sizes[:, 2] = np.bincount(labels[obs.rows], minlength=k)
    total = sizes[:, 0] + sizes[:, 1]
    giant = int(np.argmax(total)) if k and total.max() > 1 else None
    return ComponentLabeling(labels[:n].copy(), labels[n:].copy(), sizes, giant)


# giant component fixed point --------------------------------------------------

@dataclass
class GiantComponentSolution:
    xi: float
    zeta: float
    iterations: int = 0
    residual: float = 0.0
    method: str = "iterate"


def _rates(epsilon, alpha):
    # mean row degree and mean column degree when |E| = n * epsilon
    return epsilon, epsilon / alpha


def _residual(xi, zeta, row_rate, col_rate):
    return max(abs(xi - (1 - math.exp(-row_rate * zeta))), abs(zeta - (1 - math.exp(-col_rate * xi))))


def _bisect(row_rate, col_rate, tol):
    # g(x)/x is decreasing on (0, 1] because g is concave with g(0) = 0
    def ratio(x):
        z = -math.expm1(-col_rate * x)
        return (-math.expm1(-row_rate * z) - x) / x

    lo, hi = 0.0, 1.0
    if ratio(hi) >= 0:
        return 1.0, 0
    it = 0
    while hi - lo > tol * 1e-3 and it < 200:
        mid = 0.5 * (lo + hi)
        if mid == lo or mid == hi:
            break
        if mid == 0.0 or ratio(mid) > 0:
            lo = mid
        else:
            hi = mid
        it += 1
    return 0.5 * (lo + hi), it


def giant_component_fixed_point(epsilon: float, alpha: float = 1.0, tol: float = 1e-12,
                                method: str = "iterate", max_iter: int = 2_000_000) -> GiantComponentSolution:
    """Largest solution (xi, zeta) of the giant-component equations.

    xi is the fraction of rows in the giant component and zeta the fraction
    of columns: xi = 1 - exp(-eps * zeta), zeta = 1 - exp(-(eps/alpha) * xi).
    Both are zero when eps <= sqrt(alpha). ``method`` is ``"iterate"``
    (monotone iteration from (1, 1), bisection fallback) or ``"bisect"``.
    """
    if epsilon < 0 or not alpha > 0 or not tol > 0:
        raise ConfigurationError("need epsilon >= 0, alpha > 0, tol > 0")
    if method not in ("iterate", "bisect"):
        raise ConfigurationError(f"unknown method {method!r}")
    row_rate, col_rate = _rates(epsilon, alpha)
    if row_rate * col_rate <= 1.0:
        return GiantComponentSolution(0.0, 0.0, 0, 0.0, method)

    if method == "bisect":
        xi, it = _bisect(row_rate, col_rate, tol)
        zeta = -math.expm1(-col_rate * xi)
        return GiantComponentSolution(xi, zeta, it, _residual(xi, zeta, row_rate, col_rate), "bisect")

    xi = zeta = 1.0
    prev_step = None
    for it in range(1, max_iter + 1):
        zeta_new = -math.expm1(-col_rate * xi)
        xi_new = -math.expm1(-row_rate * zeta_new)
        step = abs(xi_new - xi) + abs(zeta_new - zeta)
        xi, zeta = xi_new, zeta_new
        if step == 0.0:
            break
        if prev_step is not None and step < prev_step:
            rate = step / prev_step
            # distance to the fixed point is about step * rate / (1 - rate)
            if step * rate / (1.0 - rate) < tol * 1e-2:
                break
        prev_step = step
    else:
        xi_b, _ = _bisect(row_rate, col_rate, tol)
        zeta_b = -math.expm1(-col_rate * xi_b)
        res = _residual(xi_b, zeta_b, row_rate, col_rate)
        if res > tol:
            raise NumericalError(f"giant component solver did not converge (residual {res:.3g})", res)
        return GiantComponentSolution(xi_b, zeta_b, max_iter, res, "bisect")
    return GiantComponentSolution(xi, zeta, it, _residual(xi, zeta, row_rate, col_rate), "iterate")
