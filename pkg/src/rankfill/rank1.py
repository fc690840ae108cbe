"""Exact completion of rank-1 matrices inside connected components."""
from __future__ import annotations

import math
from collections import deque

import numpy as np

from .errors import InconsistencyError, UnsupportedInputError, ConfigurationError
from .graph import ObservationSet, connected_components, giant_component_fixed_point
from .model import MatrixView

REL_TOL = 1e-9


class Rank1Completion(MatrixView):
    """M_hat[j, b] = u[j] v[b] when j and b share a component, else 0.

    Factors are kept as sign and log-magnitude so long ratio chains cannot
    overflow; products are only formed when entries are read.
    """

    def __init__(self, u_sign, u_log, v_sign, v_log, row_label, col_label):
        self.u_sign, self.u_log = u_sign, u_log
        self.v_sign, self.v_log = v_sign, v_log
        self.row_label, self.col_label = row_label, col_label
        self.shape = (len(u_sign), len(v_sign))

    def rows(self, start, stop):
        same = self.row_label[start:stop, None] == self.col_label[None, :]
        mag = np.exp(self.u_log[start:stop, None] + self.v_log[None, :])
        return np.where(same, self.u_sign[start:stop, None] * self.v_sign[None, :] * mag, 0.0)

    def at(self, rows, cols):
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        same = self.row_label[rows] == self.col_label[cols]
        val = self.u_sign[rows] * self.v_sign[cols] * np.exp(self.u_log[rows] + self.v_log[cols])
        return np.where(same, val, 0.0)

    def mask(self) -> "DeterminedMask":
        return DeterminedMask(self)


class DeterminedMask(MatrixView):
    """True where the completion is forced by the observations."""

    def __init__(self, completion: Rank1Completion):
        self.c = completion
        self.shape = completion.shape

    def rows(self, start, stop):
        c = self.c
        return (c.row_label[start:stop, None] == c.col_label[None, :]) & (c.u_sign[start:stop, None] != 0)

    def at(self, rows, cols):
        c = self.c
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        return (c.row_label[rows] == c.col_label[cols]) & (c.u_sign[rows] != 0)

    def fraction(self) -> float:
        n, m = self.shape
        lab_r, lab_c = self.c.row_label, self.c.col_label
        has_edge = self.c.u_sign != 0
        k = int(max(lab_r.max(initial=-1), lab_c.max(initial=-1))) + 1
        rows_per = np.bincount(lab_r[has_edge], minlength=k)
        cols_per = np.bincount(lab_c, minlength=k)
        return float(rows_per @ cols_per) / (n * m)


def complete_rank1(obs: ObservationSet, exact: bool | None = None):
    """Complete a rank-1 matrix by ratio propagation along spanning trees.

    Returns ``(estimate, determined_mask)``. Entries linking two components
    are predicted as 0 and flagged undetermined. With ``exact`` (default:
    every observed value is +-1) cycle consistency is checked exactly,
    otherwise to a relative tolerance of 1e-9.
    """
    n, m = obs.n, obs.m
    values = obs.values
    if np.any(values == 0):
        k = int(np.flatnonzero(values == 0)[0])
        raise UnsupportedInputError(
            f"observed zero at ({obs.rows[k]}, {obs.cols[k]}); rank-1 completion needs nonzero entries")
    if exact is None:
        exact = bool(np.all(np.abs(values) == 1.0))
    labels = connected_components(obs)

    # CSR adjacency over the bipartite graph; vertex ids: rows 0..n-1, cols n..n+m-1
    src = np.concatenate([obs.rows, obs.cols + n])
    dst = np.concatenate([obs.cols + n, obs.rows])
    val = np.concatenate([values, values])
    order = np.argsort(src, kind="stable")
    dst, val = dst[order].tolist(), val[order].tolist()
    ptr = np.searchsorted(src[order], np.arange(n + m + 1)).tolist()

    sign = [0.0] * (n + m)
    logmag = [0.0] * (n + m)
    for root in range(n):
        if sign[root] != 0.0 or ptr[root] == ptr[root + 1]:
            continue
        sign[root] = 1.0
        queue = deque([root])
        while queue:
            x = queue.popleft()
            sx, lx = sign[x], logmag[x]
            for k in range(ptr[x], ptr[x + 1]):
                y, w = dst[k], val[k]
                sw = 1.0 if w > 0 else -1.0
                lw = math.log(abs(w))
                if sign[y] == 0.0:
                    sign[y] = sw * sx
                    logmag[y] = lw - lx
                    queue.append(y)
                    continue
                same_sign = sign[y] * sx == sw
                gap = abs(logmag[y] + lx - lw)
                if not same_sign or (gap != 0.0 if exact else gap > REL_TOL):
                    i, a = (x, y - n) if x < n else (y, x - n)
                    raise InconsistencyError(
                        f"observation ({i}, {a}) = {w} contradicts a rank-1 completion of its component",
                        edge=(i, a))
    sign = np.asarray(sign)
    logmag = np.asarray(logmag)
    est = Rank1Completion(sign[:n], logmag[:n], sign[n:], logmag[n:], labels.row_label, labels.col_label)
    return est, est.mask()


def rank1_optimal_distortion(epsilon: float, alpha: float = 1.0, D0: float = 1.0) -> float:
    """sqrt(1 - xi * zeta) * D0, the large-n RMSE of recursive completion."""
    if D0 < 0:
        raise ConfigurationError("D0 must be nonnegative")
    sol = giant_component_fixed_point(epsilon, alpha)
    return math.sqrt(max(0.0, 1.0 - sol.xi * sol.zeta)) * D0
