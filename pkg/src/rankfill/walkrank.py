"""WalkRank: stochastic local search over alphabet-constrained factors.

The cost counts observations missed by more than ``delta``. A run interleaves
greedy moves (exact re-optimization of one vertex's factor vector over its
incident edges) with walk moves (repair of a random violated observation by
resetting both endpoints), choosing a walk with probability ``rho``.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numba
import numpy as np

from .errors import ConfigurationError, InfeasibleEdgeError, NumericalError
from .graph import ObservationSet
from .model import (DiscreteAlphabet, DistortionReport, FactorAssignment, distortion_report, derive_seed,
                    rng_for)

# |u.v - M| > delta + COST_SLACK counts as violated; absorbs summation-order rounding
COST_SLACK = 1e-12
MAX_CANDIDATES = 10**6
CHECK_EVERY = 10**6
_CACHE_MAX_CLASSES = 4096
_CACHE_MAX_PAIRS = 5 * 10**6

ROW, COL = 0, 1
WALK_RULES = {"uniform": 0, "minbreak": 2}


@dataclass
class WalkRankConfig:
    delta: float = 0.0
    rho: float = 0.1
    alphabet: DiscreteAlphabet = field(default_factory=lambda: DiscreteAlphabet((-1.0, 1.0)))
    max_steps: Optional[int] = None
    target_cost: int = 0
    seed: int = 0
    log_every: Optional[int] = None
    # search over A_delta with tolerance delta + 2 r step when set (continuous factors)
    quantization_step: Optional[float] = None
    # pair selection in walk moves: "minbreak" (fewest violations left at the two
    # endpoints, ties uniform) or "uniform" over all satisfying pairs
    walk_rule: str = "minbreak"

    def __post_init__(self):
        if not 0.0 <= self.rho <= 1.0:
            raise ConfigurationError(f"rho must be in [0, 1], got {self.rho}")
        if self.delta < 0:
            raise ConfigurationError("delta must be >= 0")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigurationError("max_steps must be >= 1")
        if self.walk_rule not in WALK_RULES:
            raise ConfigurationError(f"unknown walk rule {self.walk_rule!r}")
        if self.quantization_step is not None:
            self.alphabet = DiscreteAlphabet.from_step(self.quantization_step)

    def effective_delta(self, r: int) -> float:
        if self.quantization_step is None:
            return self.delta
        return self.delta + 2 * r * self.quantization_step


def default_max_steps(n: int) -> int:
    return 50 * n * max(1, math.ceil(math.log2(max(n, 2)))) ** 2


# numba kernels ----------------------------------------------------------------

@numba.njit(cache=True)
def _seed(s):
    np.random.seed(s)


@numba.njit(cache=True, inline="always")
def _dot(cand, k, l):
    s = 0.0
    for t in range(cand.shape[1]):
        s += cand[k, t] * cand[l, t]
    return s


@numba.njit(cache=True)
def _set_status(e, bad, viol, vpos, nviol):
    if bad:
        if vpos[e] < 0:
            vpos[e] = nviol
            viol[nviol] = e
            nviol += 1
    elif vpos[e] >= 0:
        p = vpos[e]
        last = viol[nviol - 1]
        viol[p] = last
        vpos[last] = p
        vpos[e] = -1
        nviol -= 1
    return nviol


@numba.njit(cache=True)
def _refresh_vertex(side, x, cand, u_idx, v_idx, e_row, e_col, e_val, ptr, adj,
                    thr, viol, vpos, nviol):
    for t in range(ptr[side, x], ptr[side, x + 1]):
        e = adj[side, t]
        d = _dot(cand, u_idx[e_row[e]], v_idx[e_col[e]]) - e_val[e]
        nviol = _set_status(e, abs(d) > thr, viol, vpos, nviol)
    return nviol


@numba.njit(cache=True)
def _greedy(side, x, cand, u_idx, v_idx, e_row, e_col, e_val, ptr, adj, thr, viol, vpos, nviol):
    K = cand.shape[0]
    lo, hi = ptr[side, x], ptr[side, x + 1]
    best = hi - lo + 1
    choice = 0
    ties = 0
    for k in range(K):
        cnt = 0
        for t in range(lo, hi):
            e = adj[side, t]
            if side == 0:
                d = _dot(cand, k, v_idx[e_col[e]]) - e_val[e]
            else:
                d = _dot(cand, u_idx[e_row[e]], k) - e_val[e]
            if abs(d) > thr:
                cnt += 1
                if cnt > best:
                    break
        if cnt < best:
            best = cnt
            choice = k
            ties = 1
        elif cnt == best:
            ties += 1
            if np.random.random() * ties < 1.0:
                choice = k
    if side == 0:
        u_idx[x] = choice
    else:
        v_idx[x] = choice
    return _refresh_vertex(side, x, cand, u_idx, v_idx, e_row, e_col, e_val, ptr, adj,
                           thr, viol, vpos, nviol)


@numba.njit(cache=True)
def _pair_score(rule, k, l, i, a, cand, u_idx, v_idx, e_row, e_col, e_val, ptr, adj, thr):
    if rule == 0:
        return 0
    # resulting violations on the edges of i and a
    c = 0
    for t in range(ptr[0, i], ptr[0, i + 1]):
        e = adj[0, t]
        b = e_col[e]
        w = l if b == a else v_idx[b]
        if abs(_dot(cand, k, w) - e_val[e]) > thr:
            c += 1
    for t in range(ptr[1, a], ptr[1, a + 1]):
        e = adj[1, t]
        j = e_row[e]
        if j == i:
            continue
        if abs(_dot(cand, u_idx[j], l) - e_val[e]) > thr:
            c += 1
    return c


@numba.njit(cache=True)
def _walk(cand, u_idx, v_idx, e_row, e_col, e_val, ptr, adj, thr, viol, vpos, nviol,
          edge_class, cls_ptr, cls_pairs, rule):
    """Returns (nviol, edge) with edge >= 0 only when no satisfying pair exists."""
    K = cand.shape[0]
    e = viol[np.random.randint(nviol)]
    i, a = e_row[e], e_col[e]
    c = edge_class[e]
    pick = -1
    best = 1 << 60
    seen = 0
    if c >= 0:
        cnt = cls_ptr[c + 1] - cls_ptr[c]
        if rule == 0:
            if cnt > 0:
                pick = cls_pairs[cls_ptr[c] + np.random.randint(cnt)]
        else:
            for t in range(cls_ptr[c], cls_ptr[c + 1]):
                p = cls_pairs[t]
                sc = _pair_score(rule, p // K, p % K, i, a, cand, u_idx, v_idx, e_row, e_col,
                                 e_val, ptr, adj, thr)
                if sc < best:
                    best = sc
                    seen = 1
                    pick = p
                elif sc == best:
                    seen += 1
                    if np.random.random() * seen < 1.0:
                        pick = p
    else:
        y = e_val[e]
        for k in range(K):
            for l in range(K):
                if abs(_dot(cand, k, l) - y) <= thr:
                    sc = _pair_score(rule, k, l, i, a, cand, u_idx, v_idx, e_row, e_col,
                                     e_val, ptr, adj, thr)
                    if sc < best:
                        best = sc
                        seen = 1
                        pick = k * K + l
                    elif sc == best:
                        seen += 1
                        if np.random.random() * seen < 1.0:
                            pick = k * K + l
    if pick < 0:
        return nviol, e
    u_idx[i] = pick // K
    v_idx[a] = pick % K
    nviol = _refresh_vertex(0, i, cand, u_idx, v_idx, e_row, e_col, e_val, ptr, adj,
                            thr, viol, vpos, nviol)
    nviol = _refresh_vertex(1, a, cand, u_idx, v_idx, e_row, e_col, e_val, ptr, adj,
                            thr, viol, vpos, nviol)
    return nviol, -1


@numba.njit(cache=True)
def _run_chunk(n_steps, step0, rho, p_row, target, log_every, rule,
               cand, u_idx, v_idx, e_row, e_col, e_val, ptr, adj, thr, viol, vpos, nviol,
               edge_class, cls_ptr, cls_pairs, log_steps, log_costs):
    """Run up to n_steps moves. Returns (steps, nviol, greedy_increases, n_logged, bad_edge)."""
    n = u_idx.shape[0]
    m = v_idx.shape[0]
    increases = 0
    n_logged = 0
    s = 0
    while s < n_steps:
        if nviol <= target:
            break
        if nviol > 0 and np.random.random() < rho:
            nviol, bad = _walk(cand, u_idx, v_idx, e_row, e_col, e_val, ptr, adj, thr,
                               viol, vpos, nviol, edge_class, cls_ptr, cls_pairs, rule)
            if bad >= 0:
                return s, nviol, increases, n_logged, bad
        else:
            before = nviol
            if np.random.random() < p_row:
                nviol = _greedy(0, np.random.randint(n), cand, u_idx, v_idx, e_row, e_col, e_val,
                                ptr, adj, thr, viol, vpos, nviol)
            else:
                nviol = _greedy(1, np.random.randint(m), cand, u_idx, v_idx, e_row, e_col, e_val,
                                ptr, adj, thr, viol, vpos, nviol)
            if nviol > before:
                increases += 1
        s += 1
        if (step0 + s) % log_every == 0:
            log_steps[n_logged] = step0 + s
            log_costs[n_logged] = nviol
            n_logged += 1
    return s, nviol, increases, n_logged, -1


# state ------------------------------------------------------------------------

def cost(assignment: FactorAssignment, obs: ObservationSet, delta: float) -> int:
    """Number of observed (i, a) with |u_i . v_a - M_ia| > delta."""
    if assignment.shape != (obs.n, obs.m):
        raise ConfigurationError(f"assignment shape {assignment.shape} vs observations {(obs.n, obs.m)}")
    if len(obs) == 0:
        return 0
    pred = assignment.entries(obs.rows, obs.cols)
    return int(np.count_nonzero(np.abs(pred - obs.values) > delta + COST_SLACK))


def _csr(index, size, count):
    order = np.argsort(index, kind="stable")
    ptr = np.searchsorted(index[order], np.arange(size + 1))
    return ptr, order


class SearchState:
    """Mutable search state: candidate indices per vertex plus the violated-edge index."""

    def __init__(self, obs: ObservationSet, alphabet: DiscreteAlphabet, r: int,
                 u_idx, v_idx, delta: float):
        K = alphabet.size ** r
        if K > MAX_CANDIDATES:
            raise ConfigurationError(f"alphabet power N^r = {K} exceeds {MAX_CANDIDATES}")
        self.obs = obs
        self.alphabet = alphabet
        self.r = r
        self.delta = float(delta)
        self.thr = self.delta + COST_SLACK
        self.cand = alphabet.vectors(r)
        self.u_idx = np.asarray(u_idx, dtype=np.int64).copy()
        self.v_idx = np.asarray(v_idx, dtype=np.int64).copy()
        n, m, E = obs.n, obs.m, len(obs)
        self.e_row, self.e_col, self.e_val = obs.rows, obs.cols, obs.values
        row_ptr, row_adj = _csr(obs.rows, n, E)
        col_ptr, col_adj = _csr(obs.cols, m, E)
        width = max(n, m) + 1
        self.ptr = np.zeros((2, width), dtype=np.int64)
        self.ptr[0, : n + 1] = row_ptr
        self.ptr[0, n + 1:] = E
        self.ptr[1, : m + 1] = col_ptr
        self.ptr[1, m + 1:] = E
        self.adj = np.zeros((2, max(E, 1)), dtype=np.int64)
        self.adj[0, :E] = row_adj
        self.adj[1, :E] = col_adj
        self.viol = np.zeros(max(E, 1), dtype=np.int64)
        self.vpos = np.full(max(E, 1), -1, dtype=np.int64)
        self.nviol = 0
        self._build_pair_cache()
        self.recount()

    @classmethod
    def from_assignment(cls, assignment: FactorAssignment, obs, alphabet, delta):
        u_idx = _encode(assignment.u, alphabet)
        v_idx = _encode(assignment.v, alphabet)
        return cls(obs, alphabet, assignment.r, u_idx, v_idx, delta)

    def _build_pair_cache(self):
        K = self.cand.shape[0]
        E = len(self.obs)
        classes, inverse = np.unique(self.e_val, return_inverse=True)
        self.edge_class = np.full(max(E, 1), -1, dtype=np.int64)
        self.cls_ptr = np.zeros(1, dtype=np.int64)
        self.cls_pairs = np.zeros(1, dtype=np.int64)
        if E == 0 or len(classes) > _CACHE_MAX_CLASSES or K * K > 65536:
            return
        prod = self.cand @ self.cand.T
        lists = [np.flatnonzero(np.abs(prod - y).ravel() <= self.thr) for y in classes]
        total = sum(len(x) for x in lists)
        if total > _CACHE_MAX_PAIRS:
            return
        self.cls_ptr = np.concatenate([[0], np.cumsum([len(x) for x in lists])]).astype(np.int64)
        self.cls_pairs = np.concatenate(lists + [np.zeros(1, dtype=np.int64)]).astype(np.int64)
        self.edge_class[:E] = inverse

    @property
    def cost(self) -> int:
        return self.nviol

    def violated_edges(self) -> np.ndarray:
        return np.sort(self.viol[: self.nviol])

    def assignment(self) -> FactorAssignment:
        return FactorAssignment(self.cand[self.u_idx], self.cand[self.v_idx], self.alphabet)

    def recount(self) -> int:
        """Rebuild the violated set from scratch; returns the cost."""
        self.vpos[:] = -1
        self.nviol = 0
        E = len(self.obs)
        if E == 0:
            return 0
        pred = np.einsum("ek,ek->e", self.cand[self.u_idx[self.e_row]], self.cand[self.v_idx[self.e_col]])
        bad = np.flatnonzero(np.abs(pred - self.e_val) > self.thr)
        self.viol[: len(bad)] = bad
        self.vpos[bad] = np.arange(len(bad))
        self.nviol = len(bad)
        return self.nviol

    def check(self):
        """Assert the incremental violated set matches a from-scratch recount."""
        expect = cost(self.assignment(), self.obs, self.delta)
        current = set(self.viol[: self.nviol].tolist())
        if self.nviol != expect or len(current) != self.nviol or any(
                self.vpos[e] < 0 for e in current):
            raise NumericalError(f"incremental cost {self.nviol} != recomputed {expect}")
        return expect

    def _args(self):
        return (self.cand, self.u_idx, self.v_idx, self.e_row, self.e_col, self.e_val,
                self.ptr, self.adj, self.thr, self.viol, self.vpos, self.nviol)


def _encode(values, alphabet: DiscreteAlphabet) -> np.ndarray:
    """Map (count, r) alphabet vectors to indices in alphabet.vectors(r) order."""
    values = np.atleast_2d(values)
    if not alphabet.contains(values):
        raise ConfigurationError("factor values outside the alphabet")
    digits = alphabet.nearest_index(values)
    N = alphabet.size
    idx = np.zeros(values.shape[0], dtype=np.int64)
    for t in range(values.shape[1]):
        idx = idx * N + digits[:, t]
    return idx


@numba.njit(cache=True)
def _randint(k):
    return np.random.randint(k)


def seed_moves(seed: int):
    """Seed the move-level random stream used by greedy_move and walk_move."""
    _seed(int(seed) % (2**32))


def greedy_move(state: SearchState, side: str = "row", index: Optional[int] = None) -> int:
    """Re-optimize one vertex (uniform on ``side`` unless ``index`` given). Returns the new cost."""
    s = ROW if side in ("row", ROW) else COL
    size = state.obs.n if s == ROW else state.obs.m
    if index is None:
        index = int(_randint(size))
    state.nviol = _greedy(s, int(index), *state._args())
    return state.nviol


def walk_move(state: SearchState, rule: str = "uniform") -> int:
    """Repair a uniformly chosen violated edge. Returns the new cost."""
    if state.nviol == 0:
        raise ConfigurationError("walk move needs a violated observation")
    state.nviol, bad = _walk(*state._args(), state.edge_class, state.cls_ptr, state.cls_pairs,
                             WALK_RULES[rule])
    if bad >= 0:
        edge = (int(state.e_row[bad]), int(state.e_col[bad]))
        raise InfeasibleEdgeError(f"no alphabet pair reproduces observation {edge}", edge)
    return state.nviol


def initial_state(obs: ObservationSet, r: int, config: WalkRankConfig) -> SearchState:
    K = config.alphabet.size ** r
    if K > MAX_CANDIDATES:
        raise ConfigurationError(f"alphabet power N^r = {K} exceeds {MAX_CANDIDATES}")
    gen = rng_for(config.seed, "walkrank-init")
    # iid uniform components == uniform over the K candidate vectors
    u_idx = gen.integers(0, K, size=obs.n)
    v_idx = gen.integers(0, K, size=obs.m)
    return SearchState(obs, config.alphabet, r, u_idx, v_idx, config.effective_delta(r))


@dataclass
class WalkRankResult:
    assignment: FactorAssignment
    report: object
    final_cost: int
    reached_target: bool
    greedy_increases: int
    checks: int


def run_walkrank(truth, obs: ObservationSet, config: WalkRankConfig, r: Optional[int] = None):
    """Run WalkRank; returns (assignment, report).

    ``truth`` may be None (no RMSE, report fields from the fit only); ``r``
    defaults to the truth's rank. Full telemetry is available through
    :func:`walkrank_run`.
    """
    res = walkrank_run(truth, obs, config, r)
    return res.assignment, res.report


def walkrank_run(truth, obs: ObservationSet, config: WalkRankConfig, r: Optional[int] = None) -> WalkRankResult:
    if r is None:
        if truth is None:
            raise ConfigurationError("rank required when no truth is given")
        r = truth.r
    t0 = time.perf_counter()
    state = initial_state(obs, r, config)
    max_steps = config.max_steps or default_max_steps(obs.n)
    log_every = config.log_every or max(1, obs.n)
    p_row = obs.n / (obs.n + obs.m)
    _seed(derive_seed(config.seed, "walkrank-moves"))

    trajectory = [(0, state.nviol)]
    steps = increases = checks = 0
    while steps < max_steps and state.nviol > config.target_cost:
        chunk = min(CHECK_EVERY, max_steps - steps)
        cap = chunk // log_every + 2
        log_s = np.zeros(cap, dtype=np.int64)
        log_c = np.zeros(cap, dtype=np.int64)
        done, state.nviol, inc, n_logged, bad = _run_chunk(
            chunk, steps, config.rho, p_row, config.target_cost, log_every,
            WALK_RULES[config.walk_rule], *state._args(),
            state.edge_class, state.cls_ptr, state.cls_pairs, log_s, log_c)
        steps += done
        increases += inc
        trajectory.extend(zip(log_s[:n_logged].tolist(), log_c[:n_logged].tolist()))
        if bad >= 0:
            edge = (int(state.e_row[bad]), int(state.e_col[bad]))
            raise InfeasibleEdgeError(f"no alphabet pair reproduces observation {edge}", edge)
        state.check()
        checks += 1
        if done < chunk:
            break
    if trajectory[-1][0] != steps:
        trajectory.append((steps, state.nviol))
    if increases:
        raise NumericalError(f"{increases} greedy moves increased the cost")

    assignment = state.assignment()
    wall_ms = (time.perf_counter() - t0) * 1e3
    if truth is not None:
        report = distortion_report(truth, assignment, obs, steps=steps,
                                   cost_trajectory=trajectory, wall_ms=wall_ms)
    else:
        fit = float(np.sqrt(np.mean((assignment.entries(obs.rows, obs.cols) - obs.values) ** 2))) if len(obs) else 0.0
        report = DistortionReport(float("nan"), fit, float("nan"), steps, trajectory, wall_ms)
    return WalkRankResult(assignment, report, state.nviol, state.nviol <= config.target_cost,
                          increases, checks)
