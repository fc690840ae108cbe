"""Distortion bounds for completing random rank-r matrices.

Upper bounds: the closed form valid for continuous factors in [-1, 1], the
relaxed (entropy-capped) bound, its uniform-grid specialization, the
quantization bound, and a numerical estimate of the tight counting bound.
Lower bound: degree-deficit probability times an MMSE residual constant.
All logarithms are natural.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigurationError, UnsupportedInputError
from .model import DiscreteAlphabet, FactorDistribution, rng_for

THEOREM1_MIN_EPS_TILDE = 1.5
TIGHT_MAX_PAIRS = 100
KAPPA_MAX = 1e8
MAX_MOVE = 50.0  # cap on a single log-kernel update
MMSE_MAX_WORK = 10 ** 7  # enumeration size limit for the MMSE constant


@dataclass
class BoundInputs:
    r: int
    epsilon: float
    alpha: float = 1.0
    delta: float = 0.0
    p0: Optional[FactorDistribution] = None
    q0: Optional[FactorDistribution] = None

    def __post_init__(self):
        if self.r < 1 or self.epsilon < 0 or not self.alpha > 0 or self.delta < 0:
            raise ConfigurationError(f"invalid bound inputs {self}")

    @property
    def eps_tilde(self) -> float:
        """Observations per degree of freedom, epsilon / ((1 + alpha) r)."""
        return self.epsilon / ((1 + self.alpha) * self.r)

    def discrete_laws(self):
        p0 = self.p0 or FactorDistribution.rademacher()
        q0 = self.q0 or p0
        if not (p0.is_discrete and q0.is_discrete):
            raise UnsupportedInputError("this bound needs discrete factor distributions")
        return p0, q0


@dataclass
class BoundValue:
    value: float
    formula: str
    vacuous: bool = False
    details: dict = field(default_factory=dict)

    def __float__(self):
        return float(self.value)


# closed forms -----------------------------------------------------------------

def theorem1_bound(inputs: BoundInputs) -> BoundValue:
    """Delta + 2 r eps_tilde^(-1/2) ln(10 eps_tilde), for eps_tilde > 1.5.

    Below that the chain of inequalities behind it does not hold and the
    trivial bound 2r + Delta is returned, flagged vacuous.
    """
    et = inputs.eps_tilde
    r, delta = inputs.r, inputs.delta
    if et <= THEOREM1_MIN_EPS_TILDE:
        return BoundValue(2 * r + delta, "trivial", vacuous=True)
    value = delta + 2 * r * math.log(10 * et) / math.sqrt(et)
    return BoundValue(value, "theorem1", vacuous=value >= 2 * r + delta)


def discrete_alphabet_bound(r: int, N: int, eps_tilde: float, delta: float = 0.0) -> float:
    """Relaxed bound when factors and estimates live on a uniform N-point grid."""
    if N < 1 or not eps_tilde > 0:
        raise ConfigurationError("need N >= 1 and eps_tilde > 0")
    shrink = -math.expm1(-math.log(N) / eps_tilde)
    return math.sqrt(delta ** 2 + (4 * r ** 2 - delta ** 2) * shrink)


def continuous_bound(r: int, eps_tilde: float, delta: float = 0.0, delta_step: Optional[float] = None) -> BoundValue:
    """Quantization bound: grid bound at tolerance delta + 2 r step, plus 2 r step.

    Without ``delta_step`` the grid size N = ceil(4 sqrt(eps_tilde)) + 1
    (step 2 / (N - 1)) is used.
    """
    if delta_step is None:
        N = math.ceil(4 * math.sqrt(eps_tilde)) + 1
        delta_step = 2.0 / (N - 1)
        formula = "quantized-preset"
    else:
        if not 0 < delta_step <= 2:
            raise ConfigurationError("quantization step must be in (0, 2]")
        N = round(2.0 / delta_step) + 1
        formula = "quantized"
    err = r * delta_step
    value = discrete_alphabet_bound(r, N, eps_tilde, delta + 2 * err) + 2 * err
    return BoundValue(value, formula, vacuous=value >= 2 * r + delta, details={"N": N, "step": delta_step})


def max_entropy_gap(dist: FactorDistribution, r: int) -> float:
    """max over couplings with fixed truth marginal of H(p) - H(p0) = r ln N."""
    if not dist.is_discrete:
        raise UnsupportedInputError("entropy gap needs a discrete alphabet")
    return r * math.log(dist.alphabet.size)


def max_discrepancy(p0: FactorDistribution, q0: FactorDistribution, r: int) -> float:
    """max |u.v - u0.v0| over estimate vectors in the alphabets and truths in the supports."""
    def extremes(a, b):
        prods = np.outer(a, b)
        return prods.max(), prods.min()

    a_est, b_est = p0.alphabet.array(), q0.alphabet.array()
    a0 = p0.alphabet.array()[p0.probs() > 0]
    b0 = q0.alphabet.array()[q0.probs() > 0]
    hi_est, lo_est = extremes(a_est, b_est)
    hi_0, lo_0 = extremes(a0, b0)
    return float(r * max(hi_est - lo_0, hi_0 - lo_est))


def simplified_upper_bound(Hbar_p: float, Hbar_q: float, dbar: float, inputs: BoundInputs) -> BoundValue:
    """{dbar^2 - (dbar^2 - Delta^2) exp(-(Hp + alpha Hq) / eps)}^(1/2)."""
    delta = inputs.delta
    if delta > dbar:
        raise ConfigurationError(f"delta={delta} exceeds the maximal discrepancy {dbar}")
    if Hbar_p < 0 or Hbar_q < 0:
        raise ConfigurationError("entropy gaps must be nonnegative")
    if inputs.epsilon == 0:
        shrink = 0.0 if (Hbar_p + inputs.alpha * Hbar_q) > 0 else 1.0
    else:
        shrink = math.exp(-(Hbar_p + inputs.alpha * Hbar_q) / inputs.epsilon)
    value = math.sqrt(max(dbar ** 2 - (dbar ** 2 - delta ** 2) * shrink, 0.0))
    return BoundValue(value, "simplified", details={"Hbar_p": Hbar_p, "Hbar_q": Hbar_q, "dbar": dbar})


def simplified_bound_for(inputs: BoundInputs) -> BoundValue:
    """Relaxed bound with the entropy gaps and discrepancy of the input laws."""
    p0, q0 = inputs.discrete_laws()
    r = inputs.r
    return simplified_upper_bound(max_entropy_gap(p0, r), max_entropy_gap(q0, r),
                                  max_discrepancy(p0, q0, r), inputs)


# lower bound ------------------------------------------------------------------

def poisson_below(rate: float, r: int) -> float:
    """P{Poisson(rate) < r}."""
    term = math.exp(-rate)
    total = 0.0
    for k in range(r):
        total += term
        term *= rate / (k + 1)
    return min(total, 1.0)


def _mmse_residual(known: FactorDistribution, target: FactorDistribution, r: int, squared: bool) -> float:
    """E over r-1 known neighbours of the residual of the posterior-mean estimate.

    Neighbours x_1..x_{r-1} ~ known^r are revealed together with x_k . y0 for
    the target vector y0 ~ target^r; y' is the posterior mean of y0. With
    ``squared`` returns E[(x . (y0 - y'))^2] for a fresh x ~ known^r,
    otherwise E[x . (y0 - y')].
    """
    xs, wx = known.vector_law(r)
    keep = wx > 0
    xs, wx = xs[keep], wx[keep]
    ys, wy = target.vector_law(r)
    keep = wy > 0
    ys, wy = ys[keep], wy[keep]
    work = float(len(xs)) ** (r - 1) * len(ys) * len(xs)
    if work > MMSE_MAX_WORK:
        raise UnsupportedInputError(f"MMSE enumeration of {work:.3g} terms exceeds {MMSE_MAX_WORK}")
    mu = known.mean
    var = known.second_moment - mu ** 2
    sigma = var * np.eye(r) + mu ** 2 * np.ones((r, r))

    total = 0.0
    for combo in itertools.product(range(len(xs)), repeat=r - 1):
        weight = float(np.prod(wx[list(combo)])) if combo else 1.0
        if combo:
            sig = np.round(ys @ xs[list(combo)].T, 12)
            _, group = np.unique(sig, axis=0, return_inverse=True)
            group = group.ravel()
        else:
            group = np.zeros(len(ys), dtype=np.int64)
        mass = np.bincount(group, weights=wy)
        post_mean = np.stack([np.bincount(group, weights=wy * ys[:, k]) for k in range(r)], axis=1) / mass[:, None]
        resid = ys - post_mean[group]
        if squared:
            total += weight * float(wy @ np.einsum("yi,ij,yj->y", resid, sigma, resid))
        else:
            total += weight * float(wy @ (resid @ (mu * np.ones(r))))
    return total


def mmse_constant(p0: FactorDistribution, q0: FactorDistribution, r: int, squared: bool = True) -> float:
    """min of the column-side and row-side residuals (see _mmse_residual).

    ``squared=False`` evaluates the unsquared expectation, which is 0 by the
    tower property; kept for comparison only.
    """
    col_side = _mmse_residual(p0, q0, r, squared)
    row_side = _mmse_residual(q0, p0, r, squared)
    return min(col_side, row_side)


def lower_bound(inputs: BoundInputs, squared: bool = True) -> BoundValue:
    """sqrt((1 - (1 - xi)(1 - zeta)) c) with xi, zeta the probabilities that a row
    (column) has fewer than r observations."""
    p0, q0 = inputs.discrete_laws()
    r, eps, alpha = inputs.r, inputs.epsilon, inputs.alpha
    xi = poisson_below(eps, r)
    zeta = poisson_below(eps / alpha, r)
    c = mmse_constant(p0, q0, r, squared)
    deficit = 1 - (1 - xi) * (1 - zeta)
    value = math.sqrt(max(deficit * c, 0.0))
    return BoundValue(value, "lower", details={"xi": xi, "zeta": zeta, "c_tilde": c,
                                               "coarse": c * math.exp(-eps)})


# tight counting bound ---------------------------------------------------------

@dataclass
class CouplingProblem:
    """Discrete data of the constrained maximization over couplings.

    Kernels P (truth index a -> estimate index u) and Q (b -> v) are row
    stochastic; wp, wq are the truth-vector probabilities.
    """

    wp: np.ndarray
    wq: np.ndarray
    sq: np.ndarray      # (a, b, u, v): (u.v - u0.v0)^2
    ok: np.ndarray      # (a, b, u, v): |u.v - u0.v0| <= delta
    ident_p: np.ndarray  # estimate index equal to each truth vector
    ident_q: np.ndarray
    epsilon: float
    alpha: float


def coupling_problem(inputs: BoundInputs) -> CouplingProblem:
    p0, q0 = inputs.discrete_laws()
    r = inputs.r
    u_all = p0.alphabet.vectors(r)
    v_all = q0.alphabet.vectors(r)
    u0, wp = p0.vector_law(r)
    v0, wq = q0.vector_law(r)
    kp, kq = wp > 0, wq > 0
    ident_p = np.flatnonzero(kp)
    ident_q = np.flatnonzero(kq)
    u0, wp, v0, wq = u0[kp], wp[kp], v0[kq], wq[kq]
    diff = (u_all @ v_all.T)[None, None, :, :] - (u0 @ v0.T)[:, :, None, None]
    return CouplingProblem(wp, wq, diff ** 2, np.abs(diff) <= inputs.delta + 1e-12,
                           ident_p, ident_q, inputs.epsilon, inputs.alpha)


def _entropy_rows(P):
    with np.errstate(divide="ignore", invalid="ignore"):
        return -np.sum(np.where(P > 0, P * np.log(P), 0.0), axis=-1)


def phi(prob: CouplingProblem, P, Q) -> np.ndarray:
    """Growth rate of the expected number of delta-consistent assignments.

    Accepts single kernels or batches with a leading axis.
    """
    P = np.asarray(P)
    Q = np.asarray(Q)
    hp = _entropy_rows(P) @ prob.wp
    hq = _entropy_rows(Q) @ prob.wq
    if prob.epsilon == 0:
        return hp + prob.alpha * hq
    S = np.einsum("...au,...bv,abuv->...ab", P, Q, prob.ok)
    with np.errstate(divide="ignore"):
        logS = np.log(S)
    return hp + prob.alpha * hq + prob.epsilon * np.einsum("a,b,...ab->...", prob.wp, prob.wq, logS)


def distortion(prob: CouplingProblem, P, Q) -> np.ndarray:
    """d(p, q) = {E |u.v - u0.v0|^2}^(1/2)."""
    d2 = np.einsum("a,b,...au,...bv,abuv->...", prob.wp, prob.wq, P, Q, prob.sq)
    return np.sqrt(np.maximum(d2, 0.0))


def _softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _log_normalize(logits):
    top = logits.max(axis=-1, keepdims=True)
    return logits - top - np.log(np.sum(np.exp(logits - top), axis=-1, keepdims=True))


class _Kernels:
    """The coupling tensors reshaped so each gradient term is one batched matmul."""

    def __init__(self, prob: CouplingProblem):
        A, B, U, V = prob.sq.shape
        self.shape = (A, B, U, V)
        ok = prob.ok.astype(float)
        self.ok_b = ok.transpose(1, 0, 2, 3).reshape(B, A * U, V)   # for T_q
        self.ok_a = ok.transpose(0, 2, 1, 3).reshape(A, U, B * V)  # for T_p
        self.sq_q = (prob.sq * prob.wq[None, :, None, None]).transpose(0, 2, 1, 3).reshape(A * U, B * V)
        self.sq_p = (prob.sq * prob.wp[:, None, None, None]).transpose(0, 2, 1, 3).reshape(A * U, B * V)


def _terms(prob, ker, logP, logQ):
    """phi, d^2 and their row-normalized gradients for a batch of kernels."""
    A, B, U, V = ker.shape
    n = logP.shape[0]
    wq, wp = prob.wq, prob.wp
    eps, alpha = prob.epsilon, prob.alpha
    P, Q = np.exp(logP), np.exp(logQ)
    hp = -np.einsum("sau,sau->sa", P, logP) @ wp
    hq = -np.einsum("sbv,sbv->sb", Q, logQ) @ wq
    f = hp + alpha * hq
    fP, fQ = -logP, -logQ
    if eps > 0:
        # Tq[s,a,b,u] = sum_v ok[a,b,u,v] Q[s,b,v]
        Tq = np.matmul(ker.ok_b, Q.transpose(1, 2, 0)).reshape(B, A, U, n).transpose(3, 1, 0, 2)
        S = np.einsum("sau,sabu->sab", P, Tq)
        with np.errstate(divide="ignore"):
            f = f + eps * np.einsum("a,b,sab->s", wp, wq, np.log(S))
        inv = 1.0 / np.maximum(S, 1e-300)
        fP = fP + eps * np.einsum("sab,sabu->sau", wq[None, None, :] * inv, Tq)
        # Tp[s,a,b,v] = sum_u P[s,a,u] ok[a,b,u,v]
        Tp = np.matmul(P.transpose(1, 0, 2), ker.ok_a).reshape(A, n, B, V).transpose(1, 0, 2, 3)
        fQ = fQ + (eps / alpha) * np.einsum("sab,sabv->sbv", wp[None, :, None] * inv, Tp)
    dP = (Q.reshape(n, B * V) @ ker.sq_q.T).reshape(n, A, U)
    dQ = (P.reshape(n, A * U) @ ker.sq_p).reshape(n, B, V) / alpha
    d2 = np.einsum("a,sau,sau->s", wp, P, dP)
    return f, d2, fP, fQ, dP, dQ


def _starts(prob, count, seed):
    gen = rng_for(seed, "tight-bound")
    A, B, U, V = prob.sq.shape
    logP = np.log(gen.dirichlet(np.ones(U), size=(count, A)))
    logQ = np.log(gen.dirichlet(np.ones(V), size=(count, B)))
    # start 0 sits next to the identity coupling (d = 0), start 1 is uniform
    if U > 1:
        logP[0] = math.log(1e-3 / (U - 1))
        logP[0, np.arange(A), prob.ident_p] = math.log(1 - 1e-3)
    if V > 1:
        logQ[0] = math.log(1e-3 / (V - 1))
        logQ[0, np.arange(B), prob.ident_q] = math.log(1 - 1e-3)
    if count > 1:
        logP[1] = -math.log(U)
        logQ[1] = -math.log(V)
    return logP, logQ


def tight_upper_bound(inputs: BoundInputs, starts: int = 32, seed: int = 0,
                      rounds: int = 40, inner: int = 40, step: float = 0.25) -> BoundValue:
    """Numerical estimate of sup {d(p, q) : phi(p, q) >= 0} over couplings.

    Each start runs mirror ascent on the log-kernels of the augmented
    Lagrangian  d^2 / dbar^2 - (max(0, nu - c phi)^2 - nu^2) / (2c),  with the
    multiplier nu updated after every ``inner`` steps and the penalty c
    doubled. Every iterate with phi >= 0 is a candidate, so the result is a
    feasible lower estimate of the supremum.
    """
    p0, q0 = inputs.discrete_laws()
    pairs = (p0.alphabet.size ** inputs.r) * (q0.alphabet.size ** inputs.r)
    if pairs > TIGHT_MAX_PAIRS:
        raise ConfigurationError(f"N^(2r) = {pairs} exceeds the optimizer limit {TIGHT_MAX_PAIRS}")
    prob = coupling_problem(inputs)
    ker = _Kernels(prob)
    scale = max(max_discrepancy(p0, q0, inputs.r), 1e-12) ** 2
    logP, logQ = _starts(prob, starts, seed)

    # the identity coupling (d = 0, phi = 0) is always feasible
    best = np.zeros(starts)
    best_phi = np.zeros(starts)
    best_P = np.broadcast_to(np.eye(logP.shape[-1])[prob.ident_p], logP.shape).copy()
    best_Q = np.broadcast_to(np.eye(logQ.shape[-1])[prob.ident_q], logQ.shape).copy()

    nu = np.ones(starts)
    c = 1.0
    floor = -700.0
    for _ in range(rounds):
        for _ in range(inner):
            f, d2, fP, fQ, dP, dQ = _terms(prob, ker, logP, logQ)
            ok = (f >= 0) & (d2 > best ** 2)
            if np.any(ok):
                best[ok] = np.sqrt(np.maximum(d2[ok], 0.0))
                best_phi[ok] = f[ok]
                best_P[ok] = np.exp(logP[ok])
                best_Q[ok] = np.exp(logQ[ok])
            kappa = np.clip(nu - c * f, 0.0, KAPPA_MAX)[:, None, None]
            # the step shrinks with the multiplier so the entropy part stays a contraction
            eta = step / (1.0 + kappa)
            with np.errstate(over="ignore", invalid="ignore"):
                gP = np.nan_to_num(eta * (kappa * fP + dP / scale), posinf=MAX_MOVE, neginf=-MAX_MOVE)
                gQ = np.nan_to_num(eta * (kappa * fQ + dQ / scale), posinf=MAX_MOVE, neginf=-MAX_MOVE)
            logP = _log_normalize(np.maximum(logP + np.clip(gP, -MAX_MOVE, MAX_MOVE), floor))
            logQ = _log_normalize(np.maximum(logQ + np.clip(gQ, -MAX_MOVE, MAX_MOVE), floor))
        f = _terms(prob, ker, logP, logQ)[0]
        nu = np.clip(nu - c * f, 0.0, KAPPA_MAX)
        c = min(2.0 * c, 1e6)

    k = int(np.argmax(best))
    return BoundValue(float(best[k]), "tight-estimate",
                      details={"phi": float(best_phi[k]), "P": best_P[k], "Q": best_Q[k],
                               "starts": starts})
