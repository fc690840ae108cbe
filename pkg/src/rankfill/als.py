"""Regularized alternating descent on the factors.

Minimizes  sum_{(i,a) in E} (M_ia - u_i . v_a)^2 + lam ||U||_F^2 + lam ||V||_F^2
by exact ridge solves for one side at a time. Rows are independent given the
column factors (and vice versa), so a half-sweep solves them all at once.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigurationError, NumericalError
from .graph import ObservationSet
from .model import FactorAssignment, DistortionReport, fit_and_prediction_error, rmse, rng_for

DEFAULT_HOLDOUT = 1000


@dataclass
class DescentConfig:
    r: int = 3
    lam: Optional[float] = None  # None -> 0.1 |E| / (n + m)
    sweeps: int = 50
    init_scale: float = 0.5
    seed: int = 0
    holdout: Optional[ObservationSet] = None
    holdout_size: int = DEFAULT_HOLDOUT

    def __post_init__(self):
        if self.r < 1 or self.sweeps < 1:
            raise ConfigurationError("need r >= 1 and sweeps >= 1")
        if self.lam is not None and self.lam < 0:
            raise ConfigurationError("lambda must be >= 0")

    def resolved_lambda(self, obs: ObservationSet) -> float:
        if self.lam is not None:
            return float(self.lam)
        return 0.1 * len(obs) / (obs.n + obs.m)


def energy(assignment: FactorAssignment, obs: ObservationSet, lam: float) -> float:
    resid = obs.values - assignment.entries(obs.rows, obs.cols)
    return float(resid @ resid + lam * (np.sum(assignment.u ** 2) + np.sum(assignment.v ** 2)))


def _normal_system(owner, partner_idx, values, partner, size, lam):
    """Per-vertex ridge systems (A + lam I) x = b from incident edges."""
    r = partner.shape[1]
    P = partner[partner_idx]
    A = np.empty((size, r, r))
    for k in range(r):
        for l in range(k, r):
            col = np.bincount(owner, weights=P[:, k] * P[:, l], minlength=size)
            A[:, k, l] = col
            A[:, l, k] = col
    b = np.stack([np.bincount(owner, weights=values * P[:, k], minlength=size) for k in range(r)], axis=1)
    A += lam * np.eye(r)
    return A, b


def _solve(A, b, lam):
    if lam > 0:
        return np.linalg.solve(A, b[..., None])[..., 0]
    # singular blocks (deficient data, no shrinkage): minimal-norm solution
    return np.einsum("nij,nj->ni", np.linalg.pinv(A, hermitian=True), b)


def update_rows(u, v, obs: ObservationSet, lam: float) -> np.ndarray:
    """Exact minimizer of the energy over every u_i with v fixed."""
    A, b = _normal_system(obs.rows, obs.cols, obs.values, v, obs.n, lam)
    return _solve(A, b, lam)


def update_cols(u, v, obs: ObservationSet, lam: float) -> np.ndarray:
    A, b = _normal_system(obs.cols, obs.rows, obs.values, u, obs.m, lam)
    return _solve(A, b, lam)


def update_row(i: int, u, v, obs: ObservationSet, lam: float) -> np.ndarray:
    """New u_i minimizing the energy with everything else fixed."""
    mask = obs.rows == i
    P = v[obs.cols[mask]]
    y = obs.values[mask]
    r = v.shape[1]
    if lam > 0:
        return np.linalg.solve(P.T @ P + lam * np.eye(r), P.T @ y)
    return np.linalg.lstsq(P, y, rcond=None)[0] if len(y) else np.zeros(r)


def update_col(a: int, u, v, obs: ObservationSet, lam: float) -> np.ndarray:
    mask = obs.cols == a
    P = u[obs.rows[mask]]
    y = obs.values[mask]
    r = u.shape[1]
    if lam > 0:
        return np.linalg.solve(P.T @ P + lam * np.eye(r), P.T @ y)
    return np.linalg.lstsq(P, y, rcond=None)[0] if len(y) else np.zeros(r)


def normal_residual(u, v, obs: ObservationSet, lam: float, side: str = "row") -> float:
    """Largest relative residual ||(A + lam I) x - b|| / ||b|| over the blocks of one side."""
    if side == "row":
        A, b = _normal_system(obs.rows, obs.cols, obs.values, v, obs.n, lam)
        x = u
    else:
        A, b = _normal_system(obs.cols, obs.rows, obs.values, u, obs.m, lam)
        x = v
    res = np.linalg.norm(np.einsum("nij,nj->ni", A, x) - b, axis=1)
    scale = np.maximum(np.linalg.norm(b, axis=1), np.linalg.norm(A, axis=(1, 2)) * np.linalg.norm(x, axis=1))
    ok = scale > 0
    return float(np.max(res[ok] / scale[ok], initial=0.0))


def _errors(truth, assignment, train, holdout):
    if truth is None:
        resid = train.values - assignment.entries(train.rows, train.cols)
        fit = math.sqrt(float(np.mean(resid ** 2)))
        if holdout is None or len(holdout) == 0:
            return float("nan"), fit, float("nan")
        hres = holdout.values - assignment.entries(holdout.rows, holdout.cols)
        return float("nan"), fit, math.sqrt(float(np.mean(hres ** 2)))
    total = rmse(truth, assignment)
    if holdout is None and len(train) >= truth.n * truth.m:
        resid = train.values - assignment.entries(train.rows, train.cols)
        return total, math.sqrt(float(np.mean(resid ** 2))), float("nan")
    fit, pred = fit_and_prediction_error(truth, assignment, train, holdout)
    return total, fit, pred


def run_descent(truth, obs: ObservationSet, config: DescentConfig):
    """Fit rank-``config.r`` factors to ``obs``; returns (assignment, report).

    ``truth`` (a GroundTruthInstance or None) enables RMSE and the
    complement prediction error. Without truth, or when ``config.holdout``
    is given, prediction error is measured on held-out observations; with
    no truth and no explicit holdout, ``holdout_size`` entries are withheld
    from ``obs`` before fitting.
    """
    t0 = time.perf_counter()
    train, holdout = obs, config.holdout
    if truth is None and holdout is None and config.holdout_size > 0:
        size = min(config.holdout_size, len(obs) // 10)
        if size > 0:
            train, holdout = obs.split_holdout(size, config.seed)
    lam = config.resolved_lambda(train)
    gen = rng_for(config.seed, "als-init")
    u = gen.uniform(-config.init_scale, config.init_scale, size=(obs.n, config.r))
    v = gen.uniform(-config.init_scale, config.init_scale, size=(obs.m, config.r))

    history = []
    assignment = FactorAssignment(u, v)
    prev = energy(assignment, train, lam)
    total, fit, pred = _errors(truth, assignment, train, holdout)
    history.append((0, fit, pred, prev))
    costs = [(0, prev)]
    sweep_ms = [(time.perf_counter() - t0) * 1e3]
    for sweep in range(1, config.sweeps + 1):
        for side in ("row", "col"):
            if side == "row":
                u = update_rows(u, v, train, lam)
            else:
                v = update_cols(u, v, train, lam)
            cur = energy(FactorAssignment(u, v), train, lam)
            if cur > prev * (1 + 1e-9) + 1e-12:
                raise NumericalError(f"energy increased from {prev} to {cur} in sweep {sweep}")
            prev = cur
        assignment = FactorAssignment(u, v)
        total, fit, pred = _errors(truth, assignment, train, holdout)
        history.append((sweep, fit, pred, prev))
        costs.append((sweep, prev))
        sweep_ms.append((time.perf_counter() - t0) * 1e3)
    wall_ms = (time.perf_counter() - t0) * 1e3
    report = DistortionReport(total, fit, pred, steps=config.sweeps, cost_trajectory=costs,
                              wall_ms=wall_ms, error_trajectory=history, sweep_ms=sweep_ms)
    return assignment, report
