"""Acceptance criteria 1-9 at their stated tolerances.

Each test records one line in conftest.ACCEPTANCE; the lines are printed in
the terminal summary. Run alone with ``pytest tests/test_acceptance.py``.
"""
import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE
from rankfill import cli
from rankfill.als import DescentConfig, energy, normal_residual, run_descent, update_cols, update_rows
from rankfill.bounds import (BoundInputs, discrete_alphabet_bound, lower_bound, simplified_bound_for,
                             theorem1_bound, tight_upper_bound)
from rankfill.graph import (ObservationSet, connected_components, giant_component_fixed_point,
                            sample_observations, sample_pattern)
from rankfill.harness import ExperimentSpec, compare_descent, ingest_triples, run_experiment, to_csv
from rankfill.model import FactorAssignment, FactorDistribution, generate_instance, rmse
from rankfill.rank1 import complete_rank1, rank1_optimal_distortion
from rankfill.walkrank import WalkRankConfig, walkrank_run

from oracles import rank1_sign_enumeration, xi_bisect_alpha1

PM1 = FactorDistribution.rademacher()
UNIF = FactorDistribution.uniform_interval()


def record(k, ok, detail):
    ACCEPTANCE[k] = (bool(ok), detail)
    print(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


def test_criterion_1_rank1_curve():
    # reference value at eps = 2 from the bisection oracle
    ref = math.sqrt(1 - xi_bisect_alpha1(2.0) ** 2)
    assert ref == pytest.approx(0.60425, abs=1e-4)
    worst_gap, worst_time, parts = 0.0, 0.0, []
    for eps in (1.5, 2, 3, 4):
        target = rank1_optimal_distortion(eps, 1.0, 1.0)
        t0 = time.perf_counter()
        vals = []
        for s in range(10):
            truth = generate_instance(2000, 1, 1, PM1, PM1, s)
            est, _ = complete_rank1(sample_observations(truth, eps, s))
            vals.append(rmse(truth, est))
        elapsed = time.perf_counter() - t0
        gap = abs(float(np.mean(vals)) - target)
        worst_gap, worst_time = max(worst_gap, gap), max(worst_time, elapsed)
        parts.append(f"eps={eps}: {np.mean(vals):.4f} vs {target:.4f}")
    record(1, worst_gap < 0.02 and worst_time < 10,
           f"max |mean - curve| = {worst_gap:.4f} (< 0.02), max time/point {worst_time:.2f}s (< 10s); " + "; ".join(parts))


def test_criterion_2_giant_component():
    worst = 0.0
    for eps in (1.1, 1.5, 2, 3, 5):
        for alpha in (0.5, 1, 2):
            a = giant_component_fixed_point(eps, alpha)
            b = giant_component_fixed_point(eps, alpha, method="bisect")
            worst = max(worst, abs(a.xi - b.xi), abs(a.zeta - b.zeta))
    xi = giant_component_fixed_point(2.0, 1.0).xi
    fracs = []
    for s in range(10):
        truth = generate_instance(1000, 1, 1, PM1, PM1, s)
        fracs.append(connected_components(sample_observations(truth, 2.0, s)).giant_fractions()[0])
    gap = abs(float(np.mean(fracs)) - xi)
    record(2, worst < 1e-10 and gap < 0.03,
           f"solver disagreement {worst:.1e} (< 1e-10); giant row fraction {np.mean(fracs):.4f} vs xi {xi:.4f} "
           f"(gap {gap:.4f} < 0.03, mean of 10 instances)")


def test_criterion_3_bound_ordering_and_limits():
    violations, points = [], 0
    for r in (1, 2):
        for N in (2, 3):
            law = FactorDistribution.from_name(f"grid{N}")
            for eps in (2, 4, 8, 16):
                for alpha in (0.5, 1):
                    inp = BoundInputs(r, float(eps), alpha, 0.0, law)
                    lo = lower_bound(inp).value
                    mid = tight_upper_bound(inp).value
                    hi = simplified_bound_for(inp).value
                    points += 1
                    if not (lo <= mid <= hi):
                        violations.append((r, N, eps, alpha, lo, mid, hi))
    limits = [abs(discrete_alphabet_bound(r, N, 1e6, d) - d) for r in (1, 2) for N in (2, 3) for d in (0.0, 0.5, 1.0)]
    formula_err, vacuous = 0.0, 0
    for r in (1, 2):
        for eps in (2, 4, 8, 16, 200, 1000):
            for alpha in (0.5, 1):
                for delta in (0.0, 0.3):
                    inp = BoundInputs(r, float(eps), alpha, delta)
                    et = eps / ((1 + alpha) * r)
                    b = theorem1_bound(inp)
                    if et <= 1.5:
                        vacuous += 1
                        formula_err = max(formula_err, abs(b.value - (2 * r + delta)) * (not b.vacuous))
                        continue
                    direct = delta + 2.0 * r * np.log(10.0 * et) / np.sqrt(et)
                    formula_err = max(formula_err, abs(b.value - float(direct)))
    ok = not violations and max(limits) < 1e-2 and formula_err <= 4 * np.finfo(float).eps
    record(3, ok,
           f"ordering holds on {points - len(violations)}/{points} points; max |discrete(1e6) - delta| = "
           f"{max(limits):.2e} (< 1e-2); theorem1 vs direct evaluation max error {formula_err:.1e} "
           f"({vacuous} points below eps_tilde 1.5 take the flagged trivial branch)")


def test_criterion_4_walkrank_feasibility():
    reached, checks_ok = 0, True
    for s in range(10):
        truth = generate_instance(1000, 1, 3, PM1, PM1, s)
        obs = sample_observations(truth, 8.0, s)
        res = walkrank_run(truth, obs, WalkRankConfig(seed=s, rho=0.1, delta=0.0))
        reached += res.final_cost == 0
        checks_ok &= res.greedy_increases == 0 and res.checks >= 1
    record(4, reached >= 8 and checks_ok,
           f"{reached}/10 seeds reach cost 0 (need >= 8); incremental-cost checks passed on every run: {checks_ok}")


SCALE_GRID = {2: (8.0, 10.0, 12.0), 3: (10.0, 12.0, 14.0)}


def test_criterion_5_scale_invariance():
    ok, parts = True, []
    for r, eps_grid in SCALE_GRID.items():
        means = {}
        for n in (1000, 10_000):
            series = []
            for eps in eps_grid:
                vals = []
                for s in range(10):
                    truth = generate_instance(n, 1, r, PM1, PM1, s)
                    res = walkrank_run(truth, sample_observations(truth, eps, s), WalkRankConfig(seed=s))
                    vals.append(res.report.rmse)
                series.append((float(np.mean(vals)), float(np.std(vals, ddof=1) / math.sqrt(len(vals)))))
            means[n] = series
            for (m0, s0), (m1, s1) in zip(series, series[1:]):
                ok &= m1 <= m0 + math.hypot(s0, s1)
        diffs = [abs(a[0] - b[0]) for a, b in zip(means[1000], means[10_000])]
        ok &= max(diffs) < 0.05
        parts.append(f"r={r} eps={list(eps_grid)}: n=1e3 {[round(m, 4) for m, _ in means[1000]]}, "
                     f"n=1e4 {[round(m, 4) for m, _ in means[10_000]]}, max diff {max(diffs):.4f}")
    record(5, ok, "; ".join(parts))


def test_criterion_6_theorem1_consistency():
    checked, worst, ok = 0, -math.inf, True
    for r in (1, 2, 3):
        eps = 40.0 * 2 * r  # eps_tilde = 40 at alpha = 1
        bound = theorem1_bound(BoundInputs(r, eps, 1.0))
        assert not bound.vacuous and bound.value < 2 * r
        for s in range(3):
            truth = generate_instance(1000, 1, r, PM1, PM1, s)
            obs = sample_observations(truth, eps, s)
            measured = [walkrank_run(truth, obs, WalkRankConfig(seed=s)).report.rmse,
                        run_descent(truth, obs, DescentConfig(r=r, sweeps=20, seed=s))[1].rmse]
            for m in measured:
                checked += 1
                worst = max(worst, m - bound.value)
                ok &= m <= bound.value
    record(6, ok, f"{checked} WalkRank/ALS runs at non-vacuous points (eps_tilde = 40, r = 1..3); "
                  f"max (RMSE - bound) = {worst:.3f} (must be <= 0)")


def test_criterion_7_bruteforce_equivalence():
    gen = np.random.default_rng(2024)
    mismatches = 0
    for trial in range(200):
        truth = generate_instance(4, 1, 1, PM1, PM1, trial)
        k = int(gen.integers(0, 17))
        rows, cols = sample_pattern(4, 4, k, trial)
        obs = ObservationSet(4, 4, rows, cols, truth.M[rows, cols])
        est, mask = complete_rank1(obs)
        sols = np.array(rank1_sign_enumeration(4, 4, obs.edges, obs.values.tolist()))
        forced = np.all(sols == sols[0], axis=0)
        dense, det = est.dense(), mask.dense()
        good = np.array_equal(det, forced) and np.array_equal(dense[det], sols[0][det])
        mismatches += not good
    record(7, mismatches == 0, f"{200 - mismatches}/200 patterns match exhaustive sign enumeration")


def _ratings_standin(path, n=500, m=500, count=25_000, seed=0):
    """Integer 1..5 ratings from a rank-2 taste model plus noise, written as a 1-based triple file."""
    gen = np.random.default_rng(seed)
    rows, cols = sample_pattern(n, m, count, seed)
    a, b = gen.normal(size=(n, 2)), gen.normal(size=(m, 2))
    raw = 3 + 0.6 * np.sum(a[rows] * b[cols], axis=1) + 0.8 * gen.normal(size=count)
    stars = np.clip(np.rint(raw), 1, 5).astype(int)
    with open(path, "w") as fh:
        fh.write("# user,item,stars\n")
        fh.writelines(f"{i + 1},{j + 1},{v}\n" for i, j, v in zip(rows, cols, stars))


def test_criterion_8_als(tmp_path):
    blocks, increases, worst_res = 0, 0, 0.0
    for s in range(50):
        truth = generate_instance(60, 1, 3, UNIF, UNIF, s)
        obs = sample_observations(truth, 8.0, s)
        lam = DescentConfig().resolved_lambda(obs)
        gen = np.random.default_rng(s)
        u, v = gen.uniform(-0.5, 0.5, (60, 3)), gen.uniform(-0.5, 0.5, (60, 3))
        prev = energy(FactorAssignment(u, v), obs, lam)
        for _ in range(10):
            for side in ("row", "col"):
                if side == "row":
                    u = update_rows(u, v, obs, lam)
                else:
                    v = update_cols(u, v, obs, lam)
                worst_res = max(worst_res, normal_residual(u, v, obs, lam, side))
                cur = energy(FactorAssignment(u, v), obs, lam)
                blocks += 1
                increases += cur > prev * (1 + 1e-12)
                prev = cur
        # the runner asserts the same invariant after every half-sweep
        run_descent(truth, obs, DescentConfig(r=3, sweeps=10, seed=s))

    path = str(tmp_path / "ratings.csv")
    _ratings_standin(path)
    triples = ingest_triples(path, "comma", 1, (1, 5))
    rows = compare_descent(triples, rank=3, seed=0, sweeps=20, lam=1.0, holdout_size=1000)
    curve = {name: [r["prediction_error"] for r in rows if r["matrix"] == name] for name in ("data", "iid", "lowrank")}
    low_final = curve["lowrank"][-1]
    iid_min = min(curve["iid"][1:])
    iid_init = curve["iid"][0]
    ok = increases == 0 and worst_res <= 1e-8 and low_final < 0.1 and iid_min >= 0.9 * iid_init
    record(8, ok,
           f"energy increases in {increases}/{blocks} block updates; max normal residual {worst_res:.1e} (<= 1e-8); "
           f"500x500 stand-in: low-rank prediction {low_final:.3f} (< 0.1), iid prediction min {iid_min:.3f} vs "
           f"0.9 * initial {0.9 * iid_init:.3f}, ratings data {curve['data'][0]:.3f} -> {curve['data'][-1]:.3f}")


def test_criterion_9_determinism(tmp_path):
    specs = [ExperimentSpec(n=[300], epsilon=[2.0, 3.0], algorithm="rank1", instances_per_point=3),
             ExperimentSpec(n=[200], r=[2], epsilon=[8.0], algorithm="walkrank", instances_per_point=3),
             ExperimentSpec(n=[100], r=[2], epsilon=[10.0], algorithm="als", factors="uniform",
                            instances_per_point=2, config={"sweeps": 5})]
    same = all(to_csv(run_experiment(s)) == to_csv(run_experiment(s)) == to_csv(run_experiment(s, jobs=2))
               for s in specs)
    outs = []
    for k in range(2):
        out = str(tmp_path / f"run{k}.csv")
        assert cli.main(["--seed", "5", "experiment", "--n", "200", "--r", "2", "--epsilon", "8",
                         "--algorithm", "walkrank", "--instances", "2", "--out", out]) == 0
        outs.append((open(out, "rb").read(), open(out.replace(".csv", ".summary.csv"), "rb").read()))
    same &= outs[0] == outs[1]
    record(9, same, "rank1/walkrank/als specs give byte-identical CSV across repeats and jobs=1 vs 2; "
                    "CLI experiment rows and summary files identical across runs")
