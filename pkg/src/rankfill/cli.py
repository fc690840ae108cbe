"""Command-line interface: ``rankfill <command> [options]``.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import math
import sys

from .als import DescentConfig, run_descent
from .bounds import (BoundInputs, continuous_bound, discrete_alphabet_bound, lower_bound,
                     simplified_bound_for, theorem1_bound, tight_upper_bound)
from .errors import ConfigurationError, RankfillError
from .graph import sample_observations
from .harness import (COLUMNS, COMPARE_COLUMNS, SUMMARY_COLUMNS, ExperimentSpec, compare_descent,
                      emit_triples, ingest_triples, run_experiment, summarize, summary_path,
                      to_csv, to_json, write_text)
from .model import FactorDistribution, distortion_report, generate_instance, rank1_baseline
from .rank1 import complete_rank1, rank1_optimal_distortion
from .walkrank import WalkRankConfig, walkrank_run


class _Parser(argparse.ArgumentParser):
    # usage errors are configuration errors (exit 1), not argparse's default 2
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _common(parser, suppress):
    default = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--seed", type=int, default=default(None), help="base seed (default 0)")
    parser.add_argument("--out", default=default("-"), help="output path, '-' for stdout")
    parser.add_argument("--format", choices=("csv", "json"), default=default("csv"))


def _instance_args(p, epsilon=False):
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--r", type=int, default=1)
    p.add_argument("--factors", default="pm1", help="pm1, ternary, uniform or gridN")
    if epsilon:
        p.add_argument("--epsilon", type=float, default=2.0)


def _triple_args(p):
    p.add_argument("--delimiter", default="comma", help="comma, tab, whitespace or a literal")
    p.add_argument("--base", type=int, default=1, choices=(0, 1))
    p.add_argument("--range", dest="value_range", default=None,
                   help="lo,hi: rescale values from [lo, hi] to [-1, 1]")


def _parse_range(text):
    if text is None:
        return None
    try:
        lo, hi = (float(x) for x in text.split(","))
    except ValueError as exc:
        raise ConfigurationError(f"--range expects lo,hi, got {text!r}") from exc
    return lo, hi


def _emit(args, rows, columns):
    text = to_json(rows, columns) if args.format == "json" else to_csv(rows, columns)
    write_text(text, args.out)


def _seed(args):
    return 0 if args.seed is None else args.seed


# commands ---------------------------------------------------------------------

def cmd_generate(args):
    dist = FactorDistribution.from_name(args.factors)
    truth = generate_instance(args.n, args.alpha, args.r, dist, dist, _seed(args))
    if args.format == "json":
        data = {"n": truth.n, "m": truth.m, "r": truth.r, "alpha": args.alpha, "seed": _seed(args),
                "factors": args.factors, "U": truth.U.tolist(), "V": truth.V.tolist()}
        write_text(json.dumps(data) + "\n", args.out)
        return
    M = truth.M
    lines = [f"# n={truth.n} m={truth.m} r={truth.r} factors={args.factors} seed={_seed(args)}"]
    lines += [f"{i},{a},{float(M[i, a])!r}" for i in range(truth.n) for a in range(truth.m)]
    write_text("\n".join(lines) + "\n", args.out)


def cmd_sample(args):
    dist = FactorDistribution.from_name(args.factors)
    truth = generate_instance(args.n, args.alpha, args.r, dist, dist, _seed(args))
    obs = sample_observations(truth, args.epsilon, _seed(args))
    if args.format == "json":
        data = {"n": obs.n, "m": obs.m, "rows": obs.rows.tolist(), "cols": obs.cols.tolist(),
                "values": obs.values.tolist()}
        write_text(json.dumps(data) + "\n", args.out)
    else:
        write_text(emit_triples(obs, base=0), args.out)


def cmd_complete(args):
    seed = _seed(args)
    truth = None
    if args.input:
        obs = ingest_triples(args.input, args.delimiter, args.base, _parse_range(args.value_range)).observations()
        r = args.r
    else:
        dist = FactorDistribution.from_name(args.factors)
        truth = generate_instance(args.n, args.alpha, args.r, dist, dist, seed)
        obs = sample_observations(truth, args.epsilon, seed)
        r = truth.r
    row = {"algorithm": args.algorithm, "n": obs.n, "m": obs.m, "r": r, "epsilon": obs.epsilon}
    if args.algorithm == "rank1":
        estimate, mask = complete_rank1(obs)
        fit = math.sqrt(float(((estimate.at(obs.rows, obs.cols) - obs.values) ** 2).mean()))
        row.update(fit_error=fit, determined_fraction=mask.fraction())
        if truth is not None:
            rep = distortion_report(truth, estimate, obs)
            row.update(rmse=rep.rmse, prediction_error=rep.prediction_error)
    elif args.algorithm == "walkrank":
        cfg = WalkRankConfig(delta=args.delta, rho=args.rho, max_steps=args.max_steps, seed=seed,
                             walk_rule=args.walk_rule, quantization_step=args.quantization_step)
        if args.quantization_step is None:
            dist = FactorDistribution.from_name(args.factors)
            if dist.is_discrete:
                cfg.alphabet = dist.alphabet
        res = walkrank_run(truth, obs, cfg, r=r)
        rep = res.report
        row.update(rmse=rep.rmse, fit_error=rep.fit_error, prediction_error=rep.prediction_error,
                   steps=rep.steps, final_cost=res.final_cost)
    else:
        _, rep = run_descent(truth, obs, DescentConfig(r=r, lam=args.lam, sweeps=args.sweeps, seed=seed))
        row.update(rmse=rep.rmse, fit_error=rep.fit_error, prediction_error=rep.prediction_error,
                   steps=rep.steps)
    _emit(args, [row], list(row))


def cmd_bounds(args):
    rows = []
    for eps in args.epsilon:
        dist = FactorDistribution.from_name(args.factors)
        disc = dist if dist.is_discrete else None
        inputs = BoundInputs(args.r, eps, args.alpha, args.delta, disc, disc)
        row = {"r": args.r, "epsilon": eps, "alpha": args.alpha, "delta": args.delta,
               "eps_tilde": inputs.eps_tilde, "theorem1": theorem1_bound(inputs).value,
               "continuous": continuous_bound(args.r, inputs.eps_tilde, args.delta).value}
        if disc is not None:
            row["discrete"] = discrete_alphabet_bound(args.r, dist.alphabet.size, inputs.eps_tilde, args.delta)
            row["simplified"] = simplified_bound_for(inputs).value
            row["lower"] = lower_bound(inputs).value
            if args.tight:
                row["tight"] = tight_upper_bound(inputs, seed=_seed(args)).value
        if args.r == 1:
            row["rank1"] = rank1_optimal_distortion(eps, args.alpha, rank1_baseline(dist, dist))
        rows.append(row)
    columns = list(dict.fromkeys(k for row in rows for k in row))
    _emit(args, rows, columns)


def _parse_option(text):
    key, sep, value = text.partition("=")
    if not sep:
        raise ConfigurationError(f"--option expects key=value, got {text!r}")
    try:
        return key, json.loads(value)
    except json.JSONDecodeError:
        return key, value


def cmd_experiment(args):
    data = {}
    if args.config:
        data = ExperimentSpec.from_file(args.config).to_dict()
    overrides = {"n": args.n, "alpha": args.alpha, "r": args.r, "epsilon": args.epsilon,
                 "algorithm": args.algorithm, "factors": args.factors,
                 "instances_per_point": args.instances, "seed_base": args.seed}
    data.update({k: v for k, v in overrides.items() if v is not None})
    if args.option:
        data["config"] = {**data.get("config", {}), **dict(_parse_option(o) for o in args.option)}
    if args.timing:
        data["timing"] = True
    if args.out not in (None, "-"):
        data["output"] = args.out
    spec = ExperimentSpec.from_dict(data)
    rows = run_experiment(spec, jobs=args.jobs)
    out = spec.output or args.out
    _emit(argparse.Namespace(format=args.format, out=out), rows, COLUMNS)
    summary = summarize(rows)
    if args.summary:
        target = args.summary
    elif out not in (None, "-"):
        target = summary_path(out)
    else:
        target = None
    if target:
        _emit(argparse.Namespace(format=args.format, out=target), summary, SUMMARY_COLUMNS)


def cmd_compare(args):
    triples = ingest_triples(args.input, args.delimiter, args.base, _parse_range(args.value_range))
    rows = compare_descent(triples, rank=args.rank, seed=_seed(args), sweeps=args.sweeps,
                           lam=args.lam, holdout_size=args.holdout)
    _emit(args, rows, COMPARE_COLUMNS)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rankfill", description=__doc__.splitlines()[0])
    _common(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    common = _Parser(add_help=False)
    _common(common, suppress=True)

    p = sub.add_parser("generate", parents=[common], help="draw a ground-truth instance")
    _instance_args(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("sample", parents=[common], help="reveal a uniform sample of entries")
    _instance_args(p, epsilon=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("complete", parents=[common], help="complete one instance or triple file")
    _instance_args(p, epsilon=True)
    _triple_args(p)
    p.add_argument("--input", help="triple file (otherwise a synthetic instance is drawn)")
    p.add_argument("--algorithm", choices=("rank1", "walkrank", "als"), default="rank1")
    p.add_argument("--rho", type=float, default=0.1)
    p.add_argument("--delta", type=float, default=0.0)
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--walk-rule", default="minbreak", choices=("minbreak", "uniform"))
    p.add_argument("--quantization-step", type=float, default=None)
    p.add_argument("--lam", type=float, default=None)
    p.add_argument("--sweeps", type=int, default=50)
    p.set_defaults(func=cmd_complete)

    p = sub.add_parser("bounds", parents=[common], help="evaluate the distortion bounds")
    p.add_argument("--r", type=int, default=1)
    p.add_argument("--epsilon", type=float, nargs="+", default=[2.0])
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--delta", type=float, default=0.0)
    p.add_argument("--factors", default="pm1")
    p.add_argument("--tight", action="store_true", help="also run the tight-bound optimizer")
    p.set_defaults(func=cmd_bounds)

    p = sub.add_parser("experiment", parents=[common], help="run a sweep and write rows plus a summary")
    p.add_argument("--config", help="JSON experiment spec; flags below override it")
    p.add_argument("--n", type=int, nargs="+")
    p.add_argument("--alpha", type=float, nargs="+")
    p.add_argument("--r", type=int, nargs="+")
    p.add_argument("--epsilon", type=float, nargs="+")
    p.add_argument("--algorithm", choices=("rank1", "walkrank", "als"))
    p.add_argument("--factors")
    p.add_argument("--instances", type=int)
    p.add_argument("--option", action="append", metavar="KEY=VALUE",
                   help="algorithm option, e.g. rho=0.1 (repeatable)")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--timing", action="store_true", help="fill wall_ms (output no longer reproducible)")
    p.add_argument("--summary", help="summary path (default: next to --out)")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("compare", parents=[common], help="data vs iid vs low-rank descent curves")
    _triple_args(p)
    p.add_argument("--input", required=True)
    p.add_argument("--rank", type=int, default=3)
    p.add_argument("--sweeps", type=int, default=20)
    p.add_argument("--lam", type=float, default=None)
    p.add_argument("--holdout", type=int, default=1000)
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except RankfillError as exc:
        print(f"rankfill: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
