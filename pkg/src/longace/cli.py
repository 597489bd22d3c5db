"""Command-line interface.

Subcommands: generate, tune, train, estimate, bench, report. Configuration
comes from a TOML file (--config); --seed, --out, and --jobs override it.
Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

import argparse
import json
import os
import sys
from dataclasses import asdict

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import bench, datagen, model
from .model import ModelConfig


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def load_config(path):
    if path is None:
        return {}
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def dgp_from_config(cfg, seed=None):
    section = dict(cfg.get("dgp", {}))
    if section.get("kind") == datagen.SEMISYNTHETIC:
        section.setdefault("p", 10)
        section.setdefault("h", 8)
        section.setdefault("noise_a", 0.5)
    if seed is not None:
        section["seed"] = seed
    try:
        return datagen.DGPConfig(**section)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad [dgp] section: {exc}") from None


def model_from_config(cfg, seed=None):
    section = dict(cfg.get("model", {}))
    if seed is not None:
        section["seed"] = seed
    try:
        return ModelConfig(**section)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad [model] section: {exc}") from None


def parse_plan(text, t):
    """Plan notation: 'ones', 'zeros', a range 'K-L', or a 0/1 string."""
    text = text.strip().lower()
    if text == "ones":
        return np.ones(t, dtype=np.int64)
    if text == "zeros":
        return np.zeros(t, dtype=np.int64)
    if "-" in text:
        try:
            k, l = (int(v) for v in text.split("-", 1))
        except ValueError:
            raise UsageError(f"bad plan range {text!r}") from None
        if not 1 <= k <= l <= t:
            raise UsageError(f"plan range {text!r} outside 1..{t}")
        return datagen.plan_from_range(k, l, t)
    if set(text) <= {"0", "1"}:
        if len(text) != t:
            raise UsageError(f"plan bit-string must have length {t}")
        return np.array([int(c) for c in text], dtype=np.int64)
    raise UsageError(f"cannot parse plan {text!r}")


def experiment_from_config(cfg, seed):
    dgp = dgp_from_config(cfg)
    section = cfg.get("bench", {})
    names = section.get("estimators", ["deepace", "iterative_gcomp"])
    option_tables = cfg.get("estimator_options", {})
    estimators = [bench.EstimatorSpec(name=n, options=dict(option_tables.get(n, {}))) for n in names]
    ranges = section.get("setups", bench.DEFAULT_SETUP_RANGES)
    setups = bench.setups_from_ranges([tuple(r) for r in ranges], dgp.t)
    tune_cfg = cfg.get("tune", {})
    try:
        return bench.ExperimentConfig(
            dgp=dgp,
            estimators=estimators,
            setups=setups,
            n_reps=int(section.get("n_reps", 3)),
            jobs=int(section.get("jobs", 1)),
            model=model_from_config(cfg),
            tune_enabled=bool(tune_cfg.get("enabled", False)),
            tune_iters=int(tune_cfg.get("n_iter", 30)),
        )
    except ValueError as exc:
        raise UsageError(f"bad benchmark config: {exc}") from None


def _resolve_jobs(args_jobs, exp_jobs):
    env = os.environ.get("LONGACE_JOBS")
    if env is not None:
        try:
            return max(1, int(env))
        except ValueError:
            raise UsageError(f"LONGACE_JOBS must be an integer, got {env!r}") from None
    if args_jobs is not None:
        return max(1, args_jobs)
    return exp_jobs


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate(args):
    cfg = load_config(args.config)
    dgp = dgp_from_config(cfg, seed=args.seed)
    dataset = datagen.generate(dgp)
    out_dir = args.out or "."
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "data.csv")
    datagen.save_dataset(dataset, path)
    print(f"wrote {path} ({dataset.n} patients x {dataset.t} steps x {dataset.p} covariates)")
    return 0


def cmd_tune(args):
    cfg = load_config(args.config)
    dataset = datagen.load_dataset(args.data)
    plan = parse_plan(args.plan, dataset.t)
    base = model_from_config(cfg)
    best, records = bench.tune(dataset, plan, base, n_iter=args.n_iter, seed=args.seed or 0)
    payload = {"best": asdict(best), "trials": records}
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=1)
    print(json.dumps(asdict(best)))
    return 0


def cmd_train(args):
    cfg = load_config(args.config)
    dataset = datagen.load_dataset(args.data)
    plan = parse_plan(args.plan, dataset.t)
    config = model_from_config(cfg, seed=args.seed)
    fitted = model.train(dataset, plan, config)
    model.save_model(fitted, args.out)
    print(f"wrote {args.out} (final loss {fitted.trace.losses[-1]:.6f})")
    return 0


def cmd_estimate(args):
    dataset = datagen.load_dataset(args.data)
    fit_a = model.load_model(args.model_a)
    fit_b = model.load_model(args.model_b)
    estimate = model.estimate_ace(fit_a, fit_b, dataset)
    if args.mc_dropout:
        samples = model.mc_dropout_estimates(
            fit_a, fit_b, dataset, args.mc_dropout, seed=args.seed or 0
        )
        estimate.mc_samples = [float(v) for v in samples]
    payload = asdict(estimate)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=1)
    print(json.dumps(payload))
    return 0


def cmd_bench(args):
    cfg = load_config(args.config)
    exp = experiment_from_config(cfg, args.seed)
    jobs = _resolve_jobs(args.jobs, exp.jobs)
    report = bench.run_benchmark(exp, master_seed=args.seed or 0, jobs=jobs)
    out_dir = args.out or "."
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "report.json")
    bench.save_report(report, path)
    table_path = os.path.join(out_dir, "report.txt")
    table = bench.format_table(report)
    with open(table_path, "w", encoding="utf-8") as fh:
        fh.write(table + "\n")
    failures = [r for r in report["runs"] if r.get("error")]
    print(table)
    print(f"wrote {path}")
    for r in failures:
        print(f"FAILED {r['estimator']}/{r['setup']}/seed{r['seed']}: {r['error']}", file=sys.stderr)
    return 0


def cmd_report(args):
    report = bench.load_report(args.report)
    recomputed = bench.aggregate(report["runs"])
    stored = {(a["estimator"], a["setup"]): a for a in report["aggregates"]}
    for agg in recomputed:
        key = (agg["estimator"], agg["setup"])
        old = stored.get(key)
        if old is None or abs(old["mean"] - agg["mean"]) > 1e-9 or abs(old["std"] - agg["std"]) > 1e-9:
            print(f"warning: stored aggregate for {key} does not match per-run records", file=sys.stderr)
    print(bench.format_table(report))
    return 0


# ---------------------------------------------------------------------------


def build_parser():
    parser = _Parser(prog="longace", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="TOML configuration file")
        p.add_argument("--seed", type=int, help="master seed")
        p.add_argument("--out", help="output file or directory")
        p.add_argument("--jobs", type=int, help="parallel jobs (env LONGACE_JOBS overrides)")

    p = sub.add_parser("generate", help="generate a dataset with noise records")
    common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("tune", help="random hyperparameter search")
    common(p)
    p.add_argument("--data", required=True, help="dataset CSV")
    p.add_argument("--plan", required=True, help="intervention plan (ones|zeros|K-L|bits)")
    p.add_argument("--n-iter", type=int, default=30)
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("train", help="train one model for one plan")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--plan", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("estimate", help="effect estimate from two trained models")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--model-a", required=True)
    p.add_argument("--model-b", required=True)
    p.add_argument("--mc-dropout", type=int, default=0, help="number of dropout evaluations")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("bench", help="run the benchmark sweep")
    common(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("report", help="print a stored report as a table")
    p.add_argument("report", help="report JSON path")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
