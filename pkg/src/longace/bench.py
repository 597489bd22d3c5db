"""Benchmark harness: estimator sweeps against the simulation oracle.

Runs are independent jobs keyed by (estimator, setup, replicate). Per-run
seeds are derived by hashing the master seed with the run coordinates, so
adding an estimator or setup never shifts the seeds of existing runs, and
every estimator sees the identical dataset for a given (setup, replicate).
"""

import hashlib
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict, replace

import numpy as np

from . import baselines, datagen, model
from .model import ModelConfig

DEFAULT_SETUP_RANGES = [(1, 10), (3, 13), (5, 15)]

ESTIMATORS = (
    "deepace",
    "deepace_notarget",
    "iterative_gcomp",
    "ltmle_glm",
    "msm_ipw",
    "parametric_gformula",
    "oracle",
)


def derive_seed(master, *parts):
    """Stable 63-bit seed from the master seed and string coordinates."""
    text = "|".join([str(int(master))] + [str(p) for p in parts])
    digest = hashlib.sha256(text.encode()).digest()
    return int.from_bytes(digest[:8], "big") >> 1


@dataclass
class SetupSpec:
    name: str
    plan_a: list
    plan_b: list


@dataclass
class EstimatorSpec:
    name: str
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.name not in ESTIMATORS:
            raise ValueError(f"unknown estimator {self.name!r}; known: {ESTIMATORS}")


@dataclass
class ExperimentConfig:
    dgp: datagen.DGPConfig
    estimators: list
    setups: list
    n_reps: int = 3
    jobs: int = 1
    model: ModelConfig = field(default_factory=ModelConfig)
    tune_enabled: bool = False
    tune_iters: int = 30

    def __post_init__(self):
        if not self.estimators or not self.setups or self.n_reps < 1:
            raise ValueError("need at least one estimator, one setup, and one replicate")

    def fingerprint(self):
        payload = {
            "dgp": asdict(self.dgp),
            "estimators": [asdict(e) for e in self.estimators],
            "setups": [asdict(s) for s in self.setups],
            "n_reps": self.n_reps,
            "model": asdict(self.model),
            "tune_enabled": self.tune_enabled,
            "tune_iters": self.tune_iters,
        }
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def setups_from_ranges(ranges, t):
    out = []
    for j, (k, l) in enumerate(ranges, start=1):
        out.append(
            SetupSpec(
                name=f"setup{j}",
                plan_a=[int(v) for v in datagen.plan_from_range(k, l, t)],
                plan_b=[0] * t,
            )
        )
    return out


# ---------------------------------------------------------------------------
# hyperparameter search


def sample_candidates(input_dim, n_iter, rng):
    """Random draws from the tuning grid (hidden multiple of the input
    size, log-uniform learning rate, batch size, dropout)."""
    candidates = []
    for _ in range(n_iter):
        candidates.append(
            {
                "hidden": int(input_dim * rng.choice([1, 2, 3, 4])),
                "lr": float(np.exp(rng.uniform(np.log(1e-4), np.log(1e-3)))),
                "batch_size": int(rng.choice([64, 128])),
                "dropout": float(rng.choice([0.0, 0.1, 0.2, 0.3])),
            }
        )
    return candidates


def validation_mse(fitted, dataset, indices):
    """Factual MSE of the final-step prediction on held-out patients."""
    batch = model.make_batch(dataset, indices, fitted.mu_y, fitted.sigma_y)
    outputs = fitted.net.forward(batch, fitted.plan)
    resid = outputs.q_fact.data[:, -1] - batch.y_final
    return float(np.mean(resid * resid))


def tune(dataset, plan, base_config, n_iter=30, seed=0):
    """Random search over the tuning grid; returns (best config, records).

    Candidates are trained on an 80% split and scored by factual MSE on
    the remaining 20%; ties break toward the earliest candidate. The loss
    weights are never tuned (only factual data is available, so they would
    shrink to zero).
    """
    if n_iter < 1:
        raise ValueError("n_iter must be >= 1")
    rng = np.random.default_rng(derive_seed(seed, "tune"))
    perm = rng.permutation(dataset.n)
    n_train = max(1, int(round(dataset.n * 0.8)))
    if n_train >= dataset.n:
        raise ValueError("dataset too small for an 80/20 split")
    train_idx, val_idx = perm[:n_train], perm[n_train:]
    train_ds = dataset.subset(train_idx)

    val_ds = dataset.subset(val_idx)
    candidates = sample_candidates(dataset.p + 2, n_iter, rng)
    records = []
    best = None
    for i, cand in enumerate(candidates):
        config = replace(base_config, seed=derive_seed(seed, "tune-fit"), **cand)
        fitted = model.train(train_ds, plan, config)
        mse = validation_mse(fitted, val_ds, np.arange(len(val_idx)))
        records.append({"candidate": cand, "val_mse": mse})
        if best is None or mse < best[0]:
            best = (mse, i, config)
    return best[2], records


# ---------------------------------------------------------------------------
# single runs


def _deepace_config(exp, options, run_seed):
    overrides = {k: v for k, v in options.items() if k != "beta_zero"}
    config = replace(exp.model, seed=run_seed, **overrides)
    if options.get("beta_zero"):
        config = replace(config, beta=0.0)
    return config


def run_estimator(name, dataset, plan_a, plan_b, run_seed, psi_true, exp, options=None):
    """Dispatch one estimator on one prepared dataset; returns psi_hat."""
    options = options or {}
    if name in ("deepace", "deepace_notarget"):
        if name == "deepace_notarget":
            options = dict(options, beta_zero=True)
        config = _deepace_config(exp, options, run_seed)
        fit_a = model.train(dataset, plan_a, config)
        fit_b = model.train(dataset, plan_b, replace(config, seed=derive_seed(run_seed, "b")))
        return model.estimate_ace(fit_a, fit_b, dataset).psi
    if name == "iterative_gcomp":
        spec = baselines.RegressorSpec(**options)
        ta = baselines.iterative_gcomp(dataset, plan_a, spec).theta
        tb = baselines.iterative_gcomp(dataset, plan_b, spec).theta
        return ta - tb
    if name == "ltmle_glm":
        spec = baselines.RegressorSpec(**options)
        props = baselines.fit_propensities(dataset, spec.lam)
        ta = baselines.ltmle_glm(dataset, plan_a, spec, propensities=props).theta
        tb = baselines.ltmle_glm(dataset, plan_b, spec, propensities=props).theta
        return ta - tb
    if name == "msm_ipw":
        return baselines.msm_ipw(dataset, plan_a, plan_b, **options).psi
    if name == "parametric_gformula":
        n_mc = int(options.get("n_mc", 100))
        ta = baselines.parametric_gformula(dataset, plan_a, n_mc, seed=derive_seed(run_seed, "mc")).theta
        tb = baselines.parametric_gformula(dataset, plan_b, n_mc, seed=derive_seed(run_seed, "mc")).theta
        return ta - tb
    if name == "oracle":
        return psi_true
    raise ValueError(f"unknown estimator {name!r}")


def _run_task(task):
    """One (estimator, setup, replicate) job; never raises."""
    exp = ExperimentConfig(
        dgp=datagen.DGPConfig(**task["dgp"]),
        estimators=[EstimatorSpec(**e) for e in task["estimators"]],
        setups=[SetupSpec(**s) for s in task["setups"]],
        n_reps=task["n_reps"],
        model=ModelConfig(**task["model"]),
    )
    est = EstimatorSpec(**task["estimator"])
    setup = SetupSpec(**task["setup"])
    rep = task["rep"]
    master = task["master_seed"]

    record = {
        "estimator": est.name,
        "setup": setup.name,
        "seed": rep,
        "psi_hat": None,
        "psi_true": None,
        "abs_err": None,
        "wall_ms": 0.0,
        "error": None,
    }
    start = time.perf_counter()
    try:
        data_seed = derive_seed(master, "dataset", setup.name, rep)
        dataset = datagen.generate(replace(exp.dgp, seed=data_seed))
        psi_true = datagen.ground_truth_ace(dataset, setup.plan_a, setup.plan_b)
        run_seed = derive_seed(master, est.name, setup.name, rep)
        psi_hat = run_estimator(
            est.name, dataset, setup.plan_a, setup.plan_b, run_seed, psi_true, exp, est.options
        )
        record["psi_true"] = psi_true
        record["psi_hat"] = float(psi_hat)
        record["abs_err"] = abs(float(psi_hat) - psi_true)
    except Exception as exc:  # isolation: a failed run must not sink the sweep
        record["error"] = f"{type(exc).__name__}: {exc}"
    record["wall_ms"] = (time.perf_counter() - start) * 1000.0
    return record


# ---------------------------------------------------------------------------
# sweep, aggregation, reporting


def aggregate(runs):
    """Mean/std (sample convention) of abs_err per (estimator, setup)."""
    grouped = {}
    for run in runs:
        if run.get("error") is not None:
            continue
        grouped.setdefault((run["estimator"], run["setup"]), []).append(run["abs_err"])
    out = []
    for (est, setup), errs in sorted(grouped.items()):
        n = len(errs)
        mu = math.fsum(errs) / n
        sd = math.sqrt(math.fsum((e - mu) ** 2 for e in errs) / (n - 1)) if n > 1 else 0.0
        out.append({"estimator": est, "setup": setup, "mean": mu, "std": sd, "n": n})
    return out


def run_benchmark(exp, master_seed, jobs=None):
    """Execute the full sweep; returns the report dict."""
    jobs = jobs if jobs is not None else exp.jobs
    exp_for_run = exp
    if exp.tune_enabled:
        tuned = _tune_model_config(exp, master_seed)
        exp_for_run = replace(exp, model=tuned)

    base = {
        "dgp": asdict(exp_for_run.dgp),
        "estimators": [asdict(e) for e in exp_for_run.estimators],
        "setups": [asdict(s) for s in exp_for_run.setups],
        "n_reps": exp_for_run.n_reps,
        "model": asdict(exp_for_run.model),
        "master_seed": master_seed,
    }
    tasks = []
    for est in exp_for_run.estimators:
        for setup in exp_for_run.setups:
            for rep in range(exp_for_run.n_reps):
                tasks.append(
                    dict(base, estimator=asdict(est), setup=asdict(setup), rep=rep)
                )

    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            runs = list(pool.map(_run_task, tasks))
    else:
        runs = [_run_task(t) for t in tasks]

    order = {e.name: i for i, e in enumerate(exp_for_run.estimators)}
    runs.sort(key=lambda r: (order[r["estimator"]], r["setup"], r["seed"]))
    return {
        "config_fingerprint": exp.fingerprint(),
        "master_seed": master_seed,
        "created_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "estimator_order": [e.name for e in exp_for_run.estimators],
        "runs": runs,
        "aggregates": aggregate(runs),
    }


def _tune_model_config(exp, master_seed):
    """Tune once on the first setup's replicate-0 dataset and reuse."""
    setup = exp.setups[0]
    data_seed = derive_seed(master_seed, "dataset", setup.name, 0)
    dataset = datagen.generate(replace(exp.dgp, seed=data_seed))
    best, _ = tune(
        dataset, setup.plan_a, exp.model, n_iter=exp.tune_iters, seed=derive_seed(master_seed, "tune")
    )
    return best


def strip_volatile(report):
    """Copy of a report without timestamps and wall-clock timings."""
    out = {k: v for k, v in report.items() if k != "created_at"}
    out["runs"] = [{k: v for k, v in run.items() if k != "wall_ms"} for run in report["runs"]]
    return out


def save_report(report, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, sort_keys=True, indent=1)


def load_report(path):
    with open(path, "r", encoding="utf-8") as fh:
        report = json.load(fh)
    if "runs" not in report or "aggregates" not in report:
        raise ValueError(f"{path}: not a benchmark report")
    return report


def format_table(report):
    """Aligned grid of mean +- std cells, best per setup flagged with *."""
    aggs = {(a["estimator"], a["setup"]): a for a in report["aggregates"]}
    setups = sorted({a["setup"] for a in report["aggregates"]})
    estimators = report.get("estimator_order") or sorted({a["estimator"] for a in report["aggregates"]})
    best = {}
    for s in setups:
        means = [(aggs[(e, s)]["mean"], e) for e in estimators if (e, s) in aggs]
        if means:
            best[s] = min(means)[1]

    def cell(e, s):
        a = aggs.get((e, s))
        if a is None:
            return "-"
        flag = " *" if best.get(s) == e else ""
        return f"{a['mean']:.3f} ± {a['std']:.3f}{flag}"

    rows = [["estimator"] + setups]
    for e in estimators:
        rows.append([e] + [cell(e, s) for s in setups])
    widths = [max(len(r[c]) for r in rows) for c in range(len(rows[0]))]
    lines = []
    for i, row in enumerate(rows):
        lines.append("  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip())
        if i == 0:
            lines.append("-" * (sum(widths) + 2 * (len(widths) - 1)))
    return "\n".join(lines)
