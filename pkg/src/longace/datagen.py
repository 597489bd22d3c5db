"""Synthetic and semi-synthetic trajectory generators with a paired
counterfactual oracle.

Every random draw (noise and per-patient process weights) is recorded, so
the exact ground-truth effect of a treatment plan is obtained by re-running
the same recursion with treatments forced and noise replayed. Re-simulating
under the factually observed treatments reproduces the observed data
bit-exactly.

Conventions shared by generator and oracle:
  * lag terms referencing time < 1 are dropped from sums; inside the
    covariate product they make the product zero,
  * the scalar reduction of a covariate vector is its mean over components,
  * the lagged outcome at step 1 is 0,
  * the tan() argument is clamped to (-pi/2 + 0.05, pi/2 - 0.05).
"""

import hashlib
import json
import math
from dataclasses import dataclass, asdict, replace

import numpy as np

TAN_CLAMP = math.pi / 2 - 0.05

SYNTHETIC = "synthetic"
SEMISYNTHETIC = "semisynthetic"


class DatasetFormatError(ValueError):
    """Raised when a persisted dataset fails to parse or validate."""


@dataclass(frozen=True)
class DGPConfig:
    n: int = 1000
    t: int = 15
    p: int = 6
    h: int = 5
    kind: str = SYNTHETIC
    noise_x: float = 0.1
    noise_a: float = 0.2
    noise_y: float = 0.1
    seed: int = 0
    # test-support switches: identity instead of tanh/tan, coin-flip
    # treatments, or a severed treatment->covariate/outcome channel
    linear: bool = False
    randomized: bool = False
    sever_treatment: bool = False

    def __post_init__(self):
        if self.n < 1 or self.t < 1 or self.p < 1 or self.h < 1:
            raise ValueError(f"invalid dimensions in {self}")
        if self.kind not in (SYNTHETIC, SEMISYNTHETIC):
            raise ValueError(f"unknown DGP kind {self.kind!r}")


def semisynthetic_config(**kwargs):
    """Semi-synthetic defaults: 10 covariates, wider treatment noise."""
    base = dict(kind=SEMISYNTHETIC, p=10, h=8, noise_a=0.5)
    base.update(kwargs)
    return DGPConfig(**base)


@dataclass
class NoiseRecord:
    """All randomness behind one trajectory."""

    eps_x: np.ndarray  # (T, p)
    eps_a: np.ndarray  # (T,)
    eps_y: np.ndarray  # (T,)
    alpha: np.ndarray  # (h,) covariate autoregression weights
    beta: np.ndarray  # (h,) treatment->covariate weights
    gamma: np.ndarray  # (h,) random +-1 signs
    w: np.ndarray  # (h,) treatment->outcome weights


@dataclass
class NoiseBank:
    """Struct-of-arrays noise store for a whole dataset."""

    eps_x: np.ndarray  # (N, T, p)
    eps_a: np.ndarray  # (N, T)
    eps_y: np.ndarray  # (N, T)
    alpha: np.ndarray  # (N, h)
    beta: np.ndarray  # (N, h)
    gamma: np.ndarray  # (N, h)
    w: np.ndarray  # (N, h)

    def record(self, i):
        return NoiseRecord(
            eps_x=self.eps_x[i],
            eps_a=self.eps_a[i],
            eps_y=self.eps_y[i],
            alpha=self.alpha[i],
            beta=self.beta[i],
            gamma=self.gamma[i],
            w=self.w[i],
        )


@dataclass
class Trajectory:
    pid: int
    x: np.ndarray  # (T, p)
    a: np.ndarray  # (T,)
    y_next: np.ndarray  # (T,) outcome observed after each step

    def __post_init__(self):
        t = self.x.shape[0]
        if self.a.shape != (t,) or self.y_next.shape != (t,):
            raise ValueError("inconsistent trajectory lengths")
        if not np.isin(self.a, (0, 1)).all():
            raise ValueError("non-binary treatment")


@dataclass
class Dataset:
    x: np.ndarray  # (N, T, p)
    a: np.ndarray  # (N, T) binary
    y: np.ndarray  # (N, T); y[:, t-1] is the outcome observed after step t
    ids: np.ndarray  # (N,)
    config: DGPConfig | None = None
    noise: NoiseBank | None = None
    true_prob: np.ndarray | None = None  # (N, T) oracle P(A_t=1 | history)

    @property
    def n(self):
        return self.x.shape[0]

    @property
    def t(self):
        return self.x.shape[1]

    @property
    def p(self):
        return self.x.shape[2]

    def trajectory(self, i):
        return Trajectory(pid=int(self.ids[i]), x=self.x[i], a=self.a[i], y_next=self.y[i])

    def y_lag(self):
        """Lagged outcomes: the outcome known at each step (0 at step 1)."""
        out = np.zeros_like(self.y)
        out[:, 1:] = self.y[:, :-1]
        return out

    def subset(self, indices):
        """View of the selected patients (noise sliced along, if present)."""
        indices = np.asarray(indices)
        noise = None
        if self.noise is not None:
            b = self.noise
            noise = NoiseBank(
                eps_x=b.eps_x[indices],
                eps_a=b.eps_a[indices],
                eps_y=b.eps_y[indices],
                alpha=b.alpha[indices],
                beta=b.beta[indices],
                gamma=b.gamma[indices],
                w=b.w[indices],
            )
        config = replace(self.config, n=len(indices)) if self.config is not None else None
        return Dataset(
            x=self.x[indices],
            a=self.a[indices],
            y=self.y[indices],
            ids=self.ids[indices],
            config=config,
            noise=noise,
            true_prob=self.true_prob[indices] if self.true_prob is not None else None,
        )

    def fingerprint(self):
        hasher = hashlib.sha256()
        cfg = asdict(self.config) if self.config is not None else None
        hasher.update(json.dumps(cfg, sort_keys=True).encode())
        for arr in (self.x, self.a.astype(np.int64), self.y):
            hasher.update(np.ascontiguousarray(arr).tobytes())
        return hasher.hexdigest()

    def validate(self):
        if self.x.ndim != 3:
            raise ValueError("x must be (N, T, p)")
        n, t, _ = self.x.shape
        if self.a.shape != (n, t) or self.y.shape != (n, t):
            raise ValueError("inconsistent panel shapes")
        if not np.isin(self.a, (0, 1)).all():
            raise ValueError("non-binary treatment")
        return self


def as_plan(plan, t):
    """Validate a binary intervention plan of length t."""
    arr = np.asarray(plan, dtype=np.int64)
    if arr.shape != (t,):
        raise ValueError(f"plan must have length {t}, got shape {arr.shape}")
    if not np.isin(arr, (0, 1)).all():
        raise ValueError("plan entries must be binary")
    return arr


def plan_from_range(k, l, t):
    """Indicator plan: treat exactly on steps k..l (1-based, inclusive)."""
    steps = np.arange(1, t + 1)
    return ((steps >= k) & (steps <= l)).astype(np.int64)


def intervention_grid(t):
    """The three benchmark setups: each pairs a range plan against the
    zero plan, with (start, end) in ((1,10), (3,13), (5,15))."""
    pairs = [(1, 10), (3, 13), (5, 15)]
    if t < max(l for _, l in pairs):
        raise ValueError(f"grid requires t >= 15, got {t}")
    zero = np.zeros(t, dtype=np.int64)
    return [(plan_from_range(k, l, t), zero.copy()) for k, l in pairs]


# ---------------------------------------------------------------------------
# simulation


def _draw_noise(config):
    """Noise and process weights behind one dataset.

    The autoregression weights are drawn once per dataset (a new draw per
    seed) and shared by all patients; every NoiseRecord carries a copy.
    Noise paths come from independently spawned per-patient streams.
    """
    n, t, p, h = config.n, config.t, config.p, config.h
    root = np.random.SeedSequence(config.seed)
    lags = np.arange(1, h + 1)
    weight_rng = np.random.default_rng(root)
    alpha_row = weight_rng.normal(1.0 / (lags + 1), 0.02)
    beta_row = weight_rng.normal(1.0 / (lags + 1), 0.02)
    gamma_row = weight_rng.integers(0, 2, size=h) * 2 - 1

    eps_x = np.empty((n, t, p))
    eps_a = np.empty((n, t))
    eps_y = np.empty((n, t))
    for i, stream in enumerate(root.spawn(n)):
        rng = np.random.default_rng(stream)
        eps_x[i] = rng.normal(0.0, config.noise_x, size=(t, p))
        eps_a[i] = rng.normal(0.0, config.noise_a, size=t)
        eps_y[i] = rng.normal(0.0, config.noise_y, size=t)

    alpha = np.tile(alpha_row, (n, 1))
    beta = np.tile(beta_row, (n, 1)).copy()
    gamma = np.tile(gamma_row.astype(np.float64), (n, 1))
    if config.kind == SYNTHETIC:
        w = np.tile((-1.0) ** (lags + 1) / lags, (n, 1))
    else:
        # the published coefficient (-1)^i/(1-i) is undefined at i=1; we use
        # the matching-decay substitute (-1)^i/(1+i)
        w = np.tile((-1.0) ** lags / (lags + 1), (n, 1))
    if config.sever_treatment:
        beta[:] = 0.0
        w[:] = 0.0
    return NoiseBank(eps_x=eps_x, eps_a=eps_a, eps_y=eps_y, alpha=alpha, beta=beta, gamma=gamma, w=w)


_erf = np.vectorize(math.erf)


def _norm_cdf(z):
    return 0.5 * (1.0 + _erf(z / math.sqrt(2.0)))


def _forced_at(forced, ti, n):
    if forced.ndim == 1:
        return np.broadcast_to(forced[ti], (n,)).astype(np.int64)
    return forced[:, ti].astype(np.int64)


def _simulate(config, bank, forced=None):
    """Run the generating recursion; returns (x, a, y, true_prob).

    `forced` overrides the treatment mechanism: either a (T,) plan applied
    to every patient or an (N, T) per-patient assignment. Noise is replayed
    from `bank`, so identical inputs give identical outputs bit for bit.
    """
    n, t_max, p, h = config.n, config.t, config.p, config.h
    sig_a = config.noise_a
    x = np.zeros((n, t_max, p))
    a = np.zeros((n, t_max), dtype=np.int64)
    y = np.zeros((n, t_max))
    xbar = np.zeros((n, t_max))
    true_prob = np.zeros((n, t_max))
    semi = config.kind == SEMISYNTHETIC
    level = np.full(n, t_max / 2.0) if semi else None
    y_lag = np.zeros(n)

    for t in range(1, t_max + 1):
        ti = t - 1
        # covariates
        s = bank.eps_x[:, ti, :].copy()
        for i in range(1, min(h, t - 1) + 1):
            past = t - i - 1
            s += bank.alpha[:, i - 1, None] * x[:, past, :]
            s += (bank.beta[:, i - 1] * bank.gamma[:, i - 1] * (2.0 * a[:, past] - 1.0))[:, None]
        x[:, ti, :] = s if config.linear else np.tanh(s)
        xbar[:, ti] = x[:, ti, :].mean(axis=1)

        # treatment
        if config.randomized:
            z = np.zeros(n)
        elif semi:
            z = np.zeros(n)
            for i in range(1, min(h, t - 1) + 1):
                past = t - i - 1
                past_y = y[:, past - 1] if past >= 1 else np.zeros(n)
                z += bank.w[:, i - 1] * (xbar[:, past] + np.tanh(past_y))
            z -= np.tanh(level - t_max / 2.0)
        else:
            if t - 1 >= h:
                prod = np.prod([xbar[:, t - i - 1] for i in range(1, h + 1)], axis=0)
            else:
                prod = np.zeros(n)  # an out-of-range factor zeroes the product
            arg = np.clip(prod, -TAN_CLAMP, TAN_CLAMP)
            z = (arg if config.linear else np.tan(arg)) + y_lag / p
        pi = 1.0 / (1.0 + np.exp(-(z + bank.eps_a[:, ti])))
        true_prob[:, ti] = _norm_cdf(z / sig_a)
        if forced is not None:
            a[:, ti] = _forced_at(forced, ti, n)
        else:
            a[:, ti] = (pi > 0.5).astype(np.int64)

        # level update and outcome
        if semi:
            level = level + 2.0 * (a[:, ti] - 1.0) * xbar[:, ti] * np.tanh(y_lag)
            out = np.zeros(n)
            for i in range(1, min(h, t - 1) + 1):
                past = t - i - 1
                xa = xbar[:, past] * a[:, past]
                out += bank.w[:, i - 1] * np.tanh(np.sin(xa) + np.cos(xa))
            y[:, ti] = 5.0 * out + bank.eps_y[:, ti]
        else:
            out = xbar[:, ti].copy()
            for i in range(1, min(h, t) + 1):
                out += bank.w[:, i - 1] * (2.0 * a[:, t - i] - 1.0)
            y[:, ti] = out + bank.eps_y[:, ti]
        y_lag = y[:, ti]

    return x, a, y, true_prob


def generate(config):
    """Generate a dataset with noise records and oracle propensities."""
    bank = _draw_noise(config)
    x, a, y, true_prob = _simulate(config, bank)
    return Dataset(
        x=x,
        a=a,
        y=y,
        ids=np.arange(config.n, dtype=np.int64),
        config=config,
        noise=bank,
        true_prob=true_prob,
    ).validate()


def gen_synthetic(config):
    if config.kind != SYNTHETIC:
        raise ValueError(f"expected synthetic config, got kind {config.kind!r}")
    return generate(config)


def gen_semisynthetic(config):
    if config.kind != SEMISYNTHETIC:
        raise ValueError(f"expected semisynthetic config, got kind {config.kind!r}")
    return generate(config)


def counterfactual_outcomes(dataset, plan):
    """Final outcomes Y_{T+1} under a forced plan, replaying the noise."""
    if dataset.noise is None or dataset.config is None:
        raise ValueError("counterfactual re-simulation needs noise records")
    plan = as_plan(plan, dataset.t)
    _, _, y, _ = _simulate(dataset.config, dataset.noise, forced=plan)
    return y[:, -1]


def resimulate_factual(dataset):
    """Re-run the recursion with the observed treatments forced."""
    if dataset.noise is None or dataset.config is None:
        raise ValueError("re-simulation needs noise records")
    x, a, y, _ = _simulate(dataset.config, dataset.noise, forced=dataset.a)
    return x, a, y


def ground_truth_ace(dataset, plan_a, plan_b):
    """Exact effect of plan_a vs plan_b: mean paired difference of the
    re-simulated final outcomes over the dataset's own noise draws."""
    ya = counterfactual_outcomes(dataset, plan_a)
    yb = counterfactual_outcomes(dataset, plan_b)
    return float(np.mean(ya - yb))


# ---------------------------------------------------------------------------
# persistence

_SIDECAR_SUFFIX = ".noise.json"


def _sidecar_path(path):
    path = str(path)
    base = path[:-4] if path.endswith(".csv") else path
    return base + _SIDECAR_SUFFIX


def save_dataset(dataset, path):
    """Write the panel CSV plus a noise/config sidecar next to it.

    CSV schema: header ``id,t,x1..xp,a,y_next``, one row per (patient,
    step), floats with 17 significant digits, LF line endings.
    """
    dataset.validate()
    path = str(path)
    cols = ["id", "t"] + [f"x{j + 1}" for j in range(dataset.p)] + ["a", "y_next"]
    lines = [",".join(cols)]
    for i in range(dataset.n):
        pid = int(dataset.ids[i])
        for t in range(dataset.t):
            vals = [str(pid), str(t + 1)]
            vals += [f"{v:.17g}" for v in dataset.x[i, t]]
            vals.append(str(int(dataset.a[i, t])))
            vals.append(f"{dataset.y[i, t]:.17g}")
            lines.append(",".join(vals))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")

    sidecar = {
        "config": asdict(dataset.config) if dataset.config is not None else None,
        "true_prob": dataset.true_prob.tolist() if dataset.true_prob is not None else None,
        "noise": None,
    }
    if dataset.noise is not None:
        b = dataset.noise
        sidecar["noise"] = {
            "eps_x": b.eps_x.tolist(),
            "eps_a": b.eps_a.tolist(),
            "eps_y": b.eps_y.tolist(),
            "alpha": b.alpha.tolist(),
            "beta": b.beta.tolist(),
            "gamma": b.gamma.tolist(),
            "w": b.w.tolist(),
        }
    with open(_sidecar_path(path), "w", encoding="utf-8", newline="\n") as fh:
        json.dump(sidecar, fh)


def load_dataset(path):
    """Load a dataset CSV (and its sidecar, when present)."""
    path = str(path)
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DatasetFormatError(f"{path}: empty file")
    header = lines[0].split(",")
    if header[:2] != ["id", "t"] or header[-2:] != ["a", "y_next"]:
        raise DatasetFormatError(f"{path}: line 1: unexpected header {lines[0]!r}")
    p = len(header) - 4

    rows = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != len(header):
            raise DatasetFormatError(f"{path}: line {lineno}: expected {len(header)} fields")
        try:
            pid = int(parts[0])
            t = int(parts[1])
            xs = [float(v) for v in parts[2 : 2 + p]]
            a = int(parts[2 + p])
            y = float(parts[3 + p])
        except ValueError as exc:
            raise DatasetFormatError(f"{path}: line {lineno}: {exc}") from None
        if a not in (0, 1):
            raise DatasetFormatError(f"{path}: line {lineno}: non-binary treatment {a}")
        rows.setdefault(pid, []).append((t, xs, a, y))

    if not rows:
        raise DatasetFormatError(f"{path}: no data rows")
    ids = sorted(rows)
    t_max = len(rows[ids[0]])
    x = np.zeros((len(ids), t_max, p))
    a_arr = np.zeros((len(ids), t_max), dtype=np.int64)
    y_arr = np.zeros((len(ids), t_max))
    for i, pid in enumerate(ids):
        entries = sorted(rows[pid])
        if len(entries) != t_max or [e[0] for e in entries] != list(range(1, t_max + 1)):
            raise DatasetFormatError(f"{path}: patient {pid}: inconsistent time steps")
        for t, xs, a, y in entries:
            x[i, t - 1] = xs
            a_arr[i, t - 1] = a
            y_arr[i, t - 1] = y

    config = None
    noise = None
    true_prob = None
    try:
        with open(_sidecar_path(path), "r", encoding="utf-8") as fh:
            sidecar = json.load(fh)
    except FileNotFoundError:
        sidecar = None
    if sidecar is not None:
        if sidecar.get("config") is not None:
            config = DGPConfig(**sidecar["config"])
        if sidecar.get("true_prob") is not None:
            true_prob = np.asarray(sidecar["true_prob"])
        if sidecar.get("noise") is not None:
            raw = sidecar["noise"]
            noise = NoiseBank(
                eps_x=np.asarray(raw["eps_x"]),
                eps_a=np.asarray(raw["eps_a"]),
                eps_y=np.asarray(raw["eps_y"]),
                alpha=np.asarray(raw["alpha"]),
                beta=np.asarray(raw["beta"]),
                gamma=np.asarray(raw["gamma"]),
                w=np.asarray(raw["w"]),
            )

    return Dataset(
        x=x,
        a=a_arr,
        y=y_arr,
        ids=np.asarray(ids, dtype=np.int64),
        config=config,
        noise=noise,
        true_prob=true_prob,
    ).validate()
