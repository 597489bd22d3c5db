"""End-to-end recurrent estimator of expected potential outcomes.

One shared LSTM consumes each trajectory twice, once with the observed
treatments and once with the intervention plan. Per-step feed-forward heads
produce factual and counterfactual outcome regressions plus propensity
scores. A single extra scalar parameter perturbs the counterfactual outputs
along inverse-propensity directions; with the targeting penalty in the
joint loss, the derivative of the loss in that parameter equals (up to the
beta/T factor) the empirical mean of the efficient influence function, so
driving the loss to a stationary point solves the efficient estimating
equation.

Two fitted models (one per treatment plan) give the effect estimate as the
difference of their mean targeted first-step outputs.
"""

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from . import nn

G_CLIP = (0.01, 0.99)

CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    """Training hyperparameters. `hidden=0` resolves to 3x the network
    input size (covariates + lagged outcome + previous treatment)."""

    hidden: int = 0
    lr: float = 1e-3
    batch_size: int = 64
    dropout: float = 0.1
    alpha: float = 0.1
    beta: float = 0.05
    epochs: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights must be non-negative")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    def resolve_hidden(self, input_dim):
        return self.hidden if self.hidden > 0 else 3 * input_dim


@dataclass
class Batch:
    """Standardized slice of a dataset as the network consumes it."""

    x: np.ndarray  # (B, T, p) covariates
    y_lag: np.ndarray  # (B, T) standardized lagged outcomes
    y_final: np.ndarray  # (B,) standardized outcome after the last step
    a: np.ndarray  # (B, T) observed treatments

    @property
    def size(self):
        return self.x.shape[0]

    @property
    def t(self):
        return self.x.shape[1]


@dataclass
class ForwardOutputs:
    """Stacked per-step network outputs for one batch (graph tensors).

    Column j of each (B, T) tensor belongs to head j+1, so `q_fact[:, j]`
    estimates the outcome regression at time j+2. `q_tilde` carries the
    targeted counterfactual outputs for the same columns; the value at the
    horizon boundary is the observed final outcome by convention.
    """

    q_fact: object  # (B, T) factual regressions, times 2..T+1
    q_cf: object  # (B, T) counterfactual regressions (live copies)
    q_cf_blocked: object  # stop-gradient copy used as regression targets
    g: object  # (B, T) clipped propensities, times 1..T
    cum: object  # (B, T); cum[:, j] = prod_{l<=j+1} 1(A_l = a_l) / g_l
    q_pert: object  # (B, T) perturbation values q_t, times 2..T+1
    q_tilde: object  # (B, T) targeted outputs, times 2..T+1
    y_final: np.ndarray  # standardized final outcomes (= Q~ at T+2)
    indicators: np.ndarray  # (B, T) plan-compliance indicators

    def q_tilde_values(self):
        """Targeted outputs as an array of shape (B, T+1): columns are the
        times 2..T+2, the last one being the observed final outcome."""
        return np.concatenate([self.q_tilde.data, self.y_final[:, None]], axis=1)

    def cum_values(self):
        return self.cum.data


class DeepAce:
    """Parameter container plus forward/loss graph builders."""

    def __init__(self, n_cov, t, config, rng):
        self.n_cov = n_cov
        self.t = t
        self.config = config
        self.input_dim = n_cov + 2  # covariates, lagged outcome, previous treatment
        self.hidden = config.resolve_hidden(self.input_dim)
        params = {}
        for name, tensor in nn.init_lstm(rng, self.input_dim, self.hidden).items():
            params[f"lstm.{name}"] = tensor
        for step in range(1, t + 1):
            for name, tensor in nn.init_head(rng, self.hidden + 1, self.hidden).items():
                params[f"q{step}.{name}"] = tensor
            for name, tensor in nn.init_head(rng, self.hidden, self.hidden).items():
                params[f"g{step}.{name}"] = tensor
        params["eps"] = ad.parameter(0.0)
        self.params = params

    def _head(self, prefix, step):
        return {k: self.params[f"{prefix}{step}.{k}"] for k in ("W1", "b1", "W2", "b2")}

    def _lstm_params(self):
        return {k.split(".", 1)[1]: v for k, v in self.params.items() if k.startswith("lstm.")}

    def forward(self, batch, plan, dropout_plan=None):
        """Both forward passes plus the targeting recursion.

        The factual and counterfactual passes ride through the LSTM as one
        row-stacked batch (rows 0..B-1 factual, B..2B-1 counterfactual);
        they share weights and, per trajectory, dropout masks.
        """
        b, t_max = batch.size, batch.t
        plan = np.asarray(plan, dtype=np.int64)
        if plan.shape != (t_max,):
            raise ValueError(f"plan length {plan.shape} does not match T={t_max}")

        plan_rows = np.broadcast_to(plan, (b, t_max))
        if dropout_plan is None:
            stacked_drop = nn.DropoutPlan(rate=0.0, x_mask=None, h_mask=None)
        else:
            stacked_drop = nn.DropoutPlan(
                rate=dropout_plan.rate,
                x_mask=np.vstack([dropout_plan.x_mask, dropout_plan.x_mask]),
                h_mask=np.vstack([dropout_plan.h_mask, dropout_plan.h_mask]),
            )

        lstm = self._lstm_params()
        h = ad.constant(np.zeros((2 * b, self.hidden)))
        c = ad.constant(np.zeros((2 * b, self.hidden)))
        q_fact_cols, q_cf_cols, g_cols = [], [], []
        for t in range(t_max):
            if t == 0:
                prev = np.zeros((2 * b, 1))
            else:
                prev = np.concatenate([batch.a[:, t - 1], plan_rows[:, t - 1]])[:, None].astype(
                    np.float64
                )
            x_t = np.concatenate([batch.x[:, t, :], batch.y_lag[:, t : t + 1]], axis=1)
            h, c = nn.lstm_cell(
                ad.constant(np.concatenate([np.vstack([x_t, x_t]), prev], axis=1)),
                h,
                c,
                lstm,
                stacked_drop,
            )
            treat_col = ad.constant(
                np.concatenate([batch.a[:, t], plan_rows[:, t]])[:, None].astype(np.float64)
            )
            q_both = nn.head_forward(self._head("q", t + 1), ad.concat([h, treat_col]))
            q_fact_cols.append(ad.slice_rows(q_both, 0, b))
            q_cf_cols.append(ad.slice_rows(q_both, b, 2 * b))
            g_raw = ad.sigmoid(nn.head_forward(self._head("g", t + 1), ad.slice_rows(h, 0, b)))
            g_cols.append(ad.clip(g_raw, *G_CLIP))

        q_fact = ad.stack_cols(q_fact_cols)
        q_cf = ad.stack_cols(q_cf_cols)
        g = ad.stack_cols(g_cols)
        if not ((g.data > 0.0).all() and (g.data < 1.0).all()):
            raise ad.NumericError("propensity outside (0,1) after clipping")

        # inverse-propensity products over plan-compliant prefixes: the
        # binary indicators are constants, so the product factors through
        # a cumulative product of 1/g and a 0/1 prefix mask
        indicators = (batch.a == plan_rows).astype(np.float64)
        prefix = np.cumprod(indicators, axis=1)
        plan_const = ad.constant(plan_rows.astype(np.float64))
        g_plan = plan_const * g + (1.0 - plan_const) * (1.0 - g)
        cum = ad.cumprod_cols(1.0 / g_plan) * ad.constant(prefix)

        # perturbation values: q_{T+2} = 0, q_t = q_{t+1} - cum_{t-1},
        # hence q_t = -(suffix sum of cum from column t-1 on)
        q_pert = -ad.rev_cumsum_cols(cum)
        q_tilde = q_cf + self.params["eps"] * q_pert

        return ForwardOutputs(
            q_fact=q_fact,
            q_cf=q_cf,
            q_cf_blocked=ad.stop_gradient(q_cf),
            g=g,
            cum=cum,
            q_pert=q_pert,
            q_tilde=q_tilde,
            y_final=batch.y_final,
            indicators=indicators,
        )

    def loss(self, outputs, batch, block_target_grad=True):
        """Joint loss and its three components (graph tensors).

        `block_target_grad=False` replaces the stop-gradient targets with
        their live copies; used only by gradient diagnostics.
        """
        b, t_max = batch.size, batch.t
        cfg = self.config
        y_col = ad.constant(batch.y_final[:, None])
        blocked = outputs.q_cf_blocked if block_target_grad else outputs.q_cf

        # each factual column regresses on the next (blocked) counterfactual
        # column; the last one on the observed final outcome
        targets = ad.concat([ad.slice_cols(blocked, 1, t_max), y_col], axis=1)
        loss_q = ad.sum_(ad.square(outputs.q_fact - targets)) * (1.0 / (b * t_max))

        a_const = ad.constant(batch.a.astype(np.float64))
        bce = -(a_const * ad.log(outputs.g) + (1.0 - a_const) * ad.log(1.0 - outputs.g))
        loss_g = ad.sum_(bce) * (1.0 / (b * t_max))

        total = loss_q + cfg.alpha * loss_g
        if cfg.beta > 0:
            # half-squared increments: this normalization makes d loss/d eps
            # equal (beta/T) times the mean influence-function value exactly
            nxt = ad.concat([ad.slice_cols(outputs.q_tilde, 1, t_max), y_col], axis=1)
            loss_tar = ad.sum_(ad.square(nxt - outputs.q_tilde)) * (0.5 / (b * t_max))
            total = total + cfg.beta * loss_tar
        else:
            loss_tar = ad.constant(0.0)
        return total, loss_q, loss_g, loss_tar


def compute_eif(outputs, theta):
    """Per-patient efficient influence function values.

    phi_i = (Q~_2 - theta) + sum_t (Q~_{t+1} - Q~_t) * prod_{l<t} 1(A_l=a_l)/g_l
    using the fitted, clipped propensities and the convention that the
    targeted output at the horizon boundary is the observed final outcome.
    """
    q = outputs.q_tilde_values()  # (B, T+1), times 2..T+2
    cum = outputs.cum_values()  # (B, T)
    phi = q[:, 0] - theta
    for j in range(q.shape[1] - 1):
        phi = phi + (q[:, j + 1] - q[:, j]) * cum[:, j]
    return phi


@dataclass
class TrainingTrace:
    losses: list = field(default_factory=list)  # per-step joint loss
    identity_residuals: list = field(default_factory=list)  # (step, |resid|)


@dataclass
class FittedModel:
    """Trained network plus everything needed to reproduce its estimates."""

    config: ModelConfig
    plan: np.ndarray
    net: DeepAce
    mu_y: float
    sigma_y: float
    dataset_fingerprint: str
    trace: TrainingTrace = field(default_factory=TrainingTrace)

    @property
    def epsilon(self):
        return float(self.net.params["eps"].data)


@dataclass
class AceEstimate:
    psi: float
    theta_a: float
    theta_b: float
    plan_a: list
    plan_b: list
    dataset_fingerprint: str
    mc_samples: list | None = None


def make_batch(dataset, indices, mu_y, sigma_y):
    y_std = (dataset.y - mu_y) / sigma_y
    y_lag = np.zeros_like(y_std)
    y_lag[:, 1:] = y_std[:, :-1]
    return Batch(
        x=dataset.x[indices],
        y_lag=y_lag[indices],
        y_final=y_std[indices, -1],
        a=dataset.a[indices],
    )


def identity_residual(net, grads, outputs):
    """|dL/d eps - (beta/T) * mean(phi)| for the current forward pass."""
    d_eps = grads.get(net.params["eps"].uid)
    d_eps = 0.0 if d_eps is None else float(d_eps)
    theta = float(np.mean(outputs.q_tilde.data[:, 0]))
    phi = compute_eif(outputs, theta)
    return abs(d_eps - net.config.beta / net.t * float(np.mean(phi)))


def train(dataset, plan, config, identity_check_every=None):
    """Fit the estimator to one intervention plan.

    Deterministic in `config.seed`: initialization, batch order, and
    dropout masks all derive from it. Raises NumericError if the loss or a
    gradient goes non-finite.
    """
    from .datagen import as_plan

    plan = as_plan(plan, dataset.t)
    mu_y = float(dataset.y.mean())
    sigma_y = float(dataset.y.std())
    if sigma_y <= 0:
        sigma_y = 1.0

    init_seed, shuffle_seed, dropout_seed = np.random.SeedSequence(config.seed).spawn(3)
    net = DeepAce(dataset.p, dataset.t, config, np.random.default_rng(init_seed))
    shuffle_rng = np.random.default_rng(shuffle_seed)
    dropout_rng = np.random.default_rng(dropout_seed)

    adam = nn.AdamState(lr=config.lr)
    trace = TrainingTrace()
    step = 0
    for _ in range(config.epochs):
        perm = shuffle_rng.permutation(dataset.n)
        for lo in range(0, dataset.n, config.batch_size):
            idx = perm[lo : lo + config.batch_size]
            batch = make_batch(dataset, idx, mu_y, sigma_y)
            if config.dropout > 0:
                dplan = nn.make_dropout_plan(
                    batch.size,
                    net.input_dim,
                    net.hidden,
                    config.dropout,
                    int(dropout_rng.integers(2**63)),
                )
            else:
                dplan = None
            outputs = net.forward(batch, plan, dropout_plan=dplan)
            total, *_ = net.loss(outputs, batch)
            grads = ad.grad(total)
            step += 1
            trace.losses.append(float(total.data))
            if identity_check_every and step % identity_check_every == 0:
                trace.identity_residuals.append((step, identity_residual(net, grads, outputs)))
            nn.adam_step(net.params, grads, adam)

    return FittedModel(
        config=config,
        plan=plan,
        net=net,
        mu_y=mu_y,
        sigma_y=sigma_y,
        dataset_fingerprint=dataset.fingerprint(),
        trace=trace,
    )


def _full_forward(fitted, dataset, dropout_plan=None):
    batch = make_batch(dataset, np.arange(dataset.n), fitted.mu_y, fitted.sigma_y)
    return batch, fitted.net.forward(batch, fitted.plan, dropout_plan=dropout_plan)


def _check_fingerprint(fitted, dataset):
    if fitted.dataset_fingerprint != dataset.fingerprint():
        raise ValueError("dataset fingerprint mismatch: model was fitted on different data")


def estimate_theta(fitted, dataset):
    """Mean targeted first-step output, on the original outcome scale."""
    _check_fingerprint(fitted, dataset)
    _, outputs = _full_forward(fitted, dataset)
    theta_std = float(np.mean(outputs.q_tilde.data[:, 0]))
    return fitted.mu_y + fitted.sigma_y * theta_std


def estimate_ace(fitted_a, fitted_b, dataset):
    """Effect estimate from two fitted models on the same dataset."""
    theta_a = estimate_theta(fitted_a, dataset)
    theta_b = estimate_theta(fitted_b, dataset)
    return AceEstimate(
        psi=theta_a - theta_b,
        theta_a=theta_a,
        theta_b=theta_b,
        plan_a=[int(v) for v in fitted_a.plan],
        plan_b=[int(v) for v in fitted_b.plan],
        dataset_fingerprint=dataset.fingerprint(),
    )


def mc_dropout_estimates(fitted_a, fitted_b, dataset, k, seed=0):
    """K effect estimates under fresh variational-dropout masks."""
    if k < 1:
        raise ValueError("k must be >= 1")
    _check_fingerprint(fitted_a, dataset)
    _check_fingerprint(fitted_b, dataset)
    rng = np.random.default_rng(seed)
    samples = []
    for _ in range(k):
        psis = []
        for fitted in (fitted_a, fitted_b):
            net = fitted.net
            dplan = nn.make_dropout_plan(
                dataset.n,
                net.input_dim,
                net.hidden,
                fitted.config.dropout,
                int(rng.integers(2**63)),
            )
            _, outputs = _full_forward(fitted, dataset, dropout_plan=dplan)
            psis.append(fitted.mu_y + fitted.sigma_y * float(np.mean(outputs.q_tilde.data[:, 0])))
        samples.append(psis[0] - psis[1])
    return np.asarray(samples)


# ---------------------------------------------------------------------------
# checkpoints


def save_model(fitted, path):
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "kind": "longace-model",
        "config": asdict(fitted.config),
        "plan": [int(v) for v in fitted.plan],
        "mu_y": fitted.mu_y,
        "sigma_y": fitted.sigma_y,
        "dataset_fingerprint": fitted.dataset_fingerprint,
        "n_cov": fitted.net.n_cov,
        "t": fitted.net.t,
        "params": {
            name: {"shape": list(tensor.data.shape), "data": tensor.data.ravel().tolist()}
            for name, tensor in fitted.net.params.items()
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)


def load_model(path):
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version!r}")
    config = ModelConfig(**payload["config"])
    net = DeepAce(payload["n_cov"], payload["t"], config, np.random.default_rng(0))
    for name, entry in payload["params"].items():
        net.params[name].data = np.asarray(entry["data"]).reshape(entry["shape"])
    return FittedModel(
        config=config,
        plan=np.asarray(payload["plan"], dtype=np.int64),
        net=net,
        mu_y=payload["mu_y"],
        sigma_y=payload["sigma_y"],
        dataset_fingerprint=payload["dataset_fingerprint"],
    )
