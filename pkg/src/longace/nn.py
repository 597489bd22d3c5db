"""Network building blocks on top of the autodiff engine.

Single-layer standard LSTM (forget/input/output gates, tanh candidate,
no peepholes) with the four gate blocks fused into one matmul, one-hidden-
layer ELU feed-forward heads, variational dropout masks (one draw per
trajectory, reused at every time step), and the bias-corrected Adam update.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

GATES = ("i", "f", "g", "o")  # fused column blocks, in this order


def uniform_init(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_lstm(rng, input_dim, hidden_dim):
    """Fused LSTM weights: W_x (in, 4H), W_h (H, 4H), b (4H,).

    Weights uniform in +-1/sqrt(fan_in); biases zero except the forget
    block at +1 (standard stabilization).
    """
    bias = np.zeros(4 * hidden_dim)
    bias[hidden_dim : 2 * hidden_dim] = 1.0
    return {
        "W_x": ad.parameter(uniform_init(rng, input_dim, (input_dim, 4 * hidden_dim))),
        "W_h": ad.parameter(uniform_init(rng, hidden_dim, (hidden_dim, 4 * hidden_dim))),
        "b": ad.parameter(bias),
    }


def init_head(rng, input_dim, hidden_dim):
    """One-hidden-layer ELU head producing a single output."""
    return {
        "W1": ad.parameter(uniform_init(rng, input_dim, (input_dim, hidden_dim))),
        "b1": ad.parameter(np.zeros(hidden_dim)),
        "W2": ad.parameter(uniform_init(rng, hidden_dim, (hidden_dim, 1))),
        "b2": ad.parameter(np.zeros(1)),
    }


def head_forward(params, x):
    """Apply a feed-forward head; returns a (batch,) tensor."""
    h = ad.elu(x @ params["W1"] + params["b1"])
    out = h @ params["W2"] + params["b2"]
    return ad.reshape(out, (out.shape[0],))


@dataclass
class DropoutPlan:
    """Variational dropout masks for one batch of trajectories.

    One mask over the input units and one over the recurrent units,
    sampled once per trajectory and reused at all of its time steps (and
    at every gate). Entries are 0 or 1/(1-p); rate 0 means no masking.
    """

    rate: float
    x_mask: np.ndarray  # (batch, input_dim)
    h_mask: np.ndarray  # (batch, hidden_dim)


def make_dropout_plan(batch, input_dim, hidden_dim, p, seed):
    """Sample a DropoutPlan; deterministic for a fixed seed."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    rng = np.random.default_rng(seed)
    scale = 1.0 / (1.0 - p)

    def draw(shape):
        if p == 0.0:
            return np.ones(shape)
        return rng.binomial(1, 1.0 - p, size=shape) * scale

    return DropoutPlan(rate=p, x_mask=draw((batch, input_dim)), h_mask=draw((batch, hidden_dim)))


def no_dropout(batch, input_dim, hidden_dim):
    return make_dropout_plan(batch, input_dim, hidden_dim, 0.0, 0)


def lstm_cell(x, h_prev, c_prev, params, plan):
    """One LSTM step. `x` is (batch, input_dim); returns (h, c).

    The plan's masks multiply the input and recurrent connections; masks
    are constants in the graph and are skipped entirely at rate 0.
    """
    if plan.rate > 0.0:
        x = x * ad.constant(plan.x_mask)
        h_prev = h_prev * ad.constant(plan.h_mask)
    pre = x @ params["W_x"] + h_prev @ params["W_h"] + params["b"]
    n = params["b"].data.shape[0] // 4
    i = ad.sigmoid(ad.slice_cols(pre, 0, n))
    f = ad.sigmoid(ad.slice_cols(pre, n, 2 * n))
    g = ad.tanh(ad.slice_cols(pre, 2 * n, 3 * n))
    o = ad.sigmoid(ad.slice_cols(pre, 3 * n, 4 * n))
    c = f * c_prev + i * g
    h = o * ad.tanh(c)
    return h, c


@dataclass
class AdamState:
    """First/second-moment accumulators keyed like the parameter dict."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state):
    """Bias-corrected Adam update, in place on the parameter tensors.

    `grads` maps tensor uid -> ndarray; parameters without an entry are
    treated as zero-gradient (e.g. cut off by stop_gradient).
    """
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads.get(p.uid)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} != param shape {p.data.shape} for {name}")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name] = m
        state.v[name] = v
        p.data = p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
