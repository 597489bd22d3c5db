import numpy as np
import pytest

from longace import autodiff as ad
from longace import nn
from helpers import finite_diff, assert_close_rel


def zeroed_lstm(input_dim, hidden):
    params = nn.init_lstm(np.random.default_rng(0), input_dim, hidden)
    for p in params.values():
        p.data = np.zeros_like(p.data)
    return params


def test_lstm_cell_all_zero_weights():
    # all gates sigmoid(0)=0.5, candidate tanh(0)=0: c' = c/2, h' = tanh(c/2)/2
    params = zeroed_lstm(3, 4)
    c0 = np.full((2, 4), 0.8)
    h, c = nn.lstm_cell(
        ad.constant(np.zeros((2, 3))),
        ad.constant(np.zeros((2, 4))),
        ad.constant(c0),
        params,
        nn.no_dropout(2, 3, 4),
    )
    np.testing.assert_allclose(c.data, 0.5 * c0, rtol=1e-15)
    np.testing.assert_allclose(h.data, 0.5 * np.tanh(0.5 * c0), rtol=1e-15)


def test_lstm_dropout_rate_zero_is_identity():
    rng = np.random.default_rng(1)
    params = nn.init_lstm(rng, 3, 4)
    x = ad.constant(rng.normal(size=(5, 3)))
    h0 = ad.constant(rng.normal(size=(5, 4)))
    c0 = ad.constant(rng.normal(size=(5, 4)))
    h1, c1 = nn.lstm_cell(x, h0, c0, params, nn.no_dropout(5, 3, 4))
    plan = nn.make_dropout_plan(5, 3, 4, 0.0, seed=44)
    h2, c2 = nn.lstm_cell(x, h0, c0, params, plan)
    np.testing.assert_array_equal(h1.data, h2.data)
    np.testing.assert_array_equal(c1.data, c2.data)


def test_lstm_unrolled_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    input_dim, hidden, batch, steps = 3, 4, 2, 3
    init = nn.init_lstm(rng, input_dim, hidden)
    xs = [rng.uniform(-1, 1, size=(batch, input_dim)) for _ in range(steps)]

    def unroll(params):
        h = ad.constant(np.zeros((batch, hidden)))
        c = ad.constant(np.zeros((batch, hidden)))
        plan = nn.no_dropout(batch, input_dim, hidden)
        for x in xs:
            h, c = nn.lstm_cell(ad.constant(x), h, c, params, plan)
        return ad.mean(ad.square(h))

    loss = unroll(init)
    grads = ad.grad(loss)
    for name in ("W_x", "W_h", "b"):
        w0 = init[name].data.copy()

        def value(w):
            params = {k: ad.constant(v.data) for k, v in init.items()}
            params[name] = ad.constant(w)
            return float(unroll(params).data)

        assert_close_rel(grads[init[name].uid], finite_diff(value, w0), rel=1e-4)


def test_forget_gate_bias_init_is_one():
    params = nn.init_lstm(np.random.default_rng(0), 3, 4)
    b = params["b"].data
    np.testing.assert_array_equal(b[4:8], np.ones(4))
    np.testing.assert_array_equal(b[:4], np.zeros(4))
    np.testing.assert_array_equal(b[8:], np.zeros(8))


# --- dropout plans ---


def test_dropout_plan_rate_zero_all_ones():
    plan = nn.make_dropout_plan(4, 3, 5, 0.0, seed=9)
    assert (plan.x_mask == 1.0).all() and (plan.h_mask == 1.0).all()


def test_dropout_plan_deterministic_for_seed():
    a = nn.make_dropout_plan(10, 4, 6, 0.3, seed=123)
    b = nn.make_dropout_plan(10, 4, 6, 0.3, seed=123)
    np.testing.assert_array_equal(a.x_mask, b.x_mask)
    np.testing.assert_array_equal(a.h_mask, b.h_mask)


def test_dropout_plan_entries_and_mean():
    plan = nn.make_dropout_plan(1000, 50, 50, 0.3, seed=5)
    values = np.concatenate([plan.x_mask.ravel(), plan.h_mask.ravel()])
    assert set(np.round(np.unique(values), 12)) <= {0.0, round(1 / 0.7, 12)}
    assert 0.98 <= values.mean() <= 1.02  # E[mask] = 1


def test_dropout_plan_rejects_bad_rate():
    with pytest.raises(ValueError):
        nn.make_dropout_plan(2, 2, 2, 1.0, seed=0)


def test_variational_mask_shared_across_time_steps():
    # the same plan object is applied at every step of a trajectory, so the
    # mask entering the cell is identical for all t by construction
    rng = np.random.default_rng(3)
    params = nn.init_lstm(rng, 3, 4)
    plan = nn.make_dropout_plan(2, 3, 4, 0.5, seed=1)
    x = ad.constant(np.ones((2, 3)))
    h = ad.constant(np.zeros((2, 4)))
    c = ad.constant(np.zeros((2, 4)))
    seen = []
    for _ in range(3):
        seen.append((plan.x_mask.copy(), plan.h_mask.copy()))
        h, c = nn.lstm_cell(x, h, c, params, plan)
    for xm, hm in seen[1:]:
        np.testing.assert_array_equal(xm, seen[0][0])
        np.testing.assert_array_equal(hm, seen[0][1])


# --- Adam ---


def test_adam_zero_gradient_leaves_params_unchanged():
    p = ad.parameter(np.array([1.0, -2.0]))
    params = {"p": p}
    state = nn.AdamState(lr=0.1)
    for _ in range(5):
        nn.adam_step(params, {p.uid: np.zeros(2)}, state)
    np.testing.assert_array_equal(p.data, np.array([1.0, -2.0]))


def test_adam_first_step_magnitude_is_lr():
    p = ad.parameter(np.array([0.0]))
    state = nn.AdamState(lr=0.001)
    nn.adam_step({"p": p}, {p.uid: np.array([3.7])}, state)
    assert abs(p.data[0]) == pytest.approx(0.001, rel=1e-6)
    assert p.data[0] < 0


def test_adam_ten_step_trace_matches_reference():
    # independent straight-line implementation of the bias-corrected update
    lr, b1, b2, eps = 0.001, 0.9, 0.999, 1e-8
    x_ref = 0.5
    m = v = 0.0
    for step in range(1, 11):
        g = 1.0
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1**step)
        vhat = v / (1 - b2**step)
        x_ref -= lr * mhat / (np.sqrt(vhat) + eps)

    p = ad.parameter(np.array([0.5]))
    state = nn.AdamState(lr=lr)
    for _ in range(10):
        nn.adam_step({"p": p}, {p.uid: np.array([1.0])}, state)
    assert p.data[0] == pytest.approx(x_ref, abs=1e-10)


def test_adam_missing_gradient_treated_as_zero():
    p = ad.parameter(np.array([4.0]))
    q = ad.parameter(np.array([1.0]))
    state = nn.AdamState(lr=0.1)
    nn.adam_step({"p": p, "q": q}, {q.uid: np.array([1.0])}, state)
    assert p.data[0] == 4.0
    assert q.data[0] != 1.0


def test_adam_shape_mismatch_raises():
    p = ad.parameter(np.zeros(3))
    with pytest.raises(ValueError, match="shape"):
        nn.adam_step({"p": p}, {p.uid: np.zeros(2)}, nn.AdamState(lr=0.1))
