import math

import numpy as np
import pytest

from longace import baselines, datagen


def linear_dataset(n=5000, t=3, seed=0):
    return datagen.generate(
        datagen.DGPConfig(n=n, t=t, p=1, h=1, seed=seed, linear=True)
    )


# --- regressors ---


def test_ridge_exact_interpolation_small_lambda():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(200, 4))
    w = np.array([1.5, -2.0, 0.3, 0.9])
    y = x @ w + 0.7
    reg = baselines.fit_ridge(x, y, lam=1e-10)
    np.testing.assert_allclose(reg.coef[1:], w, atol=1e-6)
    assert reg.coef[0] == pytest.approx(0.7, abs=1e-6)


def test_ridge_infinite_lambda_shrinks_to_mean():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(100, 3))
    y = rng.normal(size=100) + 2.5
    reg = baselines.fit_ridge(x, y, lam=1e12)
    np.testing.assert_allclose(reg.coef[1:], 0.0, atol=1e-8)
    assert reg.coef[0] == pytest.approx(y.mean(), abs=1e-4)


def test_logistic_separable_classifies_training_data():
    rng = np.random.default_rng(2)
    x = np.concatenate([rng.normal(-2, 0.3, size=(50, 1)), rng.normal(2, 0.3, size=(50, 1))])
    y = np.concatenate([np.zeros(50), np.ones(50)])
    reg = baselines.fit_logistic(x, y, lam=0.01)
    p = reg.predict(x)
    assert ((p > 0.5) == (y == 1)).all()


def test_logistic_recovers_generating_coefficients():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(20000, 2))
    logits = 0.5 + 1.2 * x[:, 0] - 0.8 * x[:, 1]
    y = (rng.uniform(size=20000) < 1 / (1 + np.exp(-logits))).astype(float)
    reg = baselines.fit_logistic(x, y, lam=1e-6)
    np.testing.assert_allclose(reg.coef, [0.5, 1.2, -0.8], atol=0.1)


# --- iterative G-computation ---


def test_gcomp_constant_outcome_fixed_point():
    ds = datagen.generate(datagen.DGPConfig(n=50, t=4, p=2, h=2, seed=5))
    const = datagen.Dataset(
        x=ds.x, a=ds.a, y=np.full_like(ds.y, 3.25), ids=ds.ids, config=ds.config
    )
    for plan in (np.ones(4, dtype=np.int64), np.zeros(4, dtype=np.int64)):
        res = baselines.iterative_gcomp(const, plan)
        assert res.theta == pytest.approx(3.25, abs=1e-9)


def test_gcomp_t1_equals_static_gcomputation():
    ds = datagen.generate(datagen.DGPConfig(n=300, t=1, p=2, h=1, seed=7))
    plan = np.array([1])
    res = baselines.iterative_gcomp(ds, plan, baselines.RegressorSpec(lam=1e-3))
    # static G-computation: outcome regression on (x_1, y_lag=0, a_1),
    # evaluated at a_1 = 1, averaged
    y_lag = np.zeros((ds.n, 1))
    feats = np.concatenate([ds.x[:, 0, :], y_lag, ds.a[:, :1].astype(float)], axis=1)
    reg = baselines.fit_ridge(feats, ds.y[:, -1], 1e-3)
    feats_plan = feats.copy()
    feats_plan[:, -1] = 1.0
    want = float(reg.predict(feats_plan).mean())
    assert res.theta == pytest.approx(want, abs=1e-10)


def test_gcomp_correctly_specified_linear_dgp():
    ds = linear_dataset(seed=11)
    plan_a = np.ones(3, dtype=np.int64)
    theta_true = datagen.counterfactual_outcomes(ds, plan_a).mean()
    res = baselines.iterative_gcomp(ds, plan_a, baselines.RegressorSpec(lam=1e-6))
    assert abs(res.theta - theta_true) <= 0.05


def test_gcomp_order_invariance():
    ds = datagen.generate(datagen.DGPConfig(n=60, t=3, p=2, h=1, seed=9))
    plan = datagen.plan_from_range(1, 2, 3)
    res = baselines.iterative_gcomp(ds, plan)
    perm = np.random.default_rng(4).permutation(ds.n)
    res_perm = baselines.iterative_gcomp(ds.subset(perm), plan)
    assert res.theta == pytest.approx(res_perm.theta, abs=1e-9)


# --- LTMLE ---


def test_ltmle_no_compliance_equals_gcomp():
    ds = datagen.generate(datagen.DGPConfig(n=80, t=3, p=2, h=1, seed=13))
    never = datagen.Dataset(
        x=ds.x, a=np.zeros_like(ds.a), y=ds.y, ids=ds.ids, config=ds.config
    )
    plan = np.ones(3, dtype=np.int64)  # nobody complies at step 1
    spec = baselines.RegressorSpec(lam=1e-3)
    res_ltmle = baselines.ltmle_glm(never, plan, spec)
    res_gcomp = baselines.iterative_gcomp(never, plan, spec)
    assert res_ltmle.theta == pytest.approx(res_gcomp.theta, abs=1e-12)
    assert res_ltmle.diagnostics["skipped_steps"] == [4, 3, 2]


def test_ltmle_stepwise_normal_equation():
    ds = datagen.generate(datagen.DGPConfig(n=400, t=5, p=3, h=2, seed=17))
    plan = datagen.plan_from_range(1, 3, 5)
    res = baselines.ltmle_glm(ds, plan)
    for step, resid in res.diagnostics["normal_eq_residuals"]:
        assert abs(resid) <= 1e-8, f"step {step}: residual {resid}"


def test_ltmle_oracle_propensities_accepted():
    ds = linear_dataset(n=1500, seed=19)
    plan = np.ones(3, dtype=np.int64)
    res = baselines.ltmle_glm(ds, plan, propensities=ds.true_prob)
    assert np.isfinite(res.theta)
    assert res.diagnostics["max_weight"] > 0


# --- MSM ---


def test_msm_identical_plans_zero():
    ds = datagen.generate(datagen.DGPConfig(n=200, t=4, p=2, h=2, seed=23))
    plan = datagen.plan_from_range(2, 3, 4)
    res = baselines.msm_ipw(ds, plan, plan)
    assert res.psi == 0.0


def test_msm_antisymmetry():
    ds = datagen.generate(datagen.DGPConfig(n=200, t=4, p=2, h=2, seed=27))
    a = datagen.plan_from_range(1, 2, 4)
    b = datagen.plan_from_range(3, 4, 4)
    ab = baselines.msm_ipw(ds, a, b).psi
    ba = baselines.msm_ipw(ds, b, a).psi
    assert ab == -ba


def test_msm_oracle_randomized_weights_exactly_one():
    ds = datagen.generate(datagen.DGPConfig(n=300, t=4, p=2, h=1, seed=29, randomized=True))
    a = np.ones(4, dtype=np.int64)
    b = np.zeros(4, dtype=np.int64)
    res = baselines.msm_ipw(ds, a, b, num_probs=ds.true_prob, den_probs=ds.true_prob)
    weights = res.diagnostics["weights"]
    np.testing.assert_array_equal(weights, np.ones(ds.n))


def test_msm_fitted_randomized_weights_near_one():
    ds = datagen.generate(datagen.DGPConfig(n=800, t=4, p=2, h=1, seed=33, randomized=True))
    a = np.ones(4, dtype=np.int64)
    b = np.zeros(4, dtype=np.int64)
    res = baselines.msm_ipw(ds, a, b)
    weights = res.diagnostics["weights"]
    assert abs(weights.mean() - 1.0) < 0.1
    # per-patient deviation is fit error compounded over the steps
    assert np.median(np.abs(weights - 1.0)) < 0.3


def test_msm_correctly_specified_linear_dgp():
    ds = linear_dataset(seed=31)
    a = np.ones(3, dtype=np.int64)
    b = np.zeros(3, dtype=np.int64)
    psi_true = datagen.ground_truth_ace(ds, a, b)
    res = baselines.msm_ipw(ds, a, b)
    assert abs(res.psi - psi_true) <= 0.1


# --- parametric G-formula ---


def test_gformula_zero_variance_invariant_to_n_mc():
    ds = datagen.generate(datagen.DGPConfig(n=100, t=3, p=2, h=1, seed=37))
    plan = np.ones(3, dtype=np.int64)
    r1 = baselines.parametric_gformula(ds, plan, n_mc=3, seed=1, variance_scale=0.0)
    r2 = baselines.parametric_gformula(ds, plan, n_mc=17, seed=2, variance_scale=0.0)
    assert r1.theta == pytest.approx(r2.theta, rel=1e-12)


def test_gformula_t1_collapses_to_gcomp():
    ds = datagen.generate(datagen.DGPConfig(n=250, t=1, p=2, h=1, seed=41))
    plan = np.array([1])
    spec = baselines.RegressorSpec(lam=1e-3)
    gf = baselines.parametric_gformula(ds, plan, n_mc=4, spec=spec, seed=0)
    gc = baselines.iterative_gcomp(ds, plan, spec)
    assert gf.theta == pytest.approx(gc.theta, abs=1e-10)


def test_gformula_mc_convergence():
    ds = linear_dataset(n=300, seed=43)
    plan = np.ones(3, dtype=np.int64)
    small = [
        baselines.parametric_gformula(ds, plan, n_mc=100, seed=s).theta for s in range(5)
    ]
    big = baselines.parametric_gformula(ds, plan, n_mc=10000, seed=99).theta
    se = np.std(small, ddof=1)
    assert abs(np.mean(small) - big) <= 3 * se + 1e-9


def test_gformula_rejects_bad_n_mc():
    ds = datagen.generate(datagen.DGPConfig(n=20, t=2, p=1, h=1, seed=2))
    with pytest.raises(ValueError):
        baselines.parametric_gformula(ds, np.ones(2, dtype=np.int64), n_mc=0)


# --- shared plumbing ---


def test_compliance_weights_match_manual_product():
    ds = datagen.generate(datagen.DGPConfig(n=50, t=3, p=2, h=1, seed=47))
    plan = datagen.plan_from_range(1, 2, 3)
    props = baselines.fit_propensities(ds)
    cum = baselines.compliance_weights(ds, plan, props)
    g_plan = np.clip(
        np.where(plan[None, :] == 1, props, 1 - props), *baselines.PROB_CLIP
    )
    ind = (ds.a == plan[None, :]).astype(float)
    manual = np.cumprod(ind / g_plan, axis=1)
    np.testing.assert_allclose(cum, manual, rtol=1e-12)


def test_all_estimators_finite_on_benchmark_style_data():
    for cfg in (
        datagen.DGPConfig(n=300, t=8, p=3, h=3, seed=71),
        datagen.semisynthetic_config(n=200, t=6, p=4, h=3, seed=72),
    ):
        ds = datagen.generate(cfg)
        plan_a = datagen.plan_from_range(2, cfg.t - 1, cfg.t)
        plan_b = np.zeros(cfg.t, dtype=np.int64)
        values = [
            baselines.iterative_gcomp(ds, plan_a).theta,
            baselines.ltmle_glm(ds, plan_a).theta,
            baselines.msm_ipw(ds, plan_a, plan_b).psi,
            baselines.parametric_gformula(ds, plan_a, n_mc=10, seed=1).theta,
        ]
        assert all(math.isfinite(v) for v in values), values


def test_estimator_results_carry_method_names():
    ds = datagen.generate(datagen.DGPConfig(n=40, t=2, p=1, h=1, seed=3))
    plan = np.ones(2, dtype=np.int64)
    zero = np.zeros(2, dtype=np.int64)
    assert baselines.iterative_gcomp(ds, plan).method == "iterative_gcomp"
    assert baselines.ltmle_glm(ds, plan).method == "ltmle_glm"
    assert baselines.msm_ipw(ds, plan, zero).method == "msm_ipw"
    assert baselines.parametric_gformula(ds, plan, 2).method == "parametric_gformula"
