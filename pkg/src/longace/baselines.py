"""Classical longitudinal effect estimators over pluggable regressors.

All estimators condition on the flattened full history (covariates with the
lagged outcome appended, plus past treatments). Inverse-propensity factors
are clipped to [0.01, 0.99], matching the recurrent estimator.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .datagen import as_plan

PROB_CLIP = (0.01, 0.99)


class ConvergenceError(RuntimeError):
    pass


class SingularSystemError(RuntimeError):
    pass


@dataclass
class Regressor:
    kind: str  # "ridge" | "logistic"
    coef: np.ndarray  # intercept first
    lam: float

    def _design(self, features):
        features = np.asarray(features, dtype=np.float64)
        return np.concatenate([np.ones((features.shape[0], 1)), features], axis=1)

    def predict(self, features):
        """Linear prediction (ridge) or probability (logistic)."""
        z = self._design(features) @ self.coef
        if self.kind == "logistic":
            return 1.0 / (1.0 + np.exp(-z))
        return z


def fit_ridge(features, targets, lam):
    """Ridge regression via normal equations; the intercept is unpenalized."""
    features = np.asarray(features, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    z = np.concatenate([np.ones((features.shape[0], 1)), features], axis=1)
    penalty = np.eye(z.shape[1]) * lam
    penalty[0, 0] = 0.0
    lhs = z.T @ z + penalty
    try:
        coef = np.linalg.solve(lhs, z.T @ targets)
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError(f"ridge system singular: {exc}") from None
    return Regressor(kind="ridge", coef=coef, lam=lam)


def fit_logistic(features, labels, lam, max_iter=100, tol=1e-8):
    """L2-penalized logistic regression by damped Newton iterations.

    Minimizes the summed negative log-likelihood plus (lam/2)|coef|^2
    (intercept unpenalized) until the gradient norm drops below `tol`.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    z = np.concatenate([np.ones((features.shape[0], 1)), features], axis=1)
    d = z.shape[1]
    pen = np.full(d, lam)
    pen[0] = 0.0
    beta = np.zeros(d)

    def nll(b):
        logits = z @ b
        # log(1 + exp(x)) computed stably
        return float(np.sum(np.logaddexp(0.0, logits) - labels * logits) + 0.5 * (pen * b * b).sum())

    current = nll(beta)
    for _ in range(max_iter):
        p = 1.0 / (1.0 + np.exp(-(z @ beta)))
        grad = z.T @ (p - labels) + pen * beta
        if np.linalg.norm(grad) < tol:
            return Regressor(kind="logistic", coef=beta, lam=lam)
        w = np.clip(p * (1.0 - p), 1e-12, None)
        hess = (z * w[:, None]).T @ z + np.diag(pen)
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError as exc:
            raise SingularSystemError(f"logistic Hessian singular: {exc}") from None
        # halve the step until the objective stops increasing
        scale = 1.0
        for _ in range(40):
            candidate = beta - scale * step
            value = nll(candidate)
            if value <= current + 1e-12:
                beta, current = candidate, value
                break
            scale *= 0.5
        else:
            raise ConvergenceError("logistic line search failed")
    p = 1.0 / (1.0 + np.exp(-(z @ beta)))
    grad = z.T @ (p - labels) + pen * beta
    if np.linalg.norm(grad) < tol:
        return Regressor(kind="logistic", coef=beta, lam=lam)
    raise ConvergenceError(f"logistic Newton did not converge: |grad|={np.linalg.norm(grad):.3e}")


@dataclass
class RegressorSpec:
    """Outcome-regression backend choice for the g-methods.

    `use_covariates=False` deliberately drops the covariate history from the
    outcome regressions (treatments only), for misspecification studies.
    """

    lam: float = 1e-3
    use_covariates: bool = True


@dataclass
class EstimatorResult:
    method: str
    theta: float | None = None
    psi: float | None = None
    diagnostics: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# shared feature plumbing


def _x_with_lagged_outcome(dataset):
    y_lag = dataset.y_lag()
    return np.concatenate([dataset.x, y_lag[:, :, None]], axis=2)


def _history_features(x_til, a, t_x, t_a, use_covariates=True):
    """Flattened history: covariates through step t_x, treatments through t_a."""
    n = x_til.shape[0]
    parts = []
    if use_covariates and t_x > 0:
        parts.append(x_til[:, :t_x, :].reshape(n, -1))
    if t_a > 0:
        parts.append(np.asarray(a[:, :t_a], dtype=np.float64))
    if not parts:
        return np.zeros((n, 0))
    return np.concatenate(parts, axis=1)


def _prob_of(probs, values):
    """Probability of the given binary values under P(A=1)=probs, clipped."""
    p = np.where(values == 1, probs, 1.0 - probs)
    return np.clip(p, *PROB_CLIP)


def fit_propensities(dataset, lam=1e-3):
    """Per-step P(A_t = 1 | history) by logistic regression; (N, T) array."""
    x_til = _x_with_lagged_outcome(dataset)
    out = np.zeros((dataset.n, dataset.t))
    for t in range(1, dataset.t + 1):
        feats = _history_features(x_til, dataset.a, t, t - 1)
        reg = fit_logistic(feats, dataset.a[:, t - 1], lam)
        out[:, t - 1] = reg.predict(feats)
    return out


def compliance_weights(dataset, plan, propensities):
    """cum[:, j] = prod_{l<=j+1} 1(A_l = a_l) / P(A_l = a_l | H_l), clipped."""
    plan = as_plan(plan, dataset.t)
    ind = (dataset.a == plan[None, :]).astype(np.float64)
    g_plan = _prob_of(propensities, np.broadcast_to(plan, dataset.a.shape))
    return np.cumprod(ind / g_plan, axis=1)


# ---------------------------------------------------------------------------
# estimators


def iterative_gcomp(dataset, plan, spec=None):
    """Backward-recursive outcome regression evaluated at the plan.

    Starts from the final outcome and, for each step from the horizon down,
    regresses the current pseudo-outcome on the observed history, then
    replaces it by the fit evaluated with treatments forced to the plan.
    The estimate is the mean of the last evaluation.
    """
    spec = spec or RegressorSpec()
    plan = as_plan(plan, dataset.t)
    x_til = _x_with_lagged_outcome(dataset)
    plan_rows = np.broadcast_to(plan, dataset.a.shape)

    q_next = dataset.y[:, -1].copy()
    for t in range(dataset.t + 1, 1, -1):
        feats_obs = _history_features(x_til, dataset.a, t - 1, t - 1, spec.use_covariates)
        try:
            reg = fit_ridge(feats_obs, q_next, spec.lam)
        except SingularSystemError as exc:
            raise SingularSystemError(f"step {t}: {exc}") from None
        feats_plan = _history_features(x_til, plan_rows, t - 1, t - 1, spec.use_covariates)
        q_next = reg.predict(feats_plan)
    theta = float(np.mean(q_next))
    return EstimatorResult(method="iterative_gcomp", theta=theta)


def ltmle_glm(dataset, plan, spec=None, propensities=None):
    """Iterative G-computation with a per-step linear fluctuation.

    After each regression step the predictions are shifted along the
    inverse-propensity compliance weight H_t so that the step-wise
    estimating equation sum_i H_t (target - fluctuated prediction) = 0
    holds. `propensities` overrides the fitted P(A_t=1 | H_t) (e.g. with
    oracle values).
    """
    spec = spec or RegressorSpec()
    plan = as_plan(plan, dataset.t)
    x_til = _x_with_lagged_outcome(dataset)
    plan_rows = np.broadcast_to(plan, dataset.a.shape)
    if propensities is None:
        propensities = fit_propensities(dataset, spec.lam)
    cum = compliance_weights(dataset, plan, propensities)

    skipped = []
    normal_eq = []
    fluctuations = []
    q_next = dataset.y[:, -1].copy()
    for t in range(dataset.t + 1, 1, -1):
        feats_obs = _history_features(x_til, dataset.a, t - 1, t - 1, spec.use_covariates)
        try:
            reg = fit_ridge(feats_obs, q_next, spec.lam)
        except SingularSystemError as exc:
            raise SingularSystemError(f"step {t}: {exc}") from None
        q_fact = reg.predict(feats_obs)
        feats_plan = _history_features(x_til, plan_rows, t - 1, t - 1, spec.use_covariates)
        q_plan = reg.predict(feats_plan)

        h = cum[:, t - 2]  # prod over steps 1..t-1
        s2 = math.fsum(h * h)
        if s2 == 0.0:
            eps_t = 0.0
            skipped.append(t)
        else:
            eps_t = math.fsum(h * (q_next - q_fact)) / s2
        resid = math.fsum(h * (q_next - (q_fact + eps_t * h)))
        normal_eq.append((t, resid))
        fluctuations.append((t, eps_t))
        q_next = q_plan + eps_t * h

    theta = float(np.mean(q_next))
    return EstimatorResult(
        method="ltmle_glm",
        theta=theta,
        diagnostics={
            "skipped_steps": skipped,
            "normal_eq_residuals": normal_eq,
            "fluctuations": fluctuations,
            "max_weight": float(cum.max()),
        },
    )


def msm_ipw(dataset, plan_a, plan_b, lam=1e-3, num_probs=None, den_probs=None):
    """Marginal structural model fitted by stabilized inverse weighting.

    Weights are products over time of (marginal / history-conditional)
    probabilities of the observed treatment; the outcome is regressed on
    the treatment sequence with those weights and the effect is the fitted
    contrast between the two plans. `num_probs`/`den_probs` override the
    fitted P(A_t=1 | past treatments) and P(A_t=1 | full history).
    """
    plan_a = as_plan(plan_a, dataset.t)
    plan_b = as_plan(plan_b, dataset.t)
    x_til = _x_with_lagged_outcome(dataset)

    if den_probs is None:
        den_probs = fit_propensities(dataset, lam)
    if num_probs is None:
        num_probs = np.zeros((dataset.n, dataset.t))
        for t in range(1, dataset.t + 1):
            feats = _history_features(x_til, dataset.a, 0, t - 1)
            reg = fit_logistic(feats, dataset.a[:, t - 1], lam)
            num_probs[:, t - 1] = reg.predict(feats)

    num = _prob_of(np.asarray(num_probs), dataset.a)
    den = _prob_of(np.asarray(den_probs), dataset.a)
    weights = np.prod(num / den, axis=1)
    if not np.isfinite(weights).all() or weights.max() <= 1e-12:
        raise ValueError(
            f"degenerate stabilized weights: min={weights.min():.3e} max={weights.max():.3e}"
        )

    # weighted linear regression of the final outcome on the treatments
    z = np.concatenate([np.ones((dataset.n, 1)), dataset.a.astype(np.float64)], axis=1)
    penalty = np.eye(z.shape[1]) * 1e-8
    penalty[0, 0] = 0.0
    zw = z * weights[:, None]
    try:
        beta = np.linalg.solve(zw.T @ z + penalty, zw.T @ dataset.y[:, -1])
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError(f"MSM weighted regression singular: {exc}") from None

    psi = float(beta[1:] @ (plan_a - plan_b))
    return EstimatorResult(
        method="msm_ipw",
        psi=psi,
        diagnostics={
            "weight_min": float(weights.min()),
            "weight_max": float(weights.max()),
            "weight_mean": float(weights.mean()),
            "weights": weights,
        },
    )


def parametric_gformula(dataset, plan, n_mc, spec=None, seed=0, variance_scale=1.0):
    """Plug-in G-formula with linear-Gaussian covariate densities.

    Fits, per step, a ridge regression and a residual variance for every
    covariate channel (lagged outcome included) given the history, plus a
    final outcome regression; then rolls each patient's baseline forward
    `n_mc` times under the plan, sampling covariates from the fitted
    normals, and averages the predicted final outcomes.
    """
    if n_mc < 1:
        raise ValueError("n_mc must be >= 1")
    spec = spec or RegressorSpec()
    plan = as_plan(plan, dataset.t)
    x_til = _x_with_lagged_outcome(dataset)
    n, t_max = dataset.n, dataset.t
    channels = x_til.shape[2]

    floored = []
    models = {}  # (t, channel) -> (Regressor, sd)
    for t in range(2, t_max + 1):
        feats = _history_features(x_til, dataset.a, t - 1, t - 1)
        for c in range(channels):
            target = x_til[:, t - 1, c]
            reg = fit_ridge(feats, target, spec.lam)
            resid = target - reg.predict(feats)
            var = float(np.mean(resid * resid))
            if var <= 0.0:
                floored.append((t, c))
                var = 1e-8
            models[(t, c)] = (reg, math.sqrt(var) * variance_scale)
    outcome_feats = _history_features(x_til, dataset.a, t_max, t_max)
    outcome_reg = fit_ridge(outcome_feats, dataset.y[:, -1], spec.lam)

    rng = np.random.default_rng(seed)
    chunk = max(1, min(n_mc, 1_000_000 // max(n, 1)))
    total = 0.0
    count = 0
    done = 0
    while done < n_mc:
        reps = min(chunk, n_mc - done)
        done += reps
        sim_x = np.zeros((n * reps, t_max, channels))
        sim_x[:, 0, :] = np.repeat(x_til[:, 0, :], reps, axis=0)
        plan_rows = np.broadcast_to(plan, (n * reps, t_max))
        for t in range(2, t_max + 1):
            feats = _history_features(sim_x, plan_rows, t - 1, t - 1)
            for c in range(channels):
                reg, sd = models[(t, c)]
                mean = reg.predict(feats)
                noise = rng.normal(0.0, 1.0, size=mean.shape) * sd
                sim_x[:, t - 1, c] = mean + noise
        y_hat = outcome_reg.predict(_history_features(sim_x, plan_rows, t_max, t_max))
        total += float(y_hat.sum())
        count += y_hat.size

    result = EstimatorResult(
        method="parametric_gformula",
        theta=total / count,
        diagnostics={"floored_variances": floored},
    )
    return result
