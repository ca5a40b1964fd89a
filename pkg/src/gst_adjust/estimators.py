"""Unadjusted and TMLE estimators of the average treatment effect.

The TMLE handles monotone missingness of a short-term outcome L and the
primary outcome Y by sequential regression: E(Y | W, A, L) is fit and
targeted among participants with Y observed, then its targeted predictions
are regressed on W among participants with L observed, and targeted again.
Variance is estimated from the empirical efficient influence function.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import glm
from .trial import AnalysisSnapshot

PROB_FLOOR = glm.PROB_BOUNDS[0]


class EstimationError(ValueError):
    pass


@dataclass(frozen=True)
class WorkingModelSpec:
    """Regressor terms for every working model.

    A term is ``"a"``, ``"l"``, ``"w<j>"`` (1-based) or a product of these
    joined by ``":"`` such as ``"w1:a"``.  An intercept is always added.
    """

    outcome_terms_lw: tuple[str, ...]
    outcome_terms_w: tuple[str, ...]
    censor_l_terms: tuple[str, ...]
    censor_y_terms: tuple[str, ...]
    arm_terms: tuple[str, ...]

    @classmethod
    def main_terms(cls, n_covariates: int) -> "WorkingModelSpec":
        w = tuple(f"w{j + 1}" for j in range(n_covariates))
        return cls(
            outcome_terms_lw=("a",) + w + ("l",),
            outcome_terms_w=("a",) + w,
            censor_l_terms=("a",) + w,
            censor_y_terms=("a",) + w + ("l",),
            arm_terms=w,
        )

    def validate(self, n_covariates: int) -> None:
        for terms in (
            self.outcome_terms_lw,
            self.outcome_terms_w,
            self.censor_l_terms,
            self.censor_y_terms,
            self.arm_terms,
        ):
            for term in terms:
                for factor in term.split(":"):
                    _check_factor(factor, n_covariates)
        if any("l" in t.split(":") for t in self.outcome_terms_w + self.censor_l_terms):
            raise EstimationError("L cannot enter models that condition only on (A, W)")
        if any(f in ("a", "l") for t in self.arm_terms for f in t.split(":")):
            raise EstimationError("the arm model may depend on W only")


def _check_factor(factor: str, k: int) -> None:
    if factor in ("a", "l"):
        return
    if factor.startswith("w") and factor[1:].isdigit() and 1 <= int(factor[1:]) <= k:
        return
    raise EstimationError(f"unknown or out-of-range term {factor!r}")


def design_matrix(terms, w: np.ndarray, a: np.ndarray, l: np.ndarray | None = None) -> np.ndarray:
    """Intercept column followed by one column per term."""
    n = w.shape[0]
    cols = [np.ones(n)]
    for term in terms:
        col = np.ones(n)
        for factor in term.split(":"):
            if factor == "a":
                col = col * a
            elif factor == "l":
                if l is None:
                    raise EstimationError("term uses L but L is unavailable")
                col = col * l
            else:
                col = col * w[:, int(factor[1:]) - 1]
        cols.append(col)
    return np.column_stack(cols)


def _drop_arm_terms(terms) -> tuple[str, ...]:
    return tuple(t for t in terms if "a" not in t.split(":"))


@dataclass(frozen=True)
class EstimateResult:
    delta_hat: float
    variance_hat: float
    n_enrolled: int
    estimator_kind: str
    arm_means: tuple[float, float] = (float("nan"), float("nan"))
    flags: tuple[str, ...] = ()
    eif: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if not self.variance_hat > 0:
            raise EstimationError("degenerate variance estimate")

    @property
    def information(self) -> float:
        return 1.0 / self.variance_hat

    def to_dict(self) -> dict:
        return {
            "delta_hat": self.delta_hat,
            "variance_hat": self.variance_hat,
            "information": self.information,
            "n_enrolled": self.n_enrolled,
            "estimator_kind": self.estimator_kind,
            "arm_means": list(self.arm_means),
            "flags": list(self.flags),
        }


def wald_statistic(e: EstimateResult) -> float:
    if not e.variance_hat > 0:
        raise EstimationError("degenerate variance estimate")
    return e.delta_hat / np.sqrt(e.variance_hat)


# -- unadjusted --------------------------------------------------------------


def unadjusted_arm_mean(s: AnalysisSnapshot, arm: int) -> tuple[float, float]:
    """Observed-outcome mean in ``arm`` and its estimated variance."""
    mask = (s.data.a == arm) & (s.c_y == 1)
    m = int(mask.sum())
    if m == 0:
        raise EstimationError(f"no observed primary outcome in arm {arm}")
    y = s.data.y[mask].astype(float)
    mean = float(y.mean())
    var = float(y.var(ddof=1)) / m if m > 1 else 0.0
    return mean, var


def unadjusted_ate(s: AnalysisSnapshot) -> EstimateResult:
    m1, v1 = unadjusted_arm_mean(s, 1)
    m0, v0 = unadjusted_arm_mean(s, 0)
    flags = tuple(f"arm{k}_zero_variance" for k, v in ((0, v0), (1, v1)) if v == 0)
    return EstimateResult(m1 - m0, v1 + v0, s.n, "unadjusted", (m0, m1), flags)


# -- TMLE --------------------------------------------------------------------


def _propensity(x, response, rows=None) -> np.ndarray:
    """Fitted P(response = 1) for all rows of ``x``, floored at PROB_FLOOR.

    A constant response among the fitting rows gives exactly that constant;
    this keeps fully observed data from being perturbed by a clipped fit.
    """
    r = response if rows is None else response[rows]
    xr = x if rows is None else x[rows]
    if np.all(r == 1):
        return np.ones(x.shape[0])
    if np.all(r == 0):
        return np.full(x.shape[0], PROB_FLOOR)
    fit = glm.fit_logistic(xr, r)
    return np.maximum(glm.predict_raw(fit, x), PROB_FLOOR)


def _fluctuate(y, offset, weights) -> tuple[float, bool]:
    """Weighted intercept-only logistic fit with offset; returns (epsilon, ok).

    A scalar Newton iteration with step halving; it solves
    sum(weights * (y - expit(offset + eps))) = 0.
    """
    wsum = weights.sum()
    if wsum <= 0:
        return 0.0, True
    eps = 0.0
    for _ in range(glm.MAX_ITER):
        mu = expit(offset + eps)
        score = float(np.dot(weights, y - mu))
        if abs(score) < glm.SCORE_TOL * max(1.0, wsum):
            return eps, True
        info = float(np.dot(weights, mu * (1 - mu)))
        if info <= 0:
            return eps, False
        step = score / info
        # halve until the score changes sign no more than once (monotone objective)
        t = 1.0
        while t > 1e-6:
            mu_c = expit(offset + eps + t * step)
            score_c = float(np.dot(weights, y - mu_c))
            if abs(score_c) < abs(score) or np.sign(score_c) != np.sign(score):
                break
            t *= 0.5
        eps += t * step
        if abs(eps) > glm.COEF_BOUND:
            return 0.0, False
    mu = expit(offset + eps)
    ok = abs(float(np.dot(weights, y - mu))) < 1e-6 * max(1.0, wsum)
    return (eps, True) if ok else (0.0, False)


def _arm_tmle(s: AnalysisSnapshot, spec: WorkingModelSpec, arm: int, cache: dict):
    data = s.data
    n = len(data)
    w, a, l, y = data.w, data.a.astype(float), data.l.astype(float), data.y.astype(float)
    c_l = s.c_l.astype(bool)
    c_y = s.c_y.astype(bool)
    flags = []

    g_a1 = cache["g_a1"]
    g_a = g_a1 if arm == 1 else np.maximum(1 - g_a1, PROB_FLOOR)
    g_cl = cache["g_cl"]
    g_cy = cache["g_cy"]

    in_arm = a == arm
    rows_l = in_arm & c_l
    rows_y = in_arm & c_y
    if not rows_l.any():
        raise EstimationError(f"no participant with L observed in arm {arm}")
    if not rows_y.any():
        raise EstimationError(f"no participant with Y observed in arm {arm}")

    # outcome regression E(Y | W, A, L), evaluated at A = arm where L is known
    q2_fit = cache["q2_fit"]
    a_set = np.full(n, float(arm))
    l_known = np.where(c_l, l, 0.0)
    x2 = design_matrix(spec.outcome_terms_lw, w, a_set, l_known)
    q2 = glm.predict_many(q2_fit, x2)
    off2 = glm.logit(q2)
    h2 = 1.0 / (g_a * g_cl * g_cy)
    eps2, ok = _fluctuate(y[rows_y], off2[rows_y], h2[rows_y])
    if not ok:
        flags.append(f"arm{arm}_q2_untargeted")
    q2_star = expit(off2 + eps2)

    # sequential regression of the targeted predictions on W within the arm
    terms_w = _drop_arm_terms(spec.outcome_terms_w)
    x1 = design_matrix(terms_w, w, a_set)
    q1_fit = glm.fit_logistic(x1[rows_l], q2_star[rows_l])
    if not q1_fit.converged:
        flags.append(f"arm{arm}_q1_nonconverged")
    q1 = glm.predict_many(q1_fit, x1)
    off1 = glm.logit(q1)
    h1 = 1.0 / (g_a * g_cl)
    eps1, ok = _fluctuate(q2_star[rows_l], off1[rows_l], h1[rows_l])
    if not ok:
        flags.append(f"arm{arm}_q1_untargeted")
    q1_star = expit(off1 + eps1)

    psi = float(q1_star.mean())
    eif = q1_star - psi
    eif = eif + np.where(rows_l, h1 * (q2_star - q1_star), 0.0)
    eif = eif + np.where(rows_y, h2 * (y - q2_star), 0.0)
    return psi, eif, flags


def _nuisance_cache(s: AnalysisSnapshot, spec: WorkingModelSpec) -> dict:
    data = s.data
    w, a, l, y = data.w, data.a.astype(float), data.l.astype(float), data.y.astype(float)
    c_l = s.c_l.astype(bool)
    c_y = s.c_y.astype(bool)
    l_known = np.where(c_l, l, 0.0)
    x_arm = design_matrix(spec.arm_terms, w, a)
    x_cl = design_matrix(spec.censor_l_terms, w, a)
    x_cy = design_matrix(spec.censor_y_terms, w, a, l_known)
    g_cy = np.ones(len(data))
    if c_l.any():
        g_cy = _propensity(x_cy, c_y.astype(float), rows=c_l)
    x2 = design_matrix(spec.outcome_terms_lw, w, a, l_known)
    q2_fit = glm.fit_logistic(x2[c_y], y[c_y])
    return {
        "g_a1": _propensity(x_arm, a),
        "g_cl": _propensity(x_cl, c_l.astype(float)),
        "g_cy": g_cy,
        "q2_fit": q2_fit,
    }


def tmle_ate(
    s: AnalysisSnapshot,
    spec: WorkingModelSpec | None = None,
    variance: str = "eif",
    n_boot: int = 200,
    seed: int | None = None,
) -> EstimateResult:
    """TMLE of E(Y | A=1) - E(Y | A=0) from an analysis snapshot.

    ``variance="bootstrap"`` replaces the influence-function variance with
    the variance of ``n_boot`` nonparametric bootstrap replicates (needs a
    seed).
    """
    if spec is None:
        spec = WorkingModelSpec.main_terms(s.data.n_covariates)
    spec.validate(s.data.n_covariates)
    for arm in (0, 1):
        if not np.any((s.data.a == arm) & (s.c_y == 1)):
            raise EstimationError(f"no observed primary outcome in arm {arm}")
    cache = _nuisance_cache(s, spec)
    if not cache["q2_fit"].converged:
        flags = ["q2_nonconverged"]
    else:
        flags = []
    psi1, eif1, f1 = _arm_tmle(s, spec, 1, cache)
    psi0, eif0, f0 = _arm_tmle(s, spec, 0, cache)
    flags += f0 + f1
    eif = eif1 - eif0
    n = s.n
    if variance == "eif":
        var = float(np.var(eif, ddof=1)) / n if n > 1 else 0.0
    elif variance == "bootstrap":
        var = bootstrap_variance(s, spec, n_boot=n_boot, seed=seed)
        flags.append("bootstrap_variance")
    else:
        raise ValueError(f"unknown variance method {variance!r}")
    return EstimateResult(psi1 - psi0, var, n, "tmle", (psi0, psi1), tuple(flags), eif)


def bootstrap_variance(
    s: AnalysisSnapshot, spec: WorkingModelSpec, n_boot: int = 200, seed: int | None = None
) -> float:
    if seed is None:
        raise ValueError("bootstrap variance needs an explicit seed")
    rng = np.random.default_rng(seed)
    n = s.n
    reps = []
    for _ in range(n_boot):
        idx = rng.integers(0, n, n)
        try:
            boot = AnalysisSnapshot(s.data.subset(idx), s.c_l[idx], s.c_y[idx], s.analysis_time)
            reps.append(tmle_ate(boot, spec).delta_hat)
        except (EstimationError, ValueError):
            continue
    if len(reps) < 2:
        raise EstimationError("bootstrap failed")
    return float(np.var(reps, ddof=1))


ESTIMATORS = {
    "unadjusted": lambda s, spec=None: unadjusted_ate(s),
    "tmle": lambda s, spec=None: tmle_ate(s, spec),
}


def estimate(s: AnalysisSnapshot, kind: str, spec: WorkingModelSpec | None = None) -> EstimateResult:
    try:
        fn = ESTIMATORS[kind]
    except KeyError:
        raise ValueError(f"unknown estimator {kind!r}") from None
    return fn(s, spec)


@dataclass(frozen=True)
class OutcomeFits:
    """Predictions used by the plug-in precision summary."""

    q_w: dict  # arm -> E(Y | W, A=arm) from the pooled main-terms fit, all rows
    q_lw: dict  # arm -> E(Y | W, L, A=arm) from the pooled main-terms fit, all rows
    q_w_arm: dict  # arm -> E(Y | W, A=arm) from an arm-specific fit, all rows


def fit_outcome_models(s: AnalysisSnapshot, spec: WorkingModelSpec) -> OutcomeFits:
    data = s.data
    n = len(data)
    w, a, l, y = data.w, data.a.astype(float), data.l.astype(float), data.y.astype(float)
    c_y = s.c_y.astype(bool)
    c_l = s.c_l.astype(bool)
    l_known = np.where(c_l, l, 0.0)
    fit_w = glm.fit_logistic(design_matrix(spec.outcome_terms_w, w, a)[c_y], y[c_y])
    fit_lw = glm.fit_logistic(design_matrix(spec.outcome_terms_lw, w, a, l_known)[c_y], y[c_y])
    terms_arm = _drop_arm_terms(spec.outcome_terms_w)
    q_w, q_lw, q_w_arm = {}, {}, {}
    for arm in (0, 1):
        a_set = np.full(n, float(arm))
        q_w[arm] = glm.predict_raw(fit_w, design_matrix(spec.outcome_terms_w, w, a_set))
        q_lw[arm] = glm.predict_raw(fit_lw, design_matrix(spec.outcome_terms_lw, w, a_set, l_known))
        rows = c_y & (a == arm)
        x_arm = design_matrix(terms_arm, w, a_set)
        q_w_arm[arm] = glm.predict_raw(glm.fit_logistic(x_arm[rows], y[rows]), x_arm)
    return OutcomeFits(q_w, q_lw, q_w_arm)
