"""Error-spending group sequential designs with delayed responses.

At interim analysis k the enrollment decision uses S_k; if enrollment stops,
the pipeline is followed up and the hypothesis test uses the decision
statistic S~_k against c_k.  Boundaries come from Type I and Type II
spending functions evaluated at information fractions, with every
multivariate normal probability computed by a separation-of-variables
Monte Carlo integrator that reuses one block of uniforms (common random
numbers), so each boundary equation is a smooth monotone function of the
boundary being solved.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr, ndtri

from . import dgm as dgm_mod
from . import parallel
from .estimators import EstimationError, WorkingModelSpec, estimate, wald_statistic
from .glm import GLMError
from .trial import DelayConfig, SnapshotError, TrialData, complete_snapshot, snapshot_at

BRACKET = 10.0
BISECTION_STEPS = 60
DEFAULT_DRAWS = 20000


class DesignError(ValueError):
    pass


class DesignSaturatedError(DesignError):
    """Futility boundary meets or crosses the efficacy boundary."""


class NotPositiveDefiniteError(ValueError):
    pass


# -- design inputs and models ---------------------------------------------------


@dataclass(frozen=True)
class ErrorSpendingSpec:
    """Spending functions ``alpha * min(t**rho, 1)`` and ``beta * min(t**rho, 1)``."""

    k_stages: int = 5
    alpha: float = 0.025
    beta: float = 0.2
    delta_alt: float = dgm_mod.EFFECT_SIZE
    f_rho: float = 2.0
    g_rho: float = 2.0
    i_max: float | None = None

    def __post_init__(self):
        if self.k_stages < 2:
            raise ValueError("need at least two stages")
        if not (0 < self.alpha < 1 and 0 < self.beta < 1):
            raise ValueError("alpha and beta must lie in (0, 1)")
        if not self.delta_alt > 0:
            raise ValueError("delta_alt must be positive")
        if self.f_rho <= 0 or self.g_rho <= 0:
            raise ValueError("spending exponents must be positive")

    def f(self, t: float) -> float:
        return self.alpha * min(max(t, 0.0) ** self.f_rho, 1.0)

    def g(self, t: float) -> float:
        return self.beta * min(max(t, 0.0) ** self.g_rho, 1.0)

    def to_dict(self) -> dict:
        return {
            "k_stages": self.k_stages,
            "alpha": self.alpha,
            "beta": self.beta,
            "delta_alt": self.delta_alt,
            "f_rho": self.f_rho,
            "g_rho": self.g_rho,
            "i_max": self.i_max,
        }


def analysis_labels(k_stages: int) -> tuple[str, ...]:
    return tuple(f"interim{k}" for k in range(1, k_stages)) + tuple(
        f"decision{k}" for k in range(1, k_stages + 1)
    )


@dataclass(frozen=True, eq=False)
class JointStatisticModel:
    """Joint normal model of the Wald statistics at all analyses.

    Order: interims 1..K-1 then decisions 1..K.  The mean of each statistic
    is ``drift * Delta``.
    """

    labels: tuple[str, ...]
    info: np.ndarray
    corr: np.ndarray
    drift: np.ndarray

    def __post_init__(self):
        info = np.asarray(self.info, dtype=float)
        corr = np.asarray(self.corr, dtype=float)
        drift = np.asarray(self.drift, dtype=float)
        object.__setattr__(self, "info", info)
        object.__setattr__(self, "corr", corr)
        object.__setattr__(self, "drift", drift)
        d = len(self.labels)
        if d % 2 != 1 or info.shape != (d,) or drift.shape != (d,) or corr.shape != (d, d):
            raise ValueError("model dimensions disagree")
        if tuple(self.labels) != analysis_labels(self.k_stages):
            raise ValueError("labels must be interims 1..K-1 then decisions 1..K")
        if np.max(np.abs(np.diag(corr) - 1)) > 1e-9 or np.max(np.abs(corr - corr.T)) > 1e-9:
            raise ValueError("corr must be symmetric with unit diagonal")
        if np.min(np.linalg.eigvalsh(corr)) < -1e-8:
            raise NotPositiveDefiniteError("corr is not positive semidefinite")
        if np.any(info <= 0):
            raise ValueError("information must be positive")

    @property
    def k_stages(self) -> int:
        return (len(self.labels) + 1) // 2

    def interim_index(self, k: int) -> int:
        return k - 1

    def decision_index(self, k: int) -> int:
        return self.k_stages - 1 + k - 1

    def to_dict(self) -> dict:
        return {
            "labels": list(self.labels),
            "info": self.info.tolist(),
            "corr": self.corr.tolist(),
            "drift": self.drift.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "JointStatisticModel":
        return cls(tuple(d["labels"]), np.array(d["info"]), np.array(d["corr"]), np.array(d["drift"]))


def canonical_model(interim_info, decision_info) -> JointStatisticModel:
    """Independent-increments model: corr = sqrt(I_small / I_large)."""
    interim_info = np.asarray(interim_info, dtype=float)
    decision_info = np.asarray(decision_info, dtype=float)
    k = len(decision_info)
    if len(interim_info) != k - 1:
        raise ValueError("need K-1 interim and K decision information levels")
    info = np.concatenate([interim_info, decision_info])
    lo = np.minimum.outer(info, info)
    hi = np.maximum.outer(info, info)
    return JointStatisticModel(analysis_labels(k), info, np.sqrt(lo / hi), np.sqrt(info))


@dataclass(frozen=True)
class DesignBoundaries:
    u: np.ndarray
    l: np.ndarray
    c: np.ndarray
    info_fractions: np.ndarray = field(default=None)
    type_i_spent: np.ndarray = field(default=None)
    type_ii_spent: np.ndarray = field(default=None)

    def __post_init__(self):
        for name in ("u", "l", "c"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if len(self.u) != len(self.l) or len(self.c) != len(self.u) + 1:
            raise ValueError("need K-1 interim boundaries and K critical values")
        if np.any(self.l >= self.u):
            raise DesignSaturatedError("design saturated: futility boundary reaches efficacy boundary")

    @property
    def k_stages(self) -> int:
        return len(self.c)

    def to_dict(self) -> dict:
        def clean(v):
            return None if v is None else [float(x) if np.isfinite(x) else None for x in v]

        return {
            "u": clean(self.u),
            "l": clean(self.l),
            "c": clean(self.c),
            "info_fractions": clean(self.info_fractions),
            "type_i_spent": clean(self.type_i_spent),
            "type_ii_spent": clean(self.type_ii_spent),
        }


# -- multivariate normal rectangle probabilities ------------------------------


def _cholesky(corr: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(corr)
    except np.linalg.LinAlgError:
        pass
    try:
        return np.linalg.cholesky(corr + 1e-10 * np.eye(len(corr)))
    except np.linalg.LinAlgError:
        raise NotPositiveDefiniteError("matrix is not positive semidefinite") from None


def _clip_unit(p):
    return np.clip(p, 1e-16, 1 - 1e-16)


class GenzIntegrator:
    """Separation-of-variables estimator over a fixed block of uniforms."""

    def __init__(self, n_draws: int = DEFAULT_DRAWS, seed: int = 0, max_dim: int = 16):
        if n_draws < 2:
            raise ValueError("n_draws must be at least 2")
        self.uniforms = np.random.default_rng(seed).random((n_draws, max_dim))

    def prefix(self, chol, mean, lower, upper):
        """Weights and sampled standardized values for the first ``len(lower)`` coordinates.

        Returns ``(f, y)`` where ``f`` is the per-draw probability of the
        rectangle on those coordinates and ``y`` the draws that condition
        later coordinates.
        """
        d = len(lower)
        m = self.uniforms.shape[0]
        if d > self.uniforms.shape[1]:
            raise ValueError("dimension exceeds integrator capacity")
        f = np.ones(m)
        y = np.zeros((m, d))
        for i in range(d):
            shift = mean[i] + y[:, :i] @ chol[i, :i]
            sd = chol[i, i]
            lo = ndtr((lower[i] - shift) / sd)
            hi = ndtr((upper[i] - shift) / sd)
            width = np.maximum(hi - lo, 0.0)
            f = f * width
            y[:, i] = ndtri(_clip_unit(lo + self.uniforms[:, i] * width))
        return f, y

    def conditional(self, chol, mean, y, index):
        """Conditional mean and sd of coordinate ``index`` given the prefix draws."""
        return mean[index] + y @ chol[index, :index], chol[index, index]

    def probability(self, corr, mean, lower, upper) -> tuple[float, float]:
        corr = np.asarray(corr, dtype=float)
        chol = _cholesky(corr)
        f, _ = self.prefix(chol, np.asarray(mean, float), np.asarray(lower, float), np.asarray(upper, float))
        return float(f.mean()), float(f.std(ddof=1) / np.sqrt(len(f)))


def mvn_rect_prob(corr, mean, lower, upper, n_draws: int = DEFAULT_DRAWS, seed: int = 0) -> tuple[float, float]:
    """P(lower <= X <= upper) for X ~ N(mean, corr); returns (estimate, MC standard error)."""
    corr = np.atleast_2d(np.asarray(corr, dtype=float))
    mean, lower, upper = (np.atleast_1d(np.asarray(v, dtype=float)) for v in (mean, lower, upper))
    d = corr.shape[0]
    if corr.shape != (d, d) or not (len(mean) == len(lower) == len(upper) == d):
        raise ValueError("dimensions disagree")
    return GenzIntegrator(n_draws, seed, max_dim=d).probability(corr, mean, lower, upper)


# -- boundary solver -------------------------------------------------------------


def _bisect(fn, target: float, increasing: bool) -> float:
    """Solve fn(x) = target on [-BRACKET, BRACKET]."""
    lo, hi = -BRACKET, BRACKET
    for _ in range(BISECTION_STEPS):
        mid = 0.5 * (lo + hi)
        above = fn(mid) > target
        if above == increasing:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


def solve_boundaries(
    model: JointStatisticModel,
    spec: ErrorSpendingSpec,
    n_draws: int = DEFAULT_DRAWS,
    seed: int = 0,
) -> DesignBoundaries:
    """Stagewise error-spending boundaries for ``model``."""
    k_stages = spec.k_stages
    if model.k_stages != k_stages:
        raise DesignError("model and spec disagree on the number of stages")
    i_max = spec.i_max if spec.i_max is not None else model.info[model.decision_index(k_stages)]
    interim_info = model.info[: k_stages - 1]
    t = interim_info / i_max
    f_cum = np.array([spec.f(x) for x in t])
    g_cum = np.array([spec.g(x) for x in t])
    spend_i = np.diff(np.concatenate([[0.0], f_cum]))
    spend_ii = np.diff(np.concatenate([[0.0], g_cum]))
    integ = GenzIntegrator(n_draws, seed, max_dim=k_stages + 1)
    u = np.full(k_stages - 1, np.inf)
    l = np.full(k_stages - 1, -np.inf)
    c = np.full(k_stages, np.inf)
    delta = spec.delta_alt

    for k in range(1, k_stages):
        idx = list(range(k))
        chol = _cholesky(model.corr[np.ix_(idx, idx)])
        mean0 = np.zeros(k)
        mean1 = delta * model.drift[idx]
        f0, y0 = integ.prefix(chol, mean0, l[: k - 1], u[: k - 1])
        f1, y1 = integ.prefix(chol, mean1, l[: k - 1], u[: k - 1])
        m0, sd = integ.conditional(chol, mean0, y0, k - 1)
        m1, _ = integ.conditional(chol, mean1, y1, k - 1)
        if spend_i[k - 1] > f0.mean() + 1e-12 or spend_ii[k - 1] > f1.mean() + 1e-12:
            raise DesignError(f"infeasible spending at stage {k}: spent error exceeds what remains")
        if spend_i[k - 1] > 0:
            u[k - 1] = _bisect(lambda b: np.mean(f0 * ndtr((m0 - b) / sd)), spend_i[k - 1], increasing=False)
        if spend_ii[k - 1] > 0:
            l[k - 1] = _bisect(lambda b: np.mean(f1 * ndtr((b - m1) / sd)), spend_ii[k - 1], increasing=True)
        if l[k - 1] >= u[k - 1]:
            raise DesignSaturatedError(f"design saturated at stage {k}: l={l[k - 1]:.3f} >= u={u[k - 1]:.3f}")

        # decision critical value: balance rejections after a futility stop
        # against acceptances after an efficacy stop
        idx_c = idx + [model.decision_index(k)]
        chol_c = _cholesky(model.corr[np.ix_(idx_c, idx_c)])
        zero = np.zeros(k + 1)
        lo_e = np.concatenate([l[: k - 1], [u[k - 1]]])
        hi_e = np.concatenate([u[: k - 1], [np.inf]])
        lo_f = np.concatenate([l[: k - 1], [-np.inf]])
        hi_f = np.concatenate([u[: k - 1], [l[k - 1]]])
        fe, ye = integ.prefix(chol_c, zero, lo_e, hi_e)
        ff, yf = integ.prefix(chol_c, zero, lo_f, hi_f)
        me, sdc = integ.conditional(chol_c, zero, ye, k)
        mf, _ = integ.conditional(chol_c, zero, yf, k)

        def balance(b, fe=fe, me=me, ff=ff, mf=mf, sdc=sdc):
            return np.mean(fe * ndtr((b - me) / sdc)) - np.mean(ff * ndtr((mf - b) / sdc))

        c[k - 1] = _bisect(balance, 0.0, increasing=True)

    # final decision: whatever Type I error is left
    idx = list(range(k_stages - 1)) + [model.decision_index(k_stages)]
    chol = _cholesky(model.corr[np.ix_(idx, idx)])
    zero = np.zeros(k_stages)
    fk, yk = integ.prefix(chol, zero, l, u)
    mk, sdk = integ.conditional(chol, zero, yk, k_stages - 1)
    remaining = spec.alpha - f_cum[-1]
    if remaining > fk.mean() + 1e-12:
        raise DesignError("infeasible spending at the final decision")
    if remaining > 0:
        c[-1] = _bisect(lambda b: np.mean(fk * ndtr((mk - b) / sdk)), remaining, increasing=False)
    spend_i_all = np.concatenate([spend_i, [remaining]])
    spend_ii_all = np.concatenate([spend_ii, [spec.beta - g_cum[-1]]])
    return DesignBoundaries(u, l, c, np.concatenate([t, [1.0]]), spend_i_all, spend_ii_all)


# -- the stop / continue / decide procedure ------------------------------------


@dataclass(frozen=True)
class TrialOutcome:
    stop_stage: int
    reject: bool
    n_enrolled: int
    reason: str  # "efficacy", "futility", "final" or "failed"
    failed: bool = False


def sequential_decision(interim_stat, decision_stat, boundaries: DesignBoundaries) -> tuple[int, bool, str]:
    """Apply the procedure to statistics supplied lazily by stage.

    ``interim_stat(k)`` and ``decision_stat(k)`` are called only for the
    analyses the procedure actually reaches.
    """
    k_stages = boundaries.k_stages
    for k in range(1, k_stages):
        s = interim_stat(k)
        if s >= boundaries.u[k - 1] or s <= boundaries.l[k - 1]:
            reason = "efficacy" if s >= boundaries.u[k - 1] else "futility"
            return k, bool(decision_stat(k) >= boundaries.c[k - 1]), reason
    return k_stages, bool(decision_stat(k_stages) >= boundaries.c[-1]), "final"


@dataclass(frozen=True)
class AnalysisSchedule:
    interim_times: np.ndarray
    interim_enrolled: np.ndarray
    n_max: int

    @classmethod
    def for_trial(cls, enroll_time: np.ndarray, k_stages: int, cfg: DelayConfig) -> "AnalysisSchedule":
        """Interim k happens once k/K of the maximum sample has Y observed."""
        n_max = len(enroll_time)
        times, enrolled = [], []
        for k in range(1, k_stages):
            m_k = int(round(k * n_max / k_stages))
            if m_k < 1:
                raise DesignError("n_max too small for the number of stages")
            t = enroll_time[m_k - 1] + cfg.d_y
            times.append(t)
            enrolled.append(int(np.searchsorted(enroll_time, t, side="right")))
        return cls(np.array(times), np.array(enrolled), n_max)

    def enrolled_at_decision(self, k: int) -> int:
        k_stages = len(self.interim_times) + 1
        return self.n_max if k == k_stages else int(self.interim_enrolled[k - 1])


def _stats_for_trial(trial: TrialData, schedule: AnalysisSchedule, kind, cfg, working_spec):
    def interim(k):
        n_k = int(schedule.interim_enrolled[k - 1])
        snap = snapshot_at(trial.head(n_k), schedule.interim_times[k - 1], cfg)
        return estimate(snap, kind, working_spec)

    def decision(k):
        snap = complete_snapshot(trial.head(schedule.enrolled_at_decision(k)))
        return estimate(snap, kind, working_spec)

    return interim, decision


_FAILURES = (EstimationError, GLMError, SnapshotError, FloatingPointError)


def run_group_sequential(
    trial: TrialData,
    boundaries: DesignBoundaries,
    spec: ErrorSpendingSpec,
    estimator_kind: str,
    cfg: DelayConfig = DelayConfig(),
    working_spec: WorkingModelSpec | None = None,
) -> TrialOutcome:
    """Run one trial of ``len(trial)`` potential enrollees through the design."""
    schedule = AnalysisSchedule.for_trial(trial.enroll_time, spec.k_stages, cfg)
    interim, decision = _stats_for_trial(trial, schedule, estimator_kind, cfg, working_spec)
    try:
        stage, reject, reason = sequential_decision(
            lambda k: wald_statistic(interim(k)), lambda k: wald_statistic(decision(k)), boundaries
        )
    except _FAILURES:
        return TrialOutcome(0, False, 0, "failed", failed=True)
    return TrialOutcome(stage, reject, schedule.enrolled_at_decision(stage), reason)


# -- simulation ------------------------------------------------------------------


def _default_population():
    return dgm_mod.default_population()


def _path_worker(pop, dgm_cfg, n_max, k_stages, kinds, delay, seed, stream, index):
    trial = dgm_mod.sample_trial(pop, n_max, dgm_cfg, parallel.replicate_seed(seed, stream, index), delay.enroll_rate)
    schedule = AnalysisSchedule.for_trial(trial.enroll_time, k_stages, delay)
    n_lab = 2 * k_stages - 1
    out = np.full((len(kinds), 2, n_lab), np.nan)
    try:
        for j, kind in enumerate(kinds):
            interim, decision = _stats_for_trial(trial, schedule, kind, delay, None)
            for k in range(1, k_stages):
                e = interim(k)
                out[j, :, k - 1] = (e.delta_hat, e.variance_hat)
            for k in range(1, k_stages + 1):
                e = decision(k)
                out[j, :, k_stages - 2 + k] = (e.delta_hat, e.variance_hat)
    except _FAILURES:
        out[:] = np.nan
    return out


@dataclass(frozen=True, eq=False)
class AnalysisPaths:
    """Estimates and variances at every analysis of no-stopping trials.

    ``delta`` and ``variance`` have shape (n_estimators, m_trials, 2K-1).
    """

    kinds: tuple[str, ...]
    delta: np.ndarray
    variance: np.ndarray
    n_failed: int

    def wald(self, kind: str) -> np.ndarray:
        j = self.kinds.index(kind)
        return self.delta[j] / np.sqrt(self.variance[j])

    def relative_efficiency(self, numerator: str = "unadjusted", denominator: str = "tmle") -> np.ndarray:
        """Empirical variance ratio of the two estimators at each analysis."""
        a = np.var(self.delta[self.kinds.index(numerator)], axis=0, ddof=1)
        b = np.var(self.delta[self.kinds.index(denominator)], axis=0, ddof=1)
        return a / b

    def information(self, kind: str) -> np.ndarray:
        return np.mean(1.0 / self.variance[self.kinds.index(kind)], axis=0)


def simulate_analysis_paths(
    dgm_cfg: dgm_mod.DgmConfig,
    n_max: int,
    k_stages: int,
    kinds=("unadjusted", "tmle"),
    m_trials: int = 2000,
    seed: int = 0,
    workers: int = 1,
    pop=None,
    delay: DelayConfig = DelayConfig(),
    stream: int = parallel.STREAM_COVARIANCE,
) -> AnalysisPaths:
    """Simulate full-enrollment trials and evaluate every analysis for each estimator."""
    pop = pop or _default_population()
    kinds = tuple(kinds)
    args = [(pop, dgm_cfg, n_max, k_stages, kinds, delay, seed, stream, i) for i in range(m_trials)]
    res = np.array(parallel.ordered_map(_path_worker, args, workers))
    ok = ~np.isnan(res).any(axis=(1, 2, 3))
    res = res[ok]
    return AnalysisPaths(kinds, np.moveaxis(res[:, :, 0, :], 0, 1), np.moveaxis(res[:, :, 1, :], 0, 1), int((~ok).sum()))


def model_from_paths(paths: AnalysisPaths, kind: str, information: str = "empirical") -> JointStatisticModel:
    """Joint model of the Wald statistics from simulated analysis paths.

    ``information="empirical"`` takes the information at each analysis as
    the reciprocal of the across-trial variance of the estimate.
    ``"estimated"`` averages the reciprocal of the per-trial variance
    estimates instead, which at small sample sizes credits the adjusted
    estimator with more precision than it delivers.
    """
    j = paths.kinds.index(kind)
    if information == "empirical":
        info = 1.0 / np.var(paths.delta[j], axis=0, ddof=1)
    elif information == "estimated":
        info = np.mean(1.0 / paths.variance[j], axis=0)
    else:
        raise ValueError(f"unknown information source {information!r}")
    z = paths.delta[j] / np.sqrt(paths.variance[j])
    corr = np.corrcoef(z, rowvar=False)
    corr = 0.5 * (corr + corr.T)
    np.fill_diagonal(corr, 1.0)
    k_stages = (z.shape[1] + 1) // 2
    return JointStatisticModel(analysis_labels(k_stages), info, corr, np.sqrt(info))


def estimate_joint_covariance(
    dgm_cfg: dgm_mod.DgmConfig,
    n_max: int,
    spec: ErrorSpendingSpec,
    estimator_kind: str,
    m_trials: int = 2000,
    seed: int = 0,
    workers: int = 1,
    pop=None,
    delay: DelayConfig = DelayConfig(),
    information: str = "empirical",
) -> JointStatisticModel:
    """Empirical joint model of the statistics under no effect."""
    if m_trials < 1000:
        raise ValueError("m_trials must be at least 1000")
    paths = simulate_analysis_paths(
        dgm_cfg.with_delta(0.0), n_max, spec.k_stages, (estimator_kind,), m_trials, seed, workers, pop, delay
    )
    if paths.n_failed > 0.01 * m_trials:
        raise EstimationError(f"estimator failed in {paths.n_failed} of {m_trials} trials")
    return model_from_paths(paths, estimator_kind, information)


@dataclass(frozen=True)
class OperatingCharacteristics:
    type_i: float
    power: float
    ess_null: float
    ess_alt: float
    stop_stage_dist: dict  # "null"/"alt" -> list of stopping-stage fractions
    n_trials: int
    n_failed: int
    n_max: int
    estimator_kind: str
    setting: str

    def to_dict(self) -> dict:
        return {
            "estimator": self.estimator_kind,
            "setting": self.setting,
            "n_max": self.n_max,
            "type_i": self.type_i,
            "power": self.power,
            "ess_null": self.ess_null,
            "ess_alt": self.ess_alt,
            "stop_stage_dist": self.stop_stage_dist,
            "n_trials": self.n_trials,
            "n_failed": self.n_failed,
        }


def _trial_worker(pop, dgm_cfg, n_max, boundaries, spec, kind, delay, seed, stream, index):
    trial = dgm_mod.sample_trial(pop, n_max, dgm_cfg, parallel.replicate_seed(seed, stream, index), delay.enroll_rate)
    return run_group_sequential(trial, boundaries, spec, kind, delay)


def simulate_trials(
    dgm_cfg, boundaries, spec, estimator_kind, n_max, n_trials, seed, stream, workers=1, pop=None, delay=DelayConfig()
) -> list[TrialOutcome]:
    pop = pop or _default_population()
    args = [(pop, dgm_cfg, n_max, boundaries, spec, estimator_kind, delay, seed, stream, i) for i in range(n_trials)]
    return parallel.ordered_map(_trial_worker, args, workers)


def summarize_outcomes(outcomes: list[TrialOutcome], k_stages: int) -> tuple[float, float, list[float], int]:
    good = [o for o in outcomes if not o.failed]
    if not good:
        raise EstimationError("every simulated trial failed")
    rej = float(np.mean([o.reject for o in good]))
    ess = float(np.mean([o.n_enrolled for o in good]))
    dist = np.bincount([o.stop_stage for o in good], minlength=k_stages + 1)[1:] / len(good)
    return rej, ess, dist.tolist(), len(outcomes) - len(good)


@dataclass(frozen=True)
class DesignRun:
    """Everything produced by one end-to-end operating-characteristics run."""

    oc: OperatingCharacteristics
    model: JointStatisticModel
    boundaries: DesignBoundaries
    outcomes_null: list
    outcomes_alt: list


def run_design(
    dgm_cfg: dgm_mod.DgmConfig,
    spec: ErrorSpendingSpec,
    estimator_kind: str,
    n_max: int,
    n_trials: int = 5000,
    seed: int = 0,
    workers: int = 1,
    m_trials: int = 2000,
    pop=None,
    delay: DelayConfig = DelayConfig(),
    model: JointStatisticModel | None = None,
    n_draws: int = DEFAULT_DRAWS,
    information: str = "empirical",
) -> DesignRun:
    pop = pop or _default_population()
    if model is None:
        model = estimate_joint_covariance(
            dgm_cfg, n_max, spec, estimator_kind, m_trials, seed, workers, pop, delay, information
        )
    boundaries = solve_boundaries(model, spec, n_draws=n_draws, seed=seed)
    runs = {}
    for label, delta, stream in (("null", 0.0, parallel.STREAM_NULL), ("alt", dgm_mod.EFFECT_SIZE, parallel.STREAM_ALT)):
        runs[label] = simulate_trials(
            dgm_cfg.with_delta(delta), boundaries, spec, estimator_kind, n_max, n_trials, seed, stream, workers, pop, delay
        )
    type_i, ess_null, dist_null, fail_null = summarize_outcomes(runs["null"], spec.k_stages)
    power, ess_alt, dist_alt, fail_alt = summarize_outcomes(runs["alt"], spec.k_stages)
    oc = OperatingCharacteristics(
        type_i=type_i,
        power=power,
        ess_null=ess_null,
        ess_alt=ess_alt,
        stop_stage_dist={"null": dist_null, "alt": dist_alt},
        n_trials=n_trials,
        n_failed=fail_null + fail_alt,
        n_max=n_max,
        estimator_kind=estimator_kind,
        setting=dgm_cfg.setting,
    )
    return DesignRun(oc, model, boundaries, runs["null"], runs["alt"])


def simulate_operating_characteristics(
    dgm_cfg, spec, estimator_kind, n_max, n_trials=5000, seed=0, workers=1, **kwargs
) -> OperatingCharacteristics:
    """Covariance precompute, boundaries, then trials under no effect and the alternative."""
    return run_design(dgm_cfg, spec, estimator_kind, n_max, n_trials, seed, workers, **kwargs).oc


def search_n_max(
    dgm_cfg,
    spec,
    estimator_kind,
    target_power: float = 0.8,
    n_trials_per_probe: int = 2000,
    seed: int = 0,
    workers: int = 1,
    m_trials: int = 1000,
    bracket: tuple[int, int] = (100, 1000),
    step: int = 10,
    pop=None,
    delay: DelayConfig = DelayConfig(),
) -> tuple[int, list]:
    """Smallest n_max on the grid whose simulated power reaches target - 0.01.

    Returns ``(n_max, probes)`` where probes lists ``(n_max, power)``.  A
    saturated design (futility meets efficacy) is more than powered and
    counts as reaching the target.
    """
    if not 0 < target_power < 1:
        raise ValueError("target_power must lie in (0, 1)")
    pop = pop or _default_population()
    grid = list(range(bracket[0], bracket[1] + 1, step))
    threshold = target_power - 0.01
    probes = []
    cache = {}

    def power_at(n):
        if n not in cache:
            try:
                model = estimate_joint_covariance(dgm_cfg, n, spec, estimator_kind, m_trials, seed, workers, pop, delay)
                b = solve_boundaries(model, spec, seed=seed)
                outs = simulate_trials(
                    dgm_cfg.with_delta(dgm_mod.EFFECT_SIZE), b, spec, estimator_kind, n,
                    n_trials_per_probe, seed, parallel.STREAM_ALT, workers, pop, delay,
                )
                cache[n] = summarize_outcomes(outs, spec.k_stages)[0]
            except DesignSaturatedError:
                cache[n] = 1.0
            probes.append((n, cache[n]))
        return cache[n]

    if power_at(grid[-1]) < threshold:
        raise DesignError("bracket exhausted: power below target at the largest n_max")
    lo, hi = 0, len(grid) - 1
    while lo < hi:
        mid = (lo + hi) // 2
        if power_at(grid[mid]) >= threshold:
            hi = mid
        else:
            lo = mid + 1
    return grid[lo], probes


