"""Closed-form precision quantities for covariate-adjusted estimation.

Everything here is either a direct formula in (R^2_W, R^2_{L|W}, gamma,
p_y, p_l) or an exact enumeration over a finite joint law of (W, A, L, Y).
The enumeration routines are the oracle of record for the variance bound,
the efficient influence function and the variance decomposition.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Hashable, Mapping

import numpy as np

_EPS = 1e-12


class PrecisionError(ValueError):
    pass


@dataclass(frozen=True)
class ArmPrecision:
    r2_w: float
    r2_l_given_w: float
    r2_resid: float


@dataclass(frozen=True)
class PrecisionSummary:
    r2_w: float
    r2_l_given_w: float
    gamma: float
    per_arm: Mapping[int, ArmPrecision] = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {"r2_w": self.r2_w, "r2_l_given_w": self.r2_l_given_w, "gamma": self.gamma}
        out["per_arm"] = {
            str(a): {"r2_w": v.r2_w, "r2_l_given_w": v.r2_l_given_w, "r2_resid": v.r2_resid}
            for a, v in sorted(self.per_arm.items())
        }
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, obj: Mapping) -> "PrecisionSummary":
        per_arm = {int(a): ArmPrecision(**v) for a, v in obj.get("per_arm", {}).items()}
        return cls(float(obj["r2_w"]), float(obj["r2_l_given_w"]), float(obj["gamma"]), per_arm)


@dataclass(frozen=True)
class EifComponents:
    d0: float
    d1: float
    d2: float

    @property
    def total(self) -> float:
        return self.d0 + self.d1 + self.d2


# -- formulas ----------------------------------------------------------------


def _check_fractions(p_y: float, p_l: float) -> None:
    if not (0 < p_y <= p_l + _EPS and p_l <= 1 + _EPS):
        raise PrecisionError(f"need 0 < p_y <= p_l <= 1, got p_y={p_y}, p_l={p_l}")


def are_ate(p: PrecisionSummary, p_y: float, p_l: float) -> float:
    """Efficient-vs-unadjusted relative efficiency for the treatment effect."""
    _check_fractions(p_y, p_l)
    # fsum rounds the exact sum once, so algebraically equal inputs give equal results
    denom = math.fsum([1.0, -p.r2_w, (p_y / 2) * p.gamma, -p.r2_l_given_w, (p_y / p_l) * p.r2_l_given_w])
    if denom <= 0 or denom > 1 + 1e-9:
        raise PrecisionError(f"inconsistent summary (denominator {denom:.6g})")
    return 1.0 / denom


def are_arm(p: PrecisionSummary, arm: int, p_a: float, p_y: float, p_l: float) -> float:
    """Relative efficiency for the treatment-specific mean E(Y | A=arm)."""
    _check_fractions(p_y, p_l)
    if not 0 < p_a < 1:
        raise PrecisionError("p_a must lie in (0, 1)")
    s = p.per_arm[arm]
    denom = 1 - (1 - p_a * p_y) * s.r2_w - (1 - p_y / p_l) * s.r2_l_given_w
    if denom <= 0:
        raise PrecisionError(f"inconsistent summary (denominator {denom:.6g})")
    return 1.0 / denom


def aerss(are: float) -> float:
    """Asymptotic equivalent reduction in sample size, ``1 - 1/ARE``."""
    if are < 1 - 1e-12:
        raise PrecisionError("ARE below 1")
    return 1.0 - 1.0 / are


def ratio_r(p_y: float, p_l: float) -> float:
    """Ratio of sample-size reductions, prognostic W versus equally prognostic L."""
    _check_fractions(p_y, p_l)
    if abs(p_l - p_y) < _EPS:
        raise PrecisionError("r undefined (no L-only participants)")
    return (1 - p_y / 2) / (1 - p_y / p_l)


# -- finite joint laws -------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DiscreteDistribution:
    """Finite joint law of (W, A, L, Y) with A independent of W.

    ``support`` is a sequence of ``(w, a, l, y)`` tuples; ``w`` may be any
    hashable value.  ``probs`` are the matching point masses.
    """

    support: tuple
    probs: np.ndarray
    p_a: float

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=float)
        object.__setattr__(self, "probs", probs)
        object.__setattr__(self, "support", tuple(tuple(s) for s in self.support))
        if len(probs) != len(self.support):
            raise PrecisionError("support and probabilities differ in length")
        if np.any(probs < 0) or abs(probs.sum() - 1) > 1e-10:
            raise PrecisionError("probabilities must be nonnegative and sum to 1")
        if not 0 < self.p_a < 1:
            raise PrecisionError("p_a must lie in (0, 1)")
        w_values = sorted({s[0] for s in self.support}, key=repr)
        object.__setattr__(self, "w_values", tuple(w_values))
        code = {w: i for i, w in enumerate(w_values)}
        object.__setattr__(self, "w_code", np.array([code[s[0]] for s in self.support]))
        object.__setattr__(self, "a", np.array([s[1] for s in self.support], dtype=int))
        object.__setattr__(self, "l", np.array([s[2] for s in self.support], dtype=int))
        object.__setattr__(self, "y", np.array([s[3] for s in self.support], dtype=float))
        # randomization: P(W=w, A=a) = P(W=w) p_a^a (1-p_a)^(1-a)
        pw = self.p_w
        for a, pa in ((1, self.p_a), (0, 1 - self.p_a)):
            pwa = np.bincount(self.w_code[self.a == a], probs[self.a == a], len(w_values))
            if np.max(np.abs(pwa - pw * pa)) > 1e-10:
                raise PrecisionError("A is not independent of W with P(A=1)=p_a")

    @property
    def p_w(self) -> np.ndarray:
        return np.bincount(self.w_code, self.probs, len(self.w_values))

    @classmethod
    def from_conditionals(
        cls,
        p_w: Mapping[Hashable, float],
        p_ly: Mapping[tuple, Mapping[tuple, float]],
        p_a: float = 0.5,
    ) -> "DiscreteDistribution":
        """Build from P(W) and P(L, Y | W, A); ``p_ly[(w, a)][(l, y)]``."""
        support, probs = [], []
        for w, pw in p_w.items():
            for a, pa in ((0, 1 - p_a), (1, p_a)):
                for (l, y), q in p_ly[(w, a)].items():
                    if q > 0:
                        support.append((w, a, l, y))
                        probs.append(pw * pa * q)
        return cls(tuple(support), np.array(probs), p_a)

    def index_of(self, w) -> int:
        try:
            return self.w_values.index(w)
        except ValueError:
            raise PrecisionError(f"observation off-support: w={w!r}") from None


@dataclass(frozen=True)
class _ArmLaw:
    """Conditional-expectation tables for one arm."""

    p_w: np.ndarray  # P(W=w)
    q_w: np.ndarray  # E_a(Y | W=w)
    q_lw: np.ndarray  # E_a(Y | L=l, W=w), shape (n_w, 2); nan where P(l|w,a)=0
    p_l_w: np.ndarray  # P(L=l | W=w, A=a), shape (n_w, 2)
    mean: float
    var_y: float
    v_w: float
    v_lw: float
    v_resid: float


def _arm_law(d: DiscreteDistribution, arm: int) -> _ArmLaw:
    m = d.a == arm
    nw = len(d.w_values)
    pr = d.probs[m]
    wc, l, y = d.w_code[m], d.l[m], d.y[m]
    p_wa = np.bincount(wc, pr, nw)
    p_w = p_wa / p_wa.sum()
    with np.errstate(invalid="ignore", divide="ignore"):
        q_w = np.bincount(wc, pr * y, nw) / p_wa
        p_wl = np.zeros((nw, 2))
        s_wl = np.zeros((nw, 2))
        np.add.at(p_wl, (wc, l), pr)
        np.add.at(s_wl, (wc, l), pr * y)
        q_lw = np.where(p_wl > 0, s_wl / np.where(p_wl > 0, p_wl, 1), np.nan)
        p_l_w = p_wl / p_wa[:, None]
    cond = pr / pr.sum()  # law of (W, L, Y) given A=arm
    mean = float(np.dot(cond, y))
    var_y = float(np.dot(cond, (y - mean) ** 2))
    qw_i = q_w[wc]
    qlw_i = q_lw[wc, l]
    v_w = float(np.dot(cond, (qw_i - mean) ** 2))
    v_lw = float(np.dot(cond, (qlw_i - qw_i) ** 2))
    v_resid = float(np.dot(cond, (y - qlw_i) ** 2))
    return _ArmLaw(p_w, q_w, q_lw, p_l_w, mean, var_y, v_w, v_lw, v_resid)


def decompose_variance(d: DiscreteDistribution, arm: int) -> tuple[float, float, float]:
    """Return ``(v_resid, v_l_given_w, v_w)``; they sum to Var_a(Y)."""
    law = _arm_law(d, arm)
    return law.v_resid, law.v_lw, law.v_w


def arm_variance(d: DiscreteDistribution, arm: int) -> float:
    return _arm_law(d, arm).var_y


def _effect_heterogeneity_var(d: DiscreteDistribution) -> tuple[float, float]:
    l0, l1 = _arm_law(d, 0), _arm_law(d, 1)
    pw = d.p_w
    cate = l1.q_w - l0.q_w
    mu = float(np.dot(pw, cate))
    var_cate = float(np.dot(pw, (cate - mu) ** 2))
    cov01 = float(np.dot(pw, (l1.q_w - l1.mean) * (l0.q_w - l0.mean)))
    return var_cate, cov01


def cross_arm_covariance(d: DiscreteDistribution) -> float:
    """Cov{E_1(Y|W), E_0(Y|W)}."""
    return _effect_heterogeneity_var(d)[1]


def summarize(d: DiscreteDistribution) -> PrecisionSummary:
    laws = {a: _arm_law(d, a) for a in (0, 1)}
    total = laws[0].var_y + laws[1].var_y
    if laws[0].var_y <= 0 or laws[1].var_y <= 0:
        raise PrecisionError("zero outcome variance within an arm")
    var_cate, _ = _effect_heterogeneity_var(d)
    per_arm = {
        a: ArmPrecision(law.v_w / law.var_y, law.v_lw / law.var_y, law.v_resid / law.var_y)
        for a, law in laws.items()
    }
    return PrecisionSummary(
        r2_w=(laws[0].v_w + laws[1].v_w) / total,
        r2_l_given_w=(laws[0].v_lw + laws[1].v_lw) / total,
        gamma=var_cate / total,
        per_arm=per_arm,
    )


def _arm_probs(d: DiscreteDistribution, p_a: float | None) -> dict[int, float]:
    p1 = d.p_a if p_a is None else p_a
    return {1: p1, 0: 1 - p1}


def variance_bound_ate(d: DiscreteDistribution, p_y: float, p_l: float) -> float:
    """Semiparametric variance lower bound for E(Y|A=1) - E(Y|A=0)."""
    _check_fractions(p_y, p_l)
    pa = _arm_probs(d, None)
    var_cate, _ = _effect_heterogeneity_var(d)
    out = var_cate
    for a in (0, 1):
        law = _arm_law(d, a)
        out += law.v_lw / (pa[a] * p_l) + law.v_resid / (pa[a] * p_y)
    return out


def variance_bound_arm(
    d: DiscreteDistribution, arm: int, p_a: float, p_y: float, p_l: float
) -> float:
    """Variance lower bound for the treatment-specific mean E(Y | A=arm).

    ``p_a`` is the probability of being randomized to ``arm``.
    """
    _check_fractions(p_y, p_l)
    if not 0 < p_a < 1:
        raise PrecisionError("p_a must lie in (0, 1)")
    pa = p_a
    law = _arm_law(d, arm)
    return law.v_w + law.v_lw / (pa * p_l) + law.v_resid / (pa * p_y)


def unadjusted_avar_ate(d: DiscreteDistribution, p_y: float) -> float:
    pa = _arm_probs(d, None)
    return sum(_arm_law(d, a).var_y / (pa[a] * p_y) for a in (0, 1))


def g_formula_ate(d: DiscreteDistribution, p_y: float, p_l: float) -> float:
    """Identified effect computed only from observed-data conditionals.

    Builds the joint law of (W, A, C^L, L, C^Y, Y) under independent,
    monotone censoring and evaluates
    E[E{E(Y | L, W, A=a, C^Y=1) | W, A=a, C^L=1}] for each arm.
    """
    _check_fractions(p_y, p_l)
    # censoring patterns and their probabilities
    patterns = ((1, 1, p_y), (1, 0, p_l - p_y), (0, 0, 1 - p_l))
    rows = []
    for i in range(len(d.probs)):
        for cl, cy, pc in patterns:
            if pc > 0:
                rows.append((d.w_code[i], d.a[i], cl, d.l[i], cy, d.y[i], d.probs[i] * pc))
    arr = np.array(rows, dtype=float)
    wc, a, cl, l, cy, y, pr = arr.T
    p_w = np.array([pr[wc == k].sum() for k in range(len(d.w_values))])
    result = {}
    for arm in (0, 1):
        total = 0.0
        for k in range(len(d.w_values)):
            m_l = (wc == k) & (a == arm) & (cl == 1)
            inner = 0.0
            for lv in (0, 1):
                m_wl = m_l & (l == lv)
                if pr[m_wl].sum() == 0:
                    continue
                m_y = m_wl & (cy == 1)
                q2 = np.dot(pr[m_y], y[m_y]) / pr[m_y].sum()
                inner += q2 * pr[m_wl].sum() / pr[m_l].sum()
            total += p_w[k] * inner
        result[arm] = total
    return result[1] - result[0]


# -- efficient influence function --------------------------------------------


def eif_arrays(
    d: DiscreteDistribution,
    w_code: np.ndarray,
    a: np.ndarray,
    c_l: np.ndarray,
    l: np.ndarray,
    c_y: np.ndarray,
    y: np.ndarray,
    p_y: float,
    p_l: float,
    p_a: float | None = None,
    arm: int | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized EIF pieces (D0, D1, D2) at many observations.

    With ``arm=None`` the estimand is the treatment effect; otherwise it is
    the treatment-specific mean of that arm.  ``p_a`` is P(A=1) and defaults
    to the randomization probability of ``d``.
    """
    pa = _arm_probs(d, p_a)
    laws = {k: _arm_law(d, k) for k in (0, 1)}
    arms = (1, 0) if arm is None else (arm,)
    sign = {1: 1.0, 0: -1.0} if arm is None else {arm: 1.0}
    n = len(a)
    d0, d1, d2 = np.zeros(n), np.zeros(n), np.zeros(n)
    l_safe = np.where(c_l == 1, l, 0)
    for k in arms:
        law = laws[k]
        ind = (a == k).astype(float)
        q_w = law.q_w[w_code]
        # cells off this arm's support only occur on rows the indicator zeroes out
        q_lw = np.nan_to_num(law.q_lw[w_code, l_safe])
        q_lw = np.where(c_l == 1, q_lw, 0.0)
        d0 += sign[k] * (q_w - law.mean)
        d1 += sign[k] * ind * c_l / (pa[k] * p_l) * np.where(c_l == 1, q_lw - q_w, 0.0)
        d2 += sign[k] * ind * c_y / (pa[k] * p_y) * np.where(c_y == 1, y - q_lw, 0.0)
    return d0, d1, d2


def eif_components(
    obs: tuple,
    d: DiscreteDistribution,
    p_a: float | None,
    p_y: float,
    p_l: float,
    arm: int | None = None,
) -> EifComponents:
    """EIF pieces at a single observation ``(w, a, c_l, l, c_y, y)``."""
    w, a, c_l, l, c_y, y = obs
    if c_y > c_l:
        raise PrecisionError("observation violates monotone censoring")
    k = d.index_of(w)
    if c_l:
        law = _arm_law(d, a)
        if law.p_l_w[k, l] <= 0:
            raise PrecisionError(f"observation off-support: (w, a, l)=({w!r}, {a}, {l})")
    if c_y:
        on = np.any((d.w_code == k) & (d.a == a) & (d.l == l) & (d.y == y))
        if not on:
            raise PrecisionError(f"observation off-support: {obs!r}")
    arrays = eif_arrays(
        d,
        np.array([k]),
        np.array([a]),
        np.array([c_l]),
        np.array([l]),
        np.array([c_y]),
        np.array([float(y)]),
        p_y,
        p_l,
        p_a=p_a,
        arm=arm,
    )
    return EifComponents(*(float(x[0]) for x in arrays))


def sample_observed(
    d: DiscreteDistribution, m: int, p_y: float, p_l: float, rng: np.random.Generator
) -> dict[str, np.ndarray]:
    """Draw ``m`` observations including independent monotone censoring."""
    idx = rng.choice(len(d.probs), size=m, p=d.probs)
    u = rng.random(m)
    c_y = (u < p_y).astype(int)
    c_l = (u < p_l).astype(int)
    return {
        "w_code": d.w_code[idx],
        "a": d.a[idx],
        "c_l": c_l,
        "l": d.l[idx],
        "c_y": c_y,
        "y": d.y[idx],
    }


def random_distribution(
    rng: np.random.Generator,
    n_w: int = 2,
    p_a: float = 0.5,
    concentration: float = 1.0,
    cells_per_stratum: int = 4,
) -> DiscreteDistribution:
    """Random law with ``n_w`` covariate levels.

    Each (W, A) stratum puts mass on ``cells_per_stratum`` of the four
    (L, Y) cells, chosen at random, so ``n_w=2, cells_per_stratum=2`` gives
    an 8-point support.
    """
    if not 1 <= cells_per_stratum <= 4:
        raise PrecisionError("cells_per_stratum must be between 1 and 4")
    p_w = rng.dirichlet(np.full(n_w, 2.0))
    cells = [(0, 0), (0, 1), (1, 0), (1, 1)]
    p_ly = {}
    for w in range(n_w):
        for a in (0, 1):
            chosen = sorted(rng.choice(4, size=cells_per_stratum, replace=False))
            q = rng.dirichlet(np.full(cells_per_stratum, concentration))
            q = 0.02 + 0.92 * q  # keep every chosen cell on the support
            q /= q.sum()
            p_ly[(w, a)] = {cells[c]: float(v) for c, v in zip(chosen, q)}
    return DiscreteDistribution.from_conditionals(dict(enumerate(p_w)), p_ly, p_a)


# -- plug-in estimates from data ---------------------------------------------


def plug_in_summary(s, spec=None) -> PrecisionSummary:
    """Estimate (R^2_W, R^2_{L|W}, gamma) by plugging regression fits into
    their population definitions.

    R^2 terms use pooled main-terms fits of Y on (A, W) and (A, W, L);
    gamma uses arm-specific fits of Y on W (full arm-by-covariate
    interaction).
    """
    from .estimators import WorkingModelSpec, fit_outcome_models

    if spec is None:
        spec = WorkingModelSpec.main_terms(s.data.n_covariates)
    fits = fit_outcome_models(s, spec)
    data = s.data
    a = data.a
    c_l = s.c_l.astype(bool)
    c_y = s.c_y.astype(bool)
    var_y = {}
    for k in (0, 1):
        yk = data.y[c_y & (a == k)]
        if len(yk) < 2:
            raise PrecisionError(f"arm {k} has fewer than two observed outcomes")
        var_y[k] = float(np.var(yk, ddof=1))
    total = var_y[0] + var_y[1]
    if total <= 0:
        raise PrecisionError("zero outcome variance")
    v_w, v_lw = {}, {}
    for k in (0, 1):
        v_w[k] = float(np.var(fits.q_w[k], ddof=1))
        m = c_l & (a == k)
        diff = fits.q_lw[k][m] - fits.q_w[k][m]
        v_lw[k] = float(np.var(diff, ddof=1)) if m.sum() > 1 else 0.0
    gamma = float(np.var(fits.q_w_arm[1] - fits.q_w_arm[0], ddof=1)) / total
    per_arm = {}
    for k in (0, 1):
        r2w = v_w[k] / var_y[k] if var_y[k] > 0 else 0.0
        r2l = v_lw[k] / var_y[k] if var_y[k] > 0 else 0.0
        per_arm[k] = ArmPrecision(r2w, r2l, 1.0 - r2w - r2l)
    return PrecisionSummary(
        r2_w=(v_w[0] + v_w[1]) / total,
        r2_l_given_w=(v_lw[0] + v_lw[1]) / total,
        gamma=gamma,
        per_arm=per_arm,
    )
