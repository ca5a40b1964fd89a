import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from gst_adjust import dgm, precision
from gst_adjust.estimators import WorkingModelSpec
from gst_adjust.precision import (
    ArmPrecision,
    DiscreteDistribution,
    PrecisionError,
    PrecisionSummary,
    aerss,
    are_arm,
    are_ate,
    arm_variance,
    cross_arm_covariance,
    decompose_variance,
    eif_components,
    g_formula_ate,
    plug_in_summary,
    random_distribution,
    ratio_r,
    summarize,
    unadjusted_avar_ate,
    variance_bound_arm,
    variance_bound_ate,
)
from gst_adjust.trial import TrialData, complete_snapshot

from helpers import degenerate_w_law, eif_draws, safe_corr, variance_with_se

fractions = st.floats(0.05, 1.0)
r2 = st.floats(0.0, 0.45)


def independent_law(p1=0.6, p0=0.4, p_a=0.5):
    """Y independent of (W, L) given A."""
    p_ly = {}
    for w in (0, 1):
        for a, p in ((0, p0), (1, p1)):
            pl = 0.3 if w == 0 else 0.7
            p_ly[(w, a)] = {(l, y): (pl if l else 1 - pl) * (p if y else 1 - p) for l in (0, 1) for y in (0, 1)}
    return DiscreteDistribution.from_conditionals({0: 0.4, 1: 0.6}, p_ly, p_a)


def deterministic_y_law():
    """L depends on W and Y = L."""
    p_ly = {}
    for w in (0, 1):
        for a in (0, 1):
            pl = 0.2 + 0.5 * w + 0.1 * a
            p_ly[(w, a)] = {(0, 0): 1 - pl, (1, 1): pl}
    return DiscreteDistribution.from_conditionals({0: 0.5, 1: 0.5}, p_ly, 0.5)


# -- formulas ----------------------------------------------------------------


def test_are_worked_values():
    assert are_ate(PrecisionSummary(0.36, 0.08, 0.02), 1, 1) == pytest.approx(1.53, abs=0.02)
    assert are_ate(PrecisionSummary(0, 0, 0), 0.5, 0.9) == 1.0


@pytest.mark.parametrize("q", [0.05, 0.2, 0.45])
@pytest.mark.parametrize("p_l", [0.5, 0.9, 1.0])
def test_pure_effect_modifier_w_gives_no_gain(q, p_l):
    assert are_ate(PrecisionSummary(q, 0, 2 * q), 1, 1) == 1.0
    assert are_ate(PrecisionSummary(q, 0, 0), 0.5, p_l) == 1 / (1 - q)


def test_are_rejects_inconsistent_summary():
    with pytest.raises(PrecisionError, match="inconsistent summary"):
        are_ate(PrecisionSummary(0.0, 0.0, 0.5), 1, 1)
    with pytest.raises(PrecisionError):
        are_ate(PrecisionSummary(0.9, 0.5, 0.0), 0.1, 1)
    with pytest.raises(PrecisionError):
        are_ate(PrecisionSummary(0.1, 0.1, 0.0), 0.9, 0.5)


def test_are_arm_values():
    zero = PrecisionSummary(0, 0, 0, {0: ArmPrecision(0, 0, 1)})
    assert are_arm(zero, 0, 0.5, 0.7, 0.9) == 1.0
    s = PrecisionSummary(0, 0, 0, {1: ArmPrecision(0.25, 0, 0.75)})
    assert are_arm(s, 1, 0.5, 1, 1) == pytest.approx(1 / (1 - 0.5 * 0.25), abs=1e-12)
    with pytest.raises(PrecisionError):
        are_arm(s, 1, 1.0, 1, 1)


def test_aerss_and_ratio():
    assert aerss(1.53) == pytest.approx(0.346, abs=0.01)
    assert aerss(1.0) == 0.0
    assert ratio_r(2 / 3, 1) == pytest.approx(2.0, abs=1e-12)
    with pytest.raises(PrecisionError, match="r undefined"):
        ratio_r(0.7, 0.7)
    with pytest.raises(PrecisionError):
        aerss(0.9)


@settings(max_examples=200, deadline=None)
@given(q=r2, p_y=fractions, p_l_extra=st.floats(0, 1))
def test_equally_prognostic_w_effect_modifier_matches_l(q, p_y, p_l_extra):
    assert are_ate(PrecisionSummary(q, 0, 2 * q), p_y, 1) == are_ate(PrecisionSummary(0, q, 0), p_y, 1)
    p_l = p_y + (1 - p_y) * p_l_extra
    assert are_ate(PrecisionSummary(q, 0, 0), p_y, p_l) == 1 / (1 - q)


@settings(max_examples=200, deadline=None)
@given(r2w=r2, frac=st.floats(0, 1), r2lw=r2, p_y=fractions, p_l_extra=st.floats(0, 1))
def test_are_monotonicity(r2w, frac, r2lw, p_y, p_l_extra):
    gamma = 2 * r2w * frac
    p_l = p_y + (1 - p_y) * p_l_extra
    base = are_ate(PrecisionSummary(r2w, r2lw, gamma), p_y, p_l)
    assert base >= 1.0
    if gamma > 0 and p_l >= p_y + 0.05:
        later = are_ate(PrecisionSummary(r2w, r2lw, gamma), p_y + 0.05, p_l)
        assert later <= base + 1e-12
    stronger = are_ate(PrecisionSummary(min(r2w + 0.05, 0.5), r2lw, gamma), p_y, p_l)
    assert stronger >= base - 1e-12


# -- enumeration oracle ------------------------------------------------------


def test_independent_outcome_bound_equals_unadjusted():
    d = independent_law()
    for p_y, p_l in ((1, 1), (0.6, 0.9)):
        expected = sum(arm_variance(d, a) / (0.5 * p_y) for a in (0, 1))
        assert variance_bound_ate(d, p_y, p_l) == pytest.approx(expected, abs=1e-12)
        assert unadjusted_avar_ate(d, p_y) == pytest.approx(expected, abs=1e-12)
        for a in (0, 1):
            assert variance_bound_arm(d, a, 0.5, p_y, p_l) == pytest.approx(
                arm_variance(d, a) / (0.5 * p_y), abs=1e-12
            )
    s = summarize(d)
    assert (s.r2_w, s.r2_l_given_w, s.gamma) == pytest.approx((0, 0, 0), abs=1e-12)


def test_degenerate_w_example():
    d = degenerate_w_law()
    assert variance_bound_ate(d, 1, 1) == pytest.approx(1.0, abs=1e-12)
    assert unadjusted_avar_ate(d, 1) == pytest.approx(1.0, abs=1e-12)
    s = summarize(d)
    assert s.r2_w == pytest.approx(1.0) and s.gamma == pytest.approx(2.0)
    assert are_ate(s, 1, 1) == pytest.approx(1.0)


def test_deterministic_outcome_has_no_residual_variance():
    d = deterministic_y_law()
    for a in (0, 1):
        v_resid, v_lw, v_w = decompose_variance(d, a)
        assert v_resid == pytest.approx(0, abs=1e-15)
        assert v_resid + v_lw + v_w == pytest.approx(arm_variance(d, a), abs=1e-12)
    c = eif_components((1, 1, 1, 1, 1, 1), d, 0.5, 0.8, 0.9)
    assert c.d2 == 0


def test_constant_conditional_mean_gives_zero_d0():
    d = independent_law()
    for obs in ((0, 0, 1, 1, 1, 0), (1, 1, 1, 0, 0, 0), (1, 0, 0, 0, 0, 0)):
        assert eif_components(obs, d, 0.5, 0.6, 0.9).d0 == pytest.approx(0, abs=1e-15)


def test_off_support_observation_raises():
    d = deterministic_y_law()
    with pytest.raises(PrecisionError, match="off-support"):
        eif_components((0, 1, 1, 1, 1, 0), d, 0.5, 0.8, 0.9)
    with pytest.raises(PrecisionError, match="off-support"):
        eif_components((7, 1, 0, 0, 0, 0), d, 0.5, 0.8, 0.9)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n_w=st.integers(1, 4), cells=st.integers(2, 4), p_a=st.floats(0.2, 0.8))
def test_enumeration_identities(seed, n_w, cells, p_a):
    rng = np.random.default_rng(seed)
    d = random_distribution(rng, n_w=n_w, p_a=p_a, cells_per_stratum=cells)
    assume(min(arm_variance(d, a) for a in (0, 1)) > 1e-6)
    s = summarize(d)
    assert s.gamma <= 2 * s.r2_w + 1e-12
    for a in (0, 1):
        v_resid, v_lw, v_w = decompose_variance(d, a)
        assert abs(v_resid + v_lw + v_w - arm_variance(d, a)) < 1e-12
        arm = s.per_arm[a]
        assert abs(arm.r2_w + arm.r2_l_given_w + arm.r2_resid - 1) < 1e-12
    p_y = float(rng.uniform(0.2, 1))
    p_l = float(rng.uniform(p_y, 1))
    # arm bounds plus the cross-arm covariance rebuild the treatment-effect bound
    pa = {1: d.p_a, 0: 1 - d.p_a}
    rebuilt = sum(
        variance_bound_arm(d, a, pa[a], p_y, p_l) for a in (0, 1)
    ) - 2 * cross_arm_covariance(d)
    assert abs(rebuilt - variance_bound_ate(d, p_y, p_l)) < 1e-12
    means = {}
    for a in (0, 1):
        m = d.a == a
        means[a] = float(np.dot(d.probs[m], d.y[m]) / d.probs[m].sum())
    assert abs(g_formula_ate(d, p_y, p_l) - (means[1] - means[0])) < 1e-12


def test_are_from_enumeration_matches_bound_ratio(rng):
    for _ in range(20):
        d = random_distribution(rng, n_w=3)
        p_y = float(rng.uniform(0.3, 1))
        p_l = float(rng.uniform(p_y, 1))
        s = summarize(d)
        ratio = unadjusted_avar_ate(d, p_y) / variance_bound_ate(d, p_y, p_l)
        assert are_ate(s, p_y, p_l) == pytest.approx(ratio, rel=1e-10)
        for a in (0, 1):
            ratio_a = (arm_variance(d, a) / (0.5 * p_y)) / variance_bound_arm(d, a, 0.5, p_y, p_l)
            assert are_arm(s, a, 0.5, p_y, p_l) == pytest.approx(ratio_a, rel=1e-10)


def test_distribution_validation():
    with pytest.raises(PrecisionError):
        DiscreteDistribution(((0, 0, 0, 0), (0, 1, 0, 0)), np.array([0.7, 0.3]), 0.5)
    with pytest.raises(PrecisionError):
        DiscreteDistribution(((0, 0, 0, 0),), np.array([0.5]), 0.5)
    with pytest.raises(PrecisionError, match="zero outcome variance"):
        summarize(DiscreteDistribution(((0, 0, 0, 0), (0, 1, 0, 0)), np.array([0.5, 0.5]), 0.5))


@pytest.mark.parametrize("arm", [0, 1])
def test_arm_bound_matches_arm_eif_monte_carlo(arm):
    rng = np.random.default_rng(100 + arm)
    d = random_distribution(rng, n_w=2, cells_per_stratum=2)
    p_y, p_l = 0.7, 0.9
    d0, d1, d2 = eif_draws(d, 400_000, p_y, p_l, rng, arm=arm)
    v, se = variance_with_se(d0 + d1 + d2)
    assert abs(v - variance_bound_arm(d, arm, 0.5, p_y, p_l)) < 4 * se


def test_eif_mean_zero_and_bound_with_unequal_randomization():
    rng = np.random.default_rng(7)
    d = random_distribution(rng, n_w=3, p_a=0.3)
    p_y, p_l = 0.5, 0.8
    d0, d1, d2 = eif_draws(d, 400_000, p_y, p_l, rng)
    total = d0 + d1 + d2
    v, se = variance_with_se(total)
    assert abs(total.mean()) < 4 * math.sqrt(v / len(total))
    assert abs(v - variance_bound_ate(d, p_y, p_l)) < 4 * se
    for x, y in ((d0, d1), (d0, d2), (d1, d2)):
        assert abs(safe_corr(x, y)) < 0.01


def test_summary_json_round_trip():
    s = summarize(random_distribution(np.random.default_rng(3)))
    back = PrecisionSummary.from_dict(precision.PrecisionSummary.from_dict(s.to_dict()).to_dict())
    assert back.to_dict() == s.to_dict()


SATURATED_BINARY_W = WorkingModelSpec(
    outcome_terms_lw=("a", "w1", "l", "a:w1", "a:l", "w1:l", "a:w1:l"),
    outcome_terms_w=("a", "w1", "a:w1"),
    censor_l_terms=("a", "w1"),
    censor_y_terms=("a", "w1", "l"),
    arm_terms=("w1",),
)


def law_snapshot(d, m, rng):
    obs = precision.sample_observed(d, m, 1.0, 1.0, rng)
    w = np.asarray(d.w_values, dtype=float)[obs["w_code"]]
    return complete_snapshot(TrialData(np.zeros(m), w, obs["a"], obs["l"], obs["y"]))


def test_plug_in_with_saturated_models_recovers_enumeration():
    rng = np.random.default_rng(515)
    d = precision.random_distribution(rng, n_w=2, cells_per_stratum=4)
    truth = summarize(d)
    full = plug_in_summary(law_snapshot(d, 1_000_000, rng), SATURATED_BINARY_W)
    # Monte Carlo SE of the full-sample plug-in from 20 independent batches of 50,000
    batches = [plug_in_summary(law_snapshot(d, 50_000, rng), SATURATED_BINARY_W) for _ in range(20)]
    for field in ("r2_w", "r2_l_given_w", "gamma"):
        reps = np.array([getattr(b, field) for b in batches])
        se = reps.std(ddof=1) / np.sqrt(20)
        assert abs(getattr(full, field) - getattr(truth, field)) < 3 * se, field


def test_plug_in_near_zero_when_outcome_is_shuffled(population):
    rng = np.random.default_rng(9)
    data = dgm.sample_trial(population, 100_000, dgm.DgmConfig("progn_WL"), seed=9)
    shuffled = TrialData(data.enroll_time, data.w, data.a, data.l, rng.permutation(data.y))
    p = plug_in_summary(complete_snapshot(shuffled))
    assert max(p.r2_w, p.r2_l_given_w, p.gamma) < 0.02
