import json

import numpy as np
import pytest
from scipy import stats

from gst_adjust import dgm
from gst_adjust.dgm import CalibrationTarget, DgmConfig
from gst_adjust.estimators import unadjusted_ate
from gst_adjust.precision import plug_in_summary
from gst_adjust.trial import complete_snapshot

BIG = 1_000_000


@pytest.fixture(scope="module")
def big_samples(population):
    cache = {}

    def get(setting, delta):
        if (setting, delta) not in cache:
            cfg = DgmConfig(setting, delta)
            cache[setting, delta] = dgm.sample_trial(population, BIG, cfg, seed=(808, len(cache)))
        return cache[setting, delta]

    return get


def test_base_is_deterministic():
    a, b = dgm.build_synthetic_base(), dgm.build_synthetic_base()
    for name in ("w_full", "a", "l_full", "y"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))
    assert len(a) == 100 and np.isfinite(a.w_full).all()
    assert not np.array_equal(dgm.build_synthetic_base(seed=1).y, a.y)


def test_twins_mirror_their_originals(population):
    assert len(population) == 200 and population.twin.sum() == 100
    orig, twin = ~population.twin, population.twin
    np.testing.assert_array_equal(population.w_full[orig], population.w_full[twin])
    np.testing.assert_array_equal(population.a[orig], 1 - population.a[twin])


def test_arms_balanced_within_every_covariate_profile(population):
    profiles = {}
    for w, a in zip(map(tuple, population.w_full), population.a):
        profiles.setdefault(w, [0, 0])[int(a)] += 1
    assert all(c0 == c1 for c0, c1 in profiles.values())
    for j in range(4):
        assert abs(np.corrcoef(population.a, population.w_full[:, j])[0, 1]) < 1e-12


def test_rounding_tie_goes_up():
    np.testing.assert_array_equal(dgm._round_half_up([0.4999, 0.5, 0.51]), [0, 1, 1])


def test_same_seed_same_sample(population):
    cfg = DgmConfig("progn_WL")
    a = dgm.sample_trial(population, 500, cfg, seed=3)
    b = dgm.sample_trial(population, 500, cfg, seed=3)
    for name in ("w", "a", "l", "y", "enroll_time"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))
    assert not np.array_equal(dgm.sample_trial(population, 500, cfg, seed=4).y, a.y)


def test_calibrated_base_reproduces_target_summaries(big_samples):
    data = big_samples("progn_WL", dgm.EFFECT_SIZE)
    s = complete_snapshot(data)
    p = plug_in_summary(s)
    assert 0.33 <= p.r2_w <= 0.38
    assert 0.06 <= p.r2_l_given_w <= 0.10
    assert p.gamma <= 0.03
    assert unadjusted_ate(s).delta_hat == pytest.approx(dgm.EFFECT_SIZE, abs=0.003)


def test_no_prognostic_covariates(big_samples):
    p = plug_in_summary(complete_snapshot(big_samples("progn_none", dgm.EFFECT_SIZE)))
    assert max(p.r2_w, p.r2_l_given_w, p.gamma) < 0.02


def test_null_setting_has_no_effect_and_no_heterogeneity(big_samples):
    s = complete_snapshot(big_samples("progn_WL", 0.0))
    assert abs(unadjusted_ate(s).delta_hat) < 0.003
    assert plug_in_summary(s).gamma < 0.01


def _chi_square_p(observed_keys, expected_keys):
    levels = sorted(set(expected_keys))
    index = {k: i for i, k in enumerate(levels)}
    obs = np.bincount([index[k] for k in observed_keys], minlength=len(levels))
    exp = np.bincount([index[k] for k in expected_keys], minlength=len(levels)) / len(expected_keys)
    return stats.chisquare(obs, exp * obs.sum()).pvalue


@pytest.mark.parametrize("setting", ["progn_W", "progn_L", "progn_none"])
def test_replaced_variables_follow_the_base_marginal(population, big_samples, setting):
    data = big_samples(setting, dgm.EFFECT_SIZE)
    base = population.base
    cfg = DgmConfig(setting)
    if setting in ("progn_W", "progn_none"):
        assert _chi_square_p(data.l.tolist(), base.l_full[:, cfg.l_column].astype(int).tolist()) > 0.001
    if setting in ("progn_L", "progn_none"):
        base_w = [tuple(r) for r in base.w_full[:, list(cfg.w_columns)]]
        assert _chi_square_p([tuple(r) for r in data.w], base_w) > 0.001


def test_population_effect_is_exact(population):
    law = dgm.population_law(population, DgmConfig("progn_WL"))
    assert dgm.population_delta(law) == pytest.approx(dgm.EFFECT_SIZE, abs=1e-9)
    assert dgm.population_delta(dgm.population_law(population, DgmConfig("progn_WL", 0.0))) == pytest.approx(0, abs=1e-12)


def test_calibration_reaches_null_targets():
    targets = (
        CalibrationTarget("progn_WL", 0.0, "r2_w", 0.35),
        CalibrationTarget("progn_WL", 0.0, "r2_l_given_w", 0.08),
        CalibrationTarget("progn_WL", 0.0, "gamma", 0.0),
    )
    _, r = dgm.calibrate(targets, effect=0.0, max_iter=30)
    assert r.converged
    got = r.achieved["progn_WL|0.0"]
    assert got.r2_w == pytest.approx(0.35, abs=0.02)
    assert got.r2_l_given_w == pytest.approx(0.08, abs=0.02)
    assert got.gamma == pytest.approx(0.0, abs=0.02)
    _, again = dgm.calibrate(targets, effect=0.0, max_iter=30)
    assert again.search_trace == r.search_trace


def test_calibration_to_zero_targets():
    targets = tuple(CalibrationTarget("progn_WL", 0.0, q, 0.0) for q in ("r2_w", "r2_l_given_w", "gamma"))
    _, r = dgm.calibrate(targets, effect=0.0)
    got = r.achieved["progn_WL|0.0"]
    assert r.converged and max(got.r2_w, got.r2_l_given_w, got.gamma) <= 0.02


def test_config_validation_and_json():
    cfg = DgmConfig("progn_L", 0.0, w_columns=(0, 1, 3))
    assert DgmConfig.from_dict(json.loads(cfg.to_json())) == cfg
    for bad in (dict(setting="progn_X"), dict(delta=0.2), dict(reset_noise_prob=1.5), dict(w_columns=(4,)), dict(l_column=2)):
        with pytest.raises(ValueError):
            DgmConfig(**bad)
    with pytest.raises(ValueError):
        dgm.sample_trial(dgm.default_population(), 0, DgmConfig(), seed=1)
