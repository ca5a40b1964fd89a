import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gst_adjust.trial import (
    DAYS_PER_YEAR,
    AnalysisSnapshot,
    DelayConfig,
    ParticipantRecord,
    SnapshotError,
    TrialData,
    complete_snapshot,
    equally_spaced_enrollment,
    observed_fractions,
    poisson_enrollment,
    read_csv,
    snapshot_at,
    write_csv,
)

CFG = DelayConfig()


def record(i, t, a=0, l=0, y=0):
    return ParticipantRecord(id=i, enroll_time=t, w=(0.5,), a=a, l=l, y=y)


def test_delay_boundary_gives_full_observation():
    s = snapshot_at([record(0, 0.0)], CFG.d_y, CFG)
    assert (int(s.c_l[0]), int(s.c_y[0])) == (1, 1)
    assert observed_fractions(s) == (1.0, 1.0)


def test_l_only_participant():
    t = 1.0
    s = snapshot_at([record(0, 0.0), record(1, t - CFG.d_l)], t, CFG)
    assert s.c_l.tolist() == [1, 1]
    assert s.c_y.tolist() == [1, 0]
    assert observed_fractions(s) == (0.5, 1.0)


def test_first_interim_counts_with_uniform_enrollment():
    times = np.linspace(0.0, 1.2, 165)
    recs = [record(i, float(t)) for i, t in enumerate(times)]
    s = snapshot_at(recs, 1.2, DelayConfig(30 / DAYS_PER_YEAR, 180 / DAYS_PER_YEAR, 140))
    full = int(s.c_y.sum())
    l_only = int((s.c_l & (1 - s.c_y)).sum())
    pipeline = int((1 - s.c_l).sum())
    assert abs(full - 96) <= 3
    assert abs(l_only - 57) <= 3
    assert abs(pipeline - 12) <= 3


def test_observed_fraction_arithmetic_for_counts():
    c_y = np.r_[np.ones(288), np.zeros(69)].astype(int)
    c_l = np.r_[np.ones(345), np.zeros(12)].astype(int)
    data = TrialData(np.zeros(357), np.zeros((357, 1)), np.zeros(357), np.zeros(357), np.zeros(357))
    s = AnalysisSnapshot(data, c_l, c_y, 2.0)
    p_y, p_l = observed_fractions(s)
    assert p_y == pytest.approx(288 / 357)
    assert p_l == pytest.approx(345 / 357)


def test_analysis_before_any_outcome_is_rejected():
    with pytest.raises(SnapshotError, match="analysis before any primary outcome"):
        snapshot_at([record(0, 0.0)], CFG.d_y / 2, CFG)


def test_empty_record_list_is_rejected():
    with pytest.raises(SnapshotError):
        snapshot_at([], 1.0, CFG)


def test_future_enrollment_is_rejected():
    with pytest.raises(SnapshotError):
        snapshot_at([record(0, 0.0), record(1, 2.0)], 1.0, CFG)


def test_monotone_censoring_enforced_on_direct_construction():
    data = TrialData([0.0, 0.0], np.zeros((2, 1)), [0, 1], [0, 0], [0, 0])
    with pytest.raises(SnapshotError, match="monotone"):
        AnalysisSnapshot(data, np.array([0, 1]), np.array([1, 1]), 1.0)


@pytest.mark.parametrize("d_l, d_y, rate", [(0.0, 0.5, 140), (0.6, 0.5, 140), (0.1, 0.5, 0)])
def test_delay_config_validation(d_l, d_y, rate):
    with pytest.raises(ValueError):
        DelayConfig(d_l, d_y, rate)


@pytest.mark.parametrize("field, value", [("a", 2), ("enroll_time", -1.0), ("w", ())])
def test_record_validation(field, value):
    kwargs = dict(id=0, enroll_time=0.0, w=(1.0,), a=0, l=0, y=0)
    kwargs[field] = value
    with pytest.raises(ValueError):
        ParticipantRecord(**kwargs)


@settings(max_examples=60, deadline=None)
@given(
    times=st.lists(st.floats(0, 3, allow_nan=False), min_size=1, max_size=40),
    extra=st.floats(0.5, 2.0),
    later=st.floats(0.0, 1.0),
)
def test_censoring_monotone_and_fractions_nondecreasing(times, extra, later):
    t = max(times) + extra
    recs = [record(i, x) for i, x in enumerate(times)]
    try:
        s1 = snapshot_at(recs, t, CFG)
    except SnapshotError:
        return
    assert np.all(s1.c_y <= s1.c_l)
    s2 = snapshot_at(recs, t + later, CFG)
    assert s2.p_y >= s1.p_y and s2.p_l >= s1.p_l
    assert s1.p_y <= s1.p_l


def test_complete_snapshot_observes_everything():
    data = TrialData([0.0, 1.0], np.zeros((2, 1)), [0, 1], [1, 0], [0, 1])
    s = complete_snapshot(data)
    assert s.p_y == s.p_l == 1.0


def test_enrollment_schedules(rng):
    times = equally_spaced_enrollment(5, 140.0)
    np.testing.assert_allclose(np.diff(times), 1 / 140.0)
    assert times[0] == 0.0
    p = poisson_enrollment(2000, 140.0, rng)
    assert p[0] == 0.0 and np.all(np.diff(p) >= 0)
    assert p[-1] == pytest.approx(2000 / 140.0, rel=0.1)


def test_csv_round_trip(tmp_path, rng):
    n = 30
    data = TrialData(
        equally_spaced_enrollment(n, 140.0), rng.normal(size=(n, 3)), rng.integers(0, 2, n),
        rng.integers(0, 2, n), rng.integers(0, 2, n), np.arange(100, 100 + n),
    )
    path = tmp_path / "trial.csv"
    write_csv(data, path)
    assert path.read_text(encoding="utf-8").splitlines()[0] == "id,enroll_time,w1,w2,w3,a,l,y"
    back = read_csv(path)
    np.testing.assert_array_equal(back.w, data.w)
    np.testing.assert_array_equal(back.enroll_time, data.enroll_time)
    np.testing.assert_array_equal(back.ids, data.ids)
    for name in ("a", "l", "y"):
        np.testing.assert_array_equal(getattr(back, name), getattr(data, name))


def test_csv_rejects_bad_header(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("id,time,w1,a,l,y\n0,0,1,0,0,0\n", encoding="utf-8")
    with pytest.raises(ValueError, match="header"):
        read_csv(path)


def test_records_round_trip():
    recs = [record(3, 0.1, a=1, l=1, y=0), record(7, 0.2, a=0, l=0, y=1)]
    assert TrialData.from_records(recs).records() == recs


def test_relabel_and_subset():
    data = TrialData([0.0, 0.1, 0.2], np.zeros((3, 1)), [0, 1, 1], [0, 0, 1], [1, 0, 1])
    assert data.relabel_arms().a.tolist() == [1, 0, 0]
    assert len(data.head(2)) == 2
    assert data.subset(data.a == 1).ids.tolist() == [1, 2]
