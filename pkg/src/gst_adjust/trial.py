"""Participant data, calendar-time censoring, and analysis snapshots.

Censoring is purely administrative: a participant's short-term outcome L is
observed ``d_l`` years after enrollment and the primary outcome Y ``d_y``
years after enrollment.  Nothing about censoring is stored on the records;
it is derived from the analysis time.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

DAYS_PER_YEAR = 365.25


class SnapshotError(ValueError):
    """Raised when an analysis snapshot cannot be formed."""


@dataclass(frozen=True)
class ParticipantRecord:
    id: int
    enroll_time: float
    w: tuple[float, ...]
    a: int
    l: int
    y: int

    def __post_init__(self):
        if self.a not in (0, 1) or self.l not in (0, 1) or self.y not in (0, 1):
            raise ValueError(f"record {self.id}: a, l, y must be 0/1")
        if not self.enroll_time >= 0:
            raise ValueError(f"record {self.id}: enroll_time must be >= 0")
        if len(self.w) < 1 or not np.all(np.isfinite(self.w)):
            raise ValueError(f"record {self.id}: w must be a non-empty finite vector")


@dataclass(frozen=True)
class DelayConfig:
    d_l: float = 30 / DAYS_PER_YEAR
    d_y: float = 180 / DAYS_PER_YEAR
    enroll_rate: float = 140.0

    def __post_init__(self):
        if not 0 < self.d_l <= self.d_y:
            raise ValueError("delays must satisfy 0 < d_l <= d_y")
        if not self.enroll_rate > 0:
            raise ValueError("enroll_rate must be positive")


@dataclass(frozen=True, eq=False)
class TrialData:
    """Column-oriented participant table.

    This is the working representation used by the estimators and the
    simulator; :class:`ParticipantRecord` lists convert to and from it.
    """

    enroll_time: np.ndarray
    w: np.ndarray
    a: np.ndarray
    l: np.ndarray
    y: np.ndarray
    ids: np.ndarray = field(default=None)

    def __post_init__(self):
        n = len(self.a)
        w = np.asarray(self.w, dtype=float)
        if w.ndim == 1:
            w = w[:, None]
        object.__setattr__(self, "w", w)
        for name in ("a", "l", "y"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.int8))
        object.__setattr__(self, "enroll_time", np.asarray(self.enroll_time, dtype=float))
        if self.ids is None:
            object.__setattr__(self, "ids", np.arange(n))
        if not (len(self.enroll_time) == n == len(self.l) == len(self.y) == w.shape[0]):
            raise ValueError("column lengths disagree")

    def __len__(self) -> int:
        return len(self.a)

    @property
    def n_covariates(self) -> int:
        return self.w.shape[1]

    def head(self, n: int) -> "TrialData":
        return self.subset(slice(0, n))

    def subset(self, idx) -> "TrialData":
        return TrialData(
            enroll_time=self.enroll_time[idx],
            w=self.w[idx],
            a=self.a[idx],
            l=self.l[idx],
            y=self.y[idx],
            ids=self.ids[idx],
        )

    def with_enrollment(self, times: np.ndarray) -> "TrialData":
        return TrialData(times, self.w, self.a, self.l, self.y, self.ids)

    def relabel_arms(self) -> "TrialData":
        return TrialData(self.enroll_time, self.w, 1 - self.a, self.l, self.y, self.ids)

    @classmethod
    def from_records(cls, records: Sequence[ParticipantRecord]) -> "TrialData":
        if len(records) == 0:
            raise SnapshotError("empty record list")
        return cls(
            enroll_time=np.array([r.enroll_time for r in records]),
            w=np.array([r.w for r in records], dtype=float),
            a=np.array([r.a for r in records]),
            l=np.array([r.l for r in records]),
            y=np.array([r.y for r in records]),
            ids=np.array([r.id for r in records]),
        )

    def records(self) -> list[ParticipantRecord]:
        return [
            ParticipantRecord(
                id=int(self.ids[i]),
                enroll_time=float(self.enroll_time[i]),
                w=tuple(float(v) for v in self.w[i]),
                a=int(self.a[i]),
                l=int(self.l[i]),
                y=int(self.y[i]),
            )
            for i in range(len(self))
        ]


@dataclass(frozen=True, eq=False)
class AnalysisSnapshot:
    data: TrialData
    c_l: np.ndarray
    c_y: np.ndarray
    analysis_time: float

    def __post_init__(self):
        if np.any(self.c_y > self.c_l):
            raise SnapshotError("monotone censoring violated: Y observed without L")
        if not np.any(self.c_y):
            raise SnapshotError("analysis before any primary outcome")

    @property
    def records(self) -> list[ParticipantRecord]:
        return self.data.records()

    @property
    def n(self) -> int:
        return len(self.data)

    @property
    def p_l(self) -> float:
        return float(np.mean(self.c_l))

    @property
    def p_y(self) -> float:
        return float(np.mean(self.c_y))


def equally_spaced_enrollment(n: int, rate: float) -> np.ndarray:
    """Enrollment times ``0, 1/rate, 2/rate, ...``."""
    return np.arange(n) / rate


def poisson_enrollment(n: int, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Enrollment times of a homogeneous Poisson process started at 0."""
    gaps = rng.exponential(1.0 / rate, size=n)
    gaps[0] = 0.0
    return np.cumsum(gaps)


def _as_trial(records: TrialData | Sequence[ParticipantRecord]) -> TrialData:
    if isinstance(records, TrialData):
        if len(records) == 0:
            raise SnapshotError("empty record list")
        return records
    return TrialData.from_records(records)


def snapshot_at(
    records: TrialData | Sequence[ParticipantRecord], t: float, cfg: DelayConfig
) -> AnalysisSnapshot:
    """Observation flags of every enrolled participant at calendar time ``t``."""
    data = _as_trial(records)
    if np.any(data.enroll_time > t):
        raise SnapshotError("snapshot contains participants enrolled after the analysis time")
    c_l = (t >= data.enroll_time + cfg.d_l).astype(np.int8)
    c_y = (t >= data.enroll_time + cfg.d_y).astype(np.int8)
    return AnalysisSnapshot(data=data, c_l=c_l, c_y=c_y, analysis_time=float(t))


def complete_snapshot(records: TrialData | Sequence[ParticipantRecord]) -> AnalysisSnapshot:
    """Snapshot with every outcome observed (e.g. after pipeline completion)."""
    data = _as_trial(records)
    ones = np.ones(len(data), dtype=np.int8)
    t = float(np.max(data.enroll_time)) if len(data) else 0.0
    return AnalysisSnapshot(data=data, c_l=ones, c_y=ones.copy(), analysis_time=t)


def observed_fractions(s: AnalysisSnapshot) -> tuple[float, float]:
    """Return ``(p_y, p_l)``."""
    return s.p_y, s.p_l


# -- CSV ---------------------------------------------------------------------


def write_csv(data: TrialData, path: str | Path) -> None:
    k = data.n_covariates
    header = ["id", "enroll_time"] + [f"w{j + 1}" for j in range(k)] + ["a", "l", "y"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for i in range(len(data)):
            writer.writerow(
                [int(data.ids[i]), repr(float(data.enroll_time[i]))]
                + [repr(float(v)) for v in data.w[i]]
                + [int(data.a[i]), int(data.l[i]), int(data.y[i])]
            )


def read_csv(path: str | Path) -> TrialData:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    w_cols = [j for j, name in enumerate(header) if name.startswith("w")]
    expected = ["id", "enroll_time"] + [f"w{j + 1}" for j in range(len(w_cols))] + ["a", "l", "y"]
    if header != expected:
        raise ValueError(f"unexpected CSV header {header}")
    if not rows:
        raise SnapshotError("empty record list")
    arr = np.array(rows, dtype=float)
    return TrialData(
        enroll_time=arr[:, 1],
        w=arr[:, w_cols],
        a=arr[:, -3].astype(int),
        l=arr[:, -2].astype(int),
        y=arr[:, -1].astype(int),
        ids=arr[:, 0].astype(int),
    )
