"""Longitudinal trial data model, validation, analysis views and CSV I/O.

A :class:`Dataset` stores one row per subject in column arrays; the
per-subject :class:`SubjectRecord` view is available through
:meth:`Dataset.subjects` for code that prefers records.  Arrays are made
read-only on construction, so a dataset can be shared freely and every
"modification" produces a new object.
"""
from __future__ import annotations

import csv
import dataclasses
import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class DataError(ValueError):
    """Malformed input data (schema or invariant violation)."""


class Reason(str, enum.Enum):
    AE = "AE"
    LOE = "LoE"
    RESCUE = "rescue_medication"
    INVESTIGATOR = "investigator_decision"
    SUBJECT = "subject_decision"
    LOST = "lost_to_followup"
    ADMIN = "protocol_admin"
    DEATH = "death"
    OTHER = "other"


class DataInclusionPolicy(str, enum.Enum):
    ON_TREATMENT_ONLY = "on_treatment_only"
    ALL_AVAILABLE = "all_available"


@dataclass(frozen=True)
class VisitSchedule:
    weeks: tuple[float, ...]
    analysis_visit: int | None = None  # 1-based; defaults to the last visit

    def __post_init__(self):
        object.__setattr__(self, "weeks", tuple(float(w) for w in self.weeks))
        if self.analysis_visit is None:
            object.__setattr__(self, "analysis_visit", len(self.weeks))

    @property
    def n_visits(self) -> int:
        return len(self.weeks)

    @property
    def visits(self) -> list[tuple[int, float]]:
        return [(i + 1, w) for i, w in enumerate(self.weeks)]


@dataclass(frozen=True)
class IceEvent:
    visit_of_onset: int
    reason: Reason
    persistent_ae_before_dc: bool = False
    efficacy_deteriorated_before_dc: bool = False


@dataclass(frozen=True)
class SubjectRecord:
    id: str
    arm: int
    baseline: float
    outcomes: tuple[float | None, ...]
    post_ice_flags: tuple[bool, ...]
    ice: IceEvent | None = None
    ice_category: int | None = None


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """Column-oriented trial dataset.

    ``values`` holds the per-visit outcome (NaN = missing) on the scale
    given by ``values_are_change``.  ``ice_onset`` is the visit after which
    data are affected by the subject's governing ICE (-1 when there is
    none); ``category`` is the derived ICE category (0 = none/unclassified).
    """

    schedule: VisitSchedule
    ids: tuple[str, ...]
    arm: np.ndarray
    baseline: np.ndarray
    values: np.ndarray
    post_ice: np.ndarray
    ice_onset: np.ndarray
    ice_reason: tuple[str | None, ...]
    persistent_ae: np.ndarray
    efficacy_deteriorated: np.ndarray
    category: np.ndarray = None
    endpoint_name: str = "change"
    smaller_is_better: bool = True
    values_are_change: bool = True

    def __post_init__(self):
        n = len(self.ids)
        T = self.schedule.n_visits
        object.__setattr__(self, "ids", tuple(str(i) for i in self.ids))
        object.__setattr__(self, "arm", _frozen(self.arm, np.int64))
        object.__setattr__(self, "baseline", _frozen(self.baseline, float))
        object.__setattr__(self, "values", _frozen(self.values, float).reshape(n, T))
        object.__setattr__(self, "post_ice", _frozen(self.post_ice, bool).reshape(n, T))
        object.__setattr__(self, "ice_onset", _frozen(self.ice_onset, np.int64))
        object.__setattr__(self, "ice_reason", tuple(self.ice_reason))
        object.__setattr__(self, "persistent_ae", _frozen(self.persistent_ae, bool))
        object.__setattr__(self, "efficacy_deteriorated", _frozen(self.efficacy_deteriorated, bool))
        cat = np.zeros(n, np.int64) if self.category is None else self.category
        object.__setattr__(self, "category", _frozen(cat, np.int64))
        for name in ("arm", "baseline", "ice_onset", "persistent_ae", "efficacy_deteriorated", "category"):
            if getattr(self, name).shape != (n,):
                raise DataError(f"{name} must have one entry per subject")
        if len(self.ice_reason) != n:
            raise DataError("ice_reason must have one entry per subject")

    @property
    def n_subjects(self) -> int:
        return len(self.ids)

    @property
    def n_visits(self) -> int:
        return self.schedule.n_visits

    @property
    def arms(self) -> list[int]:
        return sorted(set(int(a) for a in self.arm))

    @property
    def has_ice(self) -> np.ndarray:
        return self.ice_onset >= 0

    @property
    def observed(self) -> np.ndarray:
        return ~np.isnan(self.values)

    def arm_counts(self) -> dict[int, int]:
        return {a: int(np.sum(self.arm == a)) for a in self.arms}

    def replace(self, **changes) -> "Dataset":
        return dataclasses.replace(self, **changes)

    def with_values(self, values) -> "Dataset":
        return dataclasses.replace(self, values=values)

    def ice_event(self, i: int) -> IceEvent | None:
        if self.ice_onset[i] < 0:
            return None
        return IceEvent(int(self.ice_onset[i]), Reason(self.ice_reason[i]),
                        bool(self.persistent_ae[i]), bool(self.efficacy_deteriorated[i]))

    def subjects(self) -> list[SubjectRecord]:
        out = []
        for i, sid in enumerate(self.ids):
            vals = tuple(None if math.isnan(v) else float(v) for v in self.values[i])
            cat = int(self.category[i]) or None
            out.append(SubjectRecord(sid, int(self.arm[i]), float(self.baseline[i]), vals,
                                     tuple(bool(f) for f in self.post_ice[i]),
                                     self.ice_event(i), cat))
        return out

    @classmethod
    def from_subjects(cls, schedule: VisitSchedule, subjects: Sequence[SubjectRecord], **kw) -> "Dataset":
        T = schedule.n_visits
        n = len(subjects)
        values = np.full((n, T), np.nan)
        for i, s in enumerate(subjects):
            if len(s.outcomes) != T or len(s.post_ice_flags) != T:
                raise DataError(f"subject {s.id}: expected {T} visits")
            values[i] = [np.nan if v is None else v for v in s.outcomes]
        return cls(
            schedule=schedule,
            ids=tuple(s.id for s in subjects),
            arm=[s.arm for s in subjects],
            baseline=[s.baseline for s in subjects],
            values=values,
            post_ice=[s.post_ice_flags for s in subjects],
            ice_onset=[-1 if s.ice is None else s.ice.visit_of_onset for s in subjects],
            ice_reason=tuple(None if s.ice is None else Reason(s.ice.reason).value for s in subjects),
            persistent_ae=[bool(s.ice and s.ice.persistent_ae_before_dc) for s in subjects],
            efficacy_deteriorated=[bool(s.ice and s.ice.efficacy_deteriorated_before_dc) for s in subjects],
            category=[s.ice_category or 0 for s in subjects],
            **kw,
        )


@dataclass(frozen=True)
class Violation:
    rule: str
    subject_id: str | None
    detail: str


@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __len__(self):
        return len(self.violations)

    def __iter__(self):
        return iter(self.violations)

    def rules(self) -> list[str]:
        return [v.rule for v in self.violations]


def validate(ds: Dataset) -> ValidationReport:
    """Check the dataset invariants; an empty report means analyzable."""
    rep = ValidationReport()
    add = lambda rule, sid, msg: rep.violations.append(Violation(rule, sid, msg))  # noqa: E731

    weeks = ds.schedule.weeks
    if any(b <= a for a, b in zip(weeks, weeks[1:])) or (weeks and weeks[0] < 0):
        add("schedule", None, f"weeks must be nonnegative and strictly increasing: {weeks}")
    if not 1 <= ds.schedule.analysis_visit <= ds.n_visits:
        add("schedule", None, f"analysis visit {ds.schedule.analysis_visit} outside 1..{ds.n_visits}")

    seen: dict[str, int] = {}
    for sid in ds.ids:
        seen[sid] = seen.get(sid, 0) + 1
    for sid, c in seen.items():
        if c > 1:
            add("duplicate_id", sid, f"id appears {c} times")

    if np.any(ds.arm < 0):
        add("arm", None, "arm indices must be >= 0")
    if ds.n_subjects and 0 not in ds.arms:
        add("arm", None, "reference arm 0 is absent")

    T = ds.n_visits
    visit_idx = np.arange(1, T + 1)
    for i, sid in enumerate(ds.ids):
        flags = ds.post_ice[i]
        onset = int(ds.ice_onset[i])
        if onset < 0:
            if flags.any():
                add("post_ice_without_ice", sid, "post-ICE flags set but subject has no ICE")
        else:
            if onset > T:
                add("onset_range", sid, f"ICE onset {onset} outside 0..{T}")
            try:
                Reason(ds.ice_reason[i])
            except ValueError:
                add("reason", sid, f"unknown ICE reason {ds.ice_reason[i]!r}")
            if np.any(flags & (visit_idx < onset)):
                add("post_ice_before_onset", sid, "post-ICE flag before ICE onset")
        if np.any(flags[:-1] & ~flags[1:]):
            add("post_ice_monotone", sid, "post-ICE flags must be non-decreasing across visits")
    if not np.all(np.isfinite(ds.baseline)):
        add("baseline", None, "baseline must be finite for every subject")
    return rep


def analysis_view(ds: Dataset, policy: DataInclusionPolicy | str) -> Dataset:
    policy = DataInclusionPolicy(policy)
    rep = validate(ds)
    if not rep.ok:
        raise DataError(f"invalid dataset: {rep.violations[0].rule}: {rep.violations[0].detail}")
    if policy is DataInclusionPolicy.ALL_AVAILABLE:
        return ds
    values = np.where(ds.post_ice, np.nan, ds.values)
    return ds.with_values(values)


def deviation_visit(ds: Dataset) -> np.ndarray:
    """Last on-treatment visit per subject (0 = none).

    ICE onset for subjects with an ICE, otherwise the last observed visit,
    so intermittent gaps before it stay MAR-type cells.
    """
    T = ds.n_visits
    obs = ds.observed
    last_obs = np.where(obs.any(axis=1), T - np.argmax(obs[:, ::-1], axis=1), 0)
    return np.where(ds.ice_onset >= 0, np.minimum(ds.ice_onset, T), last_obs)


# --------------------------------------------------------------------- CSV

CSV_COLUMNS = ("subject_id", "arm", "visit", "week", "baseline", "value", "post_ice",
               "ice_visit", "ice_reason", "persistent_ae", "efficacy_deteriorated")


def _fmt(x: float) -> str:
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


def dataset_rows(ds: Dataset, extra: dict | None = None) -> Iterable[list[str]]:
    for i, sid in enumerate(ds.ids):
        onset = int(ds.ice_onset[i])
        for t, week in enumerate(ds.schedule.weeks):
            row = [sid, str(int(ds.arm[i])), str(t + 1), _fmt(week), _fmt(ds.baseline[i]),
                   _fmt(ds.values[i, t]), str(int(ds.post_ice[i, t])),
                   "" if onset < 0 else str(onset), ds.ice_reason[i] or "",
                   str(int(ds.persistent_ae[i])), str(int(ds.efficacy_deteriorated[i]))]
            yield row


def write_csv(ds: Dataset, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        w.writerows(dataset_rows(ds))


def _parse(conv, text, line, col):
    try:
        return conv(text)
    except (ValueError, TypeError):
        raise DataError(f"line {line}: invalid {col} value {text!r}") from None


def _flag(text: str) -> bool:
    if text in ("", "0"):
        return False
    if text == "1":
        return True
    raise ValueError(text)


def read_csv(path: str | Path, *, smaller_is_better: bool = True, values_are_change: bool = True,
             analysis_visit: int | None = None, endpoint_name: str = "change") -> Dataset:
    """Read the one-row-per-subject-visit CSV schema.  Absent rows are missing values."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError("line 1: empty file, header row required") from None
        header = [h.strip() for h in header]
        missing = [c for c in CSV_COLUMNS if c not in header]
        if missing:
            raise DataError(f"line 1: header missing columns {missing}")
        col = {c: header.index(c) for c in CSV_COLUMNS}
        subj: dict[str, dict] = {}
        weeks: dict[int, float] = {}
        for line, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < len(header):
                raise DataError(f"line {line}: expected {len(header)} fields, got {len(row)}")
            g = lambda c: row[col[c]].strip()  # noqa: E731
            sid = g("subject_id")
            if not sid:
                raise DataError(f"line {line}: empty subject_id")
            arm = _parse(int, g("arm"), line, "arm")
            if arm < 0:
                raise DataError(f"line {line}: invalid arm value {g('arm')!r}")
            visit = _parse(int, g("visit"), line, "visit")
            if visit < 1:
                raise DataError(f"line {line}: visit must be >= 1")
            week = _parse(float, g("week"), line, "week")
            if weeks.setdefault(visit, week) != week:
                raise DataError(f"line {line}: visit {visit} has inconsistent week {week}")
            baseline = _parse(float, g("baseline"), line, "baseline")
            value = math.nan if g("value") == "" else _parse(float, g("value"), line, "value")
            post = _parse(_flag, g("post_ice"), line, "post_ice")
            ice_visit = None if g("ice_visit") == "" else _parse(int, g("ice_visit"), line, "ice_visit")
            reason = g("ice_reason") or None
            if reason is not None:
                _parse(Reason, reason, line, "ice_reason")
            if (ice_visit is None) != (reason is None):
                raise DataError(f"line {line}: ice_visit and ice_reason must be given together")
            pae = _parse(_flag, g("persistent_ae"), line, "persistent_ae")
            eff = _parse(_flag, g("efficacy_deteriorated"), line, "efficacy_deteriorated")
            rec = subj.setdefault(sid, dict(arm=arm, baseline=baseline, ice=(ice_visit, reason, pae, eff),
                                            vals={}, post={}, line=line))
            if rec["arm"] != arm or rec["baseline"] != baseline or rec["ice"] != (ice_visit, reason, pae, eff):
                raise DataError(f"line {line}: subject {sid} has inconsistent subject-level fields")
            if visit in rec["vals"]:
                raise DataError(f"line {line}: duplicate row for subject {sid} visit {visit}")
            rec["vals"][visit] = value
            rec["post"][visit] = post
    if not subj:
        raise DataError("no data rows")
    T = max(weeks)
    if sorted(weeks) != list(range(1, T + 1)):
        raise DataError(f"visits must be numbered 1..{T} without gaps")
    schedule = VisitSchedule(tuple(weeks[v] for v in range(1, T + 1)), analysis_visit)
    ids = list(subj)
    values = np.full((len(ids), T), np.nan)
    post = np.zeros((len(ids), T), bool)
    for i, sid in enumerate(ids):
        for v, x in subj[sid]["vals"].items():
            values[i, v - 1] = x
            post[i, v - 1] = subj[sid]["post"][v]
    ice = [subj[s]["ice"] for s in ids]
    return Dataset(
        schedule=schedule, ids=tuple(ids),
        arm=[subj[s]["arm"] for s in ids], baseline=[subj[s]["baseline"] for s in ids],
        values=values, post_ice=post,
        ice_onset=[-1 if e[0] is None else e[0] for e in ice],
        ice_reason=tuple(e[1] for e in ice),
        persistent_ae=[e[2] for e in ice], efficacy_deteriorated=[e[3] for e in ice],
        endpoint_name=endpoint_name, smaller_is_better=smaller_is_better,
        values_are_change=values_are_change,
    )
