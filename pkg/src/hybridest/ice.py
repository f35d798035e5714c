"""ICE category assignment and per-arm summary tables.

Classification only looks at the ICE record (reason and the two review
flags), never at arm or outcome values, so it can be run blinded.
"""
from __future__ import annotations

import csv
import enum
import io
from dataclasses import dataclass

import numpy as np

from .data import DataError, Dataset, IceEvent, Reason


class Category(enum.IntEnum):
    """ICE category; lower value = higher priority."""

    CAT1_SAFETY = 1
    CAT2_EFFICACY = 2
    CAT3_ADMIN = 3

    @property
    def label(self) -> str:
        return f"Category {int(self)}"


_SAFETY = {Reason.AE, Reason.DEATH}
_EFFICACY = {Reason.LOE, Reason.RESCUE}


def classify(event: IceEvent) -> Category:
    reason = Reason(event.reason)
    if reason in _SAFETY or (reason not in _EFFICACY and event.persistent_ae_before_dc):
        return Category.CAT1_SAFETY
    if reason in _EFFICACY or (event.efficacy_deteriorated_before_dc and not event.persistent_ae_before_dc):
        return Category.CAT2_EFFICACY
    return Category.CAT3_ADMIN


def classify_dataset(ds: Dataset) -> Dataset:
    cat = np.zeros(ds.n_subjects, np.int64)
    for i in np.flatnonzero(ds.has_ice):
        cat[i] = classify(ds.ice_event(i))
    return ds.replace(category=cat)


@dataclass(frozen=True)
class ArmIceSummary:
    arm: int
    n: int
    any_ice: int
    counts: tuple[int, int, int]

    def pct(self, count: int) -> float:
        return 100.0 * count / self.n


@dataclass(frozen=True)
class IceSummaryTable:
    rows: tuple[ArmIceSummary, ...]
    arm_labels: dict

    def _label(self, arm):
        return self.arm_labels.get(arm, f"Arm {arm}")

    def lines(self) -> list[tuple[str, list[str]]]:
        out = [("Patients with ICEs", [f"{r.any_ice} ({r.pct(r.any_ice):.1f}%)" for r in self.rows])]
        for c in Category:
            out.append((c.label, [f"{r.counts[c - 1]} ({r.pct(r.counts[c - 1]):.1f}%)" for r in self.rows]))
        return out

    def to_text(self) -> str:
        heads = ["ICE Category"] + [f"{self._label(r.arm)} (N={r.n})" for r in self.rows]
        body = [[name] + cells for name, cells in self.lines()]
        widths = [max(len(row[j]) for row in [heads] + body) for j in range(len(heads))]
        fmt = lambda row: "  ".join(c.ljust(w) if j == 0 else c.rjust(w)  # noqa: E731
                                    for j, (c, w) in enumerate(zip(row, widths)))
        return "\n".join([fmt(heads), "  ".join("-" * w for w in widths)] + [fmt(r) for r in body]) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["arm", "label", "n", "row", "count", "percent"])
        for r in self.rows:
            w.writerow([r.arm, self._label(r.arm), r.n, "any", r.any_ice, f"{r.pct(r.any_ice):.1f}"])
            for c in Category:
                k = r.counts[c - 1]
                w.writerow([r.arm, self._label(r.arm), r.n, f"cat{int(c)}", k, f"{r.pct(k):.1f}"])
        return buf.getvalue()


def summarize(ds: Dataset, arms=None, arm_labels: dict | None = None) -> IceSummaryTable:
    """Per-arm counts and percentages of subjects with ICEs by category.

    ``ds`` must already carry categories (see :func:`classify_dataset`).
    """
    if np.any(ds.has_ice & (ds.category == 0)):
        raise DataError("dataset has ICEs without a category; run classify_dataset first")
    arms = ds.arms if arms is None else list(arms)
    rows = []
    for a in arms:
        m = ds.arm == a
        n = int(m.sum())
        if n == 0:
            raise DataError(f"arm {a} has no subjects")
        cat = ds.category[m]
        rows.append(ArmIceSummary(a, n, int(np.sum(cat > 0)),
                                  tuple(int(np.sum(cat == c)) for c in Category)))
    return IceSummaryTable(tuple(rows), dict(arm_labels or {}))
