"""Confusion counts, area metrics and boundary (edge) metrics.

Dataset-level metrics are computed from counts pooled over all tiles, never
by averaging per-tile scores.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import boundary_extract

AGGREGATION = "pooled-counts"
METRIC_FIELDS = ("OA", "Pre", "Rec", "F1", "IOU", "Pre_Edge", "Rec_Edge", "F1_Edge", "IOU_Edge")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise ValueError("confusion counts must be nonnegative")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.tp + other.tp, self.tn + other.tn, self.fp + other.fp, self.fn + other.fn
        )


def confusion_counts(pred, gt) -> ConfusionCounts:
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return ConfusionCounts(tp=tp, tn=pred.size - tp - fp - fn, fp=fp, fn=fn)


def _ratio(num, den, name, degenerate):
    if den == 0:
        degenerate.append(name)
        return 0.0
    return num / den


def area_fractions(c: ConfusionCounts) -> dict:
    """OA, Pre, Rec, F1 and IOU as fractions in [0, 1].

    A metric whose denominator is zero reports 0 and its name is listed
    under ``"degenerate"``.
    """
    degenerate: list = []
    pre = _ratio(c.tp, c.tp + c.fp, "Pre", degenerate)
    rec = _ratio(c.tp, c.tp + c.fn, "Rec", degenerate)
    f1 = _ratio(2 * pre * rec, pre + rec, "F1", degenerate)
    iou = _ratio(c.tp, c.tp + c.fp + c.fn, "IOU", degenerate)
    oa = _ratio(c.tp + c.tn, c.total, "OA", degenerate)
    return {"OA": oa, "Pre": pre, "Rec": rec, "F1": f1, "IOU": iou, "degenerate": degenerate}


def area_metrics(c: ConfusionCounts) -> dict:
    """:func:`area_fractions` scaled to percentages."""
    m = area_fractions(c)
    return {k: v if k == "degenerate" else 100 * v for k, v in m.items()}


def edge_counts(pred, gt) -> ConfusionCounts:
    return confusion_counts(boundary_extract(pred), boundary_extract(gt))


def edge_metrics(pred, gt) -> dict:
    """Pre/Rec/F1/IOU computed on the 1-pixel boundaries of both masks."""
    m = area_metrics(edge_counts(pred, gt))
    return {
        "Pre_Edge": m["Pre"],
        "Rec_Edge": m["Rec"],
        "F1_Edge": m["F1"],
        "IOU_Edge": m["IOU"],
        "degenerate": [f"{name}_Edge" for name in m["degenerate"] if name != "OA"],
    }


@dataclass
class MetricReport:
    OA: float
    Pre: float
    Rec: float
    F1: float
    IOU: float
    Pre_Edge: float
    Rec_Edge: float
    F1_Edge: float
    IOU_Edge: float
    counts: ConfusionCounts
    edge_counts: ConfusionCounts
    degenerate: list = field(default_factory=list)
    aggregation: str = AGGREGATION

    @classmethod
    def from_counts(cls, area: ConfusionCounts, edge: ConfusionCounts) -> "MetricReport":
        a = area_metrics(area)
        e = area_metrics(edge)
        degenerate = a["degenerate"] + [f"{n}_Edge" for n in e["degenerate"] if n != "OA"]
        return cls(
            OA=a["OA"], Pre=a["Pre"], Rec=a["Rec"], F1=a["F1"], IOU=a["IOU"],
            Pre_Edge=e["Pre"], Rec_Edge=e["Rec"], F1_Edge=e["F1"], IOU_Edge=e["IOU"],
            counts=area, edge_counts=edge, degenerate=degenerate,
        )

    def as_dict(self) -> dict:
        return asdict(self)

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.as_dict(), indent=2))

    def flat(self) -> dict:
        row = {k: getattr(self, k) for k in METRIC_FIELDS}
        for prefix, c in (("", self.counts), ("edge_", self.edge_counts)):
            row.update({f"{prefix}{k}": v for k, v in asdict(c).items()})
        row["degenerate"] = ";".join(self.degenerate)
        row["aggregation"] = self.aggregation
        return row

    def to_csv(self, path) -> None:
        row = self.flat()
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(row))
            writer.writeheader()
            writer.writerow(row)


class MetricAccumulator:
    """Pools area and edge confusion counts over many tiles."""

    def __init__(self):
        self.area = ConfusionCounts()
        self.edge = ConfusionCounts()

    def update(self, pred, gt) -> None:
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.ndim == 2:
            pred, gt = pred[None], gt[None]
        for p, g in zip(pred, gt):
            self.area = self.area + confusion_counts(p, g)
            self.edge = self.edge + edge_counts(p, g)

    def merge(self, other: "MetricAccumulator") -> "MetricAccumulator":
        out = MetricAccumulator()
        out.area = self.area + other.area
        out.edge = self.edge + other.edge
        return out

    def report(self) -> MetricReport:
        return MetricReport.from_counts(self.area, self.edge)
