"""Detection metrics: per-category AP/AR at a single IoU threshold,
base/novel/mean aggregation, and end-of-list F1.

AP uses the continuous precision-envelope integral (no 11-point sampling);
AR is the recall over the full ranked list with no detection cap.  Both
conventions are echoed in the report output.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .geometry import OrientedBox3D, iou3d

DEFAULT_IOU_THRESH = 0.25

AR_PROTOCOL_NOTE = "AR = recall over the full ranked detection list, no cap"


@dataclass(eq=False)
class DetectionResult:
    scene_id: str
    box: OrientedBox3D
    category: int
    confidence: float

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence must lie in [0, 1], got {self.confidence}")

    def to_dict(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "center": self.box.center.tolist(),
            "size": self.box.size.tolist(),
            "yaw": self.box.yaw,
            "category": int(self.category),
            "confidence": float(self.confidence),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DetectionResult":
        return cls(
            scene_id=str(d["scene_id"]),
            box=OrientedBox3D(d["center"], d["size"], d["yaw"]),
            category=int(d["category"]),
            confidence=float(d.get("confidence", 1.0)),
        )


@dataclass(eq=False)
class GroundTruth:
    scene_id: str
    box: OrientedBox3D
    category: int

    def to_dict(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "center": self.box.center.tolist(),
            "size": self.box.size.tolist(),
            "yaw": self.box.yaw,
            "category": int(self.category),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GroundTruth":
        return cls(
            scene_id=str(d["scene_id"]),
            box=OrientedBox3D(d["center"], d["size"], d["yaw"]),
            category=int(d["category"]),
        )


def match_detections(
    dets: list[DetectionResult],
    gts: list[GroundTruth],
    iou_thresh: float = DEFAULT_IOU_THRESH,
) -> tuple[list[bool], int]:
    """Greedy TP/FP flags for one category's detections.

    Detections are ranked by descending confidence (ties keep insertion
    order); each one matches the highest-IoU still-unmatched ground truth
    of its own scene when that IoU reaches the threshold.  Returns the
    flags in ranked order together with the ground-truth count.
    """
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, i))
    taken: set[int] = set()
    flags: list[bool] = []
    for i in order:
        det = dets[i]
        best_g, best_iou = -1, 0.0
        for g, gt in enumerate(gts):
            if g in taken or gt.scene_id != det.scene_id:
                continue
            v = iou3d(det.box, gt.box)
            if v >= iou_thresh and v > best_iou:
                best_g, best_iou = g, v
        if best_g >= 0:
            taken.add(best_g)
            flags.append(True)
        else:
            flags.append(False)
    return flags, len(gts)


def average_precision(flags: list[bool], num_gt: int) -> float:
    """Area under the monotone precision envelope of the PR curve.

    num_gt = 0 yields 0 by definition; such categories are excluded from
    aggregate means by the caller.
    """
    if num_gt <= 0 or not flags:
        return 0.0
    arr = np.asarray(flags, dtype=bool)
    tp = np.cumsum(arr)
    fp = np.cumsum(~arr)
    recall = tp / num_gt
    precision = tp / (tp + fp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    ap = 0.0
    prev_r = 0.0
    for k in range(len(arr)):
        if arr[k]:
            ap += (recall[k] - prev_r) * envelope[k]
            prev_r = recall[k]
    return float(ap)


@dataclass
class CategoryMetrics:
    ap: float = 0.0
    ar: float = 0.0
    precision: float = 0.0
    recall: float = 0.0
    f1: float = 0.0
    num_gt: int = 0
    num_det: int = 0

    def to_dict(self) -> dict:
        return {
            "ap": self.ap,
            "ar": self.ar,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "num_gt": self.num_gt,
            "num_det": self.num_det,
        }


@dataclass
class MetricsReport:
    per_category: dict[int, CategoryMetrics] = field(default_factory=dict)
    ap_novel: float = 0.0
    ap_base: float = 0.0
    ap_mean: float = 0.0
    ar_novel: float = 0.0
    ar_base: float = 0.0
    ar_mean: float = 0.0
    f1_novel: float = 0.0
    f1_base: float = 0.0
    f1_mean: float = 0.0
    iou_thresh: float = DEFAULT_IOU_THRESH
    note: str = AR_PROTOCOL_NOTE

    def aggregates(self) -> dict[str, float]:
        return {
            "ap_novel": self.ap_novel,
            "ap_base": self.ap_base,
            "ap_mean": self.ap_mean,
            "ar_novel": self.ar_novel,
            "ar_base": self.ar_base,
            "ar_mean": self.ar_mean,
            "f1_novel": self.f1_novel,
            "f1_base": self.f1_base,
            "f1_mean": self.f1_mean,
        }

    def to_dict(self) -> dict:
        return {
            "per_category": {str(k): v.to_dict() for k, v in sorted(self.per_category.items())},
            "aggregates": self.aggregates(),
            "iou_thresh": self.iou_thresh,
            "note": self.note,
        }


def evaluate_category(
    dets: list[DetectionResult],
    gts: list[GroundTruth],
    iou_thresh: float = DEFAULT_IOU_THRESH,
) -> CategoryMetrics:
    flags, num_gt = match_detections(dets, gts, iou_thresh)
    tp = sum(flags)
    precision = tp / len(flags) if flags else 0.0
    recall = tp / num_gt if num_gt else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return CategoryMetrics(
        ap=average_precision(flags, num_gt),
        ar=recall,
        precision=precision,
        recall=recall,
        f1=f1,
        num_gt=num_gt,
        num_det=len(dets),
    )


def aggregate(
    per_category: dict[int, CategoryMetrics],
    base_mask,
    iou_thresh: float = DEFAULT_IOU_THRESH,
) -> MetricsReport:
    """Averages over categories that have at least one ground truth.

    Novel averages non-base categories, Base the base ones, Mean all of
    them.  An empty split reports 0.
    """
    base_mask = np.asarray(base_mask, dtype=bool)

    def mean_over(ids, attr):
        vals = [getattr(per_category[c], attr) for c in ids if per_category[c].num_gt > 0]
        return float(np.mean(vals)) if vals else 0.0

    cats = sorted(per_category)
    novel = [c for c in cats if not base_mask[c]]
    base = [c for c in cats if base_mask[c]]
    return MetricsReport(
        per_category=dict(per_category),
        ap_novel=mean_over(novel, "ap"),
        ap_base=mean_over(base, "ap"),
        ap_mean=mean_over(cats, "ap"),
        ar_novel=mean_over(novel, "ar"),
        ar_base=mean_over(base, "ar"),
        ar_mean=mean_over(cats, "ar"),
        f1_novel=mean_over(novel, "f1"),
        f1_base=mean_over(base, "f1"),
        f1_mean=mean_over(cats, "f1"),
        iou_thresh=iou_thresh,
    )


def evaluate_detections(
    dets: list[DetectionResult],
    gts: list[GroundTruth],
    num_categories: int,
    base_mask,
    iou_thresh: float = DEFAULT_IOU_THRESH,
) -> MetricsReport:
    per_category = {}
    for c in range(num_categories):
        per_category[c] = evaluate_category(
            [d for d in dets if d.category == c],
            [g for g in gts if g.category == c],
            iou_thresh,
        )
    return aggregate(per_category, base_mask, iou_thresh)


# ---------------------------------------------------------------------------
# File formats: detection/GT lists as JSON, reports as JSON and CSV.
# ---------------------------------------------------------------------------


def save_detections(path: str, dets: list[DetectionResult]) -> None:
    with open(path, "w") as f:
        json.dump([d.to_dict() for d in dets], f)
        f.write("\n")


def load_detections(path: str) -> list[DetectionResult]:
    with open(path) as f:
        return [DetectionResult.from_dict(d) for d in json.load(f)]


def save_ground_truths(path: str, gts: list[GroundTruth]) -> None:
    with open(path, "w") as f:
        json.dump([g.to_dict() for g in gts], f)
        f.write("\n")


def load_ground_truths(path: str) -> list[GroundTruth]:
    with open(path) as f:
        return [GroundTruth.from_dict(d) for d in json.load(f)]


def save_report_json(path: str, report: MetricsReport) -> None:
    with open(path, "w") as f:
        json.dump(report.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")


def save_report_csv(path: str, report: MetricsReport,
                    names: list[str] | None = None) -> None:
    """One row per category followed by an aggregates block."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["category", "name", "ap", "ar", "precision", "recall", "f1",
                    "num_gt", "num_det"])
        for c, m in sorted(report.per_category.items()):
            name = names[c] if names and c < len(names) else str(c)
            w.writerow([c, name, m.ap, m.ar, m.precision, m.recall, m.f1,
                        m.num_gt, m.num_det])
        w.writerow([])
        w.writerow(["aggregate", "value"])
        for key, val in report.aggregates().items():
            w.writerow([key, val])
        w.writerow(["note", report.note])
