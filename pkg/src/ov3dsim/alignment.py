"""Bipartite foreground matching, 2D-box-guided background matching, and
the alignment losses with analytic gradients.

The matcher is a potentials-based Hungarian solver with a documented
deterministic tie-break: among all minimum-cost assignments the one whose
(row, col) pair list is lexicographically smallest is returned.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import BehindCameraError
from .geometry import AABB2D, CameraModel, iou2d, iou3d, project_box
from .scene import ObjectAnnotation
from .semantic import Embedding

_HUBER_DELTA = 1.0
_LOG_EPS = 1e-12

# Foreground matching cost weights: center L1 distance plus (1 - IoU3D).
MATCH_LAMBDA_CENTER = 1.0
MATCH_LAMBDA_IOU = 2.0

# Background IoU gate for projected proposals against reference 2D boxes.
DEFAULT_BACKGROUND_IOU = 5e-3


@dataclass
class MatchResult:
    """Assignment of proposals to targets plus the leftover index sets."""

    pairs: list[tuple[int, int]] = field(default_factory=list)
    unmatched_proposals: list[int] = field(default_factory=list)
    background_proposals: list[int] = field(default_factory=list)

    def matched_proposals(self) -> list[int]:
        return [i for i, _ in self.pairs]

    def total_cost(self, cost: np.ndarray) -> float:
        return float(sum(cost[i, j] for i, j in self.pairs))


def _solve_assignment(cost: np.ndarray):
    """Min-cost matching of min(n, m) pairs via shortest augmenting paths.

    Returns (total, pairs, reduced) where reduced[i][j] is the reduced-cost
    matrix of an optimal dual; any edge of any optimal assignment has
    reduced cost zero.
    """
    n, m = cost.shape
    transposed = n > m
    c = (cost.T if transposed else cost).tolist()
    n1, m1 = (m, n) if transposed else (n, m)
    inf = float("inf")
    u = [0.0] * (n1 + 1)
    v = [0.0] * (m1 + 1)
    p = [0] * (m1 + 1)
    way = [0] * (m1 + 1)
    for i in range(1, n1 + 1):
        p[0] = i
        j0 = 0
        minv = [inf] * (m1 + 1)
        used = [False] * (m1 + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = inf
            j1 = 0
            row = c[i0 - 1]
            for j in range(1, m1 + 1):
                if not used[j]:
                    cur = row[j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(m1 + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    pairs = []
    for j in range(1, m1 + 1):
        if p[j] > 0:
            r, cc = p[j] - 1, j - 1
            pairs.append((cc, r) if transposed else (r, cc))
    pairs.sort()
    total = float(sum(cost[i, j] for i, j in pairs))
    ured = np.array(u[1:])
    vred = np.array(v[1:])
    if transposed:
        reduced = cost - vred[:, None] - ured[None, :]
    else:
        reduced = cost - ured[:, None] - vred[None, :]
    return total, pairs, reduced


def hungarian_match(cost) -> MatchResult:
    """Minimum-cost one-to-one assignment of min(n, m) pairs.

    Ties are broken deterministically: the lexicographically smallest
    optimal (row, col) pair list wins.  Non-finite costs raise ValueError.
    """
    cost = np.asarray(cost, dtype=float)
    if cost.ndim != 2:
        raise ValueError("cost must be a 2D matrix")
    n, m = cost.shape
    if n == 0 or m == 0:
        return MatchResult([], list(range(n)), [])
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix must be finite (no NaN/inf)")

    tol = 1e-9 * (1.0 + float(np.abs(cost).max()))
    total, pairs, reduced = _solve_assignment(cost)
    assigned = dict(pairs)

    chosen: list[tuple[int, int]] = []
    rows = list(range(n))
    cols = list(range(m))
    budget = min(n, m)
    remaining_total = total
    while budget > 0:
        fixed = None
        for ri, i in enumerate(rows):
            # Optimal-dual certificate: only zero-reduced-cost edges can
            # appear in an optimal assignment, so other columns are skipped.
            candidates = [j for j in cols if reduced[i, j] <= tol]
            for j in candidates:
                if assigned.get(i) == j:
                    fixed = (i, j)
                    break
                sub_rows = [r for r in rows if r != i]
                sub_cols = [s for s in cols if s != j]
                if budget == 1:
                    ok = abs(cost[i, j] - remaining_total) <= tol
                    sub = (0.0, [], None)
                else:
                    sub = _solve_assignment(cost[np.ix_(sub_rows, sub_cols)])
                    ok = abs(cost[i, j] + sub[0] - remaining_total) <= tol
                if ok:
                    fixed = (i, j)
                    if budget > 1:
                        # Refresh the certificate for the reduced problem.
                        sub_total, sub_pairs, sub_reduced = sub
                        assigned = {
                            sub_rows[a]: sub_cols[b] for a, b in sub_pairs
                        }
                        red = np.full((n, m), np.inf)
                        red[np.ix_(sub_rows, sub_cols)] = sub_reduced
                        reduced = red
                    break
            if fixed is not None:
                break
            rows.pop(ri)  # this row is unmatched in every optimal assignment
            break
        if fixed is None:
            continue
        i, j = fixed
        chosen.append((i, j))
        rows.remove(i)
        cols.remove(j)
        assigned.pop(i, None)
        remaining_total -= cost[i, j]
        budget -= 1

    matched_rows = {i for i, _ in chosen}
    unmatched = [i for i in range(n) if i not in matched_rows]
    return MatchResult(sorted(chosen), unmatched, [])


def fg_match(
    proposals,
    targets: list[ObjectAnnotation],
    strategy: str = "hungarian",
    dedup_iou: float = 0.25,
) -> MatchResult:
    """Match proposals against labeled boxes (base plus pool entries).

    Cost is center L1 distance plus twice (1 - IoU3D).  The alternative
    "iou" strategy activates every proposal whose best 3D IoU exceeds
    dedup_iou, which may assign several proposals to one target.
    """
    n, m = len(proposals), len(targets)
    if m == 0:
        return MatchResult([], list(range(n)), [])
    if strategy == "iou":
        pairs = []
        for i, prop in enumerate(proposals):
            ious = [iou3d(prop.box, t.box) for t in targets]
            best = int(np.argmax(ious))
            if ious[best] > dedup_iou:
                pairs.append((i, best))
        matched = {i for i, _ in pairs}
        return MatchResult(pairs, [i for i in range(n) if i not in matched], [])
    if strategy != "hungarian":
        raise ValueError(f"unknown matching strategy {strategy!r}")
    cost = np.empty((n, m))
    for i, prop in enumerate(proposals):
        for j, tgt in enumerate(targets):
            center_l1 = float(np.abs(prop.box.center - tgt.box.center).sum())
            cost[i, j] = (
                MATCH_LAMBDA_CENTER * center_l1
                + MATCH_LAMBDA_IOU * (1.0 - iou3d(prop.box, tgt.box))
            )
    return hungarian_match(cost)


def one_hot_labels(match: MatchResult, targets: list[ObjectAnnotation],
                   num_categories: int) -> np.ndarray:
    """One-hot label rows for the matched proposals, in pair order."""
    labels = np.zeros((len(match.pairs), num_categories))
    for r, (_, j) in enumerate(match.pairs):
        labels[r, targets[j].category] = 1.0
    return labels


@dataclass
class ReferenceBoxes2D:
    """Reference 2D boxes for one image (the stand-in detector output)."""

    image_ref: str | None
    boxes: list[AABB2D] = field(default_factory=list)


def bg_match(
    proposals,
    cam: CameraModel,
    image_size: tuple[float, float],
    refs: ReferenceBoxes2D,
    k: float = DEFAULT_BACKGROUND_IOU,
) -> list[int]:
    """Indices of proposals whose projection barely overlaps every reference.

    A proposal is background when the max 2D IoU of its projected box
    against all reference boxes is below k.  Proposals behind the camera
    are excluded from background labeling.
    """
    out = []
    for i, prop in enumerate(proposals):
        try:
            proj = project_box(prop.box, cam, image_size)
        except BehindCameraError:
            continue
        best = max((iou2d(proj, r) for r in refs.boxes), default=0.0)
        if best < k:
            out.append(i)
    return out


def select_alignment_queries(
    match: MatchResult, total_queries: int, extra: int, rng: np.random.Generator
) -> list[int]:
    """Foreground and background matches plus `extra` random leftover queries."""
    fg = set(match.matched_proposals())
    bg = set(match.background_proposals)
    rest = [i for i in range(total_queries) if i not in fg and i not in bg]
    take = min(max(extra, 0), len(rest))
    sampled = (
        [rest[int(i)] for i in rng.choice(len(rest), size=take, replace=False)]
        if take
        else []
    )
    return sorted(fg | bg | set(sampled))


# ---------------------------------------------------------------------------
# Losses.  Each carries analytic gradients with respect to the predictions.
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class LossReport:
    value: float
    gradients: dict[str, np.ndarray]

    def to_dict(self) -> dict:
        return {
            "value": self.value,
            "gradients": {k: v.tolist() for k, v in self.gradients.items()},
        }


def _stack(features) -> np.ndarray:
    return np.stack([f.values if isinstance(f, Embedding) else np.asarray(f, float)
                     for f in features])


def distill_loss(f3d, f2d) -> LossReport:
    """Class-agnostic L1 distance between paired 3D and 2D features."""
    a = _stack(f3d)
    b = _stack(f2d)
    if a.shape != b.shape:
        raise ValueError(f"feature shapes differ: {a.shape} vs {b.shape}")
    diff = a - b
    return LossReport(float(np.abs(diff).sum()), {"f3d": np.sign(diff)})


def contrastive_loss(matched_features, labels, text_embeddings,
                     temperature: float) -> LossReport:
    """Cross-entropy between softmax feature/text similarities and one-hot
    labels, summed over the matched queries."""
    f = _stack(matched_features) if len(matched_features) else np.zeros((0, 1))
    t = np.asarray(text_embeddings, dtype=float)
    h = np.asarray(labels, dtype=float)
    if len(f) == 0:
        return LossReport(0.0, {"features": np.zeros((0, t.shape[1]))})
    if f.shape[1] != t.shape[1]:
        raise ValueError("feature and text embedding dims differ")
    if h.shape != (f.shape[0], t.shape[0]):
        raise ValueError("labels must be one-hot rows over the vocabulary")
    logits = temperature * (f @ t.T)
    logits -= logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    s = e / e.sum(axis=1, keepdims=True)
    value = float(-(h * np.log(np.clip(s, _LOG_EPS, 1.0))).sum())
    grad = temperature * ((s - h) @ t)
    return LossReport(value, {"features": grad})


@dataclass(eq=False)
class LossWeights:
    """Per-term weights for the detector box loss."""

    angle_cls: float = 0.1
    angle_reg: float = 0.5
    size: float = 1.0
    center: float = 5.0
    objectness: float = 1.0

    def to_dict(self) -> dict:
        return {
            "angle_cls": self.angle_cls,
            "angle_reg": self.angle_reg,
            "size": self.size,
            "center": self.center,
            "objectness": self.objectness,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LossWeights":
        return cls(**{k: float(v) for k, v in d.items()})


@dataclass(eq=False)
class DetectorLossInputs:
    """Batched predictions and targets for matched proposals.

    angle_cls_* are (N, B) distributions / one-hots over angle bins,
    angle_res_* are (N,) residuals, size/center are (N, 3), and
    objectness_* are (N, 2) binary distributions / one-hots.
    """

    angle_cls_pred: np.ndarray
    angle_cls_true: np.ndarray
    angle_res_pred: np.ndarray
    angle_res_true: np.ndarray
    size_pred: np.ndarray
    size_true: np.ndarray
    center_pred: np.ndarray
    center_true: np.ndarray
    objectness_pred: np.ndarray
    objectness_true: np.ndarray
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        for name in (
            "angle_cls_pred", "angle_cls_true", "angle_res_pred", "angle_res_true",
            "size_pred", "size_true", "center_pred", "center_true",
            "objectness_pred", "objectness_true",
        ):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        for name in ("angle_cls", "objectness"):
            pred = getattr(self, f"{name}_pred")
            if np.any(pred < 0) or np.any(np.abs(pred.sum(axis=-1) - 1.0) > 1e-6):
                raise ValueError(f"{name}_pred rows must be probability distributions")


def _huber(x: np.ndarray, delta: float = _HUBER_DELTA):
    absx = np.abs(x)
    quad = absx <= delta
    val = np.where(quad, 0.5 * x * x, delta * (absx - 0.5 * delta))
    grad = np.where(quad, x, delta * np.sign(x))
    return val.sum(), grad


def detector_loss(inputs: DetectorLossInputs) -> LossReport:
    """Detector box loss: angle-class CE + Huber angle residual + L1 size
    + L1 center + binary objectness CE, with analytic gradients."""
    w = inputs.weights
    ac = np.clip(inputs.angle_cls_pred, _LOG_EPS, 1.0)
    sc = np.clip(inputs.objectness_pred, _LOG_EPS, 1.0)
    angle_ce = -(inputs.angle_cls_true * np.log(ac)).sum()
    obj_ce = -(inputs.objectness_true * np.log(sc)).sum()
    hub_val, hub_grad = _huber(inputs.angle_res_pred - inputs.angle_res_true)
    size_diff = inputs.size_pred - inputs.size_true
    center_diff = inputs.center_pred - inputs.center_true
    value = (
        w.angle_cls * angle_ce
        + w.angle_reg * hub_val
        + w.size * np.abs(size_diff).sum()
        + w.center * np.abs(center_diff).sum()
        + w.objectness * obj_ce
    )
    in_range_ac = (inputs.angle_cls_pred > _LOG_EPS) & (inputs.angle_cls_pred < 1.0)
    in_range_sc = (inputs.objectness_pred > _LOG_EPS) & (inputs.objectness_pred < 1.0)
    grads = {
        "angle_cls_pred": np.where(in_range_ac, -w.angle_cls * inputs.angle_cls_true / ac, 0.0),
        "angle_res_pred": w.angle_reg * hub_grad,
        "size_pred": w.size * np.sign(size_diff),
        "center_pred": w.center * np.sign(center_diff),
        "objectness_pred": np.where(in_range_sc, -w.objectness * inputs.objectness_true / sc, 0.0),
    }
    return LossReport(float(value), grads)


def save_loss_report(path: str, report: LossReport) -> None:
    with open(path, "w") as f:
        json.dump(report.to_dict(), f, sort_keys=True)
        f.write("\n")


def save_reference_boxes(path: str, refs: ReferenceBoxes2D) -> None:
    doc = {
        "image_ref": refs.image_ref,
        "boxes": [b.as_array().tolist() for b in refs.boxes],
    }
    with open(path, "w") as f:
        json.dump(doc, f, sort_keys=True)
        f.write("\n")


def load_reference_boxes(path: str) -> ReferenceBoxes2D:
    with open(path) as f:
        doc = json.load(f)
    return ReferenceBoxes2D(
        image_ref=doc.get("image_ref"),
        boxes=[AABB2D(*b) for b in doc["boxes"]],
    )
