"""Novel-object discovery over proposals plus the online label and data pools.

A proposal becomes a discovered pseudo label when it clears three gates:
a geometry gate (objectness), a spatial gate (low 3D IoU against every
base annotation), and a semantic gate (its projected 2D region classifies
into a non-base category with enough probability).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import BehindCameraError, EmptyObjectError
from .geometry import OrientedBox3D, iou3d
from .scene import (
    SOURCE_DISCOVERED,
    NovelObjectSample,
    ObjectAnnotation,
    PointCloudScene,
    crop_region_2d,
    extract_object,
    read_ply,
    write_ply,
)
from .semantic import CategoryVocabulary, Embedding, classify


@dataclass(eq=False)
class Proposal:
    """One detector output: a box, its objectness, and a 3D query feature."""

    box: OrientedBox3D
    objectness: float
    feature: Embedding

    def __post_init__(self):
        if not 0.0 <= self.objectness <= 1.0:
            raise ValueError(f"objectness must lie in [0, 1], got {self.objectness}")


@dataclass
class DiscoveryConfig:
    theta_g: float = 0.3  # objectness gate
    theta_s: float = 0.3  # semantic-probability gate
    dedup_iou: float = 0.25
    update_period: int = 50  # pool refresh cadence, in rounds

    def __post_init__(self):
        for name in ("theta_g", "theta_s"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if not 0.0 < self.dedup_iou < 1.0:
            raise ValueError("dedup_iou must lie in (0, 1)")
        if self.update_period < 1:
            raise ValueError("update_period must be a positive integer")


def discover(
    scene: PointCloudScene,
    proposals: list[Proposal],
    vocab: CategoryVocabulary,
    oracle,
    cfg: DiscoveryConfig,
) -> list[ObjectAnnotation]:
    """Return pseudo labels for the proposals that clear all three gates.

    Proposals whose crop falls behind the camera are skipped, not errors.
    The result preserves proposal order; each annotation carries the argmax
    category, its probability as confidence, and source "discovered".
    """
    base_boxes = [a.box for a in scene.annotations if a.source == "base"]
    out: list[ObjectAnnotation] = []
    for prop in proposals:
        if prop.objectness <= cfg.theta_g:
            continue
        if base_boxes and max(iou3d(prop.box, b) for b in base_boxes) >= cfg.dedup_iou:
            continue
        try:
            region = crop_region_2d(scene, prop.box)
        except BehindCameraError:
            continue
        probs = classify(oracle.embed_region(scene.image_ref, region), vocab)
        c_star = probs.argmax
        if vocab.is_base(c_star):
            continue
        if probs.probs[c_star] <= cfg.theta_s:
            continue
        out.append(
            ObjectAnnotation(
                box=prop.box,
                category=c_star,
                source=SOURCE_DISCOVERED,
                confidence=float(probs.probs[c_star]),
            )
        )
    return out


@dataclass
class LabelPool:
    """Per-scene pseudo box labels, deduplicated by 3D IoU."""

    scenes: dict[str, list[ObjectAnnotation]] = field(default_factory=dict)
    dedup_iou: float = 0.25

    def entries(self, scene_id: str) -> list[ObjectAnnotation]:
        return list(self.scenes.get(scene_id, []))

    @property
    def size(self) -> int:
        return sum(len(v) for v in self.scenes.values())

    def category_counts(self) -> dict[int, int]:
        counts: dict[int, int] = {}
        for anns in self.scenes.values():
            for a in anns:
                counts[a.category] = counts.get(a.category, 0) + 1
        return counts

    def copy(self) -> "LabelPool":
        return LabelPool({k: list(v) for k, v in self.scenes.items()}, self.dedup_iou)


def update_label_pool(
    pool: LabelPool, discovered: list[ObjectAnnotation], scene_id: str
) -> LabelPool:
    """Union new discoveries into the pool for one scene.

    A new entry overlapping an existing one at or above dedup_iou replaces
    it when its confidence is higher and is dropped otherwise, so the pool
    never holds near-duplicate labels for a scene.
    """
    out = pool.copy()
    entries = out.scenes.setdefault(scene_id, [])
    for ann in discovered:
        dups = [i for i, e in enumerate(entries) if iou3d(ann.box, e.box) >= out.dedup_iou]
        if not dups:
            entries.append(ann)
            continue
        if any(entries[i].confidence >= ann.confidence for i in dups):
            continue
        # The new label beats every overlapping entry; displace them all so
        # the pairwise-IoU invariant holds afterwards.
        for i in reversed(dups):
            del entries[i]
        entries.append(ann)
    return out


@dataclass
class DataPool:
    """Extracted point payloads of discovered objects, the enrichment source."""

    samples: list[NovelObjectSample] = field(default_factory=list)

    @property
    def size(self) -> int:
        return len(self.samples)

    def category_counts(self) -> dict[int, int]:
        counts: dict[int, int] = {}
        for s in self.samples:
            counts[s.category] = counts.get(s.category, 0) + 1
        return counts

    def copy(self) -> "DataPool":
        return DataPool(list(self.samples))


def update_data_pool(
    pool: DataPool, scene: PointCloudScene, discovered: list[ObjectAnnotation]
) -> DataPool:
    """Extract each discovered object from the scene and append it.

    Empty extractions are skipped; a missing camera only drops the crop
    reference, never the sample.
    """
    out = pool.copy()
    for ann in discovered:
        crop_ref = None
        if scene.camera is not None and scene.image_ref is not None:
            try:
                crop_region_2d(scene, ann.box)  # visibility check
                crop_ref = scene.image_ref
            except BehindCameraError:
                crop_ref = None
        try:
            sample = extract_object(
                scene,
                ann.box,
                category=ann.category,
                semantic_prob=ann.confidence,
                crop_ref=crop_ref,
            )
        except EmptyObjectError:
            continue
        out.samples.append(sample)
    return out


def sample_enrichment(
    pool: DataPool, k: int, rng: np.random.Generator
) -> list[NovelObjectSample]:
    """Draw k samples uniformly with replacement; empty pool gives []."""
    if k < 0:
        raise ValueError("k must be nonnegative")
    if k == 0 or pool.size == 0:
        return []
    idx = rng.integers(0, pool.size, size=k)
    return [pool.samples[int(i)] for i in idx]


# ---------------------------------------------------------------------------
# Serialization: proposal files, pool snapshots, and the data-pool archive.
# ---------------------------------------------------------------------------


def save_proposals(path: str, proposals: list[Proposal]) -> None:
    doc = [
        {
            "center": p.box.center.tolist(),
            "size": p.box.size.tolist(),
            "yaw": p.box.yaw,
            "objectness": float(p.objectness),
            "feature": p.feature.values.tolist(),
        }
        for p in proposals
    ]
    with open(path, "w") as f:
        json.dump(doc, f)
        f.write("\n")


def load_proposals(path: str) -> list[Proposal]:
    with open(path) as f:
        doc = json.load(f)
    return [
        Proposal(
            box=OrientedBox3D(d["center"], d["size"], d["yaw"]),
            objectness=float(d["objectness"]),
            feature=Embedding(np.asarray(d["feature"], dtype=float)),
        )
        for d in doc
    ]


def save_label_pool_snapshot(path: str, pool: LabelPool, epoch: int) -> None:
    doc = {
        "epoch": int(epoch),
        "scenes": {
            sid: [a.to_dict() for a in anns] for sid, anns in sorted(pool.scenes.items())
        },
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def load_label_pool_snapshot(path: str, dedup_iou: float = 0.25) -> tuple[int, LabelPool]:
    with open(path) as f:
        doc = json.load(f)
    scenes = {
        sid: [ObjectAnnotation.from_dict(a) for a in anns]
        for sid, anns in doc["scenes"].items()
    }
    return int(doc["epoch"]), LabelPool(scenes, dedup_iou)


def save_data_pool(pool: DataPool, directory: str) -> None:
    """Archive layout: one JSON + PLY pair per sample plus an index file
    listing every entry with its category and semantic probability."""
    os.makedirs(directory, exist_ok=True)
    index = []
    for i, s in enumerate(pool.samples):
        stem = f"sample_{i:05d}"
        write_ply(os.path.join(directory, f"{stem}.ply"), s.points)
        meta = {
            "points_file": f"{stem}.ply",
            "box_size": s.box_size.tolist(),
            "category": int(s.category),
            "semantic_prob": float(s.semantic_prob),
            "crop_ref": s.crop_ref,
        }
        with open(os.path.join(directory, f"{stem}.json"), "w") as f:
            json.dump(meta, f, indent=2, sort_keys=True)
            f.write("\n")
        index.append(
            {
                "sample_file": f"{stem}.json",
                "category": int(s.category),
                "semantic_prob": float(s.semantic_prob),
            }
        )
    with open(os.path.join(directory, "index.json"), "w") as f:
        json.dump({"entries": index}, f, indent=2, sort_keys=True)
        f.write("\n")


def load_data_pool(directory: str) -> DataPool:
    with open(os.path.join(directory, "index.json")) as f:
        doc = json.load(f)
    samples = []
    for e in doc["entries"]:
        with open(os.path.join(directory, e["sample_file"])) as f:
            meta = json.load(f)
        pts, _ = read_ply(os.path.join(directory, meta["points_file"]))
        samples.append(
            NovelObjectSample(
                points=pts,
                box_size=np.asarray(meta["box_size"], dtype=float),
                category=int(meta["category"]),
                semantic_prob=float(meta["semantic_prob"]),
                crop_ref=meta.get("crop_ref"),
            )
        )
    return DataPool(samples)
