"""Synthetic scenes and mock proposals for desk-scale runs.

A scene is a floor-aligned room: objects filled with surface and interior
points, floor and wall clutter, and a pinhole camera looking into the room
from outside so every object projects at positive depth.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .discovery import Proposal
from .geometry import (
    AABB2D,
    CameraModel,
    OrientedBox3D,
    iou3d,
    normalize_yaw,
    project_box,
    yaw_matrix,
)
from .scene import SOURCE_BASE, ObjectAnnotation, PointCloudScene
from .semantic import CategoryVocabulary, ToyOracle

log = logging.getLogger(__name__)

DEFAULT_CATEGORY_NAMES = [
    "chair", "table", "bed", "sofa", "desk", "bookshelf",
    "dresser", "nightstand", "toilet", "bathtub", "sink", "lamp",
    "pillow", "cabinet", "counter", "door", "box", "bin",
    "monitor", "plant",
]


@dataclass
class WorldConfig:
    """Knobs for the synthetic scene generator."""

    extent: float = 8.0  # room side length in meters
    objects_per_scene: int = 10
    points_per_object: int = 120
    floor_points: int = 1500
    wall_points: int = 800
    max_gt_overlap: float = 0.05  # pairwise IoU bound among placed objects
    wall_height: float = 2.5
    image_width: int = 640
    image_height: int = 480
    focal: float = 500.0


@dataclass
class ProposalConfig:
    """Noise applied when mocking class-agnostic detector outputs."""

    sigma_center: float = 0.05
    sigma_size: float = 0.03
    sigma_yaw: float = 0.05
    distractors: int = 8
    feature_noise: float = 0.3
    max_distractor_objectness: float = 0.25


@dataclass
class SceneRecord:
    """A generated scene plus its hidden evaluation truth and GT regions."""

    scene_id: str
    scene: PointCloudScene
    hidden_novel: list[ObjectAnnotation] = field(default_factory=list)
    regions: list[tuple[AABB2D, int]] = field(default_factory=list)

    def all_truth(self) -> list[ObjectAnnotation]:
        return [a for a in self.scene.annotations if a.source == SOURCE_BASE] + list(
            self.hidden_novel
        )


def category_size_ranges(num_categories: int, seed: int) -> np.ndarray:
    """Per-category (lo, hi) box extents, shape (C, 2, 3), seeded once."""
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(971,)))
    lo = rng.uniform(0.35, 1.1, size=(num_categories, 3))
    hi = lo * rng.uniform(1.15, 1.5, size=(num_categories, 3))
    return np.stack([lo, hi], axis=1)


def _look_at_camera(eye, target, cfg: WorldConfig) -> CameraModel:
    eye = np.asarray(eye, dtype=float)
    forward = np.asarray(target, dtype=float) - eye
    forward /= np.linalg.norm(forward)
    up = np.array([0.0, 0.0, 1.0])
    right = np.cross(forward, up)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    down /= np.linalg.norm(down)
    rotation = np.stack([right, down, forward])
    translation = -rotation @ eye
    intrinsics = np.array(
        [
            [cfg.focal, 0.0, cfg.image_width / 2.0],
            [0.0, cfg.focal, cfg.image_height / 2.0],
            [0.0, 0.0, 1.0],
        ]
    )
    return CameraModel(intrinsics, rotation, translation)


def _fill_box_points(box: OrientedBox3D, count: int, rng: np.random.Generator) -> np.ndarray:
    """Sample points on the box surface (60%) and interior (40%)."""
    n_surface = int(round(count * 0.6))
    n_interior = count - n_surface
    half = box.size / 2.0
    pts = []
    if n_surface:
        areas = np.array(
            [
                box.size[1] * box.size[2], box.size[1] * box.size[2],
                box.size[0] * box.size[2], box.size[0] * box.size[2],
                box.size[0] * box.size[1], box.size[0] * box.size[1],
            ]
        )
        faces = rng.choice(6, size=n_surface, p=areas / areas.sum())
        local = rng.uniform(-half, half, size=(n_surface, 3))
        axis = faces // 2
        side = np.where(faces % 2 == 0, -1.0, 1.0)
        local[np.arange(n_surface), axis] = side * half[axis]
        pts.append(local)
    if n_interior:
        pts.append(rng.uniform(-half, half, size=(n_interior, 3)))
    local = np.vstack(pts)
    return local @ yaw_matrix(box.yaw).T + box.center


def generate_scene(
    cfg: WorldConfig,
    vocab: CategoryVocabulary,
    size_ranges: np.ndarray,
    rng: np.random.Generator,
    scene_id: str,
) -> SceneRecord:
    """Sample a room of objects with clutter, a camera, and hidden truth.

    Categories are uniform over the vocabulary; base-category objects are
    annotated, novel ones are held out as hidden evaluation truth.  Placed
    boxes keep pairwise IoU below cfg.max_gt_overlap.
    """
    ext = cfg.extent
    placed: list[ObjectAnnotation] = []
    clouds: list[np.ndarray] = []
    attempts = 0
    while len(placed) < cfg.objects_per_scene and attempts < cfg.objects_per_scene * 40:
        attempts += 1
        cat = int(rng.integers(0, vocab.size))
        lo, hi = size_ranges[cat]
        size = rng.uniform(lo, hi)
        margin = float(max(size[0], size[1]))
        cx = rng.uniform(margin, ext - margin)
        cy = rng.uniform(margin, ext - margin)
        yaw = normalize_yaw(rng.uniform(-math.pi, math.pi))
        box = OrientedBox3D([cx, cy, size[2] / 2.0], size, yaw)
        if any(iou3d(box, a.box) >= cfg.max_gt_overlap for a in placed):
            continue
        placed.append(ObjectAnnotation(box, cat, SOURCE_BASE, 1.0))
        clouds.append(_fill_box_points(box, cfg.points_per_object, rng))
    if len(placed) < cfg.objects_per_scene:
        log.warning(
            "scene %s: placed %d/%d objects before retry budget ran out",
            scene_id, len(placed), cfg.objects_per_scene,
        )

    floor = np.column_stack(
        [
            rng.uniform(0.0, ext, cfg.floor_points),
            rng.uniform(0.0, ext, cfg.floor_points),
            rng.uniform(0.0, 0.03, cfg.floor_points),
        ]
    )
    walls = []
    per_wall = cfg.wall_points // 4
    for w in range(4):
        along = rng.uniform(0.0, ext, per_wall)
        z = rng.uniform(0.0, cfg.wall_height, per_wall)
        fixed = np.full(per_wall, 0.0 if w % 2 == 0 else ext)
        if w < 2:
            walls.append(np.column_stack([fixed, along, z]))
        else:
            walls.append(np.column_stack([along, fixed, z]))
    points = np.vstack(clouds + [floor] + walls) if clouds else np.vstack([floor] + walls)

    eye = [ext / 2.0, -1.4 * ext, 0.35 * ext]
    camera = _look_at_camera(eye, [ext / 2.0, ext / 2.0, 1.0], cfg)
    image_size = (float(cfg.image_width), float(cfg.image_height))

    annotations, hidden = [], []
    for ann in placed:
        if vocab.is_base(ann.category):
            annotations.append(ann)
        else:
            hidden.append(
                ObjectAnnotation(ann.box, ann.category, "discovered", 1.0)
            )
    scene = PointCloudScene(
        points=points,
        annotations=annotations,
        image_ref=f"synthetic://{scene_id}",
        camera=camera,
        image_size=image_size,
    )
    regions = [
        (project_box(a.box, camera, image_size), a.category)
        for a in placed
    ]
    return SceneRecord(scene_id, scene, hidden, regions)


def tag_truth_regions(
    oracle: ToyOracle,
    vocab: CategoryVocabulary,
    image_ref: str,
    scene: PointCloudScene,
    truths: list[ObjectAnnotation],
) -> None:
    """Register each truth's projected region with the toy oracle."""
    size = scene.effective_image_size()
    for ann in truths:
        region = project_box(ann.box, scene.camera, size)
        oracle.tag_region(image_ref, region, vocab.names[ann.category])


def mock_proposals(
    scene: PointCloudScene,
    truths: list[ObjectAnnotation],
    cfg: ProposalConfig,
    vocab: CategoryVocabulary,
    oracle: ToyOracle,
    rng: np.random.Generator,
    extent: float,
) -> list[Proposal]:
    """One jittered proposal per truth plus random distractor boxes.

    Jittered proposals score objectness equal to their 3D IoU with the
    source truth; distractors draw objectness uniformly below the
    configured ceiling and carry pure-noise features.
    """
    out: list[Proposal] = []
    for ann in truths:
        center = ann.box.center + cfg.sigma_center * rng.standard_normal(3)
        size = np.maximum(ann.box.size + cfg.sigma_size * rng.standard_normal(3), 0.05)
        yaw = normalize_yaw(ann.box.yaw + cfg.sigma_yaw * rng.standard_normal())
        box = OrientedBox3D(center, size, yaw)
        objectness = iou3d(box, ann.box)
        feature = oracle.noisy_category_embedding(
            vocab.names[ann.category], cfg.feature_noise, rng
        )
        out.append(Proposal(box, objectness, feature))
    for _ in range(cfg.distractors):
        size = rng.uniform(0.3, 1.2, size=3)
        center = [
            rng.uniform(0.5, extent - 0.5),
            rng.uniform(0.5, extent - 0.5),
            size[2] / 2.0,
        ]
        yaw = normalize_yaw(rng.uniform(-math.pi, math.pi))
        box = OrientedBox3D(center, size, yaw)
        objectness = rng.uniform(0.0, cfg.max_distractor_objectness)
        out.append(Proposal(box, objectness, oracle.random_unit(rng)))
    return out
