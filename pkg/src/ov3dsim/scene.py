"""Point-cloud scenes with annotations, extraction, cropping, and insertion.

Scenes are value-semantic: operations either return new values or mutate a
scene owned exclusively by one caller.  Serialization covers a JSON scene
document pointing at a PLY point payload.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, EmptyObjectError
from .geometry import (
    AABB2D,
    CameraModel,
    OrientedBox3D,
    normalize_yaw,
    points_in_box_mask,
    project_box,
    yaw_matrix,
)

SOURCE_BASE = "base"
SOURCE_DISCOVERED = "discovered"


@dataclass(eq=False)
class ObjectAnnotation:
    """A labeled box: category id, provenance, and label confidence."""

    box: OrientedBox3D
    category: int
    source: str = SOURCE_BASE
    confidence: float = 1.0

    def __post_init__(self):
        if self.source not in (SOURCE_BASE, SOURCE_DISCOVERED):
            raise ValueError(f"unknown annotation source {self.source!r}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence must lie in [0, 1], got {self.confidence}")

    def to_dict(self) -> dict:
        return {
            "center": self.box.center.tolist(),
            "size": self.box.size.tolist(),
            "yaw": self.box.yaw,
            "category": int(self.category),
            "source": self.source,
            "confidence": float(self.confidence),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ObjectAnnotation":
        return cls(
            box=OrientedBox3D(d["center"], d["size"], d["yaw"]),
            category=int(d["category"]),
            source=d.get("source", SOURCE_BASE),
            confidence=float(d.get("confidence", 1.0)),
        )


@dataclass(eq=False)
class PointCloudScene:
    """N points plus annotations, an optional camera, and an image reference."""

    points: np.ndarray
    colors: np.ndarray | None = None
    annotations: list[ObjectAnnotation] = field(default_factory=list)
    image_ref: str | None = None
    camera: CameraModel | None = None
    image_size: tuple[float, float] | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=np.uint8).reshape(-1, 3)
            if len(self.colors) != len(self.points):
                raise ValueError("colors must match points in length")

    @property
    def num_points(self) -> int:
        return len(self.points)

    def copy(self) -> "PointCloudScene":
        return PointCloudScene(
            points=self.points.copy(),
            colors=None if self.colors is None else self.colors.copy(),
            annotations=list(self.annotations),
            image_ref=self.image_ref,
            camera=self.camera,
            image_size=self.image_size,
        )

    def effective_image_size(self) -> tuple[float, float]:
        """Declared image size, or (2*cx, 2*cy) for a centered principal
        point so file-loaded scenes stay self-contained."""
        if self.image_size is not None:
            return self.image_size
        if self.camera is None:
            raise ConfigurationError("scene has neither image size nor camera")
        k = self.camera.intrinsics
        return (2.0 * k[0, 2], 2.0 * k[1, 2]) if k[0, 2] > 0 else (1.0, 1.0)

    def floor_level(self) -> float:
        return float(self.points[:, 2].min()) if len(self.points) else 0.0

    def xy_bounds(self) -> tuple[float, float, float, float]:
        if not len(self.points):
            return 0.0, 0.0, 0.0, 0.0
        return (
            float(self.points[:, 0].min()),
            float(self.points[:, 0].max()),
            float(self.points[:, 1].min()),
            float(self.points[:, 1].max()),
        )


@dataclass(eq=False)
class NovelObjectSample:
    """Points of one extracted object in its local frame (centered, yaw zero)."""

    points: np.ndarray
    box_size: np.ndarray
    category: int = 0
    semantic_prob: float = 1.0
    crop_ref: str | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        self.box_size = np.asarray(self.box_size, dtype=float).reshape(3)
        if len(self.points) < 1:
            raise ValueError("a novel object sample needs at least one point")
        if np.any(self.box_size <= 0.0):
            raise ValueError("sample box_size must be positive")
        half = self.box_size / 2.0 + 1e-9
        if np.any(np.abs(self.points) > half):
            raise ValueError("sample points must lie inside the zero-centered box")

    @property
    def num_points(self) -> int:
        return len(self.points)


def extract_object(
    scene: PointCloudScene,
    box: OrientedBox3D,
    category: int = 0,
    semantic_prob: float = 1.0,
    crop_ref: str | None = None,
) -> NovelObjectSample:
    """Gather all scene points inside the box, expressed in the box frame.

    Raises EmptyObjectError when no point falls inside.
    """
    mask = points_in_box_mask(box, scene.points) if len(scene.points) else np.zeros(0, bool)
    if not mask.any():
        raise EmptyObjectError("no scene points inside the requested box")
    local = (scene.points[mask] - box.center) @ yaw_matrix(box.yaw)
    return NovelObjectSample(
        points=local,
        box_size=box.size.copy(),
        category=category,
        semantic_prob=semantic_prob,
        crop_ref=crop_ref,
    )


def sample_points_at(sample: NovelObjectSample, center, yaw: float) -> np.ndarray:
    """Place the sample's local points at a world pose."""
    return sample.points @ yaw_matrix(yaw).T + np.asarray(center, dtype=float)


def crop_region_2d(scene: PointCloudScene, box: OrientedBox3D) -> AABB2D:
    """Project the box through the scene camera; the crop is (image_ref, AABB).

    Raises ConfigurationError when the scene has no camera and propagates
    BehindCameraError from the projection.
    """
    if scene.camera is None:
        raise ConfigurationError("scene has no camera; cannot crop a 2D region")
    return project_box(box, scene.camera, scene.effective_image_size())


def count_points_in_box(scene: PointCloudScene, box: OrientedBox3D) -> int:
    """Exact number of scene points inside the box, boundaries inclusive."""
    if not len(scene.points):
        return 0
    return int(points_in_box_mask(box, scene.points).sum())


@dataclass
class InsertConfig:
    """Placement limits for copy-paste insertion."""

    occupancy_limit: int = 1000  # max pre-existing points tolerated in the box
    max_retries: int = 50
    k: int = 5  # objects inserted per scene per round (used by callers)

    def __post_init__(self):
        if self.occupancy_limit <= 0:
            raise ValueError("occupancy_limit must be positive")
        if self.max_retries < 1:
            raise ValueError("max_retries must be at least 1")


@dataclass
class InsertResult:
    scene: PointCloudScene
    accepted: bool
    attempts: int
    box: OrientedBox3D | None = None
    pre_count: int | None = None  # points already inside the accepted box


def insert_object(
    scene: PointCloudScene,
    sample: NovelObjectSample,
    cfg: InsertConfig,
    rng: np.random.Generator,
) -> InsertResult:
    """Drop the sample at a random floor-aligned pose that passes the
    occupancy check.

    Candidate centers are uniform over the scene's xy bounds with z chosen
    so the box bottom sits at the scene floor; yaw is uniform.  A candidate
    is accepted when the placed box already contains at most
    cfg.occupancy_limit scene points.  After cfg.max_retries rejections the
    scene is returned unchanged with accepted=False.
    """
    x0, x1, y0, y1 = scene.xy_bounds()
    floor = scene.floor_level()
    half_h = sample.box_size[2] / 2.0
    for attempt in range(1, cfg.max_retries + 1):
        cx = rng.uniform(x0, x1)
        cy = rng.uniform(y0, y1)
        yaw = normalize_yaw(rng.uniform(-math.pi, math.pi))
        box = OrientedBox3D([cx, cy, floor + half_h], sample.box_size, yaw)
        pre = count_points_in_box(scene, box)
        if pre <= cfg.occupancy_limit:
            placed = sample_points_at(sample, box.center, yaw)
            out = scene.copy()
            out.points = np.vstack([out.points, placed])
            if out.colors is not None:
                pad = np.full((len(placed), 3), 128, dtype=np.uint8)
                out.colors = np.vstack([out.colors, pad])
            out.annotations.append(
                ObjectAnnotation(
                    box=box,
                    category=sample.category,
                    source=SOURCE_DISCOVERED,
                    confidence=min(max(sample.semantic_prob, 0.0), 1.0),
                )
            )
            return InsertResult(out, True, attempt, box, pre)
    return InsertResult(scene, False, cfg.max_retries)


# ---------------------------------------------------------------------------
# PLY input/output: x, y, z as float32/float64 plus optional uchar RGB.
# ---------------------------------------------------------------------------

_PLY_TYPES = {
    "float": "<f4",
    "float32": "<f4",
    "double": "<f8",
    "float64": "<f8",
    "uchar": "u1",
    "uint8": "u1",
}


def write_ply(path: str, points: np.ndarray, colors: np.ndarray | None = None,
              binary: bool = True, dtype: str = "double") -> None:
    """Write points (and optional RGB) to PLY.

    dtype "double" keeps coordinates bit-exact through a round trip.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    n = len(pts)
    fmt = "binary_little_endian" if binary else "ascii"
    header = [
        "ply",
        f"format {fmt} 1.0",
        f"element vertex {n}",
        f"property {dtype} x",
        f"property {dtype} y",
        f"property {dtype} z",
    ]
    if colors is not None:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    header.append("end_header")
    np_dtype = [(ax, _PLY_TYPES[dtype]) for ax in "xyz"]
    if colors is not None:
        np_dtype += [(ch, "u1") for ch in ("red", "green", "blue")]
    rec = np.empty(n, dtype=np_dtype)
    rec["x"], rec["y"], rec["z"] = pts[:, 0], pts[:, 1], pts[:, 2]
    if colors is not None:
        cols = np.asarray(colors, dtype=np.uint8).reshape(-1, 3)
        rec["red"], rec["green"], rec["blue"] = cols[:, 0], cols[:, 1], cols[:, 2]
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            f.write(rec.tobytes())
        else:
            for row in rec:
                vals = [repr(float(row[ax])) for ax in "xyz"]
                if colors is not None:
                    vals += [str(int(row[ch])) for ch in ("red", "green", "blue")]
                f.write((" ".join(vals) + "\n").encode("ascii"))


def read_ply(path: str) -> tuple[np.ndarray, np.ndarray | None]:
    """Read a PLY vertex cloud; returns (points, colors or None)."""
    with open(path, "rb") as f:
        data = f.read()
    end = data.find(b"end_header")
    if end < 0:
        raise ValueError(f"{path}: not a PLY file (no end_header)")
    header = data[:end].decode("ascii").splitlines()
    body = data[end:].split(b"\n", 1)[1]
    fmt = None
    count = 0
    props: list[tuple[str, str]] = []
    in_vertex = False
    for line in header:
        tok = line.strip().split()
        if not tok:
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                count = int(tok[2])
        elif tok[0] == "property" and in_vertex:
            if tok[1] not in _PLY_TYPES:
                raise ValueError(f"{path}: unsupported property type {tok[1]}")
            props.append((tok[2], _PLY_TYPES[tok[1]]))
    if fmt not in ("ascii", "binary_little_endian"):
        raise ValueError(f"{path}: unsupported PLY format {fmt}")
    names = [p[0] for p in props]
    np_dtype = np.dtype(props)
    if fmt == "binary_little_endian":
        rec = np.frombuffer(body, dtype=np_dtype, count=count)
    else:
        rows = [ln.split() for ln in body.decode("ascii").splitlines() if ln.strip()]
        rows = rows[:count]
        rec = np.empty(count, dtype=np_dtype)
        for j, (name, typ) in enumerate(props):
            cast = float if typ.startswith("<f") else int
            rec[name] = [cast(r[j]) for r in rows]
    pts = np.column_stack([rec["x"], rec["y"], rec["z"]]).astype(float)
    colors = None
    if all(ch in names for ch in ("red", "green", "blue")):
        colors = np.column_stack([rec["red"], rec["green"], rec["blue"]]).astype(np.uint8)
    return pts, colors


# ---------------------------------------------------------------------------
# Scene JSON document: {points_file, annotations, camera, image_ref}
# ---------------------------------------------------------------------------


def save_scene(scene: PointCloudScene, json_path: str, points_file: str | None = None) -> None:
    """Write the scene document plus its PLY payload next to it."""
    if points_file is None:
        points_file = os.path.splitext(os.path.basename(json_path))[0] + ".ply"
    ply_path = os.path.join(os.path.dirname(json_path) or ".", points_file)
    write_ply(ply_path, scene.points, scene.colors)
    doc = {
        "points_file": points_file,
        "annotations": [a.to_dict() for a in scene.annotations],
        "image_ref": scene.image_ref,
    }
    if scene.camera is not None:
        doc["camera"] = {
            "K": scene.camera.intrinsics.flatten().tolist(),
            "R": scene.camera.rotation.flatten().tolist(),
            "t": scene.camera.translation.tolist(),
        }
    with open(json_path, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def load_scene(json_path: str) -> PointCloudScene:
    with open(json_path) as f:
        doc = json.load(f)
    ply_path = os.path.join(os.path.dirname(json_path) or ".", doc["points_file"])
    points, colors = read_ply(ply_path)
    camera = None
    if "camera" in doc and doc["camera"] is not None:
        cam = doc["camera"]
        camera = CameraModel(
            intrinsics=np.array(cam["K"], dtype=float).reshape(3, 3),
            rotation=np.array(cam["R"], dtype=float).reshape(3, 3),
            translation=np.array(cam["t"], dtype=float),
        )
    return PointCloudScene(
        points=points,
        colors=colors,
        annotations=[ObjectAnnotation.from_dict(a) for a in doc.get("annotations", [])],
        image_ref=doc.get("image_ref"),
        camera=camera,
    )
