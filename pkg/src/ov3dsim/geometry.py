"""Oriented 3D boxes, rotated IoU, pinhole projection, and point containment.

Boxes are gravity-aligned: a single yaw rotation about the +z axis. Rotated
IoU is computed as BEV polygon intersection (convex clipping + shoelace)
times the vertical interval overlap.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import BehindCameraError

# Inclusive-boundary slack for containment; absorbs round-trip error of
# rigid transforms so occlusion counting stays deterministic.
CONTAINS_ATOL = 1e-9

# BEV intersection slivers below this area count as empty.
MIN_POLYGON_AREA = 1e-12


def normalize_yaw(yaw: float) -> float:
    """Wrap an angle to [-pi, pi)."""
    return float((yaw + math.pi) % (2.0 * math.pi) - math.pi)


def yaw_matrix(yaw: float) -> np.ndarray:
    """3x3 rotation about +z."""
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True, eq=False)
class OrientedBox3D:
    """Box given by center (m), size (width, length, height in m), yaw (rad)."""

    center: np.ndarray
    size: np.ndarray
    yaw: float

    def __post_init__(self):
        center = np.array(self.center, dtype=float).reshape(3)
        size = np.array(self.size, dtype=float).reshape(3)
        if not (np.all(np.isfinite(center)) and np.all(np.isfinite(size))):
            raise ValueError("box center and size must be finite")
        if np.any(size <= 0.0):
            raise ValueError(f"box size must be positive, got {size.tolist()}")
        center.setflags(write=False)
        size.setflags(write=False)
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "size", size)
        object.__setattr__(self, "yaw", normalize_yaw(float(self.yaw)))

    @property
    def volume(self) -> float:
        return float(self.size[0] * self.size[1] * self.size[2])

    def same_pose(self, other: "OrientedBox3D", atol: float = 0.0) -> bool:
        return (
            np.allclose(self.center, other.center, atol=atol, rtol=0.0)
            and np.allclose(self.size, other.size, atol=atol, rtol=0.0)
            and abs(self.yaw - other.yaw) <= atol
        )


@dataclass(frozen=True)
class AABB2D:
    """Axis-aligned 2D box in pixel coordinates."""

    u_min: float
    v_min: float
    u_max: float
    v_max: float

    def __post_init__(self):
        for name in ("u_min", "v_min", "u_max", "v_max"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if self.u_min > self.u_max or self.v_min > self.v_max:
            raise ValueError(f"degenerate AABB bounds: {self}")

    @property
    def area(self) -> float:
        return (self.u_max - self.u_min) * (self.v_max - self.v_min)

    def as_array(self) -> np.ndarray:
        return np.array([self.u_min, self.v_min, self.u_max, self.v_max])


@dataclass(frozen=True, eq=False)
class CameraModel:
    """Pinhole camera.  World-to-camera map: x_cam = rotation @ x_world + translation."""

    intrinsics: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        k = np.array(self.intrinsics, dtype=float).reshape(3, 3)
        r = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        if abs(k[2, 2] - 1.0) > 1e-12 or abs(k[2, 0]) > 1e-12 or abs(k[2, 1]) > 1e-12:
            raise ValueError("intrinsics bottom row must be [0, 0, 1]")
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-9, rtol=0.0):
            raise ValueError("camera rotation must be orthonormal")
        for a in (k, r, t):
            a.setflags(write=False)
        object.__setattr__(self, "intrinsics", k)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)


# Local corner offsets in units of half-size, bottom face CCW (viewed from
# +z) starting at (-x, -y), then the top face in the same order.
_CORNER_SIGNS = np.array(
    [
        [-1, -1, -1],
        [1, -1, -1],
        [1, 1, -1],
        [-1, 1, -1],
        [-1, -1, 1],
        [1, -1, 1],
        [1, 1, 1],
        [-1, 1, 1],
    ],
    dtype=float,
)


def corners(box: OrientedBox3D) -> np.ndarray:
    """Return the 8 box corners, shape (8, 3).

    Order: bottom face counter-clockwise seen from above, then top face in
    the same in-plane order.
    """
    local = _CORNER_SIGNS * (box.size / 2.0)
    return local @ yaw_matrix(box.yaw).T + box.center


def contains(box: OrientedBox3D, point) -> bool:
    """True iff the point lies inside the box, boundaries inclusive."""
    return bool(points_in_box_mask(box, np.asarray(point, dtype=float).reshape(1, 3))[0])


def points_in_box_mask(box: OrientedBox3D, points: np.ndarray) -> np.ndarray:
    """Vectorized containment test for an (N, 3) array of points.

    Computes in the input dtype, column-wise, so large float32 sample
    batches avoid float64 temporaries.
    """
    pts = np.asarray(points)
    if pts.dtype.kind != "f":
        pts = pts.astype(float)
    pts = pts.reshape(-1, 3)
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    dx = pts[:, 0] - box.center[0]
    dy = pts[:, 1] - box.center[1]
    half = box.size / 2.0 + CONTAINS_ATOL
    # R(-yaw) applied to the xy offsets; z decouples for gravity-aligned boxes.
    mask = np.abs(c * dx + s * dy) <= half[0]
    mask &= np.abs(c * dy - s * dx) <= half[1]
    mask &= np.abs(pts[:, 2] - box.center[2]) <= half[2]
    return mask


def _bev_polygon(box: OrientedBox3D) -> list[tuple[float, float]]:
    """Footprint rectangle as 4 CCW (x, y) vertices."""
    pts = corners(box)[:4, :2]
    return [(float(x), float(y)) for x, y in pts]


def _clip_polygon(subject, clip):
    """Sutherland-Hodgman intersection of a polygon with a convex CCW clip
    polygon.  Boundary points count as inside."""
    output = list(subject)
    cx1, cy1 = clip[-1]
    for cx2, cy2 in clip:
        if not output:
            break
        inputs = output
        output = []
        sx, sy = inputs[-1]
        s_in = (cx2 - cx1) * (sy - cy1) >= (cy2 - cy1) * (sx - cx1)
        for ex, ey in inputs:
            e_in = (cx2 - cx1) * (ey - cy1) >= (cy2 - cy1) * (ex - cx1)
            if e_in != s_in:
                dcx, dcy = cx1 - cx2, cy1 - cy2
                dpx, dpy = sx - ex, sy - ey
                n1 = cx1 * cy2 - cy1 * cx2
                n2 = sx * ey - sy * ex
                den = dcx * dpy - dcy * dpx
                output.append(((n1 * dpx - n2 * dcx) / den, (n1 * dpy - n2 * dcy) / den))
            if e_in:
                output.append((ex, ey))
            sx, sy, s_in = ex, ey, e_in
        cx1, cy1 = cx2, cy2
    return output


def _shoelace_area(poly) -> float:
    if len(poly) < 3:
        return 0.0
    area = 0.0
    n = len(poly)
    for i in range(n):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % n]
        area += x1 * y2 - x2 * y1
    return abs(area) / 2.0


def iou3d(a: OrientedBox3D, b: OrientedBox3D) -> float:
    """Rotated 3D IoU: BEV polygon intersection area times z-interval overlap."""
    if a is b or a.same_pose(b):
        return 1.0
    za0, za1 = a.center[2] - a.size[2] / 2.0, a.center[2] + a.size[2] / 2.0
    zb0, zb1 = b.center[2] - b.size[2] / 2.0, b.center[2] + b.size[2] / 2.0
    dz = min(za1, zb1) - max(za0, zb0)
    if dz <= 0.0:
        return 0.0
    inter_area = _shoelace_area(_clip_polygon(_bev_polygon(a), _bev_polygon(b)))
    if inter_area < MIN_POLYGON_AREA:
        return 0.0
    inter = inter_area * dz
    union = a.volume + b.volume - inter
    if union <= 1e-12:
        return 0.0
    return float(min(max(inter / union, 0.0), 1.0))


def iou2d(a: AABB2D, b: AABB2D) -> float:
    """Axis-aligned 2D IoU; zero-area boxes give 0 by convention."""
    iw = min(a.u_max, b.u_max) - max(a.u_min, b.u_min)
    ih = min(a.v_max, b.v_max) - max(a.v_min, b.v_min)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return float(min(max(inter / union, 0.0), 1.0))


def project_points(points: np.ndarray, cam: CameraModel) -> np.ndarray:
    """Project (N, 3) world points; returns (N, 3) of (u, v, depth).

    Raises BehindCameraError if any point has non-positive depth.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    in_cam = pts @ cam.rotation.T + cam.translation
    depth = in_cam[:, 2]
    if np.any(depth <= 0.0):
        raise BehindCameraError("point at non-positive camera depth")
    pix = in_cam @ cam.intrinsics.T
    return np.column_stack([pix[:, 0] / depth, pix[:, 1] / depth, depth])


def project_box(
    box: OrientedBox3D,
    cam: CameraModel,
    image_size: tuple[float, float],
    clamp: bool = True,
) -> AABB2D:
    """Project the 8 corners and take the min/max pixel envelope.

    The envelope is clamped to [0, w] x [0, h] unless clamp=False.  All
    corners must have positive depth, otherwise BehindCameraError is raised.
    """
    uvd = project_points(corners(box), cam)
    u_min, v_min = uvd[:, 0].min(), uvd[:, 1].min()
    u_max, v_max = uvd[:, 0].max(), uvd[:, 1].max()
    if clamp:
        w, h = float(image_size[0]), float(image_size[1])
        u_min, u_max = min(max(u_min, 0.0), w), min(max(u_max, 0.0), w)
        v_min, v_max = min(max(v_min, 0.0), h), min(max(v_max, 0.0), h)
    return AABB2D(u_min, v_min, u_max, v_max)
