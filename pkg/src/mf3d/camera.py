"""Pinhole camera model, projection/unprojection, and view-rig generation.

Convention: camera space is +Z forward, +X right, +Y down; image origin is
the top-left corner and pixel (i, j) has its center at (j + 0.5, i + 0.5).
With that choice the unprojection equations X=(u-cx)Z/fx, Y=(v-cy)Z/fy hold
without sign flips.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, UsageError
from .geom import PointSet, RigidTransform

Z_NEAR = 1e-4  # meters; fragments at or before this plane are discarded

DEFAULT_WIDTH = 512
DEFAULT_HEIGHT = 512
DEFAULT_FOCAL = 512.0
DEFAULT_VIEWS = 8
DEFAULT_ELEVATION_DEG = 0.0


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")


def default_intrinsics(width=DEFAULT_WIDTH, height=DEFAULT_HEIGHT, focal=DEFAULT_FOCAL):
    return Intrinsics(focal, focal, width / 2.0, height / 2.0, width, height)


@dataclass(frozen=True)
class CameraPose:
    intrinsics: Intrinsics
    world_to_cam: RigidTransform
    view_index: int

    def __post_init__(self):
        if self.view_index < 1:
            raise ValueError("view_index is 1-based")

    @property
    def position(self) -> np.ndarray:
        """Camera center in world coordinates."""
        inv = self.world_to_cam.inverse()
        return inv.translation


def _normalize(v):
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if n < 1e-12:
        raise ValueError("zero-length vector")
    return v / n


def look_at(eye, target, up) -> RigidTransform:
    """World-to-camera transform with +Z toward `target` and image up along `up`."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = _normalize(np.asarray(target, dtype=np.float64) - eye)
    up = _normalize(up)
    right = np.cross(forward, up)
    if np.linalg.norm(right) < 1e-9:
        # Looking straight along `up`: fall back to an arbitrary horizontal axis.
        alt = np.array([1.0, 0.0, 0.0])
        if abs(forward @ alt) > 0.9:
            alt = np.array([0.0, 0.0, 1.0])
        right = np.cross(forward, alt)
    right = _normalize(right)
    down = np.cross(forward, right)
    rot = np.stack([right, down, forward], axis=0)
    return RigidTransform(rot, -rot @ eye)


def make_ring_rig(v, center, radius, up, intr: Intrinsics, elevation_deg=0.0):
    """V cameras on a ring of given radius and elevation, all aimed at `center`.

    Azimuths are 360/V degrees apart about `up`; deterministic for fixed inputs.
    """
    if v < 1:
        raise UsageError("view count must be >= 1")
    if radius <= 0:
        raise UsageError("rig radius must be positive")
    center = np.asarray(center, dtype=np.float64)
    up = _normalize(up)

    ref = np.array([1.0, 0.0, 0.0])
    if abs(up @ ref) > 0.9:
        ref = np.array([0.0, 0.0, 1.0])
    e1 = _normalize(ref - (ref @ up) * up)
    e2 = np.cross(up, e1)

    elev = np.deg2rad(elevation_deg)
    poses = []
    for k in range(v):
        az = 2.0 * np.pi * k / v
        direction = np.cos(elev) * (np.cos(az) * e1 + np.sin(az) * e2) + np.sin(elev) * up
        eye = center + radius * direction
        poses.append(CameraPose(intr, look_at(eye, center, up), view_index=k + 1))
    return poses


def fit_rig_to_model(points: PointSet, v, intr: Intrinsics, elevation_deg=0.0, up=(0.0, 1.0, 0.0)):
    """Ring rig sized so the model's bounding sphere projects inside 90% of the image."""
    pos = points.positions
    lo, hi = pos.min(axis=0), pos.max(axis=0)
    center = (lo + hi) / 2.0
    r_sphere = float(np.linalg.norm(pos - center, axis=1).max())
    if r_sphere < 1e-12:
        raise UsageError("degenerate extent: all points coincide")
    # Conservative distance bound: a point at lateral offset r at depth d - r
    # stays within 90% of the half extent on both axes.
    margin = max(intr.fx / (0.45 * intr.width), intr.fy / (0.45 * intr.height))
    radius = r_sphere * (1.0 + margin)
    return make_ring_rig(v, center, radius, up, intr, elevation_deg)


def project(point, pose: CameraPose):
    """(u, v, z) in pixels/meters, or None when the point is behind the camera."""
    cam = pose.world_to_cam.apply(np.asarray(point, dtype=np.float64))
    if cam[2] <= Z_NEAR:
        return None
    intr = pose.intrinsics
    u = intr.fx * cam[0] / cam[2] + intr.cx
    v = intr.fy * cam[1] / cam[2] + intr.cy
    return u, v, cam[2]


def project_points(points, pose: CameraPose):
    """Vectorized projection: (uv (N,2), z (N,), in_front (N,) bool)."""
    pts = np.asarray(points, dtype=np.float64)
    cam = pts @ pose.world_to_cam.rotation.T + pose.world_to_cam.translation
    z = cam[:, 2]
    in_front = z > Z_NEAR
    intr = pose.intrinsics
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intr.fx * cam[:, 0] / z + intr.cx
        v = intr.fy * cam[:, 1] / z + intr.cy
    return np.stack([u, v], axis=1), z, in_front


def unproject(u, v, z, pose: CameraPose):
    """Pixel (u, v) at depth z back to a world-space point."""
    z = np.asarray(z, dtype=np.float64)
    if np.any(z <= 0):
        raise ValueError("depth must be positive")
    intr = pose.intrinsics
    x = (np.asarray(u, dtype=np.float64) - intr.cx) * z / intr.fx
    y = (np.asarray(v, dtype=np.float64) - intr.cy) * z / intr.fy
    cam = np.stack(np.broadcast_arrays(x, y, z), axis=-1)
    return pose.world_to_cam.inverse().apply(cam)


# ---------------------------------------------------------------------------
# Rig serialization (the camera section of the bundle manifest)


def rig_to_json(poses) -> dict:
    views = []
    for p in poses:
        views.append(
            {
                "index": p.view_index,
                "intrinsics": {
                    "fx": p.intrinsics.fx,
                    "fy": p.intrinsics.fy,
                    "cx": p.intrinsics.cx,
                    "cy": p.intrinsics.cy,
                    "width": p.intrinsics.width,
                    "height": p.intrinsics.height,
                },
                "rotation": [float(x) for x in p.world_to_cam.rotation.ravel()],
                "translation": [float(x) for x in p.world_to_cam.translation],
            }
        )
    return {"views": views}


def rig_from_json(doc: dict):
    try:
        poses = []
        for view in doc["views"]:
            intr = view["intrinsics"]
            rot = np.asarray(view["rotation"], dtype=np.float64).reshape(3, 3)
            trans = np.asarray(view["translation"], dtype=np.float64)
            poses.append(
                CameraPose(
                    Intrinsics(
                        intr["fx"], intr["fy"], intr["cx"], intr["cy"],
                        int(intr["width"]), int(intr["height"]),
                    ),
                    RigidTransform(rot, trans),
                    view_index=int(view["index"]),
                )
            )
    except (KeyError, ValueError, TypeError) as exc:
        raise FormatError(f"malformed rig document: {exc}")
    return poses


def save_rig(poses, path):
    with open(path, "w") as fh:
        json.dump(rig_to_json(poses), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_rig(path):
    with open(path) as fh:
        return rig_from_json(json.load(fh))
