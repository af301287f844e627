"""Multi-camera RGB-D capture math: depth clipping, unprojection to colored
clouds, calibration-chain solving, merging, and radius outlier removal.

Pixel centers follow the renderer's (col + 0.5, row + 0.5) convention, so
`depth_to_cloud` agrees with `camera.unproject` pixel for pixel. The
outlier filter counts neighbors in a closed ball (squared-distance
comparison, no epsilon) over a uniform hash grid with cell size equal to
the search radius.
"""

from __future__ import annotations

import json
import logging
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .camera import Intrinsics
from .errors import FormatError, UsageError
from .geom import PointSet, RigidTransform, color_u8_to_float
from .render import load_depth, load_png, save_depth, save_png

log = logging.getLogger(__name__)

DEFAULT_CLIP_RANGE = (0.1, 1.5)  # meters
DEFAULT_OUTLIER_RADIUS = 0.02    # meters
DEFAULT_MIN_NEIGHBORS = 5

CYCLE_TOLERANCE = 1e-3


@dataclass(frozen=True)
class DepthFrame:
    """One camera's aligned depth (meters, 0 = invalid) and RGB image."""

    depth: np.ndarray       # (H, W) float
    rgb: np.ndarray         # (H, W, 3) uint8
    intrinsics: Intrinsics
    camera_id: str

    def __post_init__(self):
        depth = np.asarray(self.depth, dtype=np.float64)
        rgb = np.asarray(self.rgb, dtype=np.uint8)
        if depth.ndim != 2:
            raise ValueError("depth must be 2-D")
        if (depth < 0).any():
            raise ValueError("depth must be non-negative")
        if rgb.shape != depth.shape + (3,):
            raise ValueError(f"rgb shape {rgb.shape} does not match depth {depth.shape}")
        object.__setattr__(self, "depth", depth)
        object.__setattr__(self, "rgb", rgb)


@dataclass(frozen=True)
class CalibEdge:
    camera_a: str
    camera_b: str
    a_to_b: RigidTransform


@dataclass(frozen=True)
class CalibGraph:
    edges: tuple[CalibEdge, ...]
    world_camera: str

    def cameras(self) -> set[str]:
        ids = {self.world_camera}
        for e in self.edges:
            ids.add(e.camera_a)
            ids.add(e.camera_b)
        return ids


def clip_depth_range(frame: DepthFrame, min_m: float, max_m: float) -> DepthFrame:
    """Zeroes (invalidates) depths outside [min_m, max_m]."""
    if not (0 <= min_m < max_m):
        raise ValueError(f"inverted or negative depth range [{min_m}, {max_m}]")
    depth = frame.depth.copy()
    valid = depth > 0
    depth[valid & ((depth < min_m) | (depth > max_m))] = 0.0
    return DepthFrame(depth, frame.rgb, frame.intrinsics, frame.camera_id)


def depth_to_cloud(frame: DepthFrame, stride: int = 1) -> PointSet | None:
    """One colored point per valid-depth pixel (subsampled by stride), in the
    camera frame. Returns None when no pixel has valid depth."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    depth = frame.depth[::stride, ::stride]
    rgb = frame.rgb[::stride, ::stride]
    rows, cols = np.nonzero(depth > 0)
    if rows.size == 0:
        return None
    z = depth[rows, cols]
    intr = frame.intrinsics
    u = cols * stride + 0.5
    v = rows * stride + 0.5
    x = (u - intr.cx) * z / intr.fx
    y = (v - intr.cy) * z / intr.fy
    positions = np.stack([x, y, z], axis=1)
    colors = color_u8_to_float(rgb[rows, cols])
    return PointSet(positions, colors=colors)


def solve_world_transforms(graph: CalibGraph) -> dict[str, RigidTransform]:
    """Camera-to-world transform for every camera, composed along BFS
    shortest paths from the world camera; inconsistent cycles beyond 1e-3
    log a warning and keep the shortest-path result."""
    adjacency: dict[str, list[tuple[str, RigidTransform]]] = {c: [] for c in graph.cameras()}
    for e in graph.edges:
        adjacency[e.camera_a].append((e.camera_b, e.a_to_b))
        adjacency[e.camera_b].append((e.camera_a, e.a_to_b.inverse()))

    solved = {graph.world_camera: RigidTransform.identity()}
    queue = deque([graph.world_camera])
    while queue:
        current = queue.popleft()
        # solved[current] maps current-frame coords to world coords.
        for neighbor, nbr_to_current in ((n, t.inverse()) for n, t in adjacency[current]):
            candidate = solved[current].compose(nbr_to_current)
            if neighbor in solved:
                have = solved[neighbor]
                err = max(
                    np.abs(candidate.rotation - have.rotation).max(),
                    np.abs(candidate.translation - have.translation).max(),
                )
                if err > CYCLE_TOLERANCE:
                    log.warning(
                        "inconsistent calibration cycle at %s (max deviation %.2e); "
                        "keeping shortest-path estimate", neighbor, err,
                    )
                continue
            solved[neighbor] = candidate
            queue.append(neighbor)

    missing = graph.cameras() - solved.keys()
    if missing:
        raise UsageError(f"calibration graph is disconnected: unreachable {sorted(missing)}")
    return solved


def merge_clouds(clouds: list[tuple[PointSet, RigidTransform]]) -> PointSet:
    """Concatenates clouds after transforming each into the shared frame.
    Colors (and normals) survive only if every cloud carries them."""
    if not clouds:
        raise ValueError("need at least one cloud")
    positions, colors, normals = [], [], []
    keep_colors = all(c.colors is not None for c, _ in clouds)
    keep_normals = all(c.normals is not None for c, _ in clouds)
    for cloud, xf in clouds:
        positions.append(xf.apply(cloud.positions))
        if keep_colors:
            colors.append(cloud.colors)
        if keep_normals:
            normals.append(cloud.normals @ xf.rotation.T)
    return PointSet(
        np.concatenate(positions),
        colors=np.concatenate(colors) if keep_colors else None,
        normals=np.concatenate(normals) if keep_normals else None,
    )


def radius_outlier_removal(points: PointSet, radius_m: float, min_neighbors: int):
    """Keeps a point iff at least `min_neighbors` OTHER points lie within the
    closed ball of radius_m. Returns (filtered PointSet or None, removed idx)."""
    if radius_m <= 0:
        raise ValueError("radius must be positive")
    if min_neighbors < 0:
        raise ValueError("min_neighbors must be >= 0")
    pos = points.positions
    n = pos.shape[0]
    if min_neighbors == 0:
        return points, np.zeros(0, dtype=np.int64)

    cells = np.floor(pos / radius_m).astype(np.int64)
    grid: dict[tuple[int, int, int], list[int]] = {}
    for i, c in enumerate(map(tuple, cells)):
        grid.setdefault(c, []).append(i)

    r2 = radius_m * radius_m
    counts = np.zeros(n, dtype=np.int64)
    offsets = [(dx, dy, dz) for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)]
    for cell, members in grid.items():
        candidates = []
        for off in offsets:
            nb = (cell[0] + off[0], cell[1] + off[1], cell[2] + off[2])
            if nb in grid:
                candidates.extend(grid[nb])
        cand = np.asarray(candidates, dtype=np.int64)
        mem = np.asarray(members, dtype=np.int64)
        diff = pos[mem][:, None, :] - pos[cand][None, :, :]
        within = (diff * diff).sum(axis=2) <= r2
        # Subtract the self-match; every point is a candidate of its own cell.
        counts[mem] = within.sum(axis=1) - 1

    keep = counts >= min_neighbors
    removed = np.flatnonzero(~keep)
    if not keep.any():
        return None, removed
    kept_points = PointSet(
        pos[keep],
        colors=points.colors[keep] if points.colors is not None else None,
        normals=points.normals[keep] if points.normals is not None else None,
    )
    return kept_points, removed


# ---------------------------------------------------------------------------
# On-disk layout: each frame directory holds depth.f32, rgb.png,
# intrinsics.json; the rig root holds calib.json.


def save_frame(frame: DepthFrame, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_depth(frame.depth, directory / "depth.f32")
    save_png(frame.rgb, directory / "rgb.png")
    intr = frame.intrinsics
    doc = {
        "fx": intr.fx, "fy": intr.fy, "cx": intr.cx, "cy": intr.cy,
        "width": intr.width, "height": intr.height, "camera_id": frame.camera_id,
    }
    with open(directory / "intrinsics.json", "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def load_frame(directory) -> DepthFrame:
    directory = Path(directory)
    try:
        doc = json.loads((directory / "intrinsics.json").read_text())
        intr = Intrinsics(
            doc["fx"], doc["fy"], doc["cx"], doc["cy"], int(doc["width"]), int(doc["height"])
        )
        camera_id = str(doc["camera_id"])
    except (OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
        raise FormatError(f"bad intrinsics.json in {directory}: {exc}")
    depth = load_depth(directory / "depth.f32")
    rgb = load_png(directory / "rgb.png")
    return DepthFrame(depth, rgb, intr, camera_id)


def save_calib(graph: CalibGraph, path) -> None:
    doc = {
        "edges": [
            {
                "a": e.camera_a,
                "b": e.camera_b,
                "rotation": [float(x) for x in e.a_to_b.rotation.ravel()],
                "translation": [float(x) for x in e.a_to_b.translation],
            }
            for e in graph.edges
        ],
        "world": graph.world_camera,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def load_calib(path) -> CalibGraph:
    try:
        doc = json.loads(Path(path).read_text())
        edges = tuple(
            CalibEdge(
                str(e["a"]),
                str(e["b"]),
                RigidTransform(
                    np.asarray(e["rotation"], dtype=np.float64).reshape(3, 3),
                    np.asarray(e["translation"], dtype=np.float64),
                ),
            )
            for e in doc["edges"]
        )
        return CalibGraph(edges, str(doc["world"]))
    except (OSError, json.JSONDecodeError, KeyError, ValueError, TypeError) as exc:
        raise FormatError(f"bad calibration file {path}: {exc}")
