"""Software rasterizer: per view it produces the RGB image handed to the
2D mask generator and the per-pixel point-index map that mask lifting uses.

Both the mesh and point paths emit fragments (pixel, depth, primitive id)
and resolve winners per pixel with an order-independent rule: depths are
bucketed at 1e-7 m and the lowest (bucket, primitive id) pair wins, so
results do not depend on primitive traversal or thread schedule. Pixel
centers sample at (x+0.5, y+0.5); shared triangle edges follow the
top-left fill rule.
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .camera import Z_NEAR, CameraPose
from .errors import FormatError, InvariantError
from .geom import PointSet, TriMesh, color_float_to_u8

SENTINEL = -1
BACKGROUND_RGB = (255, 255, 255)
DEFAULT_POINT_COLOR = (128, 128, 128)

Z_TIE = 1e-7          # depth bucket size; ties within a bucket go to the lower id
_IDX_BITS = 25        # primitive ids must fit below this many bits
_MAX_PRIMS = 1 << _IDX_BITS
_MAX_ZQ = (1 << (63 - _IDX_BITS)) - 1


@dataclass
class RenderOutput:
    """One view's render: color image, depth buffer, and point-index map."""

    rgb: np.ndarray          # (H, W, 3) uint8
    depth: np.ndarray        # (H, W) float64, +inf where background
    point_index: np.ndarray  # (H, W) int32, SENTINEL where background
    view_index: int

    def __post_init__(self):
        covered = self.point_index != SENTINEL
        finite = np.isfinite(self.depth)
        if (covered != finite).any():
            raise InvariantError("depth must be finite exactly where a point won")


def default_splat_px(point_count: int) -> float:
    """2 px at >=50k points, grown as sqrt(50000/P) for sparser clouds."""
    if point_count >= 50_000:
        return 2.0
    return float(np.clip(2.0 * np.sqrt(50_000.0 / point_count), 1.0, 6.0))


def _resolve(h, w, pix, z, prim):
    """Winner-per-pixel selection. Returns indices of winning fragments."""
    if prim.size and int(prim.max()) >= _MAX_PRIMS:
        raise InvariantError(f"too many primitives for depth-key packing (>{_MAX_PRIMS})")
    zq = np.minimum(np.round(z / Z_TIE), float(_MAX_ZQ)).astype(np.int64)
    key = (zq << _IDX_BITS) | prim.astype(np.int64)
    best = np.full(h * w, np.iinfo(np.int64).max, dtype=np.int64)
    np.minimum.at(best, pix, key)
    return np.flatnonzero(key == best[pix])


def _empty_buffers(h, w):
    rgb = np.empty((h, w, 3), dtype=np.uint8)
    rgb[:] = BACKGROUND_RGB
    depth = np.full((h, w), np.inf, dtype=np.float64)
    point_index = np.full((h, w), SENTINEL, dtype=np.int32)
    return rgb, depth, point_index


def _point_colors_u8(points: PointSet) -> np.ndarray:
    if points.colors is None:
        return np.tile(np.array(DEFAULT_POINT_COLOR, dtype=np.uint8), (len(points), 1))
    return color_float_to_u8(points.colors)


def rasterize_points(points: PointSet, pose: CameraPose, splat_px: float | None = None) -> RenderOutput:
    """Projects every point to a filled disc of radius splat_px; the nearest
    point wins each pixel."""
    if splat_px is None:
        splat_px = default_splat_px(len(points))
    if splat_px < 0.5:
        raise ValueError("splat_px must be >= 0.5")
    intr = pose.intrinsics
    h, w = intr.height, intr.width

    uv_all = np.empty((len(points), 2))
    cam = points.positions @ pose.world_to_cam.rotation.T + pose.world_to_cam.translation
    z_all = cam[:, 2]
    in_front = z_all > Z_NEAR
    idx_all = np.arange(len(points), dtype=np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        uv_all[:, 0] = intr.fx * cam[:, 0] / z_all + intr.cx
        uv_all[:, 1] = intr.fy * cam[:, 1] / z_all + intr.cy

    uv = uv_all[in_front]
    z = z_all[in_front]
    idx = idx_all[in_front]

    m = int(np.ceil(splat_px + 0.5))
    base_x = np.floor(uv[:, 0]).astype(np.int64)
    base_y = np.floor(uv[:, 1]).astype(np.int64)
    r2 = splat_px * splat_px

    frag_pix, frag_z, frag_prim = [], [], []
    for dy in range(-m, m + 1):
        for dx in range(-m, m + 1):
            px = base_x + dx
            py = base_y + dy
            du = px + 0.5 - uv[:, 0]
            dv = py + 0.5 - uv[:, 1]
            hit = (du * du + dv * dv <= r2) & (px >= 0) & (px < w) & (py >= 0) & (py < h)
            if not hit.any():
                continue
            frag_pix.append(py[hit] * w + px[hit])
            frag_z.append(z[hit])
            frag_prim.append(idx[hit])

    rgb, depth, point_index = _empty_buffers(h, w)
    if frag_pix:
        pix = np.concatenate(frag_pix)
        fz = np.concatenate(frag_z)
        fprim = np.concatenate(frag_prim)
        win = _resolve(h, w, pix, fz, fprim)
        colors = _point_colors_u8(points)
        flat_pix = pix[win]
        depth.reshape(-1)[flat_pix] = fz[win]
        point_index.reshape(-1)[flat_pix] = fprim[win].astype(np.int32)
        rgb.reshape(-1, 3)[flat_pix] = colors[fprim[win]]
    return RenderOutput(rgb, depth, point_index, pose.view_index)


def _edge_is_top_left(ex, ey):
    # Pixel centers exactly on an edge belong to the triangle whose edge is
    # a top edge (horizontal, interior below) or a left edge (interior right).
    return (ey == 0 and ex > 0) or ey < 0


def rasterize_mesh(mesh: TriMesh, points: PointSet, pose: CameraPose) -> RenderOutput:
    """Z-buffered triangle fill with perspective-correct vertex-color
    interpolation. point_index carries the vertex with the largest corrected
    barycentric weight of the front-most face; back faces are drawn too."""
    if len(points) != mesh.vertices.shape[0]:
        raise ValueError("points must be the mesh's vertex set (index spaces must agree)")
    if mesh.faces.shape[0] == 0:
        raise ValueError("empty mesh")
    intr = pose.intrinsics
    h, w = intr.height, intr.width

    cam = mesh.vertices @ pose.world_to_cam.rotation.T + pose.world_to_cam.translation
    z = cam[:, 2]
    in_front = z > Z_NEAR
    with np.errstate(divide="ignore", invalid="ignore"):
        sx = intr.fx * cam[:, 0] / z + intr.cx
        sy = intr.fy * cam[:, 1] / z + intr.cy
    winv = np.where(in_front, 1.0 / z, 0.0)
    colors = _point_colors_u8(points).astype(np.float64) / 255.0

    frag_pix, frag_z, frag_prim = [], [], []
    frag_vtx, frag_rgb = [], []

    for fi in range(mesh.faces.shape[0]):
        face = mesh.faces[fi]
        if not in_front[face].all():
            continue  # no near-plane clipping; partially-behind faces are skipped
        order = np.array([0, 1, 2])
        ax, ay = sx[face[0]], sy[face[0]]
        bx, by = sx[face[1]], sy[face[1]]
        cx_, cy_ = sx[face[2]], sy[face[2]]
        area2 = (bx - ax) * (cy_ - ay) - (by - ay) * (cx_ - ax)
        if area2 == 0.0:
            continue
        if area2 < 0.0:
            order = np.array([0, 2, 1])
            bx, by, cx_, cy_ = cx_, cy_, bx, by
            area2 = -area2

        x0 = max(int(np.floor(min(ax, bx, cx_) - 0.5)), 0)
        x1 = min(int(np.ceil(max(ax, bx, cx_) - 0.5)), w - 1)
        y0 = max(int(np.floor(min(ay, by, cy_) - 0.5)), 0)
        y1 = min(int(np.ceil(max(ay, by, cy_) - 0.5)), h - 1)
        if x1 < x0 or y1 < y0:
            continue
        xs = np.arange(x0, x1 + 1) + 0.5
        ys = np.arange(y0, y1 + 1) + 0.5
        px, py = np.meshgrid(xs, ys)

        # Edge functions opposite each vertex; E >= 0 means inside for the
        # positively-oriented triangle, with the top-left rule on E == 0.
        e0 = (cx_ - bx) * (py - by) - (cy_ - by) * (px - bx)   # weight of a
        e1 = (ax - cx_) * (py - cy_) - (ay - cy_) * (px - cx_)  # weight of b
        e2 = (bx - ax) * (py - ay) - (by - ay) * (px - ax)      # weight of c
        inside = np.ones_like(e0, dtype=bool)
        for e, (fx0, fy0, fx1, fy1) in (
            (e0, (bx, by, cx_, cy_)),
            (e1, (cx_, cy_, ax, ay)),
            (e2, (ax, ay, bx, by)),
        ):
            accept_zero = _edge_is_top_left(fx1 - fx0, fy1 - fy0)
            inside &= (e > 0) | ((e == 0) & accept_zero)
        if not inside.any():
            continue

        wa = e0[inside] / area2
        wb = e1[inside] / area2
        wc = e2[inside] / area2
        vids = face[order]
        denom = wa * winv[vids[0]] + wb * winv[vids[1]] + wc * winv[vids[2]]
        zf = 1.0 / denom
        cw = np.stack(
            [wa * winv[vids[0]], wb * winv[vids[1]], wc * winv[vids[2]]], axis=1
        ) / denom[:, None]

        # Report weights in original face-vertex order so argmax ties break
        # toward the first listed vertex.
        cw_orig = np.empty_like(cw)
        cw_orig[:, order] = cw
        pick = np.argmax(cw_orig, axis=1)
        vtx = face[pick]
        rgbf = cw_orig @ colors[face]

        pys, pxs = np.nonzero(inside)
        frag_pix.append((pys + y0) * w + (pxs + x0))
        frag_z.append(zf)
        frag_prim.append(np.full(zf.shape, fi, dtype=np.int64))
        frag_vtx.append(vtx)
        frag_rgb.append(rgbf)

    rgb, depth, point_index = _empty_buffers(h, w)
    if frag_pix:
        pix = np.concatenate(frag_pix)
        fz = np.concatenate(frag_z)
        fprim = np.concatenate(frag_prim)
        win = _resolve(h, w, pix, fz, fprim)
        flat = pix[win]
        depth.reshape(-1)[flat] = fz[win]
        point_index.reshape(-1)[flat] = np.concatenate(frag_vtx)[win].astype(np.int32)
        rgb.reshape(-1, 3)[flat] = color_float_to_u8(np.concatenate(frag_rgb)[win])
    return RenderOutput(rgb, depth, point_index, pose.view_index)


def render_model(model, points: PointSet, pose: CameraPose, splat_px=None) -> RenderOutput:
    """Dispatch: meshes rasterize triangles, point sets rasterize splats."""
    if isinstance(model, TriMesh):
        return rasterize_mesh(model, points, pose)
    return rasterize_points(points, pose, splat_px=splat_px)


def render_views(model, points, poses, splat_px=None, threads: int = 1):
    """Renders all views, optionally in parallel; output order follows `poses`.

    Views are independent and each view is rasterized single-threaded, so the
    result is identical for any thread count.
    """
    if threads <= 1 or len(poses) <= 1:
        return [render_model(model, points, p, splat_px) for p in poses]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futs = [pool.submit(render_model, model, points, p, splat_px) for p in poses]
        return [f.result() for f in futs]


def visible_points(out: RenderOutput) -> set[int]:
    """All point indices that won at least one pixel."""
    vals = np.unique(out.point_index)
    return {int(v) for v in vals if v != SENTINEL}


# ---------------------------------------------------------------------------
# On-disk buffers: PNG for RGB, raw little-endian grids for index and depth.

_PIDX_MAGIC = b"PIDX"
_DPTH_MAGIC = b"DPTH"


def save_png(rgb: np.ndarray, path) -> None:
    Image.fromarray(rgb, mode="RGB").save(str(path), format="PNG")


def load_png(path) -> np.ndarray:
    with Image.open(str(path)) as im:
        return np.asarray(im.convert("RGB"))


def _write_grid(path, magic, data, dtype):
    arr = np.ascontiguousarray(data.astype(dtype))
    header = struct.pack("<4sIII", magic, arr.shape[0], arr.shape[1], 0)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.tobytes())


def _read_grid(path, magic, dtype):
    with open(path, "rb") as fh:
        header = fh.read(16)
        if len(header) != 16:
            raise FormatError(f"{path}: truncated header")
        got_magic, h, w, _ = struct.unpack("<4sIII", header)
        if got_magic != magic:
            raise FormatError(f"{path}: bad magic {got_magic!r}, expected {magic!r}")
        data = np.frombuffer(fh.read(), dtype=dtype)
    if data.size != h * w:
        raise FormatError(f"{path}: expected {h * w} values, found {data.size}")
    return data.reshape(h, w)


def save_point_index(point_index, path):
    _write_grid(path, _PIDX_MAGIC, point_index, "<i4")


def load_point_index(path) -> np.ndarray:
    return _read_grid(path, _PIDX_MAGIC, "<i4").astype(np.int32)


def save_depth(depth, path):
    _write_grid(path, _DPTH_MAGIC, depth, "<f4")


def load_depth(path) -> np.ndarray:
    return _read_grid(path, _DPTH_MAGIC, "<f4").astype(np.float64)


def save_render(out: RenderOutput, directory, stem: str | None = None):
    """Writes {stem}.png/.pidx/.dpth; stem defaults to view{index}."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stem = stem or f"view{out.view_index}"
    save_png(out.rgb, directory / f"{stem}.png")
    save_point_index(out.point_index, directory / f"{stem}.pidx")
    save_depth(out.depth, directory / f"{stem}.dpth")


def load_render(directory, view_index: int, stem: str | None = None) -> RenderOutput:
    directory = Path(directory)
    stem = stem or f"view{view_index}"
    rgb = load_png(directory / f"{stem}.png")
    point_index = load_point_index(directory / f"{stem}.pidx")
    depth = load_depth(directory / f"{stem}.dpth")
    return RenderOutput(rgb, depth, point_index, view_index)
