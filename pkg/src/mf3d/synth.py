"""Deterministic synthetic fixtures: labeled models, oracle proposal
bundles, and canonical prompt embeddings.

The oracle bundle contains, per view, one mask per visible ground-truth
region (the pixels whose winning point belongs to that region) with a
canonical one-hot embedding, so a correct pipeline must recover the ground
truth exactly on every covered point.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import camera, render
from .errors import UsageError
from .fusion import TextEmbeddingSet, save_text_embeddings
from .geom import PointSet, default_palette, save_model
from .metrics import save_gt
from .proposal import Mask2D, MaskEmbedding, ProposalBundle, write_bundle
from .render import RenderOutput

KINDS = ("sphere2", "capsule5", "occluder")
CANONICAL_DIM = 16


def canonical_embeddings(k: int, c: int = CANONICAL_DIM) -> np.ndarray:
    """One-hot rows e_0..e_{k-1} in R^c."""
    if k > c:
        raise ValueError(f"cannot place {k} canonical classes in {c} dims")
    w = np.zeros((k, c), dtype=np.float64)
    w[np.arange(k), np.arange(k)] = 1.0
    return w


def uv_sphere(rings: int, segments: int, radius: float = 1.0, center=(0.0, 0.0, 0.0)):
    """UV-sampled sphere cloud; rings span latitude without exact poles."""
    theta = np.pi * (np.arange(rings) + 0.5) / rings     # polar angle from +z
    phi = 2.0 * np.pi * np.arange(segments) / segments
    t, p = np.meshgrid(theta, phi, indexing="ij")
    x = radius * np.sin(t) * np.cos(p)
    y = radius * np.sin(t) * np.sin(p)
    z = radius * np.cos(t)
    return np.stack([x.ravel(), y.ravel(), z.ravel()], axis=1) + np.asarray(center)


def make_sphere2(points_per_axis: int = 100):
    """Sphere split into two hemispherical classes by the sign of z."""
    pos = uv_sphere(points_per_axis, points_per_axis)
    gt = np.where(pos[:, 2] >= 0.0, 0, 1).astype(np.int64)
    prompts = ("upper hemisphere", "lower hemisphere")
    return _colored(pos, gt, len(prompts)), gt, prompts


def make_capsule5(segments: int = 80, rings: int = 40):
    """Capsule along +y with five axial label bands."""
    half = 0.5   # cylinder half-length
    radius = 0.35
    # Cylinder body.
    ys = np.linspace(-half, half, rings * 2)
    phi = 2.0 * np.pi * np.arange(segments) / segments
    yy, pp = np.meshgrid(ys, phi, indexing="ij")
    body = np.stack([radius * np.cos(pp), yy, radius * np.sin(pp)], axis=2).reshape(-1, 3)
    # Hemispherical caps.
    cap = uv_sphere(rings, segments, radius=radius)
    top = cap[cap[:, 2] >= 0.0][:, [0, 2, 1]]      # rotate +z cap onto +y
    top[:, 1] += half
    bottom = top.copy()
    bottom[:, 1] = -bottom[:, 1]
    pos = np.concatenate([body, top, bottom])
    y_min, y_max = pos[:, 1].min(), pos[:, 1].max()
    bands = np.clip(((pos[:, 1] - y_min) / (y_max - y_min) * 5).astype(np.int64), 0, 4)
    prompts = ("band 0", "band 1", "band 2", "band 3", "band 4")
    return _colored(pos, bands, len(prompts)), bands, prompts


def make_occluder(points_per_axis: int = 90, plate_res: int = 60):
    """Sphere plus a square plate in front of its +x face.

    From a 2-view rig (azimuths 0 and 180) the plate hides the sphere patch
    behind it and the patch is self-occluded from the opposite side, so a
    band of points is only covered once intermediate azimuths exist.
    """
    sphere = uv_sphere(points_per_axis, points_per_axis)
    gt_sphere = np.where(sphere[:, 2] >= 0.0, 0, 1).astype(np.int64)
    # Plate: grid in the y-z plane at x = 1.8, facing the azimuth-0 camera.
    side = np.linspace(-0.45, 0.45, plate_res)
    gy, gz = np.meshgrid(side, side, indexing="ij")
    plate = np.stack([np.full(gy.size, 1.8), gy.ravel(), gz.ravel()], axis=1)
    pos = np.concatenate([sphere, plate])
    gt = np.concatenate([gt_sphere, np.full(plate.shape[0], 2, dtype=np.int64)])
    prompts = ("upper hemisphere", "lower hemisphere", "plate")
    return _colored(pos, gt, len(prompts)), gt, prompts


def _colored(positions, gt, k) -> PointSet:
    palette = default_palette(k).astype(np.float64) / 255.0
    return PointSet(positions, colors=palette[gt])


def make_model(kind: str, **kwargs):
    if kind == "sphere2":
        return make_sphere2(**kwargs)
    if kind == "capsule5":
        return make_capsule5(**kwargs)
    if kind == "occluder":
        return make_occluder(**kwargs)
    raise UsageError(f"unknown synthetic kind '{kind}' (choose from {KINDS})")


def staggered_rig(points: PointSet, views: int, intr, stagger_deg: float = 30.0):
    """Fixture rig: a fitted ring with alternating +/- elevation.

    A single-elevation ring leaves both rig-axis polar caps of a closed
    surface unseen (they lie beyond every view's tangent circle), so full
    fixtures alternate elevations to cover the whole model.
    """
    pos = points.positions
    lo, hi = pos.min(axis=0), pos.max(axis=0)
    center = (lo + hi) / 2.0
    r_sphere = float(np.linalg.norm(pos - center, axis=1).max())
    if r_sphere < 1e-12:
        raise UsageError("degenerate extent: all points coincide")
    margin = max(intr.fx / (0.45 * intr.width), intr.fy / (0.45 * intr.height))
    radius = r_sphere * (1.0 + margin)
    up = np.array([0.0, 1.0, 0.0])
    poses = []
    for k in range(views):
        elev = stagger_deg if k % 2 == 0 else -stagger_deg
        ring = camera.make_ring_rig(views, center, radius, up, intr, elevation_deg=elev)
        poses.append(camera.CameraPose(intr, ring[k].world_to_cam, view_index=k + 1))
    return poses


def make_oracle_bundle(gt: np.ndarray, k: int, poses, renders: list[RenderOutput],
                       c_dim: int = CANONICAL_DIM) -> ProposalBundle:
    """Per view, one mask per visible ground-truth region with the matching
    canonical embedding. Masks within a view are disjoint by construction."""
    w = canonical_embeddings(k, c_dim)
    masks, embeddings = [], []
    for pose, out in zip(poses, renders):
        covered = out.point_index != render.SENTINEL
        gt_map = np.full(out.point_index.shape, -1, dtype=np.int64)
        gt_map[covered] = gt[out.point_index[covered]]
        mask_id = 0
        for cls in range(k):
            bits = gt_map == cls
            if not bits.any():
                continue
            masks.append(Mask2D(pose.view_index, bits, mask_id))
            embeddings.append(MaskEmbedding(w[cls], pose.view_index, mask_id))
            mask_id += 1
    return ProposalBundle(list(poses), masks, embeddings, c_dim, source="synthetic")


def build_fixture(kind: str, outdir, views: int = camera.DEFAULT_VIEWS,
                  width: int = camera.DEFAULT_WIDTH, height: int = camera.DEFAULT_HEIGHT,
                  focal: float = camera.DEFAULT_FOCAL, stagger_deg: float = 30.0,
                  splat_px=None, threads: int = 1, model_kwargs=None) -> dict:
    """Writes a complete fixture: model.ply, gt.json, renders/, bundle/,
    prompts/. Returns a summary dict with paths and sizes."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    points, gt, prompts = make_model(kind, **(model_kwargs or {}))
    k = len(prompts)

    save_model(points, outdir / "model.ply")
    save_gt(gt, prompts, outdir / "gt.json")

    intr = camera.default_intrinsics(width, height, focal)
    poses = staggered_rig(points, views, intr, stagger_deg=stagger_deg)
    renders_dir = outdir / "renders"
    outs = render.render_views(None, points, poses, splat_px=splat_px, threads=threads)
    for out in outs:
        render.save_render(out, renders_dir)
    camera.save_rig(poses, renders_dir / "rig.json")

    bundle = make_oracle_bundle(gt, k, poses, outs)
    write_bundle(bundle, outdir / "bundle")

    text = TextEmbeddingSet(canonical_embeddings(k), prompts)
    save_text_embeddings(text, outdir / "prompts")

    return {
        "kind": kind,
        "points": len(points),
        "classes": k,
        "views": views,
        "masks": len(bundle.masks),
        "model": str(outdir / "model.ply"),
        "gt": str(outdir / "gt.json"),
        "renders": str(renders_dir),
        "bundle": str(outdir / "bundle"),
        "prompts": str(outdir / "prompts"),
    }
