"""Command-line pipeline: render, segment, eval, ablate-views, capture, synth.

Configuration precedence is CLI flag > TOML config file > built-in default.
Exit codes: 0 success, 2 usage/missing input, 3 data-format error,
4 internal invariant violation.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import cache as cache_mod
from . import camera, capture, fusion, metrics, proposal, render, report, synth
from .errors import FormatError, InvariantError, UsageError
from .geom import (TriMesh, default_palette, load_model, mesh_vertices_as_points,
                   save_model, write_ply)

log = logging.getLogger("mf3d")

DEFAULTS = {
    "views": camera.DEFAULT_VIEWS,
    "elevation": camera.DEFAULT_ELEVATION_DEG,
    "width": camera.DEFAULT_WIDTH,
    "height": camera.DEFAULT_HEIGHT,
    "focal": camera.DEFAULT_FOCAL,
    "splat": None,
    "kind": "auto",
    "tau": fusion.DEFAULT_TAU,
    "normalization": "coverage",
    "min_pixels": proposal.DEFAULT_MIN_PIXELS,
    "threads": 1,
    "inpaint": 0,
    "stride": 1,
    "clip_min": capture.DEFAULT_CLIP_RANGE[0],
    "clip_max": capture.DEFAULT_CLIP_RANGE[1],
    "radius": capture.DEFAULT_OUTLIER_RADIUS,
    "min_neighbors": capture.DEFAULT_MIN_NEIGHBORS,
    "resolution": 100,
    "stagger": 30.0,
    "count_other_in_oa": False,
}


def _merge_config(args: argparse.Namespace) -> argparse.Namespace:
    """CLI > config file > defaults; flags left at None take lower layers."""
    file_values = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise UsageError(f"config file not found: {path}")
        with open(path, "rb") as fh:
            try:
                file_values = tomllib.load(fh)
            except tomllib.TOMLDecodeError as exc:
                raise FormatError(f"bad TOML in {path}: {exc}")
    merged = argparse.Namespace(**vars(args))
    for key, value in file_values.items():
        if getattr(merged, key, None) is None:
            setattr(merged, key, value)
    for key, default in DEFAULTS.items():
        if getattr(merged, key, None) is None:
            setattr(merged, key, default)
    return merged


def _require_path(value, what) -> Path:
    if value is None:
        raise UsageError(f"missing required {what}")
    path = Path(value)
    if not path.exists():
        raise UsageError(f"{what} not found: {path}")
    return path


def _check_views(v):
    if not 1 <= v <= 64:
        raise UsageError(f"view count {v} outside [1, 64]")
    return v


def _load_model_points(model_path, kind):
    model = load_model(model_path, kind=kind)
    points = mesh_vertices_as_points(model) if isinstance(model, TriMesh) else model
    return model, points


# ---------------------------------------------------------------------------
# Commands


def cmd_render(cfg) -> int:
    model_path = _require_path(cfg.model, "model path")
    out = Path(cfg.out or "out")
    model, points = _load_model_points(model_path, cfg.kind)
    intr = camera.default_intrinsics(cfg.width, cfg.height, cfg.focal)
    poses = camera.fit_rig_to_model(points, _check_views(cfg.views), intr,
                                    elevation_deg=cfg.elevation)
    outs = render.render_views(
        model if isinstance(model, TriMesh) else None, points, poses,
        splat_px=cfg.splat, threads=cfg.threads,
    )
    for ro in outs:
        render.save_render(ro, out)
    camera.save_rig(poses, out / "rig.json")
    print(f"rendered {len(poses)} views of {len(points)} points -> {out}")
    return 0


def _load_renders_for_lifting(renders_dir, poses):
    outs = []
    for pose in poses:
        pidx = renders_dir / f"view{pose.view_index}.pidx"
        if not pidx.exists():
            raise UsageError(f"render not found: {pidx}")
        point_index = render.load_point_index(pidx)
        depth = render.load_depth(renders_dir / f"view{pose.view_index}.dpth")
        rgb = np.zeros(point_index.shape + (3,), dtype=np.uint8)  # not needed to lift
        outs.append(render.RenderOutput(rgb, depth, point_index, pose.view_index))
    return outs


def _read_bundle_light(bundle_dir):
    """Manifest + embeddings only; never opens mask RLE files (warm path)."""
    manifest_path = bundle_dir / "manifest.json"
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("schema_version") != proposal.SCHEMA_VERSION:
        raise FormatError(f"unsupported schema_version {manifest.get('schema_version')!r}")
    cameras = camera.rig_from_json(manifest["cameras"])
    c_dim = int(manifest["C"])
    emb_doc = manifest["embeddings"]
    raw = (bundle_dir / emb_doc["file"]).read_bytes()
    if hashlib.sha256(raw).hexdigest() != emb_doc["sha256"]:
        raise FormatError("embedding checksum mismatch")
    n = int(emb_doc["count"])
    if len(raw) != n * c_dim * 4:
        raise FormatError(
            f"embedding file size mismatch: expected {n * c_dim * 4}, found {len(raw)}"
        )
    q = np.frombuffer(raw, dtype="<f4").reshape(n, c_dim).astype(np.float64)
    norms = np.linalg.norm(q, axis=1, keepdims=True)
    if (norms == 0).any():
        raise FormatError("embeddings contain zero-norm rows")
    return cameras, q / norms


def cmd_segment(cfg) -> int:
    t_start = time.perf_counter()
    model_path = _require_path(cfg.model, "model path")
    bundle_dir = _require_path(cfg.bundle, "bundle directory")
    renders_dir = _require_path(cfg.renders, "renders directory")
    prompts_dir = _require_path(cfg.prompts, "prompts directory")
    out = Path(cfg.out or "out")
    out.mkdir(parents=True, exist_ok=True)

    _, points = _load_model_points(model_path, cfg.kind)
    text = fusion.load_text_embeddings(prompts_dir)
    seg_cfg = fusion.SegmentConfig(
        tau=cfg.tau, normalization=cfg.normalization,
        min_pixels=cfg.min_pixels, threads=cfg.threads,
    )

    cache_dir = Path(
        cfg.cache_dir or os.environ.get("MF3D_CACHE_DIR") or (out / "cache")
    )
    key = cache_mod.cache_key(bundle_dir / "manifest.json", renders_dir / "rig.json")
    entry = cache_mod.matrix_path(cache_dir, bundle_dir, renders_dir)

    timings = {"lift": 0.0}
    warnings = []
    rle_files_read = 0
    cache_state = "miss"
    mm = cache_mod.load_mask_matrix(entry, key, cfg.min_pixels) if entry.exists() else None
    if mm is not None:
        cache_state = "hit"
        _, q_all = _read_bundle_light(bundle_dir)
        kept_q = q_all[mm.kept]
    else:
        if entry.exists():
            cache_state = "rebuilt"
            log.warning("cache entry %s does not match the bundle/rig; rebuilding", entry)
        t0 = time.perf_counter()
        bundle = proposal.read_bundle(bundle_dir)
        warnings = list(bundle.warnings)
        rle_files_read = len(bundle.masks)
        poses = bundle.cameras
        renders_list = _load_renders_for_lifting(renders_dir, poses)
        mm = fusion.build_mask_matrix(bundle, renders_list, len(points), seg_cfg)
        timings["lift"] = time.perf_counter() - t0
        with cache_mod.cache_lock(cache_dir):
            cache_mod.save_mask_matrix(entry, key, mm, cfg.min_pixels)
        kept_q = bundle.Q[mm.kept]

    t0 = time.perf_counter()
    logits = fusion.classify(kept_q, text)
    timings["classify"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    y, uncovered = fusion.fuse(mm.M, logits, normalization=cfg.normalization)
    timings["fuse"] = time.perf_counter() - t0
    field = fusion.assign_labels(y, cfg.tau, uncovered)
    if cfg.inpaint:
        field = fusion.inpaint_knn(points.positions, field, k=cfg.inpaint)

    fusion.save_labels(field, text.prompts, out / "labels.json")
    palette = default_palette(text.K)
    save_model(points, out / "labeled.ply", labels=field.labels, palette=palette)

    total = time.perf_counter() - t_start
    doc = {
        "total_s": total,
        "breakdown_s": timings,
        "cache": cache_state,
        "rle_files_read": rle_files_read,
        "bundle_warnings": warnings,
        "covered_points": int((~field.uncovered).sum()),
        "points": len(points),
        "tau": cfg.tau,
        "normalization": cfg.normalization,
    }
    with open(out / "report.json", "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")
    print(
        f"segmented {len(points)} points (cache {cache_state}); total {total:.3f}s, "
        f"lift {timings['lift']:.3f}s, classify {timings['classify'] * 1e3:.1f}ms, "
        f"fuse {timings['fuse'] * 1e3:.1f}ms"
    )
    return 0


def cmd_eval(cfg) -> int:
    pred_path = _require_path(cfg.pred, "prediction labels file")
    gt_path = _require_path(cfg.gt, "ground-truth file")
    out = Path(cfg.out or "out")
    out.mkdir(parents=True, exist_ok=True)
    pred, pred_prompts, _ = fusion.load_labels(pred_path)
    gt, gt_prompts = metrics.load_gt(gt_path)
    if len(pred) != len(gt):
        raise FormatError(f"prediction has {len(pred)} points, gt has {len(gt)}")
    if pred_prompts != gt_prompts:
        log.warning("prediction and gt prompt lists differ; scoring by index")
    k = len(gt_prompts)
    cm = metrics.confusion(pred, gt, k)
    row = metrics.compute_metrics(cm, count_other_in_oa=cfg.count_other_in_oa)
    metrics.save_metrics_json([row], out / "metrics.json")
    metrics.write_metrics_csv([{"views": "", **row}], out / "metrics.csv")
    report.save_confusion_figure(cm.counts, gt_prompts, out / "confusion.png")
    print(f"OA {row['OA']:.2f}  mAcc {row['mAcc']:.2f}  mIoU {row['mIoU']:.2f}")
    return 0


def cmd_ablate_views(cfg) -> int:
    out = Path(cfg.out or "out")
    out.mkdir(parents=True, exist_ok=True)
    view_counts = cfg.view_list
    if not view_counts:
        raise UsageError("no view counts given (use --views 2,4,8)")
    rows = []
    for v in view_counts:
        _check_views(v)
        fix_dir = out / f"v{v}"
        summary = synth.build_fixture(
            cfg.synth_kind, fix_dir, views=v, width=cfg.width, height=cfg.height,
            focal=cfg.focal, stagger_deg=cfg.stagger, splat_px=cfg.splat,
            threads=cfg.threads, model_kwargs=_model_kwargs(cfg),
        )
        bundle = proposal.read_bundle(summary["bundle"])
        model_points = load_model(summary["model"], kind="points")
        renders_list = [
            render.load_render(summary["renders"], p.view_index) for p in bundle.cameras
        ]
        text = fusion.load_text_embeddings(summary["prompts"])
        seg_cfg = fusion.SegmentConfig(tau=cfg.tau, normalization=cfg.normalization,
                                       min_pixels=cfg.min_pixels, threads=cfg.threads)
        field = fusion.segment(bundle, renders_list, text, seg_cfg)
        gt, _ = metrics.load_gt(summary["gt"])
        covered = ~field.uncovered
        row = metrics.compute_metrics(metrics.confusion(field.labels, gt, text.K))
        row_covered = metrics.compute_metrics(
            metrics.confusion(field.labels[covered], gt[covered], text.K)
        )
        rows.append(
            {
                "views": v,
                **row,
                "covered_fraction": round(float(covered.mean()), 4),
                "OA_covered": row_covered["OA"],
            }
        )
        print(
            f"views={v}: OA {row['OA']:.2f} mAcc {row['mAcc']:.2f} mIoU {row['mIoU']:.2f} "
            f"covered {covered.mean() * 100:.1f}% (OA on covered {row_covered['OA']:.2f})"
        )
        del model_points
    metrics.write_metrics_csv(rows, out / "ablation.csv")
    metrics.save_metrics_json(rows, out / "ablation.json")
    report.save_ablation_figure(rows, out / "ablation.png")
    return 0


def cmd_capture(cfg) -> int:
    frames_root = _require_path(cfg.frames, "frames directory")
    calib_path = _require_path(cfg.calib, "calibration file")
    out = Path(cfg.out or "out")
    out.mkdir(parents=True, exist_ok=True)
    graph = capture.load_calib(calib_path)
    transforms = capture.solve_world_transforms(graph)

    frame_dirs = sorted(p for p in frames_root.iterdir() if p.is_dir())
    if not frame_dirs:
        raise UsageError(f"no frame directories under {frames_root}")
    clouds = []
    for frame_dir in frame_dirs:
        frame = capture.load_frame(frame_dir)
        if frame.camera_id not in transforms:
            raise UsageError(f"frame camera '{frame.camera_id}' missing from calibration")
        frame = capture.clip_depth_range(frame, cfg.clip_min, cfg.clip_max)
        cloud = capture.depth_to_cloud(frame, stride=cfg.stride)
        if cloud is None:
            log.warning("frame %s has no valid depth after clipping", frame_dir.name)
            continue
        clouds.append((cloud, transforms[frame.camera_id]))

    out_path = out / "merged.ply"
    if not clouds:
        log.warning("no valid depth in any frame; writing empty cloud")
        write_ply(out_path, np.zeros((0, 3)))
        print(f"merged 0 points -> {out_path}")
        return 0
    merged = capture.merge_clouds(clouds)
    filtered, removed = capture.radius_outlier_removal(
        merged, cfg.radius, cfg.min_neighbors
    )
    if filtered is None:
        log.warning("outlier filter removed every point; writing empty cloud")
        write_ply(out_path, np.zeros((0, 3)))
        print(f"merged 0 points -> {out_path}")
        return 0
    save_model(filtered, out_path)
    print(
        f"merged {len(merged)} points from {len(clouds)} frames, "
        f"removed {removed.size} outliers -> {out_path}"
    )
    return 0


def _model_kwargs(cfg):
    if cfg.synth_kind in ("sphere2", "occluder"):
        return {"points_per_axis": cfg.resolution}
    return {"segments": cfg.resolution}


def cmd_synth(cfg) -> int:
    out = Path(cfg.out or f"fixture_{cfg.synth_kind}")
    summary = synth.build_fixture(
        cfg.synth_kind, out, views=_check_views(cfg.views), width=cfg.width,
        height=cfg.height, focal=cfg.focal, stagger_deg=cfg.stagger,
        splat_px=cfg.splat, threads=cfg.threads, model_kwargs=_model_kwargs(cfg),
    )
    print(
        f"{summary['kind']}: {summary['points']} points, {summary['classes']} classes, "
        f"{summary['masks']} oracle masks over {summary['views']} views -> {out}"
    )
    return 0


# ---------------------------------------------------------------------------
# Parser


def _add_common(sp):
    sp.add_argument("--config", help="TOML config file; CLI flags win")
    sp.add_argument("--out", help="output directory")
    sp.add_argument("--threads", type=int, help="worker threads (default 1)")


def _add_rig_flags(sp):
    sp.add_argument("--views", type=int, help="number of rig views (default 8)")
    sp.add_argument("--elevation", type=float, help="rig elevation in degrees")
    sp.add_argument("--width", type=int, help="image width (default 512)")
    sp.add_argument("--height", type=int, help="image height (default 512)")
    sp.add_argument("--focal", type=float, help="focal length in pixels (default 512)")
    sp.add_argument("--splat", type=float, help="point splat radius in pixels")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mf3d",
        description="Open-vocabulary 3D segmentation over rendered multi-view proposals",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("render", help="render a model from a fitted camera ring")
    p.add_argument("--model", help="input PLY model")
    p.add_argument("--kind", choices=["auto", "mesh", "points", "gaussians"])
    _add_rig_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("segment", help="lift a proposal bundle and assign labels")
    p.add_argument("--model", help="input PLY model")
    p.add_argument("--kind", choices=["auto", "mesh", "points", "gaussians"])
    p.add_argument("--bundle", help="proposal bundle directory")
    p.add_argument("--renders", help="directory with rig.json and view*.pidx")
    p.add_argument("--prompts", help="directory with prompts.json + text_embeddings.f32")
    p.add_argument("--tau", type=float, help="'other' threshold on fused scores")
    p.add_argument("--normalization", choices=list(fusion.NORMALIZATIONS))
    p.add_argument("--min-pixels", dest="min_pixels", type=int,
                   help="reject masks with fewer surface pixels")
    p.add_argument("--inpaint", type=int, help="kNN inpaint 'other' points (0 = off)")
    p.add_argument("--cache-dir", dest="cache_dir", help="mask-matrix cache directory")
    _add_common(p)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("eval", help="score predicted labels against ground truth")
    p.add_argument("--pred", help="labels.json from segment")
    p.add_argument("--gt", help="gt.json")
    p.add_argument("--count-other-in-oa", dest="count_other_in_oa", action="store_true",
                   default=None, help="include gt-'other' points in overall accuracy")
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate-views", help="sweep view counts on a synthetic fixture")
    p.add_argument("--kind", dest="synth_kind", choices=list(synth.KINDS),
                   default="sphere2", help="synthetic fixture kind")
    p.add_argument("--views", dest="views_csv", help="comma-separated view counts, e.g. 2,4,8")
    p.add_argument("--tau", type=float)
    p.add_argument("--normalization", choices=list(fusion.NORMALIZATIONS))
    p.add_argument("--min-pixels", dest="min_pixels", type=int)
    p.add_argument("--resolution", type=int, help="fixture resolution parameter")
    p.add_argument("--stagger", type=float,
                   help="alternating rig elevation magnitude in degrees (default 30)")
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--focal", type=float)
    p.add_argument("--splat", type=float)
    _add_common(p)
    p.set_defaults(func=cmd_ablate_views)

    p = sub.add_parser("capture", help="fuse RGB-D frames into a filtered cloud")
    p.add_argument("--frames", help="directory of frame subdirectories")
    p.add_argument("--calib", help="calib.json")
    p.add_argument("--clip-min", dest="clip_min", type=float, help="min depth in meters")
    p.add_argument("--clip-max", dest="clip_max", type=float, help="max depth in meters")
    p.add_argument("--stride", type=int, help="pixel subsampling stride")
    p.add_argument("--radius", type=float, help="outlier search radius in meters")
    p.add_argument("--min-neighbors", dest="min_neighbors", type=int,
                   help="neighbors required to keep a point")
    _add_common(p)
    p.set_defaults(func=cmd_capture)

    p = sub.add_parser("synth", help="generate a synthetic labeled fixture")
    p.add_argument("synth_kind", choices=list(synth.KINDS))
    p.add_argument("--resolution", type=int, help="model resolution parameter")
    p.add_argument("--views", type=int, help="number of rig views (default 8)")
    p.add_argument("--stagger", type=float,
                   help="alternating rig elevation magnitude in degrees (default 30)")
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--focal", type=float)
    p.add_argument("--splat", type=float)
    _add_common(p)
    p.set_defaults(func=cmd_synth)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _merge_config(args)
        if hasattr(cfg, "views_csv"):
            cfg.view_list = (
                [int(v) for v in str(cfg.views_csv).split(",")] if cfg.views_csv else []
            )
        return cfg.func(cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FormatError as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return 3
    except InvariantError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
