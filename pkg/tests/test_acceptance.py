"""Acceptance gate: one test per release criterion, each printing a
PASS/FAIL line (run with -s to see them). Tolerances are pinned here and
must not be loosened.
"""

import time

import numpy as np
import scipy.sparse as sp

from mf3d import camera, capture, fusion, metrics, proposal, render, synth
from mf3d.fusion import LogitMatrix, SegmentConfig, TextEmbeddingSet
from mf3d.geom import PointSet, RigidTransform, TriMesh, mesh_vertices_as_points

from .oracles import (edge_pixel_mask, fuse_triple_loop, outlier_keep_bruteforce,
                      raycast_point_index)


def _report(name):
    class _Ctx:
        def __enter__(self):
            return self

        def __exit__(self, exc_type, exc, tb):
            print(f"ACCEPTANCE {'FAIL' if exc_type else 'PASS'}: {name}")
            return False

    return _Ctx()


def test_fusion_oracle_equivalence():
    with _report("fusion oracle equivalence (100 instances, bit-exact, < 1 s)"):
        rng = np.random.default_rng(1000)
        fuse_seconds = 0.0
        for _ in range(100):
            p_count = int(rng.integers(1, 201))
            n_count = int(rng.integers(1, 51))
            k_count = int(rng.integers(1, 11))
            dense = rng.random((p_count, n_count)) < rng.uniform(0.05, 0.6)
            logits = rng.uniform(-1.0, 1.0, (n_count, k_count))
            m = sp.csc_matrix(dense.astype(np.float64))
            t0 = time.perf_counter()
            y, _ = fusion.fuse(m, LogitMatrix(logits), normalization="none")
            fuse_seconds += time.perf_counter() - t0
            expected = fuse_triple_loop(dense, logits)
            assert (y == expected).all(), "fuse deviates from triple-loop oracle"
        assert fuse_seconds < 1.0, f"fuse too slow: {fuse_seconds:.3f}s"


def test_cosine_properties():
    with _report("cosine range, positive-scaling invariance (1e-12), self-similarity"):
        rng = np.random.default_rng(1001)
        q = rng.normal(size=(40, 32))
        w = rng.normal(size=(7, 32))
        tes = TextEmbeddingSet(w, tuple(f"c{i}" for i in range(7)))
        logits = fusion.classify(q, tes).values
        assert logits.min() >= -1.0 and logits.max() <= 1.0
        scaled_q = fusion.classify(q * rng.uniform(0.01, 100.0, (40, 1)), tes).values
        assert np.abs(scaled_q - logits).max() < 1e-12
        tes_scaled = TextEmbeddingSet(w * rng.uniform(0.01, 100.0, (7, 1)), tes.prompts)
        assert np.abs(fusion.classify(q, tes_scaled).values - logits).max() < 1e-12
        self_sim = fusion.classify(w, tes).values
        assert np.abs(np.diag(self_sim) - 1.0).max() < 1e-12


def test_camera_round_trip():
    with _report("camera round-trip on 10^4 points (< 1e-6 m / < 1e-6 px)"):
        rng = np.random.default_rng(1002)
        intr = camera.default_intrinsics()
        poses = camera.make_ring_rig(8, [0.3, -0.2, 0.7], 2.5, [0, 1, 0], intr, 20.0)
        pose = poses[3]
        n = 10_000
        us = rng.uniform(0, intr.width, n)
        vs = rng.uniform(0, intr.height, n)
        zs = rng.uniform(0.3, 8.0, n)
        world = camera.unproject(us, vs, zs, pose)
        uv, z, valid = camera.project_points(world, pose)
        assert valid.all()
        assert np.abs(uv[:, 0] - us).max() < 1e-6
        assert np.abs(uv[:, 1] - vs).max() < 1e-6
        world2 = camera.unproject(uv[:, 0], uv[:, 1], z, pose)
        assert np.linalg.norm(world2 - world, axis=1).max() < 1e-6


def _random_acceptance_mesh(rng, intr):
    n_faces = 20
    centers = np.stack(
        [rng.uniform(-0.6, 0.6, n_faces), rng.uniform(-0.6, 0.6, n_faces),
         rng.uniform(2.0, 4.0, n_faces)], axis=1,
    )
    verts = (centers[:, None, :] + rng.uniform(-0.5, 0.5, (n_faces, 3, 3))).reshape(-1, 3)
    verts[:, 2] = np.clip(verts[:, 2], 1.5, 5.0)
    colors = rng.random((verts.shape[0], 3))
    return TriMesh(verts, np.arange(n_faces * 3).reshape(n_faces, 3), vertex_colors=colors)


def test_rasterizer_oracle_and_thread_determinism():
    with _report("rasterizer vs ray-casting oracle (>= 99.5%), thread determinism"):
        intr = camera.Intrinsics(64.0, 64.0, 32.0, 32.0, 64, 64)
        pose = camera.CameraPose(intr, RigidTransform.identity(), 1)
        for seed in range(5):
            rng = np.random.default_rng(2000 + seed)
            mesh = _random_acceptance_mesh(rng, intr)
            out = render.rasterize_mesh(mesh, mesh_vertices_as_points(mesh), pose)
            oracle_idx, _ = raycast_point_index(mesh, pose)
            interior = ~edge_pixel_mask(mesh, pose)
            agreement = (out.point_index == oracle_idx)[interior].mean()
            assert agreement >= 0.995, f"seed {seed}: agreement {agreement:.4f}"

        rng = np.random.default_rng(2100)
        mesh = _random_acceptance_mesh(rng, intr)
        pts = mesh_vertices_as_points(mesh)
        poses = camera.make_ring_rig(4, mesh.vertices.mean(axis=0), 4.0, [0, 1, 0], intr)
        baseline = render.render_views(mesh, pts, poses, threads=1)
        for threads in (2, 8):
            run = render.render_views(mesh, pts, poses, threads=threads)
            for a, b in zip(baseline, run):
                assert a.rgb.tobytes() == b.rgb.tobytes()
                assert a.point_index.tobytes() == b.point_index.tobytes()
                assert a.depth.tobytes() == b.depth.tobytes()


def test_lifting_oracle():
    with _report("lifting equals brute-force pixel sets (50 pairs); occlusion exact"):
        intr = camera.Intrinsics(48.0, 48.0, 24.0, 24.0, 48, 48)
        for seed in range(50):
            rng = np.random.default_rng(3000 + seed)
            pts = PointSet(rng.normal(size=(150, 3)) * 0.4)
            [pose] = camera.make_ring_rig(
                1, [0, 0, 0], 3.0, [0, 1, 0], intr,
                elevation_deg=float(rng.uniform(-40, 40)),
            )
            out = render.rasterize_points(pts, pose, splat_px=2.0)
            bits = rng.random(out.point_index.shape) < rng.uniform(0.1, 0.7)
            bits[0, 0] = True
            lifted = proposal.lift_mask(
                proposal.Mask2D(1, bits, 0), out, len(pts), min_pixels=0
            )
            expected = set(out.point_index[bits].tolist()) - {render.SENTINEL}
            got = set(np.flatnonzero(lifted.membership).tolist())
            assert got == expected
            visible = set(np.unique(out.point_index).tolist()) - {render.SENTINEL}
            assert got <= visible, "occluded point appeared in a lifted mask"


def test_end_to_end_synthetic_recovery(tmp_path):
    with _report("sphere2 V=8: 100.00 OA on covered, coverage >= 99%, < 30 s"):
        t0 = time.perf_counter()
        summary = synth.build_fixture("sphere2", tmp_path / "fix", views=8)
        assert summary["points"] == 10_000
        bundle = proposal.read_bundle(summary["bundle"])
        renders = [
            render.load_render(summary["renders"], p.view_index) for p in bundle.cameras
        ]
        text = fusion.load_text_embeddings(summary["prompts"])
        field = fusion.segment(bundle, renders, text)
        gt, _ = metrics.load_gt(summary["gt"])
        covered = ~field.uncovered
        elapsed = time.perf_counter() - t0
        oa = metrics.compute_metrics(
            metrics.confusion(field.labels[covered], gt[covered], text.K)
        )["OA"]
        assert oa == 100.00, f"OA on covered points {oa}"
        assert covered.mean() >= 0.99, f"covered fraction {covered.mean():.4f}"
        assert elapsed < 30.0, f"pipeline took {elapsed:.1f}s"


def test_views_ablation_mechanism(tmp_path):
    with _report("occluder: coverage strictly grows 2 -> 8 views, OA stays 100.00"):
        results = {}
        for v in (2, 8):
            summary = synth.build_fixture(
                "occluder", tmp_path / f"v{v}", views=v, width=256, height=256,
                focal=256.0, model_kwargs={"points_per_axis": 60, "plate_res": 40},
            )
            bundle = proposal.read_bundle(summary["bundle"])
            renders = [
                render.load_render(summary["renders"], p.view_index)
                for p in bundle.cameras
            ]
            text = fusion.load_text_embeddings(summary["prompts"])
            field = fusion.segment(bundle, renders, text)
            gt, _ = metrics.load_gt(summary["gt"])
            covered = ~field.uncovered
            oa = metrics.compute_metrics(
                metrics.confusion(field.labels[covered], gt[covered], text.K)
            )["OA"]
            results[v] = (covered.mean(), oa)
        assert results[8][0] > results[2][0], f"coverage did not grow: {results}"
        assert results[2][1] == 100.00 and results[8][1] == 100.00, results


def _decoupling_setup(tmp_path, rng):
    """P=50k cloud, 8 views at 512^2, 400 masks, C=768, K=20 prompts."""
    p_count, n_masks, c_dim, k_classes = 50_000, 400, 768, 20
    pts = PointSet(rng.normal(size=(p_count, 3)) * 0.5)
    intr = camera.default_intrinsics()
    poses = synth.staggered_rig(pts, 8, intr)
    outs = render.render_views(None, pts, poses, threads=2)

    masks, embeddings = [], []
    per_view = n_masks // len(poses)
    for pose, out in zip(poses, outs):
        surface = np.argwhere(out.point_index != render.SENTINEL)
        lo = surface.min(axis=0)
        hi = surface.max(axis=0)
        for j in range(per_view):
            for _ in range(100):
                cy, cx = rng.integers(lo, hi + 1)
                h = int(rng.integers(20, 60))
                w = int(rng.integers(20, 60))
                bits = np.zeros(out.point_index.shape, dtype=bool)
                bits[max(cy - h, 0):cy + h, max(cx - w, 0):cx + w] = True
                if (out.point_index[bits] != render.SENTINEL).sum() >= 16:
                    break
            masks.append(proposal.Mask2D(pose.view_index, bits, j))
            embeddings.append(
                proposal.MaskEmbedding(rng.normal(size=c_dim), pose.view_index, j)
            )
    bundle = proposal.ProposalBundle(list(poses), masks, embeddings, c_dim,
                                     source="synthetic")
    bundle_dir = tmp_path / "bundle"
    proposal.write_bundle(bundle, bundle_dir)
    renders_dir = tmp_path / "renders"
    for out in outs:
        render.save_render(out, renders_dir)
    camera.save_rig(poses, renders_dir / "rig.json")
    text = TextEmbeddingSet(rng.normal(size=(k_classes, c_dim)),
                            tuple(f"class {i}" for i in range(k_classes)))
    return pts, bundle_dir, renders_dir, outs, text


def test_decoupled_warm_path(tmp_path):
    with _report("cached-M warm path: classify+fuse < 50 ms at P=50k/N=400/K=20/C=768; "
                 "warm labels identical to cold"):
        from mf3d import cache as cache_mod

        rng = np.random.default_rng(1004)
        pts, bundle_dir, renders_dir, outs, text = _decoupling_setup(tmp_path, rng)
        cfg = SegmentConfig()

        # cold: full read + lift, then persist the mask matrix
        bundle = proposal.read_bundle(bundle_dir)
        mm = fusion.build_mask_matrix(bundle, outs, len(pts), cfg)
        key = cache_mod.cache_key(bundle_dir / "manifest.json", renders_dir / "rig.json")
        entry = cache_mod.matrix_path(tmp_path / "cache", bundle_dir, renders_dir)
        with cache_mod.cache_lock(tmp_path / "cache"):
            cache_mod.save_mask_matrix(entry, key, mm, cfg.min_pixels)
        y, uncovered = fusion.fuse(mm.M, fusion.classify(bundle.Q[mm.kept], text),
                                   normalization=cfg.normalization)
        cold = fusion.assign_labels(y, cfg.tau, uncovered)

        # warm: cached matrix + light bundle read; no mask file touches
        mm2 = cache_mod.load_mask_matrix(entry, key, cfg.min_pixels)
        assert mm2 is not None
        from mf3d.cli import _read_bundle_light
        _, q_all = _read_bundle_light(bundle_dir)
        kept_q = np.ascontiguousarray(q_all[mm2.kept])

        timings = []
        for _ in range(3):
            t0 = time.perf_counter()
            logits = fusion.classify(kept_q, text)
            y2, unc2 = fusion.fuse(mm2.M, logits, normalization=cfg.normalization)
            timings.append(time.perf_counter() - t0)
        warm = fusion.assign_labels(y2, cfg.tau, unc2)
        best = min(timings)
        assert best < 0.050, f"warm classify+fuse took {best * 1e3:.1f} ms"
        np.testing.assert_array_equal(warm.labels, cold.labels)
        np.testing.assert_array_equal(warm.Y, cold.Y)


def test_capture_math():
    with _report("outlier filter == O(n^2) oracle (2k pts); unprojection; "
                 "calibration ring 1e-9; clip range exact"):
        rng = np.random.default_rng(1005)

        # radius outlier removal vs brute force, exact set equality
        pos = np.concatenate([
            rng.normal(size=(1800, 3)) * 0.2,
            rng.uniform(-3, 3, (200, 3)),
        ])
        cloud = PointSet(pos)
        kept, removed = capture.radius_outlier_removal(cloud, 0.05, 4)
        expected = outlier_keep_bruteforce(pos, 0.05, 4)
        got = np.ones(len(pos), dtype=bool)
        got[removed] = False
        assert (got == expected).all()

        # depth_to_cloud vs camera.unproject, pixel for pixel
        intr = camera.Intrinsics(80.0, 80.0, 40.0, 40.0, 80, 80)
        depth = np.where(rng.random((80, 80)) < 0.4,
                         rng.uniform(0.2, 1.4, (80, 80)), 0.0)
        rgb = rng.integers(0, 255, (80, 80, 3), dtype=np.uint8)
        frame = capture.DepthFrame(depth, rgb, intr, "cam0")
        cloud = capture.depth_to_cloud(frame)
        pose = camera.CameraPose(intr, RigidTransform.identity(), 1)
        rows, cols = np.nonzero(depth > 0)
        expected_pts = camera.unproject(cols + 0.5, rows + 0.5, depth[rows, cols], pose)
        assert len(cloud) == rows.size
        assert np.abs(cloud.positions - expected_pts).max() < 1e-12

        # 4-camera ring: solved transforms reproduce the generators within 1e-9
        def rot_y(deg):
            a = np.deg2rad(deg)
            return np.array([[np.cos(a), 0, np.sin(a)], [0, 1, 0],
                             [-np.sin(a), 0, np.cos(a)]])

        gt = {}
        for k in range(4):
            rot = rot_y(90.0 * k + 7.0)
            gt[f"cam{k}"] = RigidTransform(rot, rng.normal(size=3))
        edges = tuple(
            capture.CalibEdge(
                f"cam{k}", f"cam{(k + 1) % 4}",
                gt[f"cam{(k + 1) % 4}"].inverse().compose(gt[f"cam{k}"]),
            )
            for k in range(4)
        )
        solved = capture.solve_world_transforms(capture.CalibGraph(edges, "cam0"))
        for k in range(4):
            expected_xf = gt["cam0"].inverse().compose(gt[f"cam{k}"])
            assert np.abs(solved[f"cam{k}"].rotation - expected_xf.rotation).max() < 1e-9
            assert np.abs(solved[f"cam{k}"].translation - expected_xf.translation).max() < 1e-9

        # clip range drops exactly the out-of-range pixels
        clipped = capture.clip_depth_range(frame, 0.1, 1.5)
        valid = depth > 0
        out_of_range = valid & ((depth < 0.1) | (depth > 1.5))
        assert (clipped.depth[out_of_range] == 0).all()
        assert (clipped.depth[~out_of_range] == depth[~out_of_range]).all()
        below = capture.clip_depth_range(
            capture.DepthFrame(np.full((2, 2), 0.05), np.zeros((2, 2, 3), np.uint8),
                               camera.Intrinsics(1.0, 1.0, 0.5, 0.5, 2, 2), "c"),
            0.1, 1.5,
        )
        assert (below.depth == 0).all()


def test_metrics_criteria():
    with _report("metrics: hand case 75.00/75.00/58.33; permutation & duplication "
                 "invariance"):
        gt = np.array([0] * 10 + [1] * 10)
        pred = np.array([0] * 5 + [1] * 5 + [1] * 10)
        m = metrics.compute_metrics(metrics.confusion(pred, gt, 2))
        assert m == {"OA": 75.00, "mAcc": 75.00, "mIoU": 58.33}

        rng = np.random.default_rng(1006)
        k = 5
        gt = rng.integers(0, k, 400)
        pred = rng.integers(0, k + 1, 400)
        base = metrics.compute_metrics(metrics.confusion(pred, gt, k))
        perm = np.concatenate([rng.permutation(k), [k]])
        permuted = metrics.compute_metrics(metrics.confusion(perm[pred], perm[gt], k))
        assert base == permuted
        doubled = metrics.compute_metrics(
            metrics.confusion(np.tile(pred, 2), np.tile(gt, 2), k)
        )
        assert base == doubled
