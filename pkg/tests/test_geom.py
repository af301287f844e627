import numpy as np
import pytest

from mf3d.errors import FormatError, PlyParseError, UsageError
from mf3d.geom import (PointSet, RigidTransform, TriMesh, apply_transform, compose,
                       load_model, mesh_vertices_as_points, save_model)


def random_rotation(rng):
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def random_transform(rng):
    return RigidTransform(random_rotation(rng), rng.normal(size=3))


ASCII_MESH = """ply
format ascii 1.0
element vertex 3
property float x
property float y
property float z
element face 1
property list uchar int vertex_indices
end_header
0 0 0
1 0 0
0 1 0
3 0 1 2
"""


class TestTypes:
    def test_pointset_requires_points(self):
        with pytest.raises(ValueError):
            PointSet(np.zeros((0, 3)))

    def test_pointset_rejects_nan(self):
        with pytest.raises(ValueError):
            PointSet(np.array([[0.0, np.nan, 0.0]]))

    def test_color_length_must_match(self):
        with pytest.raises(ValueError):
            PointSet(np.zeros((2, 3)), colors=np.zeros((3, 3)))

    def test_normals_must_be_unit(self):
        with pytest.raises(ValueError):
            PointSet(np.zeros((1, 3)), normals=np.array([[2.0, 0.0, 0.0]]))
        PointSet(np.zeros((1, 3)), normals=np.array([[1.0, 0.0, 0.0]]))

    def test_mesh_rejects_bad_index(self):
        with pytest.raises(ValueError):
            TriMesh(np.zeros((3, 3)), np.array([[0, 1, 3]]))

    def test_mesh_rejects_degenerate_face(self):
        with pytest.raises(ValueError):
            TriMesh(np.zeros((3, 3)), np.array([[0, 1, 1]]))

    def test_rotation_must_be_orthonormal(self):
        with pytest.raises(ValueError):
            RigidTransform(np.eye(3) * 2.0, np.zeros(3))
        with pytest.raises(ValueError):
            RigidTransform(np.diag([1.0, 1.0, -1.0]), np.zeros(3))


class TestTransforms:
    def test_identity_is_noop(self):
        pts = PointSet(np.arange(12, dtype=float).reshape(4, 3))
        out = apply_transform(pts, RigidTransform.identity())
        np.testing.assert_array_equal(out.positions, pts.positions)

    def test_pure_translation(self):
        xf = RigidTransform(np.eye(3), np.array([1.0, 0.0, 0.0]))
        out = apply_transform(PointSet(np.zeros((1, 3))), xf)
        np.testing.assert_array_equal(out.positions, [[1.0, 0.0, 0.0]])

    def test_inverse_round_trip(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            xf = random_transform(rng)
            pts = PointSet(rng.normal(size=(50, 3)))
            back = apply_transform(apply_transform(pts, xf), xf.inverse())
            assert np.abs(back.positions - pts.positions).max() < 1e-9

    def test_rigidity_preserves_distances(self):
        rng = np.random.default_rng(8)
        pts = rng.normal(size=(30, 3))
        xf = random_transform(rng)
        moved = xf.apply(pts)
        before = np.linalg.norm(pts[:, None] - pts[None], axis=2)
        after = np.linalg.norm(moved[:, None] - moved[None], axis=2)
        assert np.abs(before - after).max() < 1e-9

    def test_composition_associates(self):
        rng = np.random.default_rng(9)
        for _ in range(10):
            a, b = random_transform(rng), random_transform(rng)
            pts = rng.normal(size=(20, 3))
            chained = b.apply(a.apply(pts))
            composed = compose(b, a).apply(pts)
            assert np.abs(chained - composed).max() < 1e-9

    def test_normals_rotate_only(self):
        rng = np.random.default_rng(10)
        xf = random_transform(rng)
        n = np.array([[0.0, 0.0, 1.0]])
        pts = PointSet(np.zeros((1, 3)), normals=n)
        out = apply_transform(pts, xf)
        np.testing.assert_allclose(out.normals, n @ xf.rotation.T)
        assert abs(np.linalg.norm(out.normals[0]) - 1.0) < 1e-9


class TestPlyIO:
    def test_ascii_mesh_loads(self, tmp_path):
        path = tmp_path / "tri.ply"
        path.write_text(ASCII_MESH)
        mesh = load_model(path)
        assert isinstance(mesh, TriMesh)
        assert mesh.vertices.shape == (3, 3)
        assert mesh.faces.shape == (1, 3)

    def test_kind_points_ignores_faces(self, tmp_path):
        path = tmp_path / "tri.ply"
        path.write_text(ASCII_MESH)
        pts = load_model(path, kind="points")
        assert isinstance(pts, PointSet)
        assert len(pts) == 3

    def test_missing_file_is_usage_error(self, tmp_path):
        with pytest.raises(UsageError):
            load_model(tmp_path / "nope.ply")

    def test_malformed_header_reports_line(self, tmp_path):
        path = tmp_path / "bad.ply"
        path.write_text("ply\nformat ascii 1.0\nelement vertex\nend_header\n")
        with pytest.raises(PlyParseError) as err:
            load_model(path)
        assert err.value.line_number == 3

    def test_unknown_property_type_is_format_error(self, tmp_path):
        path = tmp_path / "bad.ply"
        path.write_text(
            "ply\nformat ascii 1.0\nelement vertex 1\nproperty quaternion x\nend_header\n0\n"
        )
        with pytest.raises(FormatError):
            load_model(path)

    @pytest.mark.parametrize("binary", [True, False])
    def test_round_trip_positions_bit_exact(self, tmp_path, binary):
        rng = np.random.default_rng(11)
        # float32-representable coordinates survive the f32 payload exactly
        pos = rng.normal(size=(200, 3)).astype(np.float32).astype(np.float64)
        colors = rng.integers(0, 256, size=(200, 3)) / 255.0
        pts = PointSet(pos, colors=colors)
        path = tmp_path / "cloud.ply"
        save_model(pts, path, binary=binary)
        back = load_model(path, kind="points")
        np.testing.assert_array_equal(back.positions, pos)
        np.testing.assert_array_equal(back.colors, colors)

    @pytest.mark.parametrize("binary", [True, False])
    def test_round_trip_mesh_faces(self, tmp_path, binary):
        rng = np.random.default_rng(12)
        verts = rng.normal(size=(30, 3)).astype(np.float32).astype(np.float64)
        faces = rng.integers(0, 30, size=(40, 3))
        ok = (faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) & (faces[:, 0] != faces[:, 2])
        mesh = TriMesh(verts, faces[ok])
        path = tmp_path / "mesh.ply"
        save_model(mesh, path, binary=binary)
        back = load_model(path)
        np.testing.assert_array_equal(back.vertices, mesh.vertices)
        np.testing.assert_array_equal(back.faces, mesh.faces)

    def test_labels_replace_colors(self, tmp_path):
        pts = PointSet(np.zeros((2, 3)), colors=np.ones((2, 3)) * 0.5)
        palette = np.array([[255, 0, 0], [0, 0, 255]], dtype=np.uint8)
        path = tmp_path / "seg.ply"
        save_model(pts, path, labels=[0, 1], palette=palette)
        back = load_model(path, kind="points")
        np.testing.assert_array_equal(back.colors, [[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])

    def test_other_label_renders_gray(self, tmp_path):
        pts = PointSet(np.zeros((2, 3)))
        palette = np.array([[255, 0, 0]], dtype=np.uint8)
        path = tmp_path / "seg.ply"
        save_model(pts, path, labels=[1, 1], palette=palette)  # 1 == K -> other
        back = load_model(path, kind="points")
        np.testing.assert_array_equal(back.colors, np.full((2, 3), 128 / 255.0))

    def test_label_out_of_range(self, tmp_path):
        pts = PointSet(np.zeros((1, 3)))
        palette = np.array([[255, 0, 0]], dtype=np.uint8)
        with pytest.raises(ValueError):
            save_model(pts, tmp_path / "x.ply", labels=[2], palette=palette)

    def test_degenerate_faces_dropped_at_load(self, tmp_path, caplog):
        text = ASCII_MESH.replace("element face 1", "element face 2")
        text += "3 0 1 1\n"
        path = tmp_path / "dirty.ply"
        path.write_text(text)
        mesh = load_model(path)
        assert mesh.faces.shape == (1, 3)

    def test_gaussian_dc_color_decode(self, tmp_path):
        # RGB = clamp(0.5 + SH_C0 * f_dc); f_dc = 0 must decode to mid gray
        header = (
            "ply\nformat ascii 1.0\nelement vertex 2\n"
            "property float x\nproperty float y\nproperty float z\n"
            "property float f_dc_0\nproperty float f_dc_1\nproperty float f_dc_2\n"
            "property float opacity\nend_header\n"
        )
        body = "0 0 0 0 0 0 0.5\n1 1 1 10 -10 0 0.5\n"
        path = tmp_path / "gs.ply"
        path.write_text(header + body)
        pts = load_model(path, kind="gaussians")
        np.testing.assert_allclose(pts.colors[0], [0.5, 0.5, 0.5])
        np.testing.assert_allclose(pts.colors[1], [1.0, 0.0, 0.5])

    def test_gaussians_without_dc_terms_fail(self, tmp_path):
        path = tmp_path / "plain.ply"
        path.write_text(ASCII_MESH)
        with pytest.raises(FormatError):
            load_model(path, kind="gaussians")


class TestMeshToPoints:
    def test_vertices_carried(self):
        rng = np.random.default_rng(13)
        verts = rng.normal(size=(10, 3))
        colors = rng.random((10, 3))
        mesh = TriMesh(verts, np.array([[0, 1, 2]]), vertex_colors=colors)
        pts = mesh_vertices_as_points(mesh)
        np.testing.assert_array_equal(pts.positions, verts)
        np.testing.assert_array_equal(pts.colors, colors)


class TestBinaryGaussianPly:
    def test_binary_gaussian_checkpoint_layout(self, tmp_path):
        # 3DGS-style binary file: many extra float properties per vertex
        n = 4
        props = ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity",
                 "scale_0", "rot_0"]
        header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
        header += [f"property float {p}" for p in props]
        header.append("end_header")
        rng = np.random.default_rng(14)
        rows = rng.normal(size=(n, len(props))).astype("<f4")
        path = tmp_path / "gs.ply"
        with open(path, "wb") as fh:
            fh.write(("\n".join(header) + "\n").encode())
            fh.write(rows.tobytes())
        pts = load_model(path, kind="gaussians")
        np.testing.assert_array_equal(pts.positions, rows[:, :3].astype(np.float64))
        from mf3d.geom import SH_C0
        expected = np.clip(0.5 + SH_C0 * rows[:, 3:6].astype(np.float64), 0.0, 1.0)
        np.testing.assert_allclose(pts.colors, expected)

    def test_kind_mesh_requires_faces(self, tmp_path):
        path = tmp_path / "cloud.ply"
        save_model(PointSet(np.array([[0.0, 0, 0], [1, 0, 0]])), path)
        with pytest.raises(FormatError, match="face"):
            load_model(path, kind="mesh")
