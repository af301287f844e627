import json
import struct

import numpy as np
import pytest

from mf3d_adapter.bundle_format import (AdapterError, atomic_write, rle_encode,
                                        sha256_hex, write_bundle_dir, write_prompt_files)


def rle_decode(data, h, w):
    flat = np.zeros(h * w, dtype=bool)
    pos = 0
    for off in range(0, len(data), 8):
        skip, run = struct.unpack_from("<II", data, off)
        pos += skip
        flat[pos:pos + run] = True
        pos += run
    return flat.reshape(h, w)


def tiny_rig(n_views=1, size=16):
    return {
        "views": [
            {
                "index": i + 1,
                "intrinsics": {"fx": float(size), "fy": float(size),
                               "cx": size / 2, "cy": size / 2,
                               "width": size, "height": size},
                "rotation": [1, 0, 0, 0, 1, 0, 0, 0, 1],
                "translation": [0, 0, 2],
            }
            for i in range(n_views)
        ]
    }


class TestRle:
    @pytest.mark.parametrize("seed", range(6))
    def test_round_trip(self, seed):
        rng = np.random.default_rng(seed)
        bits = rng.random((11, 13)) < rng.uniform(0.1, 0.9)
        assert (rle_decode(rle_encode(bits), 11, 13) == bits).all()

    def test_known_encoding(self):
        bits = np.array([[0, 1, 1, 0], [1, 0, 0, 0]], dtype=bool)
        # skip 1, run 2; skip 1, run 1
        assert rle_encode(bits) == struct.pack("<IIII", 1, 2, 1, 1)

    def test_trailing_zeros_implied(self):
        bits = np.zeros((3, 3), dtype=bool)
        bits[0, 0] = True
        assert rle_encode(bits) == struct.pack("<II", 0, 1)


class TestBundleWriter:
    def test_manifest_checksums_match_files(self, tmp_path):
        rig = tiny_rig()
        bits = np.zeros((16, 16), dtype=bool)
        bits[2:6, 2:6] = True
        manifest = write_bundle_dir(
            tmp_path, rig, {1: [bits]}, {1: [np.ones(4)]}, dim=4, source="synthetic"
        )
        for view in manifest["views"]:
            for mask in view["masks"]:
                payload = (tmp_path / mask["file"]).read_bytes()
                assert sha256_hex(payload) == mask["sha256"]
        emb = (tmp_path / "embeddings.f32").read_bytes()
        assert sha256_hex(emb) == manifest["embeddings"]["sha256"]
        assert len(emb) == 1 * 4 * 4

    def test_empty_mask_rejected(self, tmp_path):
        rig = tiny_rig()
        with pytest.raises(AdapterError, match="empty"):
            write_bundle_dir(tmp_path, rig, {1: [np.zeros((16, 16), bool)]},
                             {1: [np.ones(4)]}, dim=4)

    def test_size_mismatch_rejected(self, tmp_path):
        rig = tiny_rig()
        with pytest.raises(AdapterError, match="shape"):
            write_bundle_dir(tmp_path, rig, {1: [np.ones((8, 8), bool)]},
                             {1: [np.ones(4)]}, dim=4)

    def test_count_mismatch_rejected(self, tmp_path):
        rig = tiny_rig()
        with pytest.raises(AdapterError, match="masks but"):
            write_bundle_dir(tmp_path, rig, {1: [np.ones((16, 16), bool)]}, {1: []}, dim=4)

    def test_view_with_zero_masks_listed(self, tmp_path):
        rig = tiny_rig(2)
        bits = np.ones((16, 16), dtype=bool)
        manifest = write_bundle_dir(tmp_path, rig, {1: [bits], 2: []},
                                    {1: [np.ones(4)], 2: []}, dim=4)
        by_view = {v["view_index"]: v["masks"] for v in manifest["views"]}
        assert len(by_view[1]) == 1
        assert by_view[2] == []


class TestPromptFiles:
    def test_files_and_sizes(self, tmp_path):
        write_prompt_files(tmp_path, ["a", "b", "c"], np.eye(3, 16))
        assert (tmp_path / "text_embeddings.f32").stat().st_size == 3 * 16 * 4
        doc = json.loads((tmp_path / "prompts.json").read_text())
        assert doc == {"prompts": ["a", "b", "c"], "C": 16}

    def test_rows_are_normalized(self, tmp_path):
        write_prompt_files(tmp_path, ["a"], np.array([[3.0, 4.0]]))
        w = np.frombuffer((tmp_path / "text_embeddings.f32").read_bytes(), dtype="<f4")
        np.testing.assert_allclose(w, [0.6, 0.8], atol=1e-7)

    def test_duplicates_rejected(self, tmp_path):
        with pytest.raises(AdapterError, match="unique"):
            write_prompt_files(tmp_path, ["a", "a"], np.eye(2))


class TestAtomicWrite:
    def test_no_temp_files_left(self, tmp_path):
        atomic_write(tmp_path / "x.bin", b"payload")
        assert (tmp_path / "x.bin").read_bytes() == b"payload"
        assert [p.name for p in tmp_path.iterdir()] == ["x.bin"]
