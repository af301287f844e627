"""Writer for the proposal-bundle interchange directory.

This is an independent implementation of the format the segmentation
engine consumes (schema_version 1):

    manifest.json   schema_version, source, C, cameras (the rig document),
                    views -> per-view mask lists, sha256 of every binary
    masks/view{i}_mask{j}.rle
                    row-major bitmap as little-endian u32 (skip, run)
                    pairs; trailing zeros implied
    embeddings.f32  N x C little-endian float32 in manifest order

Also includes readers for the engine's render outputs (rig.json and the
PIDX point-index grids) that mask generation consumes.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

SCHEMA_VERSION = 1
PIDX_MAGIC = b"PIDX"


class AdapterError(Exception):
    pass


def rle_encode(bits: np.ndarray) -> bytes:
    """(skip, run) u32 pairs over the row-major bit stream."""
    flat = np.asarray(bits, dtype=bool).ravel()
    out = []
    pos = 0
    n = flat.size
    while pos < n:
        start = pos
        while pos < n and not flat[pos]:
            pos += 1
        if pos == n:
            break
        skip = pos - start
        run_start = pos
        while pos < n and flat[pos]:
            pos += 1
        out.append(struct.pack("<II", skip, pos - run_start))
    return b"".join(out)


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def atomic_write(path: Path, data: bytes) -> None:
    """Write via a temp file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_rig(images_dir) -> dict:
    rig_path = Path(images_dir) / "rig.json"
    if not rig_path.exists():
        raise AdapterError(f"no rig.json in {images_dir}")
    rig = json.loads(rig_path.read_text())
    if "views" not in rig or not rig["views"]:
        raise AdapterError("rig.json lists no views")
    return rig


def view_size(rig: dict, view_index: int) -> tuple[int, int]:
    for view in rig["views"]:
        if view["index"] == view_index:
            intr = view["intrinsics"]
            return int(intr["height"]), int(intr["width"])
    raise AdapterError(f"view {view_index} not in rig")


def load_point_index(images_dir, view_index: int) -> np.ndarray:
    path = Path(images_dir) / f"view{view_index}.pidx"
    if not path.exists():
        raise AdapterError(f"missing point-index map {path}")
    raw = path.read_bytes()
    if len(raw) < 16:
        raise AdapterError(f"{path}: truncated header")
    magic, h, w, _ = struct.unpack_from("<4sIII", raw)
    if magic != PIDX_MAGIC:
        raise AdapterError(f"{path}: bad magic {magic!r}")
    grid = np.frombuffer(raw, dtype="<i4", offset=16)
    if grid.size != h * w:
        raise AdapterError(f"{path}: expected {h * w} entries, found {grid.size}")
    return grid.reshape(h, w)


def write_bundle_dir(out_dir, rig: dict, per_view_masks: dict, per_view_embeddings: dict,
                     dim: int, source: str = "model") -> dict:
    """Writes the bundle directory and returns the manifest.

    per_view_masks[i] is a list of boolean (H, W) arrays for view i;
    per_view_embeddings[i] the matching list of length-C float vectors.
    """
    out_dir = Path(out_dir)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)

    views_doc = []
    flat_embeddings = []
    for view in rig["views"]:
        i = int(view["index"])
        masks = per_view_masks.get(i, [])
        embeddings = per_view_embeddings.get(i, [])
        if len(masks) != len(embeddings):
            raise AdapterError(
                f"view {i}: {len(masks)} masks but {len(embeddings)} embeddings"
            )
        masks_doc = []
        for j, (bits, vec) in enumerate(zip(masks, embeddings)):
            expected = view_size(rig, i)
            if bits.shape != expected:
                raise AdapterError(
                    f"view {i} mask {j}: shape {bits.shape} does not match rig {expected}"
                )
            if not bits.any():
                raise AdapterError(f"view {i} mask {j} is empty")
            vec = np.asarray(vec, dtype=np.float64).reshape(-1)
            if vec.shape[0] != dim:
                raise AdapterError(f"view {i} mask {j}: embedding dim {vec.shape[0]} != {dim}")
            payload = rle_encode(bits)
            rel = f"masks/view{i}_mask{j}.rle"
            atomic_write(out_dir / rel, payload)
            masks_doc.append({"mask_id": j, "file": rel, "sha256": sha256_hex(payload)})
            flat_embeddings.append(vec)
        views_doc.append({"view_index": i, "masks": masks_doc})

    if not flat_embeddings:
        raise AdapterError("no masks were generated; refusing to write an empty bundle")
    q = np.stack(flat_embeddings).astype("<f4")
    emb_bytes = q.tobytes()
    atomic_write(out_dir / "embeddings.f32", emb_bytes)

    manifest = {
        "schema_version": SCHEMA_VERSION,
        "source": source,
        "C": dim,
        "cameras": rig,
        "views": views_doc,
        "embeddings": {
            "file": "embeddings.f32",
            "sha256": sha256_hex(emb_bytes),
            "count": len(flat_embeddings),
            "dim": dim,
        },
    }
    atomic_write(
        out_dir / "manifest.json",
        (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode(),
    )
    return manifest


def write_prompt_files(out_dir, prompts: list, matrix: np.ndarray) -> None:
    """prompts.json + text_embeddings.f32 (K x C little-endian float32)."""
    if len(set(prompts)) != len(prompts):
        raise AdapterError("prompts must be unique")
    if not prompts:
        raise AdapterError("prompt list is empty")
    matrix = np.asarray(matrix, dtype=np.float64)
    norms = np.linalg.norm(matrix, axis=1, keepdims=True)
    if (norms == 0).any():
        raise AdapterError("zero-norm prompt embedding")
    matrix = matrix / norms
    out_dir = Path(out_dir)
    atomic_write(out_dir / "text_embeddings.f32", matrix.astype("<f4").tobytes())
    doc = {"prompts": list(prompts), "C": int(matrix.shape[1])}
    atomic_write(out_dir / "prompts.json", (json.dumps(doc, indent=2) + "\n").encode())
