"""Proposal bundles and 2D-to-3D mask lifting.

A bundle directory is the sole contract between the geometric engine and
whatever produces masks and embeddings:

    manifest.json     cameras, per-view mask lists, embedding dim C, source,
                      sha256 of every binary file, schema_version (= 1)
    masks/view{i}_mask{j}.rle
                      row-major run-length bitmap: little-endian u32 pairs
                      (skip, run), trailing zeros implied
    embeddings.f32    N x C little-endian float32, manifest order

Lifting maps a 2D mask to the set of points whose winning pixel lies inside
it, using the renderer's point-index map directly, so occlusion is exact.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .camera import CameraPose, rig_from_json, rig_to_json
from .errors import BundleError
from .render import SENTINEL, RenderOutput

SCHEMA_VERSION = 1
DEFAULT_MIN_PIXELS = 16

_KNOWN_MANIFEST_KEYS = {"schema_version", "source", "C", "cameras", "views", "embeddings"}
_KNOWN_VIEW_KEYS = {"view_index", "masks"}
_KNOWN_MASK_KEYS = {"mask_id", "file", "sha256"}


@dataclass(frozen=True)
class Mask2D:
    view_index: int
    bits: np.ndarray  # (H, W) bool
    mask_id: int

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=bool)
        if bits.ndim != 2:
            raise ValueError("mask bits must be 2-D")
        if not bits.any():
            raise ValueError("mask must have at least one set bit")
        object.__setattr__(self, "bits", bits)


@dataclass(frozen=True)
class MaskEmbedding:
    vector: np.ndarray  # (C,)
    view_index: int
    mask_id: int

    def __post_init__(self):
        vec = np.asarray(self.vector, dtype=np.float64).reshape(-1)
        if not np.isfinite(vec).all():
            raise ValueError("embedding must be finite")
        if np.linalg.norm(vec) == 0.0:
            raise ValueError("embedding must be non-zero")
        object.__setattr__(self, "vector", vec)


@dataclass
class ProposalBundle:
    cameras: list[CameraPose]
    masks: list[Mask2D]
    embeddings: list[MaskEmbedding]
    C: int
    source: str = "model"
    warnings: list[str] = field(default_factory=list)

    def __post_init__(self):
        if len(self.masks) < 1:
            raise BundleError("empty bundle: no masks")
        if len(self.masks) != len(self.embeddings):
            raise BundleError(
                f"mask/embedding count mismatch: {len(self.masks)} masks, "
                f"{len(self.embeddings)} embeddings"
            )
        for m, e in zip(self.masks, self.embeddings):
            if (m.view_index, m.mask_id) != (e.view_index, e.mask_id):
                raise BundleError("masks and embeddings are not in matching order")
            if e.vector.shape[0] != self.C:
                raise BundleError(
                    f"embedding dim {e.vector.shape[0]} != bundle C {self.C}"
                )
        if self.source not in ("model", "synthetic"):
            raise BundleError(f"unknown bundle source '{self.source}'")

    @property
    def Q(self) -> np.ndarray:
        """All embeddings stacked, (N, C), rows exactly as stored.

        read_bundle L2-normalizes once at load; classification normalizes
        its own inputs, so stacking must not renormalize (renormalizing an
        already-unit row would perturb the last bits and break cold/warm
        reproducibility).
        """
        return np.stack([e.vector for e in self.embeddings])

    def view_counts(self) -> dict[int, int]:
        counts = {p.view_index: 0 for p in self.cameras}
        for m in self.masks:
            counts[m.view_index] += 1
        return counts


@dataclass(frozen=True)
class Mask3D:
    membership: np.ndarray  # (P,) bool
    provenance: tuple[int, int]  # (view_index, mask_id)

    def __post_init__(self):
        object.__setattr__(self, "membership", np.asarray(self.membership, dtype=bool))


# ---------------------------------------------------------------------------
# Run-length codec


def encode_rle(bits: np.ndarray) -> bytes:
    """Row-major (skip, run) u32 pairs; trailing zeros are implied."""
    flat = np.asarray(bits, dtype=bool).ravel()
    padded = np.concatenate([[False], flat, [False]])
    changes = np.flatnonzero(padded[1:] != padded[:-1])
    starts, ends = changes[0::2], changes[1::2]
    pairs = np.empty((starts.size, 2), dtype="<u4")
    prev_end = np.concatenate([[0], ends[:-1]])
    pairs[:, 0] = starts - prev_end
    pairs[:, 1] = ends - starts
    return pairs.tobytes()


def decode_rle(data: bytes, height: int, width: int) -> np.ndarray:
    if len(data) % 8 != 0:
        raise BundleError(f"RLE payload length {len(data)} is not a multiple of 8")
    pairs = np.frombuffer(data, dtype="<u4").reshape(-1, 2).astype(np.int64)
    flat = np.zeros(height * width, dtype=bool)
    pos = 0
    for skip, run in pairs:
        pos += skip
        if pos + run > flat.size:
            raise BundleError("RLE runs exceed the mask area")
        flat[pos : pos + run] = True
        pos += run
    return flat.reshape(height, width)


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


# ---------------------------------------------------------------------------
# Bundle IO


def write_bundle(bundle: ProposalBundle, path) -> None:
    path = Path(path)
    (path / "masks").mkdir(parents=True, exist_ok=True)

    by_view: dict[int, list[int]] = {p.view_index: [] for p in bundle.cameras}
    for n, m in enumerate(bundle.masks):
        if m.view_index not in by_view:
            raise BundleError(f"mask references unknown view {m.view_index}")
        by_view[m.view_index].append(n)

    views_doc = []
    order = []
    for pose in bundle.cameras:
        masks_doc = []
        for n in sorted(by_view[pose.view_index], key=lambda i: bundle.masks[i].mask_id):
            m = bundle.masks[n]
            if m.bits.shape != (pose.intrinsics.height, pose.intrinsics.width):
                raise BundleError(
                    f"mask {m.view_index}/{m.mask_id} shape {m.bits.shape} does not "
                    f"match view size"
                )
            rel = f"masks/view{m.view_index}_mask{m.mask_id}.rle"
            payload = encode_rle(m.bits)
            (path / rel).write_bytes(payload)
            masks_doc.append({"mask_id": m.mask_id, "file": rel, "sha256": _sha256(payload)})
            order.append(n)
        views_doc.append({"view_index": pose.view_index, "masks": masks_doc})

    q = np.stack([bundle.embeddings[n].vector for n in order]).astype("<f4")
    emb_bytes = q.tobytes()
    (path / "embeddings.f32").write_bytes(emb_bytes)

    manifest = {
        "schema_version": SCHEMA_VERSION,
        "source": bundle.source,
        "C": bundle.C,
        "cameras": rig_to_json(bundle.cameras),
        "views": views_doc,
        "embeddings": {
            "file": "embeddings.f32",
            "sha256": _sha256(emb_bytes),
            "count": len(bundle.masks),
            "dim": bundle.C,
        },
    }
    with open(path / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_bundle(path) -> ProposalBundle:
    """Loads and validates a bundle directory.

    Checksum, count, or dimension inconsistencies raise BundleError;
    recoverable oddities are collected into the returned bundle's
    `warnings` list. Embeddings are L2-normalized here, once.
    """
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise BundleError(f"missing manifest: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise BundleError(f"manifest is not valid JSON: {exc}")

    warnings = []
    version = manifest.get("schema_version")
    if version != SCHEMA_VERSION:
        raise BundleError(f"unsupported schema_version {version!r} (supported: {SCHEMA_VERSION})")
    for key in manifest:
        if key not in _KNOWN_MANIFEST_KEYS:
            warnings.append(f"unknown manifest key '{key}'")

    cameras = rig_from_json(manifest["cameras"])
    poses_by_index = {p.view_index: p for p in cameras}
    c_dim = int(manifest["C"])
    source = manifest.get("source", "model")

    masks: list[Mask2D] = []
    for view_doc in manifest.get("views", []):
        for key in view_doc:
            if key not in _KNOWN_VIEW_KEYS:
                warnings.append(f"unknown view key '{key}'")
        vi = int(view_doc["view_index"])
        if vi not in poses_by_index:
            raise BundleError(f"manifest lists masks for unknown view {vi}")
        pose = poses_by_index[vi]
        seen_ids = set()
        for mask_doc in view_doc.get("masks", []):
            for key in mask_doc:
                if key not in _KNOWN_MASK_KEYS:
                    warnings.append(f"unknown mask key '{key}'")
            mid = int(mask_doc["mask_id"])
            if mid in seen_ids:
                raise BundleError(f"duplicate mask_id {mid} in view {vi}")
            seen_ids.add(mid)
            payload = (path / mask_doc["file"]).read_bytes()
            digest = _sha256(payload)
            if digest != mask_doc["sha256"]:
                raise BundleError(
                    f"checksum mismatch for {mask_doc['file']}: "
                    f"manifest {mask_doc['sha256'][:12]}.., file {digest[:12]}.."
                )
            bits = decode_rle(payload, pose.intrinsics.height, pose.intrinsics.width)
            if not bits.any():
                raise BundleError(f"mask {vi}/{mid} has no set bits")
            masks.append(Mask2D(vi, bits, mid))

    if not masks:
        raise BundleError("empty bundle: no masks")

    emb_doc = manifest["embeddings"]
    emb_bytes = (path / emb_doc["file"]).read_bytes()
    digest = _sha256(emb_bytes)
    if digest != emb_doc["sha256"]:
        raise BundleError(
            f"checksum mismatch for {emb_doc['file']}: "
            f"manifest {emb_doc['sha256'][:12]}.., file {digest[:12]}.."
        )
    expected = len(masks) * c_dim * 4
    if len(emb_bytes) != expected:
        raise BundleError(
            f"embedding file size mismatch: expected {expected} bytes "
            f"({len(masks)} x {c_dim} x 4), found {len(emb_bytes)}"
        )
    q = np.frombuffer(emb_bytes, dtype="<f4").reshape(len(masks), c_dim).astype(np.float64)
    if not np.isfinite(q).all():
        raise BundleError("embeddings contain non-finite values")
    norms = np.linalg.norm(q, axis=1)
    if (norms == 0.0).any():
        raise BundleError("embeddings contain zero-norm rows")
    q = q / norms[:, None]

    embeddings = [
        MaskEmbedding(q[n], masks[n].view_index, masks[n].mask_id) for n in range(len(masks))
    ]
    return ProposalBundle(cameras, masks, embeddings, c_dim, source=source, warnings=warnings)


# ---------------------------------------------------------------------------
# Lifting and stacking


def lift_mask(
    mask: Mask2D, render: RenderOutput, point_count: int, min_pixels: int = DEFAULT_MIN_PIXELS
) -> Mask3D | None:
    """3D membership of a 2D mask via the render's point-index map.

    Returns None (a rejection, not an error) when fewer than `min_pixels`
    mask pixels land on rendered geometry.
    """
    if mask.view_index != render.view_index:
        raise ValueError(
            f"mask belongs to view {mask.view_index}, render is view {render.view_index}"
        )
    if mask.bits.shape != render.point_index.shape:
        raise ValueError(
            f"mask shape {mask.bits.shape} != render shape {render.point_index.shape}"
        )
    hits = render.point_index[mask.bits]
    hits = hits[hits != SENTINEL]
    if hits.size < min_pixels:
        return None
    if hits.size and int(hits.max()) >= point_count:
        raise ValueError("point_index exceeds the point count")
    membership = np.zeros(point_count, dtype=bool)
    membership[hits] = True
    return Mask3D(membership, (mask.view_index, mask.mask_id))


def lift_bundle(
    bundle: ProposalBundle,
    renders: dict[int, RenderOutput],
    point_count: int,
    min_pixels: int = DEFAULT_MIN_PIXELS,
    threads: int = 1,
):
    """Lifts every mask in the bundle; returns (masks3d, kept indices).

    kept[i] is the bundle-order index of masks3d[i]; rejected masks are
    dropped. Lifting is independent per mask, so threading cannot change
    the output.
    """
    for pose in bundle.cameras:
        if pose.view_index not in renders:
            raise ValueError(f"no render supplied for view {pose.view_index}")

    def lift_one(n):
        return lift_mask(bundle.masks[n], renders[bundle.masks[n].view_index],
                         point_count, min_pixels)

    indices = range(len(bundle.masks))
    if threads <= 1:
        lifted = [lift_one(n) for n in indices]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            lifted = list(pool.map(lift_one, indices))
    masks3d = [m for m in lifted if m is not None]
    kept = np.array([n for n, m in enumerate(lifted) if m is not None], dtype=np.int64)
    return masks3d, kept


def stack_masks(masks3d: list[Mask3D], point_count: int) -> sp.csc_matrix:
    """Stacks memberships into a binary P x N matrix, sparse by column."""
    indptr = [0]
    indices = []
    for m in masks3d:
        if m.membership.shape[0] != point_count:
            raise ValueError(
                f"membership length {m.membership.shape[0]} != point count {point_count}"
            )
        rows = np.flatnonzero(m.membership)
        indices.append(rows)
        indptr.append(indptr[-1] + rows.size)
    if indices:
        data = np.ones(indptr[-1], dtype=np.float64)
        indices = np.concatenate(indices)
    else:
        data = np.zeros(0, dtype=np.float64)
        indices = np.zeros(0, dtype=np.int64)
    return sp.csc_matrix(
        (data, indices, np.asarray(indptr, dtype=np.int64)),
        shape=(point_count, len(masks3d)),
    )
