"""On-disk cache for lifted mask matrices.

A cached matrix is keyed by sha256(manifest.json) XOR sha256(rig.json), so
a warm segmentation run can skip every mask file entirely and only the
classify/fuse stages touch the prompt set. The payload is column-sparse:

    header  <4s I Q I I>  magic 'MCSC', version, P, N, min_pixels
    key     32 bytes      cache key digest
    kept    N x u32       bundle-order mask index per column
    indptr  (N+1) x u64
    indices nnz x u32
    digest  32 bytes      sha256 of everything above

Writers hold an advisory lock file.
"""

from __future__ import annotations

import fcntl
import hashlib
import struct
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .fusion import MaskMatrix

_MAGIC = b"MCSC"
_VERSION = 1
_HEADER = struct.Struct("<4sIQII")


def cache_key(manifest_path, rig_path) -> bytes:
    a = hashlib.sha256(Path(manifest_path).read_bytes()).digest()
    b = hashlib.sha256(Path(rig_path).read_bytes()).digest()
    return bytes(x ^ y for x, y in zip(a, b))


@contextmanager
def cache_lock(cache_dir):
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    lock_path = cache_dir / "cache.lock"
    with open(lock_path, "w") as fh:
        fcntl.flock(fh, fcntl.LOCK_EX)
        try:
            yield
        finally:
            fcntl.flock(fh, fcntl.LOCK_UN)


def matrix_path(cache_dir, bundle_dir, renders_dir) -> Path:
    """Entry named by bundle/rig *location* so a changed bundle at the same
    path is detected (key mismatch) and rebuilt rather than silently missed."""
    ident = f"{Path(bundle_dir).resolve()}|{Path(renders_dir).resolve()}"
    return Path(cache_dir) / f"masks_{hashlib.sha256(ident.encode()).hexdigest()[:16]}.mcsc"


def save_mask_matrix(path, key: bytes, mm: MaskMatrix, min_pixels: int) -> None:
    m = mm.M.tocsc()
    p_count, n_count = m.shape
    parts = [
        _HEADER.pack(_MAGIC, _VERSION, p_count, n_count, min_pixels),
        key,
        np.asarray(mm.kept, dtype="<u4").tobytes(),
        np.asarray(m.indptr, dtype="<u8").tobytes(),
        np.asarray(m.indices, dtype="<u4").tobytes(),
    ]
    payload = b"".join(parts)
    Path(path).write_bytes(payload + hashlib.sha256(payload).digest())


def load_mask_matrix(path, key: bytes, min_pixels: int) -> MaskMatrix | None:
    """Returns the cached matrix, or None on any mismatch (stale cache)."""
    path = Path(path)
    if not path.exists():
        return None
    raw = path.read_bytes()
    if len(raw) < _HEADER.size + 64:
        return None
    payload, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(payload).digest() != digest:
        return None
    magic, version, p_count, n_count, cached_min_pixels = _HEADER.unpack_from(payload)
    if magic != _MAGIC or version != _VERSION:
        return None
    off = _HEADER.size
    if payload[off : off + 32] != key or cached_min_pixels != min_pixels:
        return None
    off += 32
    kept = np.frombuffer(payload, "<u4", n_count, off).astype(np.int64)
    off += 4 * n_count
    indptr = np.frombuffer(payload, "<u8", n_count + 1, off).astype(np.int64)
    off += 8 * (n_count + 1)
    nnz = int(indptr[-1])
    indices = np.frombuffer(payload, "<u4", nnz, off).astype(np.int32)
    m = sp.csc_matrix(
        (np.ones(nnz, dtype=np.float64), indices, indptr), shape=(p_count, n_count)
    )
    return MaskMatrix(m, kept)
