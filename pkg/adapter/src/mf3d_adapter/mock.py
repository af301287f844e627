"""Deterministic, network-free stand-ins for the mask generator and the
embedding models.

Two mask modes:
  * with ground-truth labels: reproduces the engine's oracle construction
    (one mask per visible labeled region, one-hot embedding per class), so
    a mock end-to-end run is label-identical to an engine-generated oracle
    run on the same fixture;
  * without: a fixed tile grid over the rendered surface with hash-seeded
    embeddings.

Every output is a pure function of the inputs; no weights, no RNG state.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .bundle_format import AdapterError

MOCK_DIM = 16


def one_hot(k: int, dim: int = MOCK_DIM) -> np.ndarray:
    if k >= dim:
        raise AdapterError(f"class {k} does not fit in a {dim}-dim one-hot embedding")
    vec = np.zeros(dim, dtype=np.float64)
    vec[k] = 1.0
    return vec


def hashed_embedding(name: str, dim: int) -> np.ndarray:
    """Unit vector derived from the name alone; stable across runs."""
    seed = int.from_bytes(hashlib.sha256(name.encode()).digest()[:8], "little")
    vec = np.random.default_rng(seed).normal(size=dim)
    return vec / np.linalg.norm(vec)


def load_gt_labels(path):
    doc = json.loads(Path(path).read_text())
    labels = np.asarray(doc["labels"], dtype=np.int64)
    prompts = [str(p) for p in doc["prompts"]]
    return labels, prompts


def oracle_masks_for_view(point_index: np.ndarray, labels: np.ndarray, num_classes: int,
                          dim: int = MOCK_DIM):
    """Per visible class: mask of pixels whose winning point carries that
    label, paired with the class's one-hot embedding."""
    covered = point_index >= 0
    label_map = np.full(point_index.shape, -1, dtype=np.int64)
    label_map[covered] = labels[point_index[covered]]
    masks, embeddings = [], []
    for cls in range(num_classes):
        bits = label_map == cls
        if bits.any():
            masks.append(bits)
            embeddings.append(one_hot(cls, dim))
    return masks, embeddings


def tile_masks_for_view(point_index: np.ndarray, view_index: int,
                        points_per_side: int = 64, dim: int = MOCK_DIM):
    """Fixed grid of tiles clipped to the rendered surface.

    The grid resolution follows the sampling density knob: 64 points per
    side maps to a 4x4 tile grid.
    """
    tiles = max(1, points_per_side // 16)
    covered = point_index >= 0
    if not covered.any():
        return [], []
    h, w = point_index.shape
    ys = np.linspace(0, h, tiles + 1).astype(int)
    xs = np.linspace(0, w, tiles + 1).astype(int)
    masks, embeddings = [], []
    for ty in range(tiles):
        for tx in range(tiles):
            bits = np.zeros((h, w), dtype=bool)
            bits[ys[ty]:ys[ty + 1], xs[tx]:xs[tx + 1]] = True
            bits &= covered
            if not bits.any():
                continue
            masks.append(bits)
            embeddings.append(hashed_embedding(f"view{view_index}/tile{ty},{tx}", dim))
    return masks, embeddings


def encode_prompts_mock(prompts: list, dim: int = MOCK_DIM, style: str = "hash"):
    """K x dim matrix; 'hash' derives rows from the strings, 'onehot'
    assigns canonical basis vectors by position (the fixture convention)."""
    if style == "hash":
        return np.stack([hashed_embedding(f"prompt/{p}", dim) for p in prompts])
    if style == "onehot":
        return np.stack([one_hot(k, dim) for k in range(len(prompts))])
    raise AdapterError(f"unknown prompt embedding style '{style}'")
