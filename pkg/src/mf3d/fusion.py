"""Mask fusion: cosine classification of mask embeddings against text
embeddings, aggregation into per-point class scores, and thresholded labels.

Scores are the product of the binary point-mask matrix with the cosine
logits; with coverage normalization each point's row is divided by the
number of masks covering it, which keeps the threshold independent of how
many views saw the point. Summation runs in ascending mask order so results
are bit-reproducible regardless of thread count.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import FormatError
from .proposal import DEFAULT_MIN_PIXELS, ProposalBundle, lift_bundle, stack_masks

DEFAULT_TAU = 0.2

NORMALIZATIONS = ("none", "coverage")


@dataclass(frozen=True)
class TextEmbeddingSet:
    """K text-prompt embeddings, one row per class."""

    W: np.ndarray          # (K, C)
    prompts: tuple[str, ...]

    def __post_init__(self):
        w = np.asarray(self.W, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] < 1:
            raise ValueError("W must be a (K, C) matrix with K >= 1")
        if not np.isfinite(w).all():
            raise ValueError("text embeddings must be finite")
        if (np.linalg.norm(w, axis=1) == 0.0).any():
            raise ValueError("text embeddings must be non-zero")
        prompts = tuple(self.prompts)
        if len(prompts) != w.shape[0]:
            raise ValueError("prompt count must equal embedding rows")
        if len(set(prompts)) != len(prompts):
            raise ValueError("prompts must be unique")
        object.__setattr__(self, "W", w)
        object.__setattr__(self, "prompts", prompts)

    @property
    def K(self):
        return self.W.shape[0]

    @property
    def C(self):
        return self.W.shape[1]


def save_text_embeddings(tes: TextEmbeddingSet, directory) -> None:
    """prompts.json plus text_embeddings.f32 (K x C little-endian float32)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    w = tes.W / np.linalg.norm(tes.W, axis=1, keepdims=True)
    (directory / "text_embeddings.f32").write_bytes(w.astype("<f4").tobytes())
    with open(directory / "prompts.json", "w") as fh:
        json.dump({"prompts": list(tes.prompts), "C": tes.C}, fh, indent=2)
        fh.write("\n")


def load_text_embeddings(directory) -> TextEmbeddingSet:
    directory = Path(directory)
    try:
        doc = json.loads((directory / "prompts.json").read_text())
        prompts = [str(p) for p in doc["prompts"]]
        c_dim = int(doc["C"])
    except (OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
        raise FormatError(f"bad prompts.json in {directory}: {exc}")
    raw = (directory / "text_embeddings.f32").read_bytes()
    expected = len(prompts) * c_dim * 4
    if len(raw) != expected:
        raise FormatError(
            f"text_embeddings.f32 size mismatch: expected {expected} bytes, found {len(raw)}"
        )
    w = np.frombuffer(raw, dtype="<f4").reshape(len(prompts), c_dim).astype(np.float64)
    return TextEmbeddingSet(w, tuple(prompts))


@dataclass(frozen=True)
class LogitMatrix:
    """Cosine similarities between N mask embeddings and K text embeddings."""

    values: np.ndarray  # (N, K) in [-1, 1]

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError("logits must be 2-D")
        if v.size and (v.min() < -1.0 or v.max() > 1.0):
            raise ValueError("cosine logits must lie in [-1, 1]")
        object.__setattr__(self, "values", v)


@dataclass
class LabelField:
    """Per-point class scores and final labels; label K means 'other'."""

    Y: np.ndarray        # (P, K)
    labels: np.ndarray   # (P,) ints in [0, K]
    tau: float
    uncovered: np.ndarray  # (P,) bool

    @property
    def K(self):
        return self.Y.shape[1]


def classify(Q: np.ndarray, text: TextEmbeddingSet) -> LogitMatrix:
    """Pairwise cosine similarity between mask and text embeddings."""
    q = np.asarray(Q, dtype=np.float64)
    if q.ndim != 2:
        raise ValueError("Q must be (N, C)")
    if q.shape[1] != text.C:
        raise ValueError(f"embedding dim mismatch: Q has C={q.shape[1]}, text has C={text.C}")
    qn = np.linalg.norm(q, axis=1, keepdims=True)
    if (qn == 0.0).any():
        raise ValueError("mask embeddings must be non-zero")
    wn = np.linalg.norm(text.W, axis=1, keepdims=True)
    logits = (q / qn) @ (text.W / wn).T
    np.clip(logits, -1.0, 1.0, out=logits)
    return LogitMatrix(logits)


def coverage_counts(m: sp.csc_matrix) -> np.ndarray:
    """Number of masks covering each point."""
    return np.asarray(m.sum(axis=1)).reshape(-1)


def fuse(m: sp.csc_matrix, logits: LogitMatrix, normalization: str = "coverage"):
    """Aggregates mask logits into per-point class scores.

    Returns (Y, uncovered). normalization='none' gives the plain product of
    the mask matrix and the logits; 'coverage' divides each covered point's
    row by its covering-mask count. Accumulation is in ascending mask order.
    """
    if normalization not in NORMALIZATIONS:
        raise ValueError(f"unknown normalization '{normalization}'")
    values = logits.values
    p_count, n_count = m.shape
    if values.shape[0] != n_count:
        raise ValueError(f"shape mismatch: M is {m.shape}, logits are {values.shape}")
    y = np.zeros((p_count, values.shape[1]), dtype=np.float64)
    indptr, indices = m.indptr, m.indices
    for n in range(n_count):
        rows = indices[indptr[n] : indptr[n + 1]]
        y[rows] += values[n]
    cover = coverage_counts(m)
    uncovered = cover == 0
    if normalization == "coverage":
        covered = ~uncovered
        y[covered] /= cover[covered, None]
    return y, uncovered


def assign_labels(y: np.ndarray, tau: float, uncovered: np.ndarray) -> LabelField:
    """Argmax labels with an 'other' class (index K) for sub-threshold and
    uncovered points; argmax ties break toward the lowest class index."""
    if not np.isfinite(tau):
        raise ValueError("tau must be finite")
    y = np.asarray(y, dtype=np.float64)
    k = y.shape[1]
    labels = np.argmax(y, axis=1).astype(np.int64)
    labels[np.max(y, axis=1) < tau] = k
    labels[np.asarray(uncovered, dtype=bool)] = k
    return LabelField(y, labels, tau, np.asarray(uncovered, dtype=bool))


@dataclass
class SegmentConfig:
    tau: float = DEFAULT_TAU
    normalization: str = "coverage"
    min_pixels: int = DEFAULT_MIN_PIXELS
    threads: int = 1


@dataclass
class MaskMatrix:
    """A lifted, stacked bundle: reusable across prompt sets."""

    M: sp.csc_matrix
    kept: np.ndarray  # bundle-order indices of the columns of M


def build_mask_matrix(
    bundle: ProposalBundle, renders, point_count: int, config: SegmentConfig = SegmentConfig()
) -> MaskMatrix:
    renders_by_view = {r.view_index: r for r in renders}
    masks3d, kept = lift_bundle(
        bundle, renders_by_view, point_count, min_pixels=config.min_pixels,
        threads=config.threads,
    )
    return MaskMatrix(stack_masks(masks3d, point_count), kept)


def segment_scores(bundle: ProposalBundle, mask_matrix: MaskMatrix, text: TextEmbeddingSet,
                   config: SegmentConfig = SegmentConfig()):
    """classify + fuse on a prepared mask matrix; returns (Y, uncovered, timings)."""
    t0 = time.perf_counter()
    logits = classify(bundle.Q[mask_matrix.kept], text)
    t1 = time.perf_counter()
    y, uncovered = fuse(mask_matrix.M, logits, normalization=config.normalization)
    t2 = time.perf_counter()
    return y, uncovered, {"classify": t1 - t0, "fuse": t2 - t1}


def segment(
    bundle: ProposalBundle,
    renders,
    text: TextEmbeddingSet,
    config: SegmentConfig = SegmentConfig(),
    mask_matrix: MaskMatrix | None = None,
) -> LabelField:
    """Full fusion pipeline: lift, stack, classify, fuse, threshold.

    Pass a prebuilt `mask_matrix` to reuse lifting across prompt sets; the
    result is identical to a cold run with the same inputs.
    """
    point_count = _point_count_from_renders(renders)
    if mask_matrix is None:
        mask_matrix = build_mask_matrix(bundle, renders, point_count, config)
    y, uncovered, _ = segment_scores(bundle, mask_matrix, text, config)
    return assign_labels(y, config.tau, uncovered)


def _point_count_from_renders(renders) -> int:
    top = -1
    for r in renders:
        if r.point_index.size:
            top = max(top, int(r.point_index.max()))
    if top < 0:
        raise ValueError("no rendered geometry: cannot infer point count")
    return top + 1


def inpaint_knn(positions: np.ndarray, field_: LabelField, k: int = 3) -> LabelField:
    """Optional post-pass: 'other'-labeled points take the majority label of
    their k nearest labeled neighbors (ties toward the lowest class id)."""
    from scipy.spatial import cKDTree

    labels = field_.labels.copy()
    k_classes = field_.K
    known = np.flatnonzero(labels < k_classes)
    holes = np.flatnonzero(labels == k_classes)
    if known.size == 0 or holes.size == 0:
        return LabelField(field_.Y, labels, field_.tau, field_.uncovered)
    tree = cKDTree(positions[known])
    kk = min(k, known.size)
    _, nbr = tree.query(positions[holes], k=kk)
    nbr = np.atleast_2d(nbr.reshape(holes.size, kk))
    votes = labels[known][nbr]
    for i, h in enumerate(holes):
        counts = np.bincount(votes[i], minlength=k_classes)
        labels[h] = int(np.argmax(counts))
    return LabelField(field_.Y, labels, field_.tau, field_.uncovered)


def save_labels(field_: LabelField, prompts, path) -> None:
    doc = {
        "tau": field_.tau,
        "prompts": list(prompts),
        "labels": [int(v) for v in field_.labels],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def load_labels(path):
    """Returns (labels array, prompts, tau)."""
    try:
        doc = json.loads(Path(path).read_text())
        labels = np.asarray(doc["labels"], dtype=np.int64)
        prompts = [str(p) for p in doc["prompts"]]
    except (OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
        raise FormatError(f"bad labels file {path}: {exc}")
    return labels, prompts, float(doc.get("tau", DEFAULT_TAU))
