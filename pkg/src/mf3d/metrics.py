"""Segmentation metrics (OA, mAcc, mIoU) and the views-ablation harness.

Ground-truth index K is reserved for 'other'/unlabeled points: those rows
are excluded from the class means, and from overall accuracy unless
`count_other_in_oa` is set. Predicting 'other' on a labeled point counts
as an error. All three metrics are reported in percent to two decimals.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import FormatError

CSV_COLUMNS = ("views", "OA", "mAcc", "mIoU")


@dataclass(frozen=True)
class ConfusionMatrix:
    """(K+1) x (K+1) counts; row = ground truth, column = prediction."""

    counts: np.ndarray
    K: int

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        expected = (self.K + 1, self.K + 1)
        if counts.shape != expected:
            raise ValueError(f"counts must be {expected}, got {counts.shape}")
        if (counts < 0).any():
            raise ValueError("counts must be non-negative")
        object.__setattr__(self, "counts", counts)

    @property
    def total(self):
        return int(self.counts.sum())


def confusion(pred: np.ndarray, gt: np.ndarray, k: int) -> ConfusionMatrix:
    """Per-point tally of (ground truth, prediction) pairs."""
    pred = np.asarray(pred, dtype=np.int64)
    gt = np.asarray(gt, dtype=np.int64)
    if pred.shape != gt.shape:
        raise ValueError(f"length mismatch: {pred.shape} predictions vs {gt.shape} gt")
    for name, arr in (("prediction", pred), ("ground truth", gt)):
        if arr.size and (arr.min() < 0 or arr.max() > k):
            raise ValueError(f"{name} id out of range [0, {k}]")
    flat = gt * (k + 1) + pred
    counts = np.bincount(flat, minlength=(k + 1) ** 2).reshape(k + 1, k + 1)
    return ConfusionMatrix(counts, k)


def compute_metrics(cm: ConfusionMatrix, count_other_in_oa: bool = False) -> dict:
    """OA, mAcc, mIoU in percent, rounded to 2 decimals."""
    k = cm.K
    counts = cm.counts
    labeled = counts[:k, :]          # gt-'other' rows excluded from class metrics
    total = labeled.sum()
    if total == 0:
        raise ValueError("empty confusion matrix: no labeled points")

    diag = np.diag(counts)[:k]
    if count_other_in_oa:
        oa = (diag.sum() + counts[k, k]) / cm.total * 100.0
    else:
        oa = diag.sum() / total * 100.0

    row = labeled.sum(axis=1)
    col = labeled.sum(axis=0)[:k]
    present = row > 0
    if not present.any():
        raise ValueError("no ground-truth class present")
    macc = float(np.mean(diag[present] / row[present])) * 100.0

    union = row + col - diag
    used = (row > 0) | (col > 0)
    miou = float(np.mean(diag[used] / union[used])) * 100.0

    return {"OA": round(float(oa), 2), "mAcc": round(macc, 2), "mIoU": round(miou, 2)}


def views_ablation(view_counts, run_view_count: Callable[[int], tuple], k: int):
    """Runs the pipeline once per view count with otherwise identical
    settings; run_view_count(v) must return (pred labels, gt labels).
    Returns one metrics row per view count."""
    rows = []
    for v in view_counts:
        if not 1 <= v <= 64:
            raise ValueError(f"view count {v} outside [1, 64]")
        pred, gt = run_view_count(v)
        m = compute_metrics(confusion(pred, gt, k))
        rows.append({"views": v, **m})
    return rows


def write_metrics_csv(rows, path) -> None:
    """Fixed column order: views,OA,mAcc,mIoU."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for row in rows:
            writer.writerow([row.get("views", ""), row["OA"], row["mAcc"], row["mIoU"]])


def save_metrics_json(rows, path) -> None:
    with open(path, "w") as fh:
        json.dump(rows if len(rows) != 1 else rows[0], fh, indent=2)
        fh.write("\n")


def load_gt(path):
    """gt.json ({prompts, labels}) -> (labels array, prompts)."""
    try:
        doc = json.loads(Path(path).read_text())
        labels = np.asarray(doc["labels"], dtype=np.int64)
        prompts = [str(p) for p in doc["prompts"]]
    except (OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
        raise FormatError(f"bad gt file {path}: {exc}")
    return labels, prompts


def save_gt(labels, prompts, path) -> None:
    with open(path, "w") as fh:
        json.dump({"prompts": list(prompts), "labels": [int(v) for v in labels]}, fh)
        fh.write("\n")
