"""Segmentation metrics: IoU, bootstrapping IoU, region counts, partition counts."""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


class UndefinedMeasure(ValueError):
    pass


@dataclass
class PredictedSegmentation:
    labels: np.ndarray  # (H, W) int, values in [0, n)
    masks: np.ndarray | None = None  # (n, H, W) soft masks
    n: int | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.n is None:
            self.n = self.masks.shape[0] if self.masks is not None else int(self.labels.max()) + 1
        if self.labels.min(initial=0) < 0 or self.labels.max(initial=0) >= self.n:
            raise ValueError(f"labels outside [0, {self.n})")

    @classmethod
    def from_masks(cls, masks: np.ndarray) -> "PredictedSegmentation":
        masks = np.asarray(masks)
        return cls(np.argmax(masks, axis=0), masks, masks.shape[0])

    def segments(self) -> list[np.ndarray]:
        return [self.labels == k for k in range(self.n)]


def _as_pred(pred) -> PredictedSegmentation:
    return pred if isinstance(pred, PredictedSegmentation) else PredictedSegmentation(pred)


def iou(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        raise UndefinedMeasure("IoU of two empty masks is undefined")
    return np.count_nonzero(a & b) / union


def best_ious(pred, gt: Sequence[np.ndarray]) -> list[float]:
    """Best IoU of each ground-truth object against any predicted segment."""
    if len(gt) == 0:
        raise UndefinedMeasure("bIoU needs at least one ground-truth instance")
    segments = _as_pred(pred).segments()
    return [max(iou(seg, obj) for seg in segments) for obj in gt]


def biou(pred, gt: Sequence[np.ndarray]) -> float:
    """Mean over ground-truth objects of their best IoU; segments may be reused."""
    scores = best_ious(pred, gt)
    return sum(scores) / len(scores)


def count_regions(pred, tau_area: float = 0.005) -> int:
    if not 0 < tau_area < 1:
        raise ValueError(f"tau_area must be in (0, 1), got {tau_area}")
    p = _as_pred(pred)
    areas = np.bincount(p.labels.ravel(), minlength=p.n)
    return int(np.count_nonzero(areas >= tau_area * p.labels.size))


def spc(preds: Sequence, gt_counts: Sequence[int], tau_area: float = 0.005) -> int:
    """Number of samples whose counted region number equals the ground truth."""
    if len(preds) != len(gt_counts):
        raise ValueError(f"{len(preds)} predictions vs {len(gt_counts)} counts")
    return sum(int(count_regions(p, tau_area) == int(c)) for p, c in zip(preds, gt_counts))


def count_object_regions(pred, gt_background: np.ndarray, tau_area: float = 0.005) -> int:
    """Counted regions, excluding the predicted segment that best matches the background."""
    p = _as_pred(pred)
    areas = np.bincount(p.labels.ravel(), minlength=p.n)
    counted = areas >= tau_area * p.labels.size
    bg = int(np.argmax([np.count_nonzero((p.labels == k) & gt_background) for k in range(p.n)]))
    counted[bg] = False
    return int(np.count_nonzero(counted))


def spc_variants(
    preds: Sequence, gt_label_maps: Sequence[np.ndarray], gt_counts: Sequence[int], tau_area: float = 0.005
) -> dict:
    """SPC with the background counted as a region, and over objects only."""
    if not len(preds) == len(gt_label_maps) == len(gt_counts):
        raise ValueError("preds, label maps and counts differ in length")
    objects_only = sum(
        int(count_object_regions(p, np.asarray(g) == 0, tau_area) == int(c) - 1)
        for p, g, c in zip(preds, gt_label_maps, gt_counts)
    )
    return {"with_background": spc(preds, gt_counts, tau_area), "objects_only": objects_only}


def binary_protocol_iou(pred, gt_fg: np.ndarray) -> float:
    """IoU of the foreground against whichever predicted mask matches it best."""
    return max(iou(seg, gt_fg) for seg in _as_pred(pred).segments())


def write_jsonl(records: Iterable[dict], path) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def summary_table(rows: dict[str, dict[str, float]]) -> str:
    """Plain-text table: one row per run, one column per metric."""
    cols = sorted({c for r in rows.values() for c in r})
    width = max([len(k) for k in rows] + [4])
    lines = [" ".join([f"{'run':<{width}}"] + [f"{c:>14}" for c in cols])]
    for name, r in rows.items():
        cells = [f"{r[c]:>14.4f}" if c in r else f"{'-':>14}" for c in cols]
        lines.append(" ".join([f"{name:<{width}}"] + cells))
    return "\n".join(lines)
