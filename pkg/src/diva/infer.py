"""Inference: single frames, full-resolution refinement, video modes, multi-offset merging."""
from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image as PILImage

from .core import DivA, InputShapeError, NonFiniteInputError
from .flowio import FlowField, rgb_to_flow
from .metrics import iou

PALETTE = np.array(
    [[230, 25, 75], [60, 180, 75], [0, 130, 200], [255, 225, 25], [145, 30, 180],
     [70, 240, 240], [245, 130, 48], [240, 50, 230]],
    dtype=np.uint8,
)


@dataclass
class FramePrediction:
    masks: np.ndarray  # (n, h, w) soft masks at model resolution
    labels: np.ndarray  # (H, W) hard labels; native resolution once refined
    slot_flows: np.ndarray  # (n, h, w, 3) per-slot flow renderings
    recon: np.ndarray  # (h, w, 3)
    slots: torch.Tensor  # (n, K)
    refined: bool = False

    @property
    def n(self) -> int:
        return self.masks.shape[0]


def validate_pair(image: np.ndarray, flow_rgb: np.ndarray) -> None:
    """Load-time checks: matching (H, W, 3) arrays, H and W >= 32 and divisible by 4, values in [0, 1]."""
    for name, x in (("image", image), ("flow", flow_rgb)):
        if x.ndim != 3 or x.shape[-1] != 3:
            raise InputShapeError(f"{name} must be (H, W, 3), got {x.shape}")
        if not np.isfinite(x).all():
            raise NonFiniteInputError(f"{name} contains NaN or Inf")
        if x.min() < 0 or x.max() > 1:
            raise ValueError(f"{name} values must lie in [0, 1]")
    if image.shape != flow_rgb.shape:
        raise InputShapeError(f"image {image.shape} and flow {flow_rgb.shape} differ")
    h, w = image.shape[:2]
    if h < 32 or w < 32 or h % 4 or w % 4:
        raise InputShapeError(f"frame size {h}x{w} must be >= 32 and divisible by 4")


def _to_tensor(x: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(x.transpose(2, 0, 1))).to(dtype).unsqueeze(0)


@torch.no_grad()
def segment_frame(
    model: DivA,
    image: np.ndarray,
    flow_rgb: np.ndarray,
    n: int,
    generator: torch.Generator | None = None,
    init: torch.Tensor | None = None,
    iters: int | None = None,
) -> FramePrediction:
    dtype = next(model.parameters()).dtype
    out = model(
        _to_tensor(flow_rgb, dtype), _to_tensor(image, dtype), n,
        generator=generator, init=None if init is None else init.unsqueeze(0), iters=iters,
    )
    masks = out.masks[0].numpy()
    return FramePrediction(
        masks=masks,
        labels=np.argmax(masks, axis=0),
        slot_flows=out.slot_flows[0].permute(0, 2, 3, 1).numpy(),
        recon=out.recon[0].permute(1, 2, 0).numpy(),
        slots=out.slots[0],
    )


def upsample_slot_flows(slot_flows: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear (half-pixel centers) resize of (n, h, w, 3) renderings to ``size``."""
    t = torch.from_numpy(np.ascontiguousarray(slot_flows.transpose(0, 3, 1, 2)))
    if tuple(t.shape[-2:]) != tuple(size):
        t = F.interpolate(t, size=tuple(size), mode="bilinear", align_corners=False)
    return t.permute(0, 2, 3, 1).numpy()


def argmin_labels(flow: np.ndarray, slot_vectors: np.ndarray) -> np.ndarray:
    """``flow`` (H, W, 2), ``slot_vectors`` (n, H, W, 2) -> index of the closest slot; ties to the lowest."""
    dist = np.linalg.norm(slot_vectors.astype(np.float64) - flow[None].astype(np.float64), axis=-1)
    return np.argmin(dist, axis=0)


def refine_fullres(pred: FramePrediction, native_flow: FlowField) -> np.ndarray:
    """Label each native-resolution pixel by the slot whose decoded flow is closest."""
    if pred.slot_flows is None or len(pred.slot_flows) == 0:
        raise ValueError("prediction carries no per-slot flows")
    up = upsample_slot_flows(pred.slot_flows, native_flow.shape)
    vectors = rgb_to_flow(up, native_flow.max_norm)
    return argmin_labels(native_flow.vectors, vectors)


def segment_video(
    model: DivA,
    frames: Sequence[tuple[np.ndarray, np.ndarray]],
    n: int,
    mode: str = "independent",
    generator: torch.Generator | None = None,
) -> list[FramePrediction]:
    """``frames`` are (image, flow_rgb) pairs. In recursive mode frame t > 0 starts
    from frame t-1's slots and runs a single binding iteration."""
    if mode not in ("independent", "recursive"):
        raise ValueError(f"unknown mode {mode!r}")
    if len(frames) == 0:
        raise ValueError("empty frame sequence")
    preds: list[FramePrediction] = []
    for t, (image, flow_rgb) in enumerate(frames):
        if mode == "recursive" and t > 0:
            pred = segment_frame(model, image, flow_rgb, n, init=preds[-1].slots, iters=1)
        else:
            pred = segment_frame(model, image, flow_rgb, n, generator=generator)
        preds.append(pred)
    return preds


def align_labels(reference: np.ndarray, other: np.ndarray, n: int) -> np.ndarray:
    """Greedy max-IoU matching; returns ``perm`` with other-label ``perm[k]`` -> reference-label ``k``.

    Pairs are taken in decreasing IoU, ties broken by reference label then
    other label; leftovers are paired in increasing label order.
    """
    scores = np.zeros((n, n))
    for i in range(n):
        a = reference == i
        for j in range(n):
            b = other == j
            scores[i, j] = iou(a, b) if (a.any() or b.any()) else 0.0
    order = sorted(((-scores[i, j], i, j) for i in range(n) for j in range(n)))
    perm = -np.ones(n, dtype=np.int64)
    used = set()
    for _, i, j in order:
        if perm[i] < 0 and j not in used:
            perm[i] = j
            used.add(j)
    return perm


def merge_multi_delta(preds: Sequence[FramePrediction]) -> FramePrediction:
    """Consensus of predictions for one reference frame under different time offsets."""
    if len(preds) == 0:
        raise ValueError("nothing to merge")
    n = preds[0].n
    if any(p.n != n for p in preds):
        raise ValueError("predictions disagree on slot count")
    ref = preds[0]
    aligned = [ref.masks.astype(np.float64)]
    for p in preds[1:]:
        perm = align_labels(ref.labels, p.labels, n)
        aligned.append(p.masks[perm].astype(np.float64))
    masks = np.mean(np.stack(aligned), axis=0)
    return replace(ref, masks=masks, labels=np.argmax(masks, axis=0), refined=False)


def flip_rate(preds_a: Sequence[np.ndarray], preds_b: Sequence[np.ndarray]) -> float:
    """Fraction of pixels whose label differs between paired label maps."""
    diffs = [np.mean(a != b) for a, b in zip(preds_a, preds_b)]
    return float(np.mean(diffs))


# --------------------------------------------------------------------------- panels


def colorize_labels(labels: np.ndarray) -> np.ndarray:
    return PALETTE[np.asarray(labels) % len(PALETTE)]


def _u8(x: np.ndarray) -> np.ndarray:
    return (np.clip(x, 0, 1) * 255).round().astype(np.uint8)


def export_panels(out_dir, image: np.ndarray, flow_rgb: np.ndarray, pred: FramePrediction, prefix: str = "") -> list[Path]:
    """Write image, flow, reconstruction, per-slot flow*mask and label panels as PNGs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    panels = {
        "image": _u8(image),
        "flow": _u8(flow_rgb),
        "recon": _u8(pred.recon),
        "labels": colorize_labels(pred.labels),
    }
    for k in range(pred.n):
        m = pred.masks[k][..., None]
        panels[f"slot{k}"] = _u8(pred.slot_flows[k] * m + (1 - m))
    paths = []
    for name, arr in panels.items():
        p = out / f"{prefix}{name}.png"
        PILImage.fromarray(arr).save(p)
        paths.append(p)
    strip = np.concatenate([panels[k] for k in panels if panels[k].shape[:2] == panels["image"].shape[:2]], axis=1)
    p = out / f"{prefix}strip.png"
    PILImage.fromarray(strip).save(p)
    paths.append(p)
    return paths
