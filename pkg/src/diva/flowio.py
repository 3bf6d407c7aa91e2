"""Optical-flow interchange: Middlebury ``.flo`` files and the color-wheel codec.

The color wheel is an HSV rendering with value fixed at 1: hue encodes the
direction ``atan2(v, u)``, saturation encodes ``min(|(u, v)| / max_norm, 1)``.
Zero flow is white; the mapping is invertible up to magnitude clipping.
"""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv

FLO_MAGIC = np.float32(202021.25)


class FlowFormatError(ValueError):
    pass


@dataclass
class FlowField:
    vectors: np.ndarray  # (H, W, 2) float32, pixels/frame
    max_norm: float

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float32)
        if self.vectors.ndim != 3 or self.vectors.shape[-1] != 2:
            raise ValueError(f"flow must be (H, W, 2), got {self.vectors.shape}")
        if not np.isfinite(self.vectors).all():
            raise ValueError("flow contains NaN or Inf")
        if self.max_norm <= 0:
            raise ValueError("max_norm must be positive")
        peak = float(np.linalg.norm(self.vectors, axis=-1).max(initial=0.0))
        if peak > self.max_norm * (1 + 1e-6):
            raise ValueError(f"max_norm {self.max_norm} below peak magnitude {peak}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.vectors.shape[:2]


def flow_write(path: str | os.PathLike, flow: np.ndarray | FlowField) -> None:
    uv = flow.vectors if isinstance(flow, FlowField) else np.asarray(flow)
    if uv.ndim != 3 or uv.shape[-1] != 2:
        raise ValueError(f"flow must be (H, W, 2), got {uv.shape}")
    h, w = uv.shape[:2]
    with open(path, "wb") as fh:
        fh.write(FLO_MAGIC.astype("<f4").tobytes())
        fh.write(np.array([w, h], dtype="<i4").tobytes())
        fh.write(np.ascontiguousarray(uv, dtype="<f4").tobytes())


def flow_read(path: str | os.PathLike) -> np.ndarray:
    """Read a ``.flo`` file into an (H, W, 2) float32 array."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 12:
        raise FlowFormatError(f"{path}: truncated header")
    magic = np.frombuffer(data, "<f4", count=1)[0]
    if magic != FLO_MAGIC:
        raise FlowFormatError(f"{path}: bad magic {magic!r}")
    w, h = (int(x) for x in np.frombuffer(data, "<i4", count=2, offset=4))
    if w <= 0 or h <= 0:
        raise FlowFormatError(f"{path}: invalid size {w}x{h}")
    expected = 12 + 8 * w * h
    if len(data) != expected:
        raise FlowFormatError(f"{path}: payload is {len(data) - 12} bytes, expected {expected - 12}")
    return np.frombuffer(data, "<f4", offset=12).reshape(h, w, 2).astype(np.float32)


def flow_to_rgb(flow: np.ndarray | FlowField, max_norm: float | None = None) -> np.ndarray:
    """(..., 2) flow -> (..., 3) float32 RGB in [0, 1]."""
    if isinstance(flow, FlowField):
        max_norm = flow.max_norm if max_norm is None else max_norm
        flow = flow.vectors
    if max_norm is None or max_norm <= 0:
        raise ValueError(f"max_norm must be positive, got {max_norm}")
    uv = np.asarray(flow, dtype=np.float64)
    u, v = uv[..., 0], uv[..., 1]
    hue = np.mod(np.arctan2(v, u) / (2 * np.pi), 1.0)
    sat = np.minimum(np.hypot(u, v) / max_norm, 1.0)
    hsv = np.stack([hue, sat, np.ones_like(sat)], axis=-1)
    return np.clip(hsv_to_rgb(hsv), 0.0, 1.0).astype(np.float32)


def rgb_to_flow(rgb: np.ndarray, max_norm: float) -> np.ndarray:
    """Inverse of :func:`flow_to_rgb`. Out-of-gamut inputs are clipped to [0, 1] first."""
    if max_norm <= 0:
        raise ValueError(f"max_norm must be positive, got {max_norm}")
    rgb = np.clip(np.asarray(rgb, dtype=np.float64), 0.0, 1.0)
    hsv = rgb_to_hsv(rgb)
    angle = hsv[..., 0] * 2 * np.pi
    mag = hsv[..., 1] * max_norm
    return np.stack([mag * np.cos(angle), mag * np.sin(angle)], axis=-1).astype(np.float32)
