"""Diagnostic data: textured objects pasted on textured backgrounds, each region
moving under its own independently drawn affine motion.

Region count ``r`` includes the background (label 0); objects are labels
``1 .. r-1``. Later pastes occlude earlier ones.
"""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from scipy import ndimage

from .flowio import FlowField, flow_read, flow_to_rgb, flow_write

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1


class GenerationError(RuntimeError):
    pass


@dataclass
class MotionModel:
    """Affine motion ``p -> A p + b``; the flow is the displacement ``(A - I) p + b``.

    ``p`` is measured in pixels from the frame center, (x, y) order.
    """

    A: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=np.float64).reshape(2, 2)
        self.b = np.asarray(self.b, dtype=np.float64).reshape(2)

    def displacement(self, xy: np.ndarray) -> np.ndarray:
        """``xy`` (..., 2) centered coordinates -> (..., 2) flow."""
        return xy @ (self.A - np.eye(2)).T + self.b

    def to_dict(self) -> dict:
        return {"A": self.A.tolist(), "b": self.b.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "MotionModel":
        return cls(d["A"], d["b"])


@dataclass
class MotionPrior:
    translation_max: float = 8.0
    affine_max: float = 0.05

    def max_norm(self, size: tuple[int, int]) -> float:
        """Upper bound on any displacement magnitude for a frame of ``size``."""
        h, w = size
        corner = np.hypot((w - 1) / 2, (h - 1) / 2)
        # |(A - I) p| <= ||A - I||_F |p| <= 2 * affine_max * |p|
        return float(self.translation_max + 2 * self.affine_max * corner)


def sample_motion(rng: np.random.Generator, prior: MotionPrior | None = None) -> MotionModel:
    prior = prior or MotionPrior()
    A = np.eye(2) + rng.uniform(-prior.affine_max, prior.affine_max, size=(2, 2))
    radius = prior.translation_max * np.sqrt(rng.uniform())
    angle = rng.uniform(0, 2 * np.pi)
    return MotionModel(A, radius * np.array([np.cos(angle), np.sin(angle)]))


def centered_grid(size: tuple[int, int]) -> np.ndarray:
    h, w = size
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    return np.stack([xs - (w - 1) / 2, ys - (h - 1) / 2], axis=-1)


def render_flow(labels: np.ndarray, motions: list[MotionModel]) -> np.ndarray:
    xy = centered_grid(labels.shape)
    flow = np.zeros(labels.shape + (2,), dtype=np.float64)
    for k, motion in enumerate(motions):
        sel = labels == k
        flow[sel] = motion.displacement(xy[sel])
    return flow.astype(np.float32)


# --------------------------------------------------------------------------- assets


def procedural_texture(rng: np.random.Generator, size: tuple[int, int]) -> np.ndarray:
    """Colored mixture of oriented gratings, a color gradient and smoothed noise."""
    h, w = size
    ys, xs = np.mgrid[0:h, 0:w] / max(h, w)
    img = np.zeros((h, w, 3))
    base = rng.uniform(0.1, 0.9, size=3)
    tint = rng.uniform(-0.4, 0.4, size=3)
    img += base + tint * (xs * np.cos(rng.uniform(0, 2 * np.pi)) + ys * np.sin(rng.uniform(0, 2 * np.pi)))[..., None]
    for _ in range(rng.integers(2, 5)):
        theta = rng.uniform(0, np.pi)
        freq = rng.uniform(2, 12)
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.sin(2 * np.pi * freq * (xs * np.cos(theta) + ys * np.sin(theta)) + phase)
        img += rng.uniform(0.05, 0.2) * wave[..., None] * rng.uniform(-1, 1, size=3)
    noise = ndimage.gaussian_filter(rng.normal(size=(h, w, 3)), sigma=(1.5, 1.5, 0))
    img += 0.15 * noise
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def procedural_blob(rng: np.random.Generator, canvas: int = 64) -> np.ndarray:
    """Star-shaped binary mask with a smooth random boundary."""
    ys, xs = np.mgrid[0:canvas, 0:canvas]
    c = (canvas - 1) / 2
    dx, dy = xs - c, ys - c
    theta = np.arctan2(dy, dx)
    radius = np.ones_like(theta)
    for k in range(1, 5):
        radius += rng.uniform(0, 0.35 / k) * np.cos(k * theta + rng.uniform(0, 2 * np.pi))
    radius *= 0.45 * canvas / radius.max()
    return np.hypot(dx, dy) <= radius


class ProceduralAssets:
    """Deterministic in-memory asset pool; ``namespace`` keeps splits disjoint."""

    def __init__(self, namespace: str = "train", pool_size: int = 1000, seed: int = 0):
        self.namespace = namespace
        self.pool_size = pool_size
        self.seed = seed
        self.mask_ids = [f"proc:{namespace}:mask:{i}" for i in range(pool_size)]
        self.background_ids = [f"proc:{namespace}:bg:{i}" for i in range(pool_size)]

    def _rng(self, asset_id: str) -> np.random.Generator:
        return np.random.default_rng([self.seed, *map(ord, asset_id)])

    def load_mask(self, asset_id: str) -> np.ndarray:
        return procedural_blob(self._rng(asset_id))

    def load_background(self, asset_id: str, size: tuple[int, int]) -> np.ndarray:
        return procedural_texture(self._rng(asset_id), size)


class DirectoryAssets:
    """Binary mask PNGs and background images from two directories."""

    exts = (".png", ".jpg", ".jpeg", ".bmp")

    def __init__(self, mask_dir: str | os.PathLike, background_dir: str | os.PathLike):
        self.mask_dir = Path(mask_dir)
        self.background_dir = Path(background_dir)
        self.mask_ids = sorted(p.name for p in self.mask_dir.iterdir() if p.suffix.lower() in self.exts)
        self.background_ids = sorted(
            p.name for p in self.background_dir.iterdir() if p.suffix.lower() in self.exts
        )
        if not self.mask_ids or not self.background_ids:
            raise GenerationError(f"empty asset library under {mask_dir} / {background_dir}")

    def load_mask(self, asset_id: str) -> np.ndarray:
        arr = np.asarray(PILImage.open(self.mask_dir / asset_id).convert("L"))
        mask = arr > 127
        ys, xs = np.nonzero(mask)
        if len(ys) == 0:
            raise GenerationError(f"mask {asset_id} is empty")
        return mask[ys.min() : ys.max() + 1, xs.min() : xs.max() + 1]

    def load_background(self, asset_id: str, size: tuple[int, int]) -> np.ndarray:
        img = PILImage.open(self.background_dir / asset_id).convert("RGB")
        img = img.resize((size[1], size[0]), PILImage.BILINEAR)
        return np.asarray(img, dtype=np.float32) / 255.0


# --------------------------------------------------------------------------- scenes


@dataclass
class SyntheticSample:
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    flow: FlowField
    flow_rgb: np.ndarray  # (H, W, 3) float32 in [0, 1]
    gt_labels: np.ndarray  # (H, W) int64, 0 = background
    region_count: int
    motions: list[MotionModel]
    provenance: dict = field(default_factory=dict)

    def instances(self) -> list[np.ndarray]:
        """Binary masks of the objects (background excluded)."""
        return [self.gt_labels == k for k in range(1, self.region_count)]


def _paste_mask(rng, mask, size, scale_range):
    h, w = size
    side = rng.uniform(*scale_range) * min(h, w)
    zoom = side / max(mask.shape)
    sh = max(2, min(h, int(round(mask.shape[0] * zoom))))
    sw = max(2, min(w, int(round(mask.shape[1] * zoom))))
    resized = np.asarray(
        PILImage.fromarray(mask.astype(np.uint8) * 255).resize((sw, sh), PILImage.NEAREST)
    ) > 127
    top = rng.integers(0, h - sh + 1)
    left = rng.integers(0, w - sw + 1)
    canvas = np.zeros(size, dtype=bool)
    canvas[top : top + sh, left : left + sw] = resized
    return canvas


def compose_scene(
    rng: np.random.Generator,
    r: int,
    assets,
    size: tuple[int, int] = (64, 64),
    prior: MotionPrior | None = None,
    min_area: float = 0.005,
    scale_range: tuple[float, float] = (0.35, 0.7),
    max_tries: int = 100,
    shared_motion: tuple[int, int] | None = None,
) -> SyntheticSample:
    """Composite one sample with ``r`` regions.

    ``shared_motion=(i, j)`` forces regions i and j to move identically; this
    breaks independence on purpose and exists only for negative-control tests.
    """
    if not 2 <= r <= 4:
        raise ValueError(f"region count must be in 2..4, got {r}")
    if not assets.mask_ids or not assets.background_ids:
        raise GenerationError("asset library is empty")
    prior = prior or MotionPrior()
    h, w = size
    min_pixels = min_area * h * w
    for attempt in range(max_tries):
        bg_id = assets.background_ids[rng.integers(len(assets.background_ids))]
        image = assets.load_background(bg_id, size).copy()
        labels = np.zeros(size, dtype=np.int64)
        used = {"background": bg_id, "masks": [], "textures": []}
        for k in range(1, r):
            mask_id = assets.mask_ids[rng.integers(len(assets.mask_ids))]
            tex_id = assets.background_ids[rng.integers(len(assets.background_ids))]
            region = _paste_mask(rng, assets.load_mask(mask_id), size, scale_range)
            image[region] = assets.load_background(tex_id, size)[region]
            labels[region] = k
            used["masks"].append(mask_id)
            used["textures"].append(tex_id)
        areas = np.bincount(labels.ravel(), minlength=r)
        if (areas[1:] >= min_pixels).all() and areas[0] >= min_pixels:
            break
    else:
        raise GenerationError(f"no valid {r}-region layout after {max_tries} attempts")
    motions = [sample_motion(rng, prior) for _ in range(r)]
    if shared_motion is not None:
        i, j = shared_motion
        motions[j] = MotionModel(motions[i].A.copy(), motions[i].b.copy())
    max_norm = prior.max_norm(size)
    flow = FlowField(render_flow(labels, motions), max_norm)
    return SyntheticSample(
        image=image.astype(np.float32),
        flow=flow,
        flow_rgb=flow_to_rgb(flow),
        gt_labels=labels,
        region_count=r,
        motions=motions,
        provenance={"assets": used, "attempts": attempt + 1},
    )


# --------------------------------------------------------------------------- splits


def _sample_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1, dtype=np.uint64)[0])


def build_split(
    seed: int,
    count: int,
    split: str = "train",
    size: tuple[int, int] = (64, 64),
    region_counts: tuple[int, ...] = (2, 3, 4),
) -> dict:
    """Deterministic manifest: one record (id, seed, region count) per sample."""
    rng = np.random.default_rng([seed, count])
    samples = [
        {
            "id": f"{split}-{seed}-{i:06d}",
            "seed": _sample_seed(seed, i),
            "regions": int(rng.choice(region_counts)),
        }
        for i in range(count)
    ]
    return {
        "version": MANIFEST_VERSION,
        "seed": seed,
        "split": split,
        "asset_pool": split,
        "size": list(size),
        "samples": samples,
    }


def manifest_bytes(manifest: dict) -> bytes:
    return json.dumps(manifest, sort_keys=True, indent=1).encode()


def materialize(record: dict, manifest: dict, assets=None, prior: MotionPrior | None = None) -> SyntheticSample:
    assets = assets or ProceduralAssets(manifest["asset_pool"])
    rng = np.random.default_rng(record["seed"])
    sample = compose_scene(rng, record["regions"], assets, tuple(manifest["size"]), prior)
    sample.provenance.update(id=record["id"], seed=record["seed"])
    return sample


def generate_arrays(manifest: dict, assets=None, prior: MotionPrior | None = None) -> dict:
    """Stack a whole manifest into arrays suitable for training and evaluation."""
    assets = assets or ProceduralAssets(manifest["asset_pool"])
    h, w = manifest["size"]
    count = len(manifest["samples"])
    out = {
        "image": np.zeros((count, h, w, 3), np.float32),
        "flow_rgb": np.zeros((count, h, w, 3), np.float32),
        "flow": np.zeros((count, h, w, 2), np.float32),
        "labels": np.zeros((count, h, w), np.int64),
        "regions": np.zeros(count, np.int64),
    }
    for i, rec in enumerate(manifest["samples"]):
        s = materialize(rec, manifest, assets, prior)
        out["image"][i] = s.image
        out["flow_rgb"][i] = s.flow_rgb
        out["flow"][i] = s.flow.vectors
        out["labels"][i] = s.gt_labels
        out["regions"][i] = s.region_count
    out["max_norm"] = (prior or MotionPrior()).max_norm((h, w))
    return out


def save_sample(directory: str | os.PathLike, sample: SyntheticSample, name: str) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray((sample.image * 255).round().astype(np.uint8)).save(d / f"{name}.png")
    flow_write(d / f"{name}.flo", sample.flow)
    lab = PILImage.fromarray(sample.gt_labels.astype(np.uint8), mode="P")
    palette = [0, 0, 0, 230, 25, 75, 60, 180, 75, 0, 130, 200]
    lab.putpalette(palette + [0] * (768 - len(palette)))
    lab.save(d / f"{name}_labels.png")
    sidecar = {
        "region_count": sample.region_count,
        "max_norm": sample.flow.max_norm,
        "motions": [m.to_dict() for m in sample.motions],
        "provenance": sample.provenance,
    }
    (d / f"{name}.json").write_text(json.dumps(sidecar, indent=1, sort_keys=True))


def load_sample(directory: str | os.PathLike, name: str) -> SyntheticSample:
    d = Path(directory)
    meta = json.loads((d / f"{name}.json").read_text())
    image = np.asarray(PILImage.open(d / f"{name}.png").convert("RGB"), dtype=np.float32) / 255.0
    flow = FlowField(flow_read(d / f"{name}.flo"), meta["max_norm"])
    labels = np.asarray(PILImage.open(d / f"{name}_labels.png"), dtype=np.int64)
    return SyntheticSample(
        image=image,
        flow=flow,
        flow_rgb=flow_to_rgb(flow),
        gt_labels=labels,
        region_count=meta["region_count"],
        motions=[MotionModel.from_dict(m) for m in meta["motions"]],
        provenance=meta["provenance"],
    )


def write_split(out_dir, manifest: dict, assets=None, prior: MotionPrior | None = None) -> Path:
    """Materialize every manifest record under ``out_dir/samples`` next to ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest.json").write_bytes(manifest_bytes(manifest))
    assets = assets or ProceduralAssets(manifest["asset_pool"])
    for rec in manifest["samples"]:
        save_sample(out / "samples", materialize(rec, manifest, assets, prior), rec["id"])
    return out


def load_split(split_dir) -> dict:
    """Read a directory written by :func:`write_split` into stacked arrays."""
    d = Path(split_dir)
    manifest = json.loads((d / "manifest.json").read_text())
    samples = [load_sample(d / "samples", rec["id"]) for rec in manifest["samples"]]
    if not samples:
        raise GenerationError(f"{split_dir} holds no samples")
    max_norms = {s.flow.max_norm for s in samples}
    if len(max_norms) != 1:
        raise GenerationError(f"samples in {split_dir} use different max_norm values {max_norms}")
    return {
        "image": np.stack([s.image for s in samples]).astype(np.float32),
        "flow_rgb": np.stack([s.flow_rgb for s in samples]),
        "flow": np.stack([s.flow.vectors for s in samples]),
        "labels": np.stack([s.gt_labels for s in samples]),
        "regions": np.array([s.region_count for s in samples]),
        "max_norm": max_norms.pop(),
        "ids": [rec["id"] for rec in manifest["samples"]],
    }
