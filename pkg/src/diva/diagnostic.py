"""Evaluation over a synthetic split and the four-way ablation used to check trends.

The ablation trains a flow-only slot autoencoder (``san``) and the
image-conditioned model at several adversarial weights, then compares
bootstrapping IoU, partition counts and mask entropy on a held-out split.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .core import DivA, ModelConfig
from .metrics import PredictedSegmentation, best_ious, count_regions, spc_variants
from .objective import mask_entropy, mse
from .synthgen import build_split, generate_arrays
from .trainer import ArraySource, TrainConfig, TrainState, run, train_step

log = logging.getLogger(__name__)


@torch.no_grad()
def evaluate(
    model: DivA, arrays: dict, n: int, seed: int = 0, tau_area: float = 0.005, batch_size: int = 16
) -> dict:
    """Per-sample records plus split-level bIoU (x100, mean over all objects) and SPC."""
    model.eval()
    gen = torch.Generator().manual_seed(seed)
    flows = torch.from_numpy(arrays["flow_rgb"]).permute(0, 3, 1, 2)
    images = torch.from_numpy(arrays["image"]).permute(0, 3, 1, 2)
    records, preds, all_scores = [], [], []
    for start in range(0, len(flows), batch_size):
        f, im = flows[start : start + batch_size], images[start : start + batch_size]
        out = model(f, im, n, generator=gen)
        masks = out.masks.numpy()
        ent = mask_entropy(out.masks, dim=1, per_sample=True)
        for b in range(len(f)):
            i = start + b
            pred = PredictedSegmentation.from_masks(masks[b])
            labels = arrays["labels"][i]
            regions = int(arrays["regions"][i])
            gt = [labels == k for k in range(1, regions)]
            scores = best_ious(pred, gt)
            all_scores.extend(scores)
            preds.append(pred)
            records.append({
                "index": i,
                "biou": float(np.mean(scores)),
                "count": count_regions(pred, tau_area),
                "regions": regions,
                "entropy": float(ent[b]),
                "recon_error": float(mse(f[b], out.recon[b])),
            })
    variants = spc_variants(preds, list(arrays["labels"]), list(arrays["regions"]), tau_area)
    return {
        "biou": 100.0 * float(np.mean(all_scores)),
        "spc": variants["with_background"],
        "spc_objects_only": variants["objects_only"],
        "count": len(records),
        "records": records,
    }


def entropy_bins(results: dict[float, dict], bins: int = 5) -> dict:
    """Mean mask entropy per reconstruction-error bin for each lambda.

    Bin edges are quantiles of the pooled reconstruction errors; a bin passes
    when entropy is non-increasing across increasing lambda.
    """
    lams = sorted(results)
    pooled = np.concatenate([[r["recon_error"] for r in results[l]["records"]] for l in lams])
    edges = np.quantile(pooled, np.linspace(0, 1, bins + 1))
    table = {}
    for lam in lams:
        err = np.array([r["recon_error"] for r in results[lam]["records"]])
        ent = np.array([r["entropy"] for r in results[lam]["records"]])
        idx = np.clip(np.searchsorted(edges, err, side="right") - 1, 0, bins - 1)
        table[lam] = [float(ent[idx == b].mean()) if np.any(idx == b) else float("nan") for b in range(bins)]
    passing = []
    for b in range(bins):
        col = [table[l][b] for l in lams]
        ok = all(np.isfinite(col)) and all(a >= c for a, c in zip(col[:-1], col[1:]))
        passing.append(bool(ok))
    return {"edges": edges.tolist(), "entropy": {str(k): v for k, v in table.items()}, "passing": passing}


@dataclass
class ProtocolConfig:
    size: tuple[int, int] = (64, 64)
    train_count: int = 5000
    val_count: int = 300
    steps: int = 20000
    batch_size: int = 32
    n_slots: int = 4
    lambdas: tuple[float, ...] = (0.0, 0.01, 0.03)
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    tau_area: float = 0.005

    def runs(self) -> dict[str, TrainConfig]:
        base = TrainConfig(
            n_slots=self.n_slots, batch_size=self.batch_size, steps=self.steps, seed=self.seed, model=self.model
        )
        runs = {"san": replace(base, adversarial=False, lam=0.0, lam_final=0.0,
                               model=replace(self.model, conditional=False))}
        for lam in self.lambdas:
            runs[f"lambda={lam:g}"] = replace(base, lam=lam, lam_final=lam)
        return runs


def seconds_per_step(cfg: TrainConfig, size: tuple[int, int], probe_steps: int = 2) -> float:
    """Wall-clock cost of one alternating step on random data at ``size``."""
    h, w = size
    rng = np.random.default_rng(0)
    data = rng.uniform(size=(cfg.batch_size, h, w, 3)).astype(np.float32)
    src = ArraySource(data, data.copy())
    probe = replace(cfg, steps=probe_steps + 1, warmup_frac=0.0)
    state = TrainState.create(probe)
    flow, image = src.batch(0, cfg.batch_size)
    train_step(state, flow, image)  # warm-up allocation
    t0 = time.perf_counter()
    for _ in range(probe_steps):
        train_step(state, flow, image)
    return (time.perf_counter() - t0) / probe_steps


def run_protocol(cfg: ProtocolConfig, out_dir=None) -> dict:
    train_m = build_split(cfg.seed, cfg.train_count, "train", cfg.size)
    val_m = build_split(cfg.seed + 1, cfg.val_count, "val", cfg.size)
    train = generate_arrays(train_m)
    val = generate_arrays(val_m)
    source = ArraySource(train["flow_rgb"], train["image"], seed=cfg.seed)
    results = {}
    for name, tc in cfg.runs().items():
        t0 = time.perf_counter()
        run_dir = Path(out_dir) / name if out_dir else None
        state = run(tc, source, out_dir=run_dir)
        res = evaluate(state.model, val, cfg.n_slots, seed=cfg.seed, tau_area=cfg.tau_area)
        res["train_seconds"] = time.perf_counter() - t0
        results[name] = res
        log.info("%s: bIoU %.2f SPC %d (%.0fs)", name, res["biou"], res["spc"], res["train_seconds"])
    report = protocol_checks(results, cfg.lambdas)
    if out_dir:
        summary = {k: {m: v for m, v in r.items() if m != "records"} for k, r in results.items()}
        Path(out_dir, "report.json").write_text(json.dumps({"runs": summary, "checks": report}, indent=1))
    report["results"] = results
    return report


def protocol_checks(results: dict, lambdas=(0.0, 0.01, 0.03)) -> dict:
    key = {lam: f"lambda={lam:g}" for lam in lambdas}
    b = {lam: results[key[lam]]["biou"] for lam in lambdas}
    s = {lam: results[key[lam]]["spc"] for lam in lambdas}
    san = results["san"]["biou"]
    checks = {
        "conditional_gain": b[0.0] - san,
        "conditional_gain_ok": b[0.0] - san >= 15.0,
        "spc_relative_gain": (s[0.03] - s[0.0]) / max(s[0.0], 1),
        "spc_gain_ok": s[0.03] >= 1.1 * s[0.0] and s[0.03] > s[0.0],
        "best_lambda_gap": max(b.values()) - b[0.01],
        "best_lambda_gap_ok": max(b.values()) - b[0.01] <= 2.0,
    }
    bins = entropy_bins({lam: results[key[lam]] for lam in lambdas})
    checks["entropy_bins"] = bins
    checks["entropy_ok"] = sum(bins["passing"]) >= 4
    return checks
