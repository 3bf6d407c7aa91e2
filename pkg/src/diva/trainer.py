"""Alternating min-max training of the slot model against the adversarial decoder."""
from __future__ import annotations

import hashlib
import json
import logging
import math
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .core import AdversarialDecoder, DivA, ModelConfig
from .objective import diva_loss, mask_entropy, mse

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class NumericalFailure(RuntimeError):
    pass


@dataclass
class TrainConfig:
    n_slots: int = 4
    batch_size: int = 32
    steps: int = 20000
    lr: float = 8e-4
    lr_min: float = 0.0
    lam: float = 0.03
    lam_final: float = 0.01
    warmup_frac: float = 0.2
    anneal_frac: float = 0.2
    adversarial: bool = True
    fresh_adversary_slots: bool = True
    implicit: bool = True
    seed: int = 0
    log_every: int = 1
    checkpoint_every: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        if self.lam < 0 or self.lam_final < 0:
            raise ValueError("lambda must be >= 0")
        if self.batch_size < 1 or self.n_slots < 1:
            raise ValueError("batch_size and n_slots must be >= 1")
        if not (0 <= self.warmup_frac <= 1 and 0 <= self.anneal_frac <= 1):
            raise ValueError("warmup_frac and anneal_frac must lie in [0, 1]")

    @property
    def warmup_steps(self) -> int:
        return int(round(self.warmup_frac * self.steps))

    def lam_at(self, step: int) -> float:
        """0 during warm-up, then ``lam``, annealed linearly to ``lam_final`` over the last ``anneal_frac``."""
        if step < self.warmup_steps:
            return 0.0
        anneal = int(round(self.anneal_frac * self.steps))
        start = max(self.steps - anneal, self.warmup_steps)
        if step < start or self.steps <= start:
            return self.lam
        t = (step - start) / max(self.steps - start - 1, 1)
        return self.lam + min(t, 1.0) * (self.lam_final - self.lam)

    def lr_at(self, step: int) -> float:
        t = min(step / max(self.steps, 1), 1.0)
        return self.lr_min + 0.5 * (self.lr - self.lr_min) * (1 + math.cos(math.pi * t))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        """JSON object or ``key = value`` lines (values parsed as JSON where possible)."""
        text = Path(path).read_text()
        try:
            data = json.loads(text)
        except json.JSONDecodeError:
            data = {}
            for line in text.splitlines():
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                key, _, value = line.partition("=")
                key, value = key.strip(), value.strip()
                try:
                    parsed = json.loads(value)
                except json.JSONDecodeError:
                    parsed = value
                if key.startswith("model."):
                    data.setdefault("model", {})[key[6:]] = parsed
                else:
                    data[key] = parsed
        return cls.from_dict(data)


class ArraySource:
    """In-memory (flow_rgb, image) pairs with a stateless, wrap-around sampling order."""

    def __init__(self, flow_rgb: np.ndarray, image: np.ndarray, seed: int = 0):
        if flow_rgb.shape != image.shape or flow_rgb.ndim != 4:
            raise ValueError("flow_rgb and image must both be (N, H, W, 3)")
        self.flow = torch.from_numpy(np.ascontiguousarray(flow_rgb.transpose(0, 3, 1, 2)))
        self.image = torch.from_numpy(np.ascontiguousarray(image.transpose(0, 3, 1, 2)))
        self.seed = seed
        self._perms: dict[int, np.ndarray] = {}

    def __len__(self) -> int:
        return self.flow.shape[0]

    def _perm(self, epoch: int) -> np.ndarray:
        if epoch not in self._perms:
            self._perms = {epoch: np.random.default_rng([self.seed, epoch]).permutation(len(self))}
        return self._perms[epoch]

    def indices(self, step: int, batch_size: int) -> np.ndarray:
        n = len(self)
        pos = np.arange(step * batch_size, (step + 1) * batch_size)
        return np.array([self._perm(p // n)[p % n] for p in pos])

    def batch(self, step: int, batch_size: int) -> tuple[torch.Tensor, torch.Tensor]:
        idx = torch.from_numpy(self.indices(step, batch_size))
        return self.flow[idx], self.image[idx]


@dataclass
class TrainState:
    config: TrainConfig
    model: DivA
    adversary: AdversarialDecoder
    opt_w: torch.optim.Optimizer
    opt_theta: torch.optim.Optimizer
    generator: torch.Generator
    step: int = 0
    log_tail: deque = field(default_factory=lambda: deque(maxlen=100))

    @classmethod
    def create(cls, config: TrainConfig) -> "TrainState":
        torch.manual_seed(config.seed)
        model = DivA(config.model)
        adversary = AdversarialDecoder(config.model)
        opt_w = torch.optim.Adam(model.parameters(), lr=config.lr)
        opt_theta = torch.optim.Adam(adversary.parameters(), lr=config.lr)
        gen = torch.Generator().manual_seed(config.seed + 1)
        return cls(config, model, adversary, opt_w, opt_theta, gen)


def _set_lr(opt: torch.optim.Optimizer, lr: float) -> None:
    for group in opt.param_groups:
        group["lr"] = lr


def params_digest(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def min_step(state: TrainState, flow: torch.Tensor, image: torch.Tensor, lam: float):
    """Descend the slot model on reconstruction - lam * separation; the adversary is frozen."""
    cfg = state.config
    model, adversary = state.model, state.adversary
    adversary.requires_grad_(False)
    try:
        out = model(flow, image, cfg.n_slots, generator=state.generator, implicit=cfg.implicit)
        if cfg.adversarial and lam > 0:
            # the condition features reach the adversary detached: only slots and
            # masks carry the separation gradient back to the slot model
            pyr = None if out.pyramid is None else [p.detach() for p in out.pyramid]
            adv = adversary(out.slots, pyr, tuple(flow.shape[-2:]))
        else:
            with torch.no_grad():
                adv = adversary(out.slots.detach(), _detach(out.pyramid), tuple(flow.shape[-2:]))
        loss = diva_loss(flow, out.slot_flows, adv, out.masks, lam)
        if not torch.isfinite(loss.total):
            raise NumericalFailure(f"non-finite loss at step {state.step}: {loss.as_dict()}")
        state.opt_w.zero_grad(set_to_none=True)
        loss.total.backward()
        state.opt_w.step()
    finally:
        adversary.requires_grad_(True)
    return loss, out


def max_step(state: TrainState, flow: torch.Tensor, image: torch.Tensor, reuse=None) -> float:
    """Fit the adversary to the flow outside each slot's mask; slot-model weights untouched."""
    cfg = state.config
    with torch.no_grad():
        if reuse is None or cfg.fresh_adversary_slots:
            out = state.model(flow, image, cfg.n_slots, generator=state.generator, implicit=False)
        else:
            out = reuse
        slots, masks, pyr = out.slots.detach(), out.masks.detach(), _detach(out.pyramid)
    adv = state.adversary(slots, pyr, tuple(flow.shape[-2:]))
    target = flow.unsqueeze(1).expand_as(adv)
    sep = mse(target, adv, weight=1.0 - masks)
    if not torch.isfinite(sep):
        raise NumericalFailure(f"non-finite adversary loss at step {state.step}")
    state.opt_theta.zero_grad(set_to_none=True)
    sep.backward()
    state.opt_theta.step()
    return float(sep.detach())


def _detach(pyramid):
    return None if pyramid is None else [p.detach() for p in pyramid]


def train_step(state: TrainState, flow: torch.Tensor, image: torch.Tensor) -> dict:
    cfg = state.config
    if flow.shape[0] != cfg.batch_size:
        raise ValueError(f"batch of {flow.shape[0]} does not match batch_size={cfg.batch_size}")
    lam = cfg.lam_at(state.step)
    lr = cfg.lr_at(state.step)
    _set_lr(state.opt_w, lr)
    _set_lr(state.opt_theta, lr)
    state.model.train()
    loss, out = min_step(state, flow, image, lam)
    record = {"step": state.step, "lr": lr, **loss.as_dict()}
    record["entropy"] = mask_entropy(out.masks.detach(), dim=1)
    if cfg.adversarial:
        record["adversary"] = max_step(state, flow, image, reuse=out)
    state.step += 1
    state.log_tail.append(record)
    return record


def save_checkpoint(path, state: TrainState) -> None:
    cfg = state.config
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "config": cfg.to_dict(),
        "slot_dim": cfg.model.slot_dim,
        "n_train": cfg.n_slots,
        "step": state.step,
        "lambda": cfg.lam_at(state.step),
    }
    bundle = {
        "format_version": CHECKPOINT_VERSION,
        "manifest": json.dumps(manifest, sort_keys=True),
        "model": state.model.state_dict(),
        "adversary": state.adversary.state_dict(),
        "opt_w": state.opt_w.state_dict(),
        "opt_theta": state.opt_theta.state_dict(),
        "generator": state.generator.get_state(),
        "log_tail": json.dumps(list(state.log_tail)),
    }
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(bundle, tmp)
    tmp.replace(path)


def load_checkpoint(path) -> TrainState:
    bundle = torch.load(path, map_location="cpu", weights_only=True)
    version = bundle.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint format version {version}")
    manifest = json.loads(bundle["manifest"])
    cfg = TrainConfig.from_dict(manifest["config"])
    state = TrainState.create(cfg)
    state.model.load_state_dict(bundle["model"])
    state.adversary.load_state_dict(bundle["adversary"])
    state.opt_w.load_state_dict(bundle["opt_w"])
    state.opt_theta.load_state_dict(bundle["opt_theta"])
    state.generator.set_state(bundle["generator"])
    state.step = manifest["step"]
    state.log_tail.extend(json.loads(bundle["log_tail"]))
    return state


def export_model(path, state: TrainState) -> None:
    """Inference-only bundle: slot-model weights and config, no adversary or optimizer state."""
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "config": state.config.to_dict(),
        "slot_dim": state.config.model.slot_dim,
        "n_train": state.config.n_slots,
        "step": state.step,
    }
    bundle = {"format_version": CHECKPOINT_VERSION, "manifest": json.dumps(manifest, sort_keys=True),
              "model": state.model.state_dict()}
    torch.save(bundle, path)


def load_model(path) -> tuple[DivA, TrainConfig]:
    """Slot model only, in eval mode, for inference. Accepts full and exported bundles."""
    bundle = torch.load(path, map_location="cpu", weights_only=True)
    version = bundle.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint format version {version}")
    cfg = TrainConfig.from_dict(json.loads(bundle["manifest"])["config"])
    model = DivA(cfg.model)
    model.load_state_dict(bundle["model"])
    model.eval()
    return model, cfg


def _truncate_log(path: Path, step: int) -> None:
    """Drop records written after the checkpoint at ``step`` so a resumed log has no duplicates."""
    if not path.exists():
        return
    keep = []
    for line in path.read_text().splitlines():
        rec = json.loads(line)
        # validation records carry the post-update step, training records the pre-update one
        if rec["step"] < step or ("validation" in rec and rec["step"] == step):
            keep.append(line + "\n")
    path.write_text("".join(keep))


def run(
    config: TrainConfig | None,
    source: ArraySource,
    out_dir=None,
    resume: TrainState | None = None,
    stop_at: int | None = None,
    on_log: Callable[[dict], None] | None = None,
    validate: Callable[[TrainState], dict] | None = None,
    val_every: int = 0,
) -> TrainState:
    """Train until ``config.steps`` (or ``stop_at``). Metrics go to ``out_dir/metrics.jsonl``."""
    state = resume or TrainState.create(config)
    cfg = state.config
    end = cfg.steps if stop_at is None else min(stop_at, cfg.steps)
    out = Path(out_dir) if out_dir else None
    logf = None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        if resume:
            _truncate_log(out / "metrics.jsonl", state.step)
        logf = open(out / "metrics.jsonl", "a" if resume else "w")
    try:
        while state.step < end:
            flow, image = source.batch(state.step, cfg.batch_size)
            record = train_step(state, flow, image)
            if logf and cfg.log_every and record["step"] % cfg.log_every == 0:
                logf.write(json.dumps(record, sort_keys=True) + "\n")
                logf.flush()
            if on_log:
                on_log(record)
            if out and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
                save_checkpoint(out / "checkpoint.pt", state)
            if validate and val_every and state.step % val_every == 0:
                metrics = validate(state)
                log.info("step %d validation %s", state.step, metrics)
                if logf:
                    logf.write(json.dumps({"step": state.step, "validation": metrics}, sort_keys=True) + "\n")
    finally:
        if logf:
            logf.close()
    if out:
        save_checkpoint(out / "checkpoint.pt", state)
    return state
