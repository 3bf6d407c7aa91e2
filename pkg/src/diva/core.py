"""DivA network: flow encoder, slot binding, image-conditioned slot decoder, adversary.

All tensors are channels-first torch tensors with a leading batch axis:
flow/image ``(B, 3, H, W)``, slots ``(B, n, K)``, masks ``(B, n, H, W)``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple, Sequence

import torch
import torch.nn.functional as F
from torch import nn


class InputShapeError(ValueError):
    pass


class NonFiniteInputError(ValueError):
    pass


@dataclass
class ModelConfig:
    slot_dim: int = 48
    enc_channels: int = 48
    enc_kernel: int = 5
    enc_layers: int = 4
    cond_channels: int = 24
    cond_kernels: tuple[int, ...] = (5, 3, 3, 3, 3)
    dec_channels: int = 48
    dec_kernels: tuple[int, ...] = (5, 3, 3, 3, 3, 3)
    mlp_hidden: int = 128
    iters: int = 3
    conditional: bool = True
    eps: float = 1e-8

    def __post_init__(self):
        self.cond_kernels = tuple(self.cond_kernels)
        self.dec_kernels = tuple(self.dec_kernels)
        if self.conditional and len(self.dec_kernels) != len(self.cond_kernels) + 1:
            raise ValueError(
                "decoder needs one layer per condition level plus an output head: "
                f"{len(self.dec_kernels)} vs {len(self.cond_kernels)}"
            )
        if self.iters < 1:
            raise ValueError("iters must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    @classmethod
    def tiny(cls, **overrides) -> "ModelConfig":
        """Narrow configuration for gradient checks and fast tests."""
        base = dict(slot_dim=8, enc_channels=8, cond_channels=4, dec_channels=8, mlp_hidden=16)
        base.update(overrides)
        return cls(**base)


def check_finite(name: str, x: torch.Tensor) -> None:
    if not torch.isfinite(x).all():
        raise NonFiniteInputError(f"{name} contains NaN or Inf")


def symmetric_sum(x: torch.Tensor, dim: int) -> torch.Tensor:
    """Sum over ``dim`` that is bit-identical under any permutation along ``dim``."""
    return torch.sort(x, dim=dim).values.sum(dim)


def slot_softmax(logits: torch.Tensor, dim: int) -> torch.Tensor:
    # torch.softmax accumulates in slot order; sorting the terms makes the
    # normalizer independent of slot order so equivariance holds bit-exactly.
    shifted = logits - logits.amax(dim=dim, keepdim=True)
    e = torch.exp(shifted)
    return e / symmetric_sum(e, dim).unsqueeze(dim)


class SoftPositionEmbed(nn.Module):
    """Learned embedding of a (y, x, 1-y, 1-x) coordinate grid; resolution-agnostic."""

    def __init__(self, channels: int):
        super().__init__()
        self.proj = nn.Linear(4, channels)

    def forward(self, height: int, width: int) -> torch.Tensor:
        w = self.proj.weight
        ys = torch.linspace(0.0, 1.0, height, dtype=w.dtype, device=w.device)
        xs = torch.linspace(0.0, 1.0, width, dtype=w.dtype, device=w.device)
        gy, gx = torch.meshgrid(ys, xs, indexing="ij")
        grid = torch.stack([gy, gx, 1.0 - gy, 1.0 - gx], dim=-1)
        return self.proj(grid).permute(2, 0, 1)  # (C, H, W)


def _conv(cin: int, cout: int, k: int) -> nn.Conv2d:
    conv = nn.Conv2d(cin, cout, k, padding=k // 2)
    # He init keeps activations from shrinking through the ReLU stacks
    nn.init.kaiming_normal_(conv.weight, nonlinearity="relu")
    nn.init.zeros_(conv.bias)
    return conv


class FlowEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        chans = [3] + [cfg.enc_channels] * cfg.enc_layers
        self.convs = nn.ModuleList(
            _conv(a, b, cfg.enc_kernel) for a, b in zip(chans[:-1], chans[1:])
        )
        self.pos = SoftPositionEmbed(cfg.enc_channels)

    def forward(self, flow_rgb: torch.Tensor) -> torch.Tensor:
        x = flow_rgb
        for conv in self.convs:
            x = F.relu(conv(x))
        return x + self.pos(x.shape[-2], x.shape[-1])


class ConditionEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        chans = [3] + [cfg.cond_channels] * len(cfg.cond_kernels)
        self.convs = nn.ModuleList(
            _conv(a, b, k) for a, b, k in zip(chans[:-1], chans[1:], cfg.cond_kernels)
        )

    def forward(self, image: torch.Tensor) -> list[torch.Tensor]:
        levels = []
        x = image
        for conv in self.convs:
            x = F.relu(conv(x))
            levels.append(x)
        return levels


class SlotDecoder(nn.Module):
    """Spatial-broadcast decoder; layer j also sees condition level j when conditional."""

    def __init__(self, cfg: ModelConfig, out_channels: int):
        super().__init__()
        self.conditional = cfg.conditional
        extra = cfg.cond_channels if cfg.conditional else 0
        hidden = cfg.dec_kernels[:-1]
        self.pos = SoftPositionEmbed(cfg.slot_dim)
        layers = []
        cin = cfg.slot_dim
        for k in hidden:
            layers.append(_conv(cin + extra, cfg.dec_channels, k))
            cin = cfg.dec_channels
        self.convs = nn.ModuleList(layers)
        self.head = _conv(cin, out_channels, cfg.dec_kernels[-1])

    def forward(
        self, slots: torch.Tensor, pyramid: Sequence[torch.Tensor] | None, size: tuple[int, int]
    ) -> torch.Tensor:
        """``slots`` (B, n, K) -> (B, n, out, H, W)."""
        b, n, k = slots.shape
        h, w = size
        x = slots.reshape(b * n, k, 1, 1).expand(b * n, k, h, w)
        x = x + self.pos(h, w)
        for j, conv in enumerate(self.convs):
            if self.conditional:
                level = pyramid[j]
                level = level.unsqueeze(1).expand(b, n, *level.shape[1:]).reshape(b * n, *level.shape[1:])
                x = torch.cat([x, level], dim=1)
            x = F.relu(conv(x))
        out = self.head(x)
        return out.reshape(b, n, *out.shape[1:])


class SlotAttention(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        k = cfg.slot_dim
        self.dim = k
        self.eps = cfg.eps
        self.scale = k ** -0.5
        self.mu = nn.Parameter(torch.randn(k) * 0.1)
        self.log_sigma = nn.Parameter(torch.full((k,), math.log(0.5)))
        self.norm_inputs = nn.LayerNorm(cfg.enc_channels)
        self.norm_slots = nn.LayerNorm(k)
        self.norm_mlp = nn.LayerNorm(k)
        self.to_q = nn.Linear(k, k, bias=False)
        self.to_k = nn.Linear(cfg.enc_channels, k, bias=False)
        self.to_v = nn.Linear(cfg.enc_channels, k, bias=False)
        self.gru = nn.GRUCell(k, k)
        self.mlp = nn.Sequential(nn.Linear(k, cfg.mlp_hidden), nn.ReLU(), nn.Linear(cfg.mlp_hidden, k))

    def keys_values(self, features: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """``features`` (B, H, W, C) -> keys, values of shape (B, HW, K)."""
        x = self.norm_inputs(features.flatten(1, 2))
        return self.to_k(x), self.to_v(x)

    def step(
        self, slots: torch.Tensor, keys: torch.Tensor, values: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        b, n, k = slots.shape
        q = self.to_q(self.norm_slots(slots))
        logits = (q.unsqueeze(2) * keys.unsqueeze(1)).sum(-1) * self.scale  # (B, n, HW)
        attn = slot_softmax(logits, dim=1)
        weights = attn + self.eps
        weights = weights / weights.sum(dim=2, keepdim=True)
        updates = (weights.unsqueeze(-1) * values.unsqueeze(1)).sum(2)  # (B, n, K)
        new = self.gru(updates.reshape(b * n, k), slots.reshape(b * n, k)).reshape(b, n, k)
        new = new + self.mlp(self.norm_mlp(new))
        return new, attn


class ModelOutput(NamedTuple):
    slots: torch.Tensor  # (B, n, K)
    masks: torch.Tensor  # (B, n, H, W)
    recon: torch.Tensor  # (B, 3, H, W)
    slot_flows: torch.Tensor  # (B, n, 3, H, W)
    mask_logits: torch.Tensor  # (B, n, 1, H, W)
    pyramid: list | None


class DivA(nn.Module):
    """Encoder, slot attention and conditional decoder (the min player's parameters)."""

    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = cfg or ModelConfig()
        self.encoder = FlowEncoder(self.cfg)
        self.attention = SlotAttention(self.cfg)
        self.condition = ConditionEncoder(self.cfg) if self.cfg.conditional else None
        self.decoder = SlotDecoder(self.cfg, out_channels=4)
        # instrumentation hook: counts attention iterations actually run
        self.iteration_count = 0

    def _check(self, name: str, x: torch.Tensor) -> None:
        if x.dim() != 4 or x.shape[1] != 3:
            raise InputShapeError(f"{name} must be (B, 3, H, W), got {tuple(x.shape)}")
        check_finite(name, x)

    def encode_features(self, flow_rgb: torch.Tensor) -> torch.Tensor:
        """(B, 3, H, W) -> (B, H, W, C) features with positional embedding added."""
        self._check("flow", flow_rgb)
        return self.encoder(flow_rgb).permute(0, 2, 3, 1)

    def init_slots(
        self, n: int, batch: int = 1, generator: torch.Generator | None = None
    ) -> torch.Tensor:
        if n < 1:
            raise ValueError(f"slot count must be >= 1, got {n}")
        att = self.attention
        noise = torch.randn(
            batch, n, att.dim, generator=generator, dtype=att.mu.dtype, device=att.mu.device
        )
        return att.mu + torch.exp(att.log_sigma) * noise

    def attention_step(
        self, slots: torch.Tensor, features: torch.Tensor, return_attn: bool = False
    ):
        if features.shape[0] != slots.shape[0] or slots.shape[-1] != self.attention.dim:
            raise InputShapeError(
                f"slots {tuple(slots.shape)} inconsistent with features {tuple(features.shape)}"
            )
        keys, values = self.attention.keys_values(features)
        self.iteration_count += 1
        new, attn = self.attention.step(slots, keys, values)
        return (new, attn) if return_attn else new

    def bind_features(
        self,
        features: torch.Tensor,
        n: int | None = None,
        iters: int | None = None,
        generator: torch.Generator | None = None,
        init: torch.Tensor | None = None,
        implicit: bool = False,
    ) -> torch.Tensor:
        """Iterative binding. With ``implicit`` the first ``iters - 1`` steps run
        without gradient tracking and only the last step is differentiated."""
        iters = self.cfg.iters if iters is None else iters
        if iters < 1:
            raise ValueError("iters must be >= 1")
        if init is None:
            if n is None:
                raise ValueError("either n or init slots are required")
            slots = self.init_slots(n, features.shape[0], generator)
        else:
            slots = init
        keys, values = self.attention.keys_values(features)
        if implicit:
            with torch.no_grad():
                for _ in range(iters - 1):
                    slots, _ = self.attention.step(slots, keys, values)
            slots = slots.detach()
            self.iteration_count += iters - 1
            iters = 1
        for _ in range(iters):
            slots, _ = self.attention.step(slots, keys, values)
            self.iteration_count += 1
        return slots

    def bind(self, flow_rgb: torch.Tensor, n: int | None = None, **kw) -> torch.Tensor:
        return self.bind_features(self.encode_features(flow_rgb), n, **kw)

    def encode_condition(self, image: torch.Tensor) -> list[torch.Tensor] | None:
        self._check("image", image)
        if self.condition is None:
            return None
        return self.condition(image)

    def decode_slot(
        self, slots: torch.Tensor, pyramid: list[torch.Tensor] | None, size: tuple[int, int] | None = None
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns per-slot flow (B, n, 3, H, W) and mask logits (B, n, 1, H, W)."""
        size = _resolve_size(pyramid, size)
        out = self.decoder(slots, pyramid, size)
        return out[:, :, :3], out[:, :, 3:]

    @staticmethod
    def compose(
        slot_flows: torch.Tensor, mask_logits: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        if slot_flows.shape[1] == 0:
            raise ValueError("compose needs at least one slot decode")
        masks = slot_softmax(mask_logits, dim=1)  # (B, n, 1, H, W)
        recon = symmetric_sum(slot_flows * masks, dim=1)
        return masks.squeeze(2), recon

    def forward(
        self,
        flow_rgb: torch.Tensor,
        image: torch.Tensor,
        n: int,
        generator: torch.Generator | None = None,
        init: torch.Tensor | None = None,
        iters: int | None = None,
        implicit: bool = False,
    ) -> ModelOutput:
        if image.shape != flow_rgb.shape:
            raise InputShapeError(
                f"image {tuple(image.shape)} and flow {tuple(flow_rgb.shape)} differ in shape"
            )
        slots = self.bind(flow_rgb, n, iters=iters, generator=generator, init=init, implicit=implicit)
        pyramid = self.encode_condition(image)
        flows, logits = self.decode_slot(slots, pyramid, tuple(flow_rgb.shape[-2:]))
        masks, recon = self.compose(flows, logits)
        return ModelOutput(slots, masks, recon, flows, logits, pyramid)


class AdversarialDecoder(nn.Module):
    """Reconstructs the whole flow from a single slot; parameters disjoint from DivA."""

    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = cfg or ModelConfig()
        self.decoder = SlotDecoder(self.cfg, out_channels=3)

    def forward(
        self, slots: torch.Tensor, pyramid: list[torch.Tensor] | None, size: tuple[int, int] | None = None
    ) -> torch.Tensor:
        return self.decoder(slots, pyramid, _resolve_size(pyramid, size))


def adversarial_decode(
    slots: torch.Tensor, pyramid: list[torch.Tensor] | None, adversary: AdversarialDecoder,
    size: tuple[int, int] | None = None,
) -> torch.Tensor:
    return adversary(slots, pyramid, size)


def _resolve_size(pyramid, size):
    if size is not None:
        size = tuple(size)
        if pyramid is not None and tuple(pyramid[0].shape[-2:]) != size:
            raise InputShapeError(f"pyramid size {tuple(pyramid[0].shape[-2:])} != {size}")
        return size
    if pyramid is None:
        raise InputShapeError("output size is required for an unconditional decoder")
    return tuple(pyramid[0].shape[-2:])
