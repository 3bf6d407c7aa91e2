"""Reconstruction / separation loss, its min-max split, and the mask-entropy diagnostic."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .core import symmetric_sum


class SimplexViolation(ValueError):
    pass


@dataclass
class LossBreakdown:
    reconstruction: torch.Tensor
    separation: torch.Tensor
    total: torch.Tensor
    lam: float
    n: int

    def as_dict(self) -> dict:
        return {
            "reconstruction": float(self.reconstruction.detach()),
            "separation": float(self.separation.detach()),
            "total": float(self.total.detach()),
            "lambda": self.lam,
            "n": self.n,
        }


def mse(a, b, weight=None) -> torch.Tensor:
    """Mean over every element of ``weight * (a - b) ** 2``.

    ``a``/``b`` are ``(..., C, H, W)``; ``weight`` is ``(..., H, W)`` and is
    broadcast over channels. The mean divides by the full element count, not
    by the weight mass.
    """
    a = torch.as_tensor(a)
    b = torch.as_tensor(b, dtype=a.dtype)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    sq = (a - b) ** 2
    if weight is not None:
        weight = torch.as_tensor(weight, dtype=a.dtype)
        if weight.shape != a.shape[:-3] + a.shape[-2:]:
            raise ValueError(f"weight shape {tuple(weight.shape)} does not match {tuple(a.shape)}")
        sq = sq * weight.unsqueeze(-3)
    return sq.mean()


def diva_loss(
    u: torch.Tensor,
    slot_flows: torch.Tensor,
    adv_flows: torch.Tensor,
    masks: torch.Tensor,
    lam: float,
) -> LossBreakdown:
    """``u`` (B, 3, H, W); ``slot_flows``/``adv_flows`` (B, n, 3, H, W); ``masks`` (B, n, H, W).

    total = mse(u, sum_i u_i * m_i) - lam * mean_i mse(u, adv_i, weight=1 - m_i)
    """
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    n = masks.shape[1]
    if slot_flows.shape[1] != n or adv_flows.shape[1] != n:
        raise ValueError("slot counts of decodes, adversary flows and masks differ")
    recon = symmetric_sum(slot_flows * masks.unsqueeze(2), dim=1)
    reconstruction = mse(u, recon)
    target = u.unsqueeze(1).expand_as(adv_flows)
    # mean over the slot axis equals (1/n) * sum_i of per-slot means
    separation = mse(target, adv_flows, weight=1.0 - masks)
    total = reconstruction - lam * separation
    return LossBreakdown(reconstruction, separation, total, float(lam), int(n))


def mask_entropy(masks, dim: int = -3, per_sample: bool = False, tol: float = 1e-5):
    """Mean per-pixel Shannon entropy ``-sum_i m_i log m_i`` (0 log 0 := 0).

    ``masks`` has the slot axis at ``dim`` (default: ``(n, H, W)`` or
    ``(B, n, H, W)``). With ``per_sample`` a ``(B,)`` array is returned.
    """
    m = torch.as_tensor(np.asarray(masks) if not torch.is_tensor(masks) else masks).detach().double()
    err = (m.sum(dim) - 1.0).abs().max()
    if err > tol or (m < -tol).any():
        raise SimplexViolation(f"masks are not a per-pixel simplex (max deviation {float(err):.3g})")
    logm = torch.where(m > 0, torch.log(m.clamp_min(1e-300)), torch.zeros_like(m))
    h = -(m * logm).sum(dim)
    if per_sample:
        return h.flatten(1).mean(1).numpy()
    return float(h.mean())
