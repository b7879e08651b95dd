"""Pixel-wise blending of the diffusion estimate with the reference prior."""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor


@dataclass(frozen=True)
class FusionConfig:
    eta: float = 0.3
    enabled: bool = True

    def __post_init__(self) -> None:
        _check_eta(self.eta)


@dataclass
class WeightMap:
    """Per-pixel, per-channel trust in the reference prediction."""

    w: Tensor
    eta: float = 0.0
    clamped: bool = False

    @property
    def mean(self) -> float:
        return float(self.w.mean())


def _check_eta(eta: float) -> None:
    if not 0.0 <= eta < 1.0:
        raise ValueError(f"eta must lie in [0, 1), got {eta}")


def clamp_weight(w_raw: WeightMap | Tensor, eta: float) -> WeightMap:
    """Raise every weight to at least ``eta``; ``eta = 0`` is a no-op."""
    _check_eta(eta)
    w = w_raw.w if isinstance(w_raw, WeightMap) else w_raw
    if eta == 0.0:
        return WeightMap(w, eta=0.0, clamped=True)
    return WeightMap(torch.clamp(w, min=eta), eta=eta, clamped=True)


def fuse(x0_eps: Tensor, x0_ref: Tensor, w: WeightMap | Tensor) -> Tensor:
    """``(1 - W) * x0_eps + W * x0_ref`` elementwise."""
    w = w.w if isinstance(w, WeightMap) else w
    if not (x0_eps.shape == x0_ref.shape == w.shape):
        raise ValueError(
            f"shape mismatch: x0_eps {tuple(x0_eps.shape)}, x0_ref {tuple(x0_ref.shape)}, "
            f"w {tuple(w.shape)}"
        )
    return (1.0 - w) * x0_eps + w * x0_ref
