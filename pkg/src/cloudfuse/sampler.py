"""Reverse-process inference with reference-prior fusion.

Each step predicts noise with the CNP, recovers ``x0_eps``, asks the WA for a
weight map against the (once-computed) reference prediction, clamps it to
``[eta, 1]``, fuses, and advances with either the ancestral posterior or a
deterministic DDIM jump.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import torch
from torch import Tensor

from .fusion import clamp_weight, fuse
from .networks import DenoiserBundle, UNet
from .reference import predict_reference
from .schedule import Schedule, ddim_step, ddim_timesteps, posterior_step, predict_x0

MODES = ("ancestral", "ddim")


@dataclass
class SamplerConfig:
    mode: str = "ddim"
    ddim_steps: int = 50
    eta: float = 0.3
    fusion_enabled: bool = True
    seed: int = 0
    record_trajectory: bool = False
    clip_denoised: bool = True
    noise_coeff: str = "sqrt_beta_tilde"
    snapshot_steps: tuple[int, ...] = ()
    # Debug hook: replace the WA output with a constant weight.
    force_weight: Optional[float] = None

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0.0 <= self.eta < 1.0:
            raise ValueError(f"eta must lie in [0, 1), got {self.eta}")
        if self.ddim_steps < 1:
            raise ValueError("ddim_steps must be >= 1")
        self.snapshot_steps = tuple(self.snapshot_steps)


@dataclass
class TrajectoryRecord:
    steps: list[int] = field(default_factory=list)
    w_mean: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)
    snapshots: dict[int, Tensor] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.steps)

    def to_dict(self) -> dict:
        return {
            "steps": self.steps,
            "w_mean": self.w_mean,
            "seconds": self.seconds,
            "snapshot_steps": sorted(self.snapshots),
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def step_pairs(schedule: Schedule, cfg: SamplerConfig) -> list[tuple[int, int]]:
    """``(t, t_prev)`` transitions executed by the sampler, in order."""
    if cfg.mode == "ancestral":
        return [(t, t - 1) for t in range(schedule.T, 0, -1)]
    if cfg.ddim_steps > schedule.T:
        raise ValueError(f"ddim_steps ({cfg.ddim_steps}) exceeds T ({schedule.T})")
    ts = ddim_timesteps(schedule.T, cfg.ddim_steps)
    return list(zip(ts, ts[1:] + [0]))


def _advance(
    x0t: Tensor,
    x_t: Tensor,
    eps_hat: Tensor,
    t: int,
    t_prev: int,
    schedule: Schedule,
    cfg: SamplerConfig,
    generator: Optional[torch.Generator],
) -> Tensor:
    if cfg.mode == "ddim":
        return ddim_step(x0t, eps_hat, t, t_prev, schedule)
    if t_prev != t - 1:
        raise ValueError("ancestral sampling moves one step at a time")
    if t > 1:
        z = torch.randn(x_t.shape, generator=generator, dtype=x_t.dtype).to(x_t.device)
    else:
        z = torch.zeros_like(x_t)
    return posterior_step(x0t, x_t, t, z, schedule, cfg.noise_coeff)


@torch.no_grad()
def denoise_step(
    bundle: DenoiserBundle,
    x_t: Tensor,
    y: Tensor,
    x0_ref: Optional[Tensor],
    t: int,
    t_prev: int,
    cfg: SamplerConfig,
    generator: Optional[torch.Generator] = None,
    info: Optional[dict] = None,
) -> Tensor:
    """One transition ``x_t -> x_{t_prev}``; fills ``info`` with the weight map and x0 estimates."""
    s = bundle.schedule
    eps_hat = bundle.cnp(torch.cat([x_t, y], dim=1), t)
    x0_eps = predict_x0(x_t, eps_hat, t, s)
    if cfg.clip_denoised:
        x0_eps = x0_eps.clamp(-1, 1)

    if cfg.fusion_enabled:
        if x0_ref is None:
            raise ValueError("fusion enabled but no reference prediction supplied")
        if cfg.force_weight is not None:
            w_raw = torch.full_like(x_t, cfg.force_weight)
        else:
            w_raw = bundle.wa(torch.cat([x_t, y, x0_ref], dim=1), t)
        w = clamp_weight(w_raw, cfg.eta)
        x0t = fuse(x0_eps, x0_ref, w)
        if cfg.clip_denoised:
            x0t = x0t.clamp(-1, 1)
    else:
        w = None
        x0t = x0_eps

    if info is not None:
        info["w"] = w
        info["x0_eps"] = x0_eps
        info["x0t"] = x0t
    return _advance(x0t, x_t, eps_hat, t, t_prev, s, cfg, generator)


@torch.no_grad()
def sample(
    bundle: DenoiserBundle, y: Tensor, cfg: SamplerConfig, x0_ref: Optional[Tensor] = None
) -> tuple[Tensor, TrajectoryRecord]:
    """Run the full reverse process for a batch of cloudy images ``y``.

    ``x0_ref`` may be passed in to reuse a cached reference prediction;
    otherwise it is computed once here.
    """
    if y.dim() != 4:
        raise ValueError(f"expected (B, C, H, W), got {tuple(y.shape)}")
    if y.shape[1] != bundle.bands:
        raise ValueError(f"bundle expects {bundle.bands} bands, got {y.shape[1]}")
    pairs = step_pairs(bundle.schedule, cfg)
    bundle.eval()

    gen = torch.Generator().manual_seed(cfg.seed)
    x = torch.randn(y.shape, generator=gen, dtype=y.dtype).to(y.device)
    if cfg.fusion_enabled and x0_ref is None:
        x0_ref = predict_reference(bundle.reference, y)

    record = TrajectoryRecord()
    for t, t_prev in pairs:
        start = time.perf_counter()
        info: dict = {}
        x = denoise_step(bundle, x, y, x0_ref, t, t_prev, cfg, gen, info)
        record.steps.append(t)
        record.w_mean.append(info["w"].mean if info["w"] is not None else float("nan"))
        record.seconds.append(time.perf_counter() - start)
        if cfg.record_trajectory and t in cfg.snapshot_steps:
            record.snapshots[t] = info["x0t"].clone()
    return x.clamp(-1, 1), record


@torch.no_grad()
def sample_vanilla(
    cnp: UNet,
    y: Tensor,
    schedule: Schedule,
    mode: str = "ddim",
    ddim_steps: int = 50,
    seed: int = 0,
    clip_denoised: bool = True,
    noise_coeff: str = "sqrt_beta_tilde",
) -> Tensor:
    """Plain conditional diffusion sampler with no reference prior or weighting."""
    cnp.eval()
    gen = torch.Generator().manual_seed(seed)
    x = torch.randn(y.shape, generator=gen, dtype=y.dtype).to(y.device)
    if mode == "ddim":
        ts = ddim_timesteps(schedule.T, ddim_steps)
        pairs = list(zip(ts, ts[1:] + [0]))
    else:
        pairs = [(t, t - 1) for t in range(schedule.T, 0, -1)]
    for t, t_prev in pairs:
        eps_hat = cnp(torch.cat([x, y], dim=1), t)
        x0 = predict_x0(x, eps_hat, t, schedule)
        if clip_denoised:
            x0 = x0.clamp(-1, 1)
        if mode == "ddim":
            x = ddim_step(x0, eps_hat, t, t_prev, schedule)
        else:
            z = torch.randn(x.shape, generator=gen, dtype=x.dtype).to(x.device) if t > 1 else torch.zeros_like(x)
            x = posterior_step(x0, x, t, z, schedule, noise_coeff)
    return x.clamp(-1, 1)

