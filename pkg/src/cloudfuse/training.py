"""Losses and the three-stage coarse-to-fine training protocol.

Stages:

``cnp_small``
    noise predictor alone on downscaled images, squared-error noise loss.
``wa_frozen``
    weight allocator alone against the frozen noise predictor, L1 on the fused estimate.
``joint``
    both networks at full size with ``lambda * L_ddpm + L_wa``.

The reference model is frozen throughout.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .checkpoint import save_bundle
from .data import resize_batch
from .networks import DenoiserBundle, param_checksum
from .reference import predict_reference
from .schedule import Schedule, forward_sample, predict_x0

log = logging.getLogger(__name__)

STAGES = ("cnp_small", "wa_frozen", "joint")
TRAINABLE = {"cnp_small": {"cnp"}, "wa_frozen": {"wa"}, "joint": {"cnp", "wa"}}
PREREQUISITES = {"cnp_small": (), "wa_frozen": ("cnp_small",), "joint": ("cnp_small", "wa_frozen")}


class MissingPrerequisite(RuntimeError):
    pass


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass
class StageConfig:
    stage: str
    image_size: int
    batch_size: int = 16
    learning_rate: float = 1e-5
    iterations: int = 1000
    lam: float = 1.0
    clip_denoised: bool = True
    early_stop: bool = False
    plateau_window: int = 200
    plateau_tol: float = 0.01
    log_every: int = 100
    checkpoint_every: int = 0

    def __post_init__(self) -> None:
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.lam <= 0:
            raise ValueError("lambda must be positive")
        if self.batch_size < 1 or self.iterations < 0 or self.image_size < 1:
            raise ValueError("batch_size, iterations and image_size must be positive")

    @property
    def trainable(self) -> set[str]:
        return TRAINABLE[self.stage]


@dataclass
class LossReport:
    stage: str
    values: dict[str, list[float]] = field(default_factory=dict)

    def log(self, **losses: float) -> None:
        for k, v in losses.items():
            self.values.setdefault(k, []).append(float(v))

    def mean(self, name: str, first: Optional[int] = None, last: Optional[int] = None) -> float:
        vals = self.values[name]
        if first is not None:
            vals = vals[:first]
        if last is not None:
            vals = vals[-last:]
        return float(np.mean(vals))

    def __len__(self) -> int:
        return max((len(v) for v in self.values.values()), default=0)

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        names = sorted(self.values)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", *names, *(f"{n}_running" for n in names)])
            running = {n: 0.0 for n in names}
            for i in range(len(self)):
                row = [self.values[n][i] for n in names]
                for n, v in zip(names, row):
                    running[n] += (v - running[n]) / (i + 1)
                w.writerow([i, *row, *(running[n] for n in names)])
        return path


# --------------------------------------------------------------------------- losses


def loss_ddpm(cnp: nn.Module, x0: Tensor, y: Tensor, t: Tensor, eps: Tensor, s: Schedule) -> Tensor:
    """Mean squared error between the true and predicted noise."""
    if x0.shape != eps.shape or x0.shape != y.shape:
        raise ValueError("x0, y and eps must share a shape")
    xt = forward_sample(x0, t, eps, s)
    eps_hat = cnp(torch.cat([xt, y], dim=1), t)
    return F.mse_loss(eps_hat, eps)


def weight_map(wa: nn.Module, x_t: Tensor, y: Tensor, x0_ref: Tensor, t) -> Tensor:
    return wa(torch.cat([x_t, y, x0_ref], dim=1), t)


def loss_wa(
    wa: nn.Module,
    x0_eps: Tensor,
    x0_ref: Tensor,
    x0_true: Tensor,
    w_inputs: tuple[Tensor, Tensor, Tensor],
) -> Tensor:
    """Mean absolute error of the fused estimate; gradients reach only the WA.

    ``w_inputs`` is ``(x_t, y, t)``. ``x0_eps`` is detached here regardless of
    what the caller passes.
    """
    x_t, y, t = w_inputs
    w = weight_map(wa, x_t, y, x0_ref, t)
    fused = (1.0 - w) * x0_eps.detach() + w * x0_ref
    return (x0_true - fused).abs().mean()


def loss_joint(l_ddpm: Tensor | float, l_wa: Tensor | float, lam: float = 1.0) -> Tensor | float:
    return lam * l_ddpm + l_wa


# --------------------------------------------------------------------------- stage runner


def _set_trainable(bundle: DenoiserBundle, trainable: set[str]) -> list[nn.Parameter]:
    params = []
    for name in ("cnp", "wa"):
        net = getattr(bundle, name)
        on = name in trainable
        net.train(on)
        for p in net.parameters():
            p.requires_grad_(on)
        if on:
            params.extend(net.parameters())
    bundle.reference.eval()
    for p in bundle.reference.parameters():
        p.requires_grad_(False)
    return params


def _plateaued(values: list[float], window: int, tol: float) -> bool:
    if len(values) < 2 * window or len(values) % window:
        return False
    prev = float(np.mean(values[-2 * window : -window]))
    cur = float(np.mean(values[-window:]))
    return prev > 0 and (prev - cur) / prev < tol


def run_stage(
    cfg: StageConfig,
    bundle: DenoiserBundle,
    cloudy: Tensor,
    clear: Tensor,
    checkpoint_dir: Optional[str | Path] = None,
    seed: int = 0,
) -> tuple[DenoiserBundle, LossReport]:
    """Train one stage in place and return ``(bundle, report)``.

    Completed stages are tracked in ``bundle.meta["stages"]``; running a stage
    before its prerequisites raises :class:`MissingPrerequisite`.
    """
    done = bundle.meta.setdefault("stages", [])
    missing = [p for p in PREREQUISITES[cfg.stage] if p not in done]
    if missing:
        raise MissingPrerequisite(f"stage {cfg.stage!r} requires completed stage(s) {missing}")
    if len(cloudy) == 0:
        raise ValueError("empty training set")
    if cloudy.shape[1] != bundle.bands:
        raise ValueError(f"dataset has {cloudy.shape[1]} bands, bundle expects {bundle.bands}")

    s = bundle.schedule
    y_all = resize_batch(cloudy, cfg.image_size)
    x0_all = resize_batch(clear, cfg.image_size)
    params = _set_trainable(bundle, cfg.trainable)
    frozen = {n: param_checksum(getattr(bundle, n)) for n in ("cnp", "wa") if n not in cfg.trainable}
    ref_sum = param_checksum(bundle.reference)

    x0_ref_all = None
    if cfg.stage != "cnp_small":
        x0_ref_all = predict_reference(bundle.reference, y_all)

    opt = torch.optim.Adam(params, lr=cfg.learning_rate)
    gen = torch.Generator().manual_seed(seed)
    report = LossReport(cfg.stage)
    n = len(y_all)

    for it in range(cfg.iterations):
        idx = torch.randint(0, n, (cfg.batch_size,), generator=gen)
        x0, y = x0_all[idx], y_all[idx]
        t = torch.randint(1, s.T + 1, (cfg.batch_size,), generator=gen).to(x0.device)
        eps = torch.randn(x0.shape, generator=gen).to(x0.device)

        if cfg.stage == "cnp_small":
            loss = loss_ddpm(bundle.cnp, x0, y, t, eps, s)
            parts = {"ddpm": loss}
        else:
            x0_ref = x0_ref_all[idx]
            xt = forward_sample(x0, t, eps, s)
            if cfg.stage == "wa_frozen":
                with torch.no_grad():
                    eps_hat = bundle.cnp(torch.cat([xt, y], dim=1), t)
            else:
                eps_hat = bundle.cnp(torch.cat([xt, y], dim=1), t)
            x0_eps = predict_x0(xt, eps_hat.detach(), t, s)
            if cfg.clip_denoised:
                x0_eps = x0_eps.clamp(-1, 1)
            l_wa = loss_wa(bundle.wa, x0_eps, x0_ref, x0, (xt, y, t))
            if cfg.stage == "wa_frozen":
                loss = l_wa
                parts = {"wa": l_wa}
            else:
                l_ddpm = F.mse_loss(eps_hat, eps)
                loss = loss_joint(l_ddpm, l_wa, cfg.lam)
                parts = {"ddpm": l_ddpm, "wa": l_wa, "joint": loss}

        if not torch.isfinite(loss):
            raise NonFiniteLoss(f"stage {cfg.stage}: non-finite loss at iteration {it}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        report.log(**{k: v.item() for k, v in parts.items()})

        if cfg.log_every and (it + 1) % cfg.log_every == 0:
            log.info(
                "%s it %d %s",
                cfg.stage,
                it + 1,
                " ".join(f"{k}={report.mean(k, last=cfg.log_every):.4f}" for k in parts),
            )
        primary = "ddpm" if cfg.stage == "cnp_small" else ("wa" if cfg.stage == "wa_frozen" else "joint")
        if cfg.early_stop and _plateaued(report.values[primary], cfg.plateau_window, cfg.plateau_tol):
            log.info("%s plateaued at iteration %d", cfg.stage, it + 1)
            break
        if checkpoint_dir is not None and cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
            Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
            save_bundle(Path(checkpoint_dir) / f"{cfg.stage}_it{it + 1:06d}.pt", bundle)

    for name, before in frozen.items():
        if param_checksum(getattr(bundle, name)) != before:
            raise RuntimeError(f"frozen network {name!r} changed during stage {cfg.stage}")
    if param_checksum(bundle.reference) != ref_sum:
        raise RuntimeError("reference model changed during training")

    _set_trainable(bundle, set())
    if cfg.stage not in done:
        done.append(cfg.stage)
    if checkpoint_dir is not None:
        out = Path(checkpoint_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_bundle(out / f"{cfg.stage}.pt", bundle)
        report.to_csv(out / f"{cfg.stage}_loss.csv")
    return bundle, report


def default_stages(
    image_size: int,
    iterations: tuple[int, int, int] = (2000, 1000, 1000),
    learning_rate: float = 1e-5,
    batch_sizes: tuple[int, int, int] = (64, 16, 16),
    lam: float = 1.0,
) -> list[StageConfig]:
    """Coarse-to-fine schedule: quarter-size CNP pretraining, then full size."""
    small = max(1, image_size // 4)
    return [
        StageConfig("cnp_small", small, batch_sizes[0], learning_rate, iterations[0]),
        StageConfig("wa_frozen", image_size, batch_sizes[1], learning_rate, iterations[1]),
        StageConfig("joint", image_size, batch_sizes[2], learning_rate, iterations[2], lam=lam),
    ]


def is_finite_report(report: LossReport) -> bool:
    return all(math.isfinite(v) for vals in report.values.values() for v in vals)
