"""PSNR, SSIM and a pluggable perceptual distance."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

log = logging.getLogger(__name__)

PSNR_CAP = 100.0


def _as_tensor(x) -> Tensor:
    return torch.as_tensor(np.asarray(x) if not isinstance(x, Tensor) else x).double()


def psnr(a, b, peak: float = 1.0) -> float:
    """``10 log10(peak^2 / MSE)`` over all bands and pixels, capped at 100 dB."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if peak <= 0:
        raise ValueError("peak must be positive")
    mse = float(((a - b) ** 2).mean())
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak**2 / mse))


def _gaussian_window(size: int, sigma: float) -> Tensor:
    coords = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-(coords**2) / (2 * sigma**2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim(
    a,
    b,
    window: int = 11,
    sigma: float = 1.5,
    k1: float = 0.01,
    k2: float = 0.03,
    data_range: float = 1.0,
) -> float:
    """Mean SSIM with a Gaussian window, averaged over bands.

    Inputs are ``(H, W)`` or ``(C, H, W)``; local statistics are taken over
    fully-contained windows only.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.dim() == 2:
        a, b = a[None], b[None]
    if min(a.shape[-2:]) < window:
        raise ValueError(f"image {tuple(a.shape[-2:])} smaller than {window}x{window} window")
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    kernel = _gaussian_window(window, sigma)[None, None]
    x, y = a[:, None], b[:, None]  # bands as batch

    def filt(z: Tensor) -> Tensor:
        return F.conv2d(z, kernel)

    mu_x, mu_y = filt(x), filt(y)
    sxx = filt(x * x) - mu_x**2
    syy = filt(y * y) - mu_y**2
    sxy = filt(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (sxx + syy + c2)
    return float((num / den).mean(dim=(1, 2, 3)).mean())


# --------------------------------------------------------------------------- perceptual

UNAVAILABLE = None

PerceptualBackend = Callable[[Tensor, Tensor], float]
_BACKENDS: dict[str, Callable[[], PerceptualBackend]] = {}


def register_backend(name: str, factory: Callable[[], PerceptualBackend]) -> None:
    """Register a perceptual backend factory (called lazily on first use)."""
    _BACKENDS[name] = factory


def _lpips_factory() -> PerceptualBackend:
    import lpips  # optional; needs pretrained weights on disk

    net = lpips.LPIPS(net="alex", verbose=False).eval()

    @torch.no_grad()
    def score(a: Tensor, b: Tensor) -> float:
        # LPIPS expects RGB in [-1, 1].
        a3, b3 = a[:3].float()[None], b[:3].float()[None]
        return float(net(a3, b3))

    return score


register_backend("lpips", _lpips_factory)

_loaded: dict[str, PerceptualBackend] = {}


def perceptual_distance(a: Tensor, b: Tensor, backend: Optional[str]) -> Optional[float]:
    """Backend score, or ``None`` (unavailable) when no backend is configured or it fails."""
    if backend is None:
        return UNAVAILABLE
    try:
        if backend not in _loaded:
            if backend not in _BACKENDS:
                raise KeyError(f"unknown perceptual backend {backend!r}")
            _loaded[backend] = _BACKENDS[backend]()
        if torch.equal(torch.as_tensor(a), torch.as_tensor(b)):
            return 0.0
        return float(_loaded[backend](torch.as_tensor(a), torch.as_tensor(b)))
    except Exception as exc:  # surfaced as unavailable, never as a made-up number
        log.warning("perceptual backend %r unavailable: %s", backend, exc)
        return UNAVAILABLE


# --------------------------------------------------------------------------- reports


@dataclass
class MetricReport:
    method: str
    ids: list[str] = field(default_factory=list)
    psnr: list[float] = field(default_factory=list)
    ssim: list[float] = field(default_factory=list)
    lpips: Optional[list[float]] = None
    peak: float = 1.0

    def add(self, sample_id: str, p: float, s: float, l: Optional[float] = None) -> None:
        self.ids.append(sample_id)
        self.psnr.append(p)
        self.ssim.append(s)
        if l is not None:
            self.lpips = (self.lpips or []) + [l]

    def summary(self) -> dict:
        row = {
            "method": self.method,
            "n": len(self.ids),
            "psnr": float(np.mean(self.psnr)) if self.psnr else float("nan"),
            "ssim": float(np.mean(self.ssim)) if self.ssim else float("nan"),
            "peak": self.peak,
        }
        if self.lpips is not None and len(self.lpips) == len(self.ids):
            row["lpips"] = float(np.mean(self.lpips))
        return row


def evaluate_images(
    method: str,
    preds: Tensor,
    targets: Tensor,
    ids: Optional[list[str]] = None,
    lpips_backend: Optional[str] = None,
) -> MetricReport:
    """Score normalized ``[-1, 1]`` batches on the unit scale (peak 1)."""
    if preds.shape != targets.shape:
        raise ValueError("prediction/target shape mismatch")
    ids = ids or [str(i) for i in range(len(preds))]
    report = MetricReport(method, peak=1.0)
    for i, (p, t) in enumerate(zip(preds, targets)):
        pu, tu = (p.clamp(-1, 1) + 1) / 2, (t.clamp(-1, 1) + 1) / 2
        lp = perceptual_distance(p, t, lpips_backend)
        report.add(ids[i], psnr(pu, tu, 1.0), ssim(pu, tu, data_range=1.0), lp)
    return report
