"""Closed-form diffusion math.

Timesteps are 1-indexed (``1..T``). Index 0 is the clean-data endpoint with
``alpha_bar[0] == 1`` so the final ancestral step and the last DDIM jump are
well defined. All operations are pure functions on tensors; ``t`` may be a
python int or a per-sample integer tensor of shape ``(B,)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import numpy as np
import torch
from torch import Tensor

Step = Union[int, Tensor]

NOISE_COEFFS = ("sqrt_beta_tilde", "beta_tilde")


@dataclass(frozen=True)
class Schedule:
    T: int
    kind: str
    beta_start: float
    beta_end: float
    beta: np.ndarray = field(repr=False)
    alpha: np.ndarray = field(repr=False)
    alpha_bar: np.ndarray = field(repr=False)
    beta_tilde: np.ndarray = field(repr=False)

    # Padded views, index t in 0..T; index 0 is the ``alpha_bar_0 = 1`` convention.
    @property
    def alpha_bar_full(self) -> np.ndarray:
        return np.concatenate([[1.0], self.alpha_bar])

    def ab(self, t: int) -> float:
        """``alpha_bar_t`` for ``0 <= t <= T``."""
        if not 0 <= t <= self.T:
            raise ValueError(f"step {t} outside [0, {self.T}]")
        return 1.0 if t == 0 else float(self.alpha_bar[t - 1])

    def describe(self) -> dict:
        return {
            "T": self.T,
            "kind": self.kind,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
        }

    @classmethod
    def from_description(cls, d: dict) -> "Schedule":
        return make_schedule(int(d["T"]), d["kind"], float(d["beta_start"]), float(d["beta_end"]))


def make_schedule(
    T: int = 1000, kind: str = "linear", beta_start: float = 1e-4, beta_end: float = 0.02
) -> Schedule:
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    if kind == "linear":
        beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    elif kind == "quadratic":
        beta = np.linspace(beta_start**0.5, beta_end**0.5, T, dtype=np.float64) ** 2
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")

    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    alpha_bar_prev = np.concatenate([[1.0], alpha_bar[:-1]])
    beta_tilde = (1.0 - alpha_bar_prev) / (1.0 - alpha_bar) * beta
    for arr in (beta, alpha, alpha_bar, beta_tilde):
        arr.setflags(write=False)
    return Schedule(T, kind, float(beta_start), float(beta_end), beta, alpha, alpha_bar, beta_tilde)


def _check_step(t: Step, s: Schedule, lo: int = 1) -> None:
    if isinstance(t, Tensor):
        if t.numel() and (int(t.min()) < lo or int(t.max()) > s.T):
            raise ValueError(f"steps must lie in [{lo}, {s.T}]")
    elif not lo <= int(t) <= s.T:
        raise ValueError(f"step {t} outside [{lo}, {s.T}]")


def _coef(values: np.ndarray, t: Step, like: Tensor) -> Tensor:
    """Look up ``values[t]`` and shape it to broadcast against ``like``."""
    if isinstance(t, Tensor):
        out = torch.as_tensor(values, dtype=torch.float64)[t.long().cpu()]
        return out.to(like.dtype).to(like.device).view(-1, *([1] * (like.dim() - 1)))
    return torch.tensor(float(values[int(t)]), dtype=like.dtype, device=like.device)


def _same_shape(*xs: Tensor) -> None:
    shape = xs[0].shape
    for x in xs[1:]:
        if x.shape != shape:
            raise ValueError(f"shape mismatch: {tuple(shape)} vs {tuple(x.shape)}")


def forward_sample(x0: Tensor, t: Step, eps: Tensor, s: Schedule) -> Tensor:
    """Draw ``x_t`` from ``q(x_t | x_0)`` given the noise explicitly."""
    _same_shape(x0, eps)
    _check_step(t, s)
    ab = s.alpha_bar_full
    return _coef(np.sqrt(ab), t, x0) * x0 + _coef(np.sqrt(1.0 - ab), t, x0) * eps


def predict_x0(xt: Tensor, eps_hat: Tensor, t: Step, s: Schedule) -> Tensor:
    """Invert the forward map using predicted noise."""
    _same_shape(xt, eps_hat)
    _check_step(t, s)
    ab = s.alpha_bar_full
    return (xt - _coef(np.sqrt(1.0 - ab), t, xt) * eps_hat) / _coef(np.sqrt(ab), t, xt)


def posterior_step(
    x0t: Tensor,
    xt: Tensor,
    t: Step,
    z: Tensor,
    s: Schedule,
    noise_coeff: str = "sqrt_beta_tilde",
) -> Tensor:
    """One ancestral reverse transition ``x_t -> x_{t-1}``.

    ``noise_coeff`` selects between the standard deviation ``sqrt(beta_tilde)``
    (DDPM posterior) and the literal ``beta_tilde`` multiplier.
    """
    _same_shape(x0t, xt, z)
    _check_step(t, s)
    if noise_coeff not in NOISE_COEFFS:
        raise ValueError(f"noise_coeff must be one of {NOISE_COEFFS}")
    ab = s.alpha_bar_full
    ab_prev = np.concatenate([[1.0], ab[:-1]])
    beta = np.concatenate([[0.0], s.beta])
    alpha = np.concatenate([[1.0], s.alpha])
    with np.errstate(divide="ignore", invalid="ignore"):
        c0 = np.sqrt(ab_prev) * beta / (1.0 - ab)
        ct = np.sqrt(alpha) * (1.0 - ab_prev) / (1.0 - ab)
    bt = np.concatenate([[0.0], s.beta_tilde])
    sigma = np.sqrt(bt) if noise_coeff == "sqrt_beta_tilde" else bt
    # beta_tilde_1 == 0, so the t == 1 step adds no noise regardless of z.
    return _coef(c0, t, xt) * x0t + _coef(ct, t, xt) * xt + _coef(sigma, t, xt) * z


def ddim_step(x0t: Tensor, eps_hat: Tensor, t: int, t_prev: int, s: Schedule) -> Tensor:
    """Deterministic DDIM jump from ``t`` to ``t_prev`` (``t_prev = 0`` returns ``x0t``)."""
    _same_shape(x0t, eps_hat)
    if t_prev >= t:
        raise ValueError(f"t_prev ({t_prev}) must be < t ({t})")
    _check_step(t, s)
    if t_prev < 0:
        raise ValueError("t_prev must be >= 0")
    if t_prev == 0:
        return x0t.clone()
    ab_prev = s.ab(t_prev)
    return ab_prev**0.5 * x0t + (1.0 - ab_prev) ** 0.5 * eps_hat


def ddim_timesteps(T: int, steps: int) -> list[int]:
    """Uniformly strided descending timesteps in ``[1, T]`` ending at 1."""
    if not 1 <= steps <= T:
        raise ValueError(f"ddim steps must lie in [1, {T}], got {steps}")
    ts = np.linspace(T, 1, steps).round().astype(int)
    return [int(v) for v in ts]
