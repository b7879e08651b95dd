"""Time-conditioned U-Nets for the noise predictor (CNP) and weight allocator (WA)."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import TYPE_CHECKING, Optional

import torch
import torch.nn.functional as F
from torch import Tensor, nn

if TYPE_CHECKING:
    from .reference import ReferenceModel
    from .schedule import Schedule


@dataclass(frozen=True)
class UNetSpec:
    base_channels: int = 96
    depth: int = 2
    channel_multipliers: tuple[int, ...] = (1, 1, 2, 2, 3)
    attention_resolutions: tuple[int, ...] = (4, 8)
    heads: int = 4
    dropout: float = 0.0

    def __post_init__(self) -> None:
        if self.base_channels <= 0:
            raise ValueError("base_channels must be positive")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if not self.channel_multipliers:
            raise ValueError("channel_multipliers must be nonempty")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.heads < 1:
            raise ValueError("heads must be >= 1")
        # Lists sneak in from TOML/JSON; keep the dataclass hashable.
        object.__setattr__(self, "channel_multipliers", tuple(self.channel_multipliers))
        object.__setattr__(self, "attention_resolutions", tuple(self.attention_resolutions))

    @property
    def size_multiple(self) -> int:
        return 2 ** (len(self.channel_multipliers) - 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_multipliers"] = list(self.channel_multipliers)
        d["attention_resolutions"] = list(self.attention_resolutions)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "UNetSpec":
        return cls(**d)


# Table-VI style presets plus a desk-scale variant.
CNP_FULL = UNetSpec(96, 2, (1, 1, 2, 2, 3), (4, 8), 4, 0.0)
WA_FULL = UNetSpec(64, 2, (1, 1, 2), (4, 8), 1, 0.0)
CNP_TINY = UNetSpec(32, 1, (1, 2, 2), (4,), 1, 0.0)
WA_TINY = UNetSpec(32, 1, (1, 2), (4,), 1, 0.0)

PRESETS = {"cnp_full": CNP_FULL, "wa_full": WA_FULL, "cnp_tiny": CNP_TINY, "wa_tiny": WA_TINY}


def time_embedding(t: Tensor | int, dim: int, max_period: float = 10000.0) -> Tensor:
    """Sinusoidal embedding, ``[cos(t f_k), sin(t f_k)]`` with geometric frequencies."""
    if dim % 2:
        raise ValueError(f"embedding dim must be even, got {dim}")
    t = torch.as_tensor(t, dtype=torch.float32)
    if t.dim() == 0:
        t = t[None]
    if (t < 0).any():
        raise ValueError("timesteps must be >= 0")
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs.to(t.device)[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def _groups(ch: int) -> int:
    for g in (32, 16, 8, 4, 2, 1):
        if ch % g == 0:
            return g
    return 1


def _norm(ch: int) -> nn.GroupNorm:
    return nn.GroupNorm(_groups(ch), ch)


def _zero(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        nn.init.zeros_(p)
    return module


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, emb_dim: int, dropout: float) -> None:
        super().__init__()
        self.in_layers = nn.Sequential(_norm(in_ch), nn.SiLU(), nn.Conv2d(in_ch, out_ch, 3, padding=1))
        self.emb_layers = nn.Sequential(nn.SiLU(), nn.Linear(emb_dim, out_ch))
        self.out_layers = nn.Sequential(
            _norm(out_ch),
            nn.SiLU(),
            nn.Dropout(dropout),
            _zero(nn.Conv2d(out_ch, out_ch, 3, padding=1)),
        )
        self.skip = nn.Identity() if in_ch == out_ch else nn.Conv2d(in_ch, out_ch, 1)

    def forward(self, x: Tensor, emb: Tensor) -> Tensor:
        h = self.in_layers(x)
        h = h + self.emb_layers(emb)[:, :, None, None]
        return self.skip(x) + self.out_layers(h)


class AttentionBlock(nn.Module):
    def __init__(self, ch: int, heads: int) -> None:
        super().__init__()
        if ch % heads:
            raise ValueError(f"{ch} channels not divisible by {heads} heads")
        self.heads = heads
        self.norm = _norm(ch)
        self.qkv = nn.Conv1d(ch, 3 * ch, 1)
        self.proj = _zero(nn.Conv1d(ch, ch, 1))

    def forward(self, x: Tensor) -> Tensor:
        b, c, h, w = x.shape
        qkv = self.qkv(self.norm(x).reshape(b, c, h * w))
        q, k, v = qkv.reshape(b, 3, self.heads, c // self.heads, h * w).unbind(1)
        # (b, heads, tokens, head_dim)
        q, k, v = (u.transpose(-1, -2) for u in (q, k, v))
        a = F.scaled_dot_product_attention(q, k, v)
        a = a.transpose(-1, -2).reshape(b, c, h * w)
        return x + self.proj(a).reshape(b, c, h, w)


class Downsample(nn.Module):
    def __init__(self, ch: int) -> None:
        super().__init__()
        self.op = nn.Conv2d(ch, ch, 3, stride=2, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        return self.op(x)


class Upsample(nn.Module):
    def __init__(self, ch: int) -> None:
        super().__init__()
        self.conv = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class _Level(nn.Module):
    """A residual block optionally followed by self-attention."""

    def __init__(self, res: ResBlock, attn: Optional[AttentionBlock]) -> None:
        super().__init__()
        self.res = res
        self.attn = attn

    def forward(self, x: Tensor, emb: Tensor) -> Tensor:
        x = self.res(x, emb)
        return self.attn(x) if self.attn is not None else x


class UNet(nn.Module):
    """U-shaped encoder/decoder with the timestep embedding injected into every residual block."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        spec: UNetSpec,
        zero_out: bool = True,
        squash: Optional[str] = None,
    ) -> None:
        super().__init__()
        self.spec = spec
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.squash = squash
        ch = spec.base_channels
        self.emb_dim = emb_dim = 4 * ch
        self.time_mlp = nn.Sequential(nn.Linear(ch, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))

        self.inp = nn.Conv2d(in_channels, ch, 3, padding=1)
        self.down = nn.ModuleList()
        self.downsamplers = nn.ModuleList()
        skips = [ch]
        cur = ch
        ds = 1
        for level, mult in enumerate(spec.channel_multipliers):
            blocks = nn.ModuleList()
            for _ in range(spec.depth):
                out = spec.base_channels * mult
                attn = AttentionBlock(out, spec.heads) if ds in spec.attention_resolutions else None
                blocks.append(_Level(ResBlock(cur, out, emb_dim, spec.dropout), attn))
                cur = out
                skips.append(cur)
            self.down.append(blocks)
            if level != len(spec.channel_multipliers) - 1:
                self.downsamplers.append(Downsample(cur))
                skips.append(cur)
                ds *= 2
            else:
                self.downsamplers.append(nn.Identity())

        self.mid1 = ResBlock(cur, cur, emb_dim, spec.dropout)
        self.mid_attn = AttentionBlock(cur, spec.heads)
        self.mid2 = ResBlock(cur, cur, emb_dim, spec.dropout)

        self.up = nn.ModuleList()
        self.upsamplers = nn.ModuleList()
        for level, mult in reversed(list(enumerate(spec.channel_multipliers))):
            blocks = nn.ModuleList()
            for _ in range(spec.depth + 1):
                out = spec.base_channels * mult
                attn = AttentionBlock(out, spec.heads) if ds in spec.attention_resolutions else None
                blocks.append(_Level(ResBlock(cur + skips.pop(), out, emb_dim, spec.dropout), attn))
                cur = out
            self.up.append(blocks)
            if level != 0:
                self.upsamplers.append(Upsample(cur))
                ds //= 2
            else:
                self.upsamplers.append(nn.Identity())

        out_conv = nn.Conv2d(cur, out_channels, 3, padding=1)
        self.out = nn.Sequential(_norm(cur), nn.SiLU(), _zero(out_conv) if zero_out else out_conv)

    def forward(self, x: Tensor, t: Tensor | int) -> Tensor:
        b, _, h, w = x.shape
        m = self.spec.size_multiple
        if h % m or w % m:
            raise ValueError(f"spatial size {h}x{w} not divisible by {m}")
        t = torch.as_tensor(t, device=x.device)
        if t.dim() == 0:
            t = t.expand(b)
        emb = self.time_mlp(time_embedding(t, self.spec.base_channels).to(x.dtype))

        hs = [self.inp(x)]
        h_ = hs[-1]
        for blocks, downsample in zip(self.down, self.downsamplers):
            for blk in blocks:
                h_ = blk(h_, emb)
                hs.append(h_)
            if not isinstance(downsample, nn.Identity):
                h_ = downsample(h_)
                hs.append(h_)
        h_ = self.mid2(self.mid_attn(self.mid1(h_, emb)), emb)
        for blocks, upsample in zip(self.up, self.upsamplers):
            for blk in blocks:
                h_ = blk(torch.cat([h_, hs.pop()], dim=1), emb)
            h_ = upsample(h_)
        out = self.out(h_)
        if self.squash == "sigmoid":
            out = torch.sigmoid(out)
        return out


def build_cnp(C: int, spec: UNetSpec = CNP_FULL) -> UNet:
    """Noise predictor: input is ``cat(x_t, y)`` (2C channels), output C-channel noise."""
    if C < 1:
        raise ValueError("band count must be >= 1")
    return UNet(2 * C, C, spec, zero_out=True)


def build_wa(C: int, spec: UNetSpec = WA_FULL) -> UNet:
    """Weight allocator: input is ``cat(x_t, y, x0_ref)`` (3C channels), output W in [0, 1]."""
    if C < 1:
        raise ValueError("band count must be >= 1")
    return UNet(3 * C, C, spec, zero_out=False, squash="sigmoid")


def count_parameters(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


def param_checksum(net: nn.Module) -> str:
    """Hash of raw parameter bytes; equal checksums mean bitwise-equal weights."""
    import hashlib

    h = hashlib.sha256()
    for name, p in sorted(net.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


@dataclass
class DenoiserBundle:
    """Everything needed at inference: noise predictor, weight allocator, frozen reference."""

    cnp: UNet
    wa: UNet
    reference: "ReferenceModel"
    schedule: "Schedule"
    bands: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.cnp.out_channels != self.bands or self.cnp.in_channels != 2 * self.bands:
            raise ValueError("CNP band count does not match bundle")
        if self.wa.out_channels != self.bands or self.wa.in_channels != 3 * self.bands:
            raise ValueError("WA band count does not match bundle")
        if self.reference.bands is not None and self.reference.bands != self.bands:
            raise ValueError("reference band count does not match bundle")

    def to(self, device) -> "DenoiserBundle":
        self.cnp.to(device)
        self.wa.to(device)
        self.reference.to(device)
        return self

    def eval(self) -> "DenoiserBundle":
        self.cnp.eval()
        self.wa.eval()
        self.reference.eval()
        return self
