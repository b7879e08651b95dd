"""Paired cloudy/clear data: ingestion, synthesis, splitting and statistics.

Images are ``(C, H, W)`` float32 tensors normalized to ``[-1, 1]``; cloud masks
use 0 for cloudy and 1 for cloud-free pixels.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

IMAGE_SUFFIXES = (".tif", ".tiff", ".png", ".jpg", ".jpeg")


@dataclass
class PairedSample:
    cloudy: Tensor
    clear: Tensor
    id: str
    nominal_resolution: float = 0.5
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.cloudy.shape != self.clear.shape:
            raise ValueError(
                f"sample {self.id}: cloudy {tuple(self.cloudy.shape)} != clear {tuple(self.clear.shape)}"
            )
        if self.cloudy.dim() != 3:
            raise ValueError(f"sample {self.id}: expected (C, H, W), got {tuple(self.cloudy.shape)}")

    @property
    def band_count(self) -> int:
        return self.cloudy.shape[0]

    @property
    def size(self) -> tuple[int, int]:
        return tuple(self.cloudy.shape[1:])


def stack(samples: Sequence[PairedSample]) -> tuple[Tensor, Tensor]:
    """Batch a list of samples into ``(cloudy, clear)`` tensors."""
    if not samples:
        raise ValueError("no samples to stack")
    return torch.stack([s.cloudy for s in samples]), torch.stack([s.clear for s in samples])


# --------------------------------------------------------------------------- masks


def compute_ccp(mask: Tensor | np.ndarray) -> float:
    """Cloud coverage probability: fraction of mask pixels equal to 0 (cloudy)."""
    m = torch.as_tensor(mask)
    if m.numel() == 0:
        raise ValueError("empty mask")
    return float((m == 0).sum()) / m.numel()


def _majority3x3(binary: Tensor) -> Tensor:
    x = binary.float()[None, None]
    x = F.pad(x, (1, 1, 1, 1), mode="replicate")
    votes = F.conv2d(x, torch.ones(1, 1, 3, 3))
    return (votes[0, 0] >= 5).to(binary.dtype)


def threshold_cloud_mask(image: Tensor, threshold: float = 0.8) -> Tensor:
    """Mark pixels cloudy (0) where mean band brightness on a [0, 1] scale exceeds ``threshold``.

    A 3x3 majority vote removes isolated speckle. Returns a uint8 ``(H, W)`` mask.
    """
    lum = ((image.float() + 1.0) / 2.0).mean(dim=0)
    cloudy = _majority3x3(lum > threshold)
    return (1 - cloudy.to(torch.uint8)).to(torch.uint8)


# --------------------------------------------------------------------------- synthesis


def value_noise(
    size: int | tuple[int, int],
    octaves: int = 4,
    base_cells: int = 4,
    persistence: float = 0.5,
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """Multi-octave value noise on ``[0, 1]``-ish, zero-mean unit-std normalized."""
    rng = rng if rng is not None else np.random.default_rng()
    h, w = (size, size) if isinstance(size, int) else size
    total = np.zeros((h, w), dtype=np.float64)
    amp = 1.0
    for o in range(octaves):
        cells = base_cells * 2**o
        grid = torch.from_numpy(rng.random((1, 1, cells + 1, cells + 1)))
        up = F.interpolate(grid, size=(h, w), mode="bicubic", align_corners=True)
        total += amp * up[0, 0].numpy()
        amp *= persistence
    total -= total.mean()
    std = total.std()
    return total / std if std > 0 else total


def synth_clear(
    bands: int, size: int, seed: int, low: float = -0.9, high: float = 0.5
) -> Tensor:
    """Synthetic cloud-free multiband scene with band-correlated land-cover texture."""
    rng = np.random.default_rng(seed)
    fields = [
        value_noise(size, octaves=2, base_cells=2, rng=rng),
        value_noise(size, octaves=4, base_cells=4, rng=rng),
        value_noise(size, octaves=3, base_cells=8, persistence=0.6, rng=rng),
    ]
    mix = rng.normal(size=(bands, len(fields))) * np.array([0.6, 0.35, 0.25])
    bias = rng.uniform(-0.3, 0.3, size=bands)
    stacked = np.stack(fields)
    img = np.tensordot(mix, stacked, axes=1) + bias[:, None, None]
    img = np.tanh(img)  # (-1, 1)
    img = low + (img + 1.0) / 2.0 * (high - low)
    return torch.from_numpy(img.astype(np.float32))


def _alpha_field(noise: np.ndarray, coverage: float, softness: float) -> np.ndarray:
    """Soft-thresholded noise whose mean equals ``coverage`` (found by bisection)."""
    if coverage <= 0.0:
        return np.zeros_like(noise)
    if coverage >= 1.0:
        return np.ones_like(noise)
    lo, hi = noise.min() - softness, noise.max() + softness
    for _ in range(60):
        q = 0.5 * (lo + hi)
        m = np.clip((noise - q) / softness + 0.5, 0.0, 1.0).mean()
        if m > coverage:
            lo = q
        else:
            hi = q
    return np.clip((noise - 0.5 * (lo + hi)) / softness + 0.5, 0.0, 1.0)


def synth_cloud(
    clear: Tensor,
    coverage: float,
    thickness: float,
    seed: int,
    sample_id: str = "synthetic",
    nominal_resolution: float = 0.5,
    softness: float = 0.5,
) -> PairedSample:
    """Overlay a smooth cloud layer: ``cloudy = (1 - a) * clear + a * white``.

    ``a`` has mean ``coverage * thickness``; ``coverage`` controls the cloud
    footprint and ``thickness`` its opacity.
    """
    for name, v in (("coverage", coverage), ("thickness", thickness)):
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"{name} must lie in [0, 1], got {v}")
    _, h, w = clear.shape
    rng = np.random.default_rng(seed)
    noise = value_noise((h, w), octaves=4, base_cells=2, rng=rng)
    shape = _alpha_field(noise, coverage, softness)
    alpha = torch.from_numpy((thickness * shape).astype(np.float32))[None]
    if coverage == 0.0 or thickness == 0.0:
        cloudy = clear.clone()
    else:
        cloudy = (1.0 - alpha) * clear + alpha * 1.0
    mask = (shape < 0.5).astype(np.uint8)
    return PairedSample(
        cloudy,
        clear,
        sample_id,
        nominal_resolution,
        meta={"alpha": alpha[0], "mask": torch.from_numpy(mask), "coverage": coverage, "thickness": thickness},
    )


def disk_overlay(clear: Tensor, coverage: float) -> tuple[Tensor, Tensor]:
    """White disk centred in the image covering ``coverage`` of the pixels.

    Returns ``(cloudy, mask)`` with the exact ground-truth mask.
    """
    _, h, w = clear.shape
    r = math.sqrt(coverage * h * w / math.pi)
    yy, xx = torch.meshgrid(torch.arange(h) + 0.5, torch.arange(w) + 0.5, indexing="ij")
    inside = (yy - h / 2) ** 2 + (xx - w / 2) ** 2 <= r**2
    cloudy = torch.where(inside[None], torch.ones_like(clear), clear)
    return cloudy, (~inside).to(torch.uint8)


def make_synthetic_pairs(
    n: int,
    size: int = 32,
    bands: int = 4,
    coverage: float = 0.5,
    thickness: float | tuple[float, float] = (0.5, 0.9),
    seed: int = 0,
    nominal_resolution: float = 0.5,
    prefix: str = "syn",
) -> list[PairedSample]:
    """Deterministic synthetic paired set; ``thickness`` may be a per-sample range."""
    rng = np.random.default_rng(seed)
    seeds = rng.integers(0, 2**31 - 1, size=(n, 2))
    out = []
    for i, (s_img, s_cloud) in enumerate(seeds):
        th = thickness if isinstance(thickness, (int, float)) else float(rng.uniform(*thickness))
        clear = synth_clear(bands, size, int(s_img))
        out.append(
            synth_cloud(clear, coverage, th, int(s_cloud), f"{prefix}{i:05d}", nominal_resolution)
        )
    return out


# --------------------------------------------------------------------------- splitting / geometry


def split_dataset(
    samples: Sequence, ratio: float = 0.8, seed: int = 0, n_test: Optional[int] = None
) -> tuple[list, list]:
    """Shuffle and split into ``(train, test)``.

    The test size is ``floor(len * (1 - ratio))`` unless ``n_test`` pins it
    (e.g. to reproduce a fixed partition).
    """
    if not samples:
        raise ValueError("cannot split an empty dataset")
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"ratio must lie in (0, 1), got {ratio}")
    n = len(samples)
    if n_test is None:
        # Tolerance guards against 0.2 * 5 == 0.9999...
        n_test = int(math.floor(n * (1.0 - ratio) + 1e-9))
    if not 0 <= n_test <= n:
        raise ValueError(f"n_test={n_test} outside [0, {n}]")
    perm = np.random.default_rng(seed).permutation(n)
    test_idx = set(perm[:n_test].tolist())
    train = [samples[i] for i in range(n) if i not in test_idx]
    test = [samples[i] for i in sorted(test_idx)]
    return train, test


def resize_batch(x: Tensor, size: int | tuple[int, int]) -> Tensor:
    """Bilinear (antialiased) resize of a ``(B, C, H, W)`` batch."""
    size = (size, size) if isinstance(size, int) else tuple(size)
    if tuple(x.shape[-2:]) == size:
        return x
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False, antialias=True)


def resize_and_crop(
    sample: PairedSample,
    target_resolution: float,
    crop: int,
    offset: Optional[tuple[int, int]] = None,
) -> PairedSample:
    """Downscale to ``target_resolution`` (m/pixel) then take the same crop from both images.

    ``offset`` is the top-left corner of the crop; ``None`` centres it.
    """
    src = sample.nominal_resolution
    if target_resolution < src - 1e-12:
        raise ValueError(f"target resolution {target_resolution} finer than source {src}")
    h, w = sample.size
    factor = src / target_resolution
    nh, nw = int(round(h * factor)), int(round(w * factor))
    if crop > nh or crop > nw:
        raise ValueError(f"crop {crop} exceeds resized extent {nh}x{nw}")
    pair = torch.stack([sample.cloudy, sample.clear])
    pair = resize_batch(pair, (nh, nw))
    if offset is None:
        offset = ((nh - crop) // 2, (nw - crop) // 2)
    oy, ox = offset
    if oy < 0 or ox < 0 or oy + crop > nh or ox + crop > nw:
        raise ValueError(f"crop at {offset} of size {crop} falls outside {nh}x{nw}")
    pair = pair[..., oy : oy + crop, ox : ox + crop]
    return replace(
        sample,
        cloudy=pair[0].contiguous(),
        clear=pair[1].contiguous(),
        nominal_resolution=target_resolution,
        meta={**sample.meta, "crop_offset": (oy, ox)},
    )


# --------------------------------------------------------------------------- raster I/O


def normalize(arr: np.ndarray) -> Tensor:
    """Map a storage array (C, H, W) to ``[-1, 1]`` using the dtype's full range."""
    if np.issubdtype(arr.dtype, np.integer):
        info = np.iinfo(arr.dtype)
        unit = (arr.astype(np.float64) - info.min) / (info.max - info.min)
    else:
        unit = arr.astype(np.float64)
    return torch.from_numpy((unit * 2.0 - 1.0).astype(np.float32))


def denormalize(x: Tensor, dtype=np.uint8) -> np.ndarray:
    unit = ((x.detach().cpu().double().clamp(-1, 1) + 1.0) / 2.0).numpy()
    if np.issubdtype(np.dtype(dtype), np.integer):
        info = np.iinfo(dtype)
        return np.round(unit * (info.max - info.min) + info.min).astype(dtype)
    return unit.astype(dtype)


def read_image(path: str | Path) -> Tensor:
    """Read a PNG/JPEG (RGB) or multiband TIFF into a normalized ``(C, H, W)`` tensor."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix in (".tif", ".tiff"):
        import tifffile

        arr = tifffile.imread(path)
        if arr.ndim == 2:
            arr = arr[None]
        elif arr.ndim == 3 and arr.shape[-1] <= 16 and arr.shape[0] > 16:
            arr = np.moveaxis(arr, -1, 0)
    else:
        from PIL import Image

        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB") if im.mode not in ("L", "I;16") else im)
        arr = arr[None] if arr.ndim == 2 else np.moveaxis(arr, -1, 0)
    return normalize(np.ascontiguousarray(arr))


def write_image(path: str | Path, x: Tensor, dtype=np.uint8) -> None:
    """Write a normalized ``(C, H, W)`` tensor; TIFF keeps all bands, PNG keeps the first three."""
    path = Path(path)
    arr = denormalize(x, dtype)
    if path.suffix.lower() in (".tif", ".tiff"):
        import tifffile

        tifffile.imwrite(path, arr, photometric="minisblack")
    else:
        from PIL import Image

        img = arr[:3] if arr.shape[0] >= 3 else arr[:1].repeat(3, axis=0)
        Image.fromarray(np.moveaxis(img.astype(np.uint8), 0, -1)).save(path)


def load_paired_dir(root: str | Path, nominal_resolution: float = 0.5) -> list[PairedSample]:
    """Load ``root/cloud/*`` and ``root/label/*`` pairs matched by filename."""
    root = Path(root)
    cloud_dir, label_dir = root / "cloud", root / "label"
    if not cloud_dir.is_dir() or not label_dir.is_dir():
        raise FileNotFoundError(f"{root} must contain 'cloud/' and 'label/' subdirectories")
    out = []
    for p in sorted(cloud_dir.iterdir()):
        if p.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        q = label_dir / p.name
        if not q.exists():
            raise FileNotFoundError(f"no clear counterpart for {p.name} in {label_dir}")
        out.append(PairedSample(read_image(p), read_image(q), p.stem, nominal_resolution))
    return out


def write_paired_dir(root: str | Path, samples: Iterable[PairedSample], dtype=np.uint16) -> None:
    root = Path(root)
    (root / "cloud").mkdir(parents=True, exist_ok=True)
    (root / "label").mkdir(parents=True, exist_ok=True)
    for s in samples:
        write_image(root / "cloud" / f"{s.id}.tif", s.cloudy, dtype)
        write_image(root / "label" / f"{s.id}.tif", s.clear, dtype)


def write_manifest(
    path: str | Path,
    train: Sequence[PairedSample],
    test: Sequence[PairedSample],
    root: Optional[str | Path] = None,
) -> None:
    entries = []
    for split, items in (("train", train), ("test", test)):
        for s in items:
            entry = {"id": s.id, "split": split, "resolution": s.nominal_resolution, "bands": s.band_count}
            if root is not None:
                entry["cloudy"] = str(Path(root) / "cloud" / f"{s.id}.tif")
                entry["clear"] = str(Path(root) / "label" / f"{s.id}.tif")
            entries.append(entry)
    Path(path).write_text(json.dumps({"version": 1, "samples": entries}, indent=2))


def read_manifest(path: str | Path) -> tuple[list[PairedSample], list[PairedSample]]:
    doc = json.loads(Path(path).read_text())
    splits: dict[str, list[PairedSample]] = {"train": [], "test": []}
    for e in doc["samples"]:
        s = PairedSample(read_image(e["cloudy"]), read_image(e["clear"]), e["id"], e.get("resolution", 0.5))
        splits[e["split"]].append(s)
    return splits["train"], splits["test"]
