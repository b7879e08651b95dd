"""End-to-end routines shared by the CLI and the acceptance suite."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import torch
from torch import Tensor

from .checkpoint import load_bundle, load_reference, save_reference
from .config import ExperimentConfig
from .data import (
    PairedSample,
    compute_ccp,
    load_paired_dir,
    make_synthetic_pairs,
    read_manifest,
    resize_and_crop,
    split_dataset,
    stack,
    synth_clear,
    synth_cloud,
    threshold_cloud_mask,
)
from .metrics import MetricReport, evaluate_images
from .networks import DenoiserBundle, build_cnp, build_wa
from .reference import ReferenceModel, ResidualCNN, build_reference, predict_reference, train_reference
from .sampler import SamplerConfig, TrajectoryRecord, sample
from .schedule import make_schedule
from .training import STAGES, LossReport, MissingPrerequisite, StageConfig, run_stage

log = logging.getLogger(__name__)

ETA_SWEEP = (0.1, 0.3, 0.5, 0.7, 0.9)


# --------------------------------------------------------------------------- data


def load_dataset(cfg: ExperimentConfig) -> tuple[list[PairedSample], list[PairedSample]]:
    d = cfg.data
    if d.source == "synthetic":
        thick = (d.thickness_min, d.thickness_max)
        train = make_synthetic_pairs(d.n_train, d.size, d.bands, d.coverage, thick, cfg.seed * 2 + 1, d.resolution, "tr")
        test = make_synthetic_pairs(d.n_test, d.size, d.bands, d.coverage, thick, cfg.seed * 2 + 2, d.resolution, "te")
        return train, test
    if d.source == "directory":
        return split_dataset(load_paired_dir(d.path, d.resolution), d.split_ratio, cfg.seed)
    if d.source == "manifest":
        return read_manifest(d.path)
    raise ValueError(f"unknown data source {d.source!r}")


# --------------------------------------------------------------------------- models


def prepare_reference(
    cfg: ExperimentConfig, train: Sequence[PairedSample], output_dir: Optional[Path] = None
) -> ReferenceModel:
    """Load, or train and cache, the reference model named in the config."""
    r = cfg.reference
    bands = cfg.data.bands
    if r.name == "identity":
        return build_reference("identity", bands)
    if r.checkpoint:
        return load_reference(r.checkpoint)
    cached = output_dir / "reference.pt" if output_dir is not None else None
    if cached is not None and cached.exists():
        return load_reference(cached)
    if r.name != "residual_cnn":
        raise ValueError(f"reference {r.name!r} needs reference.checkpoint")
    torch.manual_seed(cfg.seed)
    model = ResidualCNN(bands, r.width, r.blocks)
    cloudy, clear = stack(train)
    losses = train_reference(
        model, cloudy, clear, r.epochs, r.batch_size, r.learning_rate, cfg.seed, r.iterations
    )
    log.info("reference trained: L1 %.4f -> %.4f", np.mean(losses[:20]), np.mean(losses[-20:]))
    if cached is not None:
        save_reference(cached, model)
    return model


def new_bundle(cfg: ExperimentConfig, reference: ReferenceModel) -> DenoiserBundle:
    torch.manual_seed(cfg.seed)
    s = cfg.schedule
    return DenoiserBundle(
        cnp=build_cnp(cfg.data.bands, cfg.cnp_spec),
        wa=build_wa(cfg.data.bands, cfg.wa_spec),
        reference=reference,
        schedule=make_schedule(s.T, s.kind, s.beta_start, s.beta_end),
        bands=cfg.data.bands,
        meta={"stages": [], "config": cfg.to_dict()},
    )


def stage_config(cfg: ExperimentConfig, stage: str) -> StageConfig:
    b = getattr(cfg.training, stage)
    return StageConfig(
        stage=stage,
        image_size=cfg.stage_size(stage),
        batch_size=b.batch_size,
        learning_rate=b.learning_rate,
        iterations=b.iterations,
        lam=b.lam,
        clip_denoised=cfg.training.clip_denoised,
        early_stop=b.early_stop,
        log_every=cfg.training.log_every,
    )


def train_pipeline(
    cfg: ExperimentConfig,
    stages: Iterable[str] = STAGES,
    output_dir: Optional[str | Path] = None,
    data: Optional[tuple[list[PairedSample], list[PairedSample]]] = None,
) -> tuple[DenoiserBundle, dict[str, LossReport]]:
    """Run the requested stages in order, resuming from the previous stage's checkpoint."""
    stages = list(stages)
    out = Path(output_dir or cfg.training.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    train, _ = data if data is not None else load_dataset(cfg)
    if not train:
        raise ValueError("training set is empty")

    first = STAGES.index(stages[0])
    if first == 0:
        bundle = new_bundle(cfg, prepare_reference(cfg, train, out))
    else:
        prev = out / f"{STAGES[first - 1]}.pt"
        if not prev.exists():
            raise MissingPrerequisite(f"stage {stages[0]!r} needs checkpoint {prev}")
        bundle = load_bundle(prev)

    cloudy, clear = stack(train)
    reports = {}
    for i, stage in enumerate(stages):
        torch.manual_seed(cfg.seed + i)
        bundle, reports[stage] = run_stage(
            stage_config(cfg, stage), bundle, cloudy, clear, checkpoint_dir=out, seed=cfg.seed + 17 * (i + 1)
        )
    return bundle, reports


# --------------------------------------------------------------------------- evaluation


@dataclass
class Evaluation:
    rows: list[dict] = field(default_factory=list)
    reports: list[MetricReport] = field(default_factory=list)
    trajectories: dict[str, TrajectoryRecord] = field(default_factory=dict)
    outputs: dict[str, Tensor] = field(default_factory=dict)

    def row(self, method: str) -> dict:
        return next(r for r in self.rows if r["method"] == method)

    def write(self, out_dir: str | Path, stem: str = "evaluation") -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with (out / f"{stem}_per_image.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["method", "id", "psnr", "ssim", "lpips"])
            for rep in self.reports:
                lp = rep.lpips or [None] * len(rep.ids)
                for i, pid in enumerate(rep.ids):
                    w.writerow([rep.method, pid, rep.psnr[i], rep.ssim[i], "" if lp[i] is None else lp[i]])
        columns = ["method", "n", "psnr", "ssim"] + (["lpips"] if any("lpips" in r for r in self.rows) else [])
        extra = sorted({k for r in self.rows for k in r} - set(columns) - {"peak"})
        with (out / f"{stem}_summary.csv").open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=columns + extra, extrasaction="ignore")
            w.writeheader()
            for r in self.rows:
                w.writerow(r)
        summary = {
            "rows": self.rows,
            "trajectories": {k: v.to_dict() for k, v in self.trajectories.items()},
        }
        (out / f"{stem}_summary.json").write_text(json.dumps(summary, indent=2))


def sampler_config(cfg: ExperimentConfig, **overrides) -> SamplerConfig:
    s = cfg.sampler
    kw = dict(
        mode=s.mode,
        ddim_steps=s.ddim_steps,
        eta=s.eta,
        fusion_enabled=s.fusion_enabled,
        clip_denoised=s.clip_denoised,
        noise_coeff=s.noise_coeff,
        seed=cfg.seed,
    )
    kw.update(overrides)
    return SamplerConfig(**kw)


def _batched_sample(
    bundle: DenoiserBundle, y: Tensor, x0_ref: Tensor, cfg: SamplerConfig, batch_size: int
) -> tuple[Tensor, TrajectoryRecord]:
    outs, record = [], None
    for i in range(0, len(y), batch_size):
        sub = replace(cfg, seed=cfg.seed + i)
        out, rec = sample(bundle, y[i : i + batch_size], sub, x0_ref[i : i + batch_size])
        outs.append(out)
        if record is None:
            record = rec
    return torch.cat(outs), record


def evaluate(
    bundle: DenoiserBundle,
    test: Sequence[PairedSample],
    runs: dict[str, SamplerConfig],
    lpips_backend: Optional[str] = None,
    baselines: bool = True,
    batch_size: int = 64,
) -> Evaluation:
    """Score the cloudy input, the reference alone, and each named sampler configuration."""
    if not test:
        raise ValueError("test set is empty")
    y, x0 = stack(test)
    if y.shape[1] != bundle.bands:
        raise ValueError(f"test set has {y.shape[1]} bands, checkpoint expects {bundle.bands}")
    ids = [s.id for s in test]
    ev = Evaluation()
    x0_ref = predict_reference(bundle.reference, y)

    def add(name: str, pred: Tensor, **extra) -> None:
        rep = evaluate_images(name, pred, x0, ids, lpips_backend)
        ev.reports.append(rep)
        ev.rows.append({**rep.summary(), **extra})
        ev.outputs[name] = pred

    if baselines:
        add("cloudy_input", y)
        add(f"reference:{bundle.reference.name}", x0_ref)
    for name, scfg in runs.items():
        pred, rec = _batched_sample(bundle, y, x0_ref, scfg, batch_size)
        ev.trajectories[name] = rec
        extra = {"eta": scfg.eta, "fusion": scfg.fusion_enabled, "mode": scfg.mode}
        if scfg.fusion_enabled:
            extra.update(w_first=rec.w_mean[0], w_last=rec.w_mean[-1])
        add(name, pred, **extra)
    return ev


def eta_sweep(
    bundle: DenoiserBundle,
    test: Sequence[PairedSample],
    base: SamplerConfig,
    etas: Sequence[float] = ETA_SWEEP,
    lpips_backend: Optional[str] = None,
) -> Evaluation:
    runs = {f"DE(eta={e:g})": replace(base, eta=e, fusion_enabled=True) for e in etas}
    return evaluate(bundle, test, runs, lpips_backend, baselines=False)


# --------------------------------------------------------------------------- resolution gap


def resolution_gap(
    train_res: Sequence[float],
    test_res: Sequence[float],
    source_resolution: float = 0.5,
    source_size: int = 128,
    crop: int = 32,
    n_train: int = 120,
    n_test: int = 40,
    bands: int = 4,
    coverage: float = 0.5,
    thickness: tuple[float, float] = (0.5, 0.9),
    iterations: int = 800,
    seed: int = 0,
    width: int = 48,
    blocks: int = 6,
    scenes: Optional[tuple[list[PairedSample], list[PairedSample]]] = None,
) -> list[dict]:
    """Train the reference baseline at each training resolution and test at each test resolution.

    Scenes are synthesized at ``source_resolution``, downscaled to the target
    resolution, and cut into aligned ``crop`` x ``crop`` patches.
    """
    for r in list(train_res) + list(test_res):
        if r < source_resolution:
            raise ValueError(f"resolution {r} finer than source {source_resolution}")
        if source_size * source_resolution / r < crop:
            raise ValueError(f"resolution {r} leaves fewer than {crop} pixels")

    if scenes is None:
        scenes = (
            _hires_scenes(n_train, source_size, bands, coverage, thickness, seed * 2 + 1, source_resolution),
            _hires_scenes(n_test, source_size, bands, coverage, thickness, seed * 2 + 2, source_resolution),
        )
    train_scenes, test_scenes = scenes

    def patches(samples, res, rng_seed):
        rng = np.random.default_rng(rng_seed)
        out = []
        for s in samples:
            n = int(round(s.size[0] * s.nominal_resolution / res))
            oy, ox = rng.integers(0, n - crop + 1, size=2)
            out.append(resize_and_crop(s, res, crop, (int(oy), int(ox))))
        return stack(out)

    tests = {r: patches(test_scenes, r, seed + 1000) for r in test_res}
    rows = []
    for tr in train_res:
        torch.manual_seed(seed)
        model = ResidualCNN(bands, width, blocks)
        cloudy, clear = patches(train_scenes, tr, seed)
        train_reference(model, cloudy, clear, epochs=10_000, batch_size=16, lr=1e-3, seed=seed, max_iterations=iterations)
        for te in test_res:
            y, x0 = tests[te]
            summary = evaluate_images("reference", predict_reference(model, y), x0).summary()
            rows.append({"train_resolution": tr, "test_resolution": te, "psnr": summary["psnr"], "ssim": summary["ssim"]})
    return rows


def _hires_scenes(n, size, bands, coverage, thickness, seed, res) -> list[PairedSample]:
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        s_img, s_cloud = (int(v) for v in rng.integers(0, 2**31 - 1, size=2))
        clear = synth_clear(bands, size, s_img)
        th = float(rng.uniform(*thickness))
        out.append(synth_cloud(clear, coverage, th, s_cloud, f"hr{i:04d}", res))
    return out


# --------------------------------------------------------------------------- dataset statistics


def ccp_statistics(
    samples: Sequence[PairedSample], threshold: float = 0.8, bins: int = 10
) -> dict:
    """Per-image cloud coverage from threshold masks plus a histogram over ``[0, 1]``."""
    values = [compute_ccp(threshold_cloud_mask(s.cloudy, threshold)) for s in samples]
    counts, edges = np.histogram(values, bins=bins, range=(0.0, 1.0))
    return {
        "ids": [s.id for s in samples],
        "ccp": values,
        "mean": float(np.mean(values)) if values else float("nan"),
        "histogram": {"edges": edges.tolist(), "counts": counts.tolist()},
    }
