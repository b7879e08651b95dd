"""Command-line interface: ``cloudfuse {init-config,train,sample,evaluate,analyze,resgap,plot}``.

Exit codes: 0 success, 1 user error (bad config, missing file or
prerequisite, invalid input), 2 internal error.  Set ``CLOUDFUSE_DEVICE``
(e.g. ``cuda:0``) to choose the accelerator; the default is the CPU.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import experiments as ex
from .checkpoint import CheckpointError, load_bundle
from .config import ConfigError, ExperimentConfig, apply_overrides, tiny_config
from .data import PairedSample, load_paired_dir, read_image, read_manifest, write_image
from .training import STAGES, MissingPrerequisite, NonFiniteLoss

log = logging.getLogger("cloudfuse")

USER_ERRORS = (
    FileNotFoundError,
    ConfigError,
    CheckpointError,
    MissingPrerequisite,
    NonFiniteLoss,
    ValueError,
)


class UserError(Exception):
    pass


def device() -> torch.device:
    return torch.device(os.environ.get("CLOUDFUSE_DEVICE", "cpu"))


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config)
    overrides = {"seed": args.seed}
    for item in getattr(args, "set", None) or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        overrides[key] = _parse_value(raw)
    return apply_overrides(cfg, overrides)


def _parse_value(raw: str):
    for cast in (int, float):
        try:
            return cast(raw)
        except ValueError:
            pass
    if raw.lower() in ("true", "false"):
        return raw.lower() == "true"
    return raw


def _load_test_set(path: str, resolution: float = 0.5) -> list[PairedSample]:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"dataset not found: {p}")
    if p.is_file():
        _, test = read_manifest(p)
        return test
    return load_paired_dir(p, resolution)


# --------------------------------------------------------------------------- commands


def cmd_init_config(args) -> int:
    cfg = tiny_config(args.output_dir, args.seed or 0) if args.preset == "tiny" else ExperimentConfig()
    if args.preset != "tiny":
        cfg.training.output_dir = args.output_dir
    print(cfg.save(args.path))
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = Path(args.output_dir or cfg.training.output_dir)
    data = ex.load_dataset(cfg)
    if args.stage == "reference":
        ex.prepare_reference(cfg, data[0], out.mkdir(parents=True, exist_ok=True) or out)
        print(out / "reference.pt")
        return 0
    stages = STAGES if args.stage == "all" else (args.stage,)
    _, reports = ex.train_pipeline(cfg, stages, out, data)
    for stage, rep in reports.items():
        last = {k: rep.mean(k, last=min(50, len(rep))) for k in rep.values}
        print(stage, len(rep), " ".join(f"{k}={v:.5f}" for k, v in last.items()))
    return 0


def cmd_sample(args) -> int:
    bundle = load_bundle(args.checkpoint).to(device())
    inputs = sorted(Path(args.input).glob("*")) if Path(args.input).is_dir() else [Path(args.input)]
    inputs = [p for p in inputs if p.suffix.lower() in (".tif", ".tiff", ".png")]
    if not inputs:
        raise UserError(f"no images found at {args.input}")
    y = torch.stack([read_image(p) for p in inputs]).to(device())
    snaps = tuple(args.snapshot_steps or ())
    cfg = ex.SamplerConfig(
        mode=args.mode,
        ddim_steps=args.steps,
        eta=args.eta,
        fusion_enabled=args.fusion == "on",
        seed=args.seed or 0,
        record_trajectory=bool(args.record_trajectory) or bool(snaps),
        snapshot_steps=snaps,
    )
    out, rec = ex.sample(bundle, y, cfg)
    out_dir = Path(args.output)
    out_dir.mkdir(parents=True, exist_ok=True)
    for p, img in zip(inputs, out.cpu()):
        write_image(out_dir / f"{p.stem}_de{p.suffix}", img)
    if args.record_trajectory:
        rec.save(args.record_trajectory)
    if rec.snapshots:
        write_snapshot_strips(out_dir, [p.stem for p in inputs], rec.snapshots)
    print(f"wrote {len(inputs)} image(s) to {out_dir}")
    return 0


def write_snapshot_strips(out_dir: Path, stems: Sequence[str], snapshots: dict) -> None:
    """One PNG per input: the x0 estimate at each recorded step, left to right from large t."""
    steps = sorted(snapshots, reverse=True)
    for i, stem in enumerate(stems):
        tiles = [snapshots[t][i].cpu()[:3] for t in steps]
        write_image(out_dir / f"{stem}_x0_strip.png", torch.cat(tiles, dim=-1))


def cmd_evaluate(args) -> int:
    bundle = load_bundle(args.checkpoint).to(device())
    test = _load_test_set(args.dataset)
    if not test:
        raise UserError(f"test set at {args.dataset} is empty")
    if test[0].band_count != bundle.bands:
        raise UserError(f"dataset has {test[0].band_count} bands, checkpoint expects {bundle.bands}")
    test = [replace(s, cloudy=s.cloudy.to(device()), clear=s.clear.to(device())) for s in test]
    base = ex.SamplerConfig(mode=args.mode, ddim_steps=args.steps, eta=args.eta[0], seed=args.seed or 0)
    lp = args.lpips or None
    if args.eta_sweep or len(args.eta) > 1:
        etas = ex.ETA_SWEEP if args.eta_sweep else args.eta
        ev = ex.eta_sweep(bundle, test, base, etas, lp)
        stem = "eta_sweep"
    else:
        runs = {}
        for flag in args.fusion:
            runs["DE" if flag == "on" else "DE(fusion off)"] = replace(base, fusion_enabled=flag == "on")
        ev = ex.evaluate(bundle, test, runs, lp, batch_size=args.batch_size)
        stem = "evaluation"
    ev.write(args.output, stem)
    for row in ev.rows:
        print(row["method"], f"psnr={row['psnr']:.3f}", f"ssim={row['ssim']:.4f}",
              f"lpips={row['lpips']:.4f}" if "lpips" in row else "")
    return 0


def cmd_analyze(args) -> int:
    samples = _load_test_set(args.dataset)
    stats = ex.ccp_statistics(samples, args.threshold, args.bins)
    text = json.dumps(stats, indent=2)
    if args.output:
        Path(args.output).write_text(text)
    print(f"{len(samples)} images, mean cloud coverage {stats['mean']:.3f}")
    return 0


def cmd_resgap(args) -> int:
    cfg = _load_config(args) if args.config else ExperimentConfig(seed=args.seed or 0)
    d, r = cfg.data, cfg.reference
    rows = ex.resolution_gap(
        args.train_res,
        args.test_res,
        source_resolution=args.source_resolution,
        source_size=args.source_size,
        crop=args.crop,
        n_train=d.n_train,
        n_test=d.n_test,
        bands=d.bands,
        coverage=d.coverage,
        thickness=(d.thickness_min, d.thickness_max),
        iterations=args.iterations or r.iterations,
        seed=cfg.seed,
        width=r.width,
        blocks=r.blocks,
    )
    with open(args.output, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    for row in rows:
        print(f"train {row['train_resolution']} m  test {row['test_resolution']} m  "
              f"psnr={row['psnr']:.3f} ssim={row['ssim']:.4f}")
    return 0


def cmd_plot(args) -> int:
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError as exc:
        raise UserError("plotting needs matplotlib (pip install matplotlib)") from exc
    doc = json.loads(Path(args.input).read_text())
    fig, ax = plt.subplots(figsize=(5, 3.5))
    if "histogram" in doc:
        h = doc["histogram"]
        edges = np.asarray(h["edges"])
        ax.bar(edges[:-1], h["counts"], width=np.diff(edges), align="edge", edgecolor="k")
        ax.set_xlabel("cloud coverage")
        ax.set_ylabel("images")
    elif "steps" in doc:
        ax.plot(doc["steps"], doc["w_mean"], marker=".")
        ax.invert_xaxis()
        ax.set_xlabel("t")
        ax.set_ylabel("mean W")
    elif "rows" in doc and doc.get("trajectories"):
        for name, tr in doc["trajectories"].items():
            ax.plot(tr["steps"], tr["w_mean"], label=name)
        ax.invert_xaxis()
        ax.set_xlabel("t")
        ax.set_ylabel("mean W")
        ax.legend(fontsize=7)
    else:
        raise UserError(f"{args.input}: nothing to plot")
    fig.tight_layout()
    fig.savefig(args.output, dpi=120)
    print(args.output)
    return 0


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cloudfuse", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--seed", type=int, default=None)
        p.set_defaults(fn=fn)
        return p

    p = add("init-config", cmd_init_config, "write a starter TOML config")
    p.add_argument("path")
    p.add_argument("--preset", choices=("tiny", "full"), default="tiny")
    p.add_argument("--output-dir", default="runs/tiny")

    p = add("train", cmd_train, "train the reference model or one/all diffusion stages")
    p.add_argument("--config", required=True)
    p.add_argument("--stage", choices=("reference",) + STAGES + ("all",), default="all")
    p.add_argument("--output-dir")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config value")

    p = add("sample", cmd_sample, "restore cloudy images with a trained checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="image file or directory")
    p.add_argument("--output", required=True)
    p.add_argument("--mode", choices=("ddim", "ancestral"), default="ddim")
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--eta", type=float, default=0.3)
    p.add_argument("--fusion", choices=("on", "off"), default="on")
    p.add_argument("--record-trajectory", metavar="JSON")
    p.add_argument("--snapshot-steps", type=int, nargs="*")

    p = add("evaluate", cmd_evaluate, "score a checkpoint on a paired test set")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True, help="paired directory or manifest JSON")
    p.add_argument("--output", required=True)
    p.add_argument("--mode", choices=("ddim", "ancestral"), default="ddim")
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--eta", type=float, nargs="+", default=[0.3])
    p.add_argument("--eta-sweep", action="store_true", help="sweep eta over 0.1..0.9")
    p.add_argument("--fusion", choices=("on", "off"), nargs="+", default=["on"])
    p.add_argument("--lpips", default="", help="perceptual backend name")
    p.add_argument("--batch-size", type=int, default=64)

    p = add("analyze", cmd_analyze, "cloud-coverage statistics of a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--threshold", type=float, default=0.8)
    p.add_argument("--bins", type=int, default=10)
    p.add_argument("--output")

    p = add("resgap", cmd_resgap, "train/test resolution grid for the reference baseline")
    p.add_argument("--config")
    p.add_argument("--train-res", type=float, nargs="+", required=True)
    p.add_argument("--test-res", type=float, nargs="+", required=True)
    p.add_argument("--source-resolution", type=float, default=0.5)
    p.add_argument("--source-size", type=int, default=128)
    p.add_argument("--crop", type=int, default=32)
    p.add_argument("--iterations", type=int)
    p.add_argument("--output", required=True)

    p = add("plot", cmd_plot, "render a JSON report to PNG (needs matplotlib)")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    torch.manual_seed(args.seed or 0)
    try:
        return args.fn(args)
    except (UserError, *USER_ERRORS) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
