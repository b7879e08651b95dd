"""Self-describing checkpoints for denoiser bundles and reference models."""
from __future__ import annotations

from pathlib import Path

import torch

from .networks import DenoiserBundle, UNetSpec, build_cnp, build_wa
from .reference import ReferenceModel, reference_from_state, reference_state
from .schedule import Schedule

FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_bundle(path: str | Path, bundle: DenoiserBundle) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "version": FORMAT_VERSION,
            "kind": "bundle",
            "bands": bundle.bands,
            "schedule": bundle.schedule.describe(),
            "cnp_spec": bundle.cnp.spec.to_dict(),
            "wa_spec": bundle.wa.spec.to_dict(),
            "cnp": bundle.cnp.state_dict(),
            "wa": bundle.wa.state_dict(),
            "reference": reference_state(bundle.reference),
            "meta": bundle.meta,
        },
        path,
    )
    return path


def load_bundle(path: str | Path) -> DenoiserBundle:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    doc = torch.load(path, map_location="cpu", weights_only=False)
    if doc.get("kind") != "bundle":
        raise CheckpointError(f"{path} is not a bundle checkpoint")
    if doc.get("version", 0) > FORMAT_VERSION:
        raise CheckpointError(f"{path} has newer format version {doc['version']}")
    bands = doc["bands"]
    cnp = build_cnp(bands, UNetSpec.from_dict(doc["cnp_spec"]))
    wa = build_wa(bands, UNetSpec.from_dict(doc["wa_spec"]))
    cnp.load_state_dict(doc["cnp"])
    wa.load_state_dict(doc["wa"])
    return DenoiserBundle(
        cnp=cnp,
        wa=wa,
        reference=reference_from_state(doc["reference"]),
        schedule=Schedule.from_description(doc["schedule"]),
        bands=bands,
        meta=doc.get("meta", {}),
    )


def save_reference(path: str | Path, model: ReferenceModel) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"version": FORMAT_VERSION, "kind": "reference", **reference_state(model)}, path)
    return path


def load_reference(path: str | Path) -> ReferenceModel:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"reference checkpoint not found: {path}")
    doc = torch.load(path, map_location="cpu", weights_only=False)
    if doc.get("kind") != "reference":
        raise CheckpointError(f"{path} is not a reference checkpoint")
    return reference_from_state(doc)
