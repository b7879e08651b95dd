"""End-to-end reference models producing the cloud-free prior ``x0_ref = E(y)``.

Any ``nn.Module`` mapping a ``(B, C, H, W)`` cloudy batch to a same-shape
estimate in ``[-1, 1]`` can act as a reference; subclass :class:`ReferenceModel`
to plug one in. Two are built in: a pass-through used for ablations and a small
residual CNN trained with L1.
"""
from __future__ import annotations

import logging
from typing import Optional

import torch
import torch.nn.functional as F
from torch import Tensor, nn

log = logging.getLogger(__name__)

_EPS = 1e-3


class ReferenceModel(nn.Module):
    name: str = "reference"
    trainable: bool = False

    def __init__(self, bands: Optional[int] = None) -> None:
        super().__init__()
        self.bands = bands

    def config(self) -> dict:
        return {"name": self.name, "bands": self.bands}


class IdentityReference(ReferenceModel):
    name = "identity"
    trainable = False

    def forward(self, y: Tensor) -> Tensor:
        return y.clone()


class ResidualCNN(ReferenceModel):
    """Plain residual CNN with a global skip taken in ``atanh`` space.

    The output is ``tanh(atanh(y) + r(y))`` so it stays in ``(-1, 1)`` and the
    zero-initialised head makes the untrained network an identity map.
    """

    name = "residual_cnn"
    trainable = True

    def __init__(self, bands: int, width: int = 48, blocks: int = 6) -> None:
        super().__init__(bands)
        self.width = width
        self.blocks = blocks
        self.head = nn.Conv2d(bands, width, 3, padding=1)
        self.body = nn.ModuleList(
            nn.Sequential(
                nn.Conv2d(width, width, 3, padding=1),
                nn.ReLU(inplace=True),
                nn.Conv2d(width, width, 3, padding=1),
            )
            for _ in range(blocks)
        )
        self.tail = nn.Conv2d(width, bands, 3, padding=1)
        nn.init.zeros_(self.tail.weight)
        nn.init.zeros_(self.tail.bias)

    def config(self) -> dict:
        return {"name": self.name, "bands": self.bands, "width": self.width, "blocks": self.blocks}

    def forward(self, y: Tensor) -> Tensor:
        h = F.relu(self.head(y))
        for block in self.body:
            h = h + block(h)
        base = torch.atanh(y.clamp(-1 + _EPS, 1 - _EPS))
        return torch.tanh(base + self.tail(h))


REFERENCES = {"identity": IdentityReference, "residual_cnn": ResidualCNN}


def build_reference(name: str, bands: int, **kwargs) -> ReferenceModel:
    try:
        cls = REFERENCES[name]
    except KeyError:
        raise ValueError(f"unknown reference model {name!r}; known: {sorted(REFERENCES)}") from None
    return cls(bands=bands, **kwargs)


def register_reference(cls: type[ReferenceModel]) -> type[ReferenceModel]:
    """Class decorator making an external adapter selectable by ``name``."""
    REFERENCES[cls.name] = cls
    return cls


@torch.no_grad()
def predict_reference(model: ReferenceModel, y: Tensor, batch_size: int = 64) -> Tensor:
    if model.bands is not None and y.shape[1] != model.bands:
        raise ValueError(f"reference expects {model.bands} bands, got {y.shape[1]}")
    if not torch.isfinite(y).all():
        raise ValueError("reference input contains non-finite values")
    was_training = model.training
    model.eval()
    out = torch.cat([model(chunk) for chunk in y.split(batch_size)])
    model.train(was_training)
    return out


def train_reference(
    model: ReferenceModel,
    cloudy: Tensor,
    clear: Tensor,
    epochs: int,
    batch_size: int = 16,
    lr: float = 1e-3,
    seed: int = 0,
    max_iterations: Optional[int] = None,
) -> list[float]:
    """Fit ``model`` to map ``cloudy`` to ``clear`` with an L1 loss.

    Returns the per-iteration training losses. ``max_iterations`` caps the
    total number of optimizer steps across epochs.
    """
    if not model.trainable:
        raise ValueError(f"reference model {model.name!r} is not trainable")
    if len(cloudy) == 0:
        raise ValueError("cannot train on an empty dataset")
    if cloudy.shape != clear.shape:
        raise ValueError("cloudy/clear shape mismatch")
    losses: list[float] = []
    if epochs <= 0:
        return losses

    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    model.train()
    n = len(cloudy)
    for epoch in range(epochs):
        order = torch.randperm(n, generator=gen)
        for idx in order.split(batch_size):
            loss = F.l1_loss(model(cloudy[idx]), clear[idx])
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite reference loss at epoch {epoch}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            losses.append(loss.item())
            if max_iterations is not None and len(losses) >= max_iterations:
                model.eval()
                return losses
        log.debug("reference epoch %d loss %.4f", epoch, losses[-1])
    model.eval()
    return losses


def freeze(model: nn.Module) -> nn.Module:
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def reference_state(model: ReferenceModel) -> dict:
    return {"config": model.config(), "state_dict": model.state_dict()}


def reference_from_state(state: dict) -> ReferenceModel:
    cfg = dict(state["config"])
    name = cfg.pop("name")
    model = build_reference(name, **cfg)
    model.load_state_dict(state["state_dict"])
    return model.eval()

