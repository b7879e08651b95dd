import pytest
import torch
from torch import nn

from cloudfuse.networks import CNP_TINY, WA_TINY, DenoiserBundle, build_cnp, build_wa, time_embedding
from cloudfuse.reference import ResidualCNN
from cloudfuse.schedule import make_schedule


class ToyNet(nn.Module):
    """Two conv layers with a time-dependent bias; small enough for finite differences."""

    def __init__(self, cin: int, cout: int, hidden: int = 3, squash: bool = False) -> None:
        super().__init__()
        self.c1 = nn.Conv2d(cin, hidden, 3, padding=1)
        self.temb = nn.Linear(8, hidden)
        self.c2 = nn.Conv2d(hidden, cout, 3, padding=1)
        self.squash = squash

    def forward(self, x, t):
        t = torch.as_tensor(t)
        if t.dim() == 0:
            t = t.expand(x.shape[0])
        e = self.temb(time_embedding(t, 8).to(x.dtype))
        h = torch.tanh(self.c1(x) + e[:, :, None, None])
        out = self.c2(h)
        return torch.sigmoid(out) if self.squash else out


@pytest.fixture
def toy_net_cls():
    return ToyNet


@pytest.fixture
def tiny_bundle():
    torch.manual_seed(0)
    return DenoiserBundle(
        build_cnp(4, CNP_TINY), build_wa(4, WA_TINY), ResidualCNN(4, width=16, blocks=2), make_schedule(1000), 4
    )
