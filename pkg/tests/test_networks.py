import pytest
import torch

from cloudfuse.networks import (
    CNP_FULL,
    CNP_TINY,
    WA_FULL,
    WA_TINY,
    UNetSpec,
    build_cnp,
    build_wa,
    count_parameters,
    time_embedding,
)

# Frozen from the first build of each preset; changes mean the architecture drifted.
PARAMS = {
    ("cnp", "full"): 30259780,
    ("wa", "full"): 4660484,
    ("cnp", "tiny"): 1115684,
    ("wa", "tiny"): 655076,
}


def test_time_embedding_at_zero():
    e = time_embedding(0, 16)[0]
    assert torch.all(e[:8] == 1.0) and torch.all(e[8:] == 0.0)


def test_time_embedding_deterministic_and_distinct():
    assert torch.equal(time_embedding(5, 32), time_embedding(5, 32))
    assert float((time_embedding(1, 32) - time_embedding(2, 32)).norm()) > 0
    embs = time_embedding(torch.arange(0, 10000, 97), 64)
    assert len(torch.unique(embs, dim=0)) == len(embs)


def test_time_embedding_rejects_odd_dim():
    with pytest.raises(ValueError):
        time_embedding(3, 7)


@pytest.mark.parametrize("size", [32, 64, 256])
def test_cnp_shape_contract(size):
    net = build_cnp(4, CNP_TINY).eval()
    with torch.no_grad():
        out = net(torch.randn(1 if size == 256 else 2, 8, size, size), 17)
    assert out.shape[1:] == (4, size, size)


def test_full_cnp_shape_contract():
    net = build_cnp(3, CNP_FULL).eval()
    with torch.no_grad():
        out = net(torch.randn(2, 6, 64, 64), torch.tensor([3, 900]))
    assert out.shape == (2, 3, 64, 64)


def test_cnp_zero_initial_output():
    net = build_cnp(4, CNP_TINY)
    out = net(torch.randn(2, 8, 32, 32), torch.tensor([1, 999]))
    assert torch.count_nonzero(out) == 0


@pytest.mark.parametrize("size", [32, 64, 256])
def test_wa_shape_and_range(size):
    net = build_wa(4, WA_TINY).eval()
    with torch.no_grad():
        out = net(torch.randn(1, 12, size, size) * 10, 500)
    assert out.shape == (1, 4, size, size)
    assert torch.isfinite(out).all() and out.min() >= 0 and out.max() <= 1


def test_full_wa_shape_and_range():
    net = build_wa(4, WA_FULL).eval()
    with torch.no_grad():
        out = net(torch.randn(1, 12, 64, 64), 10)
    assert out.shape == (1, 4, 64, 64) and 0 <= out.min() and out.max() <= 1


def test_wa_range_holds_for_extreme_inputs():
    net = build_wa(2, WA_TINY).eval()
    with torch.no_grad():
        out = net(torch.randn(1, 6, 32, 32) * 1e4, 1)
    assert torch.isfinite(out).all() and out.min() >= 0 and out.max() <= 1


def test_spatial_size_divisibility():
    with pytest.raises(ValueError):
        build_cnp(4, CNP_TINY)(torch.randn(1, 8, 30, 30), 1)


def test_wa_time_conditioning_is_live():
    torch.manual_seed(0)
    net = build_wa(2, WA_TINY)
    opt = torch.optim.Adam(net.parameters(), lr=1e-3)
    x = torch.randn(4, 6, 32, 32)
    t = torch.tensor([1, 1, 900, 900])
    target = torch.tensor([0.9, 0.9, 0.1, 0.1])[:, None, None, None].expand(4, 2, 32, 32)
    for _ in range(5):
        loss = (net(x, t) - target).abs().mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
    net.eval()
    with torch.no_grad():
        a, b = net(x[:1], 1), net(x[:1], 900)
    assert not torch.allclose(a, b)


def test_eval_mode_is_deterministic():
    net = build_wa(4, WA_TINY).eval()
    x = torch.randn(1, 12, 32, 32)
    with torch.no_grad():
        assert torch.equal(net(x, 5), net(x, 5))


@pytest.mark.parametrize("which,preset", list(PARAMS))
def test_parameter_counts_frozen(which, preset):
    spec = {"cnp": {"full": CNP_FULL, "tiny": CNP_TINY}, "wa": {"full": WA_FULL, "tiny": WA_TINY}}
    build = build_cnp if which == "cnp" else build_wa
    assert count_parameters(build(4, spec[which][preset])) == PARAMS[(which, preset)]


def test_spec_validation():
    with pytest.raises(ValueError):
        UNetSpec(base_channels=0)
    with pytest.raises(ValueError):
        UNetSpec(channel_multipliers=())
    with pytest.raises(ValueError):
        UNetSpec(dropout=1.0)
    assert UNetSpec.from_dict(CNP_FULL.to_dict()) == CNP_FULL


def test_band_count_validation():
    with pytest.raises(ValueError):
        build_cnp(0, CNP_TINY)
