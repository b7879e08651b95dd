import pytest
import torch

from cloudfuse.fusion import clamp_weight, fuse
from cloudfuse.reference import IdentityReference, predict_reference
from cloudfuse.sampler import SamplerConfig, denoise_step, sample, sample_vanilla, step_pairs
from cloudfuse.schedule import ddim_step, make_schedule, posterior_step, predict_x0


def _perturb(net, seed=0, scale=0.05):
    """Give zero-initialised layers non-trivial weights so outputs depend on inputs."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in net.parameters():
            p.add_(torch.randn(p.shape, generator=gen) * scale)
    return net


@pytest.fixture
def bundle(tiny_bundle):
    _perturb(tiny_bundle.cnp, 1)
    _perturb(tiny_bundle.wa, 2)
    _perturb(tiny_bundle.reference, 3, 0.01)
    return tiny_bundle.eval()


@pytest.fixture
def y():
    return torch.rand(2, 4, 32, 32, generator=torch.Generator().manual_seed(9)) * 2 - 1


def test_fusion_off_matches_vanilla_ddim(bundle, y):
    cfg = SamplerConfig(mode="ddim", ddim_steps=10, fusion_enabled=False, seed=3)
    out, _ = sample(bundle, y, cfg)
    van = sample_vanilla(bundle.cnp, y, bundle.schedule, "ddim", 10, seed=3)
    assert torch.equal(out, van)


def test_fusion_off_matches_vanilla_ancestral(y, tiny_bundle):
    b = tiny_bundle
    b.schedule = make_schedule(20)
    _perturb(b.cnp, 4)
    cfg = SamplerConfig(mode="ancestral", fusion_enabled=False, seed=5)
    out, rec = sample(b, y, cfg)
    assert torch.equal(out, sample_vanilla(b.cnp, y, b.schedule, "ancestral", seed=5))
    assert len(rec) == 20


def test_forced_full_weight_returns_reference(bundle, y):
    cfg = SamplerConfig(mode="ddim", ddim_steps=10, force_weight=1.0, seed=1)
    out, rec = sample(bundle, y, cfg)
    ref = predict_reference(bundle.reference, y)
    assert torch.equal(out, ref.clamp(-1, 1))
    assert all(w == 1.0 for w in rec.w_mean)


def test_sampling_is_reproducible(bundle, y):
    for mode in ("ddim", "ancestral"):
        if mode == "ancestral":
            bundle.schedule = make_schedule(15)
        cfg = SamplerConfig(mode=mode, ddim_steps=8, seed=11, record_trajectory=True, snapshot_steps=(1,))
        a, ra = sample(bundle, y, cfg)
        b, rb = sample(bundle, y, cfg)
        assert torch.equal(a, b)
        assert ra.w_mean == rb.w_mean and ra.steps == rb.steps
        assert torch.equal(ra.snapshots[1], rb.snapshots[1])


def test_output_range_and_record_length(bundle, y):
    out, rec = sample(bundle, y, SamplerConfig(ddim_steps=7))
    assert out.min() >= -1 and out.max() <= 1
    assert len(rec) == 7 and len(rec.w_mean) == 7 and len(rec.seconds) == 7
    assert all(0.3 <= w <= 1 for w in rec.w_mean)


def test_reference_computed_once(bundle, y, monkeypatch):
    calls = []
    orig = bundle.reference.forward
    monkeypatch.setattr(bundle.reference, "forward", lambda z: calls.append(1) or orig(z))
    sample(bundle, y, SamplerConfig(ddim_steps=6))
    assert len(calls) == 1


def test_errors(bundle, y):
    with pytest.raises(ValueError):
        sample(bundle, y[:, :3], SamplerConfig())
    with pytest.raises(ValueError):
        sample(bundle, y, SamplerConfig(ddim_steps=1001))
    with pytest.raises(ValueError):
        SamplerConfig(eta=1.0)
    with pytest.raises(ValueError):
        SamplerConfig(mode="euler")


def test_step_pairs_end_at_zero(bundle):
    pairs = step_pairs(bundle.schedule, SamplerConfig(ddim_steps=50))
    assert len(pairs) == 50 and pairs[0][0] == 1000 and pairs[-1] == (1, 0)


def test_denoise_step_eta0_zero_weight_is_pure_diffusion(bundle, y):
    x_t = torch.randn_like(y)
    ref = predict_reference(bundle.reference, y)
    fused = denoise_step(bundle, x_t, y, ref, 500, 480, SamplerConfig(eta=0.0, force_weight=0.0))
    plain = denoise_step(bundle, x_t, y, None, 500, 480, SamplerConfig(fusion_enabled=False))
    assert torch.equal(fused, plain)


def test_denoise_step_final_ancestral_adds_no_noise(bundle, y):
    x_t = torch.randn_like(y)
    ref = predict_reference(bundle.reference, y)
    cfg = SamplerConfig(mode="ancestral")
    a = denoise_step(bundle, x_t, y, ref, 1, 0, cfg, torch.Generator().manual_seed(0))
    b = denoise_step(bundle, x_t, y, ref, 1, 0, cfg, torch.Generator().manual_seed(1))
    assert torch.equal(a, b)


@pytest.mark.parametrize("mode,t,t_prev", [("ddim", 700, 680), ("ancestral", 300, 299)])
def test_denoise_step_matches_inline_composition(bundle, y, mode, t, t_prev):
    s = bundle.schedule
    x_t = torch.randn_like(y)
    ref = predict_reference(bundle.reference, y)
    cfg = SamplerConfig(mode=mode, eta=0.3)
    out = denoise_step(bundle, x_t, y, ref, t, t_prev, cfg, torch.Generator().manual_seed(2))

    with torch.no_grad():
        eps_hat = bundle.cnp(torch.cat([x_t, y], 1), t)
        x0_eps = predict_x0(x_t, eps_hat, t, s).clamp(-1, 1)
        w = clamp_weight(bundle.wa(torch.cat([x_t, y, ref], 1), t), 0.3)
        x0t = fuse(x0_eps, ref, w).clamp(-1, 1)
        if mode == "ddim":
            expect = ddim_step(x0t, eps_hat, t, t_prev, s)
        else:
            z = torch.randn(y.shape, generator=torch.Generator().manual_seed(2))
            expect = posterior_step(x0t, x_t, t, z, s)
    torch.testing.assert_close(out, expect, rtol=0, atol=0)


def test_identity_reference_swap_keeps_control_flow(bundle, y):
    cfg = SamplerConfig(ddim_steps=5)
    _, rec_a = sample(bundle, y, cfg)
    bundle.reference = IdentityReference(4)
    _, rec_b = sample(bundle, y, cfg)
    assert rec_a.steps == rec_b.steps


def test_trajectory_json(bundle, y, tmp_path):
    import json

    _, rec = sample(bundle, y, SamplerConfig(ddim_steps=4, record_trajectory=True, snapshot_steps=(1000,)))
    rec.save(tmp_path / "t.json")
    doc = json.loads((tmp_path / "t.json").read_text())
    assert doc["steps"] == rec.steps and doc["snapshot_steps"] == [1000]
