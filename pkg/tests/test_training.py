import numpy as np
import pytest
import torch
from torch import nn

from cloudfuse.checkpoint import load_bundle
from cloudfuse.data import make_synthetic_pairs, stack
from cloudfuse.networks import param_checksum
from cloudfuse.schedule import forward_sample, make_schedule, predict_x0
from cloudfuse.training import (
    LossReport,
    MissingPrerequisite,
    NonFiniteLoss,
    StageConfig,
    default_stages,
    loss_ddpm,
    loss_joint,
    loss_wa,
    run_stage,
)

S = make_schedule(1000)


class EchoNoise(nn.Module):
    """Stub predictor returning a fixed tensor."""

    def __init__(self, value):
        super().__init__()
        self.value = value

    def forward(self, x, t):
        return self.value


def test_ddpm_loss_zero_for_perfect_predictor():
    eps = torch.randn(2, 3, 8, 8)
    x0 = torch.rand_like(eps)
    assert loss_ddpm(EchoNoise(eps), x0, x0, torch.tensor([5, 900]), eps, S) == 0


def test_ddpm_loss_unit_for_zero_predictor():
    gen = torch.Generator().manual_seed(0)
    eps = torch.randn(10, 1, 100, 100, generator=gen)  # 1e5 pixels
    x0 = torch.zeros_like(eps)
    t = torch.randint(1, 1001, (10,), generator=gen)
    loss = loss_ddpm(EchoNoise(torch.zeros_like(eps)), x0, x0, t, eps, S)
    assert float(loss) == pytest.approx(1.0, abs=0.05)


def test_ddpm_loss_shape_check():
    with pytest.raises(ValueError):
        loss_ddpm(EchoNoise(None), torch.zeros(1, 1, 4, 4), torch.zeros(1, 1, 4, 4), torch.tensor([1]),
                  torch.zeros(1, 1, 4, 5), S)


def test_wa_loss_zero_cases():
    x0 = torch.rand(2, 3, 8, 8)
    xt, y, t = torch.randn_like(x0), torch.randn_like(x0), torch.tensor([3, 4])
    # W = 1 with a perfect reference
    one = EchoNoise(torch.ones_like(x0))
    assert loss_wa(one, torch.randn_like(x0), x0, x0, (xt, y, t)) == 0
    # W = 0 with a perfect diffusion estimate
    zero = EchoNoise(torch.zeros_like(x0))
    assert loss_wa(zero, x0, torch.randn_like(x0), x0, (xt, y, t)) == 0


def test_loss_joint_arithmetic():
    assert loss_joint(2.0, 3.0, 1.0) == 5.0
    assert loss_joint(1.25, 0.0, 1.0) == 1.25
    assert loss_joint(1.5, 0.5, 2.0) == 3.5


def _wa_batch(cnp, seed=0):
    gen = torch.Generator().manual_seed(seed)
    x0 = torch.rand(2, 2, 6, 6, generator=gen, dtype=torch.float64) * 2 - 1
    y = torch.rand(2, 2, 6, 6, generator=gen, dtype=torch.float64) * 2 - 1
    ref = torch.rand(2, 2, 6, 6, generator=gen, dtype=torch.float64) * 2 - 1
    eps = torch.randn(2, 2, 6, 6, generator=gen, dtype=torch.float64)
    t = torch.tensor([50, 700])
    xt = forward_sample(x0, t, eps, S)
    eps_hat = cnp(torch.cat([xt, y], 1), t)
    x0_eps = predict_x0(xt, eps_hat, t, S).clamp(-1, 1)
    return x0, y, ref, eps, t, xt, x0_eps


def test_stop_gradient_exact_zero(toy_net_cls):
    torch.manual_seed(0)
    cnp = toy_net_cls(4, 2).double()
    wa = toy_net_cls(6, 2, squash=True).double()
    x0, y, ref, eps, t, xt, x0_eps = _wa_batch(cnp)
    # Deliberately pass the *non*-detached estimate: the loss must cut the link itself.
    loss_wa(wa, x0_eps, ref, x0, (xt, y, t)).backward()
    for p in cnp.parameters():
        assert p.grad is None or torch.count_nonzero(p.grad) == 0
    assert any(p.grad is not None and torch.count_nonzero(p.grad) > 0 for p in wa.parameters())


def test_wa_step_leaves_cnp_bitwise_unchanged(toy_net_cls):
    torch.manual_seed(0)
    cnp = toy_net_cls(4, 2).double()
    wa = toy_net_cls(6, 2, squash=True).double()
    before = param_checksum(cnp)
    opt = torch.optim.Adam(list(cnp.parameters()) + list(wa.parameters()), lr=1e-2)
    x0, y, ref, eps, t, xt, x0_eps = _wa_batch(cnp)
    loss_wa(wa, x0_eps, ref, x0, (xt, y, t)).backward()
    opt.step()
    assert param_checksum(cnp) == before


def _fd_check(loss_fn, params, n_coords=12, h=1e-6, seed=0):
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params)
    rng = np.random.default_rng(seed)
    analytic, numeric = [], []
    for _ in range(n_coords):
        k = int(rng.integers(len(params)))
        p, g = params[k], grads[k]
        idx = tuple(int(rng.integers(s)) for s in p.shape)
        with torch.no_grad():
            orig = p[idx].item()
            p[idx] = orig + h
            up = loss_fn().item()
            p[idx] = orig - h
            down = loss_fn().item()
            p[idx] = orig
        analytic.append(g[idx].item())
        numeric.append((up - down) / (2 * h))
    a, n = np.array(analytic), np.array(numeric)
    return np.linalg.norm(a - n) / max(np.linalg.norm(n), 1e-12)


def test_ddpm_gradient_matches_finite_differences(toy_net_cls):
    torch.manual_seed(1)
    cnp = toy_net_cls(4, 2).double()
    gen = torch.Generator().manual_seed(3)
    x0 = torch.rand(2, 2, 5, 5, generator=gen, dtype=torch.float64)
    y = torch.rand(2, 2, 5, 5, generator=gen, dtype=torch.float64)
    eps = torch.randn(2, 2, 5, 5, generator=gen, dtype=torch.float64)
    t = torch.tensor([10, 600])
    rel = _fd_check(lambda: loss_ddpm(cnp, x0, y, t, eps, S), list(cnp.parameters()))
    assert rel < 1e-3


def test_wa_gradient_matches_finite_differences(toy_net_cls):
    torch.manual_seed(2)
    cnp = toy_net_cls(4, 2).double()
    wa = toy_net_cls(6, 2, squash=True).double()
    with torch.no_grad():
        x0, y, ref, eps, t, xt, x0_eps = _wa_batch(cnp, seed=4)
    rel = _fd_check(lambda: loss_wa(wa, x0_eps, ref, x0, (xt, y, t)), list(wa.parameters()))
    assert rel < 1e-3


def test_stage_config_validation():
    with pytest.raises(ValueError):
        StageConfig("warmup", 32)
    with pytest.raises(ValueError):
        StageConfig("joint", 32, lam=0.0)
    assert StageConfig("cnp_small", 8).trainable == {"cnp"}
    assert StageConfig("wa_frozen", 8).trainable == {"wa"}
    assert StageConfig("joint", 8).trainable == {"cnp", "wa"}


def test_default_stages_quarter_size():
    stages = default_stages(256)
    assert [s.image_size for s in stages] == [64, 256, 256]
    assert [s.batch_size for s in stages] == [64, 16, 16]
    assert all(s.learning_rate == 1e-5 for s in stages)
    assert stages[2].lam == 1.0


@pytest.fixture(scope="module")
def small_data():
    cloudy, clear = stack(make_synthetic_pairs(12, 32, 4, seed=0))
    return cloudy, clear


def test_stage_prerequisites(tiny_bundle, small_data):
    with pytest.raises(MissingPrerequisite):
        run_stage(StageConfig("wa_frozen", 32, 2, 1e-3, 1), tiny_bundle, *small_data)
    with pytest.raises(MissingPrerequisite):
        run_stage(StageConfig("joint", 32, 2, 1e-3, 1), tiny_bundle, *small_data)


def test_stage_isolation_and_checkpoints(tiny_bundle, small_data, tmp_path):
    b = tiny_bundle
    sums = lambda: (param_checksum(b.cnp), param_checksum(b.wa), param_checksum(b.reference))  # noqa: E731
    c0, w0, r0 = sums()
    run_stage(StageConfig("cnp_small", 8, 4, 1e-3, 3), b, *small_data, checkpoint_dir=tmp_path)
    c1, w1, r1 = sums()
    assert c1 != c0 and w1 == w0 and r1 == r0
    run_stage(StageConfig("wa_frozen", 32, 2, 1e-3, 3), b, *small_data, checkpoint_dir=tmp_path)
    c2, w2, r2 = sums()
    assert c2 == c1 and w2 != w1 and r2 == r0
    _, rep = run_stage(StageConfig("joint", 32, 2, 1e-3, 3), b, *small_data, checkpoint_dir=tmp_path)
    c3, w3, r3 = sums()
    assert c3 != c2 and w3 != w2 and r3 == r0
    assert set(rep.values) == {"ddpm", "wa", "joint"}
    for stage in ("cnp_small", "wa_frozen", "joint"):
        assert (tmp_path / f"{stage}.pt").exists()
        assert (tmp_path / f"{stage}_loss.csv").exists()
    again = load_bundle(tmp_path / "joint.pt")
    assert param_checksum(again.cnp) == c3 and param_checksum(again.reference) == r0
    assert again.meta["stages"] == ["cnp_small", "wa_frozen", "joint"]


def test_nonfinite_loss_aborts(tiny_bundle, small_data):
    cloudy, clear = small_data
    bad = clear.clone()
    bad[:, 0, 0, 0] = float("nan")
    with pytest.raises(NonFiniteLoss, match="iteration"):
        run_stage(StageConfig("cnp_small", 32, 12, 1e-3, 2), tiny_bundle, cloudy, bad)


def test_loss_report_csv(tmp_path):
    rep = LossReport("joint")
    for i in range(4):
        rep.log(ddpm=1.0 / (i + 1), wa=0.5)
    path = rep.to_csv(tmp_path / "l.csv")
    lines = path.read_text().splitlines()
    assert lines[0] == "iteration,ddpm,wa,ddpm_running,wa_running"
    assert len(lines) == 5
    assert rep.mean("ddpm", first=2) == pytest.approx(0.75)


def test_plateau_early_stop(tiny_bundle, small_data):
    cfg = StageConfig("cnp_small", 8, 4, 0.0, 500, early_stop=True, plateau_window=20, plateau_tol=0.5)
    _, rep = run_stage(cfg, tiny_bundle, *small_data)
    # lr = 0 never improves, so the run stops after two windows
    assert len(rep) == 40


@pytest.mark.slow
def test_cnp_small_loss_decreases():
    torch.manual_seed(0)
    from cloudfuse.networks import CNP_TINY, WA_TINY, DenoiserBundle, build_cnp, build_wa
    from cloudfuse.reference import IdentityReference

    cloudy, clear = stack(make_synthetic_pairs(64, 64, 4, seed=11))
    b = DenoiserBundle(build_cnp(4, CNP_TINY), build_wa(4, WA_TINY), IdentityReference(4), S, 4)
    _, rep = run_stage(StageConfig("cnp_small", 16, 16, 5e-4, 2000, log_every=0), b, cloudy, clear)
    assert rep.mean("ddpm", last=100) < rep.mean("ddpm", first=100)
