import pytest
import torch

from cloudfuse.data import make_synthetic_pairs, stack
from cloudfuse.metrics import psnr
from cloudfuse.networks import param_checksum
from cloudfuse.reference import (
    IdentityReference,
    ResidualCNN,
    build_reference,
    predict_reference,
    reference_from_state,
    reference_state,
    train_reference,
)


def test_identity_passes_through():
    y = torch.rand(2, 4, 16, 16) * 2 - 1
    assert torch.equal(predict_reference(IdentityReference(4), y), y)


def test_untrained_residual_cnn_is_near_identity_and_bounded():
    torch.manual_seed(0)
    net = ResidualCNN(4)
    y = torch.rand(2, 4, 16, 16) * 1.8 - 0.9
    out = predict_reference(net, y)
    assert out.shape == y.shape
    assert float((out - y).abs().max()) < 1e-5
    extreme = predict_reference(net, torch.ones(1, 4, 8, 8))
    assert extreme.max() <= 1 and extreme.min() >= -1


def test_band_mismatch():
    with pytest.raises(ValueError):
        predict_reference(ResidualCNN(4), torch.zeros(1, 3, 8, 8))


def test_zero_epochs_unchanged():
    net = ResidualCNN(4)
    before = param_checksum(net)
    cloudy, clear = stack(make_synthetic_pairs(4, 16, 4, seed=0))
    assert train_reference(net, cloudy, clear, epochs=0) == []
    assert param_checksum(net) == before


def test_training_errors():
    with pytest.raises(ValueError):
        train_reference(IdentityReference(4), torch.zeros(1, 4, 8, 8), torch.zeros(1, 4, 8, 8), 1)
    with pytest.raises(ValueError):
        train_reference(ResidualCNN(4), torch.zeros(0, 4, 8, 8), torch.zeros(0, 4, 8, 8), 1)


@pytest.fixture(scope="module")
def trained():
    torch.manual_seed(0)
    train = make_synthetic_pairs(200, 32, 4, seed=21)
    cloudy, clear = stack(train)
    net = ResidualCNN(4)
    losses = train_reference(net, cloudy, clear, epochs=100, batch_size=16, lr=1e-3, seed=0, max_iterations=200)
    return net, losses


def test_training_reduces_l1(trained):
    _, losses = trained
    assert len(losses) == 200
    assert all(torch.isfinite(torch.tensor(losses)))
    assert sum(losses[-20:]) / 20 < sum(losses[:20]) / 20


def test_trained_baseline_preserves_clean_inputs(trained):
    net, _ = trained
    held_out = make_synthetic_pairs(20, 32, 4, seed=22)
    _, clear = stack(held_out)
    out = predict_reference(net, clear)
    scores = [psnr((o + 1) / 2, (c + 1) / 2) for o, c in zip(out, clear)]
    assert sum(scores) / len(scores) > 35.0


def test_state_round_trip(trained):
    net, _ = trained
    again = reference_from_state(reference_state(net))
    y = torch.rand(1, 4, 16, 16) * 2 - 1
    assert torch.equal(predict_reference(again, y), predict_reference(net, y))
    assert isinstance(build_reference("identity", 4), IdentityReference)
    with pytest.raises(ValueError):
        build_reference("memorynet", 4)
