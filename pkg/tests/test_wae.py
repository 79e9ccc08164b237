import math

import numpy as np
import pytest
import torch
from torch import nn

from tilegan.errors import ConfigError, InputError
from tilegan.gradcheck import TinyWae, finite_difference_check
from tilegan.pipeline import quadrant_set
from tilegan.synthetic_scenes import generate_corpus
from tilegan.wae import (WaeConfig, build_wae, decode, encode, encoder_spatial_sizes, load_wae, mmd,
                         save_wae, train_wae, wae_loss)


def _brute_mmd(x, y, kernel, scale):
    def k(a, b):
        d2 = sum((ai - bi) ** 2 for ai, bi in zip(a, b))
        if kernel == "rbf":
            return math.exp(-d2 / (2 * scale))
        return 2 * scale / (2 * scale + d2)
    n, m = len(x), len(y)
    kxx = sum(k(a, b) for a in x for b in x) / n**2
    kyy = sum(k(a, b) for a in y for b in y) / m**2
    kxy = sum(k(a, b) for a in x for b in y) / (n * m)
    return kxx + kyy - 2 * kxy


@pytest.fixture(scope="module")
def toy_quadrants():
    corpus = generate_corpus(16, (0.25, 0.25, 0.25, 0.25), rng_seed=0, size=32)
    return quadrant_set(corpus.tiles, 16)


@pytest.fixture(scope="module")
def trained(toy_quadrants):
    return train_wae(toy_quadrants, WaeConfig(16, latent_dim=32, epochs=20, batch_size=8))


def test_encoder_output_length():
    model = build_wae(WaeConfig(16, latent_dim=32, conv_layers=3))
    z = model.encode(np.zeros((16, 16), np.uint8))
    assert z.shape == (32,)
    assert model.n_parameters == sum(p.numel() for p in model.parameters()) > 0


def test_spatial_trace_for_six_layers():
    cfg = WaeConfig(128, latent_dim=8, conv_layers=6)
    assert encoder_spatial_sizes(cfg) == [64, 32, 16, 8, 4, 2]
    model = build_wae(cfg).eval()
    x = torch.zeros(1, 1, 128, 128)
    sizes = []
    for blk in list(model.encoder)[:6]:
        x = blk(x)
        sizes.append(x.shape[-1])
    assert sizes == [64, 32, 16, 8, 4, 2]


@pytest.mark.parametrize("kw", [dict(resolution=16, conv_layers=7), dict(resolution=16, conv_layers=2),
                                dict(resolution=4, conv_layers=3), dict(resolution=16, latent_dim=0),
                                dict(resolution=16, mmd_weight=0.0), dict(resolution=16, kernel_scales=()),
                                dict(resolution=16, kernel="laplace")])
def test_invalid_configs(kw):
    with pytest.raises(ConfigError):
        WaeConfig(**kw)


def test_default_scales_follow_latent_dim():
    assert WaeConfig(16, latent_dim=64).scales() == (8.0, 16.0, 32.0, 64.0, 128.0)


# -------------------------------------------------------------------- mmd

def test_mmd_identical_samples_is_zero():
    x = torch.randn(7, 3, dtype=torch.float64)
    assert abs(mmd(x, x, scales=(0.5, 2.0)).item()) < 1e-9


def test_mmd_singletons_closed_form():
    got = mmd(torch.tensor([[0.0]], dtype=torch.float64), torch.tensor([[1.0]], dtype=torch.float64))
    assert got.item() == pytest.approx(2 - 2 * math.exp(-0.5), abs=1e-12)
    assert got.item() == pytest.approx(0.7869, abs=1e-4)


@pytest.mark.parametrize("kernel", ["rbf", "imq"])
def test_mmd_matches_double_loop(kernel):
    rng = np.random.default_rng(0)
    for _ in range(10):
        x, y = rng.normal(size=(4, 2)), rng.normal(size=(4, 2))
        got = mmd(torch.as_tensor(x), torch.as_tensor(y), kernel, scales=(0.7,)).item()
        assert abs(got - _brute_mmd(x.tolist(), y.tolist(), kernel, 0.7)) < 1e-9


def test_mmd_symmetry_and_scale_additivity():
    rng = np.random.default_rng(1)
    x, y = torch.as_tensor(rng.normal(size=(5, 3))), torch.as_tensor(rng.normal(size=(6, 3)))
    scales = (0.5, 1.0, 4.0)
    assert mmd(x, y, scales=scales).item() == mmd(y, x, scales=scales).item()
    parts = sum(mmd(x, y, scales=(s,)).item() for s in scales)
    assert abs(mmd(x, y, scales=scales).item() - parts) < 1e-9


def test_unbiased_variant_drops_diagonal():
    x = torch.tensor([[0.0], [2.0]], dtype=torch.float64)
    y = torch.tensor([[1.0], [3.0]], dtype=torch.float64)
    k = lambda d2: math.exp(-d2 / 2)
    expected = k(4) + k(4) - 2 * (k(1) + k(9) + k(1) + k(1)) / 4
    assert mmd(x, y, unbiased=True).item() == pytest.approx(expected, abs=1e-12)


def test_mmd_dimension_mismatch():
    with pytest.raises(InputError):
        mmd(torch.zeros(3, 2), torch.zeros(3, 4))


# ------------------------------------------------------------------- loss

class _Identity(nn.Module):
    def __init__(self):
        super().__init__()
        self.encoder = nn.Flatten()
        self.decoder = nn.Unflatten(1, (1, 1, 2))


class _TwoParam(nn.Module):
    """z = a * (x1 + x2); reconstruction = (b z, b z)."""

    def __init__(self, a, b):
        super().__init__()
        self.a = nn.Parameter(torch.tensor(a, dtype=torch.float64))
        self.b = nn.Parameter(torch.tensor(b, dtype=torch.float64))
        self.encoder = lambda x: (self.a * x.flatten(1).sum(1))[:, None]
        self.decoder = lambda z: (self.b * z).expand(-1, 2).reshape(-1, 1, 1, 2)


def test_perfect_autoencoder_at_prior_has_zero_loss():
    batch = torch.rand(5, 1, 1, 2, dtype=torch.float64)
    model = _Identity()
    total, recon, m = wae_loss(batch, model, model.encoder(batch), lam=10.0)
    assert total.item() == 0.0 and recon.item() == 0.0


def test_zero_lambda_returns_recon_term():
    batch = torch.rand(6, 1, 1, 4, dtype=torch.float64)
    model = TinyWae().double()
    total, recon, _ = wae_loss(batch, model, torch.randn(6, 2, dtype=torch.float64), lam=0.0)
    assert total.item() == recon.item()


def test_two_parameter_model_hand_computation():
    batch = torch.tensor([[[[0.2, 0.6]]]], dtype=torch.float64)
    prior = torch.zeros(1, 1, dtype=torch.float64)
    total, recon, m = wae_loss(batch, _TwoParam(0.5, 1.0), prior, lam=10.0)
    # z = 0.4, reconstruction (0.4, 0.4): squared errors 0.04 and 0.04
    assert recon.item() == pytest.approx(0.04, abs=1e-15)
    assert m.item() == pytest.approx(2 - 2 * math.exp(-0.08), abs=1e-15)
    assert total.item() == pytest.approx(0.04 + 10 * (2 - 2 * math.exp(-0.08)), abs=1e-14)


def test_loss_decomposition_is_exact():
    model = build_wae(WaeConfig(8, latent_dim=4))
    batch = torch.rand(4, 1, 8, 8)
    total, recon, m = wae_loss(batch, model, torch.randn(4, 4))
    assert (total - (recon + model.config.mmd_weight * m)).item() == 0.0


def test_empty_batch_rejected():
    with pytest.raises(InputError):
        wae_loss(torch.zeros(0, 1, 1, 4), TinyWae(), torch.zeros(0, 2), lam=1.0)


def test_gradient_matches_finite_differences():
    torch.manual_seed(0)
    model = TinyWae().double()
    assert sum(p.numel() for p in model.parameters()) <= 100
    batch = torch.rand(6, 1, 1, 4, dtype=torch.float64)
    prior = torch.randn(6, 2, dtype=torch.float64)
    for kernel in ("rbf", "imq"):
        model.config = WaeConfig(8, latent_dim=2, kernel=kernel, kernel_scales=(0.5, 2.0))
        res = finite_difference_check(lambda: wae_loss(batch, model, prior)[0], list(model.parameters()))
        assert res.max_rel_error < 1e-3


# --------------------------------------------------------------- training

def test_zero_epochs_gives_empty_history(toy_quadrants):
    model = train_wae(toy_quadrants, WaeConfig(16, latent_dim=8, epochs=0))
    assert model.history == []


def test_toy_run_halves_reconstruction(trained):
    h = trained.history
    assert len(h) == 20 and [r["epoch"] for r in h] == list(range(20))
    assert h[-1]["recon"] <= 0.5 * h[0]["recon"]


def test_training_is_deterministic(toy_quadrants):
    cfg = WaeConfig(16, latent_dim=8, epochs=3, batch_size=16)
    assert train_wae(toy_quadrants, cfg).history == train_wae(toy_quadrants, cfg).history


def test_wrong_resolution_rejected(toy_quadrants):
    with pytest.raises(InputError):
        train_wae(toy_quadrants, WaeConfig(8, epochs=1))


def test_reencoding_training_data_is_close(trained, toy_quadrants):
    recon = decode(trained, encode(trained, toy_quadrants)).astype(float) / 255
    mse = ((recon - toy_quadrants / 255.0) ** 2).mean()
    assert mse < 2 * trained.history[-1]["recon"]


def test_decode_zero_vector_and_encode_determinism(trained, toy_quadrants):
    tile = decode(trained, np.zeros(32))
    assert tile.shape == (16, 16) and tile.dtype == np.uint8
    z = encode(trained, np.stack([toy_quadrants[0], toy_quadrants[0]]))
    np.testing.assert_array_equal(z[0], z[1])
    assert np.isfinite(z).all()
    with pytest.raises(InputError):
        encode(trained, np.zeros((8, 8), np.uint8))
    with pytest.raises(InputError):
        decode(trained, np.zeros(5))


def test_checkpoint_roundtrip(trained, toy_quadrants, tmp_path):
    ck_id = save_wae(trained, tmp_path / "w.ckpt")
    again = load_wae(tmp_path / "w.ckpt")
    assert again.checkpoint_id == ck_id
    assert again.history == trained.history
    np.testing.assert_array_equal(again.encode(toy_quadrants[:4]), trained.encode(toy_quadrants[:4]))
