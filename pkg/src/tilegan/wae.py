"""Convolutional Wasserstein auto-encoders used to embed visible quadrants.

One auto-encoder is trained per resolution step. The objective is the
WAE-MMD loss: pixel reconstruction error plus a maximum mean discrepancy
penalty pulling the batch of codes towards a standard normal prior.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, InputError

# Values quoted for the full-scale setup.
FULL_SCALE_LATENT_DIM = 2048
FULL_SCALE_WAE_EPOCHS = 150
FULL_SCALE_WAE_RESOLUTIONS = (16, 32, 64, 128)


@dataclass
class WaeConfig:
    resolution: int
    latent_dim: int = 64
    conv_layers: int = 3
    mmd_weight: float = 10.0
    kernel: str = "rbf"
    kernel_scales: tuple[float, ...] | None = None
    unbiased_mmd: bool = False
    lr: float = 1e-3
    epochs: int = 20
    batch_size: int = 64
    base_channels: int = 16
    max_channels: int = 128
    seed: int = 0

    def __post_init__(self):
        if not 3 <= self.conv_layers <= 6:
            raise ConfigError(f"conv_layers must be in [3, 6], got {self.conv_layers}")
        if self.latent_dim < 1:
            raise ConfigError("latent_dim must be >= 1")
        if not self.mmd_weight > 0:
            raise ConfigError("mmd_weight must be positive")
        if self.kernel not in ("rbf", "imq"):
            raise ConfigError(f"kernel must be 'rbf' or 'imq', got {self.kernel!r}")
        if self.kernel_scales is not None:
            self.kernel_scales = tuple(float(s) for s in self.kernel_scales)
            if not self.kernel_scales or min(self.kernel_scales) <= 0:
                raise ConfigError("kernel_scales must be a non-empty list of positive values")
        if self.resolution < 2 ** self.conv_layers:
            raise ConfigError(f"{self.conv_layers} stride-2 layers reduce a {self.resolution}px "
                              "input below one pixel")
        if self.resolution & (self.resolution - 1):
            raise ConfigError(f"resolution must be a power of two, got {self.resolution}")

    def scales(self) -> tuple[float, ...]:
        if self.kernel_scales is not None:
            return self.kernel_scales
        d = float(self.latent_dim)
        return (d / 8, d / 4, d / 2, d, 2 * d)

    def channels(self) -> list[int]:
        return [min(self.max_channels, self.base_channels * 2**i) for i in range(self.conv_layers)]


def encoder_spatial_sizes(config: WaeConfig) -> list[int]:
    return [config.resolution // 2 ** (i + 1) for i in range(config.conv_layers)]


def _block(cin, cout, transpose=False):
    conv = (nn.ConvTranspose2d(cin, cout, 3, stride=2, padding=1, output_padding=1)
            if transpose else nn.Conv2d(cin, cout, 3, stride=2, padding=1))
    return nn.Sequential(conv, nn.BatchNorm2d(cout), nn.LeakyReLU(0.2))


class WaeModel(nn.Module):
    """Encoder/decoder pair operating on ``(N, 1, R, R)`` tensors scaled to [0, 1]."""

    def __init__(self, config: WaeConfig):
        super().__init__()
        self.config = config
        self.history: list[dict] = []
        ch = config.channels()
        last = config.resolution // 2 ** config.conv_layers
        enc, cin = [], 1
        for c in ch:
            enc.append(_block(cin, c))
            cin = c
        self.encoder = nn.Sequential(*enc, nn.Flatten(), nn.Linear(ch[-1] * last * last, config.latent_dim))
        dec = [nn.Linear(config.latent_dim, ch[-1] * last * last),
               nn.Unflatten(1, (ch[-1], last, last)), nn.LeakyReLU(0.2)]
        for cin, cout in zip(ch[::-1][:-1], ch[::-1][1:]):
            dec.append(_block(cin, cout, transpose=True))
        dec += [nn.ConvTranspose2d(ch[0], 1, 3, stride=2, padding=1, output_padding=1), nn.Sigmoid()]
        self.decoder = nn.Sequential(*dec)

    @property
    def n_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def forward(self, x):
        return self.decoder(self.encoder(x))

    def _as_input(self, tiles) -> torch.Tensor:
        arr = np.asarray(tiles)
        r = self.config.resolution
        if arr.shape[-2:] != (r, r):
            raise InputError(f"expected {r}x{r} tiles, got shape {arr.shape}")
        x = torch.as_tensor(arr.reshape(-1, 1, r, r), dtype=self._dtype()) / 255.0
        return x

    def _dtype(self):
        return next(self.parameters()).dtype

    @torch.no_grad()
    def encode(self, tiles) -> np.ndarray:
        """Latent code(s) of uint8 tile(s); deterministic, uses inference-mode statistics."""
        single = np.ndim(tiles) == 2
        was = self.training
        self.eval()
        z = self.encoder(self._as_input(tiles)).numpy()
        self.train(was)
        return z[0] if single else z

    @torch.no_grad()
    def decode(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        single = z.ndim == 1
        z = z.reshape(-1, z.shape[-1])
        if z.shape[1] != self.config.latent_dim:
            raise InputError(f"latent length {z.shape[1]} != latent_dim {self.config.latent_dim}")
        was = self.training
        self.eval()
        x = self.decoder(torch.as_tensor(z, dtype=self._dtype()))[:, 0].numpy()
        self.train(was)
        out = np.clip(np.floor(x * 255.0 + 0.5), 0, 255).astype(np.uint8)
        return out[0] if single else out


def build_wae(config: WaeConfig) -> WaeModel:
    with torch.random.fork_rng():
        torch.manual_seed(config.seed)
        return WaeModel(config)


def encode(model: WaeModel, tile) -> np.ndarray:
    return model.encode(tile)


def decode(model: WaeModel, z) -> np.ndarray:
    return model.decode(z)


# ------------------------------------------------------------------- MMD

def _sq_dists(a, b):
    return ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)


def _kernel(d2, kernel, scale):
    if kernel == "rbf":
        return torch.exp(-d2 / (2.0 * scale))
    if kernel == "imq":
        c = 2.0 * scale
        return c / (c + d2)
    raise InputError(f"unknown kernel {kernel!r}")


def _symmetric_mean(k):
    # K_xy and K_yx hold the same values; summing them sorted makes the mean identical
    return torch.sort(k.reshape(-1)).values.sum() / k.numel()


def mmd(x, y, kernel: str = "rbf", scales=(1.0,), unbiased: bool = False):
    """Squared MMD between sample sets ``x`` (n, d) and ``y`` (m, d), summed over kernel scales.

    RBF: ``k = exp(-|a-b|^2 / (2 s))`` with ``s`` the squared bandwidth.
    IMQ: ``k = C / (C + |a-b|^2)`` with ``C = 2 s``.
    The default biased estimator keeps the diagonal terms and is never negative.
    The result is bit-identical under swapping ``x`` and ``y``.
    """
    x = torch.as_tensor(x)
    y = torch.as_tensor(y, dtype=x.dtype)
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[1]:
        raise InputError(f"mmd needs (n, d) and (m, d) samples, got {tuple(x.shape)} and {tuple(y.shape)}")
    n, m = len(x), len(y)
    if n < 1 or m < 1 or (unbiased and (n < 2 or m < 2)):
        raise InputError("not enough samples for the MMD estimate")
    dxx, dyy, dxy = _sq_dists(x, x), _sq_dists(y, y), _sq_dists(x, y)
    total = x.new_zeros(())
    for s in scales:
        kxx, kyy, kxy = _kernel(dxx, kernel, s), _kernel(dyy, kernel, s), _kernel(dxy, kernel, s)
        if unbiased:
            txx = (kxx.sum() - kxx.diagonal().sum()) / (n * (n - 1))
            tyy = (kyy.sum() - kyy.diagonal().sum()) / (m * (m - 1))
        else:
            txx, tyy = kxx.mean(), kyy.mean()
        total = total + ((txx + tyy) - 2.0 * _symmetric_mean(kxy))
    return total


def wae_loss(batch, model, prior_samples, lam: float | None = None):
    """Return ``(total, recon, mmd)`` tensors with ``total = recon + lam * mmd``.

    ``batch`` holds pixels scaled to [0, 1]; ``recon`` is their mean squared
    reconstruction error. ``model`` needs ``encoder`` and ``decoder``
    callables and, if ``lam`` is omitted, a ``config`` with ``mmd_weight``.
    """
    if len(batch) == 0:
        raise InputError("empty batch")
    cfg = getattr(model, "config", None)
    lam = cfg.mmd_weight if lam is None else lam
    kernel = cfg.kernel if cfg is not None else "rbf"
    scales = cfg.scales() if cfg is not None else (1.0,)
    unbiased = cfg.unbiased_mmd if cfg is not None else False
    z = model.encoder(batch)
    recon = ((model.decoder(z) - batch) ** 2).mean()
    mmd_term = mmd(z, prior_samples, kernel, scales, unbiased)
    return recon + lam * mmd_term, recon, mmd_term


# -------------------------------------------------------------- training

def _tile_array(tiles, resolution):
    if isinstance(tiles, np.ndarray):
        arr = tiles
    else:
        arr = np.stack([getattr(t, "pixels", t) for t in tiles]) if len(tiles) else np.zeros((0, resolution, resolution))
    if arr.ndim != 3 or arr.shape[1:] != (resolution, resolution):
        raise InputError(f"WAE at {resolution}px needs {resolution}x{resolution} tiles, "
                         f"got shape {arr.shape}; downscale first")
    return arr


def train_wae(tiles, config: WaeConfig, checkpoint_path=None, model: WaeModel | None = None) -> WaeModel:
    """Train a WAE on uint8 tiles at ``config.resolution``; one history record per epoch."""
    arr = _tile_array(tiles, config.resolution)
    model = model or build_wae(config)
    if config.epochs > 0 and len(arr) < 2:
        raise InputError("need at least two tiles to train")
    x_all = torch.as_tensor(arr[:, None], dtype=torch.float32) / 255.0
    gen = torch.Generator().manual_seed(config.seed + 1)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    model.train()
    for epoch in range(config.epochs):
        perm = torch.randperm(len(x_all), generator=gen)
        sums = np.zeros(3)
        seen = 0
        for start in range(0, len(perm), config.batch_size):
            idx = perm[start:start + config.batch_size]
            if len(idx) < 2:  # batch norm needs more than one sample
                continue
            batch = x_all[idx]
            prior = torch.randn(len(idx), config.latent_dim, generator=gen)
            total, recon, mmd_term = wae_loss(batch, model, prior)
            opt.zero_grad()
            total.backward()
            opt.step()
            sums += len(idx) * np.array([total.item(), recon.item(), mmd_term.item()])
            seen += len(idx)
        t, r, m = sums / seen
        model.history.append({"epoch": epoch, "total": t, "recon": r, "mmd": m})
    model.eval()
    if checkpoint_path is not None:
        save_wae(model, checkpoint_path)
    return model


def save_wae(model: WaeModel, path) -> str:
    return save_checkpoint(path, "wae", asdict(model.config), model.state_dict(),
                           {"history": model.history})


def load_wae(path) -> WaeModel:
    ck = load_checkpoint(path, kind="wae")
    cfg = dict(ck.config)
    if cfg.get("kernel_scales") is not None:
        cfg["kernel_scales"] = tuple(cfg["kernel_scales"])
    model = WaeModel(WaeConfig(**cfg))
    model.load_state_dict({k: torch.as_tensor(v) for k, v in ck.tensors.items()})
    model.history = list(ck.extra.get("history", []))
    model.checkpoint_id = ck.id
    model.eval()
    return model
