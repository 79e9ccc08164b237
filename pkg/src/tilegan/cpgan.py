"""Conditional progressive GAN for completing the missing quadrant of a tile.

The generator receives the latent codes of the three visible quadrants
(top-left, top-right, bottom-left) together with a noise vector and draws
the bottom-right quadrant. A local discriminator judges the generated
quadrant on its own, a global discriminator judges the reassembled tile;
their losses are mixed as ``(1 - w_gd) * local + w_gd * global``.

Both networks grow progressively: each step doubles the resolution and the
new layers are faded in with a blend coefficient ``alpha`` that ramps from
0 to 1 over the first part of the step.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, InputError, StateError
from .tile_store import assemble_quadrants, downscale_array

# Full-scale values: 2048-long codes and noise, 16 -> 128 px,
# 15 million images per step, batch size 8 at 128 px.
FULL_SCALE_LATENT_DIM = 2048
FULL_SCALE_RESOLUTIONS = (16, 32, 64, 128)
FULL_SCALE_IMAGES_PER_STEP = 15_000_000
FULL_SCALE_BATCH_AT_128 = 8

LOSS_KINDS = ("wgan-gp", "nonsaturating")


@dataclass
class ScheduleStep:
    resolution: int
    images: int
    batch_size: int


@dataclass
class ProgressiveSchedule:
    steps: list[ScheduleStep]

    def __post_init__(self):
        self.steps = [s if isinstance(s, ScheduleStep) else ScheduleStep(**s) for s in self.steps]
        if not self.steps:
            raise ConfigError("schedule needs at least one step")
        first = self.steps[0].resolution
        if first < 1 or first & (first - 1):
            raise ConfigError(f"first resolution must be a power of two, got {first}")
        for prev, nxt in zip(self.steps, self.steps[1:]):
            if nxt.resolution != 2 * prev.resolution:
                raise ConfigError(f"resolutions must double step to step ({prev.resolution} -> {nxt.resolution})")
        for s in self.steps:
            if s.batch_size < 1 or s.images < 1:
                raise ConfigError("batch sizes and image counts must be >= 1")

    @classmethod
    def from_resolutions(cls, resolutions, images_per_step: int = 2000, batch_sizes=16):
        if isinstance(batch_sizes, int):
            batch_sizes = [batch_sizes] * len(resolutions)
        return cls([ScheduleStep(r, images_per_step, b) for r, b in zip(resolutions, batch_sizes)])

    @property
    def resolutions(self) -> list[int]:
        return [s.resolution for s in self.steps]


def full_scale_schedule() -> ProgressiveSchedule:
    # only the 128 px batch size is reported; 16 is a stand-in for the other steps
    batches = [16, 16, 16, FULL_SCALE_BATCH_AT_128]
    return ProgressiveSchedule([ScheduleStep(r, FULL_SCALE_IMAGES_PER_STEP, b)
                                for r, b in zip(FULL_SCALE_RESOLUTIONS, batches)])


@dataclass
class GanConfig:
    schedule: ProgressiveSchedule = field(
        default_factory=lambda: ProgressiveSchedule.from_resolutions([8, 16, 32]))
    latent_dim: int = 64
    noise_dim: int = 64
    w_gd: float = 0.5
    adversarial_loss: str = "wgan-gp"
    fade_in_fraction: float = 0.5
    lr_g: float = 1e-3
    lr_d: float = 1e-3
    betas: tuple[float, float] = (0.0, 0.99)
    gp_weight: float = 10.0
    drift_weight: float = 1e-3
    fmap_base: int = 512
    fmap_max: int = 32
    fmap_min: int = 1
    head_res: int = 4
    leak: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.schedule, Mapping):
            self.schedule = ProgressiveSchedule(**self.schedule)
        self.betas = tuple(self.betas)
        if not 0.0 <= self.w_gd <= 1.0:
            raise ConfigError(f"w_gd must lie in [0, 1], got {self.w_gd}")
        if self.adversarial_loss not in LOSS_KINDS:
            raise ConfigError(f"adversarial_loss must be one of {LOSS_KINDS}")
        if not 0.0 <= self.fade_in_fraction <= 1.0:
            raise ConfigError("fade_in_fraction must lie in [0, 1]")
        if self.latent_dim < 1 or self.noise_dim < 1:
            raise ConfigError("latent_dim and noise_dim must be >= 1")
        h = self.head_res
        if h < 1 or h & (h - 1) or h > self.schedule.steps[0].resolution:
            raise ConfigError(f"head_res must be a power of two <= {self.schedule.steps[0].resolution}")

    def channels(self, res: int) -> int:
        return max(self.fmap_min, min(self.fmap_max, self.fmap_base // res))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "GanConfig":
        return cls(**dict(d))


def fade_alpha(images_seen: int, step_images: int, fade_in_fraction: float) -> float:
    """Linear fade-in coefficient, reaching 1 after ``fade_in_fraction`` of the step's images."""
    ramp = fade_in_fraction * step_images
    if ramp <= 0:
        return 1.0
    return min(1.0, images_seen / ramp)


# ---------------------------------------------------------------- networks

def _blend(alpha, fine, coarse):
    return alpha * fine + (1.0 - alpha) * coarse


class _UpBlock(nn.Sequential):
    def __init__(self, cin, cout, leak):
        super().__init__(nn.Upsample(scale_factor=2, mode="nearest"),
                         nn.Conv2d(cin, cout, 3, padding=1), nn.LeakyReLU(leak),
                         nn.Conv2d(cout, cout, 3, padding=1), nn.LeakyReLU(leak))


class _DownBlock(nn.Sequential):
    def __init__(self, cin, cout, leak):
        super().__init__(nn.Conv2d(cin, cin, 3, padding=1), nn.LeakyReLU(leak),
                         nn.Conv2d(cin, cout, 3, padding=1), nn.LeakyReLU(leak),
                         nn.AvgPool2d(2))


class Generator(nn.Module):
    """Progressively grown quadrant generator, outputs in [-1, 1]."""

    def __init__(self, config: GanConfig):
        super().__init__()
        self.config = config
        c = config.channels
        h, r0, leak = config.head_res, config.schedule.steps[0].resolution, config.leak
        n_in = 3 * config.latent_dim + config.noise_dim
        # the single layer that mixes the three codes with the noise
        self.combine = nn.ConvTranspose2d(n_in, c(h), h)
        self.act = nn.LeakyReLU(leak)
        base, r = [], h
        while r < r0:
            base.append(_UpBlock(c(r), c(2 * r), leak))
            r *= 2
        self.base = nn.Sequential(*base)
        self.blocks = nn.ModuleList()
        self.to_img = nn.ModuleList([nn.Conv2d(c(r0), 1, 1)])
        self.resolutions = [r0]

    @property
    def resolution(self) -> int:
        return self.resolutions[-1]

    def grow(self) -> None:
        r = 2 * self.resolution
        c = self.config.channels
        self.blocks.append(_UpBlock(c(r // 2), c(r), self.config.leak))
        self.to_img.append(nn.Conv2d(c(r), 1, 1))
        self.resolutions.append(r)

    def conditioning(self, z_tl, z_tr, z_bl, noise) -> torch.Tensor:
        """Seed feature map of shape ``(B, C, head_res, head_res)``."""
        cfg = self.config
        for name, v, n in (("z_tl", z_tl, cfg.latent_dim), ("z_tr", z_tr, cfg.latent_dim),
                           ("z_bl", z_bl, cfg.latent_dim), ("noise", noise, cfg.noise_dim)):
            if v.ndim != 2 or v.shape[1] != n:
                raise InputError(f"{name} must have shape (B, {n}), got {tuple(v.shape)}")
        x = torch.cat([z_tl, z_tr, z_bl, noise], dim=1)
        return self.act(self.combine(x[:, :, None, None]))

    def branches(self, z_tl, z_tr, z_bl, noise):
        """``(fine, upsampled coarse)`` outputs at the current resolution (requires >= 1 growth)."""
        if not self.blocks:
            raise StateError("no coarse branch before the first growth step")
        h = self.base(self.conditioning(z_tl, z_tr, z_bl, noise))
        for blk in self.blocks[:-1]:
            h = blk(h)
        coarse = torch.tanh(self.to_img[-2](h))
        fine = torch.tanh(self.to_img[-1](self.blocks[-1](h)))
        return fine, F.interpolate(coarse, scale_factor=2, mode="nearest")

    def forward(self, z_tl, z_tr, z_bl, noise, alpha: float = 1.0, resolution: int | None = None):
        resolution = self.resolution if resolution is None else resolution
        if resolution not in self.resolutions:
            raise StateError(f"resolution {resolution} not grown (available: {self.resolutions})")
        depth = self.resolutions.index(resolution)
        if depth == len(self.blocks) and depth > 0:
            fine, coarse = self.branches(z_tl, z_tr, z_bl, noise)
            return _blend(alpha, fine, coarse)
        h = self.base(self.conditioning(z_tl, z_tr, z_bl, noise))
        for blk in self.blocks[:depth]:
            h = blk(h)
        return torch.tanh(self.to_img[depth](h))


class Discriminator(nn.Module):
    """Progressively grown critic returning one logit per image.

    ``extra_stages`` adds stride-2 stages in front of the base network, so a
    critic with ``extra_stages=1`` takes inputs twice as large.
    """

    def __init__(self, config: GanConfig, extra_stages: int = 0):
        super().__init__()
        self.config = config
        c, h, leak = config.channels, config.head_res, config.leak
        rb = config.schedule.steps[0].resolution * 2**extra_stages
        self.from_img = nn.ModuleList([self._from_img(rb)])
        base, r = [], rb
        while r > h:
            base.append(_DownBlock(c(r), c(r // 2), leak))
            r //= 2
        self.base = nn.Sequential(*base)
        self.head = nn.Sequential(nn.Flatten(), nn.Linear(c(h) * h * h, 1))
        self.blocks = nn.ModuleList()
        self.resolutions = [rb]

    def _from_img(self, r):
        return nn.Sequential(nn.Conv2d(1, self.config.channels(r), 1), nn.LeakyReLU(self.config.leak))

    @property
    def resolution(self) -> int:
        return self.resolutions[-1]

    @property
    def depth(self) -> int:
        """Number of stride-2 stages between the input and the head."""
        return len(self.base) + len(self.blocks)

    def grow(self) -> None:
        r = 2 * self.resolution
        c = self.config.channels
        self.blocks.append(_DownBlock(c(r), c(r // 2), self.config.leak))
        self.from_img.append(self._from_img(r))
        self.resolutions.append(r)

    def forward(self, x, alpha: float = 1.0):
        r = self.resolution
        if x.ndim != 4 or x.shape[1:] != (1, r, r):
            raise InputError(f"critic expects (B, 1, {r}, {r}) input, got {tuple(x.shape)}")
        if self.blocks:
            fine = self.blocks[-1](self.from_img[-1](x))
            coarse = self.from_img[-2](F.avg_pool2d(x, 2))
            h = _blend(alpha, fine, coarse)
            for blk in reversed(self.blocks[:-1]):
                h = blk(h)
        else:
            h = self.from_img[0](x)
        return self.head(self.base(h)).squeeze(1)


# ------------------------------------------------------------ conditioning

@dataclass
class ConditioningInput:
    z_tl: np.ndarray
    z_tr: np.ndarray
    z_bl: np.ndarray
    noise: np.ndarray

    def __post_init__(self):
        for name in ("z_tl", "z_tr", "z_bl", "noise"):
            v = np.asarray(getattr(self, name), dtype=np.float64)
            if v.ndim == 1:
                v = v[None]
            if not np.isfinite(v).all():
                raise InputError(f"{name} has non-finite entries")
            setattr(self, name, v)

    def tensors(self, dtype=torch.float32):
        return [torch.as_tensor(v, dtype=dtype) for v in (self.z_tl, self.z_tr, self.z_bl, self.noise)]


def combine_conditioning(generator: Generator, c: ConditioningInput) -> torch.Tensor:
    dtype = next(generator.parameters()).dtype
    with torch.no_grad():
        return generator.conditioning(*c.tensors(dtype))


def to_uint8(x) -> np.ndarray:
    """Map generator output in [-1, 1] to 8-bit pixels."""
    x = x.detach().cpu().numpy() if hasattr(x, "detach") else np.asarray(x)
    return np.clip(np.floor((x + 1.0) * 127.5 + 0.5), 0, 255).astype(np.uint8)


def to_signed(pixels) -> torch.Tensor:
    """Map 8-bit pixels to floats in [-1, 1]."""
    return torch.as_tensor(np.asarray(pixels), dtype=torch.float32) / 127.5 - 1.0


def generate_quadrant(generator: Generator, c: ConditioningInput, resolution: int | None = None,
                      alpha: float = 1.0) -> np.ndarray:
    """Generate bottom-right quadrant(s) as uint8; one ``(R, R)`` array per conditioning row."""
    if not 0.0 <= alpha <= 1.0:
        raise InputError(f"alpha must lie in [0, 1], got {alpha}")
    dtype = next(generator.parameters()).dtype
    with torch.no_grad():
        out = generator(*c.tensors(dtype), alpha=alpha, resolution=resolution)
    out = to_uint8(out[:, 0])
    return out[0] if len(out) == 1 else out


def assemble_full(tl, tr, bl, br):
    """Place three context quadrants and the generated one into a tile twice the size."""
    get = lambda t: getattr(t, "pixels", t)
    return assemble_quadrants(get(tl), get(tr), get(bl), get(br))


# ------------------------------------------------------------------ losses

def combined_loss(l_ld, l_gd, w_gd: float):
    """Weighted mix of the local and global terms, with the local weight ``1 - w_gd``."""
    if not 0.0 <= w_gd <= 1.0:
        raise InputError(f"w_gd must lie in [0, 1], got {w_gd}")
    return (1.0 - w_gd) * l_ld + w_gd * l_gd


def discriminator_scores(local_d: Discriminator, global_d: Discriminator, quadrant, full_image,
                         alpha: float = 1.0):
    s = local_d.resolution
    if quadrant.shape[-2:] != (s, s) or full_image.shape[-2:] != (2 * s, 2 * s):
        raise InputError(f"expected a {s}px quadrant and a {2 * s}px image, got "
                         f"{tuple(quadrant.shape[-2:])} and {tuple(full_image.shape[-2:])}")
    return local_d(quadrant, alpha), global_d(full_image, alpha)


def gradient_penalty(d: Discriminator, real, fake, alpha: float, eps):
    x_hat = (eps * real.detach() + (1.0 - eps) * fake.detach()).requires_grad_(True)
    (grad,) = torch.autograd.grad(d(x_hat, alpha).sum(), x_hat, create_graph=True)
    return ((grad.flatten(1).norm(dim=1) - 1.0) ** 2).mean()


def discriminator_loss(d: Discriminator, real, fake, alpha: float = 1.0, kind: str = "wgan-gp",
                       gp_weight: float = 10.0, drift_weight: float = 1e-3, eps=None,
                       generator: torch.Generator | None = None):
    """Critic loss on a batch of real and (detached) generated images.

    ``wgan-gp``: Wasserstein loss with gradient penalty on random
    interpolates and a small drift term keeping real logits near zero.
    ``nonsaturating``: logistic loss.
    """
    fake = fake.detach()
    real_logit, fake_logit = d(real, alpha), d(fake, alpha)
    if kind == "wgan-gp":
        if eps is None:
            eps = torch.rand(len(real), 1, 1, 1, generator=generator, dtype=real.dtype)
        gp = gradient_penalty(d, real, fake, alpha, eps)
        return (fake_logit.mean() - real_logit.mean() + gp_weight * gp
                + drift_weight * (real_logit ** 2).mean())
    if kind == "nonsaturating":
        return F.softplus(-real_logit).mean() + F.softplus(fake_logit).mean()
    raise InputError(f"unknown adversarial loss {kind!r}")


def generator_adv_loss(d: Discriminator, fake, alpha: float = 1.0, kind: str = "wgan-gp"):
    logit = d(fake, alpha)
    if kind == "wgan-gp":
        return -logit.mean()
    if kind == "nonsaturating":
        return F.softplus(-logit).mean()
    raise InputError(f"unknown adversarial loss {kind!r}")


@dataclass
class LossBreakdown:
    iteration: int
    resolution: int
    alpha: float
    l_ld: float
    l_gd: float
    l_combined: float
    generator_loss: float
    g_local: float
    g_global: float

    def to_record(self) -> dict:
        return asdict(self)


# ------------------------------------------------------------ model state

class ProgressiveGAN:
    """Generator plus local and global critics, with progressive-growing bookkeeping."""

    def __init__(self, config: GanConfig):
        self.config = config
        with torch.random.fork_rng():
            torch.manual_seed(config.seed)
            self.generator = Generator(config)
            self.local_d = Discriminator(config, extra_stages=0)
            self.global_d = Discriminator(config, extra_stages=1)
        self.step = 0
        self.images_seen = 0

    @property
    def resolution(self) -> int:
        return self.config.schedule.steps[self.step].resolution

    @property
    def alpha(self) -> float:
        if self.step == 0:
            return 1.0
        s = self.config.schedule.steps[self.step]
        return fade_alpha(self.images_seen, s.images, self.config.fade_in_fraction)

    @property
    def is_last_step(self) -> bool:
        return self.step == len(self.config.schedule.steps) - 1

    def grow(self) -> None:
        if self.is_last_step:
            raise StateError(f"already at the final resolution {self.resolution}")
        # growth draws fresh initial weights; keep it reproducible
        with torch.random.fork_rng():
            torch.manual_seed(self.config.seed + 1000 * (self.step + 1))
            self.generator.grow()
            self.local_d.grow()
            self.global_d.grow()
        self.step += 1
        self.images_seen = 0

    def modules(self):
        return {"g": self.generator, "dl": self.local_d, "dg": self.global_d}

    def state_tensors(self) -> dict:
        out = {}
        for prefix, m in self.modules().items():
            for k, v in m.state_dict().items():
                out[f"{prefix}.{k}"] = v
        return out

    def save(self, path) -> str:
        return save_checkpoint(path, "cpgan", self.config.to_dict(), self.state_tensors(),
                               {"step": self.step, "images_seen": self.images_seen})

    @classmethod
    def load(cls, path) -> "ProgressiveGAN":
        ck = load_checkpoint(path, kind="cpgan")
        model = cls(GanConfig.from_dict(ck.config))
        for _ in range(ck.extra["step"]):
            model.grow()
        model.images_seen = ck.extra["images_seen"]
        for prefix, m in model.modules().items():
            sd = {k[len(prefix) + 1:]: torch.as_tensor(v) for k, v in ck.tensors.items()
                  if k.startswith(prefix + ".")}
            m.load_state_dict(sd)
        model.checkpoint_id = ck.id
        return model


def grow_step(model: ProgressiveGAN) -> ProgressiveGAN:
    model.grow()
    return model


# ---------------------------------------------------------------- training

def _fade_real(x, alpha):
    if alpha >= 1.0:
        return x
    low = F.interpolate(F.avg_pool2d(x, 2), scale_factor=2, mode="nearest")
    return _blend(alpha, x, low)


def _split(x):
    s = x.shape[-1] // 2
    return x[..., :s, :s], x[..., :s, s:], x[..., s:, :s], x[..., s:, s:]


def _check_waes(waes, config):
    for r in config.schedule.resolutions:
        if r not in waes:
            raise ConfigError(f"no trained WAE for resolution {r}")
        w = waes[r]
        if w.config.resolution != r or w.config.latent_dim != config.latent_dim:
            raise ConfigError(f"WAE for {r}px has resolution {w.config.resolution} and "
                              f"latent_dim {w.config.latent_dim}; expected {r} and {config.latent_dim}")


def _encode_context(wae, full):
    s = full.shape[-1] // 2
    return [torch.as_tensor(wae.encode(q), dtype=torch.float32)
            for q in (full[:, :s, :s], full[:, :s, s:], full[:, s:, :s])]


def train_gan(tiles, waes: Mapping[int, object], config: GanConfig, checkpoint_dir=None,
              log_path=None) -> tuple[ProgressiveGAN, list[LossBreakdown]]:
    """Run the full progressive schedule on uint8 tiles of at least twice the final resolution.

    For each step at quadrant resolution ``S`` the tiles are downscaled to
    ``2S``, split into quadrants, and the top-left, top-right and bottom-left
    quadrants are encoded by the WAE for ``S``; the bottom-right quadrant is
    the real target. One :class:`LossBreakdown` is recorded per iteration.
    """
    _check_waes(waes, config)
    arr = tiles if isinstance(tiles, np.ndarray) else np.stack([getattr(t, "pixels", t) for t in tiles])
    top = 2 * config.schedule.resolutions[-1]
    if arr.ndim != 3 or arr.shape[1] != arr.shape[2] or arr.shape[1] < top or arr.shape[1] % top:
        raise InputError(f"training tiles must be square multiples of {top}px, got shape {arr.shape}")
    model = ProgressiveGAN(config)
    gen = torch.Generator().manual_seed(config.seed + 7)
    records: list[LossBreakdown] = []
    log = open(log_path, "w") if log_path is not None else None
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    iteration = 0
    try:
        for step_idx, step in enumerate(config.schedule.steps):
            if step_idx > 0:
                model.grow()
            s = step.resolution
            full = downscale_array(arr, 2 * s)
            ctx = _encode_context(waes[s], full)
            real_all = to_signed(full)[:, None]
            params = dict(lr=config.lr_d, betas=config.betas)
            opt_g = torch.optim.Adam(model.generator.parameters(), lr=config.lr_g, betas=config.betas)
            opt_dl = torch.optim.Adam(model.local_d.parameters(), **params)
            opt_dg = torch.optim.Adam(model.global_d.parameters(), **params)
            order = torch.randperm(len(full), generator=gen)
            cursor = 0
            while model.images_seen < step.images:
                b = min(step.batch_size, step.images - model.images_seen)
                if cursor + b > len(order):
                    order, cursor = torch.randperm(len(full), generator=gen), 0
                idx = order[cursor:cursor + b]
                cursor += b
                alpha = model.alpha
                rec = _train_iteration(model, real_all[idx], [c[idx] for c in ctx], alpha,
                                       opt_g, opt_dl, opt_dg, gen)
                rec = LossBreakdown(iteration, s, alpha, *rec)
                records.append(rec)
                if log:
                    log.write(json.dumps(rec.to_record()) + "\n")
                iteration += 1
                model.images_seen += b
            if ckpt_dir is not None:
                model.save(ckpt_dir / f"gan_step{step_idx}_{s}px.ckpt")
    finally:
        if log:
            log.close()
    return model, records


def _train_iteration(model, real_full, ctx, alpha, opt_g, opt_dl, opt_dg, gen):
    cfg = model.config
    kind = cfg.adversarial_loss
    g, dl, dg = model.generator, model.local_d, model.global_d
    real_full = _fade_real(real_full, alpha)
    tl, tr, bl, real_br = _split(real_full)
    noise = torch.randn(len(real_full), cfg.noise_dim, generator=gen)
    fake_br = g(*ctx, noise, alpha=alpha)
    fake_full = assemble_quadrants(tl, tr, bl, fake_br)

    kw = dict(kind=kind, gp_weight=cfg.gp_weight, drift_weight=cfg.drift_weight, generator=gen)
    l_ld = discriminator_loss(dl, real_br, fake_br, alpha, **kw)
    opt_dl.zero_grad()
    l_ld.backward()
    opt_dl.step()
    l_gd = discriminator_loss(dg, real_full, fake_full, alpha, **kw)
    opt_dg.zero_grad()
    l_gd.backward()
    opt_dg.step()

    g_local = generator_adv_loss(dl, fake_br, alpha, kind)
    g_global = generator_adv_loss(dg, fake_full, alpha, kind)
    g_total = combined_loss(g_local, g_global, cfg.w_gd)
    opt_g.zero_grad()
    g_total.backward()
    opt_g.step()

    ld, gd = l_ld.item(), l_gd.item()
    return ld, gd, combined_loss(ld, gd, cfg.w_gd), g_total.item(), g_local.item(), g_global.item()


def load_loss_log(path) -> list[LossBreakdown]:
    with open(path) as fh:
        return [LossBreakdown(**json.loads(line)) for line in fh if line.strip()]
