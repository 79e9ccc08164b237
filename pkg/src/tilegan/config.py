"""Declarative run configuration, loaded from YAML with unknown keys rejected.

Every field has a default, so an empty document is a valid desk-scale
configuration. Layout::

    seed: 0
    dataset: null            # optional path to an existing dataset directory
    synth:    {n_scenes, size, mix, noise_level, split_fractions}
    ingest:   {tile_size, stride, lo_pct, hi_pct, flood_only, raw_shape, raw_dtype}
    wae:      {latent_dim, conv_layers, mmd_weight, kernel, kernel_scales, unbiased_mmd,
               lr, epochs, batch_size, base_channels, max_channels,
               per_resolution: {<px>: {<any of the above>}}}
    gan:      {resolutions, images_per_step, batch_sizes, noise_dim, w_gd, adversarial_loss,
               fade_in_fraction, lr_g, lr_d, gp_weight, drift_weight, fmap_base, fmap_max, head_res}
    grow:     {rows, cols, seed_corner, seed_tile, feather, feather_width}
    evaluate: {k, pairs_per_cell, window, oracle_threshold}
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError
from .synthetic_scenes import REFERENCE_MIX


@dataclass
class SynthSection:
    n_scenes: int = 400
    size: int = 64
    mix: tuple[float, ...] = REFERENCE_MIX
    noise_level: float = 0.1
    split_fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)


@dataclass
class IngestSection:
    tile_size: int = 256
    stride: int | None = None
    lo_pct: float = 2.0
    hi_pct: float = 98.0
    flood_only: bool = True
    raw_shape: tuple[int, int] | None = None
    raw_dtype: str = "float32"


_WAE_KEYS = ("latent_dim", "conv_layers", "mmd_weight", "kernel", "kernel_scales", "unbiased_mmd",
             "lr", "epochs", "batch_size", "base_channels", "max_channels")


@dataclass
class WaeSection:
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
    per_resolution: dict = field(default_factory=dict)

    def for_resolution(self, resolution: int, seed: int):
        from .wae import WaeConfig
        kw = {k: getattr(self, k) for k in _WAE_KEYS}
        override = self.per_resolution.get(resolution, {})
        unknown = set(override) - set(_WAE_KEYS)
        if unknown:
            raise ConfigError(f"wae.per_resolution.{resolution}: unknown keys {sorted(unknown)}")
        kw.update(override)
        return WaeConfig(resolution=resolution, seed=seed + resolution, **kw)


@dataclass
class GanSection:
    resolutions: tuple[int, ...] = (8, 16, 32)
    images_per_step: int = 2000
    batch_sizes: int | tuple[int, ...] = 16
    noise_dim: int | None = None  # defaults to the latent length
    w_gd: float = 0.5
    adversarial_loss: str = "wgan-gp"
    fade_in_fraction: float = 0.5
    lr_g: float = 1e-3
    lr_d: float = 1e-3
    gp_weight: float = 10.0
    drift_weight: float = 1e-3
    fmap_base: int = 512
    fmap_max: int = 32
    head_res: int = 4

    def to_gan_config(self, latent_dim: int, seed: int):
        from .cpgan import GanConfig, ProgressiveSchedule
        sched = ProgressiveSchedule.from_resolutions(list(self.resolutions), self.images_per_step,
                                                     self.batch_sizes)
        skip = {"resolutions", "images_per_step", "batch_sizes", "noise_dim"}
        kw = {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.name not in skip}
        return GanConfig(schedule=sched, latent_dim=latent_dim,
                         noise_dim=self.noise_dim or latent_dim, seed=seed, **kw)


@dataclass
class GrowSection:
    rows: int = 4
    cols: int = 4
    seed_corner: str = "TR"
    seed_tile: int = 0  # index into the held-out tiles
    feather: bool = False
    feather_width: int = 2


@dataclass
class EvaluateSection:
    k: tuple[int, ...] = (4, 3)
    pairs_per_cell: int = 1000
    window: int = 8
    oracle_threshold: int = 80


_SECTIONS = {"synth": SynthSection, "ingest": IngestSection, "wae": WaeSection,
             "gan": GanSection, "grow": GrowSection, "evaluate": EvaluateSection}


@dataclass
class RunConfig:
    seed: int = 0
    dataset: str | None = None
    synth: SynthSection = field(default_factory=SynthSection)
    ingest: IngestSection = field(default_factory=IngestSection)
    wae: WaeSection = field(default_factory=WaeSection)
    gan: GanSection = field(default_factory=GanSection)
    grow: GrowSection = field(default_factory=GrowSection)
    evaluate: EvaluateSection = field(default_factory=EvaluateSection)

    def validate(self) -> "RunConfig":
        extra = set(self.wae.per_resolution) - set(self.gan.resolutions)
        if extra:
            raise ConfigError(f"wae.per_resolution has resolutions outside the schedule: {sorted(extra)}")
        if self.dataset is not None and not Path(self.dataset).is_dir():
            raise ConfigError(f"dataset directory {self.dataset} does not exist")
        # build the derived configs once so their own checks run at load time
        for r in self.gan.resolutions:
            self.wae.for_resolution(r, self.seed)
        self.gan.to_gan_config(self.wae.latent_dim, self.seed)
        return self

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _plain(x):
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def _section(cls, data, name):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
    kw = {}
    for k, v in data.items():
        if isinstance(v, list):
            v = tuple(v)
        kw[k] = v
    if "per_resolution" in kw:
        kw["per_resolution"] = {int(r): dict(o or {}) for r, o in (kw["per_resolution"] or {}).items()}
    try:
        return cls(**kw)
    except TypeError as exc:
        raise ConfigError(f"section {name!r}: {exc}") from None


def run_config_from_dict(data: dict | None) -> RunConfig:
    data = dict(data or {})
    unknown = set(data) - {"seed", "dataset", *_SECTIONS}
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    kw = {name: _section(cls, data.get(name), name) for name, cls in _SECTIONS.items()}
    cfg = RunConfig(seed=int(data.get("seed", 0)), dataset=data.get("dataset"), **kw)
    return cfg.validate()


def load_run_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML ({exc})") from None
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return run_config_from_dict(data)
