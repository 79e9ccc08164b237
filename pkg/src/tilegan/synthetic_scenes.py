"""Procedural SAR-like flood scenes with ground-truth water masks.

Four archetypes mirror the image types found by clustering real flood
imagery: scattered small water patches, mostly dry land, elongated water
strips, and a single large lake. Water is rendered dark and land bright,
with multiplicative speckle on top, which is the qualitative look of
radar backscatter. No physical scattering model is attempted.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy import ndimage

from .errors import InputError
from .tile_store import Raster, Tile, TileManifest, assign_splits, build_manifest

ARCHETYPES = ("water_patches", "dry_patches", "water_strips", "lake")

# "% images" composition of the real set under the 4-cluster model
REFERENCE_MIX = (0.29, 0.41, 0.19, 0.11)

_MAX_TRIES = 200


@dataclass(frozen=True)
class SceneSpec:
    archetype: str
    size: int = 256
    rng_seed: int = 0
    noise_level: float = 0.1
    water_level: float = 35.0
    land_level: float = 140.0
    land_texture: float = 18.0

    def __post_init__(self):
        if self.archetype not in ARCHETYPES:
            raise InputError(f"unknown archetype {self.archetype!r}; expected one of {ARCHETYPES}")
        if self.size < 32 or self.size & (self.size - 1):
            raise InputError(f"scene size must be a power of two >= 32, got {self.size}")
        if not 0 <= self.noise_level < 1:
            raise InputError(f"noise_level must lie in [0, 1), got {self.noise_level}")
        if not self.water_level < self.land_level:
            raise InputError("water must be darker than land")


def _smooth_field(rng, size, sigma):
    field = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma, mode="wrap")
    return (field - field.mean()) / (field.std() + 1e-12)


def _threshold_fraction(field, fraction):
    cut = np.quantile(field, 1.0 - fraction)
    return (field > cut).astype(np.uint8)


def _patches(rng, size, lo, hi, sigma_div):
    fraction = rng.uniform(lo, hi)
    return _threshold_fraction(_smooth_field(rng, size, size / sigma_div), fraction)


def component_aspect_ratios(mask: np.ndarray) -> list[float]:
    """Principal-axis length ratio of every 8-connected component of ``mask``."""
    labels, n = ndimage.label(mask, structure=np.ones((3, 3)))
    ratios = []
    for i in range(1, n + 1):
        ys, xs = np.nonzero(labels == i)
        if len(ys) < 3:
            ratios.append(float("inf"))
            continue
        ev = np.linalg.eigvalsh(np.cov(np.stack([ys, xs]).astype(float)))
        ratios.append(float(np.sqrt(ev[-1] / ev[0])) if ev[0] > 1e-12 else float("inf"))
    return ratios


def _ribbon(rng, size, width):
    length = rng.uniform(0.75, 1.0) * size
    y, x = rng.uniform(0.1, 0.9, size=2) * size
    theta = rng.uniform(0, 2 * np.pi)
    # start so that the ribbon runs across the frame
    y -= 0.5 * length * np.sin(theta)
    x -= 0.5 * length * np.cos(theta)
    n = int(length)
    turn = ndimage.gaussian_filter1d(rng.normal(0, 0.08, n), 6)
    path = np.zeros((size, size), dtype=bool)
    for k in range(n):
        theta += turn[k]
        y += np.sin(theta)
        x += np.cos(theta)
        iy, ix = int(round(y)), int(round(x))
        if 0 <= iy < size and 0 <= ix < size:
            path[iy, ix] = True
    if not path.any():
        return None
    dist = ndimage.distance_transform_edt(~path)
    return (dist <= width / 2).astype(np.uint8)


def _strips(rng, size):
    width = max(3.0, size / 12)
    n_target = int(rng.integers(3, 5))
    mask = np.zeros((size, size), dtype=np.uint8)
    guard = np.zeros((size, size), dtype=bool)
    placed = 0
    for _ in range(_MAX_TRIES):
        if placed == n_target:
            break
        rib = _ribbon(rng, size, width)
        if rib is None:
            continue
        labels, n = ndimage.label(rib, structure=np.ones((3, 3)))
        if n != 1 or min(component_aspect_ratios(rib)) < 5:
            continue
        if (guard & rib.astype(bool)).any():
            continue
        mask |= rib
        guard = ndimage.binary_dilation(mask, iterations=max(2, int(width / 2)))
        placed += 1
    if placed == 0:
        raise RuntimeError("could not place any water strip")
    return mask


def _lake(rng, size):
    for _ in range(_MAX_TRIES):
        fraction = rng.uniform(0.45, 0.55)
        cy, cx = rng.uniform(0.4, 0.6, size=2) * size
        radius = np.sqrt(fraction * size * size / np.pi)
        yy, xx = np.mgrid[0:size, 0:size]
        ang = np.arctan2(yy - cy, xx - cx)
        r = np.full_like(ang, radius)
        for k in range(2, 6):
            r += radius * rng.uniform(0, 0.05) * np.cos(k * ang + rng.uniform(0, 2 * np.pi))
        mask = (np.hypot(yy - cy, xx - cx) < r).astype(np.uint8)
        _, n = ndimage.label(mask)
        if n == 1 and mask.mean() >= 0.42:
            return mask
    raise RuntimeError("could not draw a lake covering enough of the scene")


def _render(spec: SceneSpec, mask, rng):
    size = spec.size
    land = spec.land_level + spec.land_texture * _smooth_field(rng, size, size / 16)
    land += 0.5 * spec.land_texture * _smooth_field(rng, size, 1.5)
    water = spec.water_level + 4.0 * _smooth_field(rng, size, size / 16)
    img = np.where(mask.astype(bool), water, land)
    if spec.noise_level > 0:
        shape = 1.0 / spec.noise_level**2
        img = img * rng.gamma(shape, 1.0 / shape, size=img.shape)
    return np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8)


def generate_scene(spec: SceneSpec) -> tuple[Raster, np.ndarray]:
    """Draw one scene; returns the 8-bit raster and its water mask."""
    rng = np.random.default_rng(spec.rng_seed)
    size = spec.size
    if spec.archetype == "water_patches":
        mask = _patches(rng, size, 0.03, 0.08, 24)
    elif spec.archetype == "dry_patches":
        mask = _patches(rng, size, 0.004, 0.015, 32)
    elif spec.archetype == "water_strips":
        mask = _strips(rng, size)
    else:
        mask = _lake(rng, size)
    pixels = _render(spec, mask, rng)
    geo_id = f"synth-{spec.archetype}-{spec.rng_seed}"
    return Raster(pixels, geo_id, mask), mask


def water_land_contrast(pixels: np.ndarray, mask: np.ndarray) -> float:
    """Mean land intensity minus mean water intensity (NaN if either class is absent)."""
    m = mask.astype(bool)
    if m.all() or not m.any():
        return float("nan")
    return float(pixels[~m].mean() - pixels[m].mean())


def mix_counts(n: int, mix: Sequence[float]) -> list[int]:
    """Largest-remainder apportionment of ``n`` items to proportions ``mix``."""
    mix = np.asarray(mix, dtype=float)
    if len(mix) != len(ARCHETYPES) or (mix < 0).any() or abs(mix.sum() - 1.0) > 1e-9:
        raise InputError(f"mix must be {len(ARCHETYPES)} non-negative proportions summing to 1")
    exact = n * mix
    counts = np.floor(exact + 1e-9).astype(int)
    remainder = exact - counts
    for i in np.argsort(-remainder, kind="stable")[: n - counts.sum()]:
        counts[i] += 1
    return counts.tolist()


@dataclass
class Corpus:
    tiles: list[Tile]
    manifest: TileManifest
    archetypes: list[str]

    def labels(self) -> np.ndarray:
        return np.array([ARCHETYPES.index(a) for a in self.archetypes])


def archetype_of(tile: Tile) -> str:
    """Recover the archetype name encoded in a synthetic tile's geo id."""
    geo = tile.origin[0]
    for a in ARCHETYPES:
        if geo.startswith(f"synth-{a}-"):
            return a
    raise InputError(f"tile {tile.id!r} is not a synthetic scene")


def generate_corpus(n_scenes: int, mix: Sequence[float] | Mapping[str, float] = REFERENCE_MIX,
                    rng_seed: int = 0, size: int = 256, noise_level: float = 0.1,
                    split_fractions=(0.8, 0.1, 0.1)) -> Corpus:
    """Generate ``n_scenes`` whole-scene tiles with archetype counts set by ``mix``."""
    if isinstance(mix, Mapping):
        unknown = set(mix) - set(ARCHETYPES)
        if unknown:
            raise InputError(f"unknown archetypes in mix: {sorted(unknown)}")
        mix = [mix.get(a, 0.0) for a in ARCHETYPES]
    counts = mix_counts(n_scenes, mix)
    rng = np.random.default_rng(rng_seed)
    kinds = np.repeat(np.arange(len(ARCHETYPES)), counts)
    kinds = kinds[rng.permutation(len(kinds))]
    seeds = np.random.SeedSequence(rng_seed).generate_state(max(n_scenes, 1), dtype=np.uint32)

    scenes = []
    for i, kind in enumerate(kinds):
        spec = SceneSpec(ARCHETYPES[kind], size, int(seeds[i]), noise_level)
        raster, mask = generate_scene(spec)
        scenes.append((f"synth-{spec.archetype}-{i:05d}", raster.pixels, mask, spec.archetype))
    splits = assign_splits([s[0] for s in scenes], split_fractions, rng_seed) if scenes else {}
    tiles = [Tile(px, m, (geo, 0, 0), splits[geo]) for geo, px, m, _ in scenes]
    return Corpus(tiles, build_manifest(tiles, size), [s[3] for s in scenes])
