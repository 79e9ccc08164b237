"""Raster ingestion: 8-bit normalization, tiling, flood filtering and tile persistence.

Tiles are square single-channel ``uint8`` patches. A dataset on disk is a
directory holding ``manifest.txt`` and ``tiles/<id>.bin`` blobs (row-major
8-bit pixels) with an optional ``tiles/<id>.mask`` sibling.
"""
from __future__ import annotations

import hashlib
import os
import re
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DatasetError, InputError

__all__ = [
    "Raster", "Tile", "ManifestEntry", "TileManifest",
    "normalize_to_8bit", "tile_raster", "filter_flood_tiles", "quadrant_split",
    "assemble_quadrants", "downscale", "downscale_array", "assign_splits",
    "build_manifest", "save_dataset", "load_dataset", "tile_checksum",
    "reassemble", "load_raster", "stack_pixels",
]

FORMAT_VERSION = 1
SPLITS = ("train", "val", "test")
_ID_UNSAFE = re.compile(r"[^A-Za-z0-9._-]+")


@dataclass
class Raster:
    """A single-channel source image, optionally with a binary flood mask."""

    pixels: np.ndarray
    geo_id: str = "raster"
    mask: np.ndarray | None = None

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        if self.pixels.ndim != 2:
            raise InputError(f"raster must be 2-D, got shape {self.pixels.shape}")
        if self.mask is not None:
            self.mask = _as_mask(self.mask, self.pixels.shape)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass
class Tile:
    pixels: np.ndarray
    mask: np.ndarray | None = None
    origin: tuple[str, int, int] = ("", 0, 0)
    split: str = "train"
    id: str = ""

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        h, w = self.pixels.shape
        if h != w:
            raise InputError(f"tile must be square, got {h}x{w}")
        if self.pixels.dtype != np.uint8:
            raise InputError(f"tile pixels must be uint8, got {self.pixels.dtype}")
        if self.mask is not None:
            self.mask = _as_mask(self.mask, self.pixels.shape)
        if self.split not in SPLITS:
            raise InputError(f"unknown split {self.split!r}")
        if not self.id:
            self.id = make_tile_id(*self.origin)

    @property
    def size(self) -> int:
        return self.pixels.shape[0]

    @property
    def has_flood(self) -> bool:
        return self.mask is not None and bool(self.mask.any())


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    geo_id: str
    row: int
    col: int
    split: str
    has_flood: bool
    checksum: str
    has_mask: bool = False


@dataclass
class TileManifest:
    tile_size: int
    entries: list[ManifestEntry] = field(default_factory=list)

    @property
    def counts(self) -> dict[str, int]:
        tally = Counter(e.split for e in self.entries)
        return {s: tally.get(s, 0) for s in SPLITS}

    def validate(self) -> None:
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            dup = next(i for i, n in Counter(ids).items() if n > 1)
            raise DatasetError(f"duplicate tile id {dup!r}")


def make_tile_id(geo_id: str, row: int, col: int) -> str:
    stem = _ID_UNSAFE.sub("_", geo_id) or "tile"
    return f"{stem}_r{row}_c{col}"


def _as_mask(mask, shape) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.shape != tuple(shape):
        raise InputError(f"mask shape {mask.shape} does not match pixels {tuple(shape)}")
    if not np.isin(mask, (0, 1)).all():
        raise InputError("mask values must be 0 or 1")
    return mask.astype(np.uint8)


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def normalize_to_8bit(raster: Raster, lo_pct: float = 2.0, hi_pct: float = 98.0) -> Raster:
    """Map a real-valued raster to ``uint8`` by percentile clipping and linear scaling.

    The clip bounds are order statistics of the data (the ``lo_pct`` percentile
    rounded down, the ``hi_pct`` percentile rounded up), so every value at or
    below the lower bound maps to 0 and every value at or above the upper
    bound maps to 255. Because the bounds are actual sample values, applying
    the function to its own output returns that output unchanged.

    A constant raster has no usable range and maps to all zeros.
    """
    if not hi_pct > lo_pct:
        raise InputError(f"hi_pct ({hi_pct}) must exceed lo_pct ({lo_pct})")
    if not (0 <= lo_pct <= 100 and 0 <= hi_pct <= 100):
        raise InputError("percentiles must lie in [0, 100]")
    x = np.asarray(raster.pixels, dtype=np.float64)
    if x.size == 0:
        raise InputError("cannot normalize an empty raster")
    if not np.isfinite(x).all():
        raise InputError("raster contains non-finite values")
    lo = np.percentile(x, lo_pct, method="lower")
    hi = np.percentile(x, hi_pct, method="higher")
    if hi <= lo:
        out = np.zeros(x.shape, dtype=np.uint8)
    else:
        scaled = (np.clip(x, lo, hi) - lo) / (hi - lo) * 255.0
        out = np.floor(scaled + 0.5).astype(np.uint8)
    return Raster(out, raster.geo_id, raster.mask)


def tile_raster(raster: Raster, tile_size: int, stride: int | None = None,
                split: str = "train") -> tuple[list[Tile], TileManifest]:
    """Cut a raster into ``tile_size`` windows on a regular grid.

    Windows that would run past the bottom or right border are dropped.
    """
    stride = tile_size if stride is None else stride
    if not _is_pow2(tile_size):
        raise InputError(f"tile_size must be a power of two, got {tile_size}")
    if stride < 1:
        raise InputError(f"stride must be >= 1, got {stride}")
    h, w = raster.pixels.shape
    if tile_size > h or tile_size > w:
        raise InputError(f"tile_size {tile_size} exceeds raster dims {h}x{w}")
    pixels = raster.pixels
    if pixels.dtype != np.uint8:
        raise InputError("tile_raster expects an 8-bit raster; call normalize_to_8bit first")

    tiles = []
    for r in range(0, h - tile_size + 1, stride):
        for c in range(0, w - tile_size + 1, stride):
            window = (slice(r, r + tile_size), slice(c, c + tile_size))
            mask = None if raster.mask is None else raster.mask[window].copy()
            tiles.append(Tile(pixels[window].copy(), mask, (raster.geo_id, r, c), split))
    return tiles, build_manifest(tiles, tile_size)


def reassemble(tiles: Sequence[Tile], height: int, width: int) -> np.ndarray:
    """Paste tiles back at their recorded offsets; uncovered pixels stay 0."""
    out = np.zeros((height, width), dtype=np.uint8)
    for t in tiles:
        _, r, c = t.origin
        out[r:r + t.size, c:c + t.size] = t.pixels
    return out


def filter_flood_tiles(tiles: Iterable[Tile]) -> list[Tile]:
    """Keep the tiles whose mask contains at least one flood pixel, in order."""
    kept = []
    for t in tiles:
        if t.mask is None:
            raise InputError(f"tile {t.id!r} has no flood mask")
        if t.mask.any():
            kept.append(t)
    return kept


def quadrant_split(tile: Tile) -> tuple[Tile, Tile, Tile, Tile]:
    """Split a tile into its (TL, TR, BL, BR) quadrants."""
    s = tile.size
    if s % 2:
        raise InputError(f"cannot split odd-sized tile ({s}px)")
    h = s // 2
    geo, r0, c0 = tile.origin
    out = []
    for dr, dc in ((0, 0), (0, h), (h, 0), (h, h)):
        window = (slice(dr, dr + h), slice(dc, dc + h))
        mask = None if tile.mask is None else tile.mask[window].copy()
        out.append(Tile(tile.pixels[window].copy(), mask, (geo, r0 + dr, c0 + dc), tile.split))
    return tuple(out)


def assemble_quadrants(tl, tr, bl, br):
    """Inverse of the quadrant split on plain arrays (numpy or torch, last two axes)."""
    shapes = {tuple(q.shape) for q in (tl, tr, bl, br)}
    if len(shapes) != 1:
        raise InputError(f"quadrants differ in shape: {sorted(shapes)}")
    if isinstance(tl, np.ndarray):
        top = np.concatenate([tl, tr], axis=-1)
        bottom = np.concatenate([bl, br], axis=-1)
        return np.concatenate([top, bottom], axis=-2)
    import torch
    top = torch.cat([tl, tr], dim=-1)
    bottom = torch.cat([bl, br], dim=-1)
    return torch.cat([top, bottom], dim=-2)


def downscale_array(pixels: np.ndarray, target: int) -> np.ndarray:
    """Block-mean resample of ``(..., S, S)`` uint8 data, rounding halves up."""
    s = pixels.shape[-1]
    if pixels.shape[-2] != s:
        raise InputError("downscale expects square input")
    if not _is_pow2(target) or s % target:
        raise InputError(f"target {target} must be a power of two dividing {s}")
    f = s // target
    lead = pixels.shape[:-2]
    blocks = pixels.astype(np.int64).reshape(*lead, target, f, target, f)
    sums = blocks.sum(axis=(-3, -1))
    n = f * f
    # floor(sum/n + 1/2), done in integers
    return ((2 * sums + n) // (2 * n)).astype(np.uint8)


def downscale(tile: Tile, target: int) -> Tile:
    pixels = downscale_array(tile.pixels, target)
    mask = None if tile.mask is None else downscale_array(tile.mask, target)
    return replace(tile, pixels=pixels, mask=mask)


def stack_pixels(tiles: Sequence[Tile]) -> np.ndarray:
    if not tiles:
        raise InputError("no tiles given")
    return np.stack([t.pixels for t in tiles])


def assign_splits(geo_ids: Sequence[str], fractions=(0.8, 0.1, 0.1), seed: int = 0) -> dict[str, str]:
    """Assign whole rasters (never individual tiles) to train/val/test."""
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise InputError(f"split fractions must be three non-negative values summing to 1, got {fractions}")
    unique = sorted(set(geo_ids))
    order = np.random.default_rng(seed).permutation(len(unique))
    n = len(unique)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    out = {}
    for rank, idx in enumerate(order):
        if rank < n_train:
            out[unique[idx]] = "train"
        elif rank < n_train + n_val:
            out[unique[idx]] = "val"
        else:
            out[unique[idx]] = "test"
    return out


def tile_checksum(tile: Tile) -> str:
    h = hashlib.sha256(tile.pixels.tobytes())
    if tile.mask is not None:
        h.update(b"mask")
        h.update(tile.mask.tobytes())
    return h.hexdigest()[:32]


def build_manifest(tiles: Sequence[Tile], tile_size: int) -> TileManifest:
    entries = []
    for t in tiles:
        if t.size != tile_size:
            raise InputError(f"tile {t.id!r} is {t.size}px, manifest expects {tile_size}px")
        geo, r, c = t.origin
        entries.append(ManifestEntry(t.id, geo, r, c, t.split, t.has_flood,
                                     tile_checksum(t), t.mask is not None))
    manifest = TileManifest(tile_size, entries)
    manifest.validate()
    return manifest


_HEADER = "# tilegan-dataset"
_FIELDS = ("id", "geo_id", "row", "col", "split", "has_flood", "checksum", "has_mask")


def save_dataset(tiles: Sequence[Tile], manifest: TileManifest, path) -> None:
    """Write tiles and manifest under ``path`` (created if needed)."""
    path = Path(path)
    tile_dir = path / "tiles"
    tile_dir.mkdir(parents=True, exist_ok=True)
    if len(tiles) != len(manifest.entries):
        raise InputError("tiles and manifest entries differ in length")
    lines = [f"{_HEADER} version={FORMAT_VERSION} tile_size={manifest.tile_size}",
             "\t".join(_FIELDS)]
    for t, e in zip(tiles, manifest.entries):
        if t.id != e.id:
            raise InputError(f"tile {t.id!r} does not match manifest entry {e.id!r}")
        (tile_dir / f"{e.id}.bin").write_bytes(t.pixels.tobytes())
        if t.mask is not None:
            (tile_dir / f"{e.id}.mask").write_bytes(t.mask.tobytes())
        lines.append("\t".join([e.id, e.geo_id, str(e.row), str(e.col), e.split,
                                str(int(e.has_flood)), e.checksum, str(int(e.has_mask))]))
    tmp = path / "manifest.txt.tmp"
    tmp.write_text("\n".join(lines) + "\n")
    os.replace(tmp, path / "manifest.txt")


def _parse_header(line: str) -> dict[str, str]:
    if not line.startswith(_HEADER):
        raise DatasetError("manifest.txt: missing dataset header")
    fields = dict(kv.split("=", 1) for kv in line[len(_HEADER):].split() if "=" in kv)
    if fields.get("version") != str(FORMAT_VERSION):
        raise DatasetError(f"manifest.txt: unsupported version {fields.get('version')!r}, "
                           f"expected {FORMAT_VERSION}")
    if "tile_size" not in fields:
        raise DatasetError("manifest.txt: header lacks tile_size")
    return fields


def load_dataset(path) -> tuple[list[Tile], TileManifest]:
    path = Path(path)
    manifest_path = path / "manifest.txt"
    if not manifest_path.is_file():
        raise DatasetError(f"no dataset at {path} (manifest.txt missing)")
    lines = manifest_path.read_text().splitlines()
    if len(lines) < 2:
        raise DatasetError("manifest.txt: truncated header")
    tile_size = int(_parse_header(lines[0])["tile_size"])
    if tuple(lines[1].split("\t")) != _FIELDS:
        raise DatasetError("manifest.txt: unexpected column layout")

    tiles, entries = [], []
    n_px = tile_size * tile_size
    for lineno, line in enumerate(lines[2:], start=3):
        parts = line.split("\t")
        if len(parts) != len(_FIELDS):
            raise DatasetError(f"manifest.txt line {lineno}: expected {len(_FIELDS)} fields")
        tid, geo, row, col, split, flood, checksum, has_mask = parts
        try:
            entry = ManifestEntry(tid, geo, int(row), int(col), split,
                                  bool(int(flood)), checksum, bool(int(has_mask)))
        except ValueError as exc:
            raise DatasetError(f"record {tid!r}: malformed field ({exc})") from None
        raw = (path / "tiles" / f"{tid}.bin")
        if not raw.is_file():
            raise DatasetError(f"record {tid!r}: tile blob missing")
        data = raw.read_bytes()
        if len(data) != n_px:
            raise DatasetError(f"record {tid!r}: blob has {len(data)} bytes, expected {n_px}")
        pixels = np.frombuffer(data, dtype=np.uint8).reshape(tile_size, tile_size).copy()
        mask = None
        if entry.has_mask:
            mdata = (path / "tiles" / f"{tid}.mask").read_bytes() \
                if (path / "tiles" / f"{tid}.mask").is_file() else b""
            if len(mdata) != n_px:
                raise DatasetError(f"record {tid!r}: mask blob missing or wrong size")
            mask = np.frombuffer(mdata, dtype=np.uint8).reshape(tile_size, tile_size).copy()
        try:
            tile = Tile(pixels, mask, (geo, entry.row, entry.col), split, tid)
        except InputError as exc:
            raise DatasetError(f"record {tid!r}: {exc}") from None
        if tile_checksum(tile) != checksum:
            raise DatasetError(f"record {tid!r}: checksum mismatch")
        if tile.has_flood != entry.has_flood:
            raise DatasetError(f"record {tid!r}: has_flood disagrees with mask")
        tiles.append(tile)
        entries.append(entry)
    manifest = TileManifest(tile_size, entries)
    manifest.validate()
    return tiles, manifest


def load_raster(path, raw_shape: tuple[int, int] | None = None, raw_dtype: str = "float32",
                geo_id: str | None = None) -> Raster:
    """Read a grayscale image file or a flat binary file into a :class:`Raster`.

    A mask is picked up from a sibling ``<stem>_mask<suffix>`` file when present.
    """
    path = Path(path)
    geo_id = geo_id or path.stem
    if path.suffix.lower() in (".bin", ".raw"):
        if raw_shape is None:
            raise InputError(f"{path}: flat binary input needs an explicit shape")
        pixels = np.fromfile(path, dtype=raw_dtype)
        if pixels.size != raw_shape[0] * raw_shape[1]:
            raise InputError(f"{path}: {pixels.size} values do not fit shape {raw_shape}")
        pixels = pixels.reshape(raw_shape)
    else:
        from PIL import Image
        with Image.open(path) as im:
            if im.mode not in ("L", "I", "I;16", "F"):
                im = im.convert("L")
            pixels = np.asarray(im)
    mask = None
    mask_path = path.with_name(f"{path.stem}_mask{path.suffix}")
    if mask_path.is_file():
        mask = load_raster(mask_path, raw_shape, "uint8", geo_id).pixels
        mask = (mask > 0).astype(np.uint8)
    return Raster(pixels, geo_id, mask)
