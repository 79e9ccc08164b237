"""Iterative scene growth from a three-tile seed.

A scene is an ``R x C`` grid of equally sized tiles. Growth starts from
three tiles in one grid corner (the 2x2 corner block minus its inward
diagonal cell) and fills the remaining cells one at a time. Each new cell
is the missing corner of a 2x2 block; the block is rotated so that the
missing cell is bottom-right, completed, and rotated back.

Fill order in the seed-at-top-left frame: the inward diagonal cell first,
then column by column along the two seed rows, then row by row. Cells on
the outer edge of that sweep (row 0 beyond the seed, column 0 below it)
have only two filled neighbours in any 2x2 block; the third context slot
of those entries is ``None`` and is served by a draw from the
auto-encoder prior instead of an encoded tile.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import InputError, StateError

CORNERS = ("TL", "TR", "BL", "BR")
Cell = tuple[int, int]


@dataclass(frozen=True)
class PlanEntry:
    target: Cell
    block: Cell  # top-left cell of the 2x2 block
    context: tuple[Cell | None, Cell | None, Cell | None]  # canonical TL, TR, BL
    rotation: int  # np.rot90 turns that bring the target to the bottom-right


@dataclass
class TraversalPlan:
    rows: int
    cols: int
    seed_corner: str
    seeds: tuple[Cell, Cell, Cell]
    entries: list[PlanEntry]

    def __len__(self):
        return len(self.entries)


def _to_actual(corner, rows, cols):
    flip_r = corner in ("BL", "BR")
    flip_c = corner in ("TR", "BR")

    def f(cell):
        r, c = cell
        return (rows - 1 - r if flip_r else r, cols - 1 - c if flip_c else c)
    return f


def _canonical_order(rows, cols):
    order = [(1, 1)]
    for c in range(2, cols):
        order += [(0, c), (1, c)]
    for r in range(2, rows):
        order += [(r, c) for c in range(cols)]
    return order


def _canonical_block(cell):
    r, c = cell
    if r >= 1 and c >= 1:
        return [(r - 1, c - 1), (r - 1, c), (r, c - 1), (r, c)]
    if r == 0:
        return [(0, c - 1), (0, c), (1, c - 1), (1, c)]
    return [(r - 1, 0), (r - 1, 1), (r, 0), (r, 1)]


def _rotation_for(pos):
    labels = np.arange(4).reshape(2, 2)
    target = labels[pos]
    for k in range(4):
        rot = np.rot90(labels, k)
        if rot[1, 1] == target:
            return k, rot
    raise AssertionError("unreachable")


def plan_traversal(rows: int, cols: int, seed_corner: str = "TR") -> TraversalPlan:
    """Deterministic fill order for an ``rows x cols`` grid seeded at ``seed_corner``."""
    if rows < 2 or cols < 2:
        raise InputError(f"grid must be at least 2x2, got {rows}x{cols}")
    if seed_corner not in CORNERS:
        raise InputError(f"seed_corner must be one of {CORNERS}, got {seed_corner!r}")
    f = _to_actual(seed_corner, rows, cols)
    seeds = tuple(sorted(f(c) for c in ((0, 0), (0, 1), (1, 0))))
    filled = set(seeds)
    entries = []
    for ccell in _canonical_order(rows, cols):
        target = f(ccell)
        cells = [f(c) for c in _canonical_block(ccell)]
        r0, c0 = min(r for r, _ in cells), min(c for _, c in cells)
        grid = {(r - r0, c - c0): (r, c) for r, c in cells}
        k, rot = _rotation_for((target[0] - r0, target[1] - c0))
        by_label = {pos[0] * 2 + pos[1]: cell for pos, cell in grid.items()}
        context = tuple(by_label[int(rot[p])] if by_label[int(rot[p])] in filled else None
                        for p in ((0, 0), (0, 1), (1, 0)))
        entries.append(PlanEntry(target, (r0, c0), context, k))
        filled.add(target)
    return TraversalPlan(rows, cols, seed_corner, seeds, entries)


# ------------------------------------------------------------------ grid

@dataclass
class Slot:
    kind: str = "empty"  # empty | real | generated
    pixels: np.ndarray | None = None
    step: int | None = None
    noise_seed: int | None = None


@dataclass
class SceneGrid:
    rows: int
    cols: int
    tile_size: int
    cells: list[list[Slot]] = field(default_factory=list)

    def __post_init__(self):
        if not self.cells:
            self.cells = [[Slot() for _ in range(self.cols)] for _ in range(self.rows)]

    def __getitem__(self, cell: Cell) -> Slot:
        return self.cells[cell[0]][cell[1]]

    def _check(self, pixels):
        pixels = np.asarray(pixels)
        if pixels.shape != (self.tile_size, self.tile_size) or pixels.dtype != np.uint8:
            raise InputError(f"cell tiles must be {self.tile_size}x{self.tile_size} uint8, "
                             f"got {pixels.shape} {pixels.dtype}")
        return pixels

    def set_real(self, cell: Cell, pixels) -> None:
        self.cells[cell[0]][cell[1]] = Slot("real", self._check(pixels).copy())

    def set_generated(self, cell: Cell, pixels, step: int, noise_seed: int) -> None:
        if self[cell].kind != "empty":
            raise StateError(f"cell {cell} is already filled")
        self.cells[cell[0]][cell[1]] = Slot("generated", self._check(pixels).copy(), step, noise_seed)

    def is_full(self) -> bool:
        return all(s.kind != "empty" for row in self.cells for s in row)

    def assemble(self) -> np.ndarray:
        """Scene raster of shape ``(rows * S, cols * S)``; empty cells are black."""
        s = self.tile_size
        out = np.zeros((self.rows * s, self.cols * s), dtype=np.uint8)
        for r in range(self.rows):
            for c in range(self.cols):
                if self.cells[r][c].pixels is not None:
                    out[r * s:(r + 1) * s, c * s:(c + 1) * s] = self.cells[r][c].pixels
        return out

    def provenance(self) -> list[dict]:
        return [{"row": r, "col": c, "kind": s.kind, "step": s.step, "noise_seed": s.noise_seed}
                for r, row in enumerate(self.cells) for c, s in enumerate(row)]


# ------------------------------------------------------------ completion

Completer = Callable[[np.ndarray | None, np.ndarray | None, np.ndarray | None, np.random.Generator], np.ndarray]


class GanCompleter:
    """Fills a missing bottom-right quadrant with a trained generator and its WAE."""

    def __init__(self, generator, wae, alpha: float = 1.0):
        if wae.config.resolution != generator.resolution:
            raise InputError(f"WAE resolution {wae.config.resolution} differs from generator "
                             f"resolution {generator.resolution}")
        self.generator = generator
        self.wae = wae
        self.alpha = alpha

    @property
    def tile_size(self) -> int:
        return self.generator.resolution

    def __call__(self, tl, tr, bl, rng):
        from .cpgan import ConditioningInput, generate_quadrant
        cfg = self.generator.config
        codes = [self.wae.encode(q) if q is not None else rng.standard_normal(cfg.latent_dim)
                 for q in (tl, tr, bl)]
        noise = rng.standard_normal(cfg.noise_dim)
        return generate_quadrant(self.generator, ConditioningInput(*codes, noise), alpha=self.alpha)


def cell_seed(rng_seed: int, cell: Cell) -> int:
    """Per-cell noise seed, independent of the order cells are filled in."""
    return int(np.random.SeedSequence([rng_seed, cell[0], cell[1]]).generate_state(1)[0])


def complete_cell(grid: SceneGrid, entry: PlanEntry, completer: Completer, noise_seed: int,
                  step: int = 0) -> SceneGrid:
    """Generate ``entry.target`` in place from its context cells and return the grid."""
    if grid[entry.target].kind != "empty":
        raise StateError(f"target cell {entry.target} is not empty")
    s = grid.tile_size
    r0, c0 = entry.block
    block = np.zeros((2 * s, 2 * s), dtype=np.uint8)
    for dr in (0, 1):
        for dc in (0, 1):
            slot = grid[(r0 + dr, c0 + dc)]
            if slot.pixels is not None:
                block[dr * s:(dr + 1) * s, dc * s:(dc + 1) * s] = slot.pixels
    rot = np.rot90(block, entry.rotation)
    quads = (rot[:s, :s], rot[:s, s:], rot[s:, :s])
    context = []
    for cell, q in zip(entry.context, quads):
        if cell is None:
            context.append(None)
        elif grid[cell].kind == "empty":
            raise StateError(f"context cell {cell} of target {entry.target} is empty")
        else:
            context.append(np.ascontiguousarray(q))
    br = np.asarray(completer(*context, np.random.default_rng(noise_seed)))
    if br.shape != (s, s):
        raise InputError(f"completer returned shape {br.shape}, expected {(s, s)}")
    out = np.ascontiguousarray(np.rot90(br.astype(np.uint8), -entry.rotation))
    grid.set_generated(entry.target, out, step, noise_seed)
    return grid


def fill_grid(grid: SceneGrid, plan: TraversalPlan, completer: Completer, rng_seed: int = 0) -> SceneGrid:
    """Complete every empty cell in plan order; cells that are already filled are left alone."""
    if (grid.rows, grid.cols) != (plan.rows, plan.cols):
        raise InputError("plan and grid dimensions differ")
    for step, entry in enumerate(plan.entries):
        if grid[entry.target].kind == "empty":
            complete_cell(grid, entry, completer, cell_seed(rng_seed, entry.target), step)
    return grid


def grow_scene(seed_tiles: Sequence[np.ndarray] | Mapping[Cell, np.ndarray] | None, rows: int, cols: int,
               completer: Completer, rng_seed: int = 0, seed_corner: str = "TR",
               grid: SceneGrid | None = None) -> tuple[SceneGrid, np.ndarray]:
    """Grow a ``rows x cols`` scene from three seed tiles.

    ``seed_tiles`` is either a mapping from seed cell to tile or a sequence
    of three tiles in the order of ``plan_traversal(...).seeds`` (row-major).
    An existing ``grid`` may be passed instead; its filled cells are kept and
    only the empty ones are generated.
    """
    plan = plan_traversal(rows, cols, seed_corner)
    seeds = []
    if isinstance(seed_tiles, Mapping):
        if set(seed_tiles) != set(plan.seeds):
            raise InputError(f"seed cells must be {plan.seeds}, got {sorted(seed_tiles)}")
        seeds = [seed_tiles[c] for c in plan.seeds]
    elif seed_tiles is not None:
        seeds = list(seed_tiles)
        if len(seeds) != 3:
            raise InputError(f"need exactly three seed tiles, got {len(seeds)}")
    elif grid is None:
        raise InputError("need seed tiles or a pre-filled grid")
    seeds = [np.asarray(getattr(t, "pixels", t)) for t in seeds]
    if grid is None:
        grid = SceneGrid(rows, cols, seeds[0].shape[0])
    for cell, t in zip(plan.seeds, seeds):
        if grid[cell].kind == "empty":
            grid.set_real(cell, t)
    fill_grid(grid, plan, completer, rng_seed)
    return grid, grid.assemble()


def seeds_from_block(block: np.ndarray, rows: int, cols: int, seed_corner: str = "TR") -> dict:
    """Seed tiles taken from a ``2S x 2S`` image laid over the seed corner's 2x2 block."""
    block = np.asarray(block)
    s = block.shape[0] // 2
    plan = plan_traversal(rows, cols, seed_corner)
    r0, c0 = min(r for r, _ in plan.seeds), min(c for _, c in plan.seeds)
    return {(r, c): block[(r - r0) * s:(r - r0 + 1) * s, (c - c0) * s:(c - c0 + 1) * s].copy()
            for r, c in plan.seeds}


# ----------------------------------------------------------- seam metric

@dataclass
class SeamBoundary:
    cells: tuple[Cell, Cell]
    seam_gradient: float
    interior_gradient: float
    ratio: float


@dataclass
class SeamReport:
    boundaries: list[SeamBoundary]

    @property
    def mean_ratio(self) -> float:
        finite = [b.ratio for b in self.boundaries if np.isfinite(b.ratio)]
        return float(np.mean(finite)) if finite else float("nan")

    @property
    def max_ratio(self) -> float:
        return max((b.ratio for b in self.boundaries), default=float("nan"))


def _ratio(seam, interior):
    if interior == 0:
        return 1.0 if seam == 0 else float("inf")
    return seam / interior


def seam_metric(grid: SceneGrid) -> SeamReport:
    """Mean absolute step across each internal tile boundary relative to the in-tile steps.

    For a boundary between horizontally adjacent cells the seam gradient is
    the mean ``|x[:, cS] - x[:, cS - 1]|`` over the shared rows and the
    interior gradient is the mean horizontal step inside the two tiles;
    vertical boundaries are treated the same way along columns. A ratio of
    1 means the seam is as smooth as the tile interiors.
    """
    if not grid.is_full():
        raise StateError("seam metric needs a fully filled grid")
    s = grid.tile_size
    x = grid.assemble().astype(np.float64)
    out = []
    for r in range(grid.rows):
        for c in range(grid.cols - 1):
            rows = slice(r * s, (r + 1) * s)
            seam = np.abs(x[rows, (c + 1) * s] - x[rows, (c + 1) * s - 1]).mean()
            inner = [np.abs(np.diff(grid[(r, cc)].pixels.astype(np.float64), axis=1)).mean()
                     for cc in (c, c + 1)]
            interior = float(np.mean(inner))
            out.append(SeamBoundary(((r, c), (r, c + 1)), float(seam), interior, _ratio(seam, interior)))
    for r in range(grid.rows - 1):
        for c in range(grid.cols):
            cols = slice(c * s, (c + 1) * s)
            seam = np.abs(x[(r + 1) * s, cols] - x[(r + 1) * s - 1, cols]).mean()
            inner = [np.abs(np.diff(grid[(rr, c)].pixels.astype(np.float64), axis=0)).mean()
                     for rr in (r, r + 1)]
            interior = float(np.mean(inner))
            out.append(SeamBoundary(((r, c), (r + 1, c)), float(seam), interior, _ratio(seam, interior)))
    return SeamReport(out)


def feather_seams(raster: np.ndarray, tile_size: int, width: int = 2) -> np.ndarray:
    """Optional post-process: box-smooth a band of ``width`` pixels on each side of every seam."""
    x = raster.astype(np.float64)
    out = x.copy()
    h, w = x.shape
    k = 2 * width + 1
    for b in range(tile_size, w, tile_size):
        lo, hi = max(0, b - width), min(w, b + width)
        pad = np.pad(x, ((0, 0), (width, width)), mode="edge")
        for j in range(lo, hi):
            out[:, j] = pad[:, j:j + k].mean(axis=1)
    x = out.copy()
    for b in range(tile_size, h, tile_size):
        lo, hi = max(0, b - width), min(h, b + width)
        pad = np.pad(x, ((width, width), (0, 0)), mode="edge")
        for i in range(lo, hi):
            out[i] = pad[i:i + k].mean(axis=0)
    return np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)


def save_scene(grid: SceneGrid, path, checkpoint_ids: Mapping[str, str] | None = None,
               rng_seed: int | None = None) -> None:
    """Write the assembled scene as an 8-bit PNG plus a JSON provenance sidecar."""
    from PIL import Image
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(grid.assemble(), mode="L").save(path)
    sidecar = {"rows": grid.rows, "cols": grid.cols, "tile_size": grid.tile_size,
               "rng_seed": rng_seed, "checkpoints": dict(checkpoint_ids or {}),
               "cells": grid.provenance()}
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=1, sort_keys=True) + "\n")
