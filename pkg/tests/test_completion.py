import json

import numpy as np
import pytest
from PIL import Image

from tilegan.completion import (CORNERS, GanCompleter, SceneGrid, cell_seed, complete_cell, feather_seams,
                                fill_grid, grow_scene, plan_traversal, save_scene, seam_metric,
                                seeds_from_block)
from tilegan.cpgan import GanConfig, ProgressiveGAN, ProgressiveSchedule
from tilegan.errors import InputError, StateError
from tilegan.wae import WaeConfig, build_wae

S = 4


def mean_stub(tl, tr, bl, rng):
    ctx = [q for q in (tl, tr, bl) if q is not None]
    return np.floor(np.mean(ctx, axis=0) + 0.5).astype(np.uint8)


def noisy_stub(tl, tr, bl, rng):
    base = tl if tl is not None else np.zeros((S, S), np.uint8)
    ramp = np.arange(S * S).reshape(S, S)  # deliberately not rotation invariant
    return ((base.astype(int) + ramp + rng.integers(0, 50)) % 256).astype(np.uint8)


def _replay(plan):
    filled = set(plan.seeds)
    for e in plan.entries:
        for c in e.context:
            if c is not None and c not in filled:
                return False
        if e.target in filled:
            return False
        filled.add(e.target)
    return filled == {(r, c) for r in range(plan.rows) for c in range(plan.cols)}


def _random_tiles(seed, n=3, s=S):
    rng = np.random.default_rng(seed)
    return [rng.integers(0, 256, (s, s), dtype=np.uint8) for _ in range(n)]


# ----------------------------------------------------------------- plans

def test_two_by_two_plan():
    plan = plan_traversal(2, 2, "TR")
    assert len(plan) == 1
    assert plan.seeds == ((0, 0), (0, 1), (1, 1))
    e = plan.entries[0]
    assert e.target == (1, 0) and None not in e.context


def test_four_by_four_topological_order():
    plan = plan_traversal(4, 4, "TR")
    assert len(plan) == 13
    position = {c: -1 for c in plan.seeds}
    position.update({e.target: i for i, e in enumerate(plan.entries)})
    for i, e in enumerate(plan.entries):
        for c in e.context:
            if c is not None:
                assert position[c] < i


def test_two_by_three_replay():
    plan = plan_traversal(2, 3, "TL")
    assert _replay(plan)


def test_exhaustive_soundness_up_to_six():
    for rows in range(2, 7):
        for cols in range(2, 7):
            for corner in CORNERS:
                plan = plan_traversal(rows, cols, corner)
                assert _replay(plan)
                assert len(plan) == rows * cols - 3


def test_entries_are_2x2_blocks_with_target_bottom_right_after_rotation():
    for corner in CORNERS:
        plan = plan_traversal(5, 4, corner)
        for e in plan.entries:
            r0, c0 = e.block
            block = {(r0 + a, c0 + b) for a in (0, 1) for b in (0, 1)}
            assert e.target in block
            real = [c for c in e.context if c is not None]
            assert set(real) <= block and len(set(real)) == len(real)
            labels = np.empty((2, 2), dtype=object)
            for (r, c) in block:
                labels[r - r0, c - c0] = (r, c)
            rot = np.rot90(labels, e.rotation)
            assert rot[1, 1] == e.target
            for cell, slot in zip(e.context, (rot[0, 0], rot[0, 1], rot[1, 0])):
                assert cell is None or cell == slot


def test_only_edge_cells_use_prior_context():
    plan = plan_traversal(4, 5, "TL")
    virtual = {e.target for e in plan.entries if None in e.context}
    assert virtual == {(0, 2), (0, 3), (0, 4), (2, 0), (3, 0)}


def test_plan_errors():
    with pytest.raises(InputError):
        plan_traversal(1, 4)
    with pytest.raises(InputError):
        plan_traversal(3, 3, "XX")


# ------------------------------------------------------------ completion

def _grid_with_seeds(corner, rows=2, cols=2, seed=0):
    plan = plan_traversal(rows, cols, corner)
    grid = SceneGrid(rows, cols, S)
    for cell, t in zip(plan.seeds, _random_tiles(seed)):
        grid.set_real(cell, t)
    return plan, grid


def test_mean_stub_gives_context_mean():
    for corner in CORNERS:
        plan, grid = _grid_with_seeds(corner)
        e = plan.entries[0]
        ctx = [grid[c].pixels for c in e.context]
        complete_cell(grid, e, mean_stub, noise_seed=1)
        np.testing.assert_array_equal(grid[e.target].pixels, mean_stub(*ctx, None))


def test_same_noise_seed_same_tile():
    outs = []
    for _ in range(2):
        plan, grid = _grid_with_seeds("TR")
        complete_cell(grid, plan.entries[0], noisy_stub, noise_seed=42)
        outs.append(grid[plan.entries[0].target].pixels)
    np.testing.assert_array_equal(*outs)


def test_orientation_between_opposite_seed_corners():
    rng = np.random.default_rng(3)
    block = rng.integers(0, 256, (2 * S, 2 * S), dtype=np.uint8)
    results = {}
    for corner, img in (("TR", block), ("BL", np.rot90(block, 2))):
        plan = plan_traversal(2, 2, corner)
        grid = SceneGrid(2, 2, S)
        for cell, t in seeds_from_block(img, 2, 2, corner).items():
            grid.set_real(cell, t)
        complete_cell(grid, plan.entries[0], noisy_stub, noise_seed=7)
        results[corner] = grid[plan.entries[0].target].pixels
    # rotating the whole scene by 180 degrees swaps the two corners
    np.testing.assert_array_equal(results["BL"], np.rot90(results["TR"], 2))


def test_complete_cell_touches_only_target():
    plan, grid = _grid_with_seeds("TL", 3, 3)
    for i, e in enumerate(plan.entries):
        before = grid.assemble().copy()
        complete_cell(grid, e, noisy_stub, noise_seed=i, step=i)
        after = grid.assemble()
        r, c = e.target
        mask = np.ones(after.shape, bool)
        mask[r * S:(r + 1) * S, c * S:(c + 1) * S] = False
        np.testing.assert_array_equal(after[mask], before[mask])


def test_complete_cell_state_errors():
    plan, grid = _grid_with_seeds("TR", 3, 3)
    later = plan.entries[-1]
    with pytest.raises(StateError):
        complete_cell(grid, later, mean_stub, 0)
    first = plan.entries[0]
    complete_cell(grid, first, mean_stub, 0)
    with pytest.raises(StateError):
        complete_cell(grid, first, mean_stub, 0)


# ---------------------------------------------------------------- growth

def test_grow_two_by_two():
    grid, raster = grow_scene(_random_tiles(1), 2, 2, noisy_stub, rng_seed=0)
    assert raster.shape == (2 * S, 2 * S)
    kinds = [s["kind"] for s in grid.provenance()]
    assert kinds.count("generated") == 1 and kinds.count("real") == 3


def test_provenance_steps_increase_in_fill_order():
    grid, _ = grow_scene(_random_tiles(2), 4, 5, noisy_stub, rng_seed=3, seed_corner="BR")
    plan = plan_traversal(4, 5, "BR")
    steps = [grid[e.target].step for e in plan.entries]
    assert steps == list(range(len(plan)))
    assert all(grid[e.target].noise_seed == cell_seed(3, e.target) for e in plan.entries)


def test_replay_from_recorded_noise_seeds():
    grid, raster = grow_scene(_random_tiles(4), 4, 4, noisy_stub, rng_seed=11)
    plan = plan_traversal(4, 4, "TR")
    replay = SceneGrid(4, 4, S)
    for cell in plan.seeds:
        replay.set_real(cell, grid[cell].pixels)
    for e in plan.entries:
        complete_cell(replay, e, noisy_stub, grid[e.target].noise_seed, grid[e.target].step)
    assert replay.assemble().tobytes() == raster.tobytes()
    _, again = grow_scene(_random_tiles(4), 4, 4, noisy_stub, rng_seed=11)
    assert again.tobytes() == raster.tobytes()


def test_noise_seeds_do_not_depend_on_order():
    assert cell_seed(5, (2, 3)) == cell_seed(5, (2, 3)) != cell_seed(5, (3, 2))


def test_prefilled_grid_is_a_no_op():
    grid = SceneGrid(3, 3, S)
    tiles = _random_tiles(5, 9)
    for i, t in enumerate(tiles):
        grid.set_real((i // 3, i % 3), t)
    before = grid.assemble().copy()
    out, raster = grow_scene(None, 3, 3, noisy_stub, grid=grid)
    assert raster.tobytes() == before.tobytes()
    assert all(s["kind"] == "real" for s in out.provenance())


def test_four_by_four_at_128_gives_512_scene():
    cfg = GanConfig(schedule=ProgressiveSchedule.from_resolutions([128]), latent_dim=8, noise_dim=8,
                    fmap_base=64, fmap_max=4)
    gan = ProgressiveGAN(cfg)
    wae = build_wae(WaeConfig(128, latent_dim=8, base_channels=2, max_channels=4))
    rng = np.random.default_rng(0)
    seeds = [rng.integers(0, 256, (128, 128), dtype=np.uint8) for _ in range(3)]
    grid, raster = grow_scene(seeds, 4, 4, GanCompleter(gan.generator, wae), rng_seed=0)
    assert raster.shape == (512, 512) and raster.dtype == np.uint8
    assert grid.is_full()


def test_gan_completer_checks_resolution():
    cfg = GanConfig(schedule=ProgressiveSchedule.from_resolutions([8]), latent_dim=8, noise_dim=8)
    with pytest.raises(InputError):
        GanCompleter(ProgressiveGAN(cfg).generator, build_wae(WaeConfig(16, latent_dim=8)))


# ---------------------------------------------------------------- seams

def _full_grid(tiles, rows, cols):
    grid = SceneGrid(rows, cols, tiles[0].shape[0])
    for i, t in enumerate(tiles):
        grid.set_real((i // cols, i % cols), t)
    return grid


def test_constant_scene_ratio_is_one():
    report = seam_metric(_full_grid([np.full((S, S), 90, np.uint8)] * 4, 2, 2))
    assert len(report.boundaries) == 4
    assert all(b.ratio == 1.0 for b in report.boundaries)


def test_checkerboard_tiles():
    black, white = np.zeros((S, S), np.uint8), np.full((S, S), 255, np.uint8)
    report = seam_metric(_full_grid([black, white, white, black], 2, 2))
    for b in report.boundaries:
        assert b.seam_gradient == 255.0 and b.interior_gradient == 0.0 and b.ratio == float("inf")
    # textured version: +-10 in-tile steps everywhere, 200 across the seam
    yy, xx = np.mgrid[0:8, 0:8]
    tex = 10 * ((yy + xx) % 2)
    a, b = tex.astype(np.uint8), (200 + tex).astype(np.uint8)
    report = seam_metric(_full_grid([a, b, b, a], 2, 2))
    for bd in report.boundaries:
        assert bd.interior_gradient == 10.0 and bd.seam_gradient == 200.0 and bd.ratio == 20.0


def test_tiling_a_smooth_image_is_nearly_seamless():
    yy, xx = np.mgrid[0:64, 0:64]
    ramp = (2 * xx + yy).astype(np.uint8)
    wavy = np.floor(128 + 20 * np.sin(2 * np.pi * (xx + yy) / 64) + 0.5).astype(np.uint8)
    for img, tol in ((ramp, 0.0), (wavy, 0.1)):
        tiles = [img[r:r + 32, c:c + 32] for r in (0, 32) for c in (0, 32)]
        report = seam_metric(_full_grid(tiles, 2, 2))
        for b in report.boundaries:
            assert abs(b.ratio - 1.0) <= tol


def test_seam_metric_needs_full_grid():
    with pytest.raises(StateError):
        seam_metric(SceneGrid(2, 2, S))


def test_feathering_softens_seams():
    black, white = np.zeros((8, 8), np.uint8), np.full((8, 8), 255, np.uint8)
    grid = _full_grid([black, white, white, black], 2, 2)
    raster = feather_seams(grid.assemble(), 8, 2)
    step = np.abs(np.diff(raster[:, 6:10].astype(int), axis=1)).max()
    assert step < 255


def test_save_scene_writes_png_and_sidecar(tmp_path):
    grid, raster = grow_scene(_random_tiles(6), 2, 3, noisy_stub, rng_seed=1)
    save_scene(grid, tmp_path / "s.png", {"gan": "abc"}, rng_seed=1)
    np.testing.assert_array_equal(np.asarray(Image.open(tmp_path / "s.png")), raster)
    meta = json.loads((tmp_path / "s.json").read_text())
    assert meta["checkpoints"] == {"gan": "abc"} and len(meta["cells"]) == 6
    assert sum(c["kind"] == "generated" for c in meta["cells"]) == 3
