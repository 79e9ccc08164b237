"""Pipeline stages shared by the command line and the desk-scale end-to-end run.

Stage order: corpus -> one WAE per resolution (trained on quadrants) ->
progressive GAN -> completed held-out tiles -> evaluation tables -> grown
scene. Every stage is a deterministic function of the run configuration.
"""
from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint
from .completion import GanCompleter, feather_seams, grow_scene, save_scene, seam_metric, seeds_from_block
from .config import RunConfig
from .cpgan import ConditioningInput, ProgressiveGAN, generate_quadrant, train_gan
from .errors import InputError
from .evaluation import (ThresholdOracle, cluster_robustness, compare_oracle, evaluate_samples,
                         write_report)
from .synthetic_scenes import generate_corpus
from .tile_store import assemble_quadrants, downscale_array, save_dataset, stack_pixels
from .wae import train_wae


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def split_tiles(tiles):
    train = [t for t in tiles if t.split == "train"]
    held = [t for t in tiles if t.split != "train"]
    return train, held


def quadrant_set(tiles, resolution: int) -> np.ndarray:
    """All four quadrants of every tile after downscaling it to twice ``resolution``."""
    arr = stack_pixels(tiles) if not isinstance(tiles, np.ndarray) else tiles
    if not len(arr):
        raise InputError("no tiles to take quadrants from")
    full = downscale_array(arr, 2 * resolution)
    s = resolution
    return np.concatenate([full[:, :s, :s], full[:, :s, s:], full[:, s:, :s], full[:, s:, s:]])


def train_wae_stage(train_tiles, cfg: RunConfig, out_dir=None, resolutions=None) -> dict:
    waes = {}
    for r in resolutions or cfg.gan.resolutions:
        path = Path(out_dir) / f"wae_{r}px.ckpt" if out_dir is not None else None
        model = train_wae(quadrant_set(train_tiles, r), cfg.wae.for_resolution(r, cfg.seed), path)
        if path is not None:
            model.checkpoint_id = load_checkpoint(path).id
        waes[r] = model
    return waes


def complete_tiles(tiles, gan: ProgressiveGAN, wae, rng_seed: int = 0):
    """Real tiles at the generator's scale and copies whose bottom-right quadrant is generated.

    Noise for tile ``i`` is drawn from ``SeedSequence([rng_seed, i])``.
    """
    s = gan.generator.resolution
    full = downscale_array(stack_pixels(tiles), 2 * s)
    z = [wae.encode(full[:, :s, :s]), wae.encode(full[:, :s, s:]), wae.encode(full[:, s:, :s])]
    noise = np.stack([np.random.default_rng([rng_seed, i]).standard_normal(gan.config.noise_dim)
                      for i in range(len(full))])
    br = generate_quadrant(gan.generator, ConditioningInput(*z, noise))
    br = br.reshape(len(full), s, s)
    fake = assemble_quadrants(full[:, :s, :s], full[:, :s, s:], full[:, s:, :s], br)
    return full, fake


def evaluate_stage(real, fake, cfg: RunConfig, out_dir) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = {"reports": {}}
    for k in cfg.evaluate.k:
        rep = evaluate_samples(real, fake, k, cfg.evaluate.pairs_per_cell, cfg.seed)
        write_report(rep, out_dir / f"report_k{k}")
        rob = cluster_robustness(real, fake, k, cfg.seed)
        summary["reports"][str(k)] = {"robustness_agreement": rob.agreement,
                                      "files": [f"report_k{k}.txt", f"report_k{k}.jsonl"]}
    oc = compare_oracle(real, fake, ThresholdOracle(cfg.evaluate.oracle_threshold))
    summary["oracle"] = {"ks_distance": oc.distance,
                         "mean_water_real": float(np.mean(oc.real.water_fraction)),
                         "mean_water_fake": float(np.mean(oc.fake.water_fraction))}
    (out_dir / "evaluation.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    return summary


def grow_stage(seed_tile, gan: ProgressiveGAN, wae, cfg: RunConfig, out_dir, checkpoint_ids=None):
    g = cfg.grow
    s = gan.generator.resolution
    block = downscale_array(getattr(seed_tile, "pixels", seed_tile), 2 * s)
    seeds = seeds_from_block(block, g.rows, g.cols, g.seed_corner)
    grid, raster = grow_scene(seeds, g.rows, g.cols, GanCompleter(gan.generator, wae),
                              rng_seed=cfg.seed, seed_corner=g.seed_corner)
    seams = seam_metric(grid)
    out_dir = Path(out_dir)
    save_scene(grid, out_dir / "scene.png", checkpoint_ids, cfg.seed)
    if g.feather:
        from PIL import Image
        Image.fromarray(feather_seams(raster, s, g.feather_width), mode="L").save(out_dir / "scene_feathered.png")
    summary = {"rows": g.rows, "cols": g.cols, "tile_size": s, "shape": list(raster.shape),
               "seam_mean_ratio": float(seams.mean_ratio), "seam_max_ratio": float(seams.max_ratio),
               "seam_finite": bool(all(math.isfinite(b.ratio) for b in seams.boundaries))}
    (out_dir / "seams.json").write_text(json.dumps(
        {"summary": summary, "boundaries": [
            {"a": list(b.cells[0]), "b": list(b.cells[1]), "seam": b.seam_gradient,
             "interior": b.interior_gradient, "ratio": b.ratio} for b in seams.boundaries]},
        indent=1, sort_keys=True) + "\n")
    return grid, raster, seams, summary


@dataclass
class PipelineResult:
    out_dir: Path
    config: RunConfig
    waes: dict
    gan: ProgressiveGAN
    loss_records: list
    wae_recon: dict = field(default_factory=dict)
    evaluation: dict = field(default_factory=dict)
    growth: dict = field(default_factory=dict)
    manifest: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)

    @property
    def losses_finite(self) -> bool:
        return all(math.isfinite(v) for r in self.loss_records
                   for v in (r.l_ld, r.l_gd, r.l_combined, r.generator_loss))


def run_desk_pipeline(cfg: RunConfig | None = None, out_dir="run") -> PipelineResult:
    """Synthetic corpus to grown scene in one call; writes a ``run.json`` manifest into ``out_dir``."""
    cfg = cfg or RunConfig()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    timings = {}
    t0 = time.perf_counter()
    sy = cfg.synth
    corpus = generate_corpus(sy.n_scenes, sy.mix, cfg.seed, sy.size, sy.noise_level, sy.split_fractions)
    save_dataset(corpus.tiles, corpus.manifest, out / "dataset")
    train, held = split_tiles(corpus.tiles)
    if len(held) < 2:
        raise InputError("corpus too small: need at least two held-out tiles")
    timings["corpus"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    waes = train_wae_stage(train, cfg, out / "checkpoints")
    timings["wae"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    gan_cfg = cfg.gan.to_gan_config(cfg.wae.latent_dim, cfg.seed)
    gan, records = train_gan(train, waes, gan_cfg, out / "checkpoints", out / "gan_losses.jsonl")
    final_ckpt = out / "checkpoints" / f"gan_step{len(gan_cfg.schedule.steps) - 1}_{gan.resolution}px.ckpt"
    gan.checkpoint_id = load_checkpoint(final_ckpt).id
    timings["gan"] = time.perf_counter() - t0

    top = gan.resolution
    t0 = time.perf_counter()
    real, fake = complete_tiles(held, gan, waes[top], cfg.seed)
    evaluation = evaluate_stage(real, fake, cfg, out / "evaluation")
    timings["evaluate"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    ckpts = {f"wae_{r}px": w.checkpoint_id for r, w in waes.items()}
    ckpts["gan"] = gan.checkpoint_id
    seed_tile = held[cfg.grow.seed_tile % len(held)]
    _, _, _, growth = grow_stage(seed_tile, gan, waes[top], cfg, out / "scene", ckpts)
    timings["grow"] = time.perf_counter() - t0

    wae_recon = {r: {"initial": w.history[0]["recon"] if w.history else None,
                     "final": w.history[-1]["recon"] if w.history else None} for r, w in waes.items()}
    outputs = sorted(p for p in out.rglob("*") if p.is_file() and p.name != "run.json")
    manifest = {"command": "pipeline", "config": cfg.to_dict(), "config_hash": cfg.hash(),
                "seed": cfg.seed, "checkpoints": ckpts,
                "wae_recon": {str(r): v for r, v in wae_recon.items()},
                "gan_iterations": len(records), "growth": growth, "evaluation": evaluation,
                "outputs": {str(p.relative_to(out)): file_digest(p) for p in outputs}}
    (out / "run.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return PipelineResult(out, cfg, waes, gan, records, wae_recon, evaluation, growth, manifest, timings)
