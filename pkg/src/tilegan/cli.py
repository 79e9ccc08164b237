"""Command-line entry point: ``tilegan <command> [options]``.

Commands: ``ingest``, ``synth``, ``train-wae``, ``train-gan``, ``grow``,
``evaluate``. Global options (``--config``, ``--seed``, ``--out``,
``--force``) may appear before or after the command name.

Each invocation writes into its own run directory (``--out``) and records a
``run.json`` manifest with the resolved configuration, its hash, the seed,
the inputs it consumed (with checkpoint ids or digests) and a digest of
every file it wrote. Exit codes: 0 success, 1 input error, 2 missing
prerequisite or invalid state.
"""
from __future__ import annotations

import argparse
import json
import shutil
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint
from .config import RunConfig, load_run_config, run_config_from_dict
from .cpgan import ProgressiveGAN
from .errors import InputError, MissingArtifactError, StateError
from .pipeline import (complete_tiles, evaluate_stage, file_digest, grow_stage, split_tiles,
                       train_wae_stage)
from .tile_store import (assign_splits, build_manifest, filter_flood_tiles, load_dataset, load_raster,
                         normalize_to_8bit, save_dataset, tile_raster)

COMMANDS = ("ingest", "synth", "train-wae", "train-gan", "grow", "evaluate")


class _Parser(argparse.ArgumentParser):
    # usage mistakes are input errors (exit 1); exit 2 is reserved for state errors
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


# ------------------------------------------------------------ run directory

class RunDir:
    def __init__(self, path, command: str, force: bool):
        self.path = Path(path)
        self.command = command
        if self.path.exists() and any(self.path.iterdir()):
            if not force:
                raise StateError(f"output directory {self.path} is not empty; pass --force to replace it")
            if not (self.path / "run.json").is_file():
                raise StateError(f"{self.path} is not a tilegan run directory; refusing to delete it")
            shutil.rmtree(self.path)
        self.path.mkdir(parents=True, exist_ok=True)
        self.inputs: dict = {}
        self.extra: dict = {}

    def finish(self, cfg: RunConfig, args: dict) -> dict:
        files = sorted(p for p in self.path.rglob("*") if p.is_file() and p.name != "run.json")
        manifest = {"tool": "tilegan", "version": __version__, "command": self.command,
                    "args": args, "config": cfg.to_dict(), "config_hash": cfg.hash(), "seed": cfg.seed,
                    "inputs": self.inputs, "outputs": {str(p.relative_to(self.path)): file_digest(p)
                                                       for p in files}}
        manifest.update(self.extra)
        (self.path / "run.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
        return manifest


def _require_dataset(path, what="dataset"):
    p = Path(path)
    if not (p / "manifest.txt").is_file():
        raise MissingArtifactError(f"{what} {p} not found (no manifest.txt); "
                                   "produce it with `tilegan synth` or `tilegan ingest`")
    return p


def _dataset_dir(path):
    # accept either the dataset directory itself or a run directory holding one
    p = Path(path)
    if (p / "dataset" / "manifest.txt").is_file():
        return p / "dataset"
    return _require_dataset(p)


def _load_waes(wae_dir, resolutions, run: RunDir):
    from .wae import load_wae
    d = Path(wae_dir)
    waes = {}
    for r in resolutions:
        ck = d / f"wae_{r}px.ckpt"
        if not ck.is_file():
            raise MissingArtifactError(f"missing WAE checkpoint {ck}; produce it with "
                                       f"`tilegan train-wae --data DATASET --resolution {r} --out {d}`")
        waes[r] = load_wae(ck)
        run.inputs[f"wae_{r}px"] = {"path": str(ck), "checkpoint_id": waes[r].checkpoint_id}
    return waes


def _load_gan(path, run: RunDir) -> ProgressiveGAN:
    p = Path(path)
    if p.is_dir():
        meta = p / "run.json"
        final = json.loads(meta.read_text()).get("final_checkpoint") if meta.is_file() else None
        if final is None:
            raise MissingArtifactError(f"no trained GAN in {p}; produce it with `tilegan train-gan`")
        p = p / final
    if not p.is_file():
        raise MissingArtifactError(f"GAN checkpoint {p} not found; produce it with `tilegan train-gan`")
    gan = ProgressiveGAN.load(p)
    run.inputs["gan"] = {"path": str(p), "checkpoint_id": gan.checkpoint_id}
    return gan


def _held_out(tiles):
    _, held = split_tiles(tiles)
    return held or tiles


# ------------------------------------------------------------------ commands

def cmd_ingest(args, cfg: RunConfig, run: RunDir) -> int:
    ic = cfg.ingest
    if not args.rasters:
        raise InputError("ingest needs at least one raster path")
    tile_size = args.tile_size or ic.tile_size
    stride = args.stride or ic.stride
    flood_only = ic.flood_only and not args.all_tiles
    raw_shape = tuple(args.raw_shape) if args.raw_shape else ic.raw_shape
    rasters = []
    for path in args.rasters:
        if not Path(path).is_file():
            raise InputError(f"raster {path} not found")
        rasters.append(load_raster(path, raw_shape, args.raw_dtype or ic.raw_dtype))
    splits = assign_splits([r.geo_id for r in rasters], cfg.synth.split_fractions, cfg.seed)
    tiles = []
    for i, raster in enumerate(rasters, 1):
        if raster.pixels.dtype != np.uint8:
            raster = normalize_to_8bit(raster, ic.lo_pct, ic.hi_pct)
        cut, _ = tile_raster(raster, tile_size, stride, splits[raster.geo_id])
        if flood_only and raster.mask is not None:
            cut = filter_flood_tiles(cut)
        tiles += cut
        _log(f"[{i}/{len(rasters)}] {raster.geo_id}: {len(cut)} tiles")
        run.inputs[f"raster_{i}"] = {"path": str(args.rasters[i - 1]), "digest": file_digest(args.rasters[i - 1])}
    manifest = build_manifest(tiles, tile_size)
    save_dataset(tiles, manifest, run.path / "dataset")
    _log(f"wrote {len(tiles)} tiles to {run.path / 'dataset'}")
    return 0


def cmd_synth(args, cfg: RunConfig, run: RunDir) -> int:
    from .synthetic_scenes import generate_corpus
    sy = cfg.synth
    mix = tuple(args.mix) if args.mix else sy.mix
    corpus = generate_corpus(args.n_scenes or sy.n_scenes, mix, cfg.seed, args.size or sy.size,
                             sy.noise_level if args.noise_level is None else args.noise_level,
                             sy.split_fractions)
    save_dataset(corpus.tiles, corpus.manifest, run.path / "dataset")
    counts = {a: corpus.archetypes.count(a) for a in sorted(set(corpus.archetypes))}
    run.extra["archetype_counts"] = counts
    _log(f"wrote {len(corpus.tiles)} scenes to {run.path / 'dataset'}: {counts}")
    return 0


def cmd_train_wae(args, cfg: RunConfig, run: RunDir) -> int:
    data = _dataset_dir(args.data)
    tiles, _ = load_dataset(data)
    run.inputs["dataset"] = {"path": str(data), "digest": file_digest(data / "manifest.txt")}
    train, _ = split_tiles(tiles)
    resolutions = args.resolution or list(cfg.gan.resolutions)
    waes = train_wae_stage(train or tiles, cfg, run.path, resolutions)
    run.extra["checkpoints"] = {f"wae_{r}px": w.checkpoint_id for r, w in waes.items()}
    for r, w in waes.items():
        h = w.history
        if h:
            _log(f"WAE {r}px: recon {h[0]['recon']:.5f} -> {h[-1]['recon']:.5f}")
    return 0


def cmd_train_gan(args, cfg: RunConfig, run: RunDir) -> int:
    from .cpgan import train_gan
    data = _dataset_dir(args.data)
    gan_cfg = cfg.gan.to_gan_config(cfg.wae.latent_dim, cfg.seed)
    waes = _load_waes(args.waes, gan_cfg.schedule.resolutions, run)
    tiles, _ = load_dataset(data)
    run.inputs["dataset"] = {"path": str(data), "digest": file_digest(data / "manifest.txt")}
    train, _ = split_tiles(tiles)
    model, records = train_gan(train or tiles, waes, gan_cfg, run.path, run.path / "gan_losses.jsonl")
    final = f"gan_step{model.step}_{model.resolution}px.ckpt"
    run.extra["final_checkpoint"] = final
    run.extra["checkpoints"] = {p.stem: load_checkpoint(p).id for p in sorted(run.path.glob("gan_step*.ckpt"))}
    _log(f"trained {len(records)} iterations; final checkpoint {run.path / final}")
    return 0


def _seed_tile(args, tiles_or_none, size):
    from PIL import Image
    if args.seed_image:
        with Image.open(args.seed_image) as im:
            px = np.asarray(im.convert("L"))
        if px.shape[0] != px.shape[1] or px.shape[0] % size:
            raise InputError(f"seed image must be square with side a multiple of {size}, got {px.shape}")
        return px
    held = _held_out(tiles_or_none)
    return held[args.tile_index % len(held)].pixels


def cmd_grow(args, cfg: RunConfig, run: RunDir) -> int:
    gan = _load_gan(args.gan, run)
    s = gan.generator.resolution
    waes = _load_waes(args.waes, [s], run)
    for k in ("rows", "cols", "seed_corner"):
        if getattr(args, k) is not None:
            setattr(cfg.grow, k, getattr(args, k))
    if args.feather:
        cfg.grow.feather = True
    tiles = None
    if not args.seed_image:
        if not args.data:
            raise InputError("grow needs --data or --seed-image for the seed tiles")
        data = _dataset_dir(args.data)
        tiles, _ = load_dataset(data)
        run.inputs["dataset"] = {"path": str(data), "digest": file_digest(data / "manifest.txt")}
    else:
        run.inputs["seed_image"] = {"path": str(args.seed_image), "digest": file_digest(args.seed_image)}
    seed = _seed_tile(args, tiles, 2 * s)
    ckpts = {k: v["checkpoint_id"] for k, v in run.inputs.items() if "checkpoint_id" in v}
    _, raster, _, summary = grow_stage(seed, gan, waes[s], cfg, run.path, ckpts)
    run.extra["growth"] = summary
    _log(f"grew a {summary['rows']}x{summary['cols']} scene of {raster.shape[0]}x{raster.shape[1]} px; "
         f"mean seam ratio {summary['seam_mean_ratio']:.3f}")
    return 0


def cmd_evaluate(args, cfg: RunConfig, run: RunDir) -> int:
    from .tile_store import downscale_array, stack_pixels
    if args.k:
        cfg.evaluate.k = tuple(args.k)
    if args.pairs:
        cfg.evaluate.pairs_per_cell = args.pairs
    data = _dataset_dir(args.data)
    tiles, _ = load_dataset(data)
    run.inputs["dataset"] = {"path": str(data), "digest": file_digest(data / "manifest.txt")}
    held = _held_out(tiles)
    if args.fake:
        fdir = _dataset_dir(args.fake)
        fake_tiles, _ = load_dataset(fdir)
        run.inputs["fake_dataset"] = {"path": str(fdir), "digest": file_digest(fdir / "manifest.txt")}
        fake = stack_pixels(fake_tiles)
        real = stack_pixels(held)
        if real.shape[1:] != fake.shape[1:]:
            real = downscale_array(real, fake.shape[1])
    else:
        if not args.gan or not args.waes:
            raise InputError("evaluate needs --fake DATASET, or --gan and --waes to generate one")
        gan = _load_gan(args.gan, run)
        waes = _load_waes(args.waes, [gan.generator.resolution], run)
        real, fake = complete_tiles(held, gan, waes[gan.generator.resolution], cfg.seed)
    summary = evaluate_stage(real, fake, cfg, run.path)
    run.extra["evaluation"] = summary
    for k in cfg.evaluate.k:
        print((run.path / f"report_k{k}.txt").read_text())
    return 0


HANDLERS = {"ingest": cmd_ingest, "synth": cmd_synth, "train-wae": cmd_train_wae,
            "train-gan": cmd_train_gan, "grow": cmd_grow, "evaluate": cmd_evaluate}


# ------------------------------------------------------------------- parser

def _global_flags(p, suppress):
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", default=d, help="YAML run configuration (unknown keys are rejected)")
    p.add_argument("--seed", type=int, default=d, help="global RNG seed (overrides the config)")
    p.add_argument("--out", default=d, help="run directory for this invocation (default runs/<command>)")
    p.add_argument("--force", action="store_true", default=argparse.SUPPRESS if suppress else False,
                   help="replace an existing run directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tilegan", description="Tile completion and scene growth with a conditional progressive GAN.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    p = sub.add_parser("ingest", help="tile rasters into a dataset")
    p.add_argument("rasters", nargs="*", help="raster files (images, or .bin/.raw with --raw-shape)")
    p.add_argument("--tile-size", type=int)
    p.add_argument("--stride", type=int)
    p.add_argument("--all-tiles", action="store_true", help="keep tiles without flood pixels")
    p.add_argument("--raw-shape", type=int, nargs=2, metavar=("H", "W"))
    p.add_argument("--raw-dtype")

    p = sub.add_parser("synth", help="generate a synthetic flood-scene corpus")
    p.add_argument("--n-scenes", type=int)
    p.add_argument("--size", type=int)
    p.add_argument("--mix", type=float, nargs=4, metavar=("PATCHES", "DRY", "STRIPS", "LAKE"))
    p.add_argument("--noise-level", type=float)

    p = sub.add_parser("train-wae", help="train per-resolution auto-encoders")
    p.add_argument("--data", required=True, help="dataset or synth/ingest run directory")
    p.add_argument("--resolution", type=int, nargs="+", help="resolutions (default: every schedule step)")
    p.add_argument("--latent-dim", type=int)
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("train-gan", help="train the progressive GAN")
    p.add_argument("--data", required=True)
    p.add_argument("--waes", required=True, help="train-wae run directory")
    p.add_argument("--images-per-step", type=int)

    p = sub.add_parser("grow", help="grow a large scene from three seed tiles")
    p.add_argument("--gan", required=True, help="train-gan run directory or checkpoint file")
    p.add_argument("--waes", required=True)
    p.add_argument("--data", help="dataset providing the seed tile")
    p.add_argument("--seed-image", help="square image whose corner block supplies the seeds")
    p.add_argument("--tile-index", type=int, default=0)
    p.add_argument("--rows", type=int)
    p.add_argument("--cols", type=int)
    p.add_argument("--seed-corner", choices=("TL", "TR", "BL", "BR"))
    p.add_argument("--feather", action="store_true", help="also write a seam-feathered copy")

    p = sub.add_parser("evaluate", help="cluster and SSIM report for real versus generated tiles")
    p.add_argument("--data", required=True)
    p.add_argument("--fake", help="dataset of generated tiles (otherwise completed with --gan)")
    p.add_argument("--gan")
    p.add_argument("--waes")
    p.add_argument("--k", type=int, nargs="+")
    p.add_argument("--pairs", type=int, help="pairs per table cell")

    for name in COMMANDS:
        _global_flags(sub.choices[name], suppress=True)
    return parser


def _resolve_config(args) -> RunConfig:
    cfg = load_run_config(args.config) if args.config else run_config_from_dict({})
    data = cfg.to_dict()
    changed = False
    if args.seed is not None:
        data["seed"], changed = args.seed, True
    cmd = args.command
    if cmd == "train-wae":
        for key in ("latent_dim", "epochs"):
            if getattr(args, key) is not None:
                data["wae"][key], changed = getattr(args, key), True
    if cmd in ("train-gan",) and args.images_per_step is not None:
        data["gan"]["images_per_step"], changed = args.images_per_step, True
    return run_config_from_dict(data) if changed else cfg


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if not args.command:
        parser.print_usage(sys.stderr)
        return 1
    try:
        cfg = _resolve_config(args)
        run = RunDir(args.out or Path("runs") / args.command, args.command, args.force)
        if args.config:
            run.inputs["config"] = {"path": str(args.config), "digest": file_digest(args.config)}
        code = HANDLERS[args.command](args, cfg, run)
        record = {k: v for k, v in vars(args).items() if k not in ("force",)}
        run.finish(cfg, record)
        return code
    except StateError as exc:
        print(f"tilegan {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except InputError as exc:
        print(f"tilegan {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
