# Train a small progressive GAN and grow a 4x4 scene from three seed tiles.
#
#   python demos/03_grow_a_scene.py
#
# The budget here is tiny (about a minute on a laptop), so expect blurry
# tiles with visible seams. The seam metric puts a number on them.

from pathlib import Path

import numpy as np
from PIL import Image

from tilegan.completion import GanCompleter, feather_seams, grow_scene, plan_traversal, seam_metric, seeds_from_block
from tilegan.config import run_config_from_dict
from tilegan.cpgan import train_gan
from tilegan.pipeline import split_tiles, train_wae_stage
from tilegan.synthetic_scenes import generate_corpus
from tilegan.tile_store import downscale_array

out = Path(__file__).parent / "out"
out.mkdir(exist_ok=True)

cfg = run_config_from_dict({
    "wae": {"latent_dim": 16, "epochs": 10, "batch_size": 32},
    "gan": {"resolutions": [8, 16], "images_per_step": 1500, "batch_sizes": 16},
})
corpus = generate_corpus(120, rng_seed=0, size=32)
train, held = split_tiles(corpus.tiles)

# one auto-encoder per resolution supplies the context latents
waes = train_wae_stage(train, cfg)
model, records = train_gan(train, waes, cfg.gan.to_gan_config(16, cfg.seed))
print(f"{len(records)} iterations; last combined critic loss {records[-1].l_combined:.3f}")

# the plan: which cell is filled when, and from which three neighbours
plan = plan_traversal(4, 4, "TR")
for e in plan.entries[:4]:
    print("fill", e.target, "from", e.context, "rotation", e.rotation)

block = downscale_array(held[0].pixels, 32)
grid, raster = grow_scene(seeds_from_block(block, 4, 4, "TR"), 4, 4,
                          GanCompleter(model.generator, waes[16]), rng_seed=0)
Image.fromarray(raster).resize((256, 256), Image.NEAREST).save(out / "scene.png")
Image.fromarray(feather_seams(raster, 16)).resize((256, 256), Image.NEAREST).save(out / "scene_feathered.png")

seams = seam_metric(grid)
print(f"seam ratio: mean {seams.mean_ratio:.2f}, max {seams.max_ratio:.2f} (1.0 = invisible)")
