# Train one Wasserstein auto-encoder on 16 px quadrants and check its latents.
#
#   python demos/02_wae_latents.py

import numpy as np
import torch

from tilegan.pipeline import quadrant_set
from tilegan.synthetic_scenes import generate_corpus
from tilegan.wae import WaeConfig, decode, encode, mmd, train_wae

corpus = generate_corpus(64, rng_seed=0, size=32)
quads = quadrant_set(corpus.tiles, 16)  # every tile gives four 16 px quadrants
print("training quadrants:", quads.shape)

model = train_wae(quads, WaeConfig(16, latent_dim=16, epochs=20, batch_size=16))
h = model.history
print(f"reconstruction {h[0]['recon']:.4f} -> {h[-1]['recon']:.4f} "
      f"({h[-1]['recon'] / h[0]['recon']:.0%} of the first epoch)")

# The MMD penalty pulls encodings toward N(0, I); compare against a fresh
# prior draw of the same size and against a shifted Gaussian.
z = torch.as_tensor(encode(model, quads), dtype=torch.float64)
prior = torch.randn(len(z), 16, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
scales = model.config.scales()
print("MMD(codes, prior)   ", mmd(z, prior, scales=scales).item())
print("MMD(prior+2, prior) ", mmd(prior + 2, prior, scales=scales).item())

# decoding a prior sample gives a plausible quadrant
tile = decode(model, np.zeros(16))
print("decoded zero code: mean intensity", tile.mean().round(1))
