"""
Training the tokenizer and the denoiser
=======================================

The desk recipe overfits four orbit sequences: first the motion VQ-VAE,
then the diffusion transformer on the resulting per-agent tokens.
"""

import numpy as np

from _common import CONFIGS, OUT, QUICK
from magnet import config
from magnet import dataset as ds
from magnet import dfot as df
from magnet import pipeline
from magnet import vqvae as vq

cfg = config.load(CONFIGS / "desk.conf")
if QUICK:
    cfg.set("vq_train.steps", 20)
    cfg.set("dfot_train.steps", 20)

seeds, _ = ds.train_val_seeds(cfg["data.n_train"], 0, base=cfg["seed"])
seqs = [ds.preprocess(ds.generate_interaction("orbit", 2, 64, s)) for s in seeds]

# %%
# Tokenizer: four frames become one latent per agent
res = vq.train_vqvae(seqs, cfg.vq(), cfg.vq_train(), seed=cfg["seed"])
tail = np.mean([h["total"] for h in res.history[-50:]])
print(f"vqvae: {res.initial_loss:.1f} -> {tail:.2f}, codebook usage {res.usage:.0%}, re-seeded {res.reseeded}")
vq.save_vqvae(res.model, OUT / "vqvae.ckpt")

# %%
# Tokens: latent, partner transforms, canonical deltas and presence bits
dcfg = cfg.dfot(res.model.config.d_vq)
codec = pipeline.fit_codec(seqs, res.model, dcfg.layout)
tokens = pipeline.tokenize(seqs, res.model, codec)
print("token grid (steps, agents, width):", tokens[0].tokens.shape)

# %%
# Denoiser: every token gets its own noise level during training
dres = df.train_dfot(tokens, dcfg, codec, cfg.dfot_train(), seed=cfg["seed"])
tail = np.mean([h["total"] for h in dres.history[-50:]])
print(f"dfot: {dres.initial_loss:.2f} -> {tail:.4f}, best validation {dres.best_val:.4f} at step {dres.best_step}")
df.save_dfot(dres.model, codec, OUT / "dfot.ckpt")
print("checkpoints in", OUT)
