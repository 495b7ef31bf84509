"""
Ultra-long rollout
==================

Windows of 16 token-steps slide forward, each clamping the last 4 steps of
the previous window. Run ``02_train_desk.py`` first.
"""

import numpy as np

from _common import OUT
from magnet import dataset as ds
from magnet import dfot as df
from magnet import sampler as sp
from magnet import vqvae as vq
from magnet.cli import plot_trajectories

vqvae = vq.load_vqvae(OUT / "vqvae.ckpt")
model, codec = df.load_dfot(OUT / "dfot.ckpt")
seq = ds.preprocess(ds.generate_interaction("orbit", 2, 64, seed=0))
seed_tokens = df.assemble_tokens(seq, vqvae, codec)

W, O, windows = 16, 4, 10
tokens = sp.rollout_ultralong(model, seed_tokens, W, O, windows * (W - O), seed=0)
motion = sp.decode_to_motion(tokens, vqvae, codec, seq.canonical_world()[0])
print(f"{motion.T} frames from a {seq.T}-frame seed")

# joints move smoothly across window boundaries
step = np.linalg.norm(np.diff(motion.joints_world(), axis=0), axis=-1).mean(axis=(1, 2))
seams = [(seed_tokens.n_steps + k * (W - O)) * codec.layout.omega - 1 for k in range(windows)]
print(f"mean step {step.mean():.4f} m, largest seam step {step[seams].max():.4f} m")

# the partner distance stays where the training data put it
dist = np.linalg.norm(motion.self_to_partner.t[:, 0, 0], axis=-1)
print(f"partner distance over the rollout: {dist.min():.2f} .. {dist.max():.2f} m")
plot_trajectories(motion, OUT / "ultralong.png")
print("wrote", OUT / "ultralong.png")
