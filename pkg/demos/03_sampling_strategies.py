"""
One model, many sampling strategies
===================================

All strategies share the trained denoiser; they only differ in which tokens
are clamped, which are generated and when each token's noise level drops.
Run ``02_train_desk.py`` first.
"""

import numpy as np

from _common import OUT
from magnet import dataset as ds
from magnet import dfot as df
from magnet import metrics as mt
from magnet import pipeline
from magnet import sampler as sp
from magnet import vqvae as vq
from magnet.cli import plot_trajectories

vqvae = vq.load_vqvae(OUT / "vqvae.ckpt")
model, codec = df.load_dfot(OUT / "dfot.ckpt")
seq = ds.preprocess(ds.generate_interaction("orbit", 2, 64, seed=0))

# %%
# The turn-taking plan: agent 2 waits half a denoising pass behind agent 1
plan = sp.make_plan("agentic-async", 2, 4, offset=0.5, steps=4)
print("noise levels of token-step 0 per iteration (agent 1, agent 2):")
print(plan.schedule()[:8, 0].round(2).T)

# %%
# Every strategy on the same conditioning sequence
options = {"inpaint": dict(target=1), "predict": dict(history=4, target=1), "joint": dict(history=4),
           "agentic-sync": dict(history=4), "agentic-async": dict(history=4, offset=1.0),
           "inbetween": dict(keyframes=[0, 15]), "control": dict(history=4, controller=0)}
gt = seq.joints_world()
for strategy, kw in options.items():
    _, motion = pipeline.run_strategy(model, vqvae, codec, strategy, seq, seed=1, **kw)
    err = mt.mpjpe(motion.joints_world(), gt)
    print(f"{strategy:14s} MPJPE vs ground truth {err:.3f} m")
    plot_trajectories(motion, OUT / f"{strategy}.png", reference=seq)

# %%
# Guidance contrasts the full context with a context stripped of history
for mode in ("none", "hg", "shg", "phg"):
    guidance = sp.GuidanceSpec(mode, 1.0)
    samples = [pipeline.run_strategy(model, vqvae, codec, "predict", seq, seed=s, guidance=guidance,
                                     history=4, target=1)[1].joints_world() for s in range(3)]
    print(f"guidance {mode:4s}: min-of-3 MPJPE {mt.mpjpe(np.stack(samples), gt):.3f} m")
