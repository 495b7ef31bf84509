"""Glue between the tokenizer, the denoiser and the sampler."""
from __future__ import annotations

import numpy as np

from . import dfot as df
from . import sampler as sp
from .dataset import MotionSequence, preprocess
from .errors import MissingConditioning
from .geometry import RigidTransform


def fit_codec(seqs, vqvae, layout: df.TokenLayout) -> df.TokenCodec:
    return df.TokenCodec.fit(layout, [(df.raw_tokens(s, vqvae, layout), s.presence) for s in seqs])


def tokenize(seqs, vqvae, codec):
    return [df.assemble_tokens(s, vqvae, codec) for s in seqs]


def default_initial(P, spacing=1.5):
    """Canonical frames on a line along x, all facing +z."""
    init = RigidTransform.identity((P,))
    t = init.t.copy()
    t[:, 0] = (np.arange(P) - (P - 1) / 2) * spacing
    return RigidTransform(init.R, t)


def ensure_preprocessed(seq: MotionSequence) -> MotionSequence:
    return seq if seq.has_derived else preprocess(seq)


def run_strategy(model: df.DFoT, vqvae, codec: df.TokenCodec, strategy, conditioning: MotionSequence | None,
                 *, P=2, n_steps=16, guidance=None, seed=0, history=4, target=1, offset=1.0, keyframes=(),
                 controller=0, steps=sp.DEFAULT_STEPS, window=16, overlap=4, total=40, snap=True):
    """Sample one sequence with ``strategy`` and decode it to motion.

    ``conditioning`` supplies the clamped tokens and the initial world frames. For
    ``ultralong`` it is the rollout seed and ``total`` new token-steps are produced.
    """
    cond_tokens = None
    if conditioning is not None:
        conditioning = ensure_preprocessed(conditioning)
        cond_tokens = df.assemble_tokens(conditioning, vqvae, codec)
        P, n_steps = cond_tokens.n_agents, cond_tokens.n_steps
        initial = conditioning.canonical_world()[0]
    else:
        initial = default_initial(P)

    if strategy == "ultralong":
        if cond_tokens is None:
            raise MissingConditioning("ultralong rollout needs a seed sequence")
        tokens = sp.rollout_ultralong(model, cond_tokens, window, overlap, total, guidance, seed, steps)
    else:
        name = "agentic-async" if strategy == "agentic" else strategy
        plan = sp.make_plan(name, P, n_steps, history=history, target=target, offset=offset,
                            keyframes=keyframes, controller=controller, steps=steps)
        tokens = sp.sample(model, plan, cond_tokens, guidance, seed=seed)
    motion = sp.decode_to_motion(tokens, vqvae, codec, initial, snap=snap,
                                 fps=conditioning.fps if conditioning is not None else 30)
    return tokens, motion
