"""Multi-agent diffusion forcing transformer.

A token describes one agent over one window of ``omega`` frames::

    [ z (d_z) | self->partner slots ((P_max-1) * omega * 9) | delta_can (omega * 9) | presence (P_max-1) ]

Tokens are stored as arrays of shape (T', P, D) so that flattening the first two
axes gives the time-major, agent-interleaved order the transformer consumes.
Every token carries its own noise level; the presence bits and absent-partner
slots are structural and are never noised.
"""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch
from torch import nn

from . import losses
from .dataset import MotionSequence, NormStats, compute_stats
from .errors import ConfigError, MissingDerivedTransforms, NonFiniteLoss, OutOfRange, ShapeMismatch
from .nn import (MLP, OptimizerState, PostNormBlock, adamw_step, load_checkpoint, load_params_into,
                 save_checkpoint, sinusoidal_embed)
from .vqvae import VQVAE, sequence_inputs

log = logging.getLogger(__name__)

TDIM = 9


# ---------------------------------------------------------------------------
# token layout

@dataclass(frozen=True)
class TokenLayout:
    d_z: int
    p_max: int = 4
    omega: int = 4
    use_partner: bool = True

    @property
    def n_slots(self):
        return self.p_max - 1 if self.use_partner else 0

    @property
    def z(self):
        return slice(0, self.d_z)

    @property
    def partner(self):
        return slice(self.d_z, self.d_z + self.n_slots * self.omega * TDIM)

    @property
    def delta(self):
        start = self.partner.stop
        return slice(start, start + self.omega * TDIM)

    @property
    def presence(self):
        start = self.delta.stop
        return slice(start, start + self.n_slots)

    @property
    def width(self):
        return self.presence.stop

    def slot_channels(self, s):
        base = self.d_z + s * self.omega * TDIM
        return slice(base, base + self.omega * TDIM)

    def structural_mask(self, presence_bits):
        """Channels (..., D) that are fixed by the agent layout rather than generated."""
        presence_bits = np.asarray(presence_bits, dtype=bool)
        mask = np.zeros(presence_bits.shape[:-1] + (self.width,), dtype=bool)
        mask[..., self.presence] = True
        for s in range(self.n_slots):
            mask[..., self.slot_channels(s)] |= ~presence_bits[..., s:s + 1]
        return mask


def partner_slot(p, q):
    """Slot index of partner ``q`` inside agent ``p``'s token."""
    return q - (q > p)


def slot_partner(p, s):
    return s + (s >= p)


def alpha_bar(tau):
    """Cosine schedule cos^2(((tau + 0.008) / 1.008) * pi / 2) with alpha_bar(1) = 0 exactly."""
    is_tensor = torch.is_tensor(tau)
    t = tau if is_tensor else np.asarray(tau, dtype=float)
    lo = t.min() if is_tensor else np.min(t)
    hi = t.max() if is_tensor else np.max(t)
    if lo < 0 or hi > 1:
        raise OutOfRange("noise level must lie in [0, 1]")
    if is_tensor:
        out = torch.cos((t + 0.008) / 1.008 * (math.pi / 2)) ** 2
        return torch.where(t == 1, torch.zeros_like(out), out)
    out = np.cos((t + 0.008) / 1.008 * (np.pi / 2)) ** 2
    return np.where(t == 1, 0.0, out)


# ---------------------------------------------------------------------------
# token assembly

@dataclass
class TokenSequence:
    tokens: np.ndarray        # (T', P, D), normalized
    present: np.ndarray       # (P,) bool
    beta: np.ndarray          # (P, 10)
    layout: TokenLayout

    @property
    def n_steps(self):
        return self.tokens.shape[0]

    @property
    def n_agents(self):
        return self.tokens.shape[1]

    def order(self):
        """(time index, agent index, presence) per token in transformer order."""
        T, P = self.tokens.shape[:2]
        time = np.repeat(np.arange(T), P)
        agent = np.tile(np.arange(P), T)
        return time, agent, self.present[agent]

    def presence_bits(self):
        return self.tokens[..., self.layout.presence] > 0.5

    def structural_mask(self):
        return np.broadcast_to(self.layout.structural_mask(self.presence_bits()), self.tokens.shape)

    def replace(self, **kw):
        d = dict(tokens=self.tokens, present=self.present, beta=self.beta, layout=self.layout)
        d.update(kw)
        return TokenSequence(**d)


def _latents(seq: MotionSequence, vqvae: VQVAE | None, layout: TokenLayout):
    x, c = sequence_inputs(seq)
    P, T = x.shape[:2]
    Tp = T // layout.omega
    if vqvae is None:
        # raw-feature tokens: the per-frame pose inputs of the window, flattened
        return x[:, : Tp * layout.omega].reshape(P, Tp, -1)
    dtype = next(vqvae.parameters()).dtype
    with torch.no_grad():
        h, _ = vqvae.encode(torch.as_tensor(x, dtype=dtype), torch.as_tensor(c, dtype=dtype))
        z, _ = vqvae.quantize(h)
    return z.double().numpy()[:, :Tp]


def raw_tokens(seq: MotionSequence, vqvae: VQVAE | None, layout: TokenLayout):
    """Un-normalized tokens (T', P, D) for a preprocessed sequence."""
    if not seq.has_derived:
        raise MissingDerivedTransforms("assemble_tokens needs a preprocessed sequence")
    if seq.P > layout.p_max:
        raise ShapeMismatch(f"sequence has {seq.P} agents, layout allows {layout.p_max}")
    w = layout.omega
    if seq.T % w:
        raise ShapeMismatch(f"sequence length {seq.T} is not a multiple of omega={w}")
    Tp, P = seq.T // w, seq.P
    z = _latents(seq, vqvae, layout)
    if z.shape[-1] != layout.d_z:
        raise ShapeMismatch(f"latent width {z.shape[-1]} does not match layout d_z={layout.d_z}")
    out = np.zeros((Tp, P, layout.width))
    out[..., layout.z] = z.transpose(1, 0, 2)
    delta = seq.delta_can.to_vec9()                       # (T, P, 9)
    out[..., layout.delta] = delta.reshape(Tp, w, P, TDIM).transpose(0, 2, 1, 3).reshape(Tp, P, -1)
    if layout.use_partner:
        stp = seq.self_to_partner
        for p in range(P):
            for q in range(P):
                if q == p or not (seq.presence[p] and seq.presence[q]):
                    continue
                s = partner_slot(p, q)
                vec = np.concatenate([_rot6d(stp.R[:, p, s]), stp.t[:, p, s]], -1)
                out[:, p, layout.slot_channels(s)] = vec.reshape(Tp, w * TDIM)
                out[:, p, layout.presence.start + s] = 1.0
    return out


def _rot6d(R):
    return np.concatenate([R[..., :, 0], R[..., :, 1]], axis=-1)


class TokenCodec:
    """Z-score normalization of tokens with statistics shared across agents."""

    def __init__(self, layout: TokenLayout, stats: NormStats):
        if stats.mean.shape != (layout.width,):
            raise ShapeMismatch("normalization stats do not match the token width")
        self.layout = layout
        self.stats = stats

    @classmethod
    def fit(cls, layout: TokenLayout, raw_list):
        """Statistics over present agents and present partner slots only."""
        feats, masks = [], []
        for raw, present in raw_list:
            tok = raw[:, present]
            bits = tok[..., layout.presence] > 0.5
            feats.append(tok.reshape(-1, layout.width))
            masks.append((~layout.structural_mask(bits)).reshape(-1, layout.width))
        stats = compute_stats(np.concatenate(feats), np.concatenate(masks))
        stats.mean[layout.presence] = 0.0
        stats.std[layout.presence] = 1.0
        return cls(layout, stats)

    def normalize(self, raw):
        bits = raw[..., self.layout.presence] > 0.5
        out = (raw - self.stats.mean) / self.stats.std
        return np.where(self.layout.structural_mask(bits), raw, out)

    def denormalize(self, tokens):
        bits = tokens[..., self.layout.presence] > 0.5
        out = tokens * self.stats.std + self.stats.mean
        return np.where(self.layout.structural_mask(bits), tokens, out)

    def denormalize_torch(self, tokens):
        mean = torch.as_tensor(self.stats.mean, dtype=tokens.dtype)
        std = torch.as_tensor(self.stats.std, dtype=tokens.dtype)
        return tokens * std + mean


def assemble_tokens(seq: MotionSequence, vqvae: VQVAE | None, codec: TokenCodec) -> TokenSequence:
    raw = raw_tokens(seq, vqvae, codec.layout)
    tokens = codec.normalize(raw)
    tokens[:, ~seq.presence] = 0.0
    return TokenSequence(tokens, seq.presence.copy(), seq.beta.copy(), codec.layout)


# ---------------------------------------------------------------------------
# forward process

def perturb(tokens, tau, eps, structural=None, clean=None):
    """m(tau) = sqrt(ab) m + sqrt(1 - ab) eps per token.

    ``tau`` has the token shape without the channel axis. Channels flagged in
    ``structural`` and whole tokens flagged in ``clean`` are copied unchanged.
    """
    is_tensor = torch.is_tensor(tokens)
    if tuple(tau.shape) != tuple(tokens.shape[:-1]) or tuple(eps.shape) != tuple(tokens.shape):
        raise ShapeMismatch(f"perturb: tokens {tuple(tokens.shape)} tau {tuple(tau.shape)} eps {tuple(eps.shape)}")
    ab = alpha_bar(tau)[..., None]
    if is_tensor:
        noisy = torch.sqrt(ab) * tokens + torch.sqrt(1 - ab) * eps
        keep = torch.zeros_like(noisy, dtype=torch.bool)
        if structural is not None:
            keep = keep | torch.as_tensor(structural)
        if clean is not None:
            keep = keep | torch.as_tensor(clean)[..., None]
        return torch.where(keep, tokens, noisy)
    noisy = np.sqrt(ab) * tokens + np.sqrt(1 - ab) * eps
    keep = np.zeros(noisy.shape, dtype=bool)
    if structural is not None:
        keep |= structural
    if clean is not None:
        keep |= np.asarray(clean)[..., None]
    return np.where(keep, tokens, noisy)


# ---------------------------------------------------------------------------
# model

@dataclass
class DFoTConfig:
    d_model: int = 64
    layers: int = 2
    heads: int = 4
    d_emb: int = 32
    p_max: int = 4
    omega: int = 4
    d_z: int = 32
    use_partner: bool = True
    lambda_z: float = 1.0
    lambda_partner: float = 1.0
    lambda_delta: float = 1.0
    lambda_c: float = 1.0
    huber_delta: float = 1.0

    @property
    def layout(self):
        return TokenLayout(self.d_z, self.p_max, self.omega, self.use_partner)

    @classmethod
    def full_scale(cls, d_z=512):
        return cls(d_model=512, layers=6, heads=8, d_emb=256, d_z=d_z)

    def validate(self):
        if self.d_model % self.heads or (self.d_model // self.heads) % 2:
            raise ConfigError("d_model / heads must be an even integer")
        if self.d_emb % 2:
            raise ConfigError("d_emb must be even")
        if self.p_max < 1:
            raise ConfigError("p_max must be positive")
        return self

    @classmethod
    def from_strings(cls, d):
        kinds = {f.name: f.type for f in fields(cls)}
        out = {}
        for k, v in d.items():
            if k not in kinds:
                continue
            kind = kinds[k]
            if kind in ("bool", bool):
                out[k] = str(v).lower() in ("1", "true", "yes")
            elif kind in ("float", float):
                out[k] = float(v)
            else:
                out[k] = int(float(v))
        return cls(**out)


class DFoT(nn.Module):
    def __init__(self, config: DFoTConfig):
        super().__init__()
        self.config = config.validate()
        c = config
        D = c.layout.width
        self.embed = MLP(D + c.d_emb, c.d_model, c.d_model, n_layers=3)
        self.agent_embed = nn.Embedding(c.p_max, c.d_model)
        self.blocks = nn.ModuleList([PostNormBlock(c.d_model, c.heads) for _ in range(c.layers)])
        self.head = nn.Linear(c.d_model, D)

    def embed_inputs(self, noisy, tau, agent):
        """Per-token embedding MLP([m; SinEmb(tau)]) + psi(agent). RoPE acts in attention."""
        if noisy.shape[-1] != self.config.layout.width:
            raise ShapeMismatch(f"tokens of width {noisy.shape[-1]}, model expects {self.config.layout.width}")
        emb = sinusoidal_embed(tau.to(noisy.dtype), self.config.d_emb)
        return self.embed(torch.cat([noisy, emb], -1)) + self.agent_embed(agent)

    def forward(self, noisy, tau, time, agent, valid):
        """(B, N, D) noisy tokens -> (B, N, D) predicted clean tokens."""
        x = self.embed_inputs(noisy, tau, agent)
        x = x * valid[..., None].to(x.dtype)
        for block in self.blocks:
            x = block(x, time, valid)
        return self.head(x)


def denoise_forward(model: DFoT, noisy, tau, valid=None):
    """Convenience wrapper over (T', P, D) arrays for a single sequence."""
    noisy_t = torch.as_tensor(noisy)
    dtype = next(model.parameters()).dtype
    Tp, P, D = noisy_t.shape
    time = torch.arange(Tp).repeat_interleave(P)[None]
    agent = torch.arange(P).repeat(Tp)[None]
    if valid is None:
        valid = np.ones(P, dtype=bool)
    valid_t = torch.as_tensor(np.asarray(valid, dtype=bool)).repeat(Tp)[None]
    with torch.no_grad():
        out = model(noisy_t.to(dtype).reshape(1, Tp * P, D), torch.as_tensor(tau).to(dtype).reshape(1, -1),
                    time, agent, valid_t)
    return out.reshape(Tp, P, D)


# ---------------------------------------------------------------------------
# loss

def consistency_loss(pred, valid, layout: TokenLayout, codec: TokenCodec, delta=1.0):
    """Interpersonal velocity consistency on denormalized predictions.

    ``pred`` is (B, T', P, D) normalized, ``valid`` (B, P). For every frame t >= 1,
    agent s and present partner q this measures the transform distance between the
    predicted T_t^{s->q} and inv(dS_t) T_{t-1}^{s->q} dQ_t built from the predicted
    canonical deltas. Returns the per-example sum, (B,).
    """
    if not layout.use_partner or pred.shape[2] < 2:
        return pred.new_zeros(pred.shape[0])
    raw = codec.denormalize_torch(pred)
    B, Tp, P, _ = raw.shape
    w = layout.omega
    d = raw[..., layout.delta].reshape(B, Tp, P, w, TDIM).permute(0, 1, 3, 2, 4).reshape(B, Tp * w, P, TDIM)
    dR, dt = losses.vec9_to_rt(d)
    total = raw.new_zeros(B)
    for s in range(P):
        for q in range(P):
            if q == s:
                continue
            slot = raw[:, :, s, layout.slot_channels(partner_slot(s, q))].reshape(B, Tp * w, TDIM)
            R, t = losses.vec9_to_rt(slot)
            iR, it = losses.invert(dR[:, 1:, s], dt[:, 1:, s])
            aR, at = losses.compose(iR, it, R[:, :-1], t[:, :-1])
            pR, pt = losses.compose(aR, at, dR[:, 1:, q], dt[:, 1:, q])
            dist = losses.transform_distance(R[:, 1:], t[:, 1:], pR, pt, delta)
            pair = (valid[:, s] & valid[:, q]).to(raw.dtype)
            total = total + dist.sum(-1) * pair
    return total


def dfot_loss(pred, target, valid, config: DFoTConfig, codec: TokenCodec):
    """Decomposed smooth-L1 objective plus the consistency term.

    ``pred``/``target``: (B, T', P, D) normalized; ``valid``: (B, P) agent presence.
    Each component is summed over its channels and divided by the number of valid
    tokens in the batch, so ``total`` equals the weighted sum of the parts exactly.
    """
    if pred.shape != target.shape:
        raise ShapeMismatch(f"dfot_loss: {tuple(pred.shape)} vs {tuple(target.shape)}")
    layout = config.layout
    B, Tp, P, D = pred.shape
    vm = valid[:, None, :].expand(B, Tp, P).to(pred.dtype)
    n_tokens = vm.sum().clamp(min=1.0)
    err = losses.smooth_l1(pred, target, config.huber_delta)

    z = (err[..., layout.z].sum(-1) * vm).sum() / n_tokens
    dl = (err[..., layout.delta].sum(-1) * vm).sum() / n_tokens
    parts = {"z": config.lambda_z * z}
    if layout.use_partner:
        slot_valid = (target[..., layout.presence] > 0.5).to(pred.dtype)
        per_slot = err[..., layout.partner].reshape(B, Tp, P, layout.n_slots, -1).sum(-1)
        sp = (per_slot * slot_valid * vm[..., None]).sum() / n_tokens
        parts["partner"] = config.lambda_partner * sp
    parts["delta"] = config.lambda_delta * dl
    if layout.use_partner:
        lc = consistency_loss(pred, valid, layout, codec, config.huber_delta).sum() / n_tokens
        parts["consistency"] = config.lambda_c * lc
    parts["total"] = sum(parts.values())
    return parts


# ---------------------------------------------------------------------------
# training

@dataclass
class DFoTTrainConfig:
    steps: int = 10000
    batch_size: int = 256
    lr: float = 2e-4
    weight_decay: float = 1e-4
    window: int = 16            # token steps per training example
    shuffle_identities: bool = True
    mask_prob: float = 0.0      # probability of masking a random agent subset per example
    eval_every: int = 500
    log_every: int = 1000


@dataclass
class DFoTTrainResult:
    model: DFoT
    history: list
    best_val: float
    best_step: int
    initial_loss: float


def permute_tokens(tokens, present, perm, layout: TokenLayout):
    """Token-space agent permutation: new agent a is old agent perm[a]; slots follow."""
    P = len(perm)
    out = tokens[:, perm].copy()
    if layout.use_partner:
        for a in range(P):
            for b in range(P):
                if a == b:
                    continue
                src = partner_slot(perm[a], perm[b])
                dst = partner_slot(a, b)
                out[:, a, layout.slot_channels(dst)] = tokens[:, perm[a], layout.slot_channels(src)]
                out[:, a, layout.presence.start + dst] = tokens[:, perm[a], layout.presence.start + src]
    return out, present[perm]


def mask_tokens(tokens, present, keep, layout: TokenLayout):
    """Token-space agent masking: dropped agents become invalid, slots pointing at them zero."""
    P = tokens.shape[1]
    out = tokens.copy()
    new_present = present.copy()
    for q in range(P):
        if q in keep:
            continue
        new_present[q] = False
        out[:, q] = 0.0
        if layout.use_partner:
            for p in range(P):
                if p != q:
                    s = partner_slot(p, q)
                    out[:, p, layout.slot_channels(s)] = 0.0
                    out[:, p, layout.presence.start + s] = 0.0
    return out, new_present


def _flat_indices(Tp, P):
    time = torch.arange(Tp).repeat_interleave(P)
    agent = torch.arange(P).repeat(Tp)
    return time, agent


def training_batch(examples, idx, cfg: DFoTTrainConfig, layout, rng: np.random.Generator):
    """Crop, shuffle and mask examples; returns clean tokens (B, T', P, D) and validity (B, P)."""
    toks, valid = [], []
    P_pad = max(e.tokens.shape[1] for e in examples)
    for i in idx:
        ex = examples[i]
        Tp = ex.tokens.shape[0]
        w = min(cfg.window, Tp)
        start = int(rng.integers(0, Tp - w + 1))
        tok = ex.tokens[start:start + w]
        present = ex.present.copy()
        P = tok.shape[1]
        if cfg.shuffle_identities and P > 1:
            tok, present = permute_tokens(tok, present, rng.permutation(P), layout)
        if cfg.mask_prob > 0 and present.sum() > 1 and rng.random() < cfg.mask_prob:
            alive = np.flatnonzero(present)
            n_keep = int(rng.integers(1, alive.size))
            keep = set(rng.choice(alive, size=n_keep, replace=False).tolist())
            tok, present = mask_tokens(tok, present, keep, layout)
        if P < P_pad:
            tok = np.concatenate([tok, np.zeros((w, P_pad - P, tok.shape[-1]))], 1)
            present = np.concatenate([present, np.zeros(P_pad - P, dtype=bool)])
        toks.append(tok)
        valid.append(present)
    return np.stack(toks), np.stack(valid)


def noisy_forward(model: DFoT, clean, valid, tau, eps, layout):
    """Perturb clean tokens (B, T', P, D) at levels tau (B, T', P) and predict x0."""
    B, Tp, P, D = clean.shape
    bits = clean[..., layout.presence] > 0.5
    structural = _structural_torch(bits, layout)
    noisy = perturb(clean, tau, eps, structural=structural)
    time, agent = _flat_indices(Tp, P)
    vflat = valid[:, None, :].expand(B, Tp, P).reshape(B, -1)
    pred = model(noisy.reshape(B, Tp * P, D), tau.reshape(B, -1), time.expand(B, -1),
                 agent.expand(B, -1), vflat)
    return pred.reshape(B, Tp, P, D)


def _structural_torch(bits, layout):
    mask = torch.zeros(bits.shape[:-1] + (layout.width,), dtype=torch.bool)
    mask[..., layout.presence] = True
    for s in range(layout.n_slots):
        mask[..., layout.slot_channels(s)] |= ~bits[..., s:s + 1]
    return mask


def train_dfot(examples, config: DFoTConfig, codec: TokenCodec, train_cfg: DFoTTrainConfig, seed=0,
               val_examples=None, dtype=torch.float32):
    """Train on TokenSequences; retains the parameters with the lowest validation loss.

    Noise draws use one seeded generator: per step, tau for every token of the batch
    in (example, time, agent) order, then epsilon in the same order.
    """
    config.validate()
    if train_cfg.steps < 1:
        raise ConfigError("steps must be positive")
    layout = config.layout
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = DFoT(config).to(dtype)
    params = dict(model.named_parameters())
    opt = OptimizerState(base_lr=train_cfg.lr, weight_decay=train_cfg.weight_decay,
                         total_steps=train_cfg.steps)
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    n = len(examples)
    bs = min(train_cfg.batch_size, n)

    # fixed validation draws so that checkpoints are compared on equal footing
    val_examples = val_examples or examples
    vrng = np.random.default_rng(seed + 1)
    vcfg = DFoTTrainConfig(window=train_cfg.window, shuffle_identities=False)
    v_clean, v_valid = training_batch(val_examples, range(len(val_examples)), vcfg, layout, vrng)
    v_clean = torch.as_tensor(v_clean, dtype=dtype)
    v_valid = torch.as_tensor(v_valid)
    vgen = torch.Generator().manual_seed(seed + 1)
    v_tau = torch.rand(v_clean.shape[:-1], generator=vgen, dtype=dtype)
    v_eps = torch.randn(v_clean.shape, generator=vgen, dtype=dtype)

    def evaluate():
        model.eval()
        with torch.no_grad():
            pred = noisy_forward(model, v_clean, v_valid, v_tau, v_eps, layout)
            v = dfot_loss(pred, v_clean, v_valid, config, codec)["total"].item()
        model.train()
        return v

    history = []
    best_val, best_step, best_state = math.inf, -1, None
    initial = None
    for step in range(train_cfg.steps):
        idx = rng.permutation(n)[:bs] if bs < n else np.arange(n)
        clean_np, valid_np = training_batch(examples, idx, train_cfg, layout, rng)
        clean = torch.as_tensor(clean_np, dtype=dtype)
        valid = torch.as_tensor(valid_np)
        tau = torch.rand(clean.shape[:-1], generator=gen, dtype=dtype)
        eps = torch.randn(clean.shape, generator=gen, dtype=dtype)
        pred = noisy_forward(model, clean, valid, tau, eps, layout)
        parts = dfot_loss(pred, clean, valid, config, codec)
        loss = parts["total"]
        if not torch.isfinite(loss):
            raise NonFiniteLoss(f"DFoT loss became {loss.item()} at step {step}: "
                                + ", ".join(f"{k}={v.item():.4g}" for k, v in parts.items()))
        for p in params.values():
            p.grad = None
        loss.backward()
        adamw_step(opt, params)
        record = {k: v.item() for k, v in parts.items()}
        record["step"] = step
        history.append(record)
        if initial is None:
            initial = record["total"]
        if step % train_cfg.log_every == 0:
            log.info("dfot step %d " + " ".join(f"{k}=%.4g" for k in parts), step,
                     *[record[k] for k in parts])
        if (step + 1) % train_cfg.eval_every == 0 or step + 1 == train_cfg.steps:
            v = evaluate()
            history[-1]["val"] = v
            if v < best_val:
                best_val, best_step = v, step
                best_state = copy.deepcopy(model.state_dict())
    model.load_state_dict(best_state)
    model.eval()
    return DFoTTrainResult(model, history, best_val, best_step, initial)


def save_dfot(model: DFoT, codec: TokenCodec, path, opt=None):
    cfg = asdict(model.config)
    save_checkpoint(path, "dfot", cfg, model.state_dict(), opt,
                    extra={"norm_mean": codec.stats.mean, "norm_std": codec.stats.std})


def load_dfot(path, dtype=torch.float32):
    ck = load_checkpoint(path)
    if ck.model_kind != "dfot":
        raise ConfigError(f"checkpoint holds a {ck.model_kind!r} model, not a DFoT")
    config = DFoTConfig.from_strings(ck.config)
    model = DFoT(config).to(dtype)
    load_params_into(model, ck.params)
    model.eval()
    codec = TokenCodec(config.layout, NormStats(ck.extra["norm_mean"], ck.extra["norm_std"]))
    return model, codec
