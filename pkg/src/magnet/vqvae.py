"""Conditional VQ-VAE over single-agent pose streams.

Per frame the encoder sees ``x_t = [theta_t (J*6), can_to_root_t (9)]`` and the
condition ``c_t = [beta (10), delta_can_t (9)]``; a strided conv stack emits one
latent per ``omega`` frames. The decoder upsamples latents back to frame rate and
re-injects ``c_t`` before predicting ``x_t``.
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
from .dataset import MotionSequence, compute_stats
from .errors import ConfigError, NonFiniteLoss, ShapeMismatch
from .nn import (ChannelNorm, OptimizerState, ResBlock1d, adamw_step, conv1d, gelu,
                 load_checkpoint, load_params_into, save_checkpoint, stop_gradient, stride_kernel)

log = logging.getLogger(__name__)

BETA_DIM = 10
TRANSFORM_DIM = 9
COND_DIM = BETA_DIM + TRANSFORM_DIM


@dataclass
class VQVAEConfig:
    n_joints: int = 9
    omega: int = 4
    hidden: int = 64
    d_vq: int = 32
    codebook_size: int = 64
    commitment: float = 0.25
    lambda_j: float = 1.0
    lambda_r: float = 1.0
    huber_delta: float = 1.0
    dead_code_steps: int = 2000

    @property
    def x_dim(self):
        return self.n_joints * 6 + TRANSFORM_DIM

    def validate(self):
        if self.omega < 1 or self.omega & (self.omega - 1):
            raise ConfigError(f"omega must be a power of two, got {self.omega}")
        if self.codebook_size < 2:
            raise ConfigError("codebook needs at least 2 entries")
        return self

    @classmethod
    def full_scale(cls):
        return cls(hidden=512, d_vq=512, codebook_size=1024)

    @classmethod
    def from_strings(cls, d):
        kinds = {f.name: f.type for f in fields(cls)}
        out = {}
        for k, v in d.items():
            if k in kinds:
                out[k] = float(v) if kinds[k] in ("float", float) else int(float(v))
        return cls(**out)


def sequence_inputs(seq: MotionSequence):
    """VQ-VAE inputs for every agent of a preprocessed sequence: x (P, T, J*6+9), c (P, T, 19)."""
    seq.require_derived()
    T, P = seq.T, seq.P
    theta = seq.theta.transpose(1, 0, 2, 3).reshape(P, T, -1)
    c2r = seq.can_to_root.to_vec9().transpose(1, 0, 2)
    x = np.concatenate([theta, c2r], axis=-1)
    dc = seq.delta_can.to_vec9().transpose(1, 0, 2)
    c = np.concatenate([np.broadcast_to(seq.beta[:, None, :], (P, T, BETA_DIM)), dc], axis=-1)
    return x, c


def pad_to_multiple(a, omega, axis=-2):
    """Repeat the last frame until the length along ``axis`` divides ``omega``."""
    n = a.shape[axis]
    pad = (-n) % omega
    if pad:
        last = np.take(a, [n - 1], axis=axis) if isinstance(a, np.ndarray) else a.narrow(axis, n - 1, 1)
        reps = [last] * pad
        a = np.concatenate([a] + reps, axis=axis) if isinstance(a, np.ndarray) else torch.cat([a] + reps, dim=axis)
    return a, pad


class VQVAE(nn.Module):
    def __init__(self, config: VQVAEConfig):
        super().__init__()
        self.config = config.validate()
        c = config
        h = c.hidden
        n_scale = int(round(math.log2(c.omega)))
        k = stride_kernel(2)

        self.enc_in = nn.Conv1d(c.x_dim + COND_DIM, h, 3, padding=1)
        self.enc_res = nn.ModuleList([ResBlock1d(h) for _ in range(n_scale)])
        self.enc_down = nn.ModuleList([nn.Conv1d(h, h, k) for _ in range(n_scale)])
        self.enc_mid = ResBlock1d(h)
        self.enc_norm = ChannelNorm(h)
        self.enc_out = nn.Conv1d(h, c.d_vq, 1)

        self.codebook = nn.Parameter(torch.randn(c.codebook_size, c.d_vq) / math.sqrt(c.d_vq))

        self.dec_in = nn.Conv1d(c.d_vq, h, 3, padding=1)
        self.dec_res = nn.ModuleList([ResBlock1d(h) for _ in range(n_scale)])
        self.dec_up = nn.ModuleList([nn.Conv1d(h, h, 3, padding=1) for _ in range(n_scale)])
        self.dec_cond = nn.Conv1d(h + COND_DIM, h, 3, padding=1)
        self.dec_mid = ResBlock1d(h)
        self.dec_norm = ChannelNorm(h)
        self.dec_out = nn.Conv1d(h, c.x_dim, 3, padding=1)

        for name, dim in (("x", c.x_dim), ("c", COND_DIM)):
            self.register_buffer(f"{name}_mean", torch.zeros(dim))
            self.register_buffer(f"{name}_std", torch.ones(dim))

    # -- stats -------------------------------------------------------------
    def set_input_stats(self, x, c):
        sx = compute_stats(x)
        sc = compute_stats(c)
        with torch.no_grad():
            self.x_mean.copy_(torch.as_tensor(sx.mean))
            self.x_std.copy_(torch.as_tensor(sx.std))
            self.c_mean.copy_(torch.as_tensor(sc.mean))
            self.c_std.copy_(torch.as_tensor(sc.std))

    def _norm_c(self, c):
        return (c - self.c_mean) / self.c_std

    # -- encoder / quantizer / decoder --------------------------------------
    def encode(self, x, c):
        """(B, T, x_dim), (B, T, 19) -> latents (B, T/omega, d_vq) and the pad length."""
        if x.shape[-1] != self.config.x_dim or c.shape[-1] != COND_DIM or x.shape[:-1] != c.shape[:-1]:
            raise ShapeMismatch(f"encode: x {tuple(x.shape)} c {tuple(c.shape)}")
        x, pad = pad_to_multiple(x, self.config.omega)
        c, _ = pad_to_multiple(c, self.config.omega)
        inp = torch.cat([(x - self.x_mean) / self.x_std, self._norm_c(c)], -1).transpose(1, 2)
        h = self.enc_in(inp)
        for res, down in zip(self.enc_res, self.enc_down):
            h = conv1d(res(h), down.weight, down.bias, stride=2)
        h = self.enc_out(gelu(self.enc_norm(self.enc_mid(h))))
        return h.transpose(1, 2), pad

    def nearest(self, h):
        """Index of the closest codebook entry per latent (lowest index on ties)."""
        e = self.codebook
        dist = ((h[..., None, :] - e) ** 2).sum(-1)
        return torch.argmin(dist, dim=-1)

    def quantize(self, h):
        idx = self.nearest(h)
        return self.codebook[idx], idx

    def quantize_st(self, h):
        """Straight-through quantization with codebook and commitment losses."""
        idx = stop_gradient(self.nearest(stop_gradient(h)))
        e = self.codebook[idx]
        z = h + stop_gradient(e - h)
        codebook_loss = ((stop_gradient(h) - e) ** 2).sum(-1)
        commit_loss = ((h - stop_gradient(e)) ** 2).sum(-1)
        return z, idx, codebook_loss, commit_loss

    def decode(self, z, c):
        """Latents (B, T', d_vq) with frame-rate condition (B, T'*omega, 19) -> (B, T'*omega, x_dim)."""
        omega = self.config.omega
        if z.shape[-1] != self.config.d_vq or c.shape[-1] != COND_DIM or c.shape[-2] != z.shape[-2] * omega:
            raise ShapeMismatch(f"decode: z {tuple(z.shape)} c {tuple(c.shape)}")
        h = self.dec_in(z.transpose(1, 2))
        for res, up in zip(self.dec_res, self.dec_up):
            h = up(torch.repeat_interleave(res(h), 2, dim=-1))
        h = self.dec_cond(torch.cat([h, self._norm_c(c).transpose(1, 2)], 1))
        h = self.dec_out(gelu(self.dec_norm(self.dec_mid(h))))
        return h.transpose(1, 2)

    def forward(self, x, c):
        h, pad = self.encode(x, c)
        z, idx, cb, cm = self.quantize_st(h)
        c_pad, _ = pad_to_multiple(c, self.config.omega)
        x_hat = self.decode(z, c_pad)
        if pad:
            x_hat = x_hat[:, : x.shape[1]]
        return x_hat, {"h": h, "z": z, "index": idx, "codebook": cb, "commit": cm}

    def reconstruct(self, x, c):
        with torch.no_grad():
            h, pad = self.encode(x, c)
            z, _ = self.quantize(h)
            c_pad, _ = pad_to_multiple(c, self.config.omega)
            out = self.decode(z, c_pad)
        return out[:, : x.shape[1]]


def vqvae_loss(x_hat, x, aux=None, config: VQVAEConfig | None = None):
    """Per-component VQ-VAE loss.

    Rotation and root terms are summed over joints and frames and averaged over the
    batch; codebook and commitment terms are summed over latents likewise.
    """
    config = config or VQVAEConfig()
    if x_hat.shape != x.shape:
        raise ShapeMismatch(f"vqvae_loss: {tuple(x_hat.shape)} vs {tuple(x.shape)}")
    J = config.n_joints
    B = x.shape[0]
    R_hat = losses.rot6d_to_matrix(x_hat[..., : J * 6].reshape(*x_hat.shape[:-1], J, 6))
    R = losses.rot6d_to_matrix(x[..., : J * 6].reshape(*x.shape[:-1], J, 6))
    rot = losses.geodesic(R_hat, R).sum() / B
    Rr_hat, tr_hat = losses.vec9_to_rt(x_hat[..., J * 6:])
    Rr, tr = losses.vec9_to_rt(x[..., J * 6:])
    root = losses.transform_distance(Rr_hat, tr_hat, Rr, tr, config.huber_delta).sum() / B
    parts = {"rotation": config.lambda_j * rot, "root": config.lambda_r * root}
    if aux is not None:
        parts["codebook"] = aux["codebook"].sum() / B
        parts["commitment"] = config.commitment * aux["commit"].sum() / B
    total = sum(parts.values())
    parts["total"] = total
    return parts


# ---------------------------------------------------------------------------
# training

@dataclass
class VQVAETrainConfig:
    steps: int = 5000
    batch_size: int = 256
    lr: float = 2e-4
    weight_decay: float = 1e-4
    window: int = 64
    eval_every: int = 250
    init_codebook_from_data: bool = True
    log_every: int = 500


@dataclass
class VQVAETrainResult:
    model: VQVAE
    history: list
    best_val: float
    best_step: int
    usage: float
    reseeded: int
    initial_loss: float


def _stack_inputs(seqs):
    xs, cs = [], []
    for seq in seqs:
        x, c = sequence_inputs(seq)
        keep = np.flatnonzero(seq.presence)
        xs.append(x[keep])
        cs.append(c[keep])
    return np.concatenate(xs), np.concatenate(cs)


def _windows(x, c, window):
    """Cut every stream into non-overlapping ``window``-frame clips."""
    T = x.shape[1]
    if T < window:
        raise ConfigError(f"sequences of {T} frames are shorter than the {window}-frame window")
    starts = range(0, T - window + 1, window)
    return (np.concatenate([x[:, s:s + window] for s in starts]),
            np.concatenate([c[:, s:s + window] for s in starts]))


def codebook_usage(model: VQVAE, x, c):
    with torch.no_grad():
        h, _ = model.encode(x, c)
        idx = model.nearest(h)
    return torch.unique(idx).numel() / model.config.codebook_size


def train_vqvae(train_seqs, config: VQVAEConfig, train_cfg: VQVAETrainConfig, seed=0,
                val_seqs=None, dtype=torch.float32):
    """Train on preprocessed sequences; keeps the parameters with the lowest validation loss."""
    config.validate()
    if train_cfg.steps < 1 or train_cfg.batch_size < 1:
        raise ConfigError("steps and batch_size must be positive")
    x_np, c_np = _windows(*_stack_inputs(train_seqs), train_cfg.window)
    val = _windows(*_stack_inputs(val_seqs), train_cfg.window) if val_seqs else (x_np, c_np)
    X = torch.as_tensor(x_np, dtype=dtype)
    C = torch.as_tensor(c_np, dtype=dtype)
    Xv = torch.as_tensor(val[0], dtype=dtype)
    Cv = torch.as_tensor(val[1], dtype=dtype)

    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = VQVAE(config).to(dtype)
    model.set_input_stats(x_np.reshape(-1, x_np.shape[-1]), c_np.reshape(-1, c_np.shape[-1]))
    gen = torch.Generator().manual_seed(seed)
    n = X.shape[0]
    bs = min(train_cfg.batch_size, n)

    if train_cfg.init_codebook_from_data:
        with torch.no_grad():
            h, _ = model.encode(X, C)
            flat = h.reshape(-1, config.d_vq)
            pick = torch.randint(flat.shape[0], (config.codebook_size,), generator=gen)
            jitter = 0.01 * torch.randn(config.codebook_size, config.d_vq, generator=gen, dtype=dtype)
            model.codebook.copy_(flat[pick] + jitter * flat.std())

    params = dict(model.named_parameters())
    opt = OptimizerState(base_lr=train_cfg.lr, weight_decay=train_cfg.weight_decay,
                         total_steps=train_cfg.steps)
    last_used = torch.zeros(config.codebook_size, dtype=torch.long)
    history = []
    best_val, best_step, best_state = math.inf, -1, None
    reseeded = 0
    initial = None

    def evaluate():
        model.eval()
        with torch.no_grad():
            x_hat, aux = model(Xv, Cv)
            val_loss = vqvae_loss(x_hat, Xv, aux, config)["total"].item()
        model.train()
        return val_loss

    for step in range(train_cfg.steps):
        batch = torch.randperm(n, generator=gen)[:bs] if bs < n else torch.arange(n)
        x, c = X[batch], C[batch]
        x_hat, aux = model(x, c)
        parts = vqvae_loss(x_hat, x, aux, config)
        loss = parts["total"]
        if not torch.isfinite(loss):
            raise NonFiniteLoss(f"VQ-VAE loss became {loss.item()} at step {step}: "
                                + ", ".join(f"{k}={v.item():.4g}" for k, v in parts.items()))
        for p in params.values():
            p.grad = None
        loss.backward()
        adamw_step(opt, params)

        used = torch.unique(aux["index"])
        last_used[used] = step
        dead = torch.nonzero(step - last_used >= config.dead_code_steps).flatten()
        if dead.numel():
            with torch.no_grad():
                flat = aux["h"].detach().reshape(-1, config.d_vq)
                pick = torch.randint(flat.shape[0], (dead.numel(),), generator=gen)
                model.codebook[dead] = flat[pick]
            last_used[dead] = step
            reseeded += dead.numel()
            log.info("step %d: re-seeded %d dead codebook entries", step, dead.numel())

        record = {k: v.item() for k, v in parts.items()}
        record["step"] = step
        record["usage"] = used.numel() / config.codebook_size
        history.append(record)
        if initial is None:
            initial = record["total"]
        if step % train_cfg.log_every == 0:
            log.info("vqvae step %d " + " ".join(f"{k}=%.4g" for k in parts), step,
                     *[record[k] for k in parts])
        if (step + 1) % train_cfg.eval_every == 0 or step + 1 == train_cfg.steps:
            v = evaluate()
            history[-1]["val"] = v
            if v < best_val:
                best_val, best_step = v, step
                best_state = copy.deepcopy(model.state_dict())

    model.load_state_dict(best_state)
    model.eval()
    usage = codebook_usage(model, X, C)
    return VQVAETrainResult(model, history, best_val, best_step, usage, reseeded, initial)


def save_vqvae(model: VQVAE, path, opt=None):
    cfg = {k: v for k, v in asdict(model.config).items()}
    save_checkpoint(path, "vqvae", cfg, model.state_dict(), opt)


def load_vqvae(path, dtype=torch.float32) -> VQVAE:
    ck = load_checkpoint(path)
    if ck.model_kind != "vqvae":
        raise ConfigError(f"checkpoint holds a {ck.model_kind!r} model, not a VQ-VAE")
    model = VQVAE(VQVAEConfig.from_strings(ck.config)).to(dtype)
    load_params_into(model, ck.params)
    model.eval()
    return model
