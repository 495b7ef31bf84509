"""Numerical core on top of torch: layers, rotary attention, gradient checking, AdamW.

Parameters and activations default to float32. Gradient checks cast models and
inputs to float64 (``model.double()``) before calling :func:`grad_check`.
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import (NonScalarLoss, OddDimension, OddHeadDim, ParseError, SchemaVersionMismatch,
                     ShapeMismatch)

CHECKPOINT_VERSION = 1


def _check_last(x, n, what):
    if x.shape[-1] != n:
        raise ShapeMismatch(f"{what}: expected last dimension {n}, got {tuple(x.shape)}")


# ---------------------------------------------------------------------------
# functional layers

def linear(x, W, b=None):
    """``x @ W.T + b`` with W of shape (out, in)."""
    _check_last(x, W.shape[1], "linear")
    return F.linear(x, W, b)


def layernorm(x, gamma, beta, eps=1e-5):
    _check_last(x, gamma.shape[0], "layernorm")
    return F.layer_norm(x, (x.shape[-1],), gamma, beta, eps)


def gelu(x):
    return F.gelu(x, approximate="tanh")


def conv1d(x, weight, bias=None, stride=1):
    """Temporal convolution on (B, C, T) inputs.

    Stride 1 uses same padding (odd kernels). A stride ``s`` > 1 expects a kernel of
    length ``2 s`` and returns exactly ``T / s`` frames.
    """
    if x.dim() != 3 or x.shape[1] != weight.shape[1]:
        raise ShapeMismatch(f"conv1d: input {tuple(x.shape)} vs weight {tuple(weight.shape)}")
    k = weight.shape[-1]
    if stride == 1:
        return F.conv1d(x, weight, bias, padding=k // 2)
    if x.shape[-1] % stride:
        raise ShapeMismatch(f"conv1d: length {x.shape[-1]} not divisible by stride {stride}")
    return F.conv1d(x, weight, bias, stride=stride, padding=(k - stride) // 2)


def stride_kernel(stride):
    return 2 * stride if stride > 1 else 3


class MLP(nn.Module):
    """Linear -> LayerNorm -> GELU stack; the last layer is a bare Linear."""

    def __init__(self, d_in, d_hidden, d_out, n_layers=2):
        super().__init__()
        dims = [d_in] + [d_hidden] * (n_layers - 1) + [d_out]
        layers = []
        for i in range(n_layers):
            layers.append(nn.Linear(dims[i], dims[i + 1]))
            if i < n_layers - 1:
                layers += [nn.LayerNorm(dims[i + 1], eps=1e-5), nn.GELU(approximate="tanh")]
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


def mlp(x, module: MLP):
    return module(x)


class ChannelNorm(nn.Module):
    """LayerNorm over the channel axis of (B, C, T) tensors."""

    def __init__(self, channels):
        super().__init__()
        self.norm = nn.LayerNorm(channels, eps=1e-5)

    def forward(self, x):
        return self.norm(x.transpose(1, 2)).transpose(1, 2)


class ResBlock1d(nn.Module):
    def __init__(self, channels, kernel=3):
        super().__init__()
        self.norm = ChannelNorm(channels)
        self.conv1 = nn.Conv1d(channels, channels, kernel, padding=kernel // 2)
        self.conv2 = nn.Conv1d(channels, channels, 1)

    def forward(self, x):
        h = self.conv1(gelu(self.norm(x)))
        return x + self.conv2(gelu(h))


def resblock1d(x, block: ResBlock1d):
    return block(x)


# ---------------------------------------------------------------------------
# embeddings and attention

def sinusoidal_embed(tau, d_emb):
    """[sin(w_k tau), cos(w_k tau)] with w_k geometric from 1 to 1e4."""
    if d_emb % 2:
        raise OddDimension(f"embedding dimension must be even, got {d_emb}")
    tau = torch.as_tensor(tau)
    if not tau.is_floating_point():
        tau = tau.to(torch.get_default_dtype())
    half = d_emb // 2
    if half == 1:
        freqs = torch.ones(1, dtype=tau.dtype)
    else:
        freqs = torch.exp(torch.arange(half, dtype=tau.dtype) * (math.log(1e4) / (half - 1)))
    ang = tau[..., None] * freqs
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)


def rope_angles(position, head_dim, base=10000.0, dtype=None):
    if head_dim % 2:
        raise OddHeadDim(f"rotary head dimension must be even, got {head_dim}")
    position = torch.as_tensor(position)
    dtype = dtype or torch.get_default_dtype()
    inv = base ** (-torch.arange(0, head_dim, 2, dtype=dtype) / head_dim)
    return position.to(dtype)[..., None] * inv


def _rotate(x, ang):
    x1, x2 = x[..., 0::2], x[..., 1::2]
    c, s = torch.cos(ang), torch.sin(ang)
    out = torch.stack([x1 * c - x2 * s, x1 * s + x2 * c], dim=-1)
    return out.flatten(-2)


def rope_apply(q, k, position):
    """Rotate channel pairs (2i, 2i+1) of q and k by position-dependent angles.

    ``position`` broadcasts against the token axis (second to last) of q and k.
    """
    if q.shape[-1] % 2 or k.shape[-1] % 2:
        raise OddHeadDim(f"rotary head dimension must be even, got {q.shape[-1]}")
    ang = rope_angles(position, q.shape[-1], dtype=q.dtype)
    return _rotate(q, ang), _rotate(k, ang)


class SelfAttention(nn.Module):
    def __init__(self, d, heads):
        super().__init__()
        if d % heads:
            raise ShapeMismatch(f"model width {d} not divisible by {heads} heads")
        self.heads = heads
        self.qkv = nn.Linear(d, 3 * d)
        self.out = nn.Linear(d, d)

    def forward(self, x, position, valid=None):
        B, N, d = x.shape
        h = self.heads
        q, k, v = self.qkv(x).view(B, N, 3, h, d // h).permute(2, 0, 3, 1, 4)
        q, k = rope_apply(q, k, position[:, None, :])
        logits = q @ k.transpose(-1, -2) / math.sqrt(d // h)
        if valid is not None:
            logits = logits.masked_fill(~valid[:, None, None, :], float("-inf"))
        attn = torch.softmax(logits, dim=-1)
        y = (attn @ v).transpose(1, 2).reshape(B, N, d)
        return self.out(y)


class PostNormBlock(nn.Module):
    """x -> LN(x + MHSA(x)) -> LN(. + MLP(.)), MLP width 4d."""

    def __init__(self, d, heads, mlp_ratio=4):
        super().__init__()
        self.attn = SelfAttention(d, heads)
        self.norm1 = nn.LayerNorm(d, eps=1e-5)
        self.ff = nn.Sequential(nn.Linear(d, mlp_ratio * d), nn.GELU(approximate="tanh"),
                                nn.Linear(mlp_ratio * d, d))
        self.norm2 = nn.LayerNorm(d, eps=1e-5)

    def forward(self, x, position, valid=None):
        x = self.norm1(x + self.attn(x, position, valid))
        x = self.norm2(x + self.ff(x))
        if valid is not None:
            x = x * valid[..., None].to(x.dtype)
        return x


def attention_block(x_seq, mask, block: PostNormBlock, position=None):
    if position is None:
        position = torch.arange(x_seq.shape[1]).expand(x_seq.shape[0], -1)
    return block(x_seq, position, mask)


# ---------------------------------------------------------------------------
# gradients

_sg_state = {"mode": None, "values": [], "cursor": 0}


def stop_gradient(x):
    """Detach ``x``. Inside :func:`frozen_stop_gradients` the detached values seen on
    the first (recording) pass are replayed verbatim on later passes."""
    mode = _sg_state["mode"]
    if mode == "record":
        val = x.detach().clone()
        _sg_state["values"].append(val)
        return val
    if mode == "replay":
        i = _sg_state["cursor"]
        _sg_state["cursor"] += 1
        return _sg_state["values"][i]
    return x.detach()


@contextlib.contextmanager
def frozen_stop_gradients():
    """Record stop-gradient substitutions once, then call ``replay()`` before each re-run."""
    _sg_state.update(mode="record", values=[], cursor=0)

    def replay():
        _sg_state.update(mode="replay", cursor=0)

    try:
        yield replay
    finally:
        _sg_state.update(mode=None, values=[], cursor=0)


def backward(loss):
    if loss.numel() != 1:
        raise NonScalarLoss(f"loss must be a scalar, got shape {tuple(loss.shape)}")
    loss.backward()


def grad_check(f, params, eps=1e-5, max_elements=None, seed=0):
    """Max relative error between reverse-mode and central-difference gradients.

    ``f`` maps no arguments to a scalar tensor that depends on ``params``. The error
    is ``|g_auto - g_fd| / max(|g_auto|, |g_fd|)`` per parameter tensor (vector norms
    over the checked elements), maximized over tensors whose gradients are not both
    below 1e-9. ``max_elements`` caps the number of finite-difference probes per tensor.
    """
    params = list(params)
    rng = np.random.default_rng(seed)
    with frozen_stop_gradients() as replay, torch.enable_grad():
        for p in params:
            p.grad = None
        loss = f()
        backward(loss)
        auto = [torch.zeros_like(p) if p.grad is None else p.grad.detach().clone() for p in params]

        worst = 0.0
        with torch.no_grad():
            for p, g in zip(params, auto):
                idx = np.arange(p.numel())
                if max_elements is not None and idx.size > max_elements:
                    idx = np.sort(rng.choice(idx, size=max_elements, replace=False))
                fd = np.empty(idx.size)
                for n, i in enumerate(idx):
                    at = np.unravel_index(i, tuple(p.shape))
                    orig = p.data[at].item()
                    p.data[at] = orig + eps
                    replay()
                    up = f().item()
                    p.data[at] = orig - eps
                    replay()
                    down = f().item()
                    p.data[at] = orig
                    fd[n] = (up - down) / (2 * eps)
                a = g.reshape(-1)[torch.as_tensor(idx)].double().numpy()
                na, nf = np.linalg.norm(a), np.linalg.norm(fd)
                if max(na, nf) < 1e-9:
                    continue
                worst = max(worst, float(np.linalg.norm(a - fd) / max(na, nf)))
    for p in params:
        p.grad = None
    return worst


# ---------------------------------------------------------------------------
# optimizer

def cosine_lr(step, base_lr, total_steps):
    """Cosine decay from ``base_lr`` at step 0 to 0 at ``total_steps``."""
    step = min(max(step, 0), total_steps)
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class OptimizerState:
    base_lr: float = 2e-4
    weight_decay: float = 1e-4
    total_steps: int = 1000
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def lr(self, step=None):
        return cosine_lr(self.step if step is None else step, self.base_lr, self.total_steps)


def adamw_step(state: OptimizerState, params: dict, grads: dict | None = None):
    """One decoupled-weight-decay Adam update, in place, at the scheduled learning rate.

    ``params`` maps names to tensors; ``grads`` defaults to each tensor's ``.grad``.
    """
    lr = state.lr()
    b1, b2 = state.betas
    k = state.step + 1
    with torch.no_grad():
        for name, p in params.items():
            g = p.grad if grads is None else grads[name]
            if g is None:
                continue
            if g.shape != p.shape:
                raise ShapeMismatch(f"gradient for {name} has shape {tuple(g.shape)}")
            m = state.m.setdefault(name, torch.zeros_like(p))
            v = state.v.setdefault(name, torch.zeros_like(p))
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            m_hat = m / (1 - b1 ** k)
            v_hat = v / (1 - b2 ** k)
            p.mul_(1 - lr * state.weight_decay)
            p.sub_(lr * m_hat / (v_hat.sqrt() + state.eps))
    state.step = k
    return params


# ---------------------------------------------------------------------------
# checkpoints

def _fmt(t):
    arr = t.detach().cpu().double().numpy().ravel() if torch.is_tensor(t) else np.ravel(t)
    return " ".join(format(float(v), ".17g") for v in arr)


def save_checkpoint(path, model_kind, config: dict, params: dict, opt: OptimizerState | None = None,
                    extra: dict | None = None):
    """Text checkpoint: one named, shaped, 17-digit tensor per line."""
    lines = [f"schema_version {CHECKPOINT_VERSION}", f"model_kind {model_kind}"]
    for k in sorted(config):
        lines.append(f"config {k}={config[k]}")
    for name, t in (extra or {}).items():
        shape = ",".join(str(s) for s in np.shape(t))
        lines.append(f"extra {name} {shape or '-'} {_fmt(np.asarray(t, dtype=float))}")
    for name, t in params.items():
        shape = ",".join(str(s) for s in t.shape)
        lines.append(f"param {name} {shape or '-'} {_fmt(t)}")
    if opt is not None:
        lines.append(f"opt step={opt.step} base_lr={opt.base_lr!r} weight_decay={opt.weight_decay!r} "
                     f"total_steps={opt.total_steps} beta1={opt.betas[0]!r} beta2={opt.betas[1]!r} "
                     f"eps={opt.eps!r}")
        for name in opt.m:
            shape = ",".join(str(s) for s in opt.m[name].shape)
            lines.append(f"opt_m {name} {shape or '-'} {_fmt(opt.m[name])}")
            lines.append(f"opt_v {name} {shape or '-'} {_fmt(opt.v[name])}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


@dataclass
class Checkpoint:
    model_kind: str
    config: dict
    params: dict
    extra: dict
    opt: OptimizerState | None = None


def _parse_tensor(rest, lineno, kind):
    parts = rest.split(" ", 2)
    if len(parts) < 2:
        raise ParseError("truncated tensor record", lineno, kind)
    name, shape_s = parts[0], parts[1]
    values = parts[2].split() if len(parts) == 3 else []
    shape = () if shape_s == "-" else tuple(int(s) for s in shape_s.split(","))
    if len(values) != int(np.prod(shape)):
        raise ParseError(f"expected {int(np.prod(shape))} values, found {len(values)}", lineno, name)
    return name, np.array([float(v) for v in values]).reshape(shape)


def load_checkpoint(path) -> Checkpoint:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith("schema_version "):
        raise ParseError("missing schema_version", 1, "schema_version")
    version = int(lines[0].split()[1])
    if version != CHECKPOINT_VERSION:
        raise SchemaVersionMismatch(f"unsupported checkpoint schema_version {version}")
    kind, config, params, extra, opt = None, {}, {}, {}, None
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        tag, _, rest = line.partition(" ")
        if tag == "model_kind":
            kind = rest.strip()
        elif tag == "config":
            k, _, v = rest.partition("=")
            config[k] = v
        elif tag == "param":
            name, arr = _parse_tensor(rest, lineno, tag)
            params[name] = arr
        elif tag == "extra":
            name, arr = _parse_tensor(rest, lineno, tag)
            extra[name] = arr
        elif tag == "opt":
            kv = dict(item.split("=") for item in rest.split())
            opt = OptimizerState(base_lr=float(kv["base_lr"]), weight_decay=float(kv["weight_decay"]),
                                 total_steps=int(kv["total_steps"]),
                                 betas=(float(kv["beta1"]), float(kv["beta2"])),
                                 eps=float(kv["eps"]), step=int(kv["step"]))
        elif tag in ("opt_m", "opt_v"):
            name, arr = _parse_tensor(rest, lineno, tag)
            target = opt.m if tag == "opt_m" else opt.v
            target[name] = torch.from_numpy(arr)
        else:
            raise ParseError(f"unknown record {tag!r}", lineno, tag)
    return Checkpoint(kind, config, params, extra, opt)


def load_params_into(module: nn.Module, params: dict):
    """Copy named arrays into ``module``; names and shapes must match exactly."""
    own = dict(module.state_dict())
    if set(own) != set(params):
        missing = sorted(set(own) - set(params))
        unexpected = sorted(set(params) - set(own))
        raise ShapeMismatch(f"parameter names differ: missing {missing}, unexpected {unexpected}")
    for name, arr in params.items():
        if tuple(own[name].shape) != tuple(np.shape(arr)):
            raise ShapeMismatch(f"{name}: checkpoint shape {np.shape(arr)} vs model {tuple(own[name].shape)}")
    module.load_state_dict({k: torch.as_tensor(np.asarray(v), dtype=own[k].dtype) for k, v in params.items()})


def seeded_init(module: nn.Module, seed):
    """Re-initialize every parameter from a dedicated generator, in name order."""
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for name, p in sorted(module.named_parameters()):
            if name.endswith("bias"):
                p.zero_()
            elif p.dim() == 1:
                p.fill_(1.0)
            else:
                fan_in = p[0].numel()
                p.normal_(0.0, 1.0 / math.sqrt(fan_in), generator=gen)
    return module
