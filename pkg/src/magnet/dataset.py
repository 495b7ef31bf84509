"""Synthetic multi-agent interactions and their transform representation.

The generator produces root poses and local joint rotations; :func:`preprocess`
derives the per-frame canonical quantities the models consume:

* ``can_to_root[t, p]``: root pose in the agent's floor-projected heading frame;
* ``delta_can[t, p]``: canonical frame at ``t`` expressed in the canonical frame at
  ``t - 1`` (identity at ``t = 0``);
* ``self_to_partner[t, p, s]``: partner canonical frame expressed in the agent's own
  canonical frame, slots in ascending partner order with the agent itself skipped.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import body
from .errors import (EmptyKeepSet, InvalidConfig, MissingDerivedTransforms, ParseError,
                     SchemaVersionMismatch, UnsupportedFps)
from .geometry import (REFLECT_X, RigidTransform, canonicalize_sequence, compose, heading_matrix,
                       invert, matrix_to_rot6d, relative_transform, rotation_about_axis)

SCHEMA_VERSION = 1
TARGET_FPS = 30
MODES = ("orbit", "mirror", "approach_retreat", "ring")
P_MAX_GENERATOR = 4
ROOT_HEIGHT = 0.9


@dataclass
class MotionSequence:
    fps: int
    beta: np.ndarray                      # (P, 10)
    theta: np.ndarray                     # (T, P, J, 6)
    root_world: RigidTransform            # (T, P)
    presence: np.ndarray = None           # (P,) bool
    can_to_root: RigidTransform | None = None       # (T, P)
    delta_can: RigidTransform | None = None         # (T, P)
    self_to_partner: RigidTransform | None = None   # (T, P, P - 1)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.presence is None:
            self.presence = np.ones(self.P, dtype=bool)
        self.presence = np.asarray(self.presence, dtype=bool)

    @property
    def T(self):
        return self.theta.shape[0]

    @property
    def P(self):
        return self.theta.shape[1]

    @property
    def J(self):
        return self.theta.shape[2]

    @property
    def has_derived(self):
        return None not in (self.can_to_root, self.delta_can, self.self_to_partner)

    def require_derived(self):
        if not self.has_derived:
            raise MissingDerivedTransforms("sequence has not been preprocessed")

    def canonical_world(self) -> RigidTransform:
        """World pose of every agent's canonical frame, (T, P)."""
        return canonicalize_sequence(self.root_world).canonical

    def joints_world(self):
        """World joint positions (T, P, J, 3)."""
        out = np.empty(self.theta.shape[:3] + (3,))
        for p in range(self.P):
            skel = body.skeleton_from_shape(self.beta[p])
            out[:, p] = body.forward_kinematics(skel, self.theta[:, p], self.root_world[:, p])
        return out

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


def _slot_partners(P):
    return [[q for q in range(P) if q != p] for p in range(P)]


# ---------------------------------------------------------------------------
# generator

def _limb_pose(phase, amp, rng_offsets):
    """Local joint rotations (n, J, 6) from a gait-like phase signal (n,)."""
    n = phase.shape[0]
    x_axis = np.array([1.0, 0.0, 0.0])
    y_axis = np.array([0.0, 1.0, 0.0])
    z_axis = np.array([0.0, 0.0, 1.0])
    R = np.broadcast_to(np.eye(3), (n, body.NUM_JOINTS, 3, 3)).copy()
    s = np.sin(phase)
    c = np.cos(phase)
    R[:, 1] = rotation_about_axis(y_axis, 0.25 * amp * s + rng_offsets[0])
    R[:, 2] = rotation_about_axis(x_axis, 0.1 * amp * c + rng_offsets[1])
    R[:, 3] = rotation_about_axis(x_axis, 0.6 * amp * s) @ rotation_about_axis(z_axis, 0.2 + 0.1 * amp * c)
    R[:, 4] = rotation_about_axis(x_axis, -0.6 * amp * s) @ rotation_about_axis(z_axis, -0.2 - 0.1 * amp * c)
    R[:, 5] = rotation_about_axis(x_axis, -0.4 * amp * (1.0 + s) + rng_offsets[2])
    R[:, 6] = rotation_about_axis(x_axis, -0.4 * amp * (1.0 - s) + rng_offsets[2])
    R[:, 7] = rotation_about_axis(x_axis, 0.3 * amp * s)
    R[:, 8] = rotation_about_axis(x_axis, -0.3 * amp * s)
    return matrix_to_rot6d(R, check=False)


def _root(heading_fwd, pos, tilt):
    """Root transforms from floor heading directions (n, 3), positions (n, 3), pitch tilt (n,)."""
    Rh = heading_matrix(heading_fwd)
    Rt = rotation_about_axis(np.array([1.0, 0.0, 0.0]), tilt)
    return RigidTransform(Rh @ Rt, pos)


def mirror_theta(theta):
    """Reflect local 6D joint rotations across x = 0 and swap left/right joints."""
    theta = np.asarray(theta, dtype=float)
    # F R F flips the sign of entries (i, k) where exactly one of i, k is the x axis;
    # in 6D layout [col0, col1] that is col0 rows 1,2 and col1 row 0.
    sign = np.array([1.0, -1.0, -1.0, -1.0, 1.0, 1.0])
    return (theta * sign)[..., body.MIRROR_PERM, :]


def mirror_transform(T: RigidTransform) -> RigidTransform:
    return RigidTransform(REFLECT_X @ T.R @ REFLECT_X, T.t * np.array([-1.0, 1.0, 1.0]))


def generate_interaction(mode, P, T, seed, *, fps=TARGET_FPS, radius=1.0, lag=8,
                         opposite=True) -> MotionSequence:
    """Deterministic synthetic interaction of ``P`` agents over ``T`` frames.

    ``orbit`` places agents on a shared circle of ``radius`` with fixed angular
    offsets (``2*pi*p/P``; with ``opposite`` and P = 2 the agents sit diametrically);
    ``mirror`` makes agent 1 the reflection across x = 0 of agent 0 delayed by ``lag``
    frames; ``approach_retreat`` has agent 1 echo agent 0's advance/retreat along x
    ``lag`` frames later; ``ring`` spaces agents evenly with a coupled radial sway.
    """
    if mode not in MODES:
        raise InvalidConfig(f"unknown generator mode {mode!r}")
    if not 1 <= P <= P_MAX_GENERATOR:
        raise InvalidConfig(f"P must be in [1, {P_MAX_GENERATOR}], got {P}")
    if T < 64:
        raise InvalidConfig(f"T must be at least 64, got {T}")
    if fps <= 0 or fps % TARGET_FPS:
        raise InvalidConfig(f"fps must be a positive multiple of {TARGET_FPS}")
    if mode in ("mirror", "approach_retreat") and P != 2:
        raise InvalidConfig(f"mode {mode!r} needs exactly 2 agents")
    if lag < 0:
        raise InvalidConfig("lag must be non-negative")

    rng = np.random.default_rng(seed)
    time = np.arange(T) / fps
    limb_freq = rng.uniform(0.6, 1.0)
    limb_amp = rng.uniform(0.6, 1.0)
    bob = 0.02 * np.sin(2 * np.pi * 2 * limb_freq * time + rng.uniform(0, 2 * np.pi))
    tilt = 0.05 * np.sin(2 * np.pi * limb_freq * time)
    beta = 0.5 * rng.standard_normal((P, 10))
    theta = np.empty((T, P, body.NUM_JOINTS, 6))
    R = np.empty((T, P, 3, 3))
    t = np.empty((T, P, 3))
    limb_phase0 = rng.uniform(0, 2 * np.pi)

    if mode in ("orbit", "ring"):
        phi0 = rng.uniform(0, 2 * np.pi)
        if mode == "orbit":
            omega = rng.uniform(0.4, 0.8) * rng.choice([-1.0, 1.0])
            offsets = 2 * np.pi * np.arange(P) / P if opposite or P != 2 else np.array([0.0, 0.5 * np.pi])
        else:
            omega = 0.0
            offsets = 2 * np.pi * np.arange(P) / P
        sway_freq = rng.uniform(0.3, 0.6)
        for p in range(P):
            phi = phi0 + omega * time + offsets[p]
            r = np.full(T, float(radius))
            if mode == "ring":
                # neighbouring agents sway with a fixed phase lag: coupled breathing ring
                r = radius + 0.25 * np.sin(2 * np.pi * sway_freq * time - 0.5 * p)
                phi = phi + 0.15 * np.sin(2 * np.pi * sway_freq * time - 0.5 * p + 1.0)
            pos = np.stack([r * np.cos(phi), ROOT_HEIGHT + bob, r * np.sin(phi)], -1)
            fwd = -np.stack([np.cos(phi), np.zeros(T), np.sin(phi)], -1)
            root = _root(fwd, pos, tilt)
            R[:, p], t[:, p] = root.R, root.t
            theta[:, p] = _limb_pose(2 * np.pi * limb_freq * time + limb_phase0 + 0.3 * p,
                                     limb_amp, rng.uniform(-0.1, 0.1, 3))
    elif mode == "mirror":
        beta[1] = beta[0]
        wander = rng.uniform(0.2, 0.4)
        f1, f2 = rng.uniform(0.2, 0.5, 2)
        x = 0.7 + wander * np.sin(2 * np.pi * f1 * time)
        z = 0.5 * np.sin(2 * np.pi * f2 * time + rng.uniform(0, 2 * np.pi))
        yaw = -0.5 * np.pi + 0.4 * np.sin(2 * np.pi * f2 * time)
        fwd = np.stack([np.sin(yaw), np.zeros(T), np.cos(yaw)], -1)
        root = _root(fwd, np.stack([x, ROOT_HEIGHT + bob, z], -1), tilt)
        R[:, 0], t[:, 0] = root.R, root.t
        theta[:, 0] = _limb_pose(2 * np.pi * limb_freq * time + limb_phase0, limb_amp,
                                 rng.uniform(-0.1, 0.1, 3))
        src = np.maximum(np.arange(T) - lag, 0)
        mirrored = mirror_transform(RigidTransform(R[src, 0], t[src, 0]))
        R[:, 1], t[:, 1] = mirrored.R, mirrored.t
        theta[:, 1] = mirror_theta(theta[src, 0])
    else:  # approach_retreat
        freq = rng.uniform(0.3, 0.6)
        gap = rng.uniform(1.4, 1.8)
        amp = rng.uniform(0.2, 0.35)
        drive = amp * np.sin(2 * np.pi * freq * time)
        delayed = amp * np.sin(2 * np.pi * freq * (time - lag / fps))
        xs = (-0.5 * gap + drive, 0.5 * gap + delayed)
        fwds = (np.array([1.0, 0.0, 0.0]), np.array([-1.0, 0.0, 0.0]))
        for p in range(2):
            pos = np.stack([xs[p], ROOT_HEIGHT + bob, np.zeros(T)], -1)
            root = _root(np.broadcast_to(fwds[p], (T, 3)), pos, tilt)
            R[:, p], t[:, p] = root.R, root.t
            # arms rise while advancing
            speed = np.gradient(xs[p], time) * (1 if p == 0 else -1)
            phase = 2 * np.pi * limb_freq * time + limb_phase0 + 2.0 * speed
            theta[:, p] = _limb_pose(phase, limb_amp, rng.uniform(-0.1, 0.1, 3))

    return MotionSequence(fps=int(fps), beta=beta, theta=theta, root_world=RigidTransform(R, t),
                          meta={"mode": mode, "seed": int(seed), "lag": int(lag),
                                "radius": float(radius)})


# ---------------------------------------------------------------------------
# preprocessing

def derive_transforms(seq: MotionSequence) -> MotionSequence:
    """Fill ``can_to_root``, ``delta_can`` and ``self_to_partner`` from root poses."""
    dec = canonicalize_sequence(seq.root_world)
    C = dec.canonical
    T, P = seq.T, seq.P
    delta = RigidTransform.identity((T, P))
    if T > 1:
        d = relative_transform(C[:-1], C[1:])
        delta.R[1:], delta.t[1:] = d.R, d.t
    stp_R = np.zeros((T, P, P - 1, 3, 3))
    stp_t = np.zeros((T, P, P - 1, 3))
    for p, partners in enumerate(_slot_partners(P)):
        for s, q in enumerate(partners):
            rel = relative_transform(C[:, p], C[:, q])
            stp_R[:, p, s], stp_t[:, p, s] = rel.R, rel.t
    out = seq.replace(can_to_root=dec.can_to_root, delta_can=delta,
                      self_to_partner=RigidTransform(stp_R, stp_t))
    return _apply_presence(out)


def preprocess(seq: MotionSequence) -> MotionSequence:
    """Decimate to 30 fps and derive the canonical transform representation."""
    if seq.fps <= 0 or seq.fps % TARGET_FPS:
        raise UnsupportedFps(f"fps {seq.fps} is not an integer multiple of {TARGET_FPS}")
    k = seq.fps // TARGET_FPS
    if k > 1:
        seq = seq.replace(theta=seq.theta[::k], root_world=seq.root_world[::k], fps=TARGET_FPS,
                          can_to_root=None, delta_can=None, self_to_partner=None)
    return derive_transforms(seq)


def mirror_augment(seq: MotionSequence) -> MotionSequence:
    """Reflect a sequence across the x = 0 plane (an involution)."""
    out = seq.replace(theta=mirror_theta(seq.theta), root_world=mirror_transform(seq.root_world))
    if seq.has_derived:
        out = out.replace(can_to_root=mirror_transform(seq.can_to_root),
                          delta_can=mirror_transform(seq.delta_can),
                          self_to_partner=mirror_transform(seq.self_to_partner))
        out = _apply_presence(out)
    return out


def permute_agents(seq: MotionSequence, perm) -> MotionSequence:
    """Reorder agents so new agent ``a`` is old agent ``perm[a]``; partner slots follow."""
    perm = np.asarray(perm, dtype=int)
    if sorted(perm.tolist()) != list(range(seq.P)):
        raise InvalidConfig(f"{perm.tolist()} is not a permutation of {seq.P} agents")
    out = seq.replace(beta=seq.beta[perm], theta=seq.theta[:, perm],
                      root_world=seq.root_world[:, perm], presence=seq.presence[perm])
    if seq.has_derived:
        P = seq.P
        slot_idx = np.empty((P, max(P - 1, 0)), dtype=int)
        for a, partners in enumerate(_slot_partners(P)):
            old_self = perm[a]
            for s, b in enumerate(partners):
                old_partner = perm[b]
                slot_idx[a, s] = old_partner - (old_partner > old_self)
        stp = seq.self_to_partner
        rows = perm[:, None]
        out = out.replace(can_to_root=seq.can_to_root[:, perm], delta_can=seq.delta_can[:, perm],
                          self_to_partner=RigidTransform(stp.R[:, rows, slot_idx],
                                                         stp.t[:, rows, slot_idx]))
    return out


def _apply_presence(seq: MotionSequence) -> MotionSequence:
    """Zero partner slots that reference (or belong to) absent agents."""
    if seq.self_to_partner is None or seq.presence.all():
        return seq
    R = seq.self_to_partner.R.copy()
    t = seq.self_to_partner.t.copy()
    for p, partners in enumerate(_slot_partners(seq.P)):
        for s, q in enumerate(partners):
            if not (seq.presence[p] and seq.presence[q]):
                R[:, p, s] = 0.0
                t[:, p, s] = 0.0
    return seq.replace(self_to_partner=RigidTransform(R, t))


def mask_agents(seq: MotionSequence, keep=None, seed=None) -> MotionSequence:
    """Clear presence for agents outside ``keep``.

    With ``keep=None`` a random non-empty subset is kept, drawn from ``seed``.
    """
    if keep is None:
        rng = np.random.default_rng(seed)
        n_keep = int(rng.integers(1, seq.P + 1))
        keep = rng.choice(seq.P, size=n_keep, replace=False)
    keep = sorted({int(k) for k in keep})
    if not keep:
        raise EmptyKeepSet("at least one agent must be kept")
    if keep[0] < 0 or keep[-1] >= seq.P:
        raise InvalidConfig(f"keep set {keep} out of range for {seq.P} agents")
    presence = np.zeros(seq.P, dtype=bool)
    presence[keep] = True
    presence &= seq.presence
    return _apply_presence(seq.replace(presence=presence))


def crop(seq: MotionSequence, start, length) -> MotionSequence:
    sl = slice(start, start + length)
    def cut(T):
        return None if T is None else T[sl]
    return seq.replace(theta=seq.theta[sl], root_world=seq.root_world[sl],
                       can_to_root=cut(seq.can_to_root), delta_can=cut(seq.delta_can),
                       self_to_partner=cut(seq.self_to_partner))


def train_val_seeds(n_train, n_val, base=0):
    """Seed ranges for the split: train = [base, base+n_train), val follows."""
    return list(range(base, base + n_train)), list(range(base + n_train, base + n_train + n_val))


# ---------------------------------------------------------------------------
# normalization

@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.std = np.maximum(np.asarray(self.std, dtype=float), 1e-6)


def compute_stats(features, mask=None, floor=1e-6) -> NormStats:
    """Per-channel mean/std over all leading axes of ``features`` (..., C).

    ``mask`` (same shape as features, or broadcastable) excludes entries such as
    absent-partner slots.
    """
    x = np.asarray(features, dtype=float).reshape(-1, np.shape(features)[-1])
    if mask is None:
        w = np.ones_like(x)
    else:
        w = np.broadcast_to(np.asarray(mask, dtype=float), np.shape(features)).reshape(x.shape)
    n = np.maximum(w.sum(0), 1.0)
    mean = (w * x).sum(0) / n
    var = (w * (x - mean) ** 2).sum(0) / n
    return NormStats(mean, np.maximum(np.sqrt(var), floor))


def normalize(features, stats: NormStats):
    return (np.asarray(features) - stats.mean) / stats.std


def denormalize(features, stats: NormStats):
    return np.asarray(features) * stats.std + stats.mean


# ---------------------------------------------------------------------------
# serialization

_FIELDS = ("schema_version", "fps", "P", "T", "J", "presence", "beta", "theta", "root_world",
           "can_to_root", "delta_can", "self_to_partner")
_OPTIONAL = ("can_to_root", "delta_can", "self_to_partner")


def _fmt(values):
    return " ".join(format(float(v), ".17g") for v in np.asarray(values, dtype=float).ravel())


def dumps(seq: MotionSequence) -> str:
    lines = [
        f"schema_version {SCHEMA_VERSION}",
        f"fps {int(seq.fps)}",
        f"P {seq.P}",
        f"T {seq.T}",
        f"J {seq.J}",
        "presence " + " ".join("1" if b else "0" for b in seq.presence),
        "beta " + _fmt(seq.beta),
        "theta " + _fmt(seq.theta),
        "root_world " + _fmt(seq.root_world.to_vec12()),
    ]
    if seq.has_derived:
        lines.append("can_to_root " + _fmt(seq.can_to_root.to_vec12()))
        lines.append("delta_can " + _fmt(seq.delta_can.to_vec12()))
        lines.append("self_to_partner " + _fmt(seq.self_to_partner.to_vec12()))
    return "\n".join(lines) + "\n"


def save(seq: MotionSequence, path):
    Path(path).write_text(dumps(seq), encoding="utf-8")


def loads(text: str) -> MotionSequence:
    lines = [ln for ln in text.split("\n") if ln.strip()]
    values = {}
    for lineno, line in enumerate(lines, start=1):
        key, _, rest = line.partition(" ")
        expected = _FIELDS[len(values)] if len(values) < len(_FIELDS) else None
        if key != expected:
            raise ParseError(f"expected field {expected!r}, found {key!r}", line=lineno, field=key)
        values[key] = (lineno, rest.split())
        if key == "schema_version":
            try:
                version = int(rest)
            except ValueError:
                raise ParseError("schema_version must be an integer", lineno, key) from None
            if version != SCHEMA_VERSION:
                raise SchemaVersionMismatch(f"unsupported schema_version {version}")

    required = _FIELDS[:9]
    for name in required:
        if name not in values:
            raise ParseError("missing required field", line=len(lines), field=name)
    present_optional = [f for f in _OPTIONAL if f in values]
    if present_optional and len(present_optional) != len(_OPTIONAL):
        missing = [f for f in _OPTIONAL if f not in values][0]
        raise ParseError("derived blocks must appear together", line=len(lines), field=missing)

    def integer(name):
        lineno, toks = values[name]
        if len(toks) != 1:
            raise ParseError("expected a single integer", lineno, name)
        try:
            return int(toks[0])
        except ValueError:
            raise ParseError("expected a single integer", lineno, name) from None

    def block(name, shape):
        lineno, toks = values[name]
        n = int(np.prod(shape))
        if len(toks) != n:
            raise ParseError(f"expected {n} numbers, found {len(toks)}", lineno, name)
        try:
            return np.array([float(x) for x in toks]).reshape(shape)
        except ValueError:
            raise ParseError("malformed number", lineno, name) from None

    fps, P, T, J = (integer(k) for k in ("fps", "P", "T", "J"))
    lineno, toks = values["presence"]
    if len(toks) != P or any(x not in ("0", "1") for x in toks):
        raise ParseError("presence must hold P bits", lineno, "presence")
    presence = np.array([x == "1" for x in toks])
    seq = MotionSequence(
        fps=fps,
        beta=block("beta", (P, 10)),
        theta=block("theta", (T, P, J, 6)),
        root_world=RigidTransform.from_vec12(block("root_world", (T, P, 12))),
        presence=presence,
    )
    if present_optional:
        seq.can_to_root = RigidTransform.from_vec12(block("can_to_root", (T, P, 12)))
        seq.delta_can = RigidTransform.from_vec12(block("delta_can", (T, P, 12)))
        seq.self_to_partner = RigidTransform.from_vec12(block("self_to_partner", (T, P, P - 1, 12)))
    return seq


def load(path) -> MotionSequence:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IOError(f"cannot read motion file {path}: {exc}") from exc
    return loads(text)


def make_corpus(mode, seeds, P=2, T=64, **kwargs):
    """Generate and preprocess one sequence per seed."""
    return [preprocess(generate_interaction(mode, P, T, s, **kwargs)) for s in seeds]


def frames_to_tokens(T, omega):
    return math.ceil(T / omega)
