"""Evaluation metrics for generated multi-agent motion.

Joint arrays follow the (T, ..., J, 3) world-coordinate layout returned by
``MotionSequence.joints_world``. All metrics are non-negative.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import body
from .errors import DimensionMismatch, LengthMismatch, ShapeMismatch, TooFewSamples
from .geometry import RigidTransform

CONTACT_HEIGHT = 0.05
FEATURE_WINDOW = 16


# ---------------------------------------------------------------------------
# features

def canonical_joints(joints, frame: RigidTransform):
    """Express joints (T, P, J, 3) in the per-frame reference ``frame`` (T,)."""
    inv = frame.inverse()
    return np.einsum("tij,tpkj->tpki", inv.R, joints) + inv.t[:, None, None, :]


def motion_features(seq, window=FEATURE_WINDOW):
    """Flattened 16-frame windows of joints in agent 1's canonical frame, (n_windows, window*P*J*3)."""
    joints = canonical_joints(seq.joints_world(), seq.canonical_world()[:, 0])
    n = seq.T // window
    if n == 0:
        raise TooFewSamples(f"sequence of {seq.T} frames is shorter than the feature window {window}")
    return joints[: n * window].reshape(n, -1)


# ---------------------------------------------------------------------------
# distribution metrics

def _psd_sqrt(S):
    vals, vecs = np.linalg.eigh((S + S.T) / 2)
    return (vecs * np.sqrt(np.maximum(vals, 0.0))) @ vecs.T


def frechet_distance(gen, real):
    """Frechet distance between Gaussians fitted to two feature sets (N, d)."""
    gen = np.atleast_2d(np.asarray(gen, dtype=float))
    real = np.atleast_2d(np.asarray(real, dtype=float))
    if gen.shape[1] != real.shape[1]:
        raise DimensionMismatch(f"feature widths differ: {gen.shape[1]} vs {real.shape[1]}")
    if len(gen) < 2 or len(real) < 2:
        raise TooFewSamples("covariance estimates need at least 2 samples per set")
    mu_g, mu_r = gen.mean(0), real.mean(0)
    cov_g = np.atleast_2d(np.cov(gen, rowvar=False))
    cov_r = np.atleast_2d(np.cov(real, rowvar=False))
    root_g = _psd_sqrt(cov_g)
    cross = _psd_sqrt(root_g @ cov_r @ root_g)
    fd = np.sum((mu_g - mu_r) ** 2) + np.trace(cov_g) + np.trace(cov_r) - 2 * np.trace(cross)
    return float(max(fd, 0.0))


def diversity(groups):
    """Across-sample variance (ddof=1) averaged over frames and channels, then over conditions.

    ``groups`` is a list with one (n_samples, ...) array per condition.
    """
    vals = []
    for g in groups:
        g = np.asarray(g, dtype=float)
        if len(g) < 2:
            raise TooFewSamples("diversity needs at least 2 samples per condition")
        vals.append(np.var(g, axis=0, ddof=1).mean())
    if not vals:
        raise TooFewSamples("diversity needs at least one condition")
    return float(np.mean(vals))


def _pearson(a, b):
    a = a - a.mean(0)
    b = b - b.mean(0)
    na = np.sqrt((a * a).sum(0))
    nb = np.sqrt((b * b).sum(0))
    ok = (na > 1e-12) & (nb > 1e-12)
    rho = np.zeros(a.shape[1:])
    rho[ok] = (a * b).sum(0)[ok] / (na[ok] * nb[ok])
    return rho, ok


def motion_interaction(gen, real, return_skipped=False):
    """Mean |rho_real - rho_gen| of per-joint, per-axis correlation between the two agents.

    ``gen`` and ``real`` are (T, 2, J, 3). Channels with zero variance in either set
    are skipped.
    """
    gen = np.asarray(gen, dtype=float)
    real = np.asarray(real, dtype=float)
    if gen.shape != real.shape:
        raise LengthMismatch(f"gen {gen.shape} and real {real.shape} are not aligned")
    if gen.ndim != 4 or gen.shape[1] != 2:
        raise ShapeMismatch("motion_interaction expects (T, 2, J, 3) joint arrays")
    rho_g, ok_g = _pearson(gen[:, 0], gen[:, 1])
    rho_r, ok_r = _pearson(real[:, 0], real[:, 1])
    ok = ok_g & ok_r
    skipped = int((~ok).sum())
    value = float(np.abs(rho_r - rho_g)[ok].mean()) if ok.any() else 0.0
    return (value, skipped) if return_skipped else value


# ---------------------------------------------------------------------------
# physical plausibility

def foot_skating(joints, feet=body.FOOT_JOINTS, contact_height=CONTACT_HEIGHT):
    """Mean horizontal foot displacement per frame over frames with the foot below ``contact_height``."""
    joints = np.asarray(joints, dtype=float)
    f = joints[..., list(feet), :]
    if len(f) < 2:
        return 0.0
    contact = f[1:, ..., 1] < contact_height
    step = np.linalg.norm(f[1:, ..., [0, 2]] - f[:-1, ..., [0, 2]], axis=-1)
    return float(step[contact].mean()) if contact.any() else 0.0


def capsule_interpenetration(ends_a, radii_a, ends_b, radii_b):
    """Mean over frames of the summed pairwise penetration between two capsule sets (T, B, 2, 3)."""
    ends_a, ends_b = np.asarray(ends_a, dtype=float), np.asarray(ends_b, dtype=float)
    if ends_a.shape[0] != ends_b.shape[0]:
        raise LengthMismatch(f"{ends_a.shape[0]} vs {ends_b.shape[0]} frames")
    depth = body.penetration_depths(ends_a, radii_a, ends_b, radii_b)
    return float(depth.sum(axis=(-2, -1)).mean())


def interpenetration(joints_a, joints_b, skel_a: body.Skeleton, skel_b: body.Skeleton):
    """Inter-agent capsule penetration depth in meters, averaged over frames."""
    joints_a, joints_b = np.asarray(joints_a), np.asarray(joints_b)
    if joints_a.shape[0] != joints_b.shape[0]:
        raise LengthMismatch(f"{joints_a.shape[0]} vs {joints_b.shape[0]} frames")
    ea, ra = body.body_capsules(joints_a, skel_a)
    eb, rb = body.body_capsules(joints_b, skel_b)
    return capsule_interpenetration(ea, ra, eb, rb)


def sequence_interpenetration(seq):
    """Interpenetration summed over every pair of present agents."""
    joints = seq.joints_world()
    skels = [body.skeleton_from_shape(b) for b in seq.beta]
    agents = np.flatnonzero(seq.presence)
    total = 0.0
    for i, p in enumerate(agents):
        for q in agents[i + 1:]:
            total += interpenetration(joints[:, p], joints[:, q], skels[p], skels[q])
    return total


# ---------------------------------------------------------------------------
# accuracy

def _per_sample(samples, gt):
    samples = np.asarray(samples, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if samples.ndim == gt.ndim:
        samples = samples[None]
    if samples.shape[1:] != gt.shape or len(samples) == 0:
        raise ShapeMismatch(f"samples {samples.shape} do not align with ground truth {gt.shape}")
    return samples, gt


def mpjpe(samples, gt):
    """Minimum over samples of the mean per-joint position error."""
    samples, gt = _per_sample(samples, gt)
    err = np.linalg.norm(samples - gt, axis=-1).reshape(len(samples), -1).mean(1)
    return float(err.min())


def mpjve(samples, gt):
    """Minimum over samples of the mean per-joint velocity (forward difference) error."""
    samples, gt = _per_sample(samples, gt)
    if gt.shape[0] < 2:
        raise ShapeMismatch("velocity error needs at least 2 frames")
    v = np.diff(samples, axis=1)
    vg = np.diff(gt, axis=0)
    err = np.linalg.norm(v - vg, axis=-1).reshape(len(samples), -1).mean(1)
    return float(err.min())


# ---------------------------------------------------------------------------
# reporting

def config_hash(config: dict) -> str:
    text = "\n".join(f"{k}={config[k]}" for k in sorted(config))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:12]


@dataclass
class EvaluationReport:
    config_hash: str
    rows: list = field(default_factory=list)      # (metric, value, n_samples)

    def add(self, metric, value, n_samples):
        self.rows.append((metric, float(value), int(n_samples)))

    def as_dict(self):
        return {m: v for m, v, _ in self.rows}

    def format(self) -> str:
        width = max([len("metric")] + [len(m) for m, _, _ in self.rows])
        lines = [f"{'metric':<{width}}  {'value':>14}  {'n_samples':>9}  config_hash"]
        for m, v, n in self.rows:
            lines.append(f"{m:<{width}}  {v:>14.6g}  {n:>9d}  {self.config_hash}")
        lines.append("")
        lines.append("[results]")
        lines.append(f"config_hash={self.config_hash}")
        for m, v, n in self.rows:
            lines.append(f"{m}={v!r}")
            lines.append(f"{m}.n_samples={n}")
        return "\n".join(lines) + "\n"


def parse_report(text: str) -> dict:
    """Read the key=value block of a formatted report."""
    out = {}
    body_started = False
    for line in text.splitlines():
        if line.strip() == "[results]":
            body_started = True
            continue
        if body_started and "=" in line:
            k, _, v = line.partition("=")
            out[k] = v if k == "config_hash" else float(v)
    return out


def evaluate(generated, real, config: dict, samples=None, ground_truth_joints=None) -> EvaluationReport:
    """All metrics for generated vs real sequences.

    ``generated`` and ``real`` are lists of MotionSequence. ``samples`` optionally
    groups generated joint arrays per condition for DIV and MPJPE/MPJVE, as a list
    of (n_samples, T, P, J, 3) arrays aligned with ``ground_truth_joints``.
    """
    report = EvaluationReport(config_hash(config))
    fg = np.concatenate([motion_features(s) for s in generated])
    fr = np.concatenate([motion_features(s) for s in real])
    if len(fg) >= 2 and len(fr) >= 2:
        report.add("FD", frechet_distance(fg, fr), len(fg))
    jg = [s.joints_world() for s in generated]
    if samples is not None and all(len(g) >= 2 for g in samples):
        report.add("DIV", diversity(samples), sum(len(g) for g in samples))
    pairs = [(g, r) for g, r in zip(jg, (s.joints_world() for s in real))
             if g.shape == r.shape and g.shape[1] == 2]
    if pairs:
        report.add("MI", np.mean([motion_interaction(g, r) for g, r in pairs]), len(pairs))
    report.add("FS", np.mean([foot_skating(j) for j in jg]), len(jg))
    report.add("IP", np.mean([sequence_interpenetration(s) for s in generated]), len(generated))
    if samples is not None and ground_truth_joints is not None:
        report.add("MPJPE", np.mean([mpjpe(g, t) for g, t in zip(samples, ground_truth_joints)]),
                   sum(len(g) for g in samples))
        report.add("MPJVE", np.mean([mpjve(g, t) for g, t in zip(samples, ground_truth_joints)]),
                   sum(len(g) for g in samples))
    return report
