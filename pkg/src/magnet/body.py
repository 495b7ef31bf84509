"""A 9-joint parametric skeleton with capsule proxies.

Joint order and parents::

    0 pelvis      -1
    1 spine        0
    2 head         1
    3 l_shoulder   1
    4 r_shoulder   1
    5 l_hand       3
    6 r_hand       4
    7 l_foot       0
    8 r_foot       0

Offsets are in meters with +y up, +z forward and +x to the body's left.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import RigidTransform, rot6d_to_matrix

JOINT_NAMES = ("pelvis", "spine", "head", "l_shoulder", "r_shoulder",
               "l_hand", "r_hand", "l_foot", "r_foot")
NUM_JOINTS = len(JOINT_NAMES)
PARENTS = np.array([-1, 0, 1, 1, 1, 3, 4, 0, 0])
# left/right channel swap used by mirror augmentation
MIRROR_PERM = np.array([0, 1, 2, 4, 3, 6, 5, 8, 7])
FOOT_JOINTS = (7, 8)
HAND_JOINTS = (5, 6)

BASE_OFFSETS = np.array([
    [0.00, 0.00, 0.00],
    [0.00, 0.30, 0.00],
    [0.00, 0.30, 0.05],
    [0.18, 0.25, 0.00],
    [-0.18, 0.25, 0.00],
    [0.05, -0.55, 0.00],
    [-0.05, -0.55, 0.00],
    [0.10, -0.88, 0.00],
    [-0.10, -0.88, 0.00],
])

# radius of the capsule ending at each joint (index 0 is unused by capsules)
BONE_RADII = np.array([0.12, 0.12, 0.10, 0.06, 0.06, 0.04, 0.04, 0.07, 0.07])

# Shape mixing: bone scale = 1 + SHAPE_MIXING @ beta. Left/right rows are equal so
# that mirroring a body never changes its proportions.
SHAPE_MIXING = np.array([
    [0.00, 0.00, 0.00, 0.00, 0.00, 0.00, 0.00, 0.00, 0.00, 0.00],
    [0.05, 0.02, -0.01, 0.00, 0.01, 0.00, 0.00, 0.01, 0.00, 0.00],
    [0.03, -0.01, 0.02, 0.01, 0.00, 0.00, 0.01, 0.00, 0.00, 0.00],
    [0.04, 0.03, 0.00, -0.02, 0.00, 0.01, 0.00, 0.00, 0.01, 0.00],
    [0.04, 0.03, 0.00, -0.02, 0.00, 0.01, 0.00, 0.00, 0.01, 0.00],
    [0.05, -0.02, 0.01, 0.03, -0.01, 0.00, 0.01, 0.00, 0.00, 0.01],
    [0.05, -0.02, 0.01, 0.03, -0.01, 0.00, 0.01, 0.00, 0.00, 0.01],
    [0.05, 0.01, 0.03, 0.00, 0.02, -0.01, 0.00, 0.01, 0.00, 0.00],
    [0.05, 0.01, 0.03, 0.00, 0.02, -0.01, 0.00, 0.01, 0.00, 0.00],
])
SCALE_RANGE = (0.5, 2.0)


@dataclass(frozen=True)
class Skeleton:
    parent: np.ndarray
    rest_offsets: np.ndarray
    bone_radii: np.ndarray

    @property
    def num_joints(self):
        return len(self.parent)

    def bones(self):
        """(parent, child) index pairs, one per capsule."""
        return [(int(p), j) for j, p in enumerate(self.parent) if p >= 0]


@dataclass(frozen=True)
class Capsule:
    endpoint_a: np.ndarray
    endpoint_b: np.ndarray
    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("capsule radius must be positive")


def bone_scales(beta):
    beta = np.asarray(beta, dtype=float)
    if beta.shape[-1] != 10 or not np.all(np.isfinite(beta)):
        raise ValueError("beta must hold 10 finite coefficients")
    return np.clip(1.0 + beta @ SHAPE_MIXING.T, *SCALE_RANGE)


def skeleton_from_shape(beta) -> Skeleton:
    scale = bone_scales(beta)
    return Skeleton(PARENTS.copy(), BASE_OFFSETS * scale[:, None], BONE_RADII.copy())


def forward_kinematics(skel: Skeleton, theta, root: RigidTransform | None = None):
    """World joint positions (..., J, 3) from local 6D joint rotations (..., J, 6).

    The pelvis sits at the root translation with orientation ``root.R @ R(theta[0])``;
    every other joint hangs off its parent through the accumulated parent rotation.
    """
    theta = np.asarray(theta, dtype=float)
    local = rot6d_to_matrix(theta)
    batch = theta.shape[:-2]
    if root is None:
        root = RigidTransform.identity(batch)
    offsets = np.asarray(skel.rest_offsets, dtype=float)
    glob = [None] * skel.num_joints
    pos = [None] * skel.num_joints
    for j, p in enumerate(skel.parent):
        if p < 0:
            glob[j] = root.R @ local[..., j, :, :]
            pos[j] = np.broadcast_to(root.t, batch + (3,)).copy()
        else:
            glob[j] = glob[p] @ local[..., j, :, :]
            pos[j] = pos[p] + np.einsum("...ij,j->...i", glob[p], offsets[j])
    return np.stack(pos, axis=-2)


def body_capsules(joints, skel: Skeleton):
    """Capsule endpoints (..., B, 2, 3) and radii (B,) for one body's joint positions."""
    joints = np.asarray(joints, dtype=float)
    bones = skel.bones()
    ends = np.stack([np.stack([joints[..., p, :], joints[..., c, :]], axis=-2) for p, c in bones],
                    axis=-3)
    radii = np.array([skel.bone_radii[c] for _, c in bones])
    return ends, radii


def segment_distance(p0, p1, q0, q1, eps=1e-12):
    """Exact distance between segments [p0, p1] and [q0, q1] (batched).

    Both argument orders are evaluated and the smaller result kept, which makes the
    value bitwise symmetric.
    """
    p0, p1, q0, q1 = (np.asarray(a, dtype=float) for a in (p0, p1, q0, q1))
    return np.minimum(_segment_distance(p0, p1, q0, q1, eps), _segment_distance(q0, q1, p0, p1, eps))


def _segment_distance(p0, p1, q0, q1, eps):
    d1 = p1 - p0
    d2 = q1 - q0
    r = p0 - q0
    a = np.sum(d1 * d1, -1)
    e = np.sum(d2 * d2, -1)
    f = np.sum(d2 * r, -1)
    c = np.sum(d1 * r, -1)
    b = np.sum(d1 * d2, -1)
    a_deg = a <= eps
    e_deg = e <= eps
    safe_a = np.where(a_deg, 1.0, a)
    safe_e = np.where(e_deg, 1.0, e)
    denom = a * e - b * b

    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(denom > eps * np.maximum(a * e, eps),
                     np.clip((b * f - c * e) / np.where(denom == 0, 1.0, denom), 0.0, 1.0), 0.0)
    t = (b * s + f) / safe_e
    s = np.where(t < 0.0, np.clip(-c / safe_a, 0.0, 1.0), s)
    s = np.where(t > 1.0, np.clip((b - c) / safe_a, 0.0, 1.0), s)
    t = np.clip(t, 0.0, 1.0)

    # degenerate segments collapse to points
    t = np.where(a_deg, np.clip(f / safe_e, 0.0, 1.0), t)
    s = np.where(a_deg, 0.0, s)
    s = np.where(~a_deg & e_deg, np.clip(-c / safe_a, 0.0, 1.0), s)
    t = np.where(e_deg, 0.0, t)

    cp = p0 + s[..., None] * d1
    cq = q0 + t[..., None] * d2
    return np.linalg.norm(cp - cq, axis=-1)


def capsule_penetration(a: Capsule, b: Capsule) -> float:
    dist = segment_distance(a.endpoint_a, a.endpoint_b, b.endpoint_a, b.endpoint_b)
    return float(max(0.0, a.radius + b.radius - dist))


def penetration_depths(ends_a, radii_a, ends_b, radii_b):
    """Pairwise penetration (..., Ba, Bb) between two capsule sets."""
    A = np.asarray(ends_a)[..., :, None, :, :]
    B = np.asarray(ends_b)[..., None, :, :, :]
    dist = segment_distance(A[..., 0, :], A[..., 1, :], B[..., 0, :], B[..., 1, :])
    depth = np.asarray(radii_a)[:, None] + np.asarray(radii_b)[None, :] - dist
    return np.maximum(depth, 0.0)
