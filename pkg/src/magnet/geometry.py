"""Rigid transforms, 6D rotations and canonical frames.

Conventions used throughout the package:

* world up is +y and the floor is the plane y = 0;
* a root frame's forward axis is its +z column;
* ``T_a_b`` style transforms map coordinates expressed in frame ``b`` into
  frame ``a`` (``p_a = R @ p_b + t``), so ``compose(T_a_b, T_b_c) = T_a_c``.

Every function accepts arbitrary leading batch dimensions.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateRotation, GimbalDegenerate, NotARotation

UP = np.array([0.0, 1.0, 0.0])
FORWARD_COLUMN = 2
REFLECT_X = np.diag([-1.0, 1.0, 1.0])


@dataclass(frozen=True)
class RigidTransform:
    """Batched SE(3) element: rotation ``R`` (..., 3, 3) and translation ``t`` (..., 3)."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.R, dtype=float)
        t = np.asarray(self.t, dtype=float)
        if R.shape[-2:] != (3, 3) or t.shape[-1:] != (3,) or R.shape[:-2] != t.shape[:-1]:
            raise ValueError(f"incompatible transform shapes R{R.shape} t{t.shape}")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls, shape=()):
        shape = tuple(np.atleast_1d(shape)) if shape != () else ()
        R = np.broadcast_to(np.eye(3), shape + (3, 3)).copy()
        return cls(R, np.zeros(shape + (3,)))

    @classmethod
    def from_translation(cls, t):
        t = np.asarray(t, dtype=float)
        return cls(np.broadcast_to(np.eye(3), t.shape[:-1] + (3, 3)).copy(), t)

    @classmethod
    def from_vec12(cls, v):
        v = np.asarray(v, dtype=float)
        return cls(v[..., :9].reshape(v.shape[:-1] + (3, 3)), v[..., 9:12])

    @classmethod
    def from_vec9(cls, v):
        v = np.asarray(v, dtype=float)
        return cls(rot6d_to_matrix(v[..., :6]), v[..., 6:9])

    @property
    def shape(self):
        return self.t.shape[:-1]

    def __getitem__(self, idx):
        if not isinstance(idx, tuple):
            idx = (idx,)
        return RigidTransform(self.R[idx], self.t[idx])

    def __matmul__(self, other):
        return compose(self, other)

    def inverse(self):
        return invert(self)

    def apply(self, p):
        return apply(self, p)

    def to_vec12(self):
        return np.concatenate([self.R.reshape(self.shape + (9,)), self.t], axis=-1)

    def to_vec9(self):
        return np.concatenate([matrix_to_rot6d(self.R, check=False), self.t], axis=-1)

    def matrix(self):
        M = np.zeros(self.shape + (4, 4))
        M[..., :3, :3] = self.R
        M[..., :3, 3] = self.t
        M[..., 3, 3] = 1.0
        return M


def rot6d_to_matrix(v, eps=1e-8):
    """Gram-Schmidt decode of 6D rotations ``[col0, col1]`` into rotation matrices."""
    v = np.asarray(v, dtype=float)
    a1, a2 = v[..., 0:3], v[..., 3:6]
    n1 = np.linalg.norm(a1, axis=-1, keepdims=True)
    n2 = np.linalg.norm(a2, axis=-1, keepdims=True)
    if np.any(n1 <= eps) or np.any(n2 <= eps):
        raise DegenerateRotation("6D rotation has a (near) zero column")
    b1 = a1 / n1
    u2 = a2 - np.sum(b1 * a2, axis=-1, keepdims=True) * b1
    nu = np.linalg.norm(u2, axis=-1, keepdims=True)
    # parallel columns leave nothing after the projection
    if np.any(nu <= eps * n2):
        raise DegenerateRotation("6D rotation columns are parallel")
    b2 = u2 / nu
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=-1)


def is_rotation(R, tol=1e-6):
    R = np.asarray(R, dtype=float)
    if R.shape[-2:] != (3, 3):
        return False
    eye = np.eye(3)
    ortho = np.abs(np.swapaxes(R, -1, -2) @ R - eye).max(initial=0.0) <= tol
    return bool(ortho and np.abs(np.linalg.det(R) - 1.0).max(initial=0.0) <= tol)


def matrix_to_rot6d(R, check=True):
    R = np.asarray(R, dtype=float)
    if check and not is_rotation(R):
        raise NotARotation("matrix is not orthonormal with determinant +1")
    return np.concatenate([R[..., :, 0], R[..., :, 1]], axis=-1)


def geodesic_distance(Ra, Rb):
    """Angle in radians of ``Ra^T Rb``.

    Evaluated as ``atan2(sin, cos)`` of the relative rotation: the same value as
    ``arccos((tr - 1) / 2)`` but without its loss of precision near zero, which
    would otherwise floor residuals at ~1e-8 rad.
    """
    Ra = np.asarray(Ra, dtype=float)
    Rb = np.asarray(Rb, dtype=float)
    Q = np.swapaxes(Ra, -1, -2) @ Rb
    cos = np.clip((np.trace(Q, axis1=-2, axis2=-1) - 1.0) / 2.0, -1.0, 1.0)
    skew = np.stack([Q[..., 2, 1] - Q[..., 1, 2], Q[..., 0, 2] - Q[..., 2, 0],
                     Q[..., 1, 0] - Q[..., 0, 1]], -1)
    sin = 0.5 * np.linalg.norm(skew, axis=-1)
    return np.abs(np.arctan2(sin, cos))


def rotation_about_axis(axis, angle):
    """Rodrigues formula; ``axis`` need not be normalized."""
    axis = np.asarray(axis, dtype=float)
    angle = np.asarray(angle, dtype=float)
    axis = axis / np.linalg.norm(axis, axis=-1, keepdims=True)
    x, y, z = axis[..., 0], axis[..., 1], axis[..., 2]
    c, s = np.cos(angle), np.sin(angle)
    C = 1.0 - c
    R = np.stack([
        np.stack([c + x * x * C, x * y * C - z * s, x * z * C + y * s], -1),
        np.stack([y * x * C + z * s, c + y * y * C, y * z * C - x * s], -1),
        np.stack([z * x * C - y * s, z * y * C + x * s, c + z * z * C], -1),
    ], -2)
    return R


def yaw_matrix(angle):
    """Rotation about world up (+y) by ``angle`` radians."""
    angle = np.asarray(angle, dtype=float)
    c, s = np.cos(angle), np.sin(angle)
    z, o = np.zeros_like(c), np.ones_like(c)
    return np.stack([
        np.stack([c, z, s], -1),
        np.stack([z, o, z], -1),
        np.stack([-s, z, c], -1),
    ], -2)


def compose(Ta: RigidTransform, Tb: RigidTransform) -> RigidTransform:
    R = Ta.R @ Tb.R
    t = np.einsum("...ij,...j->...i", Ta.R, Tb.t) + Ta.t
    return RigidTransform(R, t)


def invert(T: RigidTransform) -> RigidTransform:
    Rt = np.swapaxes(T.R, -1, -2)
    return RigidTransform(Rt, -np.einsum("...ij,...j->...i", Rt, T.t))


def apply(T: RigidTransform, p):
    p = np.asarray(p, dtype=float)
    return np.einsum("...ij,...j->...i", T.R, p) + T.t


@dataclass(frozen=True)
class CanonicalDecomposition:
    canonical: RigidTransform
    can_to_root: RigidTransform


def heading_matrix(forward):
    """Heading-only rotation whose +z column is the (floor) direction ``forward``."""
    f = np.asarray(forward, dtype=float).copy()
    f[..., 1] = 0.0
    f = f / np.linalg.norm(f, axis=-1, keepdims=True)
    up = np.broadcast_to(UP, f.shape)
    x = np.cross(up, f)
    return np.stack([x, up, f], axis=-1)


def canonicalize(root_world: RigidTransform, fallback_heading=None, eps=1e-6):
    """Split root poses into a floor-projected heading frame and a residual.

    ``fallback_heading`` is a heading rotation (or a batch of them) used where the
    root forward axis is within ``eps`` of world up.
    """
    fwd = root_world.R[..., :, FORWARD_COLUMN]
    horiz = np.sqrt(fwd[..., 0] ** 2 + fwd[..., 2] ** 2)
    bad = horiz < eps
    safe_fwd = np.where(bad[..., None], np.array([0.0, 0.0, 1.0]), fwd)
    R_c = heading_matrix(safe_fwd)
    if np.any(bad):
        if fallback_heading is None:
            raise GimbalDegenerate("root forward axis is parallel to world up")
        fb = np.broadcast_to(np.asarray(fallback_heading, dtype=float), R_c.shape)
        R_c = np.where(bad[..., None, None], fb, R_c)
    t_c = root_world.t.copy()
    t_c[..., 1] = 0.0
    canonical = RigidTransform(R_c, t_c)
    return CanonicalDecomposition(canonical, compose(invert(canonical), root_world))


def canonicalize_sequence(root_world: RigidTransform):
    """Canonicalize a (T, ...) trajectory, reusing the previous heading at gimbal frames."""
    T = root_world.shape[0]
    Rs, ts, cRs, cts = [], [], [], []
    prev = None
    for i in range(T):
        dec = canonicalize(root_world[i], fallback_heading=prev)
        prev = dec.canonical.R
        Rs.append(dec.canonical.R)
        ts.append(dec.canonical.t)
        cRs.append(dec.can_to_root.R)
        cts.append(dec.can_to_root.t)
    return CanonicalDecomposition(RigidTransform(np.stack(Rs), np.stack(ts)),
                                  RigidTransform(np.stack(cRs), np.stack(cts)))


def relative_transform(Ta_world: RigidTransform, Tb_world: RigidTransform) -> RigidTransform:
    """Pose of frame b expressed in frame a."""
    return compose(invert(Ta_world), Tb_world)


def propagate_partner_transform(T_prev, d_self, d_partner):
    """Advance a self->partner transform one step using both agents' canonical deltas."""
    return compose(compose(invert(d_self), T_prev), d_partner)


def transform_residual(Ta: RigidTransform, Tb: RigidTransform):
    """(geodesic angle, translation distance) between two transforms."""
    return geodesic_distance(Ta.R, Tb.R), np.linalg.norm(Ta.t - Tb.t, axis=-1)


def random_rotation(rng, shape=()):
    """Uniformly distributed rotations via QR of Gaussian matrices."""
    shape = tuple(np.atleast_1d(shape)) if shape != () else ()
    A = rng.standard_normal(shape + (3, 3))
    Q, Rr = np.linalg.qr(A)
    d = np.sign(np.diagonal(Rr, axis1=-2, axis2=-1))
    Q = Q * d[..., None, :]
    det = np.linalg.det(Q)
    Q[..., :, 0] *= det[..., None]
    return Q
