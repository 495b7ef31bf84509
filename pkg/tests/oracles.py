"""Reference implementations that share no code with the package under test."""
import numpy as np
from scipy.spatial.transform import Rotation


def random_rotations(n, seed):
    return Rotation.random(n, random_state=seed).as_matrix()


def rotation_angle(Ra, Rb):
    """Relative rotation angle via scipy's rotation-vector magnitude."""
    rel = np.swapaxes(Ra, -1, -2) @ Rb
    return Rotation.from_matrix(rel.reshape(-1, 3, 3)).magnitude().reshape(rel.shape[:-2])


def axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=float)
    return Rotation.from_rotvec(axis / np.linalg.norm(axis) * angle).as_matrix()


def homogeneous(R, t):
    M = np.zeros(R.shape[:-2] + (4, 4))
    M[..., :3, :3] = R
    M[..., :3, 3] = t
    M[..., 3, 3] = 1.0
    return M


def relative_homogeneous(Ma, Mb):
    """inv(Ma) @ Mb with a general 4x4 inverse."""
    return np.linalg.inv(Ma) @ Mb


def gram_schmidt(a1, a2):
    b1 = a1 / np.linalg.norm(a1)
    u = a2 - np.dot(b1, a2) * b1
    b2 = u / np.linalg.norm(u)
    return np.stack([b1, b2, np.cross(b1, b2)], axis=1)


def capsule_penetration_mc(a0, a1, ra, b0, b1, rb, n=201, levels=4):
    """Sphere-sampling oracle: capsules as dense unions of spheres along their axes.

    The closest sphere pair is found on a coarse grid and the search is repeated on
    a finer grid around it.
    """
    lo_a, hi_a, lo_b, hi_b = 0.0, 1.0, 0.0, 1.0
    best = np.inf
    for _ in range(levels):
        sa = np.linspace(lo_a, hi_a, n)
        sb = np.linspace(lo_b, hi_b, n)
        pa = a0 + sa[:, None] * (a1 - a0)
        pb = b0 + sb[:, None] * (b1 - b0)
        d = np.linalg.norm(pa[:, None, :] - pb[None, :, :], axis=-1)
        i, j = np.unravel_index(np.argmin(d), d.shape)
        best = min(best, d[i, j])
        step_a, step_b = (hi_a - lo_a) / (n - 1), (hi_b - lo_b) / (n - 1)
        lo_a, hi_a = max(0.0, sa[i] - 2 * step_a), min(1.0, sa[i] + 2 * step_a)
        lo_b, hi_b = max(0.0, sb[j] - 2 * step_b), min(1.0, sb[j] + 2 * step_b)
    return max(0.0, ra + rb - best)


def gaussian_frechet_1d(mu1, s1, mu2, s2):
    return (mu1 - mu2) ** 2 + (s1 - s2) ** 2


def huber(r, delta=1.0):
    r = np.abs(r)
    return np.where(r < delta, 0.5 * r * r / delta, r - 0.5 * delta)


def cosine_alpha_bar(tau):
    import math
    return math.cos((tau + 0.008) / 1.008 * math.pi / 2) ** 2
