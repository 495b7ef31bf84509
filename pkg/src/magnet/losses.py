"""Differentiable rotation/transform distances shared by the VQ-VAE and DFoT losses."""
import torch
import torch.nn.functional as F


def rot6d_to_matrix(v, eps=1e-8):
    """Gram-Schmidt on (..., 6) -> (..., 3, 3); columns are [b1, b2, b1 x b2]."""
    a1, a2 = v[..., 0:3], v[..., 3:6]
    b1 = F.normalize(a1, dim=-1, eps=eps)
    b2 = F.normalize(a2 - (b1 * a2).sum(-1, keepdim=True) * b1, dim=-1, eps=eps)
    b3 = torch.cross(b1, b2, dim=-1)
    return torch.stack([b1, b2, b3], dim=-1)


def matrix_to_rot6d(R):
    return torch.cat([R[..., :, 0], R[..., :, 1]], dim=-1)


def geodesic(Ra, Rb, eps=None):
    """Rotation angle of ``Ra^T Rb`` as ``atan2(sin, cos)``.

    ``eps`` (default 1e-24 in float64, 1e-20 otherwise) is added under the square
    root of the sine term so the gradient stays finite at zero angle; the value at
    an exact match is ``sqrt(eps)``.
    """
    if eps is None:
        eps = 1e-24 if Ra.dtype == torch.float64 else 1e-20
    Q = Ra.transpose(-1, -2) @ Rb
    cos = (Q.diagonal(dim1=-2, dim2=-1).sum(-1) - 1.0) / 2.0
    skew = torch.stack([Q[..., 2, 1] - Q[..., 1, 2], Q[..., 0, 2] - Q[..., 2, 0],
                        Q[..., 1, 0] - Q[..., 0, 1]], -1)
    sin = 0.5 * torch.sqrt((skew * skew).sum(-1) + eps)
    return torch.atan2(sin, cos)


def smooth_l1(pred, target, delta=1.0):
    """Elementwise Huber: 0.5 r^2 / delta inside |r| < delta, |r| - 0.5 delta outside."""
    return F.smooth_l1_loss(pred, target, reduction="none", beta=delta)


def transform_distance(R_pred, t_pred, R_true, t_true, delta=1.0):
    """Geodesic angle plus summed smooth-L1 translation error, per transform."""
    return geodesic(R_pred, R_true) + smooth_l1(t_pred, t_true, delta).sum(-1)


def vec9_to_rt(v):
    return rot6d_to_matrix(v[..., :6]), v[..., 6:9]


def compose(Ra, ta, Rb, tb):
    return Ra @ Rb, (Ra @ tb[..., None])[..., 0] + ta


def invert(R, t):
    Rt = R.transpose(-1, -2)
    return Rt, -(Rt @ t[..., None])[..., 0]
