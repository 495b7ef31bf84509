import math

import numpy as np
import pytest
import torch

from magnet import dataset as ds
from magnet import geometry as g
from magnet import vqvae as vq
from magnet.errors import ConfigError, ShapeMismatch
from magnet.nn import frozen_stop_gradients, grad_check

import oracles

CFG = vq.VQVAEConfig(hidden=16, d_vq=8, codebook_size=8)


def _model(cfg=CFG, seed=0, dtype=torch.float64):
    torch.manual_seed(seed)
    return vq.VQVAE(cfg).to(dtype)


def _inputs(B, T, cfg=CFG, seed=0, dtype=torch.float64):
    gen = torch.Generator().manual_seed(seed)
    x = torch.randn(B, T, cfg.x_dim, generator=gen, dtype=dtype)
    c = torch.randn(B, T, vq.COND_DIM, generator=gen, dtype=dtype)
    return x, c


@pytest.mark.parametrize("T,latents,pad", [(64, 16, 0), (4, 1, 0), (62, 16, 2)])
def test_encode_shapes_and_padding(T, latents, pad):
    m = _model(vq.VQVAEConfig())
    x, c = _inputs(2, T, vq.VQVAEConfig())
    h, p = m.encode(x, c)
    assert h.shape == (2, latents, 32) and p == pad
    x_hat, _ = m(x, c)
    assert x_hat.shape == x.shape


def test_pad_repeats_last_frame():
    a = np.arange(6.0).reshape(3, 2)
    out, pad = vq.pad_to_multiple(a, 4, axis=0)
    assert pad == 1
    np.testing.assert_array_equal(out[-1], a[-1])


def test_decode_shapes_and_errors():
    m = _model(vq.VQVAEConfig())
    z = torch.randn(1, 16, 32, dtype=torch.float64)
    c = torch.randn(1, 64, vq.COND_DIM, dtype=torch.float64)
    assert m.decode(z, c).shape == (1, 64, vq.VQVAEConfig().x_dim)
    with pytest.raises(ShapeMismatch):
        m.decode(z, c[:, :60])
    with pytest.raises(ShapeMismatch):
        m.encode(torch.zeros(1, 8, 5), torch.zeros(1, 8, vq.COND_DIM))


def test_decode_depends_on_shape_condition():
    m = _model()
    z = torch.randn(1, 2, CFG.d_vq, dtype=torch.float64)
    c = torch.zeros(1, 8, vq.COND_DIM, dtype=torch.float64)
    c2 = c.clone()
    c2[..., 0] = 1.0
    assert (m.decode(z, c) - m.decode(z, c2)).abs().max() > 0


def test_quantize_examples():
    m = _model(vq.VQVAEConfig(d_vq=2, codebook_size=8))
    with torch.no_grad():
        m.codebook.zero_()
        m.codebook[1] = torch.tensor([1.0, 1.0])
        m.codebook[2:] = 10.0
        _, idx = m.quantize(torch.tensor([[0.2, 0.1]], dtype=torch.float64))
        assert idx.item() == 0
        z, idx = m.quantize(torch.tensor([[1.0, 1.0]], dtype=torch.float64))
        assert idx.item() == 1 and torch.equal(z[0], m.codebook[1])
        # equidistant between entries 3 and 7
        m.codebook[3] = torch.tensor([-1.0, 0.0])
        m.codebook[7] = torch.tensor([1.0, 0.0])
        m.codebook[0] = m.codebook[1] = 10.0
        assert m.quantize(torch.tensor([[0.0, 0.0]], dtype=torch.float64))[1].item() == 3


def test_quantize_matches_brute_force():
    m = _model()
    h = torch.randn(200, CFG.d_vq, dtype=torch.float64)
    e = m.codebook.detach().numpy()
    want = [int(np.argmin([np.sum((hi - ek) ** 2) for ek in e])) for hi in h.numpy()]
    np.testing.assert_array_equal(m.quantize(h)[1].numpy(), want)


def _rot6d_flat(R):
    return g.matrix_to_rot6d(R).reshape(*R.shape[:-3], -1)


def test_loss_examples():
    J = CFG.n_joints
    R = oracles.random_rotations(2 * 3 * J, 0).reshape(2, 3, J, 3, 3)
    x = np.concatenate([_rot6d_flat(R), np.tile([1.0, 0, 0, 0, 1, 0, 0, 0.9, 0], (2, 3, 1))], -1)
    x = torch.as_tensor(x)
    parts = vq.vqvae_loss(x, x, None, CFG)
    assert parts["total"].item() == pytest.approx(0.0, abs=1e-9)
    # one joint of one frame rotated by 90 degrees
    R2 = R.copy()
    R2[0, 1, 4] = R[0, 1, 4] @ oracles.axis_angle([0, 0, 1], math.pi / 2)
    x2 = x.clone()
    x2[..., : J * 6] = torch.as_tensor(_rot6d_flat(R2))
    parts = vq.vqvae_loss(x2, x, None, CFG)
    assert parts["rotation"].item() * 2 == pytest.approx(math.pi / 2, abs=1e-9)
    # a root translation residual of 0.5 lands on the quadratic branch
    x3 = x.clone()
    x3[0, 2, J * 6 + 6] += 0.5
    parts = vq.vqvae_loss(x3, x, None, CFG)
    # identity rotations contribute the geodesic's 1e-12 epsilon floor per frame
    assert parts["root"].item() * 2 == pytest.approx(0.125, abs=1e-9)
    assert parts["total"].item() == pytest.approx(parts["rotation"].item() + parts["root"].item(), abs=1e-14)


def test_loss_with_codebook_terms_is_zero_at_fixed_point():
    m = _model()
    x, c = _inputs(1, 4)
    h, _ = m.encode(x, c)
    with torch.no_grad():
        m.codebook[0] = h[0, 0]
    _, aux = m(x, c)
    parts = vq.vqvae_loss(x, x, aux, CFG)
    assert parts["codebook"].item() == pytest.approx(0.0, abs=1e-20)
    assert parts["commitment"].item() == pytest.approx(0.0, abs=1e-20)


def test_full_loss_grad_check_two_frames():
    m = _model()
    x, c = _inputs(2, 2, seed=1)
    x = x.clone()
    # valid rotations on the target so the geodesic is well defined
    R = oracles.random_rotations(2 * 2 * CFG.n_joints, 2).reshape(2, 2, CFG.n_joints, 3, 3)
    x[..., : CFG.n_joints * 6] = torch.as_tensor(_rot6d_flat(R))

    def f():
        x_hat, aux = m(x, c)
        return vq.vqvae_loss(x_hat, x, aux, CFG)["total"]

    assert grad_check(f, list(m.parameters()), max_elements=12) < 1e-4


def test_straight_through_pass_through():
    m = _model()
    x, c = _inputs(1, 8, seed=3)
    h0, _ = m.encode(x, c)
    h = h0.detach().clone().requires_grad_(True)

    def recon():
        z, _, _, _ = m.quantize_st(h)
        return (m.decode(z, c) ** 2).sum()

    # autograd through the straight-through path matches finite differences in h
    # with the selected codebook entries held fixed
    assert grad_check(recon, [h]) < 1e-6
    # and equals the gradient with respect to the quantized latents
    z, _, _, _ = m.quantize_st(h)
    z.retain_grad()
    (m.decode(z, c) ** 2).sum().backward()
    torch.testing.assert_close(h.grad, z.grad, atol=0, rtol=0)


def test_config_validation():
    with pytest.raises(ConfigError):
        vq.VQVAEConfig(omega=3).validate()
    with pytest.raises(ConfigError):
        vq.VQVAEConfig(codebook_size=1).validate()
    p = vq.VQVAEConfig.full_scale()
    assert (p.codebook_size, p.d_vq, p.omega) == (1024, 512, 4)


def _rest_sequence(T=32):
    theta = np.tile([1.0, 0, 0, 0, 1, 0], (T, 1, 9, 1))
    root = g.RigidTransform(np.broadcast_to(np.eye(3), (T, 1, 3, 3)).copy(),
                            np.tile([0.0, 0.9, 0.0], (T, 1, 1)))
    return ds.preprocess(ds.MotionSequence(30, np.zeros((1, 10)), theta, root))


def test_rest_pose_overfit():
    seq = _rest_sequence()
    cfg = vq.VQVAEConfig(hidden=32, d_vq=16, codebook_size=8)
    tc = vq.VQVAETrainConfig(steps=1000, batch_size=2, lr=3e-3, window=16, eval_every=100, log_every=10**9)
    res = vq.train_vqvae([seq], cfg, tc, seed=0)
    x, c = vq.sequence_inputs(seq)
    X, C = torch.as_tensor(x, dtype=torch.float32), torch.as_tensor(c, dtype=torch.float32)
    x_hat = res.model.reconstruct(X, C).double().numpy()
    R_hat = g.rot6d_to_matrix(x_hat[..., :54].reshape(1, 32, 9, 6))
    err = g.geodesic_distance(R_hat, np.eye(3))
    assert err.max() < 0.05
    # reconstruction loss per frame and rotation term (9 joints plus the root)
    recon = vq.vqvae_loss(torch.as_tensor(x_hat), torch.as_tensor(x), None, cfg)
    assert recon["total"].item() / (32 * 10) < 1e-3


def test_checkpoint_roundtrip(tmp_path):
    m = _model(dtype=torch.float32)
    path = tmp_path / "vq.ckpt"
    vq.save_vqvae(m, path)
    m2 = vq.load_vqvae(path)
    assert m2.config == m.config
    x, c = _inputs(1, 8, dtype=torch.float32)
    torch.testing.assert_close(m.reconstruct(x, c), m2.reconstruct(x, c), atol=0, rtol=0)
    assert path.read_text().splitlines()[1] == "model_kind vqvae"


def test_training_is_deterministic():
    seqs = [ds.preprocess(ds.generate_interaction("orbit", 2, 64, s)) for s in range(2)]
    tc = vq.VQVAETrainConfig(steps=20, batch_size=4, lr=1e-3, window=16, eval_every=10, log_every=10**9)
    a = vq.train_vqvae(seqs, CFG, tc, seed=4)
    b = vq.train_vqvae(seqs, CFG, tc, seed=4)
    assert [h["total"] for h in a.history] == [h["total"] for h in b.history]
    with pytest.raises(ConfigError):
        vq.train_vqvae(seqs, CFG, vq.VQVAETrainConfig(steps=1, window=128), seed=0)
