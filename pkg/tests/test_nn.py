import math

import numpy as np
import pytest
import torch

from magnet import nn as mnn
from magnet.errors import NonScalarLoss, OddDimension, OddHeadDim, SchemaVersionMismatch, ShapeMismatch

D64 = torch.float64


def _rand(*shape, seed=0):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=D64)


def test_layer_examples():
    assert mnn.gelu(torch.zeros(3)).abs().max() == 0
    y = mnn.layernorm(torch.full((5,), 3.0), torch.ones(5), torch.zeros(5))
    assert y.abs().max() == 0
    x = _rand(4, 6)
    assert torch.equal(mnn.linear(x, torch.eye(6, dtype=D64), torch.zeros(6, dtype=D64)), x)
    with pytest.raises(ShapeMismatch):
        mnn.linear(x, torch.eye(5, dtype=D64))
    with pytest.raises(ShapeMismatch):
        mnn.layernorm(x, torch.ones(3), torch.zeros(3))


def test_layernorm_and_gelu_against_formulas():
    x = _rand(3, 8, seed=1)
    g, b = _rand(8, seed=2), _rand(8, seed=3)
    mu = x.mean(-1, keepdim=True)
    var = ((x - mu) ** 2).mean(-1, keepdim=True)
    want = (x - mu) / torch.sqrt(var + 1e-5) * g + b
    torch.testing.assert_close(mnn.layernorm(x, g, b), want, atol=1e-12, rtol=0)
    want = 0.5 * x * (1 + torch.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x ** 3)))
    torch.testing.assert_close(mnn.gelu(x), want, atol=1e-12, rtol=0)


def test_conv1d_shapes():
    x = _rand(2, 3, 16)
    assert mnn.conv1d(x, _rand(5, 3, 3)).shape == (2, 5, 16)
    assert mnn.conv1d(x, _rand(5, 3, 8), stride=4).shape == (2, 5, 4)
    with pytest.raises(ShapeMismatch):
        mnn.conv1d(_rand(2, 3, 15), _rand(5, 3, 8), stride=4)
    with pytest.raises(ShapeMismatch):
        mnn.conv1d(x, _rand(5, 4, 3))


def test_conv1d_matches_direct_sum():
    x, w = _rand(1, 2, 8, seed=4), _rand(3, 2, 3, seed=5)
    xp = np.pad(x.numpy(), ((0, 0), (0, 0), (1, 1)))
    want = np.zeros((1, 3, 8))
    for o in range(3):
        for t in range(8):
            want[0, o, t] = np.sum(w.numpy()[o] * xp[0, :, t:t + 3])
    np.testing.assert_allclose(mnn.conv1d(x, w).numpy(), want, atol=1e-12)


def test_sinusoidal_embed():
    e = mnn.sinusoidal_embed(torch.tensor(0.0, dtype=D64), 16)
    assert torch.all(e[:8] == 0) and torch.all(e[8:] == 1)
    a = mnn.sinusoidal_embed(torch.tensor(0.37), 32)
    assert torch.equal(a, mnn.sinusoidal_embed(torch.tensor(0.37), 32))
    # frequencies run geometrically from 1 to 1e4
    tau = 1e-3
    e = mnn.sinusoidal_embed(torch.tensor(tau, dtype=D64), 8)
    freqs = np.arcsin(e[:4].numpy()) / tau
    np.testing.assert_allclose(freqs[0], 1.0, rtol=1e-6)
    np.testing.assert_allclose(np.diff(np.log(freqs[:3])), np.log(1e4) / 3, rtol=1e-3)
    with pytest.raises(OddDimension):
        mnn.sinusoidal_embed(torch.tensor(0.1), 7)


def test_rope_properties():
    q, k = _rand(1, 8, seed=6), _rand(1, 8, seed=7)
    q0, k0 = mnn.rope_apply(q, k, torch.zeros(1))
    torch.testing.assert_close(q0, q, atol=0, rtol=0)
    torch.testing.assert_close(k0, k, atol=0, rtol=0)
    pos = torch.arange(8)
    qs, ks = mnn.rope_apply(q.expand(8, 8), k.expand(8, 8), pos)
    torch.testing.assert_close(qs.norm(dim=-1), q.norm().expand(8), atol=1e-12, rtol=0)
    dots = qs @ ks.T
    for i in range(8):
        for j in range(8):
            if i >= 1 and j >= 1:
                assert abs(dots[i, j] - dots[i - 1, j - 1]) < 1e-12
    with pytest.raises(OddHeadDim):
        mnn.rope_apply(_rand(1, 7), _rand(1, 7), torch.zeros(1))


def _block(d=8, heads=2, seed=0):
    torch.manual_seed(seed)
    return mnn.PostNormBlock(d, heads).double()


def test_single_token_attention_is_value_projection():
    att = mnn.SelfAttention(8, 2).double()
    x = _rand(1, 1, 8, seed=8)
    d = 8
    v = torch.nn.functional.linear(x, att.qkv.weight[2 * d:], att.qkv.bias[2 * d:])
    torch.testing.assert_close(att(x, torch.zeros(1, 1)), att.out(v), atol=1e-12, rtol=0)


def test_masked_tokens_match_removed_tokens():
    blk = _block()
    x = _rand(1, 6, 8, seed=9)
    pos = torch.tensor([[0, 0, 1, 1, 2, 2]])
    valid = torch.tensor([[True, False, True, False, True, False]])
    full = blk(x, pos, valid)
    kept = blk(x[:, valid[0]], pos[:, valid[0]], None)
    torch.testing.assert_close(full[:, valid[0]], kept, atol=1e-6, rtol=0)
    assert torch.all(full[:, ~valid[0]] == 0)
    # permuting the contents of padded positions changes nothing
    x2 = x.clone()
    x2[:, 1], x2[:, 3] = x[:, 5] * 3, x[:, 1] - 2
    assert torch.equal(blk(x2, pos, valid)[:, valid[0]], full[:, valid[0]])
    assert blk(x, pos, valid).shape == x.shape


def test_forward_is_deterministic():
    blk = _block()
    x = _rand(2, 5, 8, seed=10)
    pos = torch.arange(5).expand(2, 5)
    assert torch.equal(blk(x, pos), blk(x, pos))


def test_grad_check_quadratic():
    w = torch.tensor([3.0], dtype=D64, requires_grad=True)
    assert mnn.grad_check(lambda: (w ** 2).sum(), [w]) < 1e-8
    loss = (w ** 2).sum()
    mnn.backward(loss)
    assert w.grad.item() == pytest.approx(6.0, rel=1e-12)
    with pytest.raises(NonScalarLoss):
        mnn.backward(torch.cat([w, w]))


LAYER_CASES = {
    "linear": lambda: (torch.nn.Linear(5, 4), lambda m, x: m(x), (3, 5)),
    "layernorm": lambda: (torch.nn.LayerNorm(5), lambda m, x: m(x), (3, 5)),
    "mlp": lambda: (mnn.MLP(5, 6, 4, n_layers=3), lambda m, x: m(x), (3, 5)),
    "conv1d": lambda: (torch.nn.Conv1d(3, 4, 3, padding=1), lambda m, x: m(x), (2, 3, 6)),
    "resblock1d": lambda: (mnn.ResBlock1d(4), lambda m, x: m(x), (2, 4, 6)),
    "attention": lambda: (mnn.SelfAttention(8, 2), lambda m, x: m(x, torch.arange(4)[None]), (1, 4, 8)),
    "postnorm_block": lambda: (mnn.PostNormBlock(8, 2),
                               lambda m, x: m(x, torch.arange(4)[None], torch.tensor([[1, 1, 1, 0]]).bool()),
                               (1, 4, 8)),
}


@pytest.mark.parametrize("name", sorted(LAYER_CASES))
def test_layer_grad_check(name):
    torch.manual_seed(0)
    module, fwd, shape = LAYER_CASES[name]()
    module = module.double()
    x = _rand(*shape, seed=11).requires_grad_(True)
    proj = _rand(*fwd(module, x).shape, seed=12)
    f = lambda: (fwd(module, x) * proj).sum()
    err = mnn.grad_check(f, [x] + list(module.parameters()), max_elements=40)
    assert err < 1e-4, (name, err)


def test_functional_grad_check():
    x = _rand(3, 6, seed=13).requires_grad_(True)
    g, b = _rand(6, seed=14).requires_grad_(True), _rand(6, seed=15).requires_grad_(True)
    assert mnn.grad_check(lambda: (mnn.gelu(mnn.layernorm(x, g, b)) ** 2).sum(), [x, g, b]) < 1e-4
    tau = torch.tensor([0.3, 0.7], dtype=D64, requires_grad=True)
    # the top frequency is 1e4, so the default step would span 0.1 rad of phase
    f = lambda: (mnn.sinusoidal_embed(tau, 8) * _rand(2, 8, seed=16)).sum()
    assert mnn.grad_check(f, [tau], eps=1e-8) < 1e-4
    q, k = _rand(4, 6, seed=17).requires_grad_(True), _rand(4, 6, seed=18).requires_grad_(True)
    assert mnn.grad_check(lambda: (mnn.rope_apply(q, k, torch.arange(4))[0] @ k.T).sum(), [q, k]) < 1e-4


def test_stop_gradient_replay():
    x = _rand(3, seed=19).requires_grad_(True)
    f = lambda: (x * mnn.stop_gradient(x)).sum()
    # d/dx of x * sg(x) with sg frozen is sg(x) = x
    assert mnn.grad_check(f, [x]) < 1e-8
    y = mnn.stop_gradient(x)
    assert not y.requires_grad


def test_cosine_lr():
    assert mnn.cosine_lr(0, 2e-4, 100) == 2e-4
    assert mnn.cosine_lr(100, 2e-4, 100) == 0.0
    assert mnn.cosine_lr(50, 2e-4, 100) == pytest.approx(1e-4, abs=1e-18)
    st = mnn.OptimizerState()
    assert (st.base_lr, st.weight_decay, st.betas, st.eps) == (2e-4, 1e-4, (0.9, 0.999), 1e-8)


def test_adamw_examples():
    p = {"w": _rand(5, seed=20)}
    before = p["w"].clone()
    mnn.adamw_step(mnn.OptimizerState(weight_decay=0.0), p, {"w": torch.zeros(5, dtype=D64)})
    assert torch.equal(p["w"], before)
    # first bias-corrected step is lr * g / (|g| + eps) ~ lr * sign(g)
    st = mnn.OptimizerState(base_lr=1e-3, weight_decay=0.0, total_steps=10)
    g = torch.tensor([100.0, -50.0, 1e3, -2e3, 7.0], dtype=D64)
    mnn.adamw_step(st, p, {"w": g})
    torch.testing.assert_close(before - p["w"], 1e-3 * torch.sign(g), atol=1e-12, rtol=1e-8)
    with pytest.raises(ShapeMismatch):
        mnn.adamw_step(st, p, {"w": torch.zeros(4, dtype=D64)})


def test_adamw_matches_torch():
    w0 = _rand(6, seed=21)
    ours = {"w": w0.clone()}
    ref = w0.clone().requires_grad_(True)
    opt = torch.optim.AdamW([ref], lr=1e-2, weight_decay=1e-2)
    st = mnn.OptimizerState(base_lr=1e-2, weight_decay=1e-2, total_steps=10**9)
    for i in range(5):
        g = _rand(6, seed=30 + i)
        ref.grad = g.clone()
        opt.step()
        mnn.adamw_step(st, ours, {"w": g})
    torch.testing.assert_close(ours["w"], ref.detach(), atol=1e-10, rtol=0)


def test_checkpoint_roundtrip(tmp_path):
    torch.manual_seed(1)
    m = mnn.MLP(4, 8, 3)
    st = mnn.OptimizerState(total_steps=10)
    m(torch.randn(2, 4)).sum().backward()
    params = dict(m.named_parameters())
    mnn.adamw_step(st, params)
    path = tmp_path / "m.ckpt"
    mnn.save_checkpoint(path, "mlp", {"d": 8}, m.state_dict(), st, extra={"mu": np.arange(3.0)})
    ck = mnn.load_checkpoint(path)
    assert ck.model_kind == "mlp" and ck.config == {"d": "8"} and ck.opt.step == 1
    np.testing.assert_array_equal(ck.extra["mu"], np.arange(3.0))
    m2 = mnn.MLP(4, 8, 3)
    mnn.load_params_into(m2, ck.params)
    for (n, a), (_, b) in zip(m.state_dict().items(), m2.state_dict().items()):
        assert torch.equal(a, b), n
    for n in st.m:
        assert torch.equal(st.m[n].double(), ck.opt.m[n])
    with pytest.raises(ShapeMismatch):
        mnn.load_params_into(mnn.MLP(4, 9, 3), ck.params)
    with pytest.raises(ShapeMismatch):
        mnn.load_params_into(mnn.MLP(4, 8, 3, n_layers=3), ck.params)
    text = path.read_text()
    path.write_text(text.replace("schema_version 1", "schema_version 9"))
    with pytest.raises(SchemaVersionMismatch):
        mnn.load_checkpoint(path)


def test_seeded_init_deterministic():
    a = mnn.seeded_init(mnn.MLP(4, 8, 3), 5)
    b = mnn.seeded_init(mnn.MLP(4, 8, 3), 5)
    for (n, x), (_, y) in zip(a.state_dict().items(), b.state_dict().items()):
        assert torch.equal(x, y), n
