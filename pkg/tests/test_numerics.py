import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from modeseq.numerics import (
    AttentionBlock, NumericalError, OptimizerState, add, adamw_step, backward, clip_grad_norm,
    concat, cosine_lr, gather, gelu, init_weights, layer_norm, matmul, multi_head_attention,
    set_precision, softmax,
)


def test_softmax_uniform():
    out = softmax(torch.zeros(3, dtype=torch.float64))
    assert torch.allclose(out, torch.full((3,), 1 / 3, dtype=torch.float64), atol=1e-15)


def test_matmul_identity():
    x = torch.randn(3, 4)
    assert torch.equal(matmul(torch.eye(3), x), x)


def test_layer_norm_closed_form():
    x = torch.tensor([1.0, 2.0, 3.0], dtype=torch.float64)
    out = layer_norm(x, torch.ones(3, dtype=torch.float64), torch.zeros(3, dtype=torch.float64))
    # mean 2, population variance 2/3
    expected = (x - 2) / math.sqrt(2 / 3 + 1e-5)
    assert torch.allclose(out, expected, atol=1e-12)
    assert np.allclose(out.numpy(), [-1.2247, 0, 1.2247], atol=1e-3)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(2, 16), st.integers(0, 10_000))
def test_softmax_and_layer_norm_properties(rows, cols, seed):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(rows, cols, generator=g, dtype=torch.float64) * 5
    p = softmax(x)
    assert torch.all(p >= 0)
    assert torch.allclose(p.sum(-1), torch.ones(rows, dtype=torch.float64), atol=1e-6)
    y = layer_norm(x, torch.ones(cols, dtype=torch.float64), torch.zeros(cols, dtype=torch.float64))
    assert torch.all(y.mean(-1).abs() < 1e-5)
    assert torch.all((y.var(-1, unbiased=False) - 1).abs() < 1e-4 + 1e-5 / x.var(-1, unbiased=False).min())


def test_primitive_errors():
    with pytest.raises(ValueError):
        matmul(torch.ones(2, 3), torch.ones(2, 3))
    with pytest.raises(ValueError):
        add(torch.ones(2), torch.ones(3))
    with pytest.raises(NumericalError):
        add(torch.tensor([math.inf]), torch.tensor([1.0]))
    with pytest.raises(ValueError):
        layer_norm(torch.ones(2, 3), torch.ones(2), torch.zeros(2))


def test_concat_and_gather():
    a, b = torch.ones(2, 2), torch.zeros(2, 1)
    assert concat([a, b]).shape == (2, 3)
    x = torch.arange(6.0).reshape(3, 2)
    assert torch.equal(gather(x, torch.tensor([2, 0]), 0), torch.tensor([[4.0, 5.0], [0.0, 1.0]]))
    assert torch.allclose(gelu(torch.zeros(1)), torch.zeros(1))


def _block(dim=8, heads=2, seed=0):
    torch.manual_seed(seed)
    block = AttentionBlock(dim, heads, dropout=0.0)
    init_weights(block)
    with torch.no_grad():
        for p in block.parameters():
            p.add_(torch.randn_like(p) * 0.3)
    return block.eval()


def test_single_key_gets_all_weight(float64):
    block = _block()
    w, _ = block.attention_weights(torch.randn(4, 8), torch.randn(1, 8))
    assert torch.allclose(w, torch.ones_like(w))


def test_duplicate_keys_share_weight(float64):
    block = _block()
    key = torch.randn(1, 8)
    kv = torch.cat([key, torch.randn(1, 8), key])
    w, _ = block.attention_weights(torch.randn(3, 8), kv)
    assert torch.allclose(w[..., 0], w[..., 2], atol=1e-15)


def _reference_block(block, q, kv):
    """Dense re-evaluation in numpy, written out one head at a time."""
    P = {n: p.detach().numpy() for n, p in block.named_parameters()}

    def ln(x, name):
        mu = x.mean(-1, keepdims=True)
        var = ((x - mu) ** 2).mean(-1, keepdims=True)
        return (x - mu) / np.sqrt(var + 1e-5) * P[f"{name}.weight"] + P[f"{name}.bias"]

    def lin(x, name):
        return x @ P[f"{name}.weight"].T + P[f"{name}.bias"]

    def gelu_np(x):
        from scipy.special import erf
        return 0.5 * x * (1 + erf(x / np.sqrt(2)))

    q_np, kv_np = q.numpy(), kv.numpy()
    Q = lin(ln(q_np, "norm_q"), "to_q")
    kv_n = ln(kv_np, "norm_kv")
    K, V = lin(kv_n, "to_k"), lin(kv_n, "to_v")
    h, dh = block.heads, block.dim // block.heads
    heads_out = []
    for i in range(h):
        sl = slice(i * dh, (i + 1) * dh)
        s = Q[:, sl] @ K[:, sl].T / np.sqrt(dh)
        s = np.exp(s - s.max(-1, keepdims=True))
        s /= s.sum(-1, keepdims=True)
        heads_out.append(s @ V[:, sl])
    x = q_np + lin(np.concatenate(heads_out, -1), "to_out")
    ff = lin(gelu_np(lin(ln(x, "norm_ff"), "ff.0")), "ff.3")
    return x + ff


@pytest.mark.parametrize("seed", range(5))
def test_attention_matches_dense_reference(float64, seed):
    block = _block(seed=seed)
    q, kv = torch.randn(5, 8), torch.randn(7, 8)
    out = multi_head_attention(block, q, kv)
    assert np.allclose(out.detach().numpy(), _reference_block(block, q, kv), atol=1e-6)


def test_attention_rows_are_convex_combinations(float64):
    block = _block()
    w, _ = block.attention_weights(torch.randn(4, 8), torch.randn(6, 8))
    assert torch.all(w >= 0) and torch.allclose(w.sum(-1), torch.ones(w.shape[:-1]), atol=1e-12)


def test_attention_without_keys():
    block = _block()
    q = torch.randn(3, 8)
    with pytest.raises(ValueError):
        multi_head_attention(block, q, torch.zeros(0, 8))
    # the block itself bypasses: empty bank leaves queries untouched
    assert torch.equal(block(q, torch.zeros(0, 8)), q)
    assert torch.equal(block(q, torch.randn(2, 8), key_mask=torch.zeros(2, dtype=torch.bool)), q)
    with pytest.raises(ValueError):
        AttentionBlock(10, 3)


def test_backward_examples(float64):
    x = torch.tensor([1.0, 2.0], requires_grad=True)
    unused = torch.ones(3, requires_grad=True)
    g = backward(x.sum(), {"x": x, "unused": unused})
    assert torch.equal(g["x"], torch.ones(2)) and torch.equal(g["unused"], torch.zeros(3))
    g = backward((x * x).sum() / 2, {"x": x})
    assert torch.equal(g["x"], torch.tensor([1.0, 2.0]))
    with pytest.raises(ValueError):
        backward(x * 2, {"x": x})


@pytest.mark.parametrize("seed", range(20))
def test_primitives_finite_differences(float64, seed):
    g = torch.Generator().manual_seed(seed)
    a = torch.randn(3, 4, generator=g, requires_grad=True)
    b = torch.randn(4, 5, generator=g, requires_grad=True)
    gain = torch.randn(5, generator=g, requires_grad=True)
    bias = torch.randn(5, generator=g, requires_grad=True)
    other = torch.randn(3, 5, generator=g)

    def f(a, b, gain, bias):
        h = gelu(matmul(a, b))
        h = layer_norm(add(h, other), gain, bias)
        h = concat([softmax(h), gather(h, torch.tensor([0, 2]), 0)], axis=0)
        return (h * torch.arange(h.numel(), dtype=h.dtype).reshape(h.shape)).sum()

    assert torch.autograd.gradcheck(f, (a, b, gain, bias), eps=1e-5, atol=1e-8, rtol=1e-4)


def test_adamw_examples():
    p = {"w": torch.tensor([1.0, -2.0], dtype=torch.float64)}
    zero = {"w": torch.zeros(2, dtype=torch.float64)}
    state = OptimizerState(lr=0.01, weight_decay=0.0)
    adamw_step(state, p, zero)
    assert torch.equal(p["w"], torch.tensor([1.0, -2.0], dtype=torch.float64))
    state = OptimizerState(lr=0.01, weight_decay=0.1)
    adamw_step(state, p, zero)
    assert torch.allclose(p["w"], torch.tensor([0.999, -1.998], dtype=torch.float64), rtol=0, atol=1e-15)
    assert state.step == 1


def test_adamw_constant_gradient_direction():
    p = {"w": torch.zeros(3, dtype=torch.float64)}
    g = {"w": torch.tensor([0.3, -5.0, 1e-3], dtype=torch.float64)}
    state = OptimizerState(lr=1e-3, weight_decay=0.0)
    for _ in range(200):
        before = p["w"].clone()
        adamw_step(state, p, g)
    step = p["w"] - before
    assert torch.allclose(step, -1e-3 * torch.sign(g["w"]), rtol=1e-3)


def test_adamw_rejects_nonfinite_gradient():
    p = {"w": torch.ones(2)}
    state = OptimizerState()
    with pytest.raises(NumericalError):
        adamw_step(state, p, {"w": torch.tensor([1.0, math.nan])})
    assert torch.equal(p["w"], torch.ones(2)) and state.step == 0


def test_no_decay_group():
    p = {"w": torch.ones(2), "b": torch.ones(2)}
    state = OptimizerState(lr=0.01, weight_decay=0.1)
    adamw_step(state, p, {k: torch.zeros(2) for k in p}, no_decay=frozenset({"b"}))
    assert torch.equal(p["b"], torch.ones(2)) and not torch.equal(p["w"], torch.ones(2))


def test_cosine_lr():
    assert cosine_lr(0, 100) == 5e-4
    assert cosine_lr(100, 100) == 0.0
    assert cosine_lr(50, 100) == pytest.approx(2.5e-4, abs=1e-18)
    lrs = [cosine_lr(s, 37, 1.0) for s in range(38)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    with pytest.raises(ValueError):
        cosine_lr(0, 0)
    with pytest.raises(ValueError):
        cosine_lr(5, 4)


def test_clip_grad_norm():
    g = {"a": torch.tensor([3.0]), "b": torch.tensor([4.0])}
    assert clip_grad_norm(g, 1.0) == pytest.approx(5.0)
    assert math.sqrt(float(g["a"] ** 2 + g["b"] ** 2)) == pytest.approx(1.0, abs=1e-5)


def test_precision_switch():
    previous = torch.get_default_dtype()
    try:
        set_precision("float64")
        assert torch.zeros(1).dtype == torch.float64
        set_precision("float32")
        assert torch.zeros(1).dtype == torch.float32
        with pytest.raises(ValueError):
            set_precision("float16")
    finally:
        torch.set_default_dtype(previous)
