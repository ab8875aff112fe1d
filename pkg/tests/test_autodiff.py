"""Gradient correctness of the autodiff ops and layers."""

import numpy as np
import pytest

from edgepatch.nn import (
    SGD,
    Adam,
    Conv2d,
    LayerNorm,
    Linear,
    Module,
    MultiheadSelfAttention,
    TransformerBlock,
    relative_grad_error,
)
from edgepatch.nn import tensor as T


def _check_unary(op, x0, tol=1e-6):
    x = T.Tensor(x0, requires_grad=True)
    w = np.random.default_rng(7).normal(size=x0.shape)

    def forward():
        return T.sum_(T.mul(op(x), T.Tensor(w)))

    def loss():
        return forward().item()

    def back():
        x.grad = None
        forward().backward()

    err = relative_grad_error(loss, back, [x], coords_per_param=min(x0.size, 30))
    assert err < tol, f"{op.__name__}: rel err {err}"


@pytest.mark.parametrize("op", [T.exp, T.tanh, T.sigmoid, T.gelu, T.sqrt])
def test_unary_grads(op, rng):
    x0 = rng.uniform(0.2, 2.0, size=(3, 4))
    _check_unary(op, x0)


def test_log_grad(rng):
    _check_unary(T.log, rng.uniform(0.5, 3.0, size=(2, 5)))


def test_broadcast_binary_grads(rng):
    a = T.Tensor(rng.normal(size=(3, 1, 4)), requires_grad=True)
    b = T.Tensor(rng.normal(size=(1, 5, 4)), requires_grad=True)
    wsum = rng.normal(size=(3, 5, 4))

    def forward():
        return T.sum_(T.mul(T.add(T.mul(a, b), T.div(a, T.add(T.mul(b, b), 1.0))),
                            T.Tensor(wsum)))

    def loss():
        return forward().item()

    def back():
        a.grad = None
        b.grad = None
        forward().backward()

    assert relative_grad_error(loss, back, [a, b], coords_per_param=12) < 1e-6


def test_matmul_batched_grad(rng):
    a = T.Tensor(rng.normal(size=(2, 3, 4, 5)), requires_grad=True)
    b = T.Tensor(rng.normal(size=(2, 3, 5, 6)), requires_grad=True)
    w = rng.normal(size=(2, 3, 4, 6))

    def forward():
        return T.sum_(T.mul(T.matmul(a, b), T.Tensor(w)))

    def loss():
        return forward().item()

    def back():
        a.grad = None
        b.grad = None
        forward().backward()

    assert relative_grad_error(loss, back, [a, b], coords_per_param=15) < 1e-6


def test_getitem_concat_stack_grads(rng):
    x = T.Tensor(rng.normal(size=(4, 6)), requires_grad=True)
    w = rng.normal(size=(2, 16))
    idx = np.array([1, 3])

    def forward():
        rows = x[idx]                      # fancy gather
        head = x[0:2, 0:4]                 # slice
        both = T.concat([rows, head, T.stack([rows[0], rows[1]], axis=0)], axis=1)
        return T.sum_(T.mul(both, T.Tensor(w)))

    def loss():
        return forward().item()

    def back():
        x.grad = None
        forward().backward()

    assert relative_grad_error(loss, back, [x], coords_per_param=24) < 1e-6


def test_softmax_matches_scipy(rng):
    from scipy.special import softmax as ssoftmax

    x = rng.normal(size=(3, 7))
    got = T.softmax(T.Tensor(x), axis=-1).data
    assert np.allclose(got, ssoftmax(x, axis=-1), atol=1e-12)


def test_softmax_logsoftmax_grads(rng):
    x = T.Tensor(rng.normal(size=(3, 5)), requires_grad=True)
    w = rng.normal(size=(3, 5))

    def forward():
        return T.sum_(T.mul(T.log_softmax(x, axis=-1), T.Tensor(w)))

    def loss():
        return forward().item()

    def back():
        x.grad = None
        forward().backward()

    assert relative_grad_error(loss, back, [x], coords_per_param=15) < 1e-6


def test_layernorm_attention_block_grads(rng):
    nrng = np.random.default_rng(0)
    blk = TransformerBlock(8, 2, nrng)
    x = T.Tensor(nrng.normal(size=(2, 5, 8)))
    tgt = nrng.normal(size=(2, 5, 8))

    def forward():
        d = T.sub(blk(x), T.Tensor(tgt))
        return T.mean(T.mul(d, d))

    def loss():
        return forward().item()

    def back():
        for p in blk.parameters():
            p.grad = None
        forward().backward()

    assert relative_grad_error(loss, back, blk.parameters(), coords_per_param=20) < 1e-5


def test_conv_resize_region_pipeline_grad(rng):
    nrng = np.random.default_rng(3)
    conv = Conv2d(2, 3, 3, nrng, stride=2, pad=1)
    patch = T.Tensor(nrng.uniform(size=(1, 2, 4, 4)), requires_grad=True)
    base = T.Tensor(nrng.uniform(size=(1, 2, 12, 10)))
    w = nrng.normal(size=(1, 3, 6, 5))

    def forward():
        resized = T.resize_bilinear(patch, 6, 5)
        img = T.region_replace(base, resized, 3, 2)
        return T.sum_(T.mul(conv(img), T.Tensor(w)))

    def loss():
        return forward().item()

    def back():
        patch.grad = None
        for p in conv.parameters():
            p.grad = None
        forward().backward()

    params = [patch] + conv.parameters()
    assert relative_grad_error(loss, back, params, coords_per_param=20) < 1e-6


def test_region_replace_blocks_covered_gradient(rng):
    base = T.Tensor(rng.normal(size=(1, 1, 6, 6)), requires_grad=True)
    patch = T.Tensor(rng.normal(size=(1, 1, 2, 2)), requires_grad=True)
    out = T.region_replace(base, patch, 2, 3)
    T.sum_(out).backward()
    assert np.all(base.grad[0, 0, 2:4, 3:5] == 0)
    assert np.all(patch.grad == 1.0)
    covered = np.zeros((6, 6), dtype=bool)
    covered[2:4, 3:5] = True
    assert np.all(base.grad[0, 0][~covered] == 1.0)


def test_state_dict_roundtrip():
    nrng = np.random.default_rng(5)

    class Net(Module):
        def __init__(self):
            self.a = Linear(3, 4, nrng)
            self.blocks = [Linear(4, 4, nrng), Linear(4, 2, nrng)]
            self.norm = LayerNorm(2)

    net = Net()
    sd = net.state_dict()
    net2 = Net()
    assert not np.allclose(net2.a.weight.data, net.a.weight.data)
    net2.load_state_dict(sd)
    for (n1, p1), (n2, p2) in zip(net.named_parameters(), net2.named_parameters()):
        assert n1 == n2
        assert np.array_equal(p1.data, p2.data)
    with pytest.raises(ValueError):
        bad = dict(sd)
        bad.pop(next(iter(bad)))
        net2.load_state_dict(bad)


def test_sgd_momentum_matches_manual():
    p = T.Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = SGD([p], lr=0.1, momentum=0.9)
    v = np.zeros(2)
    x = p.data.copy()
    for step in range(4):
        g = 2.0 * p.data  # gradient of sum(p^2)
        p.grad = g.copy()
        opt.step()
        v = 0.9 * v + g
        x = x - 0.1 * v
        assert np.allclose(p.data, x, atol=1e-15)


def test_adam_decreases_quadratic():
    p = T.Tensor(np.array([3.0, -4.0]), requires_grad=True)
    opt = Adam([p], lr=0.1)
    for _ in range(200):
        p.grad = 2.0 * p.data
        opt.step()
    assert np.linalg.norm(p.data) < 0.05


def test_attention_shapes(rng):
    nrng = np.random.default_rng(11)
    attn = MultiheadSelfAttention(12, 3, nrng)
    out = attn(T.Tensor(nrng.normal(size=(2, 7, 12))))
    assert out.shape == (2, 7, 12)
