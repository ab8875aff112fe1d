"""Parameterized layers on top of the Tensor graph."""

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Base class: tracks parameters through attribute order, so state
    dicts and optimizer ordering are deterministic."""

    def named_parameters(self, prefix=""):
        """Every Tensor attribute is a parameter, trainable or frozen."""
        out = []
        for name, value in self.__dict__.items():
            key = f"{prefix}{name}"
            if isinstance(value, Tensor):
                out.append((key, value))
            elif isinstance(value, Module):
                out.extend(value.named_parameters(f"{key}."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(f"{key}.{i}."))
                    elif isinstance(item, Tensor):
                        out.append((f"{key}.{i}", item))
        return out

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise ValueError(f"state mismatch: missing={missing}, unexpected={extra}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.data.shape}")
            p.data = arr.copy()

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def set_trainable(self, flag):
        for p in self.parameters():
            p.requires_grad = bool(flag)

    def param_fingerprint(self):
        """Order-stable hash of all parameter bytes (freeze checks)."""
        import hashlib

        h = hashlib.sha256()
        for name, p in self.named_parameters():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()


def _glorot(rng, shape, fan_in, fan_out):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape)


class Linear(Module):
    def __init__(self, in_dim, out_dim, rng, bias=True):
        self.weight = Tensor(_glorot(rng, (in_dim, out_dim), in_dim, out_dim), requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim), requires_grad=True) if bias else None

    def __call__(self, x):
        y = T.matmul(x, self.weight)
        if self.bias is not None:
            y = T.add(y, self.bias)
        return y


class Conv2d(Module):
    def __init__(self, in_ch, out_ch, kernel, rng, stride=1, pad=0, bias=True):
        fan_in = in_ch * kernel * kernel
        fan_out = out_ch * kernel * kernel
        self.weight = Tensor(
            _glorot(rng, (out_ch, in_ch, kernel, kernel), fan_in, fan_out), requires_grad=True
        )
        self.bias = Tensor(np.zeros(out_ch), requires_grad=True) if bias else None
        self.stride = stride
        self.pad = pad

    def __call__(self, x):
        y = T.conv2d(x, self.weight, stride=self.stride, pad=self.pad)
        if self.bias is not None:
            y = T.add(y, T.reshape(self.bias, (1, -1, 1, 1)))
        return y


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-6):
        self.gamma = Tensor(np.ones(dim), requires_grad=True)
        self.beta = Tensor(np.zeros(dim), requires_grad=True)
        self.eps = eps

    def __call__(self, x):
        mu = T.mean(x, axis=-1, keepdims=True)
        xc = T.sub(x, mu)
        var = T.mean(T.mul(xc, xc), axis=-1, keepdims=True)
        xhat = T.div(xc, T.sqrt(T.add(var, self.eps)))
        return T.add(T.mul(xhat, self.gamma), self.beta)


class MultiheadSelfAttention(Module):
    def __init__(self, dim, heads, rng):
        if dim % heads:
            raise ValueError("embed dim must divide evenly across heads")
        self.heads = heads
        self.head_dim = dim // heads
        self.qkv = Linear(dim, 3 * dim, rng)
        self.proj = Linear(dim, dim, rng)

    def __call__(self, x):
        b, t, d = x.shape
        qkv = self.qkv(x)  # (B,T,3D)
        qkv = T.reshape(qkv, (b, t, 3, self.heads, self.head_dim))
        qkv = T.transpose(qkv, (2, 0, 3, 1, 4))  # (3,B,h,T,dh)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(self.head_dim))
        attn = T.softmax(scores, axis=-1)
        out = T.matmul(attn, v)  # (B,h,T,dh)
        out = T.transpose(out, (0, 2, 1, 3))
        out = T.reshape(out, (b, t, d))
        return self.proj(out)


class TransformerBlock(Module):
    """Pre-norm block: attention and a GELU MLP, both residual."""

    def __init__(self, dim, heads, rng, mlp_ratio=2):
        self.ln1 = LayerNorm(dim)
        self.attn = MultiheadSelfAttention(dim, heads, rng)
        self.ln2 = LayerNorm(dim)
        self.fc1 = Linear(dim, mlp_ratio * dim, rng)
        self.fc2 = Linear(mlp_ratio * dim, dim, rng)

    def __call__(self, x):
        x = T.add(x, self.attn(self.ln1(x)))
        h = self.fc2(T.gelu(self.fc1(self.ln2(x))))
        return T.add(x, h)
