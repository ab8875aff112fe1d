"""Minimal reverse-mode autodiff over numpy arrays.

Everything runs in float64 on NCHW layouts. The graph is rebuilt on every
forward pass; ``Tensor.backward()`` walks it once in reverse topological
order. Only the operations the training loops actually need are provided.
"""

import numpy as np

from edgepatch import _kernels


def _unbroadcast(grad, shape):
    """Sum grad down to `shape` (the adjoint of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A numpy array plus an optional gradient closure."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = g.copy() if g.base is not None or g.flags.owndata is False else g
        else:
            self.grad = self.grad + g

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar loss")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"

    def reshape(self, *shape):
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn):
    """Build a graph node; plain tensor when no parent needs gradients."""
    out = Tensor(data)
    if any(p.requires_grad or p._backward is not None for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _send(p, g):
    if p.requires_grad or p._backward is not None:
        p._accumulate(g)


# -- arithmetic --------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def backward(g):
        _send(a, _unbroadcast(g, a.data.shape))
        _send(b, _unbroadcast(g, b.data.shape))

    return _make(data, (a, b), backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data - b.data

    def backward(g):
        _send(a, _unbroadcast(g, a.data.shape))
        _send(b, _unbroadcast(-g, b.data.shape))

    return _make(data, (a, b), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def backward(g):
        _send(a, _unbroadcast(g * b.data, a.data.shape))
        _send(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), backward)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data / b.data

    def backward(g):
        _send(a, _unbroadcast(g / b.data, a.data.shape))
        _send(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(data, (a, b), backward)


def pow_(a, exponent):
    a = as_tensor(a)
    data = a.data ** exponent

    def backward(g):
        _send(a, g * exponent * a.data ** (exponent - 1))

    return _make(data, (a,), backward)


def sqrt(a):
    a = as_tensor(a)
    data = np.sqrt(a.data)

    def backward(g):
        _send(a, g * 0.5 / np.maximum(data, 1e-300))

    return _make(data, (a,), backward)


def exp(a):
    a = as_tensor(a)
    data = np.exp(a.data)

    def backward(g):
        _send(a, g * data)

    return _make(data, (a,), backward)


def log(a):
    a = as_tensor(a)
    data = np.log(a.data)

    def backward(g):
        _send(a, g / a.data)

    return _make(data, (a,), backward)


def tanh(a):
    a = as_tensor(a)
    data = np.tanh(a.data)

    def backward(g):
        _send(a, g * (1.0 - data * data))

    return _make(data, (a,), backward)


def sigmoid(a):
    a = as_tensor(a)
    data = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        _send(a, g * data * (1.0 - data))

    return _make(data, (a,), backward)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a):
    """tanh-approximated GELU (smooth, finite-difference friendly)."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    data = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        local = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
        _send(a, g * local)

    return _make(data, (a,), backward)


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    data = a.data * mask

    def backward(g):
        _send(a, g * mask)

    return _make(data, (a,), backward)


def maximum(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = np.maximum(a.data, b.data)
    amask = a.data >= b.data

    def backward(g):
        _send(a, _unbroadcast(g * amask, a.data.shape))
        _send(b, _unbroadcast(g * (~amask), b.data.shape))

    return _make(data, (a, b), backward)


# -- shape ops ---------------------------------------------------------

def reshape(a, shape):
    a = as_tensor(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    data = a.data.reshape(shape)
    orig = a.data.shape

    def backward(g):
        _send(a, g.reshape(orig))

    return _make(data, (a,), backward)


def transpose(a, axes):
    a = as_tensor(a)
    if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
        axes = tuple(axes[0])
    data = np.ascontiguousarray(a.data.transpose(axes))
    inverse = np.argsort(axes)

    def backward(g):
        _send(a, np.ascontiguousarray(g.transpose(inverse)))

    return _make(data, (a,), backward)


def getitem(a, idx):
    a = as_tensor(a)
    data = a.data[idx]
    fancy = isinstance(idx, (np.ndarray, list)) or (
        isinstance(idx, tuple) and any(isinstance(i, (np.ndarray, list)) for i in idx)
    )

    def backward(g):
        gx = np.zeros_like(a.data)
        if fancy:
            np.add.at(gx, idx, g)
        else:
            gx[idx] += g
        _send(a, gx)

    return _make(np.ascontiguousarray(data), (a,), backward)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _send(t, np.ascontiguousarray(g[tuple(sl)]))

    return _make(data, tuple(tensors), backward)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    data = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        for i, t in enumerate(tensors):
            _send(t, np.ascontiguousarray(np.take(g, i, axis=axis)))

    return _make(data, tuple(tensors), backward)


# -- reductions --------------------------------------------------------

def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            gx = np.broadcast_to(g, a.data.shape)
        else:
            if not keepdims:
                g = np.expand_dims(g, axis)
            gx = np.broadcast_to(g, a.data.shape)
        _send(a, np.ascontiguousarray(gx))

    return _make(data, (a,), backward)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        count = a.data.size
    elif isinstance(axis, tuple):
        count = int(np.prod([a.data.shape[i] for i in axis]))
    else:
        count = a.data.shape[axis]
    return mul(sum_(a, axis, keepdims), 1.0 / count)


# -- linear algebra ----------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        _send(a, _unbroadcast(ga, a.data.shape))
        _send(b, _unbroadcast(gb, b.data.shape))

    return _make(data, (a, b), backward)


# -- structured ops ----------------------------------------------------

def conv2d(x, w, stride=1, pad=0):
    """2-D cross-correlation, NCHW; bias is handled by the caller. The
    forward pass caches its column buffer for the backward pass."""
    x, w = as_tensor(x), as_tensor(w)
    if x.requires_grad or x._backward is not None or w.requires_grad or w._backward is not None:
        data, ctx = _kernels.conv2d_forward(x.data, w.data, stride, pad, return_ctx=True)
    else:
        return Tensor(_kernels.conv2d_forward(x.data, w.data, stride, pad))

    def backward(g):
        gx, gw = _kernels.conv2d_backward(x.data, w.data, g, stride, pad, ctx=ctx)
        _send(x, gx)
        _send(w, gw)

    return _make(data, (x, w), backward)


def resize_bilinear(x, out_h, out_w):
    """Differentiable bilinear resize of (N,C,H,W)."""
    x = as_tensor(x)
    h, w = x.data.shape[2], x.data.shape[3]
    data = _kernels.resize_bilinear(x.data, out_h, out_w)

    def backward(g):
        _send(x, _kernels.resize_bilinear_grad(np.ascontiguousarray(g), h, w))

    return _make(data, (x,), backward)


def region_replace(image, patch, y0, x0):
    """Replace image[..., y0:y0+ph, x0:x0+pw] with patch; gradients split
    accordingly (zero into the covered image region)."""
    image, patch = as_tensor(image), as_tensor(patch)
    ph, pw = patch.data.shape[-2], patch.data.shape[-1]
    data = image.data.copy()
    data[..., y0:y0 + ph, x0:x0 + pw] = patch.data

    def backward(g):
        gp = np.ascontiguousarray(g[..., y0:y0 + ph, x0:x0 + pw])
        _send(patch, gp.reshape(patch.data.shape))
        gi = g.copy()
        gi[..., y0:y0 + ph, x0:x0 + pw] = 0.0
        _send(image, gi)

    return _make(data, (image, patch), backward)


# -- composites --------------------------------------------------------

def softmax(x, axis=-1):
    shift = Tensor(x.data.max(axis=axis, keepdims=True))  # constant, zero grad
    e = exp(sub(x, shift))
    return div(e, sum_(e, axis=axis, keepdims=True))


def log_softmax(x, axis=-1):
    shift = Tensor(x.data.max(axis=axis, keepdims=True))
    shifted = sub(x, shift)
    return sub(shifted, log(sum_(exp(shifted), axis=axis, keepdims=True)))


def l2_normalize(x, axis=-1, eps=1e-24):
    norm = sqrt(add(sum_(mul(x, x), axis=axis, keepdims=True), eps))
    return div(x, norm)


def pairwise_distance(a, b, eps=1e-24):
    """Euclidean distance between matching rows of two (N,D) tensors."""
    d = sub(a, b)
    return sqrt(add(sum_(mul(d, d), axis=-1), eps))


def avgpool2x2(x):
    n, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ValueError(f"avgpool2x2 needs even spatial dims, got {h}x{w}")
    r = reshape(x, (n, c, h // 2, 2, w // 2, 2))
    return mean(r, axis=(3, 5))


def global_avgpool(x):
    return mean(x, axis=(2, 3))
