"""Dense 64-bit tensors with tape-free reverse-mode automatic differentiation.

Each operation builds a node that remembers its parents and a backward
closure; calling ``backward()`` on a scalar output walks the graph in
reverse topological order and accumulates gradients additively into every
leaf that has ``requires_grad`` set. The op set is intentionally small:
just enough for a convolutional / fully-connected encoder and the
distance-softmax losses built on top of it.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes do not conform to an operation's rule."""


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcasted gradient back down to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """A dense float64 array with optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def backward(self):
        if self.data.size != 1:
            raise ShapeError(f"backward() requires a scalar output, got shape {self.shape}")
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _accumulate(t: Tensor, grad: np.ndarray):
    if not t.requires_grad and t._backward is None:
        return
    grad = _unbroadcast(grad, t.data.shape)
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += grad


def _node(data: np.ndarray, parents, backward) -> Tensor:
    tracked = any(p.requires_grad or p._backward is not None for p in parents)
    out = Tensor(data, requires_grad=tracked)
    if tracked:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def constant(data) -> Tensor:
    return Tensor(data)


# ---------------------------------------------------------------------------
# elementwise ops (with numpy broadcasting)

def add(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, g)
        _accumulate(b, g)
    return _node(a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, g)
        _accumulate(b, -g)
    return _node(a.data - b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)
    return _node(a.data * b.data, (a, b), backward)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def backward(g):
        _accumulate(a, g * out_data)
    return _node(out_data, (a,), backward)


def log(a: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, g / a.data)
    return _node(np.log(a.data), (a,), backward)


def scale(a: Tensor, alpha: float) -> Tensor:
    alpha = float(alpha)

    def backward(g):
        _accumulate(a, g * alpha)
    return _node(a.data * alpha, (a,), backward)


def square(a: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, g * 2.0 * a.data)
    return _node(a.data * a.data, (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)

    def backward(g):
        # denominator clamped so a zero-distance forward value stays finite
        _accumulate(a, g * 0.5 / np.maximum(out_data, 1e-150))
    return _node(out_data, (a,), backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward(g):
        _accumulate(a, g * mask)
    return _node(np.maximum(a.data, 0.0), (a,), backward)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    mask = (a.data >= lo) & (a.data <= hi)

    def backward(g):
        _accumulate(a, g * mask)
    return _node(np.clip(a.data, lo, hi), (a,), backward)


# ---------------------------------------------------------------------------
# reductions and shape ops

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.data.shape))
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.data.shape))
    return _node(out_data, (a,), backward)


def mean_over_axis(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    n = a.data.shape[axis]
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def tmean(a: Tensor) -> Tensor:
    return scale(tsum(a), 1.0 / a.data.size)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape

    def backward(g):
        _accumulate(a, g.reshape(old))
    return _node(a.data.reshape(shape), (a,), backward)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def backward(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        _accumulate(a, full)
    return _node(a.data[idx].copy(), (a,), backward)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out_data = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        parts = np.split(g, len(tensors), axis=axis)
        for t, part in zip(tensors, parts):
            _accumulate(t, np.squeeze(part, axis=axis))
    return _node(out_data, tuple(tensors), backward)


def take_class(a: Tensor, labels) -> Tensor:
    """Select ``a[q, ..., labels[q]]`` along the last axis, per leading row."""
    labels = np.asarray(labels, dtype=np.intp)
    if labels.shape != a.data.shape[:1]:
        raise ShapeError(
            f"take_class: labels shape {labels.shape} vs tensor shape {a.data.shape}")
    rows = np.arange(a.data.shape[0])
    out_data = a.data[rows, ..., labels] if a.data.ndim == 2 else \
        np.take_along_axis(a.data, labels.reshape((-1,) + (1,) * (a.data.ndim - 1)),
                           axis=-1).squeeze(-1)

    def backward(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, labels.reshape((-1,) + (1,) * (a.data.ndim - 1)),
                          g[..., None], axis=-1)
        _accumulate(a, full)
    return _node(out_data, (a,), backward)


def logsumexp(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable log-sum-exp; the shift is a constant w.r.t. grads."""
    m = a.data.max(axis=axis, keepdims=True)
    shifted = sub(a, Tensor(m))
    lse = log(tsum(exp(shifted), axis=axis))
    return add(lse, Tensor(np.squeeze(m, axis=axis)))


# ---------------------------------------------------------------------------
# linear algebra and spatial ops

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)
    return _node(a.data @ b.data, (a, b), backward)


def conv2d(x: Tensor, w: Tensor, padding: int = 0) -> Tensor:
    """2D convolution (cross-correlation), stride 1, zero padding.

    x: (B, Cin, H, W), w: (Cout, Cin, k, k).
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: need 4-D input and kernel, got {x.shape} and {w.shape}")
    B, ci, H, W = x.data.shape
    co, ci2, kh, kw = w.data.shape
    if ci != ci2 or kh != kw:
        raise ShapeError(f"conv2d: incompatible shapes {x.shape} and {w.shape}")
    k, p = kh, int(padding)
    ho, wo = H + 2 * p - k + 1, W + 2 * p - k + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: kernel {k} too large for input {x.shape} with padding {p}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B, ho * wo, ci * k * k)
    wm = w.data.reshape(co, ci * k * k)
    out_data = (cols @ wm.T).transpose(0, 2, 1).reshape(B, co, ho, wo)

    def backward(g):
        gm = g.reshape(B, co, ho * wo).transpose(0, 2, 1)
        if w.requires_grad or w._backward is not None:
            gw = np.einsum("bpc,bpk->ck", gm, cols).reshape(co, ci, k, k)
            _accumulate(w, gw)
        if x.requires_grad or x._backward is not None:
            gcols = (gm @ wm).reshape(B, ho, wo, ci, k, k)
            gxp = np.zeros((B, ci, H + 2 * p, W + 2 * p))
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + ho, j:j + wo] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, p:p + H, p:p + W] if p else gxp
            _accumulate(x, gx)
    return _node(out_data, (x, w), backward)


def maxpool2x2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2; ties route to the first index in row-major order."""
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2x2: need 4-D input, got {x.shape}")
    B, C, H, W = x.data.shape
    if H % 2 or W % 2:
        raise ShapeError(f"maxpool2x2: spatial dims must be even, got {x.shape}")
    ho, wo = H // 2, W // 2
    blocks = x.data.reshape(B, C, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5) \
        .reshape(B, C, ho, wo, 4)
    idx = blocks.argmax(axis=-1)
    out_data = np.take_along_axis(blocks, idx[..., None], axis=-1).squeeze(-1)

    def backward(g):
        gb = np.zeros((B, C, ho, wo, 4))
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gx = gb.reshape(B, C, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W)
        _accumulate(x, gx)
    return _node(out_data, (x,), backward)


# ---------------------------------------------------------------------------
# generic dispatch + gradient checking

_OPS = {
    "matmul": lambda inputs, attrs: matmul(*inputs),
    "conv2d": lambda inputs, attrs: conv2d(inputs[0], inputs[1],
                                           padding=attrs.get("padding", 0)),
    "maxpool2x2": lambda inputs, attrs: maxpool2x2(inputs[0]),
    "relu": lambda inputs, attrs: relu(inputs[0]),
    "add": lambda inputs, attrs: add(*inputs),
    "sub": lambda inputs, attrs: sub(*inputs),
    "elementwise_mul": lambda inputs, attrs: mul(*inputs),
    "exp": lambda inputs, attrs: exp(inputs[0]),
    "scale": lambda inputs, attrs: scale(inputs[0], attrs["alpha"]),
    "sum": lambda inputs, attrs: tsum(inputs[0], axis=attrs.get("axis")),
    "mean_over_axis": lambda inputs, attrs: mean_over_axis(inputs[0], attrs["axis"]),
    "square": lambda inputs, attrs: square(inputs[0]),
    "sqrt": lambda inputs, attrs: sqrt(inputs[0]),
}


def forward_op(kind: str, inputs, attrs=None) -> Tensor:
    """Apply a named operation; the dispatch table is the supported op set."""
    if kind not in _OPS:
        raise ValueError(f"unknown operation kind {kind!r}")
    return _OPS[kind](list(inputs), attrs or {})


def grad_check(f, points, epsilon: float = 1e-5) -> float:
    """Compare analytic gradients of scalar-valued ``f`` to central differences.

    ``points`` is a Tensor or a list of Tensors; ``f`` is called with them
    positionally and must return a scalar Tensor. Returns the max over all
    coordinates of |analytic - numeric| / max(1, |numeric|).
    """
    if isinstance(points, Tensor):
        points = [points]
    for p in points:
        p.requires_grad = True
        p.zero_grad()
    out = f(*points)
    if out.data.size != 1:
        raise ShapeError(f"grad_check: f returned non-scalar of shape {out.shape}")
    out.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy()
                for p in points]

    max_err = 0.0
    for p, ana in zip(points, analytic):
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            hi = f(*points).item()
            flat[i] = orig - epsilon
            lo = f(*points).item()
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * epsilon)
            err = abs(ana.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
            max_err = max(max_err, err)
    return max_err
