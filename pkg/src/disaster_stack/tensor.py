"""Dense NHWC tensors with reverse-mode differentiation over a recorded tape.

Every op returns a new :class:`Tensor`. When gradient recording is enabled and
any input requires a gradient, the output keeps a reference to its inputs and
a closure mapping the output gradient onto input gradients. :func:`backward`
walks that graph in reverse topological order.

Values are float32 by default. Ops preserve the dtype of their inputs, so the
same code runs in float64 when a caller builds float64 tensors.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import ShapeError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None, dtype=np.float32):
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def __add__(self, other):
        return add(self, other)

    def sum(self):
        return reduce_sum(self)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"


def _result(data, parents, backward):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = track
    out._parents = tuple(parents) if track else ()
    out._backward = backward if track else None
    return out


def _check_nhwc(x, op):
    if x.data.ndim != 4:
        raise ShapeError(f"{op} expects an NHWC tensor, got shape {x.shape}")


# --------------------------------------------------------------------- params


@dataclass
class ConvParams:
    kernel: Tensor  # (kh, kw, in_channels, out_channels)
    bias: Tensor  # (out_channels,)
    stride: int = 1
    padding: str = "same"

    def __post_init__(self):
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if self.padding not in ("same", "valid"):
            raise ValueError(f"padding must be 'same' or 'valid', got {self.padding!r}")
        if self.kernel.data.ndim != 4:
            raise ShapeError(f"conv kernel must be rank 4, got shape {self.kernel.shape}")
        if self.bias.shape != (self.kernel.shape[3],):
            raise ShapeError(
                f"conv bias shape {self.bias.shape} does not match kernel {self.kernel.shape}"
            )


@dataclass
class BatchNormParams:
    gamma: Tensor
    beta: Tensor
    running_mean: Tensor
    running_var: Tensor
    momentum: float = 0.99
    epsilon: float = 1e-5

    def __post_init__(self):
        if not 0.0 < self.momentum < 1.0:
            raise ValueError(f"momentum must lie in (0, 1), got {self.momentum}")
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")

    @classmethod
    def fresh(cls, channels, dtype=np.float32, **kwargs):
        return cls(
            gamma=Tensor(np.ones(channels), requires_grad=True, dtype=dtype),
            beta=Tensor(np.zeros(channels), requires_grad=True, dtype=dtype),
            running_mean=Tensor(np.zeros(channels), dtype=dtype),
            running_var=Tensor(np.ones(channels), dtype=dtype),
            **kwargs,
        )


# ------------------------------------------------------------------ geometry


def _axis_padding(n, k, stride, padding):
    """Return (out, pad_before, pad_after) along one spatial axis."""
    if padding == "valid":
        if k > n:
            raise ShapeError(f"window {k} larger than input extent {n}")
        return (n - k) // stride + 1, 0, 0
    out = -(-n // stride)
    total = max((out - 1) * stride + k - n, 0)
    return out, total // 2, total - total // 2


def output_extent(n, k, stride, padding):
    """Spatial output size of a window op along one axis."""
    return _axis_padding(n, k, stride, padding)[0]


def _windows(xp, kh, kw, stride, ho, wo):
    n, _, _, c = xp.shape
    sn, sh, sw, sc = xp.strides
    return as_strided(
        xp,
        shape=(n, ho, wo, kh, kw, c),
        strides=(sn, sh * stride, sw * stride, sh, sw, sc),
        writeable=False,
    )


# ----------------------------------------------------------------------- ops


def conv2d(x: Tensor, params: ConvParams) -> Tensor:
    _check_nhwc(x, "conv2d")
    kernel, bias, stride = params.kernel, params.bias, params.stride
    kh, kw, cin, cout = kernel.shape
    n, h, w, c = x.shape
    if c != cin:
        raise ShapeError(
            f"conv2d input shape {x.shape} incompatible with kernel shape {kernel.shape}"
        )
    ho, pt, pb = _axis_padding(h, kh, stride, params.padding)
    wo, pl, pr = _axis_padding(w, kw, stride, params.padding)
    xd = x.data
    xp = np.pad(xd, ((0, 0), (pt, pb), (pl, pr), (0, 0))) if pt or pb or pl or pr else xd
    cols = _windows(xp, kh, kw, stride, ho, wo).reshape(n * ho * wo, kh * kw * c)
    k2 = kernel.data.reshape(kh * kw * cin, cout)
    out = (cols @ k2).reshape(n, ho, wo, cout)
    out += bias.data

    def backward(g):
        g2 = g.reshape(-1, cout)
        dx = None
        if x.requires_grad:
            dcols = (g2 @ k2.T).reshape(n, ho, wo, kh, kw, c)
            dxp = np.zeros(xp.shape, dtype=xd.dtype)
            hs = stride * (ho - 1) + 1
            ws = stride * (wo - 1) + 1
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i : i + hs : stride, j : j + ws : stride, :] += dcols[:, :, :, i, j, :]
            dx = dxp[:, pt : pt + h, pl : pl + w, :]
        dk = (cols.T @ g2).reshape(kernel.shape) if kernel.requires_grad else None
        db = g2.sum(axis=0, dtype=np.float64).astype(xd.dtype) if bias.requires_grad else None
        return dx, dk, db

    return _result(out, (x, kernel, bias), backward)


def max_pool2d(x: Tensor, window: int, stride: int | None = None, padding="valid") -> Tensor:
    _check_nhwc(x, "max_pool2d")
    stride = window if stride is None else stride
    n, h, w, c = x.shape
    if padding == "valid" and (window > h or window > w):
        raise ShapeError(f"pool window {window} larger than input spatial dims {(h, w)}")
    ho, pt, pb = _axis_padding(h, window, stride, padding)
    wo, pl, pr = _axis_padding(w, window, stride, padding)
    xd = x.data
    if pt or pb or pl or pr:
        xp = np.pad(xd, ((0, 0), (pt, pb), (pl, pr), (0, 0)), constant_values=-np.inf)
    else:
        xp = xd
    hs = stride * (ho - 1) + 1
    ws = stride * (wo - 1) + 1

    def view(p):
        i, j = divmod(p, window)
        return (slice(None), slice(i, i + hs, stride), slice(j, j + ws, stride), slice(None))

    out = xp[view(0)].copy()
    for p in range(1, window * window):
        np.maximum(out, xp[view(p)], out=out)

    def backward(g):
        # Each output cell routes its gradient to the first offset holding the max.
        dxp = np.zeros(xp.shape, dtype=xd.dtype)
        taken = np.zeros(out.shape, dtype=bool)
        for p in range(window * window):
            hit = xp[view(p)] == out
            hit &= ~taken
            taken |= hit
            dxp[view(p)] += g * hit
        return (dxp[:, pt : pt + h, pl : pl + w, :],)

    return _result(out, (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    _check_nhwc(x, "global_avg_pool")
    n, h, w, c = x.shape
    if h < 1 or w < 1:
        raise ShapeError(f"global_avg_pool needs non-empty spatial dims, got {x.shape}")
    out = x.data.mean(axis=(1, 2), dtype=np.float64).astype(x.dtype)

    def backward(g):
        return (np.broadcast_to((g / (h * w))[:, None, None, :], x.shape).astype(x.dtype),)

    return _result(out, (x,), backward)


def dense(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    if x.data.ndim != 2 or weights.data.ndim != 2 or x.shape[1] != weights.shape[0]:
        raise ShapeError(
            f"dense input shape {x.shape} incompatible with weights shape {weights.shape}"
        )
    if bias.shape != (weights.shape[1],):
        raise ShapeError(f"dense bias shape {bias.shape} does not match weights {weights.shape}")
    out = x.data @ weights.data
    out += bias.data

    def backward(g):
        dx = g @ weights.data.T if x.requires_grad else None
        dw = x.data.T @ g if weights.requires_grad else None
        db = g.sum(axis=0, dtype=np.float64).astype(g.dtype) if bias.requires_grad else None
        return dx, dw, db

    return _result(out, (x, weights, bias), backward)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)

    def backward(g):
        return (g * (out > 0),)

    return _result(out, (x,), backward)


def _channel_sum(a2, ones):
    # BLAS reduction over rows of an (M, C) view: blocked accumulation, fast.
    return ones @ a2


def batch_norm(x: Tensor, params: BatchNormParams, training: bool) -> Tensor:
    """Per-channel normalisation over every axis except the last.

    In training mode the batch statistics are used and the running
    statistics are updated in place; otherwise the running statistics are.
    """
    c = x.shape[-1]
    if params.gamma.shape != (c,):
        raise ShapeError(f"batch_norm input shape {x.shape} vs {params.gamma.shape[0]} channels")
    m = x.size // c if c else 0
    if m == 0:
        raise ShapeError(f"batch_norm received an empty batch of shape {x.shape}")
    xd = x.data
    dtype = xd.dtype
    x2 = xd.reshape(m, c)
    ones = np.ones(m, dtype=dtype)
    gamma, beta = params.gamma, params.beta
    if training:
        mean = _channel_sum(x2, ones) / m
        centered = x2 - mean
        var = _channel_sum(centered * centered, ones) / m
        mom = params.momentum
        rm, rv = params.running_mean.data, params.running_var.data
        rm[...] = mom * rm + (1.0 - mom) * mean
        rv[...] = mom * rv + (1.0 - mom) * var
    else:
        centered = x2 - params.running_mean.data
        var = params.running_var.data
    inv_std = (1.0 / np.sqrt(var.astype(np.float64) + params.epsilon)).astype(dtype)
    xhat = centered
    xhat *= inv_std
    out = xhat * gamma.data
    out += beta.data

    def backward(g):
        g2 = g.reshape(m, c)
        dbeta = _channel_sum(g2, ones)
        dgamma = _channel_sum(g2 * xhat, ones)
        dx = None
        if x.requires_grad:
            if training:
                # dx = inv_std / m * (m*dxhat - sum(dxhat) - xhat*sum(dxhat*xhat))
                scale = gamma.data * inv_std
                dx = g2 - dbeta / m
                dx -= xhat * (dgamma / m)
                dx *= scale
            else:
                dx = g2 * (gamma.data * inv_std)
            dx = dx.reshape(x.shape)
        return dx, dgamma, dbeta

    return _result(out.reshape(x.shape), (x, gamma, beta), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"cannot add tensors of shapes {a.shape} and {b.shape}")

    def backward(g):
        return g, g

    return _result(a.data + b.data, (a, b), backward)


def flatten(x: Tensor) -> Tensor:
    shape = x.shape

    def backward(g):
        return (g.reshape(shape),)

    return _result(x.data.reshape(shape[0], -1), (x,), backward)


def reduce_sum(x: Tensor, weights=None) -> Tensor:
    """Scalar ``sum(x * weights)``; ``weights`` is a constant array."""
    if weights is None:
        total = x.data.sum(dtype=np.float64)
    else:
        weights = np.asarray(weights, dtype=x.dtype)
        total = (x.data * weights).sum(dtype=np.float64)

    def backward(g):
        if weights is None:
            return (np.full(x.shape, g, dtype=x.dtype),)
        return ((g * weights).astype(x.dtype),)

    return _result(np.asarray(total, dtype=x.dtype), (x,), backward)


def softmax(logits: Tensor) -> Tensor:
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _result(s, (logits,), backward)


def _check_labels(labels, k):
    labels = np.asarray(labels)
    if labels.ndim != 1 or not np.issubdtype(labels.dtype, np.integer):
        raise ShapeError(f"labels must be a 1-D integer array, got {labels.dtype} {labels.shape}")
    bad = np.flatnonzero((labels < 0) | (labels >= k))
    if bad.size:
        i = int(bad[0])
        raise ShapeError(f"label {int(labels[i])} at index {i} outside [0, {k})")
    return labels


def sparse_ce_loss(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    if logits.data.ndim != 2:
        raise ShapeError(f"logits must be (N, K), got {logits.shape}")
    n, k = logits.shape
    labels = _check_labels(labels, k)
    if labels.shape[0] != n:
        raise ShapeError(f"{labels.shape[0]} labels for {n} rows of logits")
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(lse - z[rows, labels]))

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1.0
        return ((p * (float(g) / n)).astype(logits.dtype),)

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


# ------------------------------------------------------------------ backward


def _topological(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Tensor) -> list[Tensor]:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every reachable leaf.

    Returns the leaves that received a gradient, in the order reached.
    """
    if root.size != 1:
        raise ShapeError(f"backward requires a scalar root, got shape {root.shape}")
    grads = {id(root): np.ones_like(root.data)}
    leaves = []
    for node in reversed(_topological(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = np.array(g, copy=True) if node.grad is None else node.grad + g
                leaves.append(node)
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    return leaves
