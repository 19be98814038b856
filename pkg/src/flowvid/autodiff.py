"""Minimal reverse-mode automatic differentiation on top of numpy.

Every primitive computes its forward value eagerly and, when any input
requires a gradient, appends a node to the active :class:`Graph`.
:func:`backward` walks that record in exact reverse order and accumulates
gradients into the ``grad`` field of each participating tensor.

Only the operators needed by the flow classifiers are provided.
"""
import contextlib
import hashlib
import threading
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError, StateError

DEFAULT_DTYPE = np.float32


class Graph:
    """Append-only tape of executed primitives."""

    def __init__(self):
        self.nodes = []
        self.consumed = False

    def record(self, out, inputs, backward_fn):
        if self.consumed:
            raise StateError("graph already consumed by backward(); start a new graph")
        self.nodes.append((out, inputs, backward_fn))
        out._graph = self

    def __len__(self):
        return len(self.nodes)


_local = threading.local()


def _current():
    if not hasattr(_local, "graph"):
        _local.graph = Graph()
        _local.grad_enabled = True
    return _local


def current_graph():
    return _current().graph


@contextlib.contextmanager
def new_graph():
    """Run the body against a fresh graph, restoring the previous one afterwards."""
    st = _current()
    prev = st.graph
    st.graph = Graph()
    try:
        yield st.graph
    finally:
        st.graph = prev


@contextlib.contextmanager
def no_grad():
    st = _current()
    prev = st.grad_enabled
    st.grad_enabled = False
    try:
        yield
    finally:
        st.grad_enabled = prev


def grad_enabled():
    return _current().grad_enabled


@contextlib.contextmanager
def record_branches():
    """Fingerprint every piecewise decision (ReLU masks, pooling argmax) made in the body.

    Two forward passes with equal digests lie on the same smooth piece of
    the network function, which is what finite-difference checks need.
    """
    st = _current()
    prev = getattr(st, "branches", None)
    st.branches = hashlib.blake2b(digest_size=16)
    try:
        yield st.branches
    finally:
        st.branches = prev


def _note_branch(decision):
    h = getattr(_current(), "branches", None)
    if h is not None:
        h.update(np.ascontiguousarray(decision).tobytes())


class Tensor:
    """n-dimensional array that can take part in reverse-mode differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_graph")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._graph = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return self._graph is None

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x, dtype=None):
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _accumulate(t, g, index=None):
    """Add ``g`` into ``t.grad`` (optionally into a sub-region)."""
    if not t.requires_grad:
        return
    if t.grad is None:
        if index is None:
            t.grad = np.array(g, dtype=t.dtype, copy=True).reshape(t.shape)
            return
        t.grad = np.zeros(t.shape, dtype=t.dtype)
    if index is None:
        t.grad += g
    else:
        t.grad[index] += g


def _make(data, inputs, backward_fn):
    needs = grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs, dtype=data.dtype)
    if needs:
        current_graph().record(out, tuple(inputs), backward_fn)
    return out


def backward(loss):
    """Accumulate d(loss)/d(t) into every requires_grad ancestor of ``loss``."""
    if loss.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    graph = loss._graph
    if graph is None:
        raise StateError("loss was not produced by recorded primitives")
    if graph.consumed:
        raise StateError("backward() already called on this graph; run a new forward pass")
    loss.grad = np.ones(loss.shape, dtype=loss.dtype)
    for out, _inputs, fn in reversed(graph.nodes):
        if out.grad is not None:
            fn(out.grad)
    graph.consumed = True
    graph.nodes = []
    st = _current()
    if st.graph is graph:
        st.graph = Graph()


def _check_batch(name, x):
    if x.shape[0] == 0:
        raise ValueError(f"{name}: empty batch")


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")

    def bw(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _make(a.data + b.data, (a, b), bw)


def mul(a, b):
    """Elementwise product of two equally shaped tensors."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"elementwise_mul: shapes {a.shape} and {b.shape} differ")

    def bw(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _make(a.data * b.data, (a, b), bw)


elementwise_mul = mul


def relu(x):
    mask = x.data > 0
    _note_branch(mask)

    def bw(g):
        _accumulate(x, g * mask)

    return _make(np.where(mask, x.data, 0).astype(x.dtype), (x,), bw)


def _sigmoid(z):
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def sigmoid(x):
    s = _sigmoid(x.data)

    def bw(g):
        _accumulate(x, g * s * (1 - s))

    return _make(s, (x,), bw)


def tanh(x):
    t = np.tanh(x.data)

    def bw(g):
        _accumulate(x, g * (1 - t * t))

    return _make(t, (x,), bw)


def sum(x):  # noqa: A001 - mirrors numpy naming
    def bw(g):
        _accumulate(x, np.broadcast_to(g, x.shape))

    return _make(np.asarray(x.data.sum(), dtype=x.dtype), (x,), bw)


def mean(x):
    n = x.size

    def bw(g):
        _accumulate(x, np.broadcast_to(g / n, x.shape))

    return _make(np.asarray(x.data.mean(), dtype=x.dtype), (x,), bw)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def bw(g):
        if a.requires_grad:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad:
            _accumulate(b, a.data.T @ g)

    return _make(a.data @ b.data, (a, b), bw)


def add_bias(x, b):
    """Broadcast-add a vector over the last axis of ``x``."""
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_bias: input {x.shape} vs bias {b.shape}")
    axes = tuple(range(x.ndim - 1))

    def bw(g):
        _accumulate(x, g)
        if b.requires_grad:
            _accumulate(b, g.sum(axis=axes))

    return _make(x.data + b.data, (x, b), bw)


# ---------------------------------------------------------------- structure


def reshape(x, shape):
    shape = tuple(shape)
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from None

    def bw(g):
        _accumulate(x, g.reshape(x.shape))

    return _make(data, (x,), bw)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat: nothing to concatenate")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"concat: incompatible shapes {shapes} on axis {axis}") from exc
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bw(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                _accumulate(t, g[tuple(idx)])

    return _make(data, tensors, bw)


def slice_axis(x, axis, start, stop):
    """``x[..., start:stop, ...]`` along ``axis``; gradient lands in place."""
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def bw(g):
        _accumulate(x, g, index=idx)

    return _make(x.data[idx].copy(), (x,), bw)


# ---------------------------------------------------------------- convolution


def _same_padding(k):
    # TF convention: the extra row/column goes to the bottom/right
    total = k - 1
    return total // 2, total - total // 2


def _resolve_padding(padding, kh, kw):
    if padding == "same":
        return _same_padding(kh), _same_padding(kw)
    if padding == "valid" or padding == 0:
        return (0, 0), (0, 0)
    if isinstance(padding, int):
        return (padding, padding), (padding, padding)
    (pt, pb), (pl, pr) = padding
    return (pt, pb), (pl, pr)


def conv2d(x, w, b=None, stride=1, padding="same"):
    """2D cross-correlation (no kernel flip).

    x: (N, Cin, H, W); w: (Cout, Cin, kh, kw); b: (Cout,) or None.
    ``padding`` is "same", "valid", an int, or ((top, bottom), (left, right)).
    """
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    _check_batch("conv2d", x)
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"conv2d: bias {b.shape} does not match kernel {w.shape}")
    kh, kw = w.shape[2:]
    (pt, pb), (pl, pr) = _resolve_padding(padding, kh, kw)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    hp, wp = xp.shape[2:]
    if kh > hp or kw > wp:
        raise ShapeError(f"conv2d: kernel {(kh, kw)} larger than padded input {(hp, wp)}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # (N, Ho, Wo, Cout) -> (N, Cout, Ho, Wo)
    out = np.tensordot(win, w.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data[None, :, None, None]
    out = np.ascontiguousarray(out, dtype=x.dtype)
    inputs = (x, w) if b is None else (x, w, b)

    def bw(g):
        if w.requires_grad:
            _accumulate(w, np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3])))
        if b is not None and b.requires_grad:
            _accumulate(b, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            # (N, Ho, Wo, Cin, kh, kw) -> scatter each kernel tap back onto the input
            dwin = np.tensordot(g, w.data, axes=([1], [0])).transpose(0, 3, 1, 2, 4, 5)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dwin[..., i, j]
            _accumulate(x, dxp[:, :, pt:pt + x.shape[2], pl:pl + x.shape[3]])

    return _make(out, inputs, bw)


def maxpool2d(x, size=2, stride=1, padding=0):
    """Window max over (size x size) patches.

    Gradient goes to the first maximal element of each window in row-major
    order.
    """
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d: expected (N, C, H, W), got {x.shape}")
    _check_batch("maxpool2d", x)
    k = size
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                constant_values=-np.inf)
    if k > xp.shape[2] or k > xp.shape[3]:
        raise ShapeError(f"maxpool2d: window {k}x{k} larger than input {x.shape[2:]}")
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    flat = win.reshape(n, c, ho, wo, k * k)
    arg = flat.argmax(axis=-1)
    _note_branch(arg)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        rows = np.arange(ho)[:, None] * stride + arg // k
        cols = np.arange(wo)[None, :] * stride + arg % k
        hp, wp = xp.shape[2:]
        plane = (np.arange(n)[:, None, None, None] * c + np.arange(c)[None, :, None, None]) * hp * wp
        lin = (plane + rows * wp + cols).ravel()
        dxp = np.bincount(lin, weights=g.ravel(), minlength=n * c * hp * wp)
        dxp = dxp.reshape(n, c, hp, wp).astype(x.dtype)
        _accumulate(x, dxp[:, :, padding:padding + x.shape[2], padding:padding + x.shape[3]])

    return _make(np.ascontiguousarray(out), (x,), bw)


def batchnorm2d(x, gamma, beta, running_mean, running_var, training=True,
                momentum=0.1, eps=1e-5):
    """Per-channel batch normalization over (N, H, W).

    In training mode the batch statistics normalize the input and the
    running buffers move by ``momentum`` towards them (unbiased variance).
    In inference mode the running buffers are used instead.
    """
    if x.ndim != 4 or gamma.shape != (x.shape[1],):
        raise ShapeError(f"batchnorm2d: input {x.shape} vs gamma {gamma.shape}")
    _check_batch("batchnorm2d", x)
    shape = (1, -1, 1, 1)
    if training:
        m = x.shape[0] * x.shape[2] * x.shape[3]
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        unbiased = var * m / max(m - 1, 1)
        running_mean.data[...] = (1 - momentum) * running_mean.data + momentum * mu
        running_var.data[...] = (1 - momentum) * running_var.data + momentum * unbiased
    else:
        mu = running_mean.data
        var = running_var.data
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu.reshape(shape)) * inv.reshape(shape)
    out = (xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)).astype(x.dtype)

    def bw(g):
        if gamma.requires_grad:
            _accumulate(gamma, (g * xhat).sum(axis=(0, 2, 3)))
        if beta.requires_grad:
            _accumulate(beta, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dxhat = g * gamma.data.reshape(shape)
            if training:
                m = x.shape[0] * x.shape[2] * x.shape[3]
                s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                dx = inv.reshape(shape) / m * (m * dxhat - s1 - xhat * s2)
            else:
                dx = dxhat * inv.reshape(shape)
            _accumulate(x, dx)

    return _make(out, (x, gamma, beta), bw)


# ---------------------------------------------------------------- recurrent


def lstm(x, kernel, recurrent, bias, output_activation="relu"):
    """Fused LSTM scan over a (N, T, S) sequence, returning all hidden states.

    Gate layout along the 4U axis is (input, forget, candidate, output).
    Gates use sigmoid, the candidate uses tanh, and ``output_activation``
    ("relu" or "tanh") is applied to the cell state before the output gate.
    Initial hidden and cell states are zero.
    """
    if x.ndim != 3:
        raise ShapeError(f"lstm: expected (N, T, S) input, got {x.shape}")
    _check_batch("lstm", x)
    n, steps, s = x.shape
    if kernel.shape[0] != s:
        raise ShapeError(f"lstm: input size {s} vs kernel {kernel.shape}")
    u = recurrent.shape[0]
    if kernel.shape[1] != 4 * u or recurrent.shape != (u, 4 * u) or bias.shape != (4 * u,):
        raise ShapeError(f"lstm: kernel {kernel.shape}, recurrent {recurrent.shape}, bias {bias.shape}")
    if output_activation == "relu":
        act = lambda c: np.maximum(c, 0)  # noqa: E731
        dact = lambda c, a: (c > 0).astype(c.dtype)  # noqa: E731
    elif output_activation == "tanh":
        act = np.tanh
        dact = lambda c, a: 1 - a * a  # noqa: E731
    else:
        raise ValueError(f"lstm: unknown output activation {output_activation!r}")

    dtype = x.dtype
    R = recurrent.data
    xz = (x.data.reshape(n * steps, s) @ kernel.data + bias.data).reshape(n, steps, 4 * u)
    gates = np.empty((n, steps, 4 * u), dtype=dtype)
    cells = np.empty((n, steps, u), dtype=dtype)
    acts = np.empty((n, steps, u), dtype=dtype)
    hs = np.empty((n, steps, u), dtype=dtype)
    h = np.zeros((n, u), dtype=dtype)
    c = np.zeros((n, u), dtype=dtype)
    for t in range(steps):
        z = xz[:, t] + h @ R
        gt = gates[:, t]
        gt[:, :2 * u] = _sigmoid(z[:, :2 * u])
        gt[:, 2 * u:3 * u] = np.tanh(z[:, 2 * u:3 * u])
        gt[:, 3 * u:] = _sigmoid(z[:, 3 * u:])
        c = gt[:, u:2 * u] * c + gt[:, :u] * gt[:, 2 * u:3 * u]
        a = act(c)
        h = gt[:, 3 * u:] * a
        cells[:, t] = c
        acts[:, t] = a
        hs[:, t] = h
    if output_activation == "relu":
        _note_branch(cells > 0)

    def bw(gh):
        dz = np.empty_like(gates)
        dh_next = np.zeros((n, u), dtype=dtype)
        dc_next = np.zeros((n, u), dtype=dtype)
        zero = np.zeros((n, u), dtype=dtype)
        tiny = np.finfo(dtype).tiny
        for t in range(steps - 1, -1, -1):
            gt = gates[:, t]
            i, f, cand, o = gt[:, :u], gt[:, u:2 * u], gt[:, 2 * u:3 * u], gt[:, 3 * u:]
            c_prev = cells[:, t - 1] if t > 0 else zero
            dh = gh[:, t] + dh_next
            dc = dc_next + dh * o * dact(cells[:, t], acts[:, t])
            dzt = dz[:, t]
            dzt[:, :u] = dc * cand * i * (1 - i)
            dzt[:, u:2 * u] = dc * c_prev * f * (1 - f)
            dzt[:, 2 * u:3 * u] = dc * i * (1 - cand * cand)
            dzt[:, 3 * u:] = dh * acts[:, t] * o * (1 - o)
            # Gradients fading through hundreds of forget gates end up subnormal,
            # and subnormal arithmetic is very slow on most CPUs. Flush them.
            dzt[np.abs(dzt) < tiny] = 0
            dc_next = dc * f
            dc_next[np.abs(dc_next) < tiny] = 0
            dh_next = dzt @ R.T
        flat_dz = dz.reshape(n * steps, 4 * u)
        if kernel.requires_grad:
            _accumulate(kernel, x.data.reshape(n * steps, s).T @ flat_dz)
        if recurrent.requires_grad:
            h_prev = np.concatenate([np.zeros((n, 1, u), dtype=dtype), hs[:, :-1]], axis=1)
            _accumulate(recurrent, h_prev.reshape(n * steps, u).T @ flat_dz)
        if bias.requires_grad:
            _accumulate(bias, flat_dz.sum(axis=0))
        if x.requires_grad:
            _accumulate(x, (flat_dz @ kernel.data.T).reshape(n, steps, s))

    return _make(hs, (x, kernel, recurrent, bias), bw)


# ---------------------------------------------------------------- output / loss


def softmax(x):
    """Row-wise softmax over the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        _accumulate(x, p * (g - (g * p).sum(axis=-1, keepdims=True)))

    return _make(p, (x,), bw)


def log_softmax_np(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits, labels):
    """Mean negative log-likelihood of ``labels`` under softmax(logits).

    Evaluated as logsumexp(z) - z[label] on max-shifted logits, so large
    logits do not overflow.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    _check_batch("softmax_cross_entropy", logits)
    n = logits.shape[0]
    logp = log_softmax_np(logits.data)
    rows = np.arange(n)
    loss = np.asarray(-logp[rows, labels].mean(), dtype=logits.dtype)

    def bw(g):
        d = np.exp(logp)
        d[rows, labels] -= 1
        _accumulate(logits, g * d / n)

    return _make(loss, (logits,), bw)


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    step: int = 0

    @classmethod
    def for_params(cls, params):
        return cls([np.zeros_like(p.data) for p in params],
                   [np.zeros_like(p.data) for p in params], 0)


def adam_step(params, state, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update, in place. Gradients are left untouched."""
    if len(state.m) != len(params):
        raise StateError(f"optimizer state tracks {len(state.m)} tensors, got {len(params)}")
    for k, p in enumerate(params):
        if p.grad is None:
            raise StateError(f"parameter {p.name or k!r} has no gradient")
        if state.m[k].shape != p.shape:
            raise StateError(f"optimizer state shape {state.m[k].shape} != parameter {p.name!r} {p.shape}")
    state.step += 1
    t = state.step
    c1 = 1 - beta1 ** t
    c2 = 1 - beta2 ** t
    for k, p in enumerate(params):
        g = p.grad
        m, v = state.m[k], state.v[k]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state = AdamState.for_params(self.params)

    def step(self):
        adam_step(self.params, self.state, self.lr, self.beta1, self.beta2, self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None
