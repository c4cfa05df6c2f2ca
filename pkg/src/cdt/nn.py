"""Minimal dense-array math with reverse-mode gradients, Adam, and checkpoints.

Double-precision numpy arrays wrapped in a recording ``Tensor``. Each op
builds the result's backward closure; ``backward(loss)`` walks the recorded
graph once and releases it, so a second backward without a fresh forward
raises. Only the primitives needed by a small causal-transformer policy are
provided.
"""

from __future__ import annotations

import ctypes
import json
import struct
from dataclasses import dataclass, field

import numpy as np

try:
    import numba
    from numba import njit, prange

    # the GNU OpenMP layer aborts forked children; workqueue is fork-safe
    numba.config.THREADING_LAYER = "workqueue"
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is an optional accelerator
    HAVE_NUMBA = False

# Fused kernels halve memory traffic on the hot elementwise chains; flip off
# to exercise the plain-numpy reference paths (they compute the same values).
USE_FUSED = HAVE_NUMBA

CHECKPOINT_MAGIC = b"CDTCKPT1"


def _tune_allocator() -> None:
    # Training churns through multi-MB temporaries; glibc's default trim/mmap
    # thresholds hand them back to the kernel each time, and the refaulting
    # dominates the math. Raising the thresholds keeps the buffers pooled.
    try:
        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(-1, 512 * 1024 * 1024)  # M_TRIM_THRESHOLD
        libc.mallopt(-3, 256 * 1024 * 1024)  # M_MMAP_THRESHOLD
    except (OSError, AttributeError):
        pass


_tune_allocator()

_GELU_K = float(np.sqrt(2.0 / np.pi))

if HAVE_NUMBA:

    @njit(cache=True, parallel=True)
    def _k_gelu_fwd(x, t, out):
        # t = tanh(C (x + c x^3)) is precomputed with numpy's vectorized tanh
        for i in prange(x.size):
            out[i] = 0.5 * x[i] * (1.0 + t[i])

    @njit(cache=True, parallel=True)
    def _k_gelu_bwd(g, x, t, out):
        for i in prange(x.size):
            v = x[i]
            sech2 = 1.0 - t[i] * t[i]
            out[i] = g[i] * (0.5 * (1.0 + t[i])
                             + 0.5 * v * sech2 * _GELU_K * (1.0 + 0.134145 * v * v))

    @njit(cache=True, parallel=True)
    def _k_dropout_apply(a, r, p, inv_keep, out):
        for i in prange(a.size):
            out[i] = a[i] * inv_keep if r[i] >= p else 0.0

    @njit(cache=True, parallel=True)
    def _k_masked_softmax_fwd(x, allow, out):
        b, h, s, _ = x.shape
        broadcast_batch = allow.shape[0] == 1
        for idx in prange(b * h * s):
            q = idx % s
            bh = idx // s
            hh = bh % h
            bb = bh // h
            ab = 0 if broadcast_batch else bb
            mx = -np.inf
            for k in range(s):
                if allow[ab, q, k] and x[bb, hh, q, k] > mx:
                    mx = x[bb, hh, q, k]
            total = 0.0
            for k in range(s):
                if allow[ab, q, k]:
                    e = np.exp(x[bb, hh, q, k] - mx)
                    out[bb, hh, q, k] = e
                    total += e
                else:
                    out[bb, hh, q, k] = 0.0
            inv = 1.0 / total
            for k in range(s):
                out[bb, hh, q, k] *= inv

    @njit(cache=True, parallel=True)
    def _k_softmax_bwd(g, y, out):
        rows, s = g.shape
        for r in prange(rows):
            dot = 0.0
            for k in range(s):
                dot += g[r, k] * y[r, k]
            for k in range(s):
                out[r, k] = (g[r, k] - dot) * y[r, k]

    @njit(cache=True, parallel=True)
    def _k_ln_fwd(x, gain, bias, out, mu, inv_std, eps):
        rows, d = x.shape
        for r in prange(rows):
            s = 0.0
            for j in range(d):
                s += x[r, j]
            m = s / d
            v = 0.0
            for j in range(d):
                c = x[r, j] - m
                v += c * c
            istd = 1.0 / np.sqrt(v / d + eps)
            mu[r] = m
            inv_std[r] = istd
            for j in range(d):
                out[r, j] = (x[r, j] - m) * istd * gain[j] + bias[j]

    @njit(cache=True, parallel=True)
    def _k_ln_bwd_dx(g, x, gain, mu, inv_std, dx):
        rows, d = x.shape
        for r in prange(rows):
            m1 = 0.0
            m2 = 0.0
            for j in range(d):
                xh = (x[r, j] - mu[r]) * inv_std[r]
                dxh = g[r, j] * gain[j]
                m1 += dxh
                m2 += dxh * xh
            m1 /= d
            m2 /= d
            for j in range(d):
                xh = (x[r, j] - mu[r]) * inv_std[r]
                dxh = g[r, j] * gain[j]
                dx[r, j] = (dxh - m1 - xh * m2) * inv_std[r]

    @njit(cache=True, parallel=True)
    def _k_ln_param_grads(g, x, mu, inv_std, dgain, dbias):
        rows, d = x.shape
        for j in prange(d):
            sg = 0.0
            sb = 0.0
            for r in range(rows):
                xh = (x[r, j] - mu[r]) * inv_std[r]
                sg += g[r, j] * xh
                sb += g[r, j]
            dgain[j] = sg
            dbias[j] = sb


class ShapeError(ValueError):
    """Operand shapes are incompatible for an operation."""


class GraphError(RuntimeError):
    """Backward invoked on a non-scalar, detached, or already-consumed graph."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, key):
        return getitem(self, key)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.requires_grad:
        t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient over axes that numpy broadcasting introduced."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _binary_data(op: str, a: Tensor, b: Tensor, fn) -> np.ndarray:
    try:
        return fn(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from exc


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = _binary_data("add", a, b, np.add)

    def backward_fn(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, b.shape))

    return _make(data, (a, b), backward_fn)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = _binary_data("sub", a, b, np.subtract)

    def backward_fn(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g, b.shape))

    return _make(data, (a, b), backward_fn)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = _binary_data("mul", a, b, np.multiply)

    def backward_fn(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _make(data, (a, b), backward_fn)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = _binary_data("div", a, b, np.divide)

    def backward_fn(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(data, (a, b), backward_fn)


def pow_const(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    if exponent == 2.0:  # avoid float pow; squaring dominates loss math
        data = a.data * a.data

        def backward_sq(g):
            _accumulate(a, g * (2.0 * a.data))

        return _make(data, (a,), backward_sq)
    data = a.data ** exponent

    def backward_fn(g):
        _accumulate(a, g * exponent * a.data ** (exponent - 1))

    return _make(data, (a,), backward_fn)


def exp(a) -> Tensor:
    a = as_tensor(a)
    data = np.exp(a.data)

    def backward_fn(g):
        _accumulate(a, g * data)

    return _make(data, (a,), backward_fn)


def log(a) -> Tensor:
    a = as_tensor(a)
    data = np.log(a.data)

    def backward_fn(g):
        _accumulate(a, g / a.data)

    return _make(data, (a,), backward_fn)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    data = np.tanh(a.data)

    def backward_fn(g):
        _accumulate(a, g * (1.0 - data * data))

    return _make(data, (a,), backward_fn)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a) -> Tensor:
    """GPT-style tanh-approximate GELU."""
    a = as_tensor(a)
    x = a.data
    if USE_FUSED and x.flags.c_contiguous:
        u = x * x
        u *= x
        u *= 0.044715
        u += x
        u *= _GELU_C
        t = np.tanh(u, out=u)
        data = np.empty_like(x)
        _k_gelu_fwd(x.ravel(), t.ravel(), data.ravel())

        def backward_fused(g):
            out = np.empty_like(x)
            _k_gelu_bwd(np.ascontiguousarray(g).ravel(), x.ravel(), t.ravel(),
                        out.ravel())
            _accumulate(a, out)

        return _make(data, (a,), backward_fused)

    x2 = x * x
    inner = x2 * x
    inner *= 0.044715
    inner += x
    inner *= _GELU_C
    t = np.tanh(inner, out=inner)
    data = t + 1.0
    data *= x
    data *= 0.5

    def backward_fn(g):
        s = t * t
        np.subtract(1.0, s, out=s)  # sech^2
        s *= x
        u = x2 * 0.134145
        u += 1.0
        u *= 0.5 * _GELU_C
        s *= u  # 0.5 x sech^2 C (1 + 3c x^2)
        np.multiply(t, 0.5, out=u)
        s += u
        s += 0.5
        s *= g
        _accumulate(a, s)

    return _make(data, (a,), backward_fn)


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes only through the interior."""
    a = as_tensor(a)
    data = np.clip(a.data, lo, hi)

    def backward_fn(g):
        mask = (a.data >= lo) & (a.data <= hi)
        _accumulate(a, g * mask)

    return _make(data, (a,), backward_fn)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be >= 2-d, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    if b.ndim == 2 and a.ndim > 2:
        # x @ W with broadcast weights: one flat dgemm beats batched strides
        k, m = b.shape
        data = (a.data.reshape(-1, k) @ b.data).reshape(a.shape[:-1] + (m,))

        def backward_flat(g):
            g2 = g.reshape(-1, m)
            if a.requires_grad:
                _accumulate(a, (g2 @ b.data.T).reshape(a.shape))
            if b.requires_grad:
                _accumulate(b, a.data.reshape(-1, k).T @ g2)

        return _make(data, (a, b), backward_flat)

    data = a.data @ b.data

    def backward_fn(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g @ b.data.swapaxes(-1, -2), a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.shape))

    return _make(data, (a, b), backward_fn)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    data = a.data.reshape(shape)

    def backward_fn(g):
        _accumulate(a, g.reshape(a.shape))

    return _make(data, (a,), backward_fn)


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    data = a.data.transpose(axes)
    inverse = tuple(np.argsort(axes))

    def backward_fn(g):
        _accumulate(a, g.transpose(inverse))

    return _make(data, (a,), backward_fn)


def getitem(a, key) -> Tensor:
    a = as_tensor(a)
    data = np.ascontiguousarray(a.data[key])

    def backward_fn(g):
        full = np.zeros_like(a.data)
        full[key] = g
        _accumulate(a, full)

    return _make(data, (a,), backward_fn)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    data = np.stack([t.data for t in tensors], axis=axis)

    def backward_fn(g):
        for i, t in enumerate(tensors):
            _accumulate(t, np.take(g, i, axis=axis))

    return _make(data, tensors, backward_fn)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape).copy())

    return _make(data, (a,), backward_fn)


def mean_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else a.shape[axis]

    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g / count, a.shape).copy())

    return _make(data, (a,), backward_fn)


def masked_softmax_last(a, allow: np.ndarray) -> Tensor:
    """Softmax over the allowed entries of each last-axis row.

    ``a`` has shape (B, H, S, S); ``allow`` is a boolean (B or 1, S, S) mask
    shared across heads. Banned entries get exactly zero mass. Every row must
    allow at least one entry.
    """
    a = as_tensor(a)
    if a.ndim != 4:
        raise ShapeError(f"masked_softmax_last: expected 4-d logits, got {a.shape}")
    if allow.shape[-2:] != a.shape[-2:] or allow.shape[0] not in (1, a.shape[0]):
        raise ShapeError(
            f"masked_softmax_last: mask shape {allow.shape} does not match "
            f"logits {a.shape}"
        )
    if USE_FUSED and a.data.flags.c_contiguous:
        allow_u8 = np.ascontiguousarray(allow, dtype=np.uint8)
        data = np.empty_like(a.data)
        _k_masked_softmax_fwd(a.data, allow_u8, data)

        def backward_fused(g):
            g2 = np.ascontiguousarray(g).reshape(-1, g.shape[-1])
            out = np.empty_like(data)
            _k_softmax_bwd(g2, data.reshape(g2.shape), out.reshape(g2.shape))
            _accumulate(a, out)

        return _make(data, (a,), backward_fused)

    bias = np.where(allow[:, None, :, :], 0.0, -np.inf)
    logits = a.data + bias
    data = logits - logits.max(axis=-1, keepdims=True)
    np.exp(data, out=data)
    data /= data.sum(axis=-1, keepdims=True)

    def backward_fn(g):
        tmp = g * data
        dot = tmp.sum(axis=-1, keepdims=True)
        np.subtract(g, dot, out=tmp)
        tmp *= data
        _accumulate(a, tmp)

    return _make(data, (a,), backward_fn)


def softmax_last_axis(a) -> Tensor:
    """Stable softmax along the last axis; -inf logits get exactly zero mass."""
    a = as_tensor(a)
    data = a.data - a.data.max(axis=-1, keepdims=True)
    np.exp(data, out=data)
    data /= data.sum(axis=-1, keepdims=True)

    def backward_fn(g):
        tmp = g * data
        dot = tmp.sum(axis=-1, keepdims=True)
        np.subtract(g, dot, out=tmp)
        tmp *= data
        _accumulate(a, tmp)

    return _make(data, (a,), backward_fn)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine.

    A constant input normalizes to zeros (epsilon-stabilized denominator).
    """
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise ShapeError(
            f"layer_norm: gain/bias shapes {gain.shape}/{bias.shape} do not match "
            f"last axis of {x.shape}"
        )
    if USE_FUSED and x.data.flags.c_contiguous:
        d = x.shape[-1]
        x2d = x.data.reshape(-1, d)
        rows = x2d.shape[0]
        data = np.empty_like(x.data)
        mu = np.empty(rows)
        inv_std = np.empty(rows)
        _k_ln_fwd(x2d, gain.data, bias.data, data.reshape(-1, d), mu, inv_std, eps)

        def backward_fused(g):
            g2d = np.ascontiguousarray(g).reshape(-1, d)
            dx = np.empty_like(x.data)
            _k_ln_bwd_dx(g2d, x2d, gain.data, mu, inv_std, dx.reshape(-1, d))
            _accumulate(x, dx)
            if gain.requires_grad or bias.requires_grad:
                dgain = np.empty(d)
                dbias = np.empty(d)
                _k_ln_param_grads(g2d, x2d, mu, inv_std, dgain, dbias)
                _accumulate(gain, dgain)
                _accumulate(bias, dbias)

        return _make(data, (x, gain, bias), backward_fused)

    mu = x.data.mean(axis=-1, keepdims=True)
    xhat = x.data - mu
    sq = xhat * xhat
    var = sq.mean(axis=-1, keepdims=True)
    var += eps
    inv_std = 1.0 / np.sqrt(var)
    xhat *= inv_std
    data = xhat * gain.data
    data += bias.data

    def backward_fn(g):
        dxhat = g * gain.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        tmp = dxhat * xhat
        m2 = tmp.mean(axis=-1, keepdims=True)
        np.multiply(xhat, m2, out=tmp)
        dxhat -= m1
        dxhat -= tmp
        dxhat *= inv_std
        _accumulate(x, dxhat)
        reduce_axes = tuple(range(g.ndim - 1))
        np.multiply(g, xhat, out=tmp)
        _accumulate(gain, tmp.sum(axis=reduce_axes))
        _accumulate(bias, g.sum(axis=reduce_axes))

    return _make(data, (x, gain, bias), backward_fn)


def dropout(a, p: float, train: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when not training or p == 0."""
    if not 0 <= p < 1:
        raise ValueError("dropout probability must lie in [0, 1)")
    a = as_tensor(a)
    if not train or p == 0.0:
        return a
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    inv_keep = 1.0 / (1.0 - p)
    draws = rng.random(a.shape, dtype=np.float32)  # mask bits; full width is waste
    if USE_FUSED and a.data.flags.c_contiguous:
        data = np.empty_like(a.data)
        _k_dropout_apply(a.data.ravel(), draws.ravel(), p, inv_keep, data.ravel())

        def backward_fused(g):
            out = np.empty_like(a.data)
            _k_dropout_apply(np.ascontiguousarray(g).ravel(), draws.ravel(), p,
                             inv_keep, out.ravel())
            _accumulate(a, out)

        return _make(data, (a,), backward_fused)

    mask = draws >= p  # bool; survivors rescaled below
    data = a.data * mask
    data *= inv_keep

    def backward_fn(g):
        gr = g * mask
        gr *= inv_keep
        _accumulate(a, gr)

    return _make(data, (a,), backward_fn)


def embedding_lookup(table, indices) -> Tensor:
    table = as_tensor(table)
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ShapeError("embedding_lookup: indices must be integers")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(
            f"embedding_lookup: index out of range for table of {table.shape[0]} rows"
        )
    data = table.data[idx]

    def backward_fn(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        _accumulate(table, full)

    return _make(data, (table,), backward_fn)


def backward(loss: Tensor) -> None:
    """Populate gradients of every reachable requires-grad tensor.

    The recorded graph is released afterwards; calling backward again without
    re-running the forward pass raises GraphError.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._backward is None:
        raise GraphError(
            "backward on a detached graph: no recorded operations reach this "
            "tensor (or the graph was already consumed)"
        )

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node.grad)
        is_leaf = not node._parents
        node._backward = None
        node._parents = ()
        if not is_leaf and node is not loss:
            node.grad = None


def zero_grads(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None


def clip_grad_norm(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    total = 0.0
    grads = [p.grad for p in params.values() if p.grad is not None]
    for g in grads:
        total += float((g * g).sum())
    total = np.sqrt(total)
    if total <= max_norm or total == 0.0:
        return 1.0
    scale = max_norm / total
    for p in params.values():
        if p.grad is not None:
            p.grad = p.grad * scale
    return float(scale)


@dataclass
class AdamState:
    """Bias-corrected Adam with per-parameter moment accumulators."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.lr <= 0 or self.eps <= 0:
            raise ValueError("lr and eps must be positive")


def adam_init(lr: float = 1e-4, betas: tuple[float, float] = (0.9, 0.999),
              eps: float = 1e-8) -> AdamState:
    return AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)


def adam_step(state: AdamState, params: dict[str, Tensor]) -> None:
    """One in-place Adam update over every parameter with a gradient."""
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, p in params.items():
        if p.grad is None:
            continue
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        p.data = p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def save_checkpoint(path, config: dict, arrays: dict[str, np.ndarray]) -> None:
    """Single-file checkpoint: magic, JSON header, then raw row-major float64."""
    names = sorted(arrays)
    header = {
        "config": config,
        "arrays": [{"name": n, "shape": list(arrays[n].shape)} for n in names],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(arrays[n], dtype=np.float64).tobytes())


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        arrays: dict[str, np.ndarray] = {}
        for entry in header["arrays"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * 8)
            if len(buf) != count * 8:
                raise ValueError(f"{path}: truncated array {entry['name']}")
            arrays[entry["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
        if fh.read(1):
            raise ValueError(f"{path}: trailing bytes after arrays")
    return header["config"], arrays
