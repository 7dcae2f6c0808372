"""Reverse-mode automatic differentiation over float64 numpy arrays.

A small tape: each operation returns a node that remembers its inputs and a
closure pushing gradients backward. Everything runs in float64 so analytic
gradients can be checked against central finite differences at tight
tolerances. Only the operations the models in this package need are
implemented.

Gradient buffers are never mutated in place; accumulation always allocates,
so a buffer may safely alias an upstream gradient.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tensor:
    """A float64 ndarray plus an optional backward edge into the tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[], None] | None = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- graph traversal -------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate gradients of ``self`` into every reachable node."""
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        if grad is None:
            grad = np.ones_like(self.data)
        _accumulate(self, np.asarray(grad, dtype=np.float64))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward()

    def zero_grad(self) -> None:
        self.grad = None

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __pow__(self, exponent):
        return pow_scalar(self, exponent)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


def _node(data: np.ndarray, parents: Sequence[Tensor],
          backward: Callable[[Tensor], Callable[[], None]]) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward(out)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` over axes that were broadcast relative to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    def bw(out):
        def run():
            g = out.grad
            if a.requires_grad:
                _accumulate(a, _unbroadcast(g, a.shape))
            if b.requires_grad:
                _accumulate(b, _unbroadcast(g, b.shape))
        return run
    return _node(a.data + b.data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def bw(out):
        def run():
            g = out.grad
            if a.requires_grad:
                _accumulate(a, _unbroadcast(g, a.shape))
            if b.requires_grad:
                _accumulate(b, _unbroadcast(-g, b.shape))
        return run
    return _node(a.data - b.data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def bw(out):
        def run():
            g = out.grad
            if a.requires_grad:
                _accumulate(a, _unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                _accumulate(b, _unbroadcast(g * a.data, b.shape))
        return run
    return _node(a.data * b.data, (a, b), bw)


def div(a: Tensor, b: Tensor) -> Tensor:
    def bw(out):
        def run():
            g = out.grad
            if a.requires_grad:
                _accumulate(a, _unbroadcast(g / b.data, a.shape))
            if b.requires_grad:
                _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))
        return run
    return _node(a.data / b.data, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    def bw(out):
        def run():
            _accumulate(a, -out.grad)
        return run
    return _node(-a.data, (a,), bw)


def pow_scalar(a: Tensor, exponent: float) -> Tensor:
    def bw(out):
        def run():
            _accumulate(a, out.grad * exponent * a.data ** (exponent - 1.0))
        return run
    return _node(a.data ** exponent, (a,), bw)


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def bw(out):
        def run():
            _accumulate(a, out.grad * data)
        return run
    return _node(data, (a,), bw)


def log(a: Tensor) -> Tensor:
    def bw(out):
        def run():
            _accumulate(a, out.grad / a.data)
        return run
    return _node(np.log(a.data), (a,), bw)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Hard clip; gradient passes through strictly inside [lo, hi]."""
    inside = (a.data > lo) & (a.data < hi)

    def bw(out):
        def run():
            _accumulate(a, out.grad * inside)
        return run
    return _node(np.clip(a.data, lo, hi), (a,), bw)


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------

def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    s = np.empty_like(x)
    pos = x >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    s[~pos] = ex / (1.0 + ex)

    def bw(out):
        def run():
            _accumulate(a, out.grad * s * (1.0 - s))
        return run
    return _node(s, (a,), bw)


def gelu(a: Tensor) -> Tensor:
    """Exact Gaussian error linear unit; smooth everywhere."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))

    def bw(out):
        def run():
            pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
            _accumulate(a, out.grad * (cdf + x * pdf))
        return run
    return _node(x * cdf, (a,), bw)


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)) computed stably; derivative is the logistic."""
    x = a.data
    data = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def bw(out):
        def run():
            s = np.empty_like(x)
            pos = x >= 0
            s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
            ex = np.exp(x[~pos])
            s[~pos] = ex / (1.0 + ex)
            _accumulate(a, out.grad * s)
        return run
    return _node(data, (a,), bw)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(out):
        def run():
            g = out.grad
            dot = (g * y).sum(axis=axis, keepdims=True)
            _accumulate(a, y * (g - dot))
        return run
    return _node(y, (a,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Fused normalization over the last axis: gain * (x - mu) / std + bias."""
    n = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bw(out):
        def run():
            g = out.grad
            if gain.requires_grad:
                axes = tuple(range(g.ndim - 1))
                _accumulate(gain, (g * xhat).sum(axis=axes))
            if bias.requires_grad:
                axes = tuple(range(g.ndim - 1))
                _accumulate(bias, g.sum(axis=axes))
            if x.requires_grad:
                gh = g * gain.data
                mean_gh = gh.mean(axis=-1, keepdims=True)
                mean_ghx = (gh * xhat).mean(axis=-1, keepdims=True)
                _accumulate(x, inv * (gh - mean_gh - xhat * mean_ghx))
        return run
    return _node(xhat * gain.data + bias.data, (x, gain, bias), bw)


def attention_core(q: Tensor, k: Tensor, v: Tensor, scale: float) -> Tensor:
    """Fused softmax(q k^T * scale) v over the last two axes.

    Shapes: q (..., Lq, dh), k/v (..., Lk, dh) with identical leading axes.
    """
    logits = np.matmul(q.data, np.swapaxes(k.data, -1, -2)) * scale
    logits -= logits.max(axis=-1, keepdims=True)
    e = np.exp(logits)
    attn = e / e.sum(axis=-1, keepdims=True)
    out_data = np.matmul(attn, v.data)

    def bw(out):
        def run():
            g = out.grad
            if v.requires_grad:
                _accumulate(v, np.matmul(np.swapaxes(attn, -1, -2), g))
            if q.requires_grad or k.requires_grad:
                g_attn = np.matmul(g, np.swapaxes(v.data, -1, -2))
                dot = (g_attn * attn).sum(axis=-1, keepdims=True)
                g_logits = attn * (g_attn - dot)
                if q.requires_grad:
                    _accumulate(q, np.matmul(g_logits, k.data) * scale)
                if k.requires_grad:
                    _accumulate(k, np.matmul(np.swapaxes(g_logits, -1, -2), q.data) * scale)
        return run
    return _node(out_data, (q, k, v), bw)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    def bw(out):
        def run():
            _accumulate(a, out.grad.reshape(a.shape))
        return run
    return _node(a.data.reshape(shape), (a,), bw)


def transpose(a: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)

    def bw(out):
        def run():
            _accumulate(a, out.grad.transpose(inv))
        return run
    return _node(a.data.transpose(axes), (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(out):
        def run():
            g = out.grad
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    idx = [slice(None)] * g.ndim
                    idx[axis] = slice(lo, hi)
                    _accumulate(t, g[tuple(idx)])
        return run
    return _node(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def getitem(a: Tensor, idx) -> Tensor:
    def bw(out):
        def run():
            g = np.zeros_like(a.data)
            np.add.at(g, idx, out.grad)
            _accumulate(a, g)
        return run
    return _node(a.data[idx], (a,), bw)


def index_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather (embedding lookup); backward scatter-adds."""
    ids = np.asarray(ids)

    def bw(out):
        def run():
            g = np.zeros_like(table.data)
            np.add.at(g, ids.reshape(-1), out.grad.reshape(-1, table.shape[-1]))
            _accumulate(table, g)
        return run
    return _node(table.data[ids], (table,), bw)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def bw(out):
        def run():
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis=axis)
            # materialize: stride-0 views would poison downstream BLAS calls
            _accumulate(a, np.ascontiguousarray(np.broadcast_to(g, a.shape)))
        return run
    return _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))

    def bw(out):
        def run():
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis=axis)
            _accumulate(a, np.ascontiguousarray(np.broadcast_to(g, a.shape)) / count)
        return run
    return _node(a.data.mean(axis=axis, keepdims=keepdims), (a,), bw)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """np.matmul semantics for operands with ndim >= 2 (batch broadcasting)."""
    def bw(out):
        def run():
            g = out.grad
            if a.requires_grad:
                ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
                _accumulate(a, _unbroadcast(ga, a.shape))
            if b.requires_grad:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
                _accumulate(b, _unbroadcast(gb, b.shape))
        return run
    return _node(np.matmul(a.data, b.data), (a, b), bw)


# ---------------------------------------------------------------------------
# structured image operations
# ---------------------------------------------------------------------------

def conv2d_same_kernel(x: Tensor, k: Tensor) -> Tensor:
    """Depthwise convolution of ``x`` (B,C,H,W) with one kernel per sample.

    ``k`` has shape (B, kh, kw) and is shared across the channels of its
    sample. Stride 1, zero padding (kh//2, kw//2), spatial size preserved.
    Implemented as (kh*kw) shifted accumulations; cross-correlation
    orientation (no kernel flip).
    """
    B, C, H, W = x.shape
    kb, kh, kw = k.shape
    if kb != B:
        raise ValueError(f"kernel batch {kb} != input batch {B}")
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    out_data = np.zeros_like(x.data)
    for i in range(kh):
        for j in range(kw):
            out_data += k.data[:, i, j][:, None, None, None] * xp[:, :, i:i + H, j:j + W]

    def bw(out):
        def run():
            g = out.grad
            if k.requires_grad:
                gk = np.empty_like(k.data)
                for i in range(kh):
                    for j in range(kw):
                        gk[:, i, j] = np.einsum(
                            "bchw,bchw->b", g, xp[:, :, i:i + H, j:j + W])
                _accumulate(k, gk)
            if x.requires_grad:
                gxp = np.zeros_like(xp)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i:i + H, j:j + W] += \
                            k.data[:, i, j][:, None, None, None] * g
                _accumulate(x, gxp[:, :, ph:ph + H, pw:pw + W])
        return run
    return _node(out_data, (x, k), bw)


def _shift2d(arr: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """out[..., y, x] = arr[..., y+dy, x+dx], zero outside the extent."""
    H, W = arr.shape[-2:]
    out = np.zeros_like(arr)
    ys0, ys1 = max(0, dy), min(H, H + dy)
    xs0, xs1 = max(0, dx), min(W, W + dx)
    if ys0 >= ys1 or xs0 >= xs1:
        return out
    out[..., ys0 - dy:ys1 - dy, xs0 - dx:xs1 - dx] = arr[..., ys0:ys1, xs0:xs1]
    return out


def _shift2d_adjoint(arr: np.ndarray, dy: int, dx: int) -> np.ndarray:
    # adjoint of _shift2d is the opposite shift
    return _shift2d(arr, -dy, -dx)


def deform_conv_global(x: Tensor, k: Tensor, offsets: Tensor,
                       grid: np.ndarray) -> Tensor:
    """Depthwise deformable convolution with per-sample global offsets.

    out[b,c,p] = sum_t k[b,t] * x[b,c, p + grid[t] + offsets[b,t]] where
    fractional positions use bilinear interpolation and reads outside the
    extent are zero. ``grid`` is the (T,2) regular tap layout, ``k`` is
    (B,T), ``offsets`` is (B,T,2) ordered (dy, dx).
    """
    B, C, H, W = x.shape
    T = grid.shape[0]

    def sample_and_corners(b: int, t: int):
        sy = grid[t, 0] + offsets.data[b, t, 0]
        sx = grid[t, 1] + offsets.data[b, t, 1]
        fy, fx = int(np.floor(sy)), int(np.floor(sx))
        ry, rx = sy - fy, sx - fx
        c00 = _shift2d(x.data[b], fy, fx)
        c01 = _shift2d(x.data[b], fy, fx + 1)
        c10 = _shift2d(x.data[b], fy + 1, fx)
        c11 = _shift2d(x.data[b], fy + 1, fx + 1)
        val = ((1 - ry) * (1 - rx) * c00 + (1 - ry) * rx * c01
               + ry * (1 - rx) * c10 + ry * rx * c11)
        return val, (fy, fx, ry, rx, c00, c01, c10, c11)

    out_data = np.zeros_like(x.data)
    for b in range(B):
        for t in range(T):
            val, _ = sample_and_corners(b, t)
            out_data[b] += k.data[b, t] * val

    def bw(out):
        def run():
            g = out.grad
            gx = np.zeros_like(x.data) if x.requires_grad else None
            gk = np.zeros_like(k.data) if k.requires_grad else None
            goff = np.zeros_like(offsets.data) if offsets.requires_grad else None
            for b in range(B):
                gb = g[b]
                for t in range(T):
                    val, (fy, fx, ry, rx, c00, c01, c10, c11) = sample_and_corners(b, t)
                    kv = k.data[b, t]
                    if gk is not None:
                        gk[b, t] = np.sum(gb * val)
                    if gx is not None:
                        # scatter bilinear weights back through each corner shift
                        w = kv * gb
                        gx[b] += (1 - ry) * (1 - rx) * _shift2d_adjoint(w, fy, fx)
                        gx[b] += (1 - ry) * rx * _shift2d_adjoint(w, fy, fx + 1)
                        gx[b] += ry * (1 - rx) * _shift2d_adjoint(w, fy + 1, fx)
                        gx[b] += ry * rx * _shift2d_adjoint(w, fy + 1, fx + 1)
                    if goff is not None:
                        dval_dy = (1 - rx) * (c10 - c00) + rx * (c11 - c01)
                        dval_dx = (1 - ry) * (c01 - c00) + ry * (c11 - c10)
                        goff[b, t, 0] = kv * np.sum(gb * dval_dy)
                        goff[b, t, 1] = kv * np.sum(gb * dval_dx)
            if gx is not None:
                _accumulate(x, gx)
            if gk is not None:
                _accumulate(k, gk)
            if goff is not None:
                _accumulate(offsets, goff)
        return run
    return _node(out_data, (x, k, offsets), bw)


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """1-D bilinear interpolation matrix (n_out, n_in), half-pixel centers.

    Output sample i reads input coordinate (i + 0.5) * n_in / n_out - 0.5,
    clamped to the valid range (edge replication at the borders).
    """
    A = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        p = (i + 0.5) * scale - 0.5
        p = min(max(p, 0.0), n_in - 1.0)
        lo = int(np.floor(p))
        hi = min(lo + 1, n_in - 1)
        r = p - lo
        A[i, lo] += 1.0 - r
        A[i, hi] += r
    return A


def bilinear_upsample(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of (B,C,h,w) to (B,C,out_h,out_w), separable matrices."""
    _, _, h, w = x.shape
    ar = Tensor(bilinear_matrix(h, out_h))
    ac = Tensor(bilinear_matrix(w, out_w).T)
    return matmul(matmul(ar, x), ac)
