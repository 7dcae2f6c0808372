"""Layers, parameter management, losses, and the optimizer.

Everything is built from the primitives in :mod:`priorseg.autodiff`.
Transformer layers are pre-norm, so a layer whose output projections are
zeroed is an exact identity map; that property is used by tests and by the
ablation toggles.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    """Base class; collects Tensor attributes (recursively) as parameters."""

    def named_params(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor):
                if val.requires_grad:
                    out[name] = val
            elif isinstance(val, Module):
                out.update(val.named_params(f"{name}."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update(item.named_params(f"{name}.{i}."))
                    elif isinstance(item, Tensor) and item.requires_grad:
                        out[f"{name}.{i}"] = item
        return out

    def zero_grad(self) -> None:
        for p in self.named_params().values():
            p.grad = None


def param(rng: np.random.Generator, shape: tuple[int, ...], scale: float = 0.02) -> Tensor:
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)


def zeros_param(shape: tuple[int, ...]) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


class Linear(Module):
    def __init__(self, rng: np.random.Generator, n_in: int, n_out: int,
                 zero_init: bool = False):
        if zero_init:
            self.weight = zeros_param((n_in, n_out))
        else:
            self.weight = param(rng, (n_in, n_out), scale=1.0 / np.sqrt(n_in))
        self.bias = zeros_param((n_out,))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.matmul(x, self.weight) + self.bias


class LayerNorm(Module):
    """Normalizes the last axis; gain/bias default to identity behavior."""

    def __init__(self, dim: int, eps: float = 1e-6):
        self.gain = Tensor(np.ones(dim), requires_grad=True)
        self.bias = zeros_param((dim,))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gain, self.bias, eps=self.eps)


class MultiHeadAttention(Module):
    """Standard scaled dot-product attention over the token axis.

    Query and key/value sources may differ (cross attention). Inputs are
    (B, L, d); heads split the embedding axis.
    """

    def __init__(self, rng: np.random.Generator, dim: int, heads: int,
                 zero_out: bool = False):
        if dim % heads != 0:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.dim = dim
        self.wq = Linear(rng, dim, dim)
        self.wk = Linear(rng, dim, dim)
        self.wv = Linear(rng, dim, dim)
        self.wo = Linear(rng, dim, dim, zero_init=zero_out)

    def _split(self, x: Tensor, B: int, L: int) -> Tensor:
        dh = self.dim // self.heads
        return x.reshape(B, L, self.heads, dh).transpose(0, 2, 1, 3)

    def __call__(self, q_src: Tensor, kv_src: Tensor | None = None) -> Tensor:
        if kv_src is None:
            kv_src = q_src
        B, Lq, _ = q_src.shape
        Lk = kv_src.shape[1]
        dh = self.dim // self.heads
        q = self._split(self.wq(q_src), B, Lq)
        k = self._split(self.wk(kv_src), B, Lk)
        v = self._split(self.wv(kv_src), B, Lk)
        ctx = ad.attention_core(q, k, v, 1.0 / np.sqrt(dh))
        ctx = ctx.transpose(0, 2, 1, 3).reshape(B, Lq, self.dim)
        return self.wo(ctx)


class FeedForward(Module):
    def __init__(self, rng: np.random.Generator, dim: int, hidden: int,
                 zero_out: bool = False):
        self.fc1 = Linear(rng, dim, hidden)
        self.fc2 = Linear(rng, hidden, dim, zero_init=zero_out)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ad.gelu(self.fc1(x)))


class TransformerLayer(Module):
    """Pre-norm block: x + attn(ln(x)); x + ff(ln(x))."""

    def __init__(self, rng: np.random.Generator, dim: int, heads: int,
                 ff_mult: int = 4, zero_out: bool = False):
        self.ln1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(rng, dim, heads, zero_out=zero_out)
        self.ln2 = LayerNorm(dim)
        self.ff = FeedForward(rng, dim, ff_mult * dim, zero_out=zero_out)

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.ln1(x))
        x = x + self.ff(self.ln2(x))
        return x


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def bce_with_logits(logits: Tensor, targets: np.ndarray,
                    weights: np.ndarray | None = None) -> Tensor:
    """Mean binary cross entropy from logits.

    ``weights`` (broadcastable to ``logits``) selects/weights elements; the
    mean is taken over the total weight.
    """
    t = Tensor(targets)
    per = ad.softplus(logits) - logits * t
    if weights is None:
        return per.mean()
    w = np.broadcast_to(np.asarray(weights, dtype=np.float64), per.shape)
    total = w.sum()
    if total == 0:
        return per.sum() * 0.0
    return (per * Tensor(w)).sum() * (1.0 / total)


def soft_dice_loss(logits: Tensor, targets: np.ndarray,
                   class_weights: np.ndarray | None = None,
                   smooth: float = 1.0) -> Tensor:
    """1 - soft Dice, averaged over (batch, class) pairs.

    ``logits``/``targets`` are (B, C, H, W); ``class_weights`` is (B, C) and
    removes excluded classes from the average.
    """
    B, C = logits.shape[:2]
    p = ad.sigmoid(logits)
    t = Tensor(targets)
    inter = (p * t).sum(axis=(2, 3))
    denom = p.sum(axis=(2, 3)) + t.sum(axis=(2, 3))
    dice = (inter * 2.0 + smooth) / (denom + smooth)
    loss = 1.0 - dice
    if class_weights is None:
        return loss.mean()
    w = np.asarray(class_weights, dtype=np.float64)
    total = w.sum()
    if total == 0:
        return loss.sum() * 0.0
    return (loss * Tensor(w)).sum() * (1.0 / total)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class AdamW:
    """Adam with decoupled weight decay.

    The decay step multiplies parameters by (1 - lr * weight_decay) before
    the moment update, so a zero gradient shrinks a parameter by exactly
    that factor.
    """

    def __init__(self, params: dict[str, Tensor], lr: float = 3e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.1):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            p.data *= 1.0 - self.lr * self.weight_decay
            g = p.grad
            self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            self.v[name] = b2 * self.v[name] + (1.0 - b2) * (g * g)
            m_hat = self.m[name] / bc1
            v_hat = self.v[name] / bc2
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None
