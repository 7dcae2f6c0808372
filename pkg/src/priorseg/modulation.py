"""Attribute-conditioned feature modulation operators.

Three text-conditioned operators act on the encoder feature map in order:
a positional spatial gate, a texture-generated 7x7 depthwise filter, and a
shape-generated deformable depthwise convolution. A channel-wise multi-head
cross-attention then refines the result with the pooled semantic prior.

All operators preserve the C x H x W shape. Batched kernels (arrays of
samples) carry the training path; thin single-sample wrappers expose the
dataclass-level API and are the surface the oracle tests exercise.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from . import nn
from .attribute_prior import AttributeTokens, SemanticPrior
from .autodiff import Tensor
from .errors import ConfigError, DimensionError, NumericError

FEATURE_ROLES = ("f_sam", "f_attn", "f_prime", "f_fused", "f_sem", "f_out")


@dataclass
class FeatureMap:
    """A (C, H, W) feature tensor tagged with its pipeline role."""

    data: Tensor
    role: str

    def __post_init__(self):
        if self.role not in FEATURE_ROLES:
            raise ValueError(f"unknown feature role {self.role!r}")
        if not isinstance(self.data, Tensor):
            self.data = Tensor(self.data)
        if self.data.ndim != 3:
            raise DimensionError(f"feature map must be (C,H,W), got {self.data.shape}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass
class SpatialAttentionMap:
    """(H, W) gate with entries in [0, 1]."""

    data: np.ndarray


@dataclass
class DynamicKernel:
    """The texture-generated 7x7 filter."""

    weights: np.ndarray

    def __post_init__(self):
        if self.weights.shape != (7, 7):
            raise DimensionError(f"dynamic kernel must be 7x7, got {self.weights.shape}")


@dataclass
class DeformableParams:
    """Shape-generated K x K kernel and per-tap (dy, dx) offsets."""

    kernel: np.ndarray   # (K, K)
    offsets: np.ndarray  # (2*K*K,) flattened (dy, dx) pairs, tap-major


def _tap_grid(k: int) -> np.ndarray:
    r = k // 2
    return np.array([[dy, dx] for dy in range(-r, r + 1) for dx in range(-r, r + 1)],
                    dtype=np.float64)


class SpatialGateParams(nn.Module):
    """Linear map from the flattened position tokens to H*W gate logits."""

    def __init__(self, rng: np.random.Generator, token_len: int, token_dim: int,
                 height: int, width: int):
        self.height = height
        self.width = width
        self.token_len = token_len
        self.proj = nn.Linear(rng, token_len * token_dim, height * width)


class DynamicConvParams(nn.Module):
    """Linear map from the flattened texture tokens to the 49 filter taps."""

    KERNEL = 7

    def __init__(self, rng: np.random.Generator, token_len: int, token_dim: int):
        self.proj = nn.Linear(rng, token_len * token_dim, self.KERNEL * self.KERNEL)
        # identity-kernel bias keeps the operator near a no-op at init
        self.proj.bias.data[(self.KERNEL * self.KERNEL) // 2] = 1.0


class DeformableConvParams(nn.Module):
    """Linear map from flattened shape tokens to K*K weights + 2*K*K offsets."""

    def __init__(self, rng: np.random.Generator, token_len: int, token_dim: int,
                 kernel: int = 3):
        self.kernel = kernel
        taps = kernel * kernel
        self.proj = nn.Linear(rng, token_len * token_dim, 3 * taps)
        self.proj.bias.data[taps // 2] = 1.0  # same near-identity bias


class ChannelAttentionParams(nn.Module):
    """Channel-axis multi-head cross-attention parameters.

    Queries come from the feature map, keys/values from the prior expanded
    to one scalar per channel. ``prior_source='tokens'`` builds that
    expansion from the fused token sequence through a nonlinearity instead
    of the pooled vector.
    """

    def __init__(self, rng: np.random.Generator, channels: int, prior_dim: int,
                 head_count: int = 4, prior_source: str = "pooled"):
        if head_count <= 0 or channels % head_count != 0:
            raise ConfigError(
                f"channels {channels} not divisible by head_count {head_count}")
        if prior_source not in ("pooled", "tokens"):
            raise ConfigError(f"unknown prior_source {prior_source!r}")
        self.head_count = head_count
        self.channels = channels
        self.prior_source = prior_source
        self.expand = nn.Linear(rng, prior_dim, channels)
        scale = 1.0 / np.sqrt(channels)
        self.wq = nn.param(rng, (channels, channels), scale=scale)
        self.wk = nn.param(rng, (channels, channels), scale=scale)
        self.wv = nn.param(rng, (channels, channels), scale=scale)
        self.wo = nn.param(rng, (channels, channels), scale=scale)
        self.bq = nn.zeros_param((channels, 1))
        self.bk = nn.zeros_param((channels, 1))
        self.bv = nn.zeros_param((channels, 1))
        self.bo = nn.zeros_param((channels, 1))


@dataclass
class PriorToggles:
    """Per-prior enable flags for the modulation stage."""

    position: bool = True
    texture: bool = True
    shape: bool = True


class ModulationParams(nn.Module):
    """Bundle of the four operator parameter sets for one feature geometry."""

    def __init__(self, rng: np.random.Generator, channels: int, height: int,
                 width: int, token_len: int, token_dim: int,
                 deform_kernel: int = 3, attn_heads: int = 4,
                 prior_source: str = "pooled"):
        self.spatial = SpatialGateParams(rng, token_len, token_dim, height, width)
        self.dynamic = DynamicConvParams(rng, token_len, token_dim)
        self.deform = DeformableConvParams(rng, token_len, token_dim, kernel=deform_kernel)
        self.channel_attn = ChannelAttentionParams(
            rng, channels, token_dim, head_count=attn_heads, prior_source=prior_source)


# ---------------------------------------------------------------------------
# batched kernels
# ---------------------------------------------------------------------------

def spatial_attention_batch(f: Tensor, tokens: Tensor,
                            params: SpatialGateParams) -> tuple[Tensor, Tensor]:
    """Gate every channel of f (B,C,H,W) by a logistic map of the position
    tokens (B,L,d). Returns (gated features, attention map (B,H,W))."""
    B, C, H, W = f.shape
    flat = tokens.reshape(B, tokens.shape[1] * tokens.shape[2])
    logits = params.proj(flat)
    if logits.shape[1] != H * W:
        raise DimensionError(
            f"projection produces {logits.shape[1]} logits, feature needs {H * W}")
    attn = ad.sigmoid(logits).reshape(B, 1, H, W)
    gated = f * attn
    return gated, attn.reshape(B, H, W)


def dynamic_conv_batch(f: Tensor, tokens: Tensor,
                       params: DynamicConvParams) -> tuple[Tensor, Tensor]:
    """Depthwise-convolve f with a single text-generated 7x7 kernel per
    sample. Returns (features, kernels (B,7,7))."""
    B = f.shape[0]
    k = DynamicConvParams.KERNEL
    flat = tokens.reshape(B, tokens.shape[1] * tokens.shape[2])
    kernels = params.proj(flat).reshape(B, k, k)
    return ad.conv2d_same_kernel(f, kernels), kernels


def deformable_conv_batch(f: Tensor, tokens: Tensor,
                          params: DeformableConvParams
                          ) -> tuple[Tensor, Tensor, Tensor]:
    """Depthwise deformable convolution with text-generated kernel and global
    offsets. Returns (features, kernels (B,T), offsets (B,T,2))."""
    B, C, H, W = f.shape
    K = params.kernel
    if H < K or W < K:
        raise DimensionError(f"feature {H}x{W} smaller than kernel {K}x{K}")
    taps = K * K
    flat = tokens.reshape(B, tokens.shape[1] * tokens.shape[2])
    gen = params.proj(flat)
    kernels = gen[:, :taps]
    offsets = gen[:, taps:].reshape(B, taps, 2)
    if not np.all(np.isfinite(offsets.data)):
        raise NumericError("generated deformable offsets are non-finite")
    bound = float(max(H, W))
    offsets = ad.clip(offsets, -bound, bound)
    out = ad.deform_conv_global(f, kernels, offsets, _tap_grid(K))
    return out, kernels, offsets


def channel_attention_batch(f: Tensor, prior: Tensor,
                            params: ChannelAttentionParams,
                            fused_tokens: Tensor | None = None,
                            return_attn: bool = False):
    """Channel-wise multi-head cross-attention refinement with residual.

    ``f`` is (B,C,H,W); ``prior`` is the pooled vector (B,d). Rows of the
    attention matrix are softmax-normalized over key channels; the output
    projection result is added back onto ``f``.
    """
    B, C, H, W = f.shape
    if C != params.channels:
        raise DimensionError(f"feature has {C} channels, params expect {params.channels}")
    nh = params.head_count
    ch = C // nh
    hw = H * W
    if params.prior_source == "tokens":
        if fused_tokens is None:
            raise ConfigError("prior_source='tokens' requires the fused token sequence")
        expanded = ad.gelu(params.expand(fused_tokens))  # (B, L, C)
        chan = expanded.mean(axis=1)
    else:
        chan = params.expand(prior)  # (B, C)
    ones = Tensor(np.ones((1, hw)))
    p_map = ad.matmul(chan.reshape(B, C, 1), ones)     # (B, C, HW)
    f_flat = f.reshape(B, C, hw)

    def proj(w, b, x):
        return ad.matmul(w, x) + b

    q = proj(params.wq, params.bq, f_flat)
    k = proj(params.wk, params.bk, p_map)
    v = proj(params.wv, params.bv, p_map)
    q = q.reshape(B, nh, ch, hw)
    k = k.reshape(B, nh, ch, hw)
    v = v.reshape(B, nh, ch, hw)
    logits = ad.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(hw))
    attn = ad.softmax(logits, axis=-1)                 # (B, nh, ch, ch)
    ctx = ad.matmul(attn, v).reshape(B, C, hw)
    out = proj(params.wo, params.bo, ctx).reshape(B, C, H, W)
    refined = f + out
    if return_attn:
        return refined, attn
    return refined


def modulation_stage_batch(f_sam: Tensor, tokens: dict[str, Tensor],
                           prior: Tensor | None, toggles: PriorToggles,
                           params: ModulationParams,
                           apply_channel_attention: bool = True,
                           fused_tokens: Tensor | None = None
                           ) -> tuple[Tensor, Tensor]:
    """Compose the enabled operators (position -> texture -> shape), then the
    channel cross-attention. Disabled operators pass features through
    untouched. Returns (modulated features, refined features)."""
    f = f_sam
    if toggles.position:
        f, _ = spatial_attention_batch(f, tokens["position"], params.spatial)
    if toggles.texture:
        f, _ = dynamic_conv_batch(f, tokens["texture"], params.dynamic)
    if toggles.shape:
        f, _, _ = deformable_conv_batch(f, tokens["shape"], params.deform)
    f_fused = f
    if apply_channel_attention:
        if prior is None:
            raise ConfigError("channel attention requires a prior vector")
        f_sem = channel_attention_batch(f_fused, prior, params.channel_attn,
                                        fused_tokens=fused_tokens)
    else:
        f_sem = f_fused
    return f_fused, f_sem


# ---------------------------------------------------------------------------
# single-sample API
# ---------------------------------------------------------------------------

def _single(t: Tensor) -> Tensor:
    return t.reshape(1, *t.shape)


def positional_attention(f_sam: FeatureMap, pos: AttributeTokens,
                         params: SpatialGateParams
                         ) -> tuple[FeatureMap, SpatialAttentionMap]:
    if f_sam.role != "f_sam":
        raise ValueError(f"positional_attention expects role f_sam, got {f_sam.role}")
    gated, attn = spatial_attention_batch(
        _single(f_sam.data), _single(pos.embedding), params)
    return (FeatureMap(gated.reshape(*f_sam.shape), "f_attn"),
            SpatialAttentionMap(attn.data[0].copy()))


def texture_dynamic_conv(f_attn: FeatureMap, tex: AttributeTokens,
                         params: DynamicConvParams) -> FeatureMap:
    out, _ = dynamic_conv_batch(_single(f_attn.data), _single(tex.embedding), params)
    return FeatureMap(out.reshape(*f_attn.shape), "f_prime")


def texture_kernel(tex: AttributeTokens, params: DynamicConvParams) -> DynamicKernel:
    """The 7x7 filter the texture tokens generate (inspection helper)."""
    k = DynamicConvParams.KERNEL
    flat = tex.embedding.reshape(1, tex.length * tex.dim)
    return DynamicKernel(params.proj(flat).data.reshape(k, k).copy())


def shape_deformable_conv(f_prime: FeatureMap, shape: AttributeTokens,
                          params: DeformableConvParams) -> FeatureMap:
    out, _, _ = deformable_conv_batch(
        _single(f_prime.data), _single(shape.embedding), params)
    return FeatureMap(out.reshape(*f_prime.shape), "f_fused")


def shape_deformable_params(shape: AttributeTokens,
                            params: DeformableConvParams) -> DeformableParams:
    """The generated K x K kernel and offsets (inspection helper)."""
    K = params.kernel
    taps = K * K
    flat = shape.embedding.reshape(1, shape.length * shape.dim)
    gen = params.proj(flat).data[0]
    return DeformableParams(kernel=gen[:taps].reshape(K, K).copy(),
                            offsets=gen[taps:].copy())


def channel_cross_attention(f_fused: FeatureMap, prior: SemanticPrior,
                            params: ChannelAttentionParams) -> FeatureMap:
    refined = channel_attention_batch(
        _single(f_fused.data), prior.pooled.reshape(1, prior.pooled.shape[0]),
        params,
        fused_tokens=prior.fused_tokens.reshape(1, *prior.fused_tokens.shape))
    return FeatureMap(refined.reshape(*f_fused.shape), "f_sem")


def perceptual_stage(f_sam: FeatureMap, pos: AttributeTokens,
                     tex: AttributeTokens, shape: AttributeTokens,
                     prior: SemanticPrior, toggles: PriorToggles,
                     params: ModulationParams) -> tuple[FeatureMap, FeatureMap]:
    """Single-sample composition of the modulation stage (always ends with
    channel cross-attention, matching the ablation protocol)."""
    tokens = {
        "position": _single(pos.embedding),
        "texture": _single(tex.embedding),
        "shape": _single(shape.embedding),
    }
    f_fused, f_sem = modulation_stage_batch(
        _single(f_sam.data), tokens,
        prior.pooled.reshape(1, prior.pooled.shape[0]), toggles, params,
        apply_channel_attention=True,
        fused_tokens=prior.fused_tokens.reshape(1, *prior.fused_tokens.shape))
    shape3 = f_sam.shape
    return (FeatureMap(f_fused.reshape(*shape3), "f_fused"),
            FeatureMap(f_sem.reshape(*shape3), "f_sem"))
