"""Desk-scale stand-ins for the image encoder, prompt encoder, and mask
decoder, plus checkpoint serialization.

The image encoder is a small ViT (patch embedding + pre-norm Transformer
layers) producing a C x H x W feature grid. The prompt encoder turns point /
box prompts into tokens built from closed-form sin/cos positional features.
The decoder runs a two-way Transformer between query tokens (learned class
queries, a prompted-target query, and any prompt tokens) and the flattened
feature grid, then decodes one logit plane per query with a dynamic linear
head over bilinearly upsampled features.

Real pretrained backbones can be dropped in by implementing the same three
call signatures; nothing downstream inspects their internals.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .errors import CheckpointError, ConfigError, DimensionError
from .modulation import FeatureMap

PROMPT_MODES = ("none", "points", "box")


@dataclass
class ImageSample:
    """A grayscale image with values in [0, 255]."""

    pixels: np.ndarray  # (H, W)
    id: str = ""

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        if self.pixels.ndim != 2:
            raise DimensionError(f"image must be 2-D grayscale, got {self.pixels.shape}")


@dataclass
class Prompt:
    """Optional spatial hint: foreground/background points or a box."""

    mode: str = "none"
    points: tuple[tuple[float, float, int], ...] = ()  # (y, x, label), label 1=fg
    box: tuple[float, float, float, float] | None = None  # (y0, x0, y1, x1)

    def __post_init__(self):
        if self.mode not in PROMPT_MODES:
            raise ValueError(f"prompt mode must be one of {PROMPT_MODES}")
        if self.mode == "points" and len(self.points) == 0:
            raise ValueError("points mode requires at least one point")
        if self.mode != "points" and len(self.points) > 0:
            raise ValueError(f"mode {self.mode!r} must not carry points")
        if self.mode == "box":
            if self.box is None:
                raise ValueError("box mode requires box coordinates")
            y0, x0, y1, x1 = self.box
            if not (y0 <= y1 and x0 <= x1):
                raise ValueError(f"box coordinates not ordered: {self.box}")
        elif self.box is not None:
            raise ValueError(f"mode {self.mode!r} must not carry a box")

    def validate_bounds(self, height: int, width: int) -> None:
        if self.mode == "points":
            for y, x, label in self.points:
                if not (0 <= y < height and 0 <= x < width):
                    raise ValueError(f"point ({y}, {x}) outside {height}x{width} image")
                if label not in (0, 1):
                    raise ValueError(f"point label must be 0 or 1, got {label}")
        elif self.mode == "box":
            y0, x0, y1, x1 = self.box
            if not (0 <= y0 and y1 < height and 0 <= x0 and x1 < width):
                raise ValueError(f"box {self.box} outside {height}x{width} image")


@dataclass
class SegPrediction:
    """Per-class logits and strictly-thresholded binary masks."""

    logits: np.ndarray  # (classes, H, W)
    target_logits: np.ndarray | None = None  # prompted-target plane

    @property
    def masks(self) -> np.ndarray:
        # logistic(z) > 0.5 iff z > 0; ties resolve to background
        return self.logits > 0.0


class ImageEncoder(nn.Module):
    """Patch embedding + learned 2-D positions + pre-norm Transformer."""

    def __init__(self, rng: np.random.Generator, image_size: int = 64,
                 patch_size: int = 8, dim: int = 64, layers: int = 4,
                 heads: int = 4):
        if image_size % patch_size != 0:
            raise ConfigError(
                f"image size {image_size} not divisible by patch size {patch_size}")
        self.image_size = image_size
        self.patch_size = patch_size
        self.dim = dim
        self.grid = image_size // patch_size
        self.patch_embed = nn.Linear(rng, patch_size * patch_size, dim)
        self.pos_embed = nn.param(rng, (self.grid * self.grid, dim))
        self.layers = [nn.TransformerLayer(rng, dim, heads, ff_mult=2)
                       for _ in range(layers)]

    def patchify(self, images: np.ndarray) -> np.ndarray:
        """(B, H, W) -> (B, grid*grid, patch*patch), row-major patches."""
        B, H, W = images.shape
        if H != self.image_size or W != self.image_size:
            raise ConfigError(
                f"expected {self.image_size}x{self.image_size} input, got {H}x{W}")
        p, g = self.patch_size, self.grid
        x = images.reshape(B, g, p, g, p).transpose(0, 1, 3, 2, 4)
        return x.reshape(B, g * g, p * p)

    def encode_batch(self, images: np.ndarray, trace: list | None = None) -> Tensor:
        """Normalized images (B, H, W) in [0,1]-ish -> features (B, C, h, w)."""
        patches = Tensor(self.patchify(np.asarray(images, dtype=np.float64)))
        x = self.patch_embed(patches) + self.pos_embed
        if trace is not None:
            trace.append(x.data.copy())
        for layer in self.layers:
            x = layer(x)
            if trace is not None:
                trace.append(x.data.copy())
        B = images.shape[0]
        g = self.grid
        return x.transpose(0, 2, 1).reshape(B, self.dim, g, g)


def normalize_pixels(pixels: np.ndarray) -> np.ndarray:
    """[0,255] image values -> zero-centered floats for the encoder."""
    return np.asarray(pixels, dtype=np.float64) / 255.0 - 0.5


def image_encode(img: ImageSample, encoder: ImageEncoder,
                 trace: list | None = None) -> FeatureMap:
    """Single-image encoding to a role-tagged feature map."""
    feats = encoder.encode_batch(normalize_pixels(img.pixels)[None], trace=trace)
    c, h, w = feats.shape[1:]
    return FeatureMap(feats.reshape(c, h, w), "f_sam")


def fourier_features(y: float, x: float, height: int, width: int,
                     n_freq: int) -> np.ndarray:
    """Closed-form positional code: per frequency f=1..n_freq the block
    [sin(2 pi f yn), cos(2 pi f yn), sin(2 pi f xn), cos(2 pi f xn)] with
    half-pixel-normalized coordinates."""
    yn = (y + 0.5) / height
    xn = (x + 0.5) / width
    out = np.empty(4 * n_freq)
    for i in range(n_freq):
        f = 2.0 * np.pi * (i + 1)
        out[4 * i:4 * i + 4] = (np.sin(f * yn), np.cos(f * yn),
                                np.sin(f * xn), np.cos(f * xn))
    return out


class PromptEncoder(nn.Module):
    """Points -> label embedding + projected positional code; boxes -> two
    corner tokens. Prompt-free mode contributes zero tokens."""

    def __init__(self, rng: np.random.Generator, dim: int = 64):
        if dim % 4 != 0:
            raise ConfigError(f"prompt encoder dim must be divisible by 4, got {dim}")
        self.dim = dim
        self.n_freq = dim // 4
        self.pos_proj = nn.Linear(rng, dim, dim)
        self.label_embed = nn.param(rng, (2, dim))   # rows: bg, fg
        self.corner_embed = nn.param(rng, (2, dim))  # rows: top-left, bottom-right

    def _point_codes(self, coords: list[tuple[float, float]],
                     height: int, width: int) -> Tensor:
        pe = np.stack([fourier_features(y, x, height, width, self.n_freq)
                       for y, x in coords])
        return self.pos_proj(Tensor(pe))

    def encode(self, prompt: Prompt, height: int, width: int) -> Tensor:
        """One prompt -> (M, dim) tokens; M = 0 for prompt-free."""
        prompt.validate_bounds(height, width)
        if prompt.mode == "none":
            return Tensor(np.zeros((0, self.dim)))
        if prompt.mode == "points":
            coords = [(p[0], p[1]) for p in prompt.points]
            labels = np.array([int(p[2]) for p in prompt.points])
            return self._point_codes(coords, height, width) + \
                ad.index_rows(self.label_embed, labels)
        y0, x0, y1, x1 = prompt.box
        codes = self._point_codes([(y0, x0), (y1, x1)], height, width)
        return codes + ad.index_rows(self.corner_embed, np.array([0, 1]))

    def encode_batch(self, prompts: list[Prompt], height: int, width: int) -> Tensor:
        """Same-mode, same-count prompts -> (B, M, dim)."""
        modes = {p.mode for p in prompts}
        if len(modes) != 1:
            raise ValueError(f"mixed prompt modes in one batch: {sorted(modes)}")
        counts = {len(p.points) for p in prompts}
        if len(counts) != 1:
            raise ValueError("all prompts in a batch must have the same point count")
        toks = [self.encode(p, height, width) for p in prompts]
        B = len(toks)
        M = toks[0].shape[0]
        if M == 0:
            return Tensor(np.zeros((B, 0, self.dim)))
        stacked = ad.concat([t.reshape(1, M, self.dim) for t in toks], axis=0)
        return stacked


def prompt_encode(prompt: Prompt, encoder: PromptEncoder,
                  height: int, width: int) -> Tensor:
    return encoder.encode(prompt, height, width)


class TwoWayLayer(nn.Module):
    """Query self-attention, query->image cross, query MLP, image->query
    cross, image MLP; all pre-norm with residuals."""

    def __init__(self, rng: np.random.Generator, dim: int, heads: int):
        self.q_self_ln = nn.LayerNorm(dim)
        self.q_self = nn.MultiHeadAttention(rng, dim, heads)
        self.q_cross_ln = nn.LayerNorm(dim)
        self.q_cross = nn.MultiHeadAttention(rng, dim, heads)
        self.q_mlp_ln = nn.LayerNorm(dim)
        self.q_mlp = nn.FeedForward(rng, dim, 2 * dim)
        self.i_cross_ln = nn.LayerNorm(dim)
        self.i_cross = nn.MultiHeadAttention(rng, dim, heads)
        self.i_mlp_ln = nn.LayerNorm(dim)
        self.i_mlp = nn.FeedForward(rng, dim, 2 * dim)

    def __call__(self, queries: Tensor, img: Tensor) -> tuple[Tensor, Tensor]:
        queries = queries + self.q_self(self.q_self_ln(queries))
        queries = queries + self.q_cross(self.q_cross_ln(queries), img)
        queries = queries + self.q_mlp(self.q_mlp_ln(queries))
        img = img + self.i_cross(self.i_cross_ln(img), queries)
        img = img + self.i_mlp(self.i_mlp_ln(img))
        return queries, img


class MaskDecoder(nn.Module):
    """Two-way Transformer + per-query dynamic linear head.

    Owns the learned class queries and the prompted-target query; prompt
    tokens are appended as extra queries, so toggling prompts never changes
    the parameter set.
    """

    def __init__(self, rng: np.random.Generator, dim: int, n_classes: int,
                 feature_grid: int, image_size: int, layers: int = 2,
                 heads: int = 4):
        self.dim = dim
        self.n_classes = n_classes
        self.image_size = image_size
        self.feature_grid = feature_grid
        self.class_queries = nn.param(rng, (n_classes, dim))
        self.target_query = nn.param(rng, (1, dim))
        self.img_pos = nn.param(rng, (feature_grid * feature_grid, dim))
        self.layers = [TwoWayLayer(rng, dim, heads) for _ in range(layers)]
        self.head_fc1 = nn.Linear(rng, dim, dim)
        self.head_fc2 = nn.Linear(rng, dim, dim + 1)

    def decode_batch(self, features: Tensor,
                     prompt_tokens: Tensor | None = None) -> tuple[Tensor, Tensor]:
        """Features (B,C,h,w) + optional (B,M,dim) prompt tokens ->
        (class logits (B,n_classes,H,W), target logits (B,H,W))."""
        B, C, h, w = features.shape
        if C != self.dim:
            raise DimensionError(f"decoder dim {self.dim} != feature channels {C}")
        img = features.reshape(B, C, h * w).transpose(0, 2, 1) + self.img_pos
        base = ad.concat([self.class_queries, self.target_query], axis=0)
        # tile the learned queries across the batch (gradients sum back)
        queries = base.reshape(1, self.n_classes + 1, self.dim) + Tensor(np.zeros((B, 1, 1)))
        if prompt_tokens is not None and prompt_tokens.shape[1] > 0:
            queries = ad.concat([queries, prompt_tokens], axis=1)
        for layer in self.layers:
            queries, img = layer(queries, img)
        up_size = self.image_size
        out_q = queries[:, : self.n_classes + 1]
        head = self.head_fc2(ad.gelu(self.head_fc1(out_q)))        # (B,Q,dim+1)
        weights = head[:, :, : self.dim]
        bias = head[:, :, self.dim:]
        # dynamic head over bilinearly upsampled features; the head is linear
        # per channel, so it commutes with the upsample -- project the Q
        # coarse planes first and upsample those (identical result, far less
        # interpolation work)
        coarse = ad.matmul(weights, img.transpose(0, 2, 1)).reshape(
            B, self.n_classes + 1, h, w)
        logits = ad.bilinear_upsample(coarse, up_size, up_size) + \
            bias.reshape(B, self.n_classes + 1, 1, 1)
        return logits[:, : self.n_classes], logits[:, self.n_classes]


def mask_decode(f_out: FeatureMap, prompt_tokens: Tensor | None,
                decoder: MaskDecoder) -> SegPrediction:
    """Single-sample decoding of a fused feature map into a prediction."""
    C, h, w = f_out.shape
    feats = f_out.data.reshape(1, C, h, w)
    if prompt_tokens is not None and prompt_tokens.ndim == 2:
        M, d = prompt_tokens.shape
        prompt_tokens = prompt_tokens.reshape(1, M, d)
    cls_logits, target_logits = decoder.decode_batch(feats, prompt_tokens)
    return SegPrediction(logits=cls_logits.data[0].copy(),
                         target_logits=target_logits.data[0].copy())


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, params: dict[str, Tensor], fingerprint: str) -> None:
    """All parameter tensors keyed by module path + a config fingerprint."""
    arrays = {f"param/{k}": v.data for k, v in params.items()}
    arrays["__fingerprint__"] = np.array(fingerprint)
    np.savez(path, **arrays)


def load_checkpoint(path, expected_fingerprint: str) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as npz:
        if "__fingerprint__" not in npz:
            raise CheckpointError(f"{path}: missing fingerprint")
        found = str(npz["__fingerprint__"])
        if found != expected_fingerprint:
            raise CheckpointError(
                f"{path}: fingerprint mismatch\n  checkpoint: {found}\n"
                f"  expected:   {expected_fingerprint}")
        return {k[len("param/"):]: npz[k] for k in npz.files if k.startswith("param/")}


def restore_params(params: dict[str, Tensor], arrays: dict[str, np.ndarray]) -> None:
    missing = sorted(set(params) - set(arrays))
    extra = sorted(set(arrays) - set(params))
    if missing or extra:
        raise CheckpointError(
            f"parameter set mismatch; missing={missing[:5]} extra={extra[:5]}")
    for k, p in params.items():
        if p.data.shape != arrays[k].shape:
            raise CheckpointError(
                f"shape mismatch for {k}: {p.data.shape} vs {arrays[k].shape}")
        p.data = arrays[k].astype(np.float64).copy()
