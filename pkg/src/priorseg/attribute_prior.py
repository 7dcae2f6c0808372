"""Structured attribute texts -> fused semantic prior.

The three attribute kinds (position, texture, shape) are tokenized with a
fixed word table, embedded by a small Transformer text encoder, fused across
attributes by one Transformer block, and average-pooled into a single prior
vector. The fused token sequence is kept alongside the pooled vector because
downstream refinement can optionally attend over it.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .errors import DimensionError, VocabularyError

ATTRIBUTE_KINDS = ("position", "texture", "shape")

POSITION_WORDS = (
    "top-left", "top-center", "top-right",
    "middle-left", "center", "middle-right",
    "bottom-left", "bottom-center", "bottom-right",
)
TEXTURE_WORDS = ("smooth", "stripes", "checker", "speckle")
SHAPE_WORDS = ("circle", "ellipse", "rectangle", "blob")


class Vocabulary:
    """Fixed word -> id table, serialized as ``word<TAB>id`` lines."""

    def __init__(self, word_to_id: dict[str, int], size: int):
        self.word_to_id = dict(word_to_id)
        self.size = size
        if any(i < 0 or i >= size for i in self.word_to_id.values()):
            raise VocabularyError("word table contains ids outside vocabulary size")
        self.id_to_word = {i: w for w, i in self.word_to_id.items()}

    def encode(self, words) -> tuple[int, ...]:
        ids = []
        for w in words:
            if w not in self.word_to_id:
                raise VocabularyError(f"unknown word: {w!r}")
            ids.append(self.word_to_id[w])
        return tuple(ids)

    def save(self, path) -> None:
        lines = [f"{w}\t{i}" for w, i in sorted(self.word_to_id.items(), key=lambda kv: kv[1])]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path, size: int | None = None) -> "Vocabulary":
        table = {}
        for ln, line in enumerate(Path(path).read_text().splitlines(), 1):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise VocabularyError(f"{path}:{ln}: expected 'word<TAB>id'")
            table[parts[0]] = int(parts[1])
        if size is None:
            size = max(table.values()) + 1
        return cls(table, size)


def default_vocabulary(size: int = 64) -> Vocabulary:
    """The shipped word table: one id per attribute word, a pad token, and
    reserved headroom up to ``size``."""
    words = ["<pad>"] + list(POSITION_WORDS) + list(TEXTURE_WORDS) + list(SHAPE_WORDS)
    if len(words) > size:
        raise VocabularyError(f"vocabulary size {size} too small for {len(words)} words")
    return Vocabulary({w: i for i, w in enumerate(words)}, size)


@dataclass(frozen=True)
class AttributeText:
    """A tokenized attribute description of one kind."""

    kind: str
    token_ids: tuple[int, ...]

    def __post_init__(self):
        if self.kind not in ATTRIBUTE_KINDS:
            raise ValueError(f"kind must be one of {ATTRIBUTE_KINDS}, got {self.kind!r}")


@dataclass
class AttributeTokens:
    """Token embeddings (L, d) for one attribute kind."""

    kind: str
    embedding: Tensor

    @property
    def length(self) -> int:
        return self.embedding.shape[0]

    @property
    def dim(self) -> int:
        return self.embedding.shape[1]


@dataclass
class SemanticPrior:
    """Average-pooled prior vector plus the pre-pool fused token sequence."""

    pooled: Tensor        # (d,)
    fused_tokens: Tensor  # (L_total, d)


class TextEncoder(nn.Module):
    """Token embedding + learned positional embedding + pre-norm layers.

    Deterministic for fixed parameters. ``use_positional=False`` drops the
    positional term, making the per-attribute encoding order-agnostic.
    """

    def __init__(self, rng: np.random.Generator, vocab_size: int = 64,
                 dim: int = 32, layers: int = 2, heads: int = 2,
                 max_len: int = 16, use_positional: bool = True):
        self.vocab_size = vocab_size
        self.dim = dim
        self.max_len = max_len
        self.use_positional = use_positional
        self.embed = nn.param(rng, (vocab_size, dim))
        self.pos_embed = nn.param(rng, (max_len, dim))
        self.layers = [nn.TransformerLayer(rng, dim, heads) for _ in range(layers)]

    def encode_ids(self, ids: np.ndarray, trace: list | None = None) -> Tensor:
        """Embed integer ids of shape (B, L) to (B, L, dim)."""
        ids = np.asarray(ids)
        if ids.ndim != 2 or ids.shape[1] == 0:
            raise ValueError("token id array must be (B, L) with L >= 1")
        if ids.min() < 0 or ids.max() >= self.vocab_size:
            raise VocabularyError(
                f"token id out of range [0, {self.vocab_size}): {int(ids.max())}")
        if ids.shape[1] > self.max_len:
            raise DimensionError(f"sequence length {ids.shape[1]} exceeds max {self.max_len}")
        x = ad.index_rows(self.embed, ids)
        if self.use_positional:
            x = x + self.pos_embed[: ids.shape[1]]
        if trace is not None:
            trace.append(x.data.copy())
        for layer in self.layers:
            x = layer(x)
            if trace is not None:
                trace.append(x.data.copy())
        return x


def encode_attribute(text: AttributeText, encoder: TextEncoder,
                     trace: list | None = None) -> AttributeTokens:
    """Encode one attribute text into its (L, d) token embedding matrix."""
    if len(text.token_ids) == 0:
        raise ValueError("attribute text has no tokens")
    ids = np.asarray(text.token_ids, dtype=np.int64)[None, :]
    emb = encoder.encode_ids(ids, trace=trace)
    return AttributeTokens(kind=text.kind, embedding=emb.reshape(ids.shape[1], encoder.dim))


class CrossAttributeFusion(nn.Module):
    """One Transformer block over the concatenated attribute tokens.

    A learned per-attribute segment embedding is added before the block so it
    can tell which attribute a token came from (toggleable). With
    ``cross_attention=False`` the block is skipped and fusion degenerates to
    concatenation + pooling.
    """

    def __init__(self, rng: np.random.Generator, dim: int, heads: int = 2,
                 use_segment_embedding: bool = True):
        self.dim = dim
        self.use_segment_embedding = use_segment_embedding
        self.segment_embed = nn.param(rng, (len(ATTRIBUTE_KINDS), dim))
        self.block = nn.TransformerLayer(rng, dim, heads)

    def fuse_batch(self, parts: list[tuple[str, Tensor]],
                   cross_attention: bool = True) -> tuple[Tensor, Tensor]:
        """Fuse (kind, (B, L_k, d)) parts -> (pooled (B, d), tokens (B, L, d))."""
        if not parts:
            raise ValueError("at least one attribute required for fusion")
        dims = {t.shape[-1] for _, t in parts}
        if len(dims) != 1:
            raise DimensionError(f"attribute embedding dims differ: {sorted(dims)}")
        if dims != {self.dim}:
            raise DimensionError(f"expected dim {self.dim}, got {dims}")
        segments = []
        for kind, tok in parts:
            if self.use_segment_embedding:
                seg = self.segment_embed[ATTRIBUTE_KINDS.index(kind)]
                tok = tok + seg
            segments.append(tok)
        x = ad.concat(segments, axis=1) if len(segments) > 1 else segments[0]
        if cross_attention:
            x = self.block(x)
        pooled = x.mean(axis=1)
        return pooled, x


def fuse_attributes(pos: AttributeTokens, tex: AttributeTokens,
                    shape: AttributeTokens, fusion: CrossAttributeFusion,
                    cross_attention: bool = True) -> SemanticPrior:
    """Concatenate the three attribute sequences, apply the fusion block,
    and average-pool over the token axis."""
    parts = []
    for tok in (pos, tex, shape):
        parts.append((tok.kind, tok.embedding.reshape(1, *tok.embedding.shape)))
    pooled, tokens = fusion.fuse_batch(parts, cross_attention=cross_attention)
    total = tokens.shape[1]
    return SemanticPrior(pooled=pooled.reshape(fusion.dim),
                         fused_tokens=tokens.reshape(total, fusion.dim))
