"""End-to-end assembly: encoder -> prior-guided modulation -> gated fusion
-> mask decoder, with every ablation toggle of the experimental protocol.

Toggle semantics
----------------
* ``prior_<kind>``: drops that attribute everywhere (its operator is skipped
  and its tokens are excluded from cross-attribute fusion), so outputs are
  bitwise independent of that attribute's text.
* ``stage_semantic``: the text pathway. Off means attribute texts are never
  read; the modulation operators (if on) run from learned placeholder tokens
  and the channel cross-attention is skipped.
* ``stage_modulation``: the three feature operators. Off means the encoder
  features pass straight to fusion (channel attention still applies when the
  semantic stage is on).
* ``cross_attribute_attention``: the Transformer block inside fusion; off
  degrades fusion to concatenation + mean pooling.
* ``gate_*``: which branches the fusion gate may select from.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import autodiff as ad
from . import nn
from .attribute_prior import ATTRIBUTE_KINDS, CrossAttributeFusion, TextEncoder
from .autodiff import Tensor
from .backbones import (ImageEncoder, MaskDecoder, Prompt, PromptEncoder,
                        normalize_pixels)
from .errors import ConfigError
from .fusion import GateParams, gated_fuse_batch
from .modulation import ModulationParams, PriorToggles, modulation_stage_batch


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    patch_size: int = 8
    d_model: int = 64
    encoder_layers: int = 4
    encoder_heads: int = 4
    text_dim: int = 32
    text_layers: int = 2
    text_heads: int = 2
    vocab_size: int = 64
    attr_len: int = 3
    n_classes: int = 3
    decoder_layers: int = 2
    decoder_heads: int = 4
    deform_kernel: int = 3
    channel_attn_heads: int = 4
    prior_source: str = "pooled"
    prior_position: bool = True
    prior_texture: bool = True
    prior_shape: bool = True
    stage_semantic: bool = True
    stage_modulation: bool = True
    cross_attribute_attention: bool = True
    gate_modulated: bool = True
    gate_refined: bool = True
    gate_encoder: bool = True
    freeze_text_encoder: bool = False
    use_text_positional: bool = True

    def fingerprint(self) -> str:
        parts = [f"{f.name}={getattr(self, f.name)}" for f in fields(self)]
        return ";".join(parts)

    @property
    def gate_mask(self) -> tuple[bool, bool, bool]:
        return (self.gate_modulated, self.gate_refined, self.gate_encoder)

    @property
    def enabled_kinds(self) -> tuple[str, ...]:
        on = {"position": self.prior_position, "texture": self.prior_texture,
              "shape": self.prior_shape}
        return tuple(k for k in ATTRIBUTE_KINDS if on[k])


class SegmentationModel(nn.Module):
    """The full pipeline as one parameter-owning module."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        if not any(config.gate_mask):
            raise ConfigError("at least one gate branch must be enabled")
        rng = np.random.default_rng(seed)
        self.config = config
        grid = config.image_size // config.patch_size
        self.image_encoder = ImageEncoder(
            rng, config.image_size, config.patch_size, config.d_model,
            config.encoder_layers, config.encoder_heads)
        if config.stage_semantic:
            self.text_encoder = TextEncoder(
                rng, config.vocab_size, config.text_dim, config.text_layers,
                config.text_heads, max_len=max(config.attr_len, 8),
                use_positional=config.use_text_positional)
            self.fusion = CrossAttributeFusion(rng, config.text_dim,
                                               heads=config.text_heads)
        elif config.stage_modulation:
            # learned stand-in tokens keep the operators text-independent
            for kind in config.enabled_kinds:
                setattr(self, f"placeholder_{kind}",
                        nn.param(rng, (config.attr_len, config.text_dim)))
        if config.stage_modulation or config.stage_semantic:
            self.modulation = ModulationParams(
                rng, config.d_model, grid, grid, config.attr_len,
                config.text_dim, deform_kernel=config.deform_kernel,
                attn_heads=config.channel_attn_heads,
                prior_source=config.prior_source)
        self.gate = GateParams(rng, config.d_model, config.gate_mask)
        self.prompt_encoder = PromptEncoder(rng, config.d_model)
        self.decoder = MaskDecoder(
            rng, config.d_model, config.n_classes, grid, config.image_size,
            layers=config.decoder_layers, heads=config.decoder_heads)

    # -- parameter views --------------------------------------------------
    def trainable_params(self) -> dict[str, Tensor]:
        params = self.named_params()
        if self.config.freeze_text_encoder:
            params = {k: v for k, v in params.items()
                      if not k.startswith("text_encoder.")}
        return params

    # -- forward -----------------------------------------------------------
    def forward_batch(self, images: np.ndarray,
                      token_ids: dict[str, np.ndarray] | None = None,
                      prompts: list[Prompt] | None = None) -> dict:
        """Raw [0,255] images (B,H,W) + per-kind token ids (B,L) -> outputs.

        Returns a dict with the intermediate feature maps, gate weights, the
        per-class logits (B,n_classes,H,W), and the prompted-target logits
        (B,H,W).
        """
        cfg = self.config
        B = images.shape[0]
        feats = self.image_encoder.encode_batch(normalize_pixels(images))

        tokens: dict[str, Tensor] = {}
        prior: Tensor | None = None
        fused_tokens: Tensor | None = None
        enabled = cfg.enabled_kinds
        if cfg.stage_semantic:
            if enabled and token_ids is None:
                raise ConfigError("semantic stage enabled but no attribute tokens given")
            parts = []
            for kind in enabled:
                emb = self.text_encoder.encode_ids(np.asarray(token_ids[kind]))
                tokens[kind] = emb
                parts.append((kind, emb))
            if parts:
                prior, fused_tokens = self.fusion.fuse_batch(
                    parts, cross_attention=cfg.cross_attribute_attention)
            else:
                prior = Tensor(np.zeros((B, cfg.text_dim)))
                fused_tokens = Tensor(np.zeros((B, 1, cfg.text_dim)))
        elif cfg.stage_modulation:
            tile = Tensor(np.zeros((B, 1, 1)))
            for kind in enabled:
                ph = getattr(self, f"placeholder_{kind}")
                tokens[kind] = ph.reshape(1, cfg.attr_len, cfg.text_dim) + tile

        toggles = PriorToggles(
            position=cfg.stage_modulation and cfg.prior_position,
            texture=cfg.stage_modulation and cfg.prior_texture,
            shape=cfg.stage_modulation and cfg.prior_shape)
        if cfg.stage_modulation or cfg.stage_semantic:
            f_fused, f_sem = modulation_stage_batch(
                feats, tokens, prior, toggles, self.modulation,
                apply_channel_attention=cfg.stage_semantic,
                fused_tokens=fused_tokens)
        else:
            f_fused, f_sem = feats, feats

        f_out, gates = gated_fuse_batch((f_fused, f_sem, feats), self.gate)

        prompt_tokens = None
        if prompts is not None:
            prompt_tokens = self.prompt_encoder.encode_batch(
                prompts, cfg.image_size, cfg.image_size)
        cls_logits, target_logits = self.decoder.decode_batch(f_out, prompt_tokens)
        return {
            "f_sam": feats,
            "f_fused": f_fused,
            "f_sem": f_sem,
            "f_out": f_out,
            "gates": gates,
            "cls_logits": cls_logits,
            "target_logits": target_logits,
        }


def build_model(config: ModelConfig, seed: int = 0) -> SegmentationModel:
    return SegmentationModel(config, seed=seed)
