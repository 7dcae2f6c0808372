"""Gated fusion of the modulated, refined, and raw encoder features.

Enabled branches are concatenated channel-wise, a 1x1 convolution produces
one logit plane per enabled branch, and a per-pixel softmax turns those into
convex combination weights shared across channels. Disabled branches carry
gate weight zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .errors import ConfigError, DimensionError
from .modulation import FeatureMap

BRANCH_NAMES = ("modulated", "refined", "encoder")  # F_fused, F_sem, F_sam order


@dataclass
class GateWeights:
    """(3, H, W) gate planes; enabled branches sum to 1 per pixel."""

    data: np.ndarray
    branch_mask: tuple[bool, bool, bool]


class GateParams(nn.Module):
    """1x1 convolution over the concatenation of the enabled branches."""

    def __init__(self, rng: np.random.Generator, channels: int,
                 branch_mask: tuple[bool, bool, bool] = (True, True, True)):
        if not any(branch_mask):
            raise ConfigError("at least one fusion branch must be enabled")
        self.branch_mask = tuple(bool(b) for b in branch_mask)
        self.n_enabled = sum(self.branch_mask)
        self.channels = channels
        self.proj = nn.Linear(rng, self.n_enabled * channels, self.n_enabled)


def gated_fuse_batch(branches: tuple[Tensor, Tensor, Tensor],
                     params: GateParams) -> tuple[Tensor, Tensor]:
    """Fuse (B,C,H,W) branches; returns (output, gates (B,n_enabled,H,W)).

    Branch order is (modulated, refined, encoder). Only branches enabled in
    ``params.branch_mask`` are read.
    """
    mask = params.branch_mask
    active = [b for b, on in zip(branches, mask) if on]
    shapes = {tuple(b.shape) for b in active}
    if len(shapes) != 1:
        raise DimensionError(f"branch shapes differ: {sorted(shapes)}")
    B, C, H, W = active[0].shape
    if C != params.channels:
        raise DimensionError(f"branches have {C} channels, params expect {params.channels}")
    n = len(active)
    stacked = ad.concat(active, axis=1) if n > 1 else active[0]
    # 1x1 conv == per-pixel linear over channels
    pix = stacked.reshape(B, n * C, H * W).transpose(0, 2, 1)
    logits = params.proj(pix)                       # (B, HW, n)
    gates = ad.softmax(logits, axis=-1)
    gates = gates.transpose(0, 2, 1).reshape(B, n, H, W)
    out = None
    for i, b in enumerate(active):
        term = b * gates[:, i:i + 1]
        out = term if out is None else out + term
    return out, gates


def gated_fuse(f_fused: FeatureMap, f_sem: FeatureMap, f_sam: FeatureMap,
               params: GateParams) -> tuple[FeatureMap, GateWeights]:
    """Single-sample fusion; returns the fused map and full 3-plane gates
    (disabled branches as zero planes)."""
    branches = []
    for fm in (f_fused, f_sem, f_sam):
        branches.append(fm.data.reshape(1, *fm.data.shape))
    out, gates = gated_fuse_batch(tuple(branches), params)
    C, H, W = f_sam.shape
    full = np.zeros((3, H, W))
    j = 0
    for i, on in enumerate(params.branch_mask):
        if on:
            full[i] = gates.data[0, j]
            j += 1
    return (FeatureMap(out.reshape(C, H, W), "f_out"),
            GateWeights(full, params.branch_mask))
