"""Feature Cross Attention fusion of the two branch outputs.

The full module (variant `spatial_then_channel`) is: channel-concat the
branch features, fuse with a 3×3 conv + BN + ReLU, gate every pixel by a
single-channel spatial attention map computed from the spatial-branch
features, gate every channel by a sigmoid vector computed from globally
pooled context-branch features (with a residual add of the fused
features), and finish with another 3×3 conv + BN + ReLU.

The other variants ablate parts of that pipeline:

======================  =====================================================
none                    plain channel concatenation, nothing else
conv_only               two consecutive 3×3 conv blocks (fusion + final)
spatial_only            fusion conv → spatial gate → final conv
parallel                fused⊙sa + fused⊙ca + fused, then final conv
channel_then_spatial    (fused⊙ca + fused) ⊙ sa, then final conv
spatial_then_channel    (fused⊙sa) ⊙ ca + fused, then final conv
======================  =====================================================
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import ops
from .errors import ConfigError, ContractError, ShapeError
from .layers import BatchNorm2d, Conv2d, ConvBNAct, Linear, Module
from .tensor import Tensor

VARIANTS = (
    "none",
    "conv_only",
    "spatial_only",
    "parallel",
    "channel_then_spatial",
    "spatial_then_channel",
)


@dataclass(frozen=True)
class FcaConfig:
    """Fusion-module configuration: fused width and active attention blocks."""

    fusion_channels: int = 256
    variant: str = "spatial_then_channel"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown fusion variant {self.variant!r}; choose from {VARIANTS}")
        if self.fusion_channels < 1:
            raise ConfigError(f"fusion_channels must be positive, got {self.fusion_channels}")


class SpatialAttention(Module):
    """Single-channel sigmoid gate computed from the spatial-branch features."""

    def __init__(self, spatial_channels: int, rng: Optional[np.random.Generator] = None):
        self.conv = Conv2d(spatial_channels, 1, 3, 1, 1, rng=rng)
        self.bn = BatchNorm2d(1)

    def attention_map(self, spatial_feats: Tensor) -> Tensor:
        return ops.sigmoid(self.bn(self.conv(spatial_feats)))

    def forward(self, x: Tensor, spatial_feats: Tensor) -> Tensor:
        if x.shape[0] != spatial_feats.shape[0] or x.shape[2:] != spatial_feats.shape[2:]:
            raise ShapeError(
                f"spatial attention: gated features {x.shape} and spatial features "
                f"{spatial_feats.shape} disagree on N/H/W"
            )
        return ops.mul(x, self.attention_map(spatial_feats))


class ChannelAttention(Module):
    """Per-channel sigmoid gate from globally pooled context features.

    Average- and max-pooled context vectors pass through one shared
    fully connected layer; the gated input is summed with the fused
    features (the residual path).
    """

    def __init__(
        self,
        context_channels: int,
        gate_channels: int,
        rng: Optional[np.random.Generator] = None,
    ):
        self.fc = Linear(context_channels, gate_channels, bias=True, rng=rng)

    def attention_map(self, context_feats: Tensor) -> Tensor:
        n = context_feats.shape[0]
        v_avg = ops.reshape(ops.global_avg_pool(context_feats), (n, context_feats.shape[1]))
        v_max = ops.reshape(ops.global_max_pool(context_feats), (n, context_feats.shape[1]))
        gate = ops.sigmoid(ops.add(self.fc(v_avg), self.fc(v_max)))
        return ops.reshape(gate, (n, self.fc.out_features, 1, 1))

    def forward(self, x: Tensor, context_feats: Tensor, fused: Tensor) -> Tensor:
        if x.shape != fused.shape:
            raise ShapeError(f"channel attention: input {x.shape} != fused {fused.shape}")
        gate = self.attention_map(context_feats)
        if gate.shape[1] != x.shape[1]:
            raise ShapeError(
                f"channel attention: gate width {gate.shape[1]} != feature channels {x.shape[1]}"
            )
        return ops.add(ops.mul(x, gate), fused)


class FCA(Module):
    """Feature Cross Attention module over (spatial_feats, context_feats)."""

    def __init__(
        self,
        spatial_channels: int,
        context_channels: int,
        config: FcaConfig,
        rng: Optional[np.random.Generator] = None,
    ):
        self.spatial_channels = spatial_channels
        self.context_channels = context_channels
        self.config = config
        v = config.variant
        if v == "none":
            self.out_channels = spatial_channels + context_channels
            return
        self.out_channels = config.fusion_channels
        self.fuse = ConvBNAct(
            spatial_channels + context_channels, config.fusion_channels, 3, 1, 1, rng=rng
        )
        if v in ("spatial_only", "parallel", "channel_then_spatial", "spatial_then_channel"):
            self.sa = SpatialAttention(spatial_channels, rng=rng)
        if v in ("parallel", "channel_then_spatial", "spatial_then_channel"):
            self.ca = ChannelAttention(context_channels, config.fusion_channels, rng=rng)
        self.final = ConvBNAct(config.fusion_channels, config.fusion_channels, 3, 1, 1, rng=rng)

    def _check_inputs(self, spatial_feats: Tensor, context_feats: Tensor) -> None:
        if spatial_feats.shape[2:] != context_feats.shape[2:]:
            raise ShapeError(
                f"fusion inputs disagree spatially: {spatial_feats.shape} vs "
                f"{context_feats.shape} (inputs are not resized implicitly)"
            )
        if spatial_feats.shape[0] != context_feats.shape[0]:
            raise ShapeError(
                f"fusion inputs disagree on batch: {spatial_feats.shape} vs {context_feats.shape}"
            )

    def fuse_concat(self, spatial_feats: Tensor, context_feats: Tensor) -> Tensor:
        """Concat → 3×3 conv → BN → ReLU, producing the fused features."""
        if self.config.variant == "none":
            raise ContractError("variant 'none' has no fusion convolution")
        self._check_inputs(spatial_feats, context_feats)
        return self.fuse(ops.concat_channels([spatial_feats, context_feats]))

    def attend(self, fused: Tensor, spatial_feats: Tensor, context_feats: Tensor) -> Tensor:
        """Apply the variant's attention blocks to the fused features
        (everything between the two fusion convolutions)."""
        v = self.config.variant
        if v in ("none", "conv_only"):
            return fused
        if v == "spatial_only":
            return self.sa(fused, spatial_feats)
        if v == "spatial_then_channel":
            return self.ca(self.sa(fused, spatial_feats), context_feats, fused)
        if v == "channel_then_spatial":
            return self.sa(self.ca(fused, context_feats, fused), spatial_feats)
        # parallel: fused⊙sa + (fused⊙ca + fused)
        return ops.add(self.sa(fused, spatial_feats), self.ca(fused, context_feats, fused))

    def forward(self, spatial_feats: Tensor, context_feats: Tensor) -> Tensor:
        if self.config.variant == "none":
            self._check_inputs(spatial_feats, context_feats)
            return ops.concat_channels([spatial_feats, context_feats])
        fused = self.fuse_concat(spatial_feats, context_feats)
        return self.final(self.attend(fused, spatial_feats, context_feats))
