"""The full segmentation network: two branches, fusion, pixel classifier.

The spatial branch is three stride-2 layers (standard conv, then two
depthwise-separable convs; widths 64/128/256), so its output sits at 1/8
of the input resolution. The context branch runs a backbone down to
stride 32, then fuses the last two stages with two 2×2/stride-2
transposed convolutions back up to stride 8. Both outputs feed the
feature-cross-attention module, a 1×1 classifier maps to class logits,
and bilinear ×8 upsampling restores full resolution.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple, Union

import numpy as np

from . import fileio, ops
from .backbones import Backbone, BackboneSpec, build_backbone
from .errors import ConfigError, FormatError, ShapeError
from .fca import FCA, FcaConfig
from .layers import ConvBNAct, Conv2d, DeconvBNAct, DSConv, Module
from .tensor import Tensor

SPATIAL_CHANNELS = (64, 128, 256)


class SpatialBranch(Module):
    """Three stride-2 layers: 3→64 standard conv, 64→128 and 128→256
    depthwise-separable convs, each with batch norm and ReLU."""

    def __init__(self, rng: Optional[np.random.Generator] = None):
        c1, c2, c3 = SPATIAL_CHANNELS
        self.layer1 = ConvBNAct(3, c1, 3, 2, 1, rng=rng)
        self.layer2 = DSConv(c1, c2, 2, rng=rng)
        self.layer3 = DSConv(c2, c3, 2, rng=rng)
        self.out_channels = c3

    def forward(self, image: Tensor) -> Tensor:
        n, c, h, w = image.shape
        if h % 8 or w % 8:
            raise ShapeError(f"spatial branch needs extents divisible by 8, got {h}×{w}")
        return self.layer3(self.layer2(self.layer1(image)))


class ContextBranch(Module):
    """Backbone to stride 32, then two ×2 deconvolution fusions to stride 8.

    deconv1 lifts the stride-32 features to stride 16; they are
    concatenated with the stride-16 stage output and deconv2 lifts the
    result to stride 8. Both deconvolutions are 2×2, stride 2, followed
    by batch norm and ReLU, and output `deconv_channels` channels.
    """

    def __init__(
        self,
        spec: BackboneSpec,
        deconv_channels: int,
        rng: Optional[np.random.Generator] = None,
    ):
        c16 = spec.stage_by_stride(16).channels
        c32 = spec.stage_by_stride(32).channels
        self.backbone = Backbone(spec, rng=rng)
        self.deconv1 = DeconvBNAct(c32, deconv_channels, rng=rng)
        self.deconv2 = DeconvBNAct(deconv_channels + c16, deconv_channels, rng=rng)
        self.out_channels = deconv_channels

    def forward(self, image: Tensor) -> Tensor:
        n, c, h, w = image.shape
        if h % 32 or w % 32:
            raise ShapeError(f"context branch needs extents divisible by 32, got {h}×{w}")
        feats = self.backbone(image)
        y = self.deconv1(feats[32])
        y = ops.concat_channels([y, feats[16]])
        return self.deconv2(y)


@dataclass
class CanetConfig:
    """Architecture configuration for one network instance."""

    backbone: Union[str, BackboneSpec] = "mobilenet_v2"
    num_classes: int = 19
    deconv_channels: int = 256
    fca: FcaConfig = field(default_factory=FcaConfig)
    input_size: Tuple[int, int] = (512, 1024)  # (H, W), the default analysis size

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.deconv_channels < 1:
            raise ConfigError(f"deconv_channels must be positive, got {self.deconv_channels}")
        h, w = self.input_size
        if h % 32 or w % 32:
            raise ConfigError(
                f"input_size {h}×{w} must be divisible by 32 (the deepest stage stride)"
            )

    def backbone_spec(self) -> BackboneSpec:
        return self.backbone if isinstance(self.backbone, BackboneSpec) else build_backbone(self.backbone)


class CANet(Module):
    """Two-branch segmentation network with feature cross attention."""

    def __init__(self, config: CanetConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        spec = config.backbone_spec()
        self.config = config
        self.spatial = SpatialBranch(rng=rng)
        self.context = ContextBranch(spec, config.deconv_channels, rng=rng)
        self.fca = FCA(
            self.spatial.out_channels, self.context.out_channels, config.fca, rng=rng
        )
        self.classifier = Conv2d(self.fca.out_channels, config.num_classes, 1, bias=True, rng=rng)

    def forward(self, image: Tensor) -> Tensor:
        """image N×3×H×W → logits N×num_classes×H×W (no softmax)."""
        if image.data.ndim != 4 or image.shape[1] != 3:
            raise ShapeError(f"expected N×3×H×W input, got {image.shape}")
        n, c, h, w = image.shape
        if h % 32 or w % 32:
            raise ShapeError(f"input extents must be divisible by 32, got {h}×{w}")
        spatial_feats = self.spatial(image)
        context_feats = self.context(image)
        fused = self.fca(spatial_feats, context_feats)
        return ops.bilinear_upsample(self.classifier(fused), 8)

    def predict(self, image: Tensor) -> np.ndarray:
        """Argmax label map N×H×W from the forward logits."""
        return self.forward(image).data.argmax(axis=1)

    # -- checkpointing ------------------------------------------------------

    def named_state(self):
        """All persistent tensors: parameters then batch-norm buffers."""
        for name, p in self.named_parameters():
            yield name, p.data
        for name, b in self.named_buffers():
            yield name, b

    def save_weights(self, path: str) -> None:
        fileio.save_canw(path, self.named_state())

    def load_weights(self, path: str) -> None:
        loaded = fileio.load_canw(path)
        own = dict(self.named_state())
        missing = [n for n in own if n not in loaded]
        unknown = [n for n in loaded if n not in own]
        if unknown:
            raise FormatError(f"{path}: unknown tensor name {unknown[0]!r}")
        if missing:
            raise FormatError(f"{path}: missing tensor {missing[0]!r}")
        for name, p in self.named_parameters():
            value = loaded[name]
            if value.shape != p.data.shape:
                raise FormatError(
                    f"{path}: tensor {name!r} has shape {value.shape}, model wants {p.data.shape}"
                )
            p.data[...] = value
        for name, b in self.named_buffers():
            value = loaded[name]
            if value.shape != b.shape:
                raise FormatError(
                    f"{path}: tensor {name!r} has shape {value.shape}, model wants {b.shape}"
                )
            b[...] = value
