"""Context-branch backbones described as stage tables and built into modules.

A backbone is an ordered list of stages; each stage records its cumulative
output stride and channel width plus the layer descriptors to build. The
context branch consumes the stride-16 and stride-32 stage outputs. Three
backbones are provided:

* ``tiny`` — five single-conv stages (8, 16, 24, 32, 48 channels), the
  desk-scale stand-in used for tests and the synthetic task;
* ``mobilenet_v2`` — the standard inverted-residual table with the final
  1×1→1280 convolution discarded (stride-16 width 96, stride-32 width 320);
* ``resnet18`` — the standard basic-block table without the classifier
  head (stride-16 width 256, stride-32 width 512).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from . import ops
from .errors import ConfigError
from .layers import BatchNorm2d, Conv2d, ConvBNAct, Module
from .tensor import Tensor

# Layer descriptors: ("conv", cin, cout, k, s, p, act) | ("maxpool", k, s, p)
#                  | ("ir", cin, cout, expand, s)      | ("basic", cin, cout, s)


@dataclass(frozen=True)
class StageSpec:
    stride: int  # cumulative output stride of this stage
    channels: int  # output channel width of this stage
    layers: Tuple[tuple, ...]


@dataclass(frozen=True)
class BackboneSpec:
    name: str
    stages: Tuple[StageSpec, ...]
    pretrained: bool = False

    def stage_by_stride(self, stride: int) -> StageSpec:
        for s in self.stages:
            if s.stride == stride:
                return s
        raise ConfigError(f"backbone {self.name!r} has no stride-{stride} stage")


def _tiny_spec() -> BackboneSpec:
    channels = (8, 16, 24, 32, 48)
    stages, cin = [], 3
    for i, c in enumerate(channels):
        stages.append(StageSpec(2 ** (i + 1), c, (("conv", cin, c, 3, 2, 1, "relu"),)))
        cin = c
    return BackboneSpec("tiny", tuple(stages))


def _mobilenet_v2_spec() -> BackboneSpec:
    # Inverted-residual table: (expand t, channels c, repeats n, first stride s).
    table = [
        (1, 16, 1, 1),
        (6, 24, 2, 2),
        (6, 32, 3, 2),
        (6, 64, 4, 2),
        (6, 96, 3, 1),
        (6, 160, 3, 2),
        (6, 320, 1, 1),
    ]
    stages = []
    layers = [("conv", 3, 32, 3, 2, 1, "relu6")]
    stride, cin = 2, 32
    for t, c, n, s in table:
        for i in range(n):
            step = s if i == 0 else 1
            if step == 2 and layers:
                stages.append(StageSpec(stride, cin, tuple(layers)))
                layers = []
                stride *= 2
            layers.append(("ir", cin, c, t, step))
            cin = c
    stages.append(StageSpec(stride, cin, tuple(layers)))
    return BackboneSpec("mobilenet_v2", tuple(stages))


def _resnet18_spec() -> BackboneSpec:
    stages = [
        StageSpec(2, 64, (("conv", 3, 64, 7, 2, 3, "relu"),)),
        StageSpec(4, 64, (("maxpool", 3, 2, 1), ("basic", 64, 64, 1), ("basic", 64, 64, 1))),
        StageSpec(8, 128, (("basic", 64, 128, 2), ("basic", 128, 128, 1))),
        StageSpec(16, 256, (("basic", 128, 256, 2), ("basic", 256, 256, 1))),
        StageSpec(32, 512, (("basic", 256, 512, 2), ("basic", 512, 512, 1))),
    ]
    return BackboneSpec("resnet18", tuple(stages))


_BUILDERS = {
    "tiny": _tiny_spec,
    "mobilenet_v2": _mobilenet_v2_spec,
    "resnet18": _resnet18_spec,
}


def build_backbone(name: str) -> BackboneSpec:
    """Return the stage table for a backbone by name."""
    try:
        spec = _BUILDERS[name]()
    except KeyError:
        raise ConfigError(
            f"unknown backbone {name!r}; available: {', '.join(sorted(_BUILDERS))}"
        ) from None
    strides = [s.stride for s in spec.stages]
    assert strides == sorted(strides) and strides[-1] == 32, spec
    return spec


class InvertedResidual(Module):
    """MobileNetV2 block: 1×1 expand (ReLU6) → 3×3 depthwise (ReLU6) →
    1×1 linear projection, with a residual add when shapes allow."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        expand: int,
        stride: int,
        rng: Optional[np.random.Generator] = None,
    ):
        hidden = in_channels * expand
        self.use_residual = stride == 1 and in_channels == out_channels
        self.expand = (
            ConvBNAct(in_channels, hidden, 1, act="relu6", rng=rng) if expand != 1 else None
        )
        self.dw = ConvBNAct(hidden, hidden, 3, stride, 1, groups=hidden, act="relu6", rng=rng)
        self.project = ConvBNAct(hidden, out_channels, 1, act=None, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        y = self.expand(x) if self.expand else x
        y = self.project(self.dw(y))
        return ops.add(y, x) if self.use_residual else y


class BasicBlock(Module):
    """ResNet basic block: two 3×3 convs with a (possibly projected) shortcut."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        stride: int,
        rng: Optional[np.random.Generator] = None,
    ):
        self.conv1 = ConvBNAct(in_channels, out_channels, 3, stride, 1, rng=rng)
        self.conv2 = Conv2d(out_channels, out_channels, 3, 1, 1, rng=rng)
        self.bn2 = BatchNorm2d(out_channels)
        if stride != 1 or in_channels != out_channels:
            self.down = Conv2d(in_channels, out_channels, 1, stride, rng=rng)
            self.down_bn = BatchNorm2d(out_channels)
        else:
            self.down = None

    def forward(self, x: Tensor) -> Tensor:
        y = self.bn2(self.conv2(self.conv1(x)))
        shortcut = self.down_bn(self.down(x)) if self.down else x
        return ops.relu(ops.add(y, shortcut))


class _MaxPool(Module):
    def __init__(self, kernel: int, stride: int, padding: int):
        self.kernel = (kernel, kernel)
        self.stride = (stride, stride)
        self.padding = (padding, padding)

    def forward(self, x: Tensor) -> Tensor:
        return ops.max_pool2d(x, self.kernel, self.stride, self.padding)


def _build_layer(desc: tuple, rng) -> Module:
    kind = desc[0]
    if kind == "conv":
        _, cin, cout, k, s, p, act = desc
        return ConvBNAct(cin, cout, k, s, p, act=act, rng=rng)
    if kind == "maxpool":
        return _MaxPool(*desc[1:])
    if kind == "ir":
        return InvertedResidual(*desc[1:], rng=rng)
    if kind == "basic":
        return BasicBlock(*desc[1:], rng=rng)
    raise ConfigError(f"unknown layer descriptor {desc!r}")


class Backbone(Module):
    """Executable backbone; forward returns {stride: features} per stage."""

    def __init__(self, spec: BackboneSpec, rng: Optional[np.random.Generator] = None):
        self.spec = spec
        self.stages = [
            [_build_layer(d, rng) for d in stage.layers] for stage in spec.stages
        ]

    def _children(self):
        for i, stage in enumerate(self.stages):
            for j, layer in enumerate(stage):
                yield f"stage{self.spec.stages[i].stride}.{j}", layer

    def forward(self, x: Tensor) -> dict:
        outputs = {}
        for stage_spec, stage in zip(self.spec.stages, self.stages):
            for layer in stage:
                x = layer(x)
            outputs[stage_spec.stride] = x
        return outputs
