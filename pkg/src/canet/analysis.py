"""Analytic parameter and FLOP accounting, plus the inference benchmark.

The counter walks an instantiated network and mirrors its forward
dataflow, emitting one row per layer with closed-form parameter and
multiply-accumulate counts (never by executing the network and never by
reading tensor sizes, so tests can cross-check the formulas against the
actual weight allocations). Conventions:

* conv MACs = kh·kw·(Cin/groups)·Cout·Hout·Wout; transposed conv counts
  the adjoint convolution's MACs;
* batch norm, activations, pooling, elementwise gates/adds and the final
  upsampling count one op per element processed;
* the `convention` flag renders FLOPs as MACs (``mac``, default) or as
  2×MACs (``mul_add_2x``); the per-element ops are added either way.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .backbones import Backbone, BasicBlock, InvertedResidual, _MaxPool
from .errors import ConfigError
from .fca import FCA, ChannelAttention, SpatialAttention
from .layers import BatchNorm2d, Conv2d, ConvBNAct, ConvTranspose2d, DeconvBNAct, DSConv, Linear
from .model import CANet, CanetConfig, ContextBranch, SpatialBranch
from .tensor import Tensor

CONVENTIONS = ("mac", "mul_add_2x")


@dataclass
class CostRow:
    name: str
    kind: str
    params: int
    macs: int
    elem: int  # one-op-per-element work (BN, activations, pooling, gates)
    out_shape: Tuple[int, int, int]  # (C, H, W)

    def flops(self, convention: str) -> int:
        mult = 1 if convention == "mac" else 2
        return mult * self.macs + self.elem


@dataclass
class CostReport:
    rows: List[CostRow] = field(default_factory=list)
    convention: str = "mac"
    input_size: Tuple[int, int] = (512, 1024)

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_flops(self) -> int:
        return sum(r.flops(self.convention) for r in self.rows)

    @property
    def total_macs(self) -> int:
        return sum(r.macs for r in self.rows)

    def render(self) -> str:
        name_w = max(len(r.name) for r in self.rows) + 2
        lines = [
            f"{'layer':<{name_w}}{'kind':<12}{'params':>12}{'flops':>16}  out"
        ]
        for r in self.rows:
            c, h, w = r.out_shape
            lines.append(
                f"{r.name:<{name_w}}{r.kind:<12}{r.params:>12}{r.flops(self.convention):>16}"
                f"  {c}×{h}×{w}"
            )
        h, w = self.input_size
        lines.append(
            f"total at {h}×{w} ({self.convention}): params={self.total_params:,} "
            f"({self.total_params/1e6:.2f}M), flops={self.total_flops:,} "
            f"({self.total_flops/1e9:.2f}G)"
        )
        return "\n".join(lines)

    def render_machine(self) -> str:
        lines = [
            f"{r.name}\t{r.kind}\t{r.params}\t{r.flops(self.convention)}\t"
            f"{r.out_shape[0]}x{r.out_shape[1]}x{r.out_shape[2]}"
            for r in self.rows
        ]
        lines.append(f"TOTAL\t-\t{self.total_params}\t{self.total_flops}\t-")
        return "\n".join(lines)


def _conv_out(h: int, w: int, m: Conv2d) -> Tuple[int, int]:
    return (
        (h + 2 * m.padding[0] - m.kernel[0]) // m.stride[0] + 1,
        (w + 2 * m.padding[1] - m.kernel[1]) // m.stride[1] + 1,
    )


class _Walker:
    def __init__(self):
        self.rows: List[CostRow] = []

    def add(self, name, kind, params, macs, elem, out):
        self.rows.append(CostRow(name, kind, int(params), int(macs), int(elem), out))
        return out

    # -- leaves -------------------------------------------------------------

    def conv(self, name: str, m: Conv2d, chw):
        c, h, w = chw
        ho, wo = _conv_out(h, w, m)
        kh, kw = m.kernel
        weights = kh * kw * (m.in_channels // m.groups) * m.out_channels
        params = weights + (m.out_channels if m.bias is not None else 0)
        macs = kh * kw * (m.in_channels // m.groups) * m.out_channels * ho * wo
        elem = m.out_channels * ho * wo if m.bias is not None else 0
        return self.add(name, "conv", params, macs, elem, (m.out_channels, ho, wo))

    def tconv(self, name: str, m: ConvTranspose2d, chw):
        c, h, w = chw
        kh, kw = m.kernel
        ho = (h - 1) * m.stride[0] - 2 * m.padding[0] + kh
        wo = (w - 1) * m.stride[1] - 2 * m.padding[1] + kw
        params = kh * kw * m.in_channels * m.out_channels + (
            m.out_channels if m.bias is not None else 0
        )
        macs = kh * kw * m.in_channels * m.out_channels * h * w  # adjoint conv's MACs
        elem = m.out_channels * ho * wo if m.bias is not None else 0
        return self.add(name, "tconv", params, macs, elem, (m.out_channels, ho, wo))

    def bn(self, name: str, m: BatchNorm2d, chw):
        c, h, w = chw
        return self.add(name, "bn", 2 * c, 0, c * h * w, chw)

    def act(self, name: str, kind: str, chw):
        c, h, w = chw
        return self.add(name, kind, 0, 0, c * h * w, chw)

    def ew(self, name: str, kind: str, chw):
        c, h, w = chw
        return self.add(name, kind, 0, 0, c * h * w, chw)

    def fc(self, name: str, m: Linear, n_vectors: int = 1):
        params = m.in_features * m.out_features + (
            m.out_features if m.bias is not None else 0
        )
        macs = m.in_features * m.out_features * n_vectors
        elem = m.out_features * n_vectors if m.bias is not None else 0
        return self.add(name, "fc", params, macs, elem, (m.out_features, 1, 1))

    # -- composites -----------------------------------------------------------

    def conv_bn_act(self, name: str, m: ConvBNAct, chw):
        chw = self.conv(f"{name}.conv", m.conv, chw)
        chw = self.bn(f"{name}.bn", m.bn, chw)
        if m.act:
            chw = self.act(f"{name}.{m.act}", m.act, chw)
        return chw

    def dsconv(self, name: str, m: DSConv, chw):
        chw = self.conv(f"{name}.dw", m.dw, chw)
        chw = self.bn(f"{name}.dw_bn", m.dw_bn, chw)
        chw = self.act(f"{name}.relu1", "relu", chw)
        chw = self.conv(f"{name}.pw", m.pw, chw)
        chw = self.bn(f"{name}.pw_bn", m.pw_bn, chw)
        return self.act(f"{name}.relu2", "relu", chw)

    def deconv_bn_act(self, name: str, m: DeconvBNAct, chw):
        chw = self.tconv(f"{name}.deconv", m.deconv, chw)
        chw = self.bn(f"{name}.bn", m.bn, chw)
        return self.act(f"{name}.relu", "relu", chw)

    def inverted_residual(self, name: str, m: InvertedResidual, chw):
        out = chw
        if m.expand:
            out = self.conv_bn_act(f"{name}.expand", m.expand, out)
        out = self.conv_bn_act(f"{name}.dw", m.dw, out)
        out = self.conv_bn_act(f"{name}.project", m.project, out)
        if m.use_residual:
            out = self.ew(f"{name}.residual", "add", out)
        return out

    def basic_block(self, name: str, m: BasicBlock, chw):
        out = self.conv_bn_act(f"{name}.conv1", m.conv1, chw)
        out = self.conv(f"{name}.conv2", m.conv2, out)
        out = self.bn(f"{name}.bn2", m.bn2, out)
        if m.down:
            self.conv(f"{name}.down", m.down, chw)
            self.bn(f"{name}.down_bn", m.down_bn, out)
        out = self.ew(f"{name}.residual", "add", out)
        return self.act(f"{name}.relu", "relu", out)

    def max_pool(self, name: str, m: _MaxPool, chw):
        c, h, w = chw
        ho = (h + 2 * m.padding[0] - m.kernel[0]) // m.stride[0] + 1
        wo = (w + 2 * m.padding[1] - m.kernel[1]) // m.stride[1] + 1
        elem = c * ho * wo * m.kernel[0] * m.kernel[1]
        return self.add(name, "maxpool", 0, 0, elem, (c, ho, wo))

    def layer(self, name: str, m, chw):
        if isinstance(m, ConvBNAct):
            return self.conv_bn_act(name, m, chw)
        if isinstance(m, InvertedResidual):
            return self.inverted_residual(name, m, chw)
        if isinstance(m, BasicBlock):
            return self.basic_block(name, m, chw)
        if isinstance(m, _MaxPool):
            return self.max_pool(name, m, chw)
        raise ConfigError(f"no cost rule for layer type {type(m).__name__}")

    def backbone(self, name: str, m: Backbone, chw):
        stage_out = {}
        for spec, stage in zip(m.spec.stages, m.stages):
            for j, layer in enumerate(stage):
                chw = self.layer(f"{name}.stage{spec.stride}.{j}", layer, chw)
            stage_out[spec.stride] = chw
        return stage_out

    def spatial_branch(self, name: str, m: SpatialBranch, chw):
        chw = self.conv_bn_act(f"{name}.layer1", m.layer1, chw)
        chw = self.dsconv(f"{name}.layer2", m.layer2, chw)
        return self.dsconv(f"{name}.layer3", m.layer3, chw)

    def context_branch(self, name: str, m: ContextBranch, chw):
        stage_out = self.backbone(f"{name}.backbone", m.backbone, chw)
        chw = self.deconv_bn_act(f"{name}.deconv1", m.deconv1, stage_out[32])
        c16 = stage_out[16]
        chw = (chw[0] + c16[0], chw[1], chw[2])
        return self.deconv_bn_act(f"{name}.deconv2", m.deconv2, chw)

    def spatial_attention(self, name: str, m: SpatialAttention, gated_chw, spatial_chw):
        chw = self.conv(f"{name}.conv", m.conv, spatial_chw)
        chw = self.bn(f"{name}.bn", m.bn, chw)
        self.act(f"{name}.sigmoid", "sigmoid", chw)
        return self.ew(f"{name}.mul", "mul", gated_chw)

    def channel_attention(self, name: str, m: ChannelAttention, gated_chw, context_chw):
        c, h, w = context_chw
        self.add(f"{name}.avg_pool", "pool", 0, 0, c * h * w, (c, 1, 1))
        self.add(f"{name}.max_pool", "pool", 0, 0, c * h * w, (c, 1, 1))
        fc_out = self.fc(f"{name}.fc", m.fc, n_vectors=2)
        self.ew(f"{name}.add_pools", "add", fc_out)
        self.act(f"{name}.sigmoid", "sigmoid", fc_out)
        out = self.ew(f"{name}.mul", "mul", gated_chw)
        return self.ew(f"{name}.residual", "add", out)

    def fca(self, name: str, m: FCA, spatial_chw, context_chw):
        variant = m.config.variant
        cat = (spatial_chw[0] + context_chw[0], spatial_chw[1], spatial_chw[2])
        if variant == "none":
            return self.add(f"{name}.concat", "concat", 0, 0, 0, cat)
        self.add(f"{name}.concat", "concat", 0, 0, 0, cat)
        fused = self.conv_bn_act(f"{name}.fuse", m.fuse, cat)
        if variant == "spatial_only":
            out = self.spatial_attention(f"{name}.sa", m.sa, fused, spatial_chw)
        elif variant == "spatial_then_channel":
            out = self.spatial_attention(f"{name}.sa", m.sa, fused, spatial_chw)
            out = self.channel_attention(f"{name}.ca", m.ca, out, context_chw)
        elif variant == "channel_then_spatial":
            out = self.channel_attention(f"{name}.ca", m.ca, fused, context_chw)
            out = self.spatial_attention(f"{name}.sa", m.sa, out, spatial_chw)
        elif variant == "parallel":
            self.spatial_attention(f"{name}.sa", m.sa, fused, spatial_chw)
            self.channel_attention(f"{name}.ca", m.ca, fused, context_chw)
            out = self.ew(f"{name}.combine", "add", fused)
        else:  # conv_only
            out = fused
        return self.conv_bn_act(f"{name}.final", m.final, out)

    def canet(self, m: CANet, input_size):
        h, w = input_size
        chw = (3, h, w)
        spatial = self.spatial_branch("spatial", m.spatial, chw)
        context = self.context_branch("context", m.context, chw)
        logits = self.conv("classifier", m.classifier, self.fca("fca", m.fca, spatial, context))
        c, h8, w8 = logits
        return self.add("upsample8", "bilinear", 0, 0, c * h8 * 8 * w8 * 8, (c, h8 * 8, w8 * 8))


def cost_report(
    config: CanetConfig,
    input_size: Optional[Tuple[int, int]] = None,
    convention: str = "mac",
    model: Optional[CANet] = None,
) -> CostReport:
    """Per-layer cost rows for a network configuration."""
    if convention not in CONVENTIONS:
        raise ConfigError(f"unknown FLOP convention {convention!r}; choose from {CONVENTIONS}")
    input_size = tuple(input_size or config.input_size)
    if input_size[0] % 32 or input_size[1] % 32:
        raise ConfigError(
            f"input size {input_size[0]}×{input_size[1]} must be divisible by 32"
        )
    model = model or CANet(config)
    walker = _Walker()
    walker.canet(model, input_size)
    return CostReport(rows=walker.rows, convention=convention, input_size=input_size)


def count_params(config: CanetConfig, model: Optional[CANet] = None) -> CostReport:
    """Parameter counts per layer (the FLOPs columns use config.input_size)."""
    return cost_report(config, model=model)


def count_flops(
    config: CanetConfig,
    input_size: Tuple[int, int],
    convention: str = "mac",
    model: Optional[CANet] = None,
) -> CostReport:
    """FLOP counts at an input size under the given convention."""
    return cost_report(config, input_size=input_size, convention=convention, model=model)


# ---------------------------------------------------------------------------
# benchmark


@dataclass
class BenchReport:
    mean_s: float
    min_s: float
    stddev_s: float
    iterations: int
    input_size: Tuple[int, int]

    @property
    def fps(self) -> float:
        return 1.0 / self.mean_s

    def render(self) -> str:
        h, w = self.input_size
        return (
            f"{self.iterations} evaluations at {h}×{w}: "
            f"mean {self.mean_s*1e3:.2f} ms, min {self.min_s*1e3:.2f} ms, "
            f"stddev {self.stddev_s*1e3:.2f} ms, fps {self.fps:.2f}"
        )


def bench_inference(
    config: CanetConfig,
    input_size: Optional[Tuple[int, int]] = None,
    iterations: int = 100,
    warmup: int = 1,
    seed: int = 0,
) -> BenchReport:
    """Time eval-mode forward passes of a randomly initialized network.

    Warmup runs are excluded from the statistics; stddev is 0 for a
    single iteration by construction (population convention)."""
    if iterations < 1:
        raise ConfigError(f"iterations must be >= 1, got {iterations}")
    input_size = tuple(input_size or config.input_size)
    model = CANet(config, seed=seed).eval()
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((1, 3) + input_size, dtype=np.float32))
    for _ in range(warmup):
        model(x)
    times = []
    for _ in range(iterations):
        t0 = time.perf_counter()
        model(x)
        times.append(time.perf_counter() - t0)
    arr = np.asarray(times)
    return BenchReport(
        mean_s=float(arr.mean()),
        min_s=float(arr.min()),
        stddev_s=float(arr.std()),
        iterations=iterations,
        input_size=input_size,
    )
