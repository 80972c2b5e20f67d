"""Module system and the basic layers built from the op set.

A Module discovers its parameters by walking instance attributes, so
hierarchical names come straight from attribute names: a Conv2d stored
as `self.dw` inside a block stored as `self.layer2` of a branch stored
as `self.spatial` yields `spatial.layer2.dw.weight`. Running statistics
(batch-norm buffers) are named the same way and travel with the weights
through checkpoints.
"""

from __future__ import annotations

from typing import Iterator, Optional, Tuple

import numpy as np

from . import ops
from .errors import ConfigError
from .ops import BatchNormState
from .tensor import DTYPE, Tensor


class Module:
    """Base class: parameter/buffer discovery, train/eval mode, call sugar."""

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _children(self) -> Iterator[Tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
        for name, child in self._children():
            yield from child.named_parameters(prefix + name + ".")

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        yield from ((prefix + n, b) for n, b in self._direct_buffers())
        for name, child in self._children():
            yield from child.named_buffers(prefix + name + ".")

    def _direct_buffers(self) -> Iterator[Tuple[str, np.ndarray]]:
        return iter(())

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self._children():
            yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            if isinstance(m, BatchNorm2d):
                m.state.mode = "train" if mode else "eval"
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())


def _pair(v) -> tuple:
    return (v, v) if isinstance(v, int) else tuple(v)


def _kaiming_uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(DTYPE)


class Conv2d(Module):
    """2-D cross-correlation layer; weight Cout×Cin/groups×kh×kw."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel,
        stride=1,
        padding=0,
        groups: int = 1,
        bias: bool = False,
        rng: Optional[np.random.Generator] = None,
    ):
        if in_channels % groups or out_channels % groups:
            raise ConfigError(
                f"conv channels ({in_channels}→{out_channels}) not divisible by groups={groups}"
            )
        rng = rng if rng is not None else np.random.default_rng()
        kh, kw = _pair(kernel)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = (kh, kw)
        self.stride = _pair(stride)
        self.padding = _pair(padding)
        self.groups = groups
        fan_in = (in_channels // groups) * kh * kw
        self.weight = Tensor(
            _kaiming_uniform(rng, (out_channels, in_channels // groups, kh, kw), fan_in),
            requires_grad=True,
        )
        self.bias = Tensor(np.zeros(out_channels, dtype=DTYPE), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)


class ConvTranspose2d(Module):
    """Transposed convolution layer; weight Cin×Cout×kh×kw."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel,
        stride=1,
        padding=0,
        bias: bool = False,
        rng: Optional[np.random.Generator] = None,
    ):
        rng = rng if rng is not None else np.random.default_rng()
        kh, kw = _pair(kernel)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = (kh, kw)
        self.stride = _pair(stride)
        self.padding = _pair(padding)
        fan_in = in_channels * kh * kw
        self.weight = Tensor(
            _kaiming_uniform(rng, (in_channels, out_channels, kh, kw), fan_in),
            requires_grad=True,
        )
        self.bias = Tensor(np.zeros(out_channels, dtype=DTYPE), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.transposed_conv2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm2d(Module):
    """Per-channel batch normalization with learnable scale/shift.

    Running statistics start at (0, 1), so eval mode is usable on a
    freshly initialized network (the statistics are explicitly provided).
    """

    def __init__(self, num_channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.num_channels = num_channels
        self.gamma = Tensor(np.ones(num_channels, dtype=DTYPE), requires_grad=True)
        self.beta = Tensor(np.zeros(num_channels, dtype=DTYPE), requires_grad=True)
        self.state = BatchNormState(
            gamma=self.gamma,
            beta=self.beta,
            running_mean=np.zeros(num_channels, dtype=np.float64),
            running_var=np.ones(num_channels, dtype=np.float64),
            momentum=momentum,
            eps=eps,
            mode="train",
        )

    def forward(self, x: Tensor) -> Tensor:
        return ops.batch_norm(x, self.state)

    def _direct_buffers(self):
        yield "running_mean", self.state.running_mean
        yield "running_var", self.state.running_var


class Linear(Module):
    """Fully connected layer; weight Cin×Cout (inner extent first)."""

    def __init__(
        self,
        in_features: int,
        out_features: int,
        bias: bool = True,
        rng: Optional[np.random.Generator] = None,
    ):
        rng = rng if rng is not None else np.random.default_rng()
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Tensor(
            _kaiming_uniform(rng, (in_features, out_features), in_features),
            requires_grad=True,
        )
        self.bias = Tensor(np.zeros(out_features, dtype=DTYPE), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.fully_connected(x, self.weight, self.bias)


_ACTIVATIONS = {"relu": ops.relu, "relu6": ops.relu6, None: None}


class ConvBNAct(Module):
    """conv → batch norm → activation, the standard composite unit."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel,
        stride=1,
        padding=0,
        groups: int = 1,
        act: Optional[str] = "relu",
        rng: Optional[np.random.Generator] = None,
    ):
        if act not in _ACTIVATIONS:
            raise ConfigError(f"unknown activation {act!r}")
        self.conv = Conv2d(in_channels, out_channels, kernel, stride, padding, groups, False, rng)
        self.bn = BatchNorm2d(out_channels)
        self.act = act

    def forward(self, x: Tensor) -> Tensor:
        y = self.bn(self.conv(x))
        fn = _ACTIVATIONS[self.act]
        return fn(y) if fn else y


class DSConv(Module):
    """Depthwise-separable 3×3 convolution: per-channel spatial filter,
    then 1×1 pointwise channel mixer, each with batch norm and ReLU."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        stride=1,
        rng: Optional[np.random.Generator] = None,
    ):
        self.dw = Conv2d(in_channels, in_channels, 3, stride, 1, groups=in_channels, rng=rng)
        self.dw_bn = BatchNorm2d(in_channels)
        self.pw = Conv2d(in_channels, out_channels, 1, rng=rng)
        self.pw_bn = BatchNorm2d(out_channels)

    def forward(self, x: Tensor) -> Tensor:
        y = ops.relu(self.dw_bn(self.dw(x)))
        return ops.relu(self.pw_bn(self.pw(y)))


class DeconvBNAct(Module):
    """Transposed conv → batch norm → ReLU (learned ×2 upsampling unit)."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel=2,
        stride=2,
        rng: Optional[np.random.Generator] = None,
    ):
        self.deconv = ConvTranspose2d(in_channels, out_channels, kernel, stride, 0, False, rng)
        self.bn = BatchNorm2d(out_channels)

    def forward(self, x: Tensor) -> Tensor:
        return ops.relu(self.bn(self.deconv(x)))
