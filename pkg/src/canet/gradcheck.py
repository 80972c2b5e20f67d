"""Finite-difference verification of every backward rule.

Primitives get coordinate-wise central differences (ε = 1e-3) against
the analytic gradient of a random linear projection of the output, on
small tensors (≤ 64 elements per input). Composite blocks (branches,
fusion variants, the full network) get directional probes (ε = 1e-5):
one random direction through all parameters and the input at once.
Everything runs on the float64 shadow path. Inputs for kinked ops
(relu families, max pools) are generated with a margin around the kink
so the two difference evaluations stay on one linear piece.

Relative error is |analytic − numeric| / max(1, |analytic|, |numeric|),
and a check passes when the worst coordinate stays below 1e-4.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np

from . import ops, train
from .backbones import build_backbone
from .fca import FCA, VARIANTS, FcaConfig
from .model import CANet, CanetConfig, ContextBranch, SpatialBranch
from .ops import BatchNormState
from .tensor import Tape, Tensor

THRESHOLD = 1e-4
EPS_COORD = 1e-3
# Composite probes keep ε small: the chance that the FD interval crosses
# some downstream relu kink grows with ε × (number of activations), and
# each crossing injects an ε-independent error. 1e-6 keeps the expected
# crossing count negligible while staying well above the float64 floor.
EPS_DIR = 1e-6


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    threshold: float = THRESHOLD

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.threshold


@dataclass
class GradCheck:
    name: str
    runner: Callable[[int], float]  # seed -> max relative error


def _t64(data, requires_grad: bool = True) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=requires_grad, dtype=np.float64)


def _margin(x: np.ndarray, kinks: Sequence[float], margin: float = 0.05) -> np.ndarray:
    """Push values within `margin` of any kink outward, away from it."""
    for k in kinks:
        near = np.abs(x - k) < margin
        x = np.where(near, k + np.sign(x - k + 1e-12) * margin * 2, x)
    return x


def _spread(rng: np.random.Generator, shape) -> np.ndarray:
    """Random values with pairwise gaps ≥ 0.1 (argmax-safe under FD)."""
    n = int(np.prod(shape))
    return (rng.permutation(n).astype(np.float64) * 0.1).reshape(shape)


def _rel(a: float, n: float) -> float:
    return abs(a - n) / max(1.0, abs(a), abs(n))


def check_primitive(build: Callable, seed: int, eps: float = EPS_COORD) -> float:
    """Coordinate-wise central-difference check of one op builder."""
    rng = np.random.default_rng(seed)
    fn, tensors = build(rng)
    proj = Tensor(rng.standard_normal(fn().shape), dtype=np.float64)

    def loss_value() -> float:
        return ops.sum_all(ops.mul(fn(), proj)).item()

    with Tape() as tape:
        loss = ops.sum_all(ops.mul(fn(), proj))
        tape.backward(loss)
    worst = 0.0
    for t in tensors:
        grad = np.array(t.grad).reshape(-1)
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = loss_value()
            flat[i] = orig - eps
            fm = loss_value()
            flat[i] = orig
            worst = max(worst, _rel(grad[i], (fp - fm) / (2 * eps)))
    return worst


def check_composite(build: Callable, seed: int, eps: float = EPS_DIR) -> float:
    """Directional central-difference check through a whole block."""
    rng = np.random.default_rng(seed)
    fn, tensors = build(rng)
    proj = Tensor(rng.standard_normal(fn().shape), dtype=np.float64)

    def loss_value() -> float:
        return ops.sum_all(ops.mul(fn(), proj)).item()

    with Tape() as tape:
        loss = ops.sum_all(ops.mul(fn(), proj))
        tape.backward(loss)
    dirs = [rng.standard_normal(t.shape) for t in tensors]
    norm = np.sqrt(sum((d * d).sum() for d in dirs))
    dirs = [d / norm for d in dirs]
    analytic = float(sum((np.asarray(t.grad) * d).sum() for t, d in zip(tensors, dirs)))
    for t, d in zip(tensors, dirs):
        t.data += eps * d
    fp = loss_value()
    for t, d in zip(tensors, dirs):
        t.data -= 2 * eps * d
    fm = loss_value()
    for t, d in zip(tensors, dirs):
        t.data += eps * d
    return _rel(analytic, (fp - fm) / (2 * eps))


def _params64(module) -> List[Tensor]:
    """Cast a module's parameters to the float64 shadow; return them."""
    params = [p for _, p in module.named_parameters()]
    for p in params:
        p.data = p.data.astype(np.float64)
    return params


# ---------------------------------------------------------------------------
# primitive cases


def _case_matmul(rng):
    a = _t64(rng.standard_normal((5, 7)))
    b = _t64(rng.standard_normal((7, 4)))
    return lambda: ops.matmul(a, b), [a, b]


def _case_add(rng):
    a = _t64(rng.standard_normal((2, 3, 4, 2)))
    b = _t64(rng.standard_normal((2, 1, 4, 2)))
    return lambda: ops.add(a, b), [a, b]


def _case_sub(rng):
    a = _t64(rng.standard_normal((2, 3, 2, 2)))
    b = _t64(rng.standard_normal((2, 3, 1, 1)))
    return lambda: ops.sub(a, b), [a, b]


def _case_mul(rng):
    a = _t64(rng.standard_normal((2, 4, 2, 2)))
    b = _t64(rng.standard_normal((2, 4, 1, 1)))
    return lambda: ops.mul(a, b), [a, b]


def _case_reshape(rng):
    x = _t64(rng.standard_normal((2, 3, 4)))
    return lambda: ops.reshape(x, (6, 4)), [x]


def _case_concat_channels(rng):
    a = _t64(rng.standard_normal((2, 2, 3, 3)))
    b = _t64(rng.standard_normal((2, 3, 3, 3)))
    return lambda: ops.concat_channels([a, b]), [a, b]


def _case_slice_channels(rng):
    x = _t64(rng.standard_normal((2, 5, 2, 2)))
    return lambda: ops.slice_channels(x, 1, 4), [x]


def _case_sum_all(rng):
    x = _t64(rng.standard_normal((3, 4, 2)))
    return lambda: ops.sum_all(x), [x]


def _case_relu(rng):
    x = _t64(_margin(rng.uniform(-1, 1, (2, 3, 3, 3)), [0.0]))
    return lambda: ops.relu(x), [x]


def _case_relu6(rng):
    x = _t64(_margin(rng.uniform(-2, 8, (2, 3, 3, 3)), [0.0, 6.0]))
    return lambda: ops.relu6(x), [x]


def _case_sigmoid(rng):
    x = _t64(rng.uniform(-4, 4, (2, 3, 3, 3)))
    return lambda: ops.sigmoid(x), [x]


def _case_softmax_channels(rng):
    x = _t64(rng.standard_normal((2, 4, 2, 2)))
    return lambda: ops.softmax_channels(x), [x]


def _case_global_avg_pool(rng):
    x = _t64(rng.standard_normal((2, 3, 3, 3)))
    return lambda: ops.global_avg_pool(x), [x]


def _case_global_max_pool(rng):
    x = _t64(_spread(rng, (2, 3, 3, 3)))
    return lambda: ops.global_max_pool(x), [x]


def _case_max_pool2d(rng):
    x = _t64(_spread(rng, (1, 2, 5, 5)))
    return lambda: ops.max_pool2d(x, (3, 3), (2, 2), (1, 1)), [x]


def _case_fully_connected(rng):
    x = _t64(rng.standard_normal((3, 5)))
    w = _t64(rng.standard_normal((5, 4)))
    b = _t64(rng.standard_normal(4))
    return lambda: ops.fully_connected(x, w, b), [x, w, b]


def _case_conv2d(rng):
    x = _t64(rng.standard_normal((1, 2, 5, 5)))
    w = _t64(rng.standard_normal((3, 2, 3, 3)))
    b = _t64(rng.standard_normal(3))
    return lambda: ops.conv2d(x, w, b, (2, 2), (1, 1)), [x, w, b]


def _case_conv2d_grouped(rng):
    x = _t64(rng.standard_normal((1, 4, 4, 4)))
    w = _t64(rng.standard_normal((4, 2, 3, 3)))
    return lambda: ops.conv2d(x, w, None, (1, 1), (1, 1), groups=2), [x, w]


def _case_transposed_conv2d(rng):
    x = _t64(rng.standard_normal((1, 3, 4, 4)))
    w = _t64(rng.standard_normal((3, 2, 3, 3)))
    b = _t64(rng.standard_normal(2))
    return lambda: ops.transposed_conv2d(x, w, b, (2, 2), (1, 1)), [x, w, b]


def _case_batch_norm(rng):
    # distinct C/H/W so a per-channel term applied along a wrong axis cannot pass
    x = _t64(rng.standard_normal((2, 3, 2, 4)))
    gamma = _t64(rng.uniform(0.5, 1.5, 3))
    beta = _t64(rng.standard_normal(3))
    state = BatchNormState(gamma=gamma, beta=beta, mode="train")
    return lambda: ops.batch_norm(x, state), [x, gamma, beta]


def _case_batch_norm_eval(rng):
    x = _t64(rng.standard_normal((2, 3, 2, 4)))
    gamma = _t64(rng.uniform(0.5, 1.5, 3))
    beta = _t64(rng.standard_normal(3))
    state = BatchNormState(
        gamma=gamma,
        beta=beta,
        running_mean=rng.standard_normal(3),
        running_var=rng.uniform(0.5, 2.0, 3),
        mode="eval",
    )
    return lambda: ops.batch_norm(x, state), [x, gamma, beta]


def _case_bilinear_upsample(rng):
    x = _t64(rng.standard_normal((1, 3, 4, 4)))
    return lambda: ops.bilinear_upsample(x, 2), [x]


def _case_weighted_cross_entropy(rng):
    logits = _t64(rng.standard_normal((2, 3, 4, 4)))
    labels = rng.integers(0, 3, (2, 4, 4))
    labels[0, 0, 0] = 255  # exercise the ignore path
    weights = rng.uniform(0.5, 2.0, 3)
    return lambda: train.weighted_cross_entropy(logits, labels, weights), [logits]


# ---------------------------------------------------------------------------
# composite cases


def _composite_spatial_branch(rng):
    branch = SpatialBranch(rng=rng)
    params = _params64(branch)
    x = _t64(rng.standard_normal((2, 3, 32, 32)))
    return lambda: branch(x), params + [x]


def _composite_context_branch(rng):
    # Batch 2 at 64×64 keeps the deepest stage away from 1×1 maps:
    # batch-norm over a single element per channel is constant, lands
    # the zero-init beta exactly on the downstream relu kink, and makes
    # the FD probe meaningless.
    branch = ContextBranch(build_backbone("tiny"), deconv_channels=8, rng=rng)
    params = _params64(branch)
    x = _t64(rng.standard_normal((2, 3, 64, 64)))
    return lambda: branch(x), params + [x]


def _composite_fca(variant: str):
    def build(rng):
        fca = FCA(5, 7, FcaConfig(fusion_channels=6, variant=variant), rng=rng)
        params = _params64(fca)
        s = _t64(rng.standard_normal((1, 5, 4, 4)))
        c = _t64(rng.standard_normal((1, 7, 4, 4)))
        return lambda: fca(s, c), params + [s, c]

    return build


def _composite_canet(rng):
    config = CanetConfig(
        backbone="tiny",
        num_classes=3,
        deconv_channels=8,
        fca=FcaConfig(fusion_channels=8),
        input_size=(64, 64),  # sizing rationale: see _composite_context_branch
    )
    model = CANet(config, seed=int(rng.integers(1 << 31)))
    params = _params64(model)
    x = _t64(rng.standard_normal((2, 3, 64, 64)))
    return lambda: model(x), params + [x]


def _prim(name: str, build) -> GradCheck:
    return GradCheck(name, lambda seed, b=build: check_primitive(b, seed))


def _comp(name: str, build) -> GradCheck:
    return GradCheck(name, lambda seed, b=build: check_composite(b, seed))


def default_registry() -> List[GradCheck]:
    checks = [
        _prim("matmul", _case_matmul),
        _prim("add", _case_add),
        _prim("sub", _case_sub),
        _prim("mul", _case_mul),
        _prim("reshape", _case_reshape),
        _prim("concat_channels", _case_concat_channels),
        _prim("slice_channels", _case_slice_channels),
        _prim("sum_all", _case_sum_all),
        _prim("relu", _case_relu),
        _prim("relu6", _case_relu6),
        _prim("sigmoid", _case_sigmoid),
        _prim("softmax_channels", _case_softmax_channels),
        _prim("global_avg_pool", _case_global_avg_pool),
        _prim("global_max_pool", _case_global_max_pool),
        _prim("max_pool2d", _case_max_pool2d),
        _prim("fully_connected", _case_fully_connected),
        _prim("conv2d", _case_conv2d),
        _prim("conv2d_grouped", _case_conv2d_grouped),
        _prim("transposed_conv2d", _case_transposed_conv2d),
        _prim("batch_norm", _case_batch_norm),
        _prim("batch_norm_eval", _case_batch_norm_eval),
        _prim("bilinear_upsample", _case_bilinear_upsample),
        _prim("weighted_cross_entropy", _case_weighted_cross_entropy),
        _comp("spatial_branch", _composite_spatial_branch),
        _comp("context_branch", _composite_context_branch),
    ]
    checks += [_comp(f"fca_{v}", _composite_fca(v)) for v in VARIANTS]
    checks.append(_comp("canet_full", _composite_canet))
    return checks


def run_all(
    seeds: int = 20,
    base_seed: int = 0,
    registry: Optional[List[GradCheck]] = None,
    threshold: float = THRESHOLD,
) -> List[CheckResult]:
    """Run every registered check over `seeds` seeds; report the worst error."""
    results = []
    for check in registry if registry is not None else default_registry():
        worst = max(check.runner(base_seed * 1000 + s) for s in range(seeds))
        results.append(CheckResult(check.name, worst, threshold))
    return results
