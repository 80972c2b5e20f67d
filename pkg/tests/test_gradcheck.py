"""The gradient checker itself: registry coverage, the pass/fail
boundary, kink-margin helpers, and — most importantly — that a planted
wrong backward rule is actually caught.
"""

import numpy as np
import pytest

from canet import ops
from canet.gradcheck import (
    EPS_COORD,
    EPS_DIR,
    THRESHOLD,
    CheckResult,
    GradCheck,
    _margin,
    _spread,
    check_primitive,
    default_registry,
    run_all,
)
from canet.tensor import Tensor, record

EXPECTED_CHECKS = {
    "matmul", "add", "sub", "mul", "reshape", "concat_channels",
    "slice_channels", "sum_all", "relu", "relu6", "sigmoid",
    "softmax_channels", "global_avg_pool", "global_max_pool", "max_pool2d",
    "fully_connected", "conv2d", "conv2d_grouped", "transposed_conv2d",
    "batch_norm", "batch_norm_eval", "bilinear_upsample",
    "weighted_cross_entropy", "spatial_branch", "context_branch",
    "fca_none", "fca_conv_only", "fca_spatial_only", "fca_parallel",
    "fca_channel_then_spatial", "fca_spatial_then_channel", "canet_full",
}


# =============================================================================
# registry
# =============================================================================


class TestRegistry:
    def test_covers_every_op_and_block_exactly_once(self):
        names = [c.name for c in default_registry()]
        assert len(names) == len(set(names))
        assert set(names) == EXPECTED_CHECKS

    def test_two_seed_sweep_passes(self):
        results = run_all(seeds=2)
        failing = [r for r in results if not r.passed]
        assert not failing, [f"{r.name}={r.max_rel_err:.3g}" for r in failing]

    def test_results_report_the_configured_threshold(self):
        results = run_all(seeds=1, threshold=0.5)
        assert all(r.threshold == 0.5 for r in results)


# =============================================================================
# the checker catches planted bugs
# =============================================================================


def _broken_mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product whose backward drops the product rule."""
    out = Tensor(a.data * b.data, dtype=a.data.dtype)
    # Wrong on purpose: pretends d(a·b)/da = 1 instead of b.
    return record(out, [a, b], lambda g: [g, g * a.data])


class TestCatchesPlantedBug:
    def test_wrong_backward_rule_fails_loudly(self):
        def build(rng):
            a = Tensor(rng.standard_normal((3, 3)), requires_grad=True, dtype=np.float64)
            b = Tensor(rng.standard_normal((3, 3)), requires_grad=True, dtype=np.float64)
            return lambda: _broken_mul(a, b), [a, b]

        err = check_primitive(build, seed=0)
        assert err > THRESHOLD

    def test_broken_check_surfaces_in_run_all(self):
        def build(rng):
            a = Tensor(rng.standard_normal((3, 3)), requires_grad=True, dtype=np.float64)
            b = Tensor(rng.standard_normal((3, 3)), requires_grad=True, dtype=np.float64)
            return lambda: _broken_mul(a, b), [a, b]

        registry = [
            GradCheck("mul_planted_bug", lambda seed: check_primitive(build, seed)),
        ]
        results = run_all(seeds=3, registry=registry)
        assert len(results) == 1
        assert results[0].name == "mul_planted_bug"
        assert not results[0].passed

    def test_correct_rule_passes_the_same_harness(self):
        def build(rng):
            a = Tensor(rng.standard_normal((3, 3)), requires_grad=True, dtype=np.float64)
            b = Tensor(rng.standard_normal((3, 3)), requires_grad=True, dtype=np.float64)
            return lambda: ops.mul(a, b), [a, b]

        assert check_primitive(build, seed=0) < THRESHOLD


# =============================================================================
# helpers and result semantics
# =============================================================================


class TestHelpers:
    def test_margin_clears_the_kink_neighborhood(self, rng):
        x = rng.uniform(-1, 1, 1000)
        pushed = _margin(x, [0.0], margin=0.05)
        assert (np.abs(pushed) >= 0.05).all()
        far = np.abs(x) >= 0.05
        np.testing.assert_array_equal(pushed[far], x[far])  # untouched away from kink

    def test_margin_handles_multiple_kinks(self, rng):
        x = rng.uniform(-2, 8, 1000)
        pushed = _margin(x, [0.0, 6.0], margin=0.05)
        assert (np.abs(pushed - 0.0) >= 0.05).all()
        assert (np.abs(pushed - 6.0) >= 0.05).all()

    def test_spread_guarantees_argmax_gaps(self, rng):
        x = _spread(rng, (4, 5)).reshape(-1)
        x.sort()
        assert (np.diff(x) >= 0.1 - 1e-12).all()

    def test_epsilons_are_ordered_for_their_roles(self):
        # Coordinate probes tolerate a larger ε; directional probes
        # through deep relu stacks need a far smaller one.
        assert EPS_DIR < EPS_COORD
        assert THRESHOLD == 1e-4

    def test_check_result_boundary(self):
        assert CheckResult("x", max_rel_err=9.9e-5).passed
        assert not CheckResult("x", max_rel_err=1e-4).passed
        assert not CheckResult("x", max_rel_err=np.inf).passed
