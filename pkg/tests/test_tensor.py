"""Tensor and tape behavior: recording, backward accumulation, and the
basic linear-algebra / shape primitives, each against an independent
oracle (triple loops, explicit broadcasting sums, finite differences).
"""

import numpy as np
import pytest

from canet import ops
from canet.errors import ContractError, ShapeError
from canet.tensor import Tape, Tensor


def t64(data, requires_grad=True):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=requires_grad, dtype=np.float64)


def matmul_loops(a, b):
    """Independent triple-loop matrix multiply."""
    m, k = a.shape
    k2, n = b.shape
    out = np.zeros((m, n), dtype=a.dtype)
    for i in range(m):
        for j in range(n):
            for t in range(k):
                out[i, j] += a[i, t] * b[t, j]
    return out


# =============================================================================
# Tensor basics
# =============================================================================


class TestTensor:
    def test_storage_is_float32_by_default(self):
        t = Tensor([[1, 2], [3, 4]])
        assert t.dtype == np.float32
        assert t.shape == (2, 2)

    def test_float64_shadow_is_permitted(self):
        t = t64([[1.0, 2.0]])
        assert t.dtype == np.float64

    def test_integer_input_is_promoted(self):
        t = Tensor(np.arange(6, dtype=np.int64))
        assert t.dtype == np.float32

    def test_grad_reads_zero_for_unreached_leaf(self):
        t = Tensor([1.0, 2.0], requires_grad=True)
        assert np.array_equal(t.grad, np.zeros(2, dtype=np.float32))

    def test_accumulate_grad_rejects_shape_mismatch(self):
        t = Tensor(np.zeros((2, 3)), requires_grad=True)
        with pytest.raises(ShapeError):
            t.accumulate_grad(np.zeros((3, 2), dtype=np.float32))

    def test_backward_requires_tape(self):
        t = Tensor([1.0], requires_grad=True)
        with pytest.raises(ContractError):
            t.backward()

    def test_backward_requires_scalar_loss(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            y = ops.mul(x, x)
            with pytest.raises(ContractError):
                tape.backward(y)

    def test_mixed_dtypes_rejected(self):
        a = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
        b = t64(np.ones(3))
        with pytest.raises(ContractError):
            ops.add(a, b)


# =============================================================================
# matmul
# =============================================================================


class TestMatmul:
    def test_identity_passthrough(self, rng):
        b = Tensor(rng.standard_normal((3, 2)))
        out = ops.matmul(Tensor(np.eye(3)), b)
        np.testing.assert_array_equal(out.data, b.data)

    def test_zero_annihilator(self, rng):
        b = Tensor(rng.standard_normal((4, 3)))
        out = ops.matmul(Tensor(np.zeros((2, 4))), b)
        np.testing.assert_array_equal(out.data, np.zeros((2, 3)))

    def test_against_triple_loop_oracle(self, rng):
        a = rng.standard_normal((5, 7))
        b = rng.standard_normal((7, 4))
        out = ops.matmul(t64(a), t64(b))
        np.testing.assert_allclose(out.data, matmul_loops(a, b), rtol=0, atol=1e-6)

    def test_backward_rules(self, rng):
        a = t64(rng.standard_normal((5, 7)))
        b = t64(rng.standard_normal((7, 4)))
        proj = rng.standard_normal((5, 4))
        with Tape() as tape:
            loss = ops.sum_all(ops.mul(ops.matmul(a, b), Tensor(proj, dtype=np.float64)))
            tape.backward(loss)
        np.testing.assert_allclose(a.grad, proj @ b.data.T, atol=1e-12)
        np.testing.assert_allclose(b.grad, a.data.T @ proj, atol=1e-12)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
            ops.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


# =============================================================================
# elementwise ops and broadcasting
# =============================================================================


class TestElementwise:
    def test_mul_by_ones_is_identity(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 4)))
        out = ops.mul(x, Tensor(np.ones((2, 3, 4))))
        np.testing.assert_array_equal(out.data, x.data)

    def test_add_zeros_is_identity(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 4)))
        out = ops.add(x, Tensor(np.zeros((2, 3, 4))))
        np.testing.assert_array_equal(out.data, x.data)

    def test_broadcast_mul_matches_loop_oracle(self, rng):
        feats = rng.standard_normal((2, 3, 4, 4))
        gate = rng.standard_normal((2, 1, 4, 4))
        out = ops.mul(t64(feats), t64(gate))
        expected = np.zeros_like(feats)
        for n in range(2):
            for c in range(3):
                for i in range(4):
                    for j in range(4):
                        expected[n, c, i, j] = feats[n, c, i, j] * gate[n, 0, i, j]
        np.testing.assert_array_equal(out.data, expected)

    def test_broadcast_backward_sums_over_broadcast_axes(self, rng):
        # Duality: d/db sum(a + broadcast(b)) equals summing the upstream
        # gradient over the axes b was replicated along.
        a = t64(rng.standard_normal((2, 3, 4, 4)))
        b = t64(rng.standard_normal((3, 1, 1)))
        proj = rng.standard_normal((2, 3, 4, 4))
        with Tape() as tape:
            loss = ops.sum_all(ops.mul(ops.add(a, b), Tensor(proj, dtype=np.float64)))
            tape.backward(loss)
        np.testing.assert_allclose(b.grad, proj.sum(axis=(0, 2, 3)).reshape(3, 1, 1), atol=1e-12)
        np.testing.assert_allclose(a.grad, proj, atol=1e-12)

    def test_sub_backward_negates(self, rng):
        a = t64(rng.standard_normal((3, 2)))
        b = t64(rng.standard_normal((3, 2)))
        with Tape() as tape:
            tape.backward(ops.sum_all(ops.sub(a, b)))
        np.testing.assert_array_equal(a.grad, np.ones((3, 2)))
        np.testing.assert_array_equal(b.grad, -np.ones((3, 2)))

    def test_second_operand_must_broadcast_to_first(self):
        a = Tensor(np.zeros((2, 1, 4)))
        b = Tensor(np.zeros((2, 3, 4)))
        with pytest.raises(ShapeError):
            ops.add(a, b)  # broadcast may widen b toward a, never a toward b

    def test_operator_sugar(self, rng):
        x = Tensor(rng.standard_normal((2, 2)))
        y = Tensor(rng.standard_normal((2, 2)))
        np.testing.assert_array_equal((x + y).data, x.data + y.data)
        np.testing.assert_array_equal((x - y).data, x.data - y.data)
        np.testing.assert_array_equal((x * y).data, x.data * y.data)


# =============================================================================
# backward through the tape
# =============================================================================


class TestBackward:
    def test_bilinear_form_gradient_is_exact(self, rng):
        x = t64(rng.standard_normal((3, 4)))
        y = t64(rng.standard_normal((3, 4)), requires_grad=False)
        with Tape() as tape:
            tape.backward(ops.sum_all(ops.mul(x, y)))
        np.testing.assert_array_equal(x.grad, y.data)

    def test_unreachable_leaf_gets_zero_grad(self, rng):
        x = t64(rng.standard_normal((2, 2)))
        unused = t64(rng.standard_normal((2, 2)))
        with Tape() as tape:
            tape.backward(ops.sum_all(ops.mul(x, x)))
        np.testing.assert_array_equal(unused.grad, np.zeros((2, 2)))

    def test_grad_accumulates_over_shared_input(self, rng):
        x = t64(rng.standard_normal((2, 2)))
        with Tape() as tape:
            tape.backward(ops.sum_all(ops.add(x, x)))
        np.testing.assert_array_equal(x.grad, np.full((2, 2), 2.0))

    def test_no_recording_without_tape(self, rng):
        x = Tensor(rng.standard_normal((2, 2)), requires_grad=True)
        out = ops.mul(x, x)
        assert out._tape is None

    def test_tape_determinism(self):
        def run(seed):
            rng = np.random.default_rng(seed)
            x = t64(rng.standard_normal((3, 5)))
            w = t64(rng.standard_normal((5, 2)))
            with Tape() as tape:
                loss = ops.sum_all(ops.relu(ops.matmul(x, w)))
                tape.backward(loss)
            return loss.data.copy(), x.grad.copy(), w.grad.copy()

        first, second = run(7), run(7)
        for a, b in zip(first, second):
            assert np.array_equal(a, b)  # bit-identical


# =============================================================================
# shape ops
# =============================================================================


class TestShapeOps:
    def test_concat_channel_extents(self, rng):
        a = Tensor(rng.standard_normal((1, 64, 8, 8)))
        b = Tensor(rng.standard_normal((1, 256, 8, 8)))
        assert ops.concat_channels([a, b]).shape == (1, 320, 8, 8)

    def test_concat_rejects_mismatched_extents(self):
        a = Tensor(np.zeros((1, 2, 8, 8)))
        b = Tensor(np.zeros((1, 2, 4, 4)))
        with pytest.raises(ShapeError):
            ops.concat_channels([a, b])
        with pytest.raises(ShapeError):
            ops.concat_channels([])

    def test_concat_backward_splits_gradient(self, rng):
        a = t64(rng.standard_normal((2, 2, 3, 3)))
        b = t64(rng.standard_normal((2, 3, 3, 3)))
        proj = rng.standard_normal((2, 5, 3, 3))
        with Tape() as tape:
            cat = ops.concat_channels([a, b])
            tape.backward(ops.sum_all(ops.mul(cat, Tensor(proj, dtype=np.float64))))
        np.testing.assert_array_equal(a.grad, proj[:, :2])
        np.testing.assert_array_equal(b.grad, proj[:, 2:])

    def test_reshape_round_trip(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 4)))
        back = ops.reshape(ops.reshape(x, (6, 4)), (2, 3, 4))
        np.testing.assert_array_equal(back.data, x.data)

    def test_reshape_rejects_element_count_change(self):
        with pytest.raises(ShapeError):
            ops.reshape(Tensor(np.zeros((2, 3))), (7,))

    def test_slice_channels_values_and_bounds(self, rng):
        x = Tensor(rng.standard_normal((2, 5, 2, 2)))
        out = ops.slice_channels(x, 1, 4)
        np.testing.assert_array_equal(out.data, x.data[:, 1:4])
        with pytest.raises(ShapeError):
            ops.slice_channels(x, 3, 3)
        with pytest.raises(ShapeError):
            ops.slice_channels(x, 0, 6)
