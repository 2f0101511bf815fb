"""Tensor engine: primitive ops, backward rules, tape semantics, CSNT files."""

import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from csnlab import ops, tensorfile
from csnlab.autodiff import Parameter, Tape, Tensor, backward, counters, no_grad
from csnlab.errors import NumericError, OracleInvalidError, ShapeError, UsageError
from csnlab.gradcheck import check_primitive_ops, finite_diff_check


def param(arr, name="p"):
    return Parameter(name, np.asarray(arr, dtype=np.float64))


class TestPrimitiveForward:
    def test_matmul_identity(self):
        rng = np.random.default_rng(0)
        a = rng.standard_normal((3, 3))
        out = ops.matmul(Tensor(np.eye(3)), Tensor(a))
        assert np.array_equal(out.data, a)

    def test_softmax_uniform_on_equal_logits(self):
        out = ops.softmax(Tensor(np.zeros(5)))
        assert np.allclose(out.data, 0.2, atol=1e-15)

    def test_conv2d_identity_kernel(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((2, 3, 7, 6))
        k = np.zeros((3, 3, 3, 3))
        for c in range(3):
            k[c, c, 1, 1] = 1.0
        out = ops.conv2d(Tensor(x), Tensor(k))
        assert np.array_equal(out.data, x)

    def test_matmul_shape_error_is_descriptive(self):
        with pytest.raises(ShapeError, match="inner dims"):
            ops.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))

    def test_non_finite_output_names_the_op(self):
        with pytest.raises(NumericError, match="log"):
            ops.log(Tensor(np.array([0.0])))

    def test_maxpool_ceil_mode_on_odd_dims(self):
        x = np.arange(9, dtype=np.float64).reshape(1, 1, 3, 3)
        out = ops.maxpool2(Tensor(x))
        assert out.shape == (1, 1, 2, 2)
        assert np.array_equal(out.data[0, 0], [[4.0, 5.0], [7.0, 8.0]])


class TestSoftmaxProperties:
    @given(st.lists(st.floats(-50, 50), min_size=2, max_size=8), st.floats(-30, 30))
    @settings(max_examples=60, deadline=None)
    def test_normalized_and_shift_invariant(self, logits, const):
        a = np.asarray(logits)
        y1 = ops.softmax(Tensor(a)).data
        y2 = ops.softmax(Tensor(a + const)).data
        assert np.all(y1 >= 0)
        assert abs(y1.sum() - 1.0) < 1e-9
        assert np.max(np.abs(y1 - y2)) < 1e-9


class TestCrossEntropy:
    def test_uniform_probs_five_classes(self):
        probs = Tensor(np.full(5, 0.2))
        target = np.array([0.0, 1.0, 0.0, 0.0, 0.0])
        out = ops.cross_entropy(probs, target)
        assert out.item() == pytest.approx(np.log(5.0), abs=1e-12)

    def test_perfect_prediction_is_zero(self):
        target = np.array([0.0, 0.0, 1.0])
        out = ops.cross_entropy(Tensor(target.copy()), target)
        assert out.item() == 0.0

    def test_half_half(self):
        out = ops.cross_entropy(Tensor(np.array([0.5, 0.5])), np.array([1.0, 0.0]))
        assert out.item() == pytest.approx(np.log(2.0), abs=1e-12)

    def test_zero_at_target_clamps_and_counts(self):
        counters.reset()
        out = ops.cross_entropy(Tensor(np.array([0.0, 1.0])), np.array([1.0, 0.0]))
        assert counters.ce_clamps == 1
        assert out.item() == pytest.approx(-np.log(1e-12))

    def test_rejects_non_distribution(self):
        with pytest.raises(ShapeError, match="sum to 1"):
            ops.cross_entropy(Tensor(np.array([0.9, 0.3])), np.array([1.0, 0.0]))

    def test_fused_softmax_ce_gradient_is_p_minus_y(self):
        rng = np.random.default_rng(3)
        logits = param(rng.standard_normal(6), "logits")
        target = np.zeros(6)
        target[2] = 1.0
        with Tape():
            probs = ops.softmax(logits.value)
            loss = ops.cross_entropy(probs, target)
            grads = backward(loss)
        expected = probs.data - target
        assert np.max(np.abs(grads.wrt(logits.value) - expected)) < 1e-14


class TestBackward:
    def test_sum_gradient_is_ones(self):
        x = param(np.random.default_rng(0).standard_normal((3, 4)))
        with Tape():
            grads = backward(ops.tsum(x.value))
        assert np.array_equal(grads.wrt(x.value), np.ones((3, 4)))

    def test_tanh_gradient_at_zero(self):
        x = param(np.zeros(1))
        with Tape():
            grads = backward(ops.tsum(ops.tanh(x.value)))
        assert grads.wrt(x.value)[0] == 1.0

    def test_reuse_accumulates(self):
        x = param(np.array([3.0]))
        with Tape():
            grads = backward(ops.tsum(ops.add(x.value, x.value)))
        assert grads.wrt(x.value)[0] == 2.0

    def test_backward_off_tape_is_usage_error(self):
        with pytest.raises(UsageError, match="not on a tape"):
            backward(Tensor(np.array([1.0])))

    def test_backward_requires_scalar_root(self):
        x = param(np.ones(3))
        with Tape():
            y = ops.tanh(x.value)
            with pytest.raises(UsageError, match="scalar"):
                backward(y)

    def test_capture_at_intermediate_node(self):
        x = param(np.array([0.5, -1.0]))
        with Tape():
            mid = ops.tanh(x.value)
            loss = ops.tsum(ops.mul(mid, mid))
            grads = backward(loss, capture=[mid])
        assert np.allclose(grads.wrt(mid), 2 * np.tanh(x.value.data))

    def test_stop_gradient_blocks_upstream_exactly(self):
        x = param(np.array([2.0]))
        with Tape():
            blocked = ops.stop_gradient(ops.mul(x.value, x.value))
            loss = ops.tsum(ops.mul(blocked, x.value))  # d/dx = blocked value only
            grads = backward(loss)
        assert grads.wrt(x.value)[0] == 4.0

    def test_backward_counter_increments(self):
        counters.reset()
        x = param(np.ones(2))
        with Tape():
            backward(ops.tsum(x.value))
        with Tape():
            backward(ops.tsum(ops.tanh(x.value)))
        assert counters.backward_traversals == 2

    def test_cross_tape_mixing_rejected(self):
        x = param(np.ones(2))
        with Tape():
            y = ops.tanh(x.value)
        with Tape():
            with pytest.raises(UsageError, match="different tape"):
                ops.tsum(y)

    def test_no_grad_records_nothing(self):
        x = param(np.ones(2))
        with Tape() as tape:
            with no_grad():
                ops.tanh(x.value)
            assert len(tape) == 0


class TestDeterminism:
    def test_identical_seed_bitwise_identical(self):
        def run():
            rng = np.random.default_rng(42)
            x = Tensor(rng.standard_normal((4, 4)))
            w = param(rng.standard_normal((4, 4)), "w")
            with Tape():
                y = ops.tsum(ops.softmax(ops.matmul(x, w.value)))
                grads = backward(y)
            return y.item(), grads.wrt(w.value).copy()

        v1, g1 = run()
        v2, g2 = run()
        assert v1 == v2
        assert np.array_equal(g1, g2)


class TestFiniteDiffCheck:
    def test_quadratic(self):
        theta = param(np.array([3.0]))
        err = finite_diff_check(lambda: ops.tsum(ops.mul(theta.value, theta.value)), [theta])
        assert err < 1e-8

    def test_constant_function(self):
        theta = param(np.array([1.5]))
        err = finite_diff_check(lambda: ops.tsum(ops.mul(theta.value, 0.0)), [theta])
        assert err < 1e-10

    def test_h_out_of_range_rejected(self):
        theta = param(np.array([1.0]))
        with pytest.raises(UsageError):
            finite_diff_check(lambda: ops.tsum(theta.value), [theta], h=1e-2)

    def test_nondeterministic_function_rejected(self):
        theta = param(np.array([1.0]))
        state = {"n": 0}

        def f():
            state["n"] += 1
            return ops.tsum(ops.mul(theta.value, float(state["n"])))

        with pytest.raises(OracleInvalidError):
            finite_diff_check(f, [theta])

    def test_every_primitive_op_backward_matches_finite_differences(self):
        results = check_primitive_ops(rng=np.random.default_rng(11), points=20)
        bad = {op: err for op, err in results.items() if err >= 1e-5}
        assert not bad, f"ops failing the 1e-5 oracle: {bad}"


class TestTensorFile:
    def test_round_trip_v1_f32(self, tmp_path):
        arr = np.random.default_rng(0).standard_normal((3, 5)).astype(np.float32)
        path = tmp_path / "t.csnt"
        tensorfile.save_tensor(path, arr, version=1)
        back = tensorfile.load_tensor(path)
        assert back.dtype == np.float64
        assert np.array_equal(back, arr.astype(np.float64))

    def test_round_trip_v2_f64_bit_exact(self, tmp_path):
        arr = np.random.default_rng(1).standard_normal((2, 3, 4))
        path = tmp_path / "t.csnt"
        tensorfile.save_tensor(path, arr, version=2)
        assert np.array_equal(tensorfile.load_tensor(path), arr)

    def test_header_layout(self):
        blob = tensorfile.tensor_bytes(np.zeros((2, 3), dtype=np.float32), version=1)
        assert blob[:4] == b"CSNT"
        assert blob[4] == 1  # version
        assert blob[5] == 2  # rank
        assert int.from_bytes(blob[6:10], "little") == 2
        assert int.from_bytes(blob[10:14], "little") == 3
        assert len(blob) == 14 + 6 * 4

    def test_truncated_payload_rejected(self):
        blob = tensorfile.tensor_bytes(np.ones((4, 4)), version=1)
        with pytest.raises(UsageError, match="truncated"):
            tensorfile.read_tensor(io.BytesIO(blob[:-3]))

    def test_bad_magic_rejected(self):
        with pytest.raises(UsageError, match="magic"):
            tensorfile.read_tensor(io.BytesIO(b"NOPE" + b"\x00" * 16))
