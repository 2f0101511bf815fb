"""Shifted layers: forward algebra, zero-shift reduction, differentiability."""

import numpy as np
import pytest

from csnlab import ops
from csnlab.autodiff import Parameter, Tape, Tensor, backward
from csnlab.errors import ShapeError
from csnlab.gradcheck import finite_diff_check
from csnlab.layers import (AdaLSTMCell, ConvCSN, DenseCSN, OutputCSN,
                           ResBlockCSN, ShiftMode)

RNG = lambda s=0: np.random.default_rng(s)
ALL_MODES = list(ShiftMode)


def zeros_like_params(layer):
    for p in layer.params():
        p.assign(np.zeros(p.shape))


class TestDenseCSN:
    @pytest.mark.parametrize("mode", ALL_MODES)
    @pytest.mark.parametrize("act", ["tanh", "relu"])
    def test_zero_shift_reduces_to_plain_layer(self, mode, act):
        layer = DenseCSN("fc", 6, 4, RNG(1), act)
        x = Tensor(RNG(2).standard_normal((3, 6)))
        plain, _ = layer.forward(x, None, mode)
        shifted, _ = layer.forward(x, Tensor(np.zeros((3, 4))), mode)
        assert np.array_equal(plain.data, shifted.data)

    def test_unit_shift_on_zero_weights_gives_tanh_one(self):
        layer = DenseCSN("fc", 3, 5, RNG(0), "tanh")
        zeros_like_params(layer)
        out, _ = layer.forward(Tensor(RNG(1).standard_normal((2, 3))),
                               Tensor(np.ones((2, 5))), ShiftMode.NORMALIZED)
        assert np.allclose(out.data, np.tanh(1.0), atol=1e-15)

    def test_relu_kills_negative_shifts_in_normalized_mode(self):
        layer = DenseCSN("fc", 4, 4, RNG(3), "relu")
        x = Tensor(RNG(4).standard_normal((2, 4)))
        plain, _ = layer.forward(x, None, ShiftMode.NORMALIZED)
        shifted, _ = layer.forward(x, Tensor(-np.abs(RNG(5).standard_normal((2, 4)))),
                                   ShiftMode.NORMALIZED)
        assert np.array_equal(plain.data, shifted.data)

    def test_shift_width_mismatch(self):
        layer = DenseCSN("fc", 4, 4, RNG(0), "tanh")
        with pytest.raises(ShapeError):
            layer.forward(Tensor(np.zeros((1, 4))), Tensor(np.zeros((1, 3))),
                          ShiftMode.NORMALIZED)

    @pytest.mark.parametrize("mode", ALL_MODES)
    def test_gradients_through_x_params_and_shift(self, mode):
        layer = DenseCSN("fc", 5, 4, RNG(7), "tanh")
        x = Parameter("x", RNG(8).standard_normal((2, 5)))
        shift = Parameter("shift", RNG(9).standard_normal((2, 4)))
        target = np.zeros((2, 4))
        target[:, 1] = 1.0

        def loss():
            h, _ = layer.forward(x.value, shift.value, mode)
            return ops.cross_entropy(ops.softmax(h), target)

        err = finite_diff_check(loss, [x, shift, *layer.params()])
        assert err < 1e-5


class TestOutputCSN:
    def test_zero_everything_gives_uniform(self):
        layer = OutputCSN("out", 4, 5, RNG(0))
        zeros_like_params(layer)
        probs, _ = layer.forward(Tensor(RNG(1).standard_normal((2, 4))), None)
        assert np.allclose(probs.data, 0.2, atol=1e-15)

    def test_constant_shift_leaves_distribution_unchanged(self):
        layer = OutputCSN("out", 4, 5, RNG(2))
        x = Tensor(RNG(3).standard_normal((3, 4)))
        base, _ = layer.forward(x, None)
        shifted, _ = layer.forward(x, Tensor(np.full((3, 5), 2.7)))
        assert np.max(np.abs(base.data - shifted.data)) < 1e-9

    def test_log3_shift_on_two_way_zero_logits(self):
        layer = OutputCSN("out", 2, 2, RNG(0))
        zeros_like_params(layer)
        shift = Tensor(np.array([[np.log(3.0), 0.0]]))
        probs, _ = layer.forward(Tensor(np.zeros((1, 2))), shift)
        assert np.allclose(probs.data, [[0.75, 0.25]], atol=1e-12)

    def test_distribution_sums_to_one(self):
        layer = OutputCSN("out", 6, 4, RNG(5))
        probs, _ = layer.forward(Tensor(RNG(6).standard_normal((7, 6))),
                                 Tensor(RNG(7).standard_normal((7, 4))))
        assert np.max(np.abs(probs.data.sum(axis=1) - 1.0)) < 1e-9


class TestConvCSN:
    @pytest.mark.parametrize("mode", ALL_MODES)
    @pytest.mark.parametrize("granularity", ["channel", "unit"])
    def test_zero_shift_reduction(self, mode, granularity):
        layer = ConvCSN("conv", 2, 3, RNG(1), granularity)
        x = Tensor(RNG(2).standard_normal((2, 2, 6, 6)))
        width = layer.shift_width(6, 6)
        plain, _ = layer.forward(x, None, mode)
        shifted, _ = layer.forward(x, Tensor(np.zeros((2, width))), mode)
        assert np.array_equal(plain.data, shifted.data)

    def test_channel_shift_broadcasts_spatially(self):
        layer = ConvCSN("conv", 1, 2, RNG(0), "channel", pool=False)
        zeros_like_params(layer)
        shift = Tensor(np.array([[1.0, -1.0]]))
        out, _ = layer.forward(Tensor(np.zeros((1, 1, 4, 4))), shift, ShiftMode.NORMALIZED)
        assert np.allclose(out.data[0, 0], 1.0)
        assert np.allclose(out.data[0, 1], 0.0)  # relu of negative shift

    def test_channel_mismatch_raises(self):
        layer = ConvCSN("conv", 1, 4, RNG(0), "channel")
        with pytest.raises(ShapeError, match="channels"):
            layer.forward(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 3))),
                          ShiftMode.NORMALIZED)


class TestResBlockCSN:
    def test_all_zero_parameters_give_zero_output(self):
        block = ResBlockCSN("block", 2, 3, RNG(0))
        zeros_like_params(block)
        out, a = block.forward(Tensor(RNG(1).standard_normal((1, 2, 4, 4))),
                               None, ShiftMode.NORMALIZED)
        assert np.array_equal(out.data, np.zeros_like(out.data))
        assert np.array_equal(a.data, np.zeros_like(a.data))

    @pytest.mark.parametrize("mode", ALL_MODES)
    def test_zero_shift_reduction(self, mode):
        block = ResBlockCSN("block", 1, 3, RNG(2))
        x = Tensor(RNG(3).standard_normal((2, 1, 5, 5)))
        plain, _ = block.forward(x, None, mode)
        shifted, _ = block.forward(x, Tensor(np.zeros((2, 3))), mode)
        assert np.array_equal(plain.data, shifted.data)

    def test_block_loss_gradients_match_finite_differences(self):
        block = ResBlockCSN("block", 1, 2, RNG(4))
        x = Parameter("x", RNG(5).standard_normal((1, 1, 4, 4)))
        shift = Parameter("shift", RNG(6).standard_normal((1, 2)))

        def loss():
            out, _ = block.forward(x.value, shift.value, ShiftMode.NORMALIZED)
            return ops.tsum(ops.mul(out, out))

        err = finite_diff_check(loss, [x, shift, *block.params()])
        assert err < 1e-5


class TestAdaLSTMCell:
    def _zero_cell(self, in_dim=3, hidden=4):
        cell = AdaLSTMCell("lstm", in_dim, hidden, RNG(0))
        zeros_like_params(cell)
        return cell

    def test_all_zero_weights_give_half_gates_and_zero_state(self):
        cell = self._zero_cell()
        x = Tensor(RNG(1).standard_normal((2, 3)))
        h0 = Tensor(np.zeros((2, 4)))
        c0 = Tensor(np.zeros((2, 4)))
        h, c = cell.step(x, h0, c0, None, ShiftMode.NORMALIZED)
        assert np.array_equal(c.data, np.zeros((2, 4)))
        assert np.array_equal(h.data, np.zeros((2, 4)))

    def test_unit_shift_gives_half_tanh_one(self):
        cell = self._zero_cell()
        h, c = cell.step(Tensor(np.zeros((1, 3))), Tensor(np.zeros((1, 4))),
                         Tensor(np.zeros((1, 4))), Tensor(np.ones((1, 4))),
                         ShiftMode.NORMALIZED)
        assert np.allclose(h.data, 0.5 * np.tanh(1.0), atol=1e-15)
        assert np.array_equal(c.data, np.zeros((1, 4)))

    @pytest.mark.parametrize("mode", ALL_MODES)
    def test_zero_shift_matches_standard_lstm_step(self, mode):
        cell = AdaLSTMCell("lstm", 3, 5, RNG(2))
        x = Tensor(RNG(3).standard_normal((2, 3)))
        h0 = Tensor(RNG(4).standard_normal((2, 5)))
        c0 = Tensor(RNG(5).standard_normal((2, 5)))
        plain = cell.step(x, h0, c0, None, mode)
        shifted = cell.step(x, h0, c0, Tensor(np.zeros((2, 5))), mode)
        assert np.array_equal(plain[0].data, shifted[0].data)
        assert np.array_equal(plain[1].data, shifted[1].data)

    def test_cell_state_bounded_by_step_count(self):
        cell = AdaLSTMCell("lstm", 2, 3, RNG(6))
        rng = RNG(7)
        h = Tensor(np.zeros((1, 3)))
        c = Tensor(np.zeros((1, 3)))
        for t in range(1, 12):
            h, c = cell.step(Tensor(rng.standard_normal((1, 2))), h, c, None,
                             ShiftMode.NORMALIZED)
            assert np.all(np.abs(c.data) <= t + 1e-12)

    def test_step_gradients_match_finite_differences(self):
        cell = AdaLSTMCell("lstm", 3, 4, RNG(8))
        x = Parameter("x", RNG(9).standard_normal((2, 3)))
        shift = Parameter("shift", RNG(10).standard_normal((2, 4)))

        def loss():
            h, c = cell.step(x.value, Tensor(np.zeros((2, 4))), Tensor(np.zeros((2, 4))),
                             shift.value, ShiftMode.NORMALIZED)
            return ops.tsum(ops.mul(h, c))

        err = finite_diff_check(loss, [x, shift, *cell.params()])
        assert err < 1e-5
