"""Conditioning extraction: preprocessing algebra, gradient capture, direct
feedback structure, and the recurrent variants."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from csnlab import config as configmod
from csnlab.autodiff import Tape, backward, counters
from csnlab.conditioning import (ConditioningMode, extract_df_info,
                                 extract_gradient_info, extract_recurrent_info,
                                 preprocess_gradient)
from csnlab.models import build_model, spec_from_config
from csnlab.sources import one_hot


def make_model(arch="adaffn", seed=0, **overrides):
    meta = {"input_kind": "vector", "input_dim": 6}
    if arch in ("adalstm", "lstm_adaffn"):
        meta = {"input_kind": "tokens", "vocab": 12, "seq_len": 3}
    if arch in ("adacnn", "adaresnet"):
        meta = {"input_kind": "image", "image_size": 8, "channels": 1}
    base = {
        "model.arch": arch,
        "model.hidden": (8, 8),
        "model.filters": 4,
        "model.conv_layers": 3,
        "model.block_filters": (4, 4),
        "model.lstm_hidden": (6,),
        "model.embed_dim": 5,
        "memory.key_dim": 8,
        "memory.key_hidden": (8,),
        "episode.way": 4,
    }
    base.update(overrides)
    cfg = configmod.finalize(configmod.resolve(base), meta)
    return build_model(spec_from_config(cfg), seed=seed)


class TestPreprocessing:
    def test_unit_gradient(self):
        assert np.array_equal(preprocess_gradient(1.0), [0.0, 1.0])

    def test_small_branch_value(self):
        v = preprocess_gradient(np.exp(-8.0), p=7.0)
        assert v[0] == -1.0
        assert v[1] == pytest.approx(np.exp(-1.0), abs=1e-15)

    def test_zero_gradient_total(self):
        assert np.array_equal(preprocess_gradient(0.0), [-1.0, 0.0])

    @pytest.mark.parametrize("sign", [1.0, -1.0])
    def test_branches_agree_at_boundary(self, sign):
        g = sign * np.exp(-7.0)
        big = np.array([np.log(abs(g)) / 7.0, np.sign(g)])
        small = np.array([-1.0, np.exp(7.0) * g])
        got = preprocess_gradient(g, p=7.0)
        assert np.max(np.abs(got - big)) < 1e-12
        assert np.max(np.abs(got - small)) < 1e-12

    @given(st.floats(min_value=-1e6, max_value=1e6, allow_nan=False))
    @settings(max_examples=200, deadline=None)
    def test_second_component_bounded_on_large_branch(self, g):
        v1, v2 = preprocess_gradient(g, p=7.0)
        if abs(g) >= np.exp(-7.0):
            assert -1.0 <= v2 <= 1.0
            assert v1 <= np.log(1e6) / 7.0 + 1e-12

    @given(st.floats(min_value=1e-12, max_value=1e3, allow_nan=False))
    @settings(max_examples=200, deadline=None)
    def test_second_component_odd_in_sign(self, mag):
        plus = preprocess_gradient(mag, p=7.0)
        minus = preprocess_gradient(-mag, p=7.0)
        assert plus[1] == -minus[1]
        assert plus[0] == minus[0]

    @given(st.floats(min_value=-1.0, max_value=1.0, allow_nan=False))
    @settings(max_examples=200, deadline=None)
    def test_first_component_nonpositive_for_small_magnitudes(self, g):
        v1, _ = preprocess_gradient(g, p=7.0)
        assert v1 <= 0.0

    def test_vectorized_shape(self):
        out = preprocess_gradient(np.zeros((3, 4)))
        assert out.shape == (3, 4, 2)


class TestGradientExtraction:
    def test_output_layer_gradient_is_prediction_minus_label(self):
        model = make_model(seed=1)
        x = np.random.default_rng(0).standard_normal(6)
        y = one_hot([2], 4)[0]
        info = extract_gradient_info(model, x, y, preprocess=False)
        probs = model.forward_plain([x]).data[0]
        assert np.max(np.abs(info["out"][:, 0] - (probs - y))) < 1e-12

    def test_zero_weight_network_uniform_prediction(self):
        model = make_model(seed=2)
        for p in model.parameters():
            if p.name.startswith(("fc", "out")):
                p.assign(np.zeros(p.shape))
        x = np.random.default_rng(1).standard_normal(6)
        y = one_hot([0], 4)[0]
        info = extract_gradient_info(model, x, y, preprocess=False)
        expected = np.full(4, 0.25) - y
        assert np.max(np.abs(info["out"][:, 0] - expected)) < 1e-12

    def test_matches_finite_difference_at_preactivations(self):
        # perturb the pre-activation by injecting a shift at that layer
        from csnlab import ops
        from csnlab.autodiff import Tensor
        from csnlab.layers import ShiftMode
        model = make_model(seed=3)
        rng = np.random.default_rng(2)
        x = rng.standard_normal(6)
        y = one_hot([1], 4)[0]
        info = extract_gradient_info(model, x, y, preprocess=False)

        h = 1e-6
        for name, width in [("fc1", 8), ("fc2", 8), ("out", 4)]:
            for idx in range(0, width, 3):
                def loss_with_bump(eps):
                    bump = np.zeros((1, width))
                    bump[0, idx] = eps
                    shifts = {name: Tensor(bump)}
                    # pre-activation bump == adding to a_t before the nonlinearity
                    old_mode = model.spec.shift_mode
                    model.spec.shift_mode = ShiftMode.PRE_ACTIVATION
                    try:
                        probs, _ = model.forward_trace(model.prepare_batch([x]), shifts=shifts)
                    finally:
                        model.spec.shift_mode = old_mode
                    return ops.cross_entropy(probs, y[None, :]).item()

                numeric = (loss_with_bump(h) - loss_with_bump(-h)) / (2 * h)
                analytic = info[name][idx, 0]
                denom = max(abs(analytic), abs(numeric), 1e-8)
                assert abs(analytic - numeric) / denom < 1e-5

    def test_extraction_does_not_touch_parameters(self):
        model = make_model(seed=4)
        before = [p.value.data.copy() for p in model.parameters()]
        x = np.random.default_rng(3).standard_normal(6)
        extract_gradient_info(model, x, one_hot([0], 4)[0])
        for p, b in zip(model.parameters(), before):
            assert np.array_equal(p.value.data, b)

    def test_preprocessed_info_width_two(self):
        model = make_model(seed=5)
        info = extract_gradient_info(model, np.zeros(6), one_hot([3], 4)[0])
        assert info["fc1"].shape == (8, 2)
        assert info["out"].shape == (4, 2)


class TestDirectFeedback:
    def test_zero_backward_traversals(self):
        model = make_model(seed=6)
        counters.reset()
        extract_df_info(model, np.zeros(6), one_hot([1], 4)[0])
        assert counters.backward_traversals == 0

    def test_tanh_layer_at_zero_preact_passes_error_through(self):
        model = make_model(seed=7)
        for p in model.parameters():
            if p.name.startswith("fc"):
                p.assign(np.zeros(p.shape))
        x = np.random.default_rng(5).standard_normal(6)
        y = one_hot([2], 4)[0]
        info = extract_df_info(model, x, y)
        err = model.forward_plain([x]).data[0] - y
        for row in info["fc1"]:  # tanh'(0) = 1 for every neuron
            assert np.max(np.abs(row - err)) < 1e-12

    def test_relu_dead_neuron_gets_zero_info(self):
        from csnlab.autodiff import no_grad
        model = make_model(seed=8, **{"model.activation": "relu"})
        x = np.random.default_rng(6).standard_normal(6)
        y = one_hot([0], 4)[0]
        info = extract_df_info(model, x, y)
        with no_grad():
            _, trace = model.forward_trace(model.prepare_batch([x]))
        dead = trace["fc1"].data[0] <= 0
        assert dead.any()
        assert np.array_equal(info["fc1"][dead], np.zeros((dead.sum(), 4)))

    def test_two_way_uniform_prediction_gives_half_errors(self):
        model = make_model(seed=9, **{"episode.way": 2})
        for p in model.parameters():
            if p.name.startswith(("fc", "out")):
                p.assign(np.zeros(p.shape))
        info = extract_df_info(model, np.zeros(6), one_hot([0], 2)[0])
        assert np.max(np.abs(info["fc1"][0] - [-0.5, 0.5])) < 1e-12

    def test_df_info_width_is_class_count(self):
        model = make_model(seed=10, **{"cond.mode": "df"})
        info = extract_df_info(model, np.zeros(6), one_hot([1], 4)[0])
        assert info["fc1"].shape == (8, 4)


class TestRecurrentExtraction:
    def test_df_zero_cell_state_passes_error_at_every_step(self):
        model = make_model("adalstm", seed=11, **{"cond.mode": "df"})
        for p in model.parameters():
            if p.name.startswith(("lstm", "out", "embed")):
                p.assign(np.zeros(p.shape))
        tokens = np.array([1, 2, 3])
        y = one_hot([1], 4)[0]
        info = extract_recurrent_info(model, tokens, y, ConditioningMode.DIRECT_FEEDBACK)
        assert info["lstm1"].shape == (3, 6, 4)
        err = np.full(4, 0.25) - y
        for step_rows in info["lstm1"]:
            for row in step_rows:
                assert np.max(np.abs(row - err)) < 1e-12

    def test_single_step_matches_flat_extraction_shape(self):
        model = make_model("adalstm", seed=12, **{"model.seq_len": 1})
        model.spec.seq_len = 1
        info = extract_recurrent_info(model, np.array([4]), one_hot([0], 4)[0],
                                      ConditioningMode.GRADIENT)
        assert info["lstm1"].shape == (1, 6, 2)
        assert info["out"].shape == (4, 2)

    def test_gradient_capture_at_cell_states_matches_finite_differences(self):
        # toy S=3 cell: additive bump parameters enter the cell state inside
        # each step, so d(loss)/d(bump_t) at 0 is exactly d(loss)/d(c_t)
        from csnlab import ops
        from csnlab.autodiff import Parameter, Tape, Tensor
        from csnlab.gradcheck import finite_diff_check
        from csnlab.layers import AdaLSTMCell, Dense

        rng = np.random.default_rng(13)
        hidden, steps = 4, 3
        cell = AdaLSTMCell("cell", 3, hidden, rng)
        head = Dense("head", hidden, 3, rng)
        xs = rng.standard_normal((steps, 1, 3))
        y = one_hot([2], 3)
        bumps = [Parameter(f"bump{t}", np.zeros((1, hidden))) for t in range(steps)]

        captured = {}

        def loss():
            h = Tensor(np.zeros((1, hidden)))
            c = Tensor(np.zeros((1, hidden)))
            cs = []
            for t in range(steps):
                z = ops.concat([Tensor(xs[t]), h], axis=1)
                i = ops.sigmoid(cell._gate(z, cell.W_i, cell.b_i))
                f = ops.sigmoid(cell._gate(z, cell.W_f, cell.b_f))
                o = ops.sigmoid(cell._gate(z, cell.W_o, cell.b_o))
                v = ops.tanh(cell._gate(z, cell.W_v, cell.b_v))
                c = ops.add(ops.add(ops.mul(v, i), ops.mul(c, f)), bumps[t].value)
                cs.append(c)
                h = ops.mul(ops.tanh(c), o)
            captured["cs"] = cs
            return ops.cross_entropy(ops.softmax(head(h)), y)

        err = finite_diff_check(loss, bumps)
        assert err < 1e-5

        with Tape():
            out = loss()
            grads = backward(out, capture=captured["cs"])
        for t in range(steps):
            assert np.array_equal(grads.wrt(bumps[t].value), grads.wrt(captured["cs"][t]))
