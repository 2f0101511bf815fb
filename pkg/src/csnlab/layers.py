"""Network layers whose neurons accept per-task activation shifts.

Every shifted layer exposes its pre-activation tensor so the conditioning
stage can read gradients or activation derivatives at exactly that point.
With a zero shift each layer reduces bit-for-bit to its plain counterpart
(both tanh and relu satisfy act(0) = 0, which the description phase relies
on).
"""

from __future__ import annotations

import enum

import numpy as np

from .autodiff import Parameter, Tensor
from .errors import ConfigError, ShapeError
from . import ops


class ShiftMode(str, enum.Enum):
    """How a retrieved shift enters a hidden layer.

    NORMALIZED passes the shift through the layer nonlinearity before
    adding; RAW_ADDITIVE adds it unsquashed; PRE_ACTIVATION adds it to the
    pre-activation inside the nonlinearity.  The softmax output layer always
    adds its shift to the logits, independent of this mode.
    """

    NORMALIZED = "normalized"
    RAW_ADDITIVE = "raw_additive"
    PRE_ACTIVATION = "pre_activation"


ACTIVATIONS = {"tanh": ops.tanh, "relu": ops.relu}


def activation_fn(kind: str):
    try:
        return ACTIVATIONS[kind]
    except KeyError:
        raise ConfigError(f"unknown activation '{kind}' (expected tanh or relu)")


def activation_deriv(kind: str, preact: np.ndarray) -> np.ndarray:
    """Elementwise derivative of the activation, evaluated on raw values.

    relu uses the subgradient 0 at exactly 0.
    """
    if kind == "tanh":
        t = np.tanh(preact)
        return 1.0 - t * t
    if kind == "relu":
        return (preact > 0).astype(np.float64)
    raise ConfigError(f"unknown activation '{kind}'")


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


def _apply_hidden_shift(act, preact: Tensor, shift: Tensor | None, mode: ShiftMode) -> Tensor:
    if shift is None:
        return act(preact)
    if mode is ShiftMode.PRE_ACTIVATION:
        return act(ops.add(preact, shift))
    shifted = act(shift) if mode is ShiftMode.NORMALIZED else shift
    return ops.add(act(preact), shifted)


class Dense:
    """Plain affine layer, used inside key/value functions."""

    def __init__(self, name: str, in_dim: int, out_dim: int, rng, activation: str | None = None):
        self.name = name
        self.W = Parameter(f"{name}.W", he_normal(rng, (out_dim, in_dim), in_dim))
        self.b = Parameter(f"{name}.b", np.zeros(out_dim))
        self.activation = activation

    def params(self):
        return [self.W, self.b]

    def __call__(self, x: Tensor) -> Tensor:
        a = ops.add(ops.matmul(x, ops.transpose(self.W.value)), self.b.value)
        return activation_fn(self.activation)(a) if self.activation else a


class DenseCSN:
    """Fully connected hidden layer with shifted neurons.

    forward(x, shift) -> (output, pre-activation); the pre-activation is the
    conditioning read point.  x: (B, in_dim), shift: (B, out_dim) or None.
    """

    def __init__(self, name: str, in_dim: int, out_dim: int, rng, activation: str = "tanh"):
        self.name = name
        self.width = out_dim
        self.activation = activation
        self.W = Parameter(f"{name}.W", he_normal(rng, (out_dim, in_dim), in_dim))
        self.b = Parameter(f"{name}.b", np.zeros(out_dim))

    def params(self):
        return [self.W, self.b]

    def forward(self, x: Tensor, shift: Tensor | None, mode: ShiftMode):
        if shift is not None and shift.shape[-1] != self.width:
            raise ShapeError(f"{self.name}: shift width {shift.shape[-1]} != {self.width}")
        a = ops.add(ops.matmul(x, ops.transpose(self.W.value)), self.b.value)
        h = _apply_hidden_shift(activation_fn(self.activation), a, shift, mode)
        return h, a


class OutputCSN:
    """Softmax classifier head; its shift always enters before the softmax."""

    def __init__(self, name: str, in_dim: int, classes: int, rng):
        self.name = name
        self.width = classes
        self.activation = "output"
        self.W = Parameter(f"{name}.W", he_normal(rng, (classes, in_dim), in_dim))
        self.b = Parameter(f"{name}.b", np.zeros(classes))

    def params(self):
        return [self.W, self.b]

    def forward(self, x: Tensor, shift: Tensor | None):
        if shift is not None and shift.shape[-1] != self.width:
            raise ShapeError(f"{self.name}: shift width {shift.shape[-1]} != {self.width}")
        a = ops.add(ops.matmul(x, ops.transpose(self.W.value)), self.b.value)
        logits = ops.add(a, shift) if shift is not None else a
        return ops.softmax(logits), a


class ConvCSN:
    """3x3 same-padded conv + relu + 2x2 max-pool, with shifted channels.

    Shift granularity 'channel' stores one value per filter (broadcast over
    the spatial map); 'unit' stores one per output position.
    """

    def __init__(self, name: str, in_channels: int, filters: int, rng,
                 granularity: str = "channel", pool: bool = True):
        if granularity not in ("channel", "unit"):
            raise ConfigError(f"{name}: granularity must be channel or unit")
        self.name = name
        self.filters = filters
        self.activation = "relu"
        self.granularity = granularity
        self.pool = pool
        fan_in = in_channels * 9
        self.K = Parameter(f"{name}.K", he_normal(rng, (filters, in_channels, 3, 3), fan_in))
        self.b = Parameter(f"{name}.b", np.zeros(filters))

    def params(self):
        return [self.K, self.b]

    def shift_width(self, h: int, w: int) -> int:
        return self.filters if self.granularity == "channel" else self.filters * h * w

    def _broadcast_shift(self, shift: Tensor, b: int, h: int, w: int) -> Tensor:
        if self.granularity == "channel":
            if shift.shape[-1] != self.filters:
                raise ShapeError(f"{self.name}: shift has {shift.shape[-1]} channels, expected {self.filters}")
            return ops.reshape(shift, (b, self.filters, 1, 1))
        expected = self.filters * h * w
        if shift.shape[-1] != expected:
            raise ShapeError(f"{self.name}: shift length {shift.shape[-1]} != {expected}")
        return ops.reshape(shift, (b, self.filters, h, w))

    def forward(self, x: Tensor, shift: Tensor | None, mode: ShiftMode):
        a = ops.add(ops.conv2d(x, self.K.value), ops.reshape(self.b.value, (1, self.filters, 1, 1)))
        if shift is not None:
            bsz, _, h, w = a.shape
            shift = self._broadcast_shift(shift, bsz, h, w)
        h_out = _apply_hidden_shift(ops.relu, a, shift, mode)
        if self.pool:
            h_out = ops.maxpool2(h_out)
        return h_out, a


class ResBlockCSN:
    """Residual block (3x3, 3x3, 1x1 convs plus a 1x1 skip) with shifted
    output neurons, followed by 2x2 max-pooling.  relu throughout."""

    def __init__(self, name: str, in_channels: int, filters: int, rng,
                 granularity: str = "channel"):
        if granularity not in ("channel", "unit"):
            raise ConfigError(f"{name}: granularity must be channel or unit")
        self.name = name
        self.filters = filters
        self.activation = "relu"
        self.granularity = granularity
        self.conv_a = Parameter(f"{name}.conv_a", he_normal(rng, (filters, in_channels, 3, 3), in_channels * 9))
        self.conv_b = Parameter(f"{name}.conv_b", he_normal(rng, (filters, filters, 3, 3), filters * 9))
        self.conv_c = Parameter(f"{name}.conv_c", he_normal(rng, (filters, filters, 1, 1), filters))
        self.conv_skip = Parameter(f"{name}.conv_skip", he_normal(rng, (filters, in_channels, 1, 1), in_channels))
        self.bias_a = Parameter(f"{name}.bias_a", np.zeros(filters))
        self.bias_b = Parameter(f"{name}.bias_b", np.zeros(filters))
        self.bias_c = Parameter(f"{name}.bias_c", np.zeros(filters))
        self.bias_skip = Parameter(f"{name}.bias_skip", np.zeros(filters))

    def params(self):
        return [self.conv_a, self.conv_b, self.conv_c, self.conv_skip,
                self.bias_a, self.bias_b, self.bias_c, self.bias_skip]

    def shift_width(self, h: int, w: int) -> int:
        return self.filters if self.granularity == "channel" else self.filters * h * w

    def _conv(self, x, kernel: Parameter, bias: Parameter):
        return ops.add(ops.conv2d(x, kernel.value), ops.reshape(bias.value, (1, self.filters, 1, 1)))

    def forward(self, x: Tensor, shift: Tensor | None, mode: ShiftMode):
        h1 = ops.relu(self._conv(x, self.conv_a, self.bias_a))
        h2 = ops.relu(self._conv(h1, self.conv_b, self.bias_b))
        h3 = self._conv(h2, self.conv_c, self.bias_c)
        h4 = self._conv(x, self.conv_skip, self.bias_skip)
        a = ops.add(h3, h4)
        if shift is not None:
            bsz, _, hh, ww = a.shape
            if self.granularity == "channel":
                if shift.shape[-1] != self.filters:
                    raise ShapeError(f"{self.name}: shift has {shift.shape[-1]} channels, expected {self.filters}")
                shift = ops.reshape(shift, (bsz, self.filters, 1, 1))
            else:
                expected = self.filters * hh * ww
                if shift.shape[-1] != expected:
                    raise ShapeError(f"{self.name}: shift length {shift.shape[-1]} != {expected}")
                shift = ops.reshape(shift, (bsz, self.filters, hh, ww))
        h_out = _apply_hidden_shift(ops.relu, a, shift, mode)
        return ops.maxpool2(h_out), a


class AdaLSTMCell:
    """LSTM cell whose hidden state accepts a per-step shift.

    Gates and cell update are standard; the shift joins the tanh of the cell
    state inside the output-gate product.  The cell state itself propagates
    unshifted.  Conditioning reads from the cell state c_t.
    """

    def __init__(self, name: str, in_dim: int, hidden: int, rng):
        self.name = name
        self.width = hidden
        self.activation = "tanh"
        z = in_dim + hidden
        self.W_i = Parameter(f"{name}.W_i", he_normal(rng, (hidden, z), z))
        self.W_f = Parameter(f"{name}.W_f", he_normal(rng, (hidden, z), z))
        self.W_o = Parameter(f"{name}.W_o", he_normal(rng, (hidden, z), z))
        self.W_v = Parameter(f"{name}.W_v", he_normal(rng, (hidden, z), z))
        self.b_i = Parameter(f"{name}.b_i", np.zeros(hidden))
        self.b_f = Parameter(f"{name}.b_f", np.zeros(hidden))
        self.b_o = Parameter(f"{name}.b_o", np.zeros(hidden))
        self.b_v = Parameter(f"{name}.b_v", np.zeros(hidden))

    def params(self):
        return [self.W_i, self.W_f, self.W_o, self.W_v,
                self.b_i, self.b_f, self.b_o, self.b_v]

    def _gate(self, z: Tensor, W: Parameter, b: Parameter) -> Tensor:
        return ops.add(ops.matmul(z, ops.transpose(W.value)), b.value)

    def step(self, x: Tensor, h_prev: Tensor, c_prev: Tensor,
             shift: Tensor | None, mode: ShiftMode):
        """One time step; returns (h_t, c_t)."""
        if shift is not None and shift.shape[-1] != self.width:
            raise ShapeError(f"{self.name}: shift width {shift.shape[-1]} != {self.width}")
        z = ops.concat([x, h_prev], axis=1)
        i = ops.sigmoid(self._gate(z, self.W_i, self.b_i))
        f = ops.sigmoid(self._gate(z, self.W_f, self.b_f))
        o = ops.sigmoid(self._gate(z, self.W_o, self.b_o))
        v = ops.tanh(self._gate(z, self.W_v, self.b_v))
        c = ops.add(ops.mul(v, i), ops.mul(c_prev, f))
        base = _apply_hidden_shift(ops.tanh, c, shift, mode)
        h = ops.mul(base, o)
        return h, c


class Embedding:
    """Learned token embedding table."""

    def __init__(self, name: str, vocab: int, dim: int, rng):
        self.name = name
        self.dim = dim
        self.table = Parameter(f"{name}.table", rng.standard_normal((vocab, dim)) * np.sqrt(2.0 / dim))

    def params(self):
        return [self.table]

    def __call__(self, indices) -> Tensor:
        return ops.gather_rows(self.table.value, indices)
