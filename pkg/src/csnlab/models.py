"""Complete adaptive models and the two-phase describe/predict protocol.

A model couples a base learner (the predicting network, whose neurons accept
shifts) with the meta machinery: a key function embedding inputs for memory
addressing and a coordinate-wise value function turning conditioning vectors
into shift templates.  The description phase runs the base learner with all
shifts at zero, so it behaves exactly like its unadapted counterpart, and
only produces a memory bank; prediction retrieves shifts by attention and
runs the conditioned forward pass.  Training happens end to end: an episode
loss built on one tape reaches the base, key, and value parameters.
"""

from __future__ import annotations

import struct
import time
from dataclasses import dataclass

import numpy as np

from .autodiff import Parameter, Tensor, as_tensor
from .conditioning import ConditioningMode, CsnLayerInfo, extract_info, info_width
from .errors import ConfigError, UsageError
from .layers import AdaLSTMCell, ConvCSN, DenseCSN, Embedding, OutputCSN, ResBlockCSN, ShiftMode
from .memory import (AttentionMode, ConvKey, MLPKey, MemoryBank, SeqKey,
                     make_value_fn, read_shifts, write_memory)
from . import config as configmod
from . import ops, tensorfile

MODEL_MAGIC = b"CSNM"
MODEL_VERSION = 1

ARCH_INPUT_KINDS = {
    "adaffn": "vector",
    "adacnn": "image",
    "adaresnet": "image",
    "adalstm": "tokens",
    "lstm_adaffn": "tokens",
}


@dataclass
class ModelSpec:
    """Everything needed to rebuild a model (minus the learned values)."""

    arch: str
    classes: int
    input_kind: str
    input_dim: int = 0
    image_size: int = 0
    channels: int = 1
    vocab: int = 0
    seq_len: int = 0
    embed_dim: int = 32
    hidden: tuple = (64, 64)
    activation: str = "tanh"
    filters: int = 32
    conv_layers: int = 5
    csn_count: int = 4
    block_filters: tuple = (64, 96, 128, 256)
    filter_divisor: int = 4
    csn_blocks: int = 2
    lstm_hidden: tuple = (64,)
    dropout: tuple = ()
    shifts_enabled: bool = True
    granularity: str = "channel"
    shift_mode: ShiftMode = ShiftMode.NORMALIZED
    cond_mode: ConditioningMode = ConditioningMode.GRADIENT
    preprocess_p: float = 7.0
    stop_grad_conditioning: bool = True
    attention: AttentionMode = AttentionMode.SOFT
    key_dim: int = 64
    key_hidden: tuple = (64,)
    value_fn: str = "mlp3"
    value_hidden: int = 20

    @property
    def preprocess(self) -> bool:
        # The scalar-multiplier ablation consumes raw gradients.
        return self.value_fn != "scalar_lambda"

    def validate(self):
        if self.arch not in ARCH_INPUT_KINDS:
            raise ConfigError(f"unknown architecture '{self.arch}'")
        if self.input_kind and self.input_kind != ARCH_INPUT_KINDS[self.arch]:
            raise ConfigError(
                f"architecture '{self.arch}' expects {ARCH_INPUT_KINDS[self.arch]} input, "
                f"source provides {self.input_kind}"
            )
        if not self.stop_grad_conditioning:
            raise ConfigError(
                "cond.stop_grad = false would require second-order derivatives "
                "through the conditioning extraction; only 'true' is supported"
            )
        if self.value_fn == "scalar_lambda" and self.cond_mode is not ConditioningMode.GRADIENT:
            raise ConfigError("scalar_lambda only applies to gradient conditioning")
        if self.value_fn == "perceptron1" and self.cond_mode is not ConditioningMode.DIRECT_FEEDBACK:
            raise ConfigError("perceptron1 is the direct-feedback value ablation")
        if self.classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.classes}")
        return self


def spec_from_config(cfg: dict) -> ModelSpec:
    """Build a ModelSpec from a finalized config dict."""
    return ModelSpec(
        arch=cfg["model.arch"],
        classes=cfg["model.classes"],
        input_kind=cfg["model.input_kind"],
        input_dim=cfg["model.input_dim"],
        image_size=cfg["model.image_size"],
        channels=cfg["model.channels"],
        vocab=cfg["model.vocab"],
        seq_len=cfg["model.seq_len"],
        embed_dim=cfg["model.embed_dim"],
        hidden=tuple(cfg["model.hidden"]),
        activation=cfg["model.activation"],
        filters=cfg["model.filters"],
        conv_layers=cfg["model.conv_layers"],
        csn_count=cfg["model.csn_layers"],
        block_filters=tuple(cfg["model.block_filters"]),
        filter_divisor=cfg["model.filter_divisor"],
        csn_blocks=cfg["model.csn_blocks"],
        lstm_hidden=tuple(cfg["model.lstm_hidden"]),
        dropout=tuple(cfg["model.dropout"]),
        shifts_enabled=cfg["model.shifts_enabled"],
        granularity=cfg["model.resblock_shift_granularity"],
        shift_mode=ShiftMode(cfg["ablation.shift_mode"]),
        cond_mode=ConditioningMode(cfg["cond.mode"]),
        preprocess_p=cfg["cond.preprocess_p"],
        stop_grad_conditioning=cfg["cond.stop_grad"],
        attention=AttentionMode(cfg["memory.attention"]),
        key_dim=cfg["memory.key_dim"],
        key_hidden=tuple(cfg["memory.key_hidden"]),
        value_fn=cfg["ablation.value_fn"],
        value_hidden=cfg["memory.value_hidden"],
    ).validate()


def spec_to_config(spec: ModelSpec) -> dict:
    return {
        "model.arch": spec.arch,
        "model.classes": spec.classes,
        "model.input_kind": spec.input_kind,
        "model.input_dim": spec.input_dim,
        "model.image_size": spec.image_size,
        "model.channels": spec.channels,
        "model.vocab": spec.vocab,
        "model.seq_len": spec.seq_len,
        "model.embed_dim": spec.embed_dim,
        "model.hidden": spec.hidden,
        "model.activation": spec.activation,
        "model.filters": spec.filters,
        "model.conv_layers": spec.conv_layers,
        "model.csn_layers": spec.csn_count,
        "model.block_filters": spec.block_filters,
        "model.filter_divisor": spec.filter_divisor,
        "model.csn_blocks": spec.csn_blocks,
        "model.lstm_hidden": spec.lstm_hidden,
        "model.dropout": spec.dropout,
        "model.shifts_enabled": spec.shifts_enabled,
        "model.resblock_shift_granularity": spec.granularity,
        "ablation.shift_mode": spec.shift_mode.value,
        "ablation.value_fn": spec.value_fn,
        "cond.mode": spec.cond_mode.value,
        "cond.preprocess_p": spec.preprocess_p,
        "cond.stop_grad": spec.stop_grad_conditioning,
        "memory.attention": spec.attention.value,
        "memory.key_dim": spec.key_dim,
        "memory.key_hidden": spec.key_hidden,
        "memory.value_hidden": spec.value_hidden,
    }


def _pooled(size: int, times: int) -> int:
    for _ in range(times):
        size = (size + 1) // 2
    return size


def _pad_rates(rates: tuple, n: int) -> tuple:
    if len(rates) > n:
        raise ConfigError(f"model.dropout lists {len(rates)} rates for {n} layers")
    return rates + (0.0,) * (n - len(rates))


class CSNModel:
    """Base class: ordered base-learner layers plus meta components.

    Subclasses populate ``base_layers`` (in forward order), ``csn_layers``
    (conditioning metadata for the shift-carrying subset), and the key/value
    functions when shifts are enabled.
    """

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        self.base_layers: list = []
        self.csn_layers: tuple = ()
        self.key_fn = None
        self.value_fn = None

    # -- parameters ---------------------------------------------------

    def param_groups(self) -> dict:
        groups = {"base": [p for layer in self.base_layers for p in layer.params()]}
        if self.key_fn is not None:
            groups["key"] = self.key_fn.params()
        if self.value_fn is not None:
            groups["value"] = self.value_fn.params()
        return groups

    def parameters(self) -> list:
        return [p for ps in self.param_groups().values() for p in ps]

    def zero_grads(self):
        for p in self.parameters():
            p.zero_grad()

    # -- forward ---------------------------------------------------------

    def prepare_batch(self, xs) -> np.ndarray:
        raise NotImplementedError

    def forward_trace(self, x, shifts=None, train=False, rng=None):
        raise NotImplementedError

    def forward_plain(self, xs) -> Tensor:
        """Unadapted forward pass (all shifts zero) on raw examples."""
        probs, _ = self.forward_trace(self.prepare_batch(xs))
        return probs

    def _shift_for(self, shifts, name):
        return None if shifts is None else shifts.get(name)


class FFNModel(CSNModel):
    """Fully connected classifier with shifted hidden layers."""

    def __init__(self, spec: ModelSpec, rng: np.random.Generator):
        super().__init__(spec)
        dims = [spec.input_dim, *spec.hidden]
        self.hidden_layers = [
            DenseCSN(f"fc{i + 1}", dims[i], dims[i + 1], rng, spec.activation)
            for i in range(len(spec.hidden))
        ]
        self.out = OutputCSN("out", dims[-1], spec.classes, rng)
        self.base_layers = [*self.hidden_layers, self.out]
        self.rates = _pad_rates(spec.dropout, len(self.base_layers))
        self.csn_layers = tuple(
            [CsnLayerInfo(l.name, l.activation, l.width) for l in self.hidden_layers]
            + [CsnLayerInfo("out", "output", spec.classes)]
        )
        if spec.shifts_enabled:
            self.key_fn = MLPKey(spec.input_dim, spec.key_hidden, spec.key_dim, rng)
            self.value_fn = make_value_fn(
                spec.value_fn, info_width(spec.cond_mode, spec.classes, spec.preprocess),
                spec.value_hidden, rng)

    def prepare_batch(self, xs) -> np.ndarray:
        return np.stack([np.asarray(x, dtype=np.float64) for x in xs])

    def forward_trace(self, x, shifts=None, train=False, rng=None):
        h = as_tensor(x)
        trace = {}
        for i, layer in enumerate(self.hidden_layers):
            if train and self.rates[i] > 0:
                h = ops.dropout(h, self.rates[i], rng)
            h, a = layer.forward(h, self._shift_for(shifts, layer.name), self.spec.shift_mode)
            trace[layer.name] = a
        if train and self.rates[-1] > 0:
            h = ops.dropout(h, self.rates[-1], rng)
        probs, a = self.out.forward(h, self._shift_for(shifts, "out"))
        trace["out"] = a
        return probs, trace


class CNNModel(CSNModel):
    """Stack of conv/relu/max-pool layers with shifts on the trailing ones."""

    def __init__(self, spec: ModelSpec, rng: np.random.Generator):
        super().__init__(spec)
        n = spec.conv_layers
        chans = [spec.channels] + [spec.filters] * n
        self.convs = [
            ConvCSN(f"conv{i + 1}", chans[i], chans[i + 1], rng, spec.granularity)
            for i in range(n)
        ]
        # spatial side length going into each conv (shift applies pre-pool)
        self.pre_pool_sizes = [_pooled(spec.image_size, i) for i in range(n)]
        flat_side = _pooled(spec.image_size, n)
        self.flat_dim = spec.filters * flat_side * flat_side
        self.out = OutputCSN("out", self.flat_dim, spec.classes, rng)
        self.base_layers = [*self.convs, self.out]
        self.rates = _pad_rates(spec.dropout, len(self.base_layers))

        carrying = min(spec.csn_count, len(self.base_layers))
        names = [l.name for l in self.base_layers][-carrying:]
        infos = []
        for i, conv in enumerate(self.convs):
            if conv.name in names:
                side = self.pre_pool_sizes[i]
                infos.append(CsnLayerInfo(conv.name, "relu",
                                          conv.shift_width(side, side),
                                          reduce=spec.granularity))
        if "out" in names:
            infos.append(CsnLayerInfo("out", "output", spec.classes))
        self.csn_layers = tuple(infos)
        self._csn_names = set(names)

        if spec.shifts_enabled:
            key_convs = [
                ConvCSN(f"key.conv{i + 1}", chans[i], chans[i + 1], rng, spec.granularity)
                for i in range(n)
            ]
            self.key_fn = ConvKey(key_convs, self.flat_dim, spec.key_dim).finish(rng)
            self.value_fn = make_value_fn(
                spec.value_fn, info_width(spec.cond_mode, spec.classes, spec.preprocess),
                spec.value_hidden, rng)

    def prepare_batch(self, xs) -> np.ndarray:
        batch = np.stack([np.asarray(x, dtype=np.float64) for x in xs])
        if batch.ndim == 3:  # (B, H, W) grayscale
            batch = batch[:, None, :, :]
        # center [0,1] pixels; an all-positive input cone collapses the
        # relu key embeddings onto one direction and stalls attention
        return batch * 2.0 - 1.0

    def forward_trace(self, x, shifts=None, train=False, rng=None):
        h = as_tensor(x)
        trace = {}
        for i, conv in enumerate(self.convs):
            if train and self.rates[i] > 0:
                h = ops.dropout(h, self.rates[i], rng)
            shift = self._shift_for(shifts, conv.name) if conv.name in self._csn_names else None
            h, a = conv.forward(h, shift, self.spec.shift_mode)
            if conv.name in self._csn_names:
                trace[conv.name] = a
        h = ops.reshape(h, (h.shape[0], self.flat_dim))
        if train and self.rates[-1] > 0:
            h = ops.dropout(h, self.rates[-1], rng)
        probs, a = self.out.forward(h, self._shift_for(shifts, "out"))
        trace["out"] = a
        return probs, trace


class ResNetModel(CSNModel):
    """Residual blocks with shifted outputs, then two shifted dense layers."""

    def __init__(self, spec: ModelSpec, rng: np.random.Generator):
        super().__init__(spec)
        filters = [max(1, f // spec.filter_divisor) for f in spec.block_filters]
        chans = [spec.channels] + filters
        self.blocks = [
            ResBlockCSN(f"block{i + 1}", chans[i], chans[i + 1], rng, spec.granularity)
            for i in range(len(filters))
        ]
        self.pre_pool_sizes = [_pooled(spec.image_size, i) for i in range(len(filters))]
        flat_side = _pooled(spec.image_size, len(filters))
        self.flat_dim = filters[-1] * flat_side * flat_side
        fc_width = spec.hidden[0] if spec.hidden else 64
        self.fc1 = DenseCSN("fc1", self.flat_dim, fc_width, rng, "relu")
        self.out = OutputCSN("out", fc_width, spec.classes, rng)
        self.base_layers = [*self.blocks, self.fc1, self.out]
        self.rates = _pad_rates(spec.dropout, len(self.base_layers))

        carrying = [b.name for b in self.blocks[-min(spec.csn_blocks, len(self.blocks)):]]
        infos = []
        for i, block in enumerate(self.blocks):
            if block.name in carrying:
                side = self.pre_pool_sizes[i]
                infos.append(CsnLayerInfo(block.name, "relu",
                                          block.shift_width(side, side),
                                          reduce=spec.granularity))
        infos.append(CsnLayerInfo("fc1", "relu", fc_width))
        infos.append(CsnLayerInfo("out", "output", spec.classes))
        self.csn_layers = tuple(infos)
        self._csn_names = set(carrying) | {"fc1", "out"}

        if spec.shifts_enabled:
            key_blocks = [
                ResBlockCSN(f"key.block{i + 1}", chans[i], chans[i + 1], rng, spec.granularity)
                for i in range(len(filters))
            ]
            self.key_fn = ConvKey(key_blocks, self.flat_dim, spec.key_dim).finish(rng)
            self.value_fn = make_value_fn(
                spec.value_fn, info_width(spec.cond_mode, spec.classes, spec.preprocess),
                spec.value_hidden, rng)

    prepare_batch = CNNModel.prepare_batch

    def forward_trace(self, x, shifts=None, train=False, rng=None):
        h = as_tensor(x)
        trace = {}
        for i, block in enumerate(self.blocks):
            if train and self.rates[i] > 0:
                h = ops.dropout(h, self.rates[i], rng)
            shift = self._shift_for(shifts, block.name) if block.name in self._csn_names else None
            h, a = block.forward(h, shift, self.spec.shift_mode)
            if block.name in self._csn_names:
                trace[block.name] = a
        h = ops.reshape(h, (h.shape[0], self.flat_dim))
        h, a = self.fc1.forward(h, self._shift_for(shifts, "fc1"), self.spec.shift_mode)
        trace["fc1"] = a
        if train and self.rates[-1] > 0:
            h = ops.dropout(h, self.rates[-1], rng)
        probs, a = self.out.forward(h, self._shift_for(shifts, "out"))
        trace["out"] = a
        return probs, trace


class RecurrentModel(CSNModel):
    """Stacked recurrent cells shifted at every layer and time step."""

    def __init__(self, spec: ModelSpec, rng: np.random.Generator):
        super().__init__(spec)
        self.embed = Embedding("embed", spec.vocab, spec.embed_dim, rng)
        sizes = spec.lstm_hidden
        in_dims = [spec.embed_dim, *sizes[:-1]]
        self.cells = [
            AdaLSTMCell(f"lstm{i + 1}", in_dims[i], sizes[i], rng)
            for i in range(len(sizes))
        ]
        self.out = OutputCSN("out", sizes[-1], spec.classes, rng)
        self.base_layers = [self.embed, *self.cells, self.out]
        self.rates = _pad_rates(spec.dropout, len(self.cells) + 1)
        self.csn_layers = tuple(
            [CsnLayerInfo(c.name, "tanh", c.width, steps=spec.seq_len) for c in self.cells]
            + [CsnLayerInfo("out", "output", spec.classes)]
        )
        if spec.shifts_enabled:
            self.key_fn = SeqKey(spec.vocab, spec.embed_dim, spec.key_hidden[0],
                                 spec.key_dim, rng)
            self.value_fn = make_value_fn(
                spec.value_fn, info_width(spec.cond_mode, spec.classes, spec.preprocess),
                spec.value_hidden, rng)

    def prepare_batch(self, xs) -> np.ndarray:
        return pad_sequences(xs, self.spec.seq_len)

    def forward_trace(self, x, shifts=None, train=False, rng=None):
        tokens = np.asarray(x, dtype=np.int64)
        b, steps = tokens.shape
        if steps != self.spec.seq_len:
            raise UsageError(f"expected sequences of length {self.spec.seq_len}, got {steps}")
        hs = [Tensor(np.zeros((b, c.width))) for c in self.cells]
        cs = [Tensor(np.zeros((b, c.width))) for c in self.cells]
        trace = {c.name: [] for c in self.cells}
        for t in range(steps):
            layer_in = self.embed(tokens[:, t])
            for li, cell in enumerate(self.cells):
                if train and self.rates[li] > 0:
                    layer_in = ops.dropout(layer_in, self.rates[li], rng)
                shift_flat = self._shift_for(shifts, cell.name)
                shift_t = None
                if shift_flat is not None:
                    shift_t = ops.narrow(shift_flat, 1, t * cell.width, cell.width)
                hs[li], cs[li] = cell.step(layer_in, hs[li], cs[li], shift_t, self.spec.shift_mode)
                trace[cell.name].append(cs[li])
                layer_in = hs[li]
        h = hs[-1]
        if train and self.rates[-1] > 0:
            h = ops.dropout(h, self.rates[-1], rng)
        probs, a = self.out.forward(h, self._shift_for(shifts, "out"))
        trace["out"] = a
        return probs, trace


class HybridModel(CSNModel):
    """Task-agnostic recurrent encoder feeding a shifted dense head.

    Only the head adapts; the encoder's hidden states are identical for
    identical inputs regardless of the task (exposed in the trace under
    ``_encoder_final`` for verification).
    """

    def __init__(self, spec: ModelSpec, rng: np.random.Generator):
        super().__init__(spec)
        self.embed = Embedding("embed", spec.vocab, spec.embed_dim, rng)
        sizes = spec.lstm_hidden
        in_dims = [spec.embed_dim, *sizes[:-1]]
        self.cells = [
            AdaLSTMCell(f"lstm{i + 1}", in_dims[i], sizes[i], rng)
            for i in range(len(sizes))
        ]
        dims = [sizes[-1], *spec.hidden]
        self.head = [
            DenseCSN(f"head{i + 1}", dims[i], dims[i + 1], rng, spec.activation)
            for i in range(len(spec.hidden))
        ]
        self.out = OutputCSN("out", dims[-1], spec.classes, rng)
        self.base_layers = [self.embed, *self.cells, *self.head, self.out]
        self.rates = _pad_rates(spec.dropout, len(self.head) + 1)
        self.csn_layers = tuple(
            [CsnLayerInfo(l.name, l.activation, l.width) for l in self.head]
            + [CsnLayerInfo("out", "output", spec.classes)]
        )
        if spec.shifts_enabled:
            self.key_fn = SeqKey(spec.vocab, spec.embed_dim, spec.key_hidden[0],
                                 spec.key_dim, rng)
            self.value_fn = make_value_fn(
                spec.value_fn, info_width(spec.cond_mode, spec.classes, spec.preprocess),
                spec.value_hidden, rng)

    def prepare_batch(self, xs) -> np.ndarray:
        return pad_sequences(xs, self.spec.seq_len)

    def forward_trace(self, x, shifts=None, train=False, rng=None):
        tokens = np.asarray(x, dtype=np.int64)
        b, steps = tokens.shape
        hs = [Tensor(np.zeros((b, c.width))) for c in self.cells]
        cs = [Tensor(np.zeros((b, c.width))) for c in self.cells]
        for t in range(steps):
            layer_in = self.embed(tokens[:, t])
            for li, cell in enumerate(self.cells):
                hs[li], cs[li] = cell.step(layer_in, hs[li], cs[li], None, self.spec.shift_mode)
                layer_in = hs[li]
        h = hs[-1]
        trace = {"_encoder_final": h}
        for i, layer in enumerate(self.head):
            if train and self.rates[i] > 0:
                h = ops.dropout(h, self.rates[i], rng)
            h, a = layer.forward(h, self._shift_for(shifts, layer.name), self.spec.shift_mode)
            trace[layer.name] = a
        if train and self.rates[-1] > 0:
            h = ops.dropout(h, self.rates[-1], rng)
        probs, a = self.out.forward(h, self._shift_for(shifts, "out"))
        trace["out"] = a
        return probs, trace


def pad_sequences(xs, seq_len: int) -> np.ndarray:
    """Left-pad (or head-truncate) token sequences to a fixed length."""
    out = np.zeros((len(xs), seq_len), dtype=np.int64)
    for i, x in enumerate(xs):
        arr = np.asarray(x, dtype=np.int64)
        if arr.size >= seq_len:
            out[i] = arr[-seq_len:]
        else:
            out[i, seq_len - arr.size:] = arr
    return out


_ARCHS = {
    "adaffn": FFNModel,
    "adacnn": CNNModel,
    "adaresnet": ResNetModel,
    "adalstm": RecurrentModel,
    "lstm_adaffn": HybridModel,
}


def build_model(spec: ModelSpec, seed: int = 0) -> CSNModel:
    spec.validate()
    rng = np.random.default_rng(seed)
    return _ARCHS[spec.arch](spec, rng)


def silence_value_fn(model: CSNModel):
    """Zero the value function's output parameters: every stored shift
    template becomes 0 and the model reduces to its unadapted form."""
    if model.value_fn is None:
        return
    for p in model.value_fn.params():
        if p.name in ("value.out.W", "value.out.b", "value.lambda"):
            p.assign(np.zeros(p.shape))


# ---------------------------------------------------------------------------
# The describe/predict protocol


def extract_episode_info(model: CSNModel, desc_xs, desc_ys) -> list:
    """Conditioning info for each description example (one dict per example)."""
    spec = model.spec
    return [
        extract_info(model, x, y, spec.cond_mode, spec.preprocess_p, spec.preprocess)
        for x, y in zip(desc_xs, desc_ys)
    ]


def describe(model: CSNModel, desc_xs, desc_ys, frozen_info=None) -> MemoryBank:
    """Description phase: run each labeled example through the unadapted
    base learner, extract conditioning info, and write the memory bank."""
    if not model.spec.shifts_enabled:
        raise UsageError("describe: model was built with shifts disabled")
    infos = frozen_info if frozen_info is not None else extract_episode_info(model, desc_xs, desc_ys)
    key_inputs = model.prepare_batch(desc_xs)
    return write_memory(key_inputs, infos, model.key_fn, model.value_fn, model.csn_layers)


def _check_bank(model: CSNModel, bank: MemoryBank):
    expected = tuple((m.name, m.row_len, m.steps) for m in model.csn_layers)
    found = tuple((m.name, m.row_len, m.steps) for m in bank.meta)
    if expected != found:
        raise ConfigError(f"memory bank does not match model: expected {expected}, found {found}")


def predict(model: CSNModel, bank: MemoryBank, query_xs) -> Tensor:
    """Prediction phase: retrieve shifts for each query and run the
    conditioned forward pass.  Returns a (B, C) distribution tensor."""
    _check_bank(model, bank)
    prepared = model.prepare_batch(query_xs)
    shift_set = read_shifts(prepared, bank, model.key_fn, model.spec.attention)
    probs, _ = model.forward_trace(prepared, shifts=shift_set.shifts)
    return probs


def episode_loss(model: CSNModel, episode, train: bool = False,
                 rng: np.random.Generator | None = None, frozen_info=None):
    """Summed cross entropy over the episode's queries, on one tape.

    Returns (loss tensor, stats) where stats carries query accuracy and the
    wall time spent in conditioning extraction.  ``frozen_info`` substitutes
    precomputed conditioning (the gradient checker uses this so finite
    differences see the same constants the tape does).
    """
    spec = model.spec
    cond_ms = 0.0
    if spec.shifts_enabled:
        if frozen_info is None:
            t0 = time.perf_counter()
            frozen_info = extract_episode_info(model, episode.desc_x, episode.desc_y)
            cond_ms = (time.perf_counter() - t0) * 1e3
        bank = describe(model, episode.desc_x, episode.desc_y, frozen_info=frozen_info)
        prepared = model.prepare_batch(episode.query_x)
        shift_set = read_shifts(prepared, bank, model.key_fn, spec.attention)
        probs, _ = model.forward_trace(prepared, shifts=shift_set.shifts, train=train, rng=rng)
    else:
        prepared = model.prepare_batch(episode.query_x)
        probs, _ = model.forward_trace(prepared, shifts=None, train=train, rng=rng)
    loss = ops.cross_entropy(probs, episode.query_y)
    correct = probs.data.argmax(axis=1) == np.asarray(episode.query_y).argmax(axis=1)
    return loss, {"accuracy": float(correct.mean()), "cond_ms": cond_ms}


# ---------------------------------------------------------------------------
# Checkpoint format ("CSNM"): magic, version byte, length-prefixed spec text
# in the config grammar, then named parameters as CSNT tensors.


def save_model(model: CSNModel, path):
    text = configmod.to_text(spec_to_config(model.spec)).encode("utf-8")
    params = model.parameters()
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<B", MODEL_VERSION))
        fh.write(struct.pack("<I", len(text)))
        fh.write(text)
        fh.write(struct.pack("<I", len(params)))
        for p in params:
            name = p.name.encode("utf-8")
            fh.write(struct.pack("<H", len(name)))
            fh.write(name)
            # version 2 stores float64: round-trips must be bit-exact
            tensorfile.write_tensor(fh, p.value.data, version=2)


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) < n:
        raise UsageError(f"model file truncated while reading {what}")
    return data


def load_model(path, expected_spec: ModelSpec | None = None) -> CSNModel:
    """Rebuild a model from a checkpoint; round-trips are bit-exact.

    ``expected_spec`` cross-checks architecture and class count, reporting
    expected-vs-found on mismatch.
    """
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != MODEL_MAGIC:
            raise UsageError("not a model file (bad magic)")
        (version,) = struct.unpack("<B", _read_exact(fh, 1, "version"))
        if version != MODEL_VERSION:
            raise ConfigError(f"model version mismatch: expected {MODEL_VERSION}, found {version}")
        (text_len,) = struct.unpack("<I", _read_exact(fh, 4, "spec length"))
        text = _read_exact(fh, text_len, "spec").decode("utf-8")
        cfg = configmod.resolve(configmod.parse_text(text))
        spec = spec_from_config(cfg)
        if expected_spec is not None:
            for field_name in ("arch", "classes", "input_kind"):
                want = getattr(expected_spec, field_name)
                got = getattr(spec, field_name)
                if want != got:
                    raise ConfigError(f"model mismatch on {field_name}: expected {want}, found {got}")
        model = build_model(spec, seed=0)
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "parameter count"))
        loaded = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2, "parameter name"))
            name = _read_exact(fh, name_len, "parameter name").decode("utf-8")
            loaded[name] = tensorfile.read_tensor(fh)
    params = {p.name: p for p in model.parameters()}
    if set(params) != set(loaded):
        missing = sorted(set(params) - set(loaded))
        extra = sorted(set(loaded) - set(params))
        raise ConfigError(f"parameter set mismatch: missing {missing}, unexpected {extra}")
    for name, arr in loaded.items():
        params[name].assign(arr)
    return model
