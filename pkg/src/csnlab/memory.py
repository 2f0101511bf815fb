"""Episode-scoped key-value working memory for activation shifts.

The description phase writes one row per labeled example: the key function
embeds the input into a d-dimensional key, and the value function turns each
neuron's conditioning vector into one shift-template value.  The prediction
phase embeds the query, attends over the stored keys by cosine similarity,
and mixes the value rows into per-layer shifts.  Keys correspond to inputs,
so a single attention weighting serves every layer and time step.

A bank lives for exactly one episode: written once, then read-only.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .autodiff import Parameter, Tensor
from .conditioning import CsnLayerInfo
from .errors import ConfigError, UsageError
from .layers import Dense, Embedding, AdaLSTMCell, ShiftMode
from . import ops

COSINE_EPS = 1e-8
_NORM_FLOOR = 1e-30  # keeps sqrt differentiable at zero-norm keys


class AttentionMode(str, enum.Enum):
    SOFT = "soft"
    HARD = "hard"


# ---------------------------------------------------------------------------
# Key functions


class MLPKey:
    """Key embedding for flat vector inputs: relu MLP with a linear head."""

    def __init__(self, in_dim: int, hidden: tuple, key_dim: int, rng):
        dims = [in_dim, *hidden]
        self.layers = [
            Dense(f"key.fc{i}", dims[i], dims[i + 1], rng, activation="relu")
            for i in range(len(hidden))
        ]
        self.out = Dense("key.out", dims[-1], key_dim, rng)
        self.key_dim = key_dim

    def params(self):
        ps = [p for layer in self.layers for p in layer.params()]
        return ps + self.out.params()

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return self.out(x)


class ConvKey:
    """Key embedding for images: a private copy of the base learner's
    convolutional stack (run unshifted) followed by a linear map."""

    def __init__(self, conv_layers: list, flat_dim: int, key_dim: int):
        self.conv_layers = conv_layers
        self.flat_dim = flat_dim
        self.out: Dense | None = None  # set by finish()
        self.key_dim = key_dim

    def finish(self, rng):
        self.out = Dense("key.out", self.flat_dim, self.key_dim, rng)
        return self

    def params(self):
        ps = [p for layer in self.conv_layers for p in layer.params()]
        return ps + self.out.params()

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.conv_layers:
            x, _ = layer.forward(x, None, ShiftMode.NORMALIZED)
        b = x.shape[0]
        return self.out(ops.reshape(x, (b, self.flat_dim)))


class SeqKey:
    """Key embedding for token sequences: a dedicated single-layer LSTM
    encoder; the final hidden state maps linearly to the key."""

    def __init__(self, vocab: int, embed_dim: int, hidden: int, key_dim: int, rng):
        self.embed = Embedding("key.embed", vocab, embed_dim, rng)
        self.cell = AdaLSTMCell("key.lstm", embed_dim, hidden, rng)
        self.out = Dense("key.out", hidden, key_dim, rng)
        self.hidden = hidden
        self.key_dim = key_dim

    def params(self):
        return self.embed.params() + self.cell.params() + self.out.params()

    def __call__(self, tokens: np.ndarray) -> Tensor:
        tokens = np.asarray(tokens, dtype=np.int64)
        b, steps = tokens.shape
        h = Tensor(np.zeros((b, self.hidden)))
        c = Tensor(np.zeros((b, self.hidden)))
        for t in range(steps):
            x_t = self.embed(tokens[:, t])
            h, c = self.cell.step(x_t, h, c, None, ShiftMode.NORMALIZED)
        return self.out(h)


# ---------------------------------------------------------------------------
# Value functions (all strictly coordinate-wise: one neuron's conditioning
# vector in, one scalar out, parameters shared across layers)


class ValueMLP3:
    """Default 3-layer relu MLP, hidden width 20 or 40, scalar output."""

    def __init__(self, in_dim: int, width: int, rng):
        self.fc1 = Dense("value.fc1", in_dim, width, rng, activation="relu")
        self.fc2 = Dense("value.fc2", width, width, rng, activation="relu")
        self.out = Dense("value.out", width, 1, rng)

    def params(self):
        return self.fc1.params() + self.fc2.params() + self.out.params()

    def __call__(self, info: Tensor) -> Tensor:
        return self.out(self.fc2(self.fc1(info)))


class ScalarLambda:
    """Ablation: one learned scalar multiplying the raw gradient."""

    def __init__(self, in_dim: int, rng):
        if in_dim != 1:
            raise ConfigError(
                "scalar_lambda expects raw 1-dim gradient conditioning "
                f"(got width {in_dim}); use gradient mode"
            )
        del rng
        self.lam = Parameter("value.lambda", np.ones(()))

    def params(self):
        return [self.lam]

    def __call__(self, info: Tensor) -> Tensor:
        return ops.mul(info, self.lam.value)


class Perceptron1:
    """Ablation: a single linear layer in place of the deep value MLP."""

    def __init__(self, in_dim: int, rng):
        self.out = Dense("value.out", in_dim, 1, rng)

    def params(self):
        return self.out.params()

    def __call__(self, info: Tensor) -> Tensor:
        return self.out(info)


# ---------------------------------------------------------------------------


@dataclass
class MemoryBank:
    """Keys (n, d) plus one value matrix per shifted layer.

    Value rows are flattened per example: (n, row_len) for flat layers and
    (n, steps * row_len) for recurrent ones.
    """

    keys: Tensor
    values: dict
    meta: tuple

    @property
    def n(self) -> int:
        return self.keys.shape[0]


@dataclass
class ShiftSet:
    """Per-layer shifts for a batch of queries, plus the attention used."""

    shifts: dict
    attention: Tensor


def write_memory(key_inputs, infos: list, key_fn, value_fn,
                 layer_meta: tuple[CsnLayerInfo, ...]) -> MemoryBank:
    """Populate a bank from n description examples.

    ``infos`` holds one conditioning dict per example (layer name ->
    (L, m) or (S, L, m) array).  Keys and values stay on the active tape so
    meta-training reaches the key and value functions.
    """
    n = len(infos)
    if n == 0:
        raise UsageError("write_memory: empty task description")
    keys = key_fn(key_inputs)
    if keys.shape[0] != n:
        raise ConfigError(f"write_memory: {keys.shape[0]} keys for {n} info rows")

    values: dict[str, Tensor] = {}
    for meta in layer_meta:
        rows = []
        for info in infos:
            arr = np.asarray(info[meta.name], dtype=np.float64)
            flat = arr.reshape(-1, arr.shape[-1])  # (steps*L or L, m)
            row = value_fn(Tensor(flat))  # (rows, 1)
            rows.append(ops.reshape(row, (1, flat.shape[0])))
        values[meta.name] = rows[0] if n == 1 else ops.concat(rows, axis=0)
    return MemoryBank(keys=keys, values=values, meta=tuple(layer_meta))


def _cosine_scores(queries: Tensor, keys: Tensor) -> Tensor:
    dots = ops.matmul(queries, ops.transpose(keys))
    qn = ops.sqrt(ops.clamp_min(ops.tsum(ops.mul(queries, queries), axis=1, keepdims=True), _NORM_FLOOR))
    kn = ops.sqrt(ops.clamp_min(ops.tsum(ops.mul(keys, keys), axis=1, keepdims=True), _NORM_FLOOR))
    denom = ops.clamp_min(ops.mul(qn, ops.transpose(kn)), COSINE_EPS)
    return ops.div(dots, denom)


def read_shifts(query_inputs, bank: MemoryBank, key_fn,
                mode: AttentionMode = AttentionMode.SOFT) -> ShiftSet:
    """Retrieve per-layer shifts for a batch of queries.

    Soft attention mixes value rows by softmax over cosine similarities;
    hard attention copies the single best-matching row (ties break to the
    lowest index).  One attention weighting is shared by all layers.
    """
    if bank.n == 0:
        raise UsageError("read_shifts: empty memory bank")
    queries = key_fn(query_inputs)
    cos = _cosine_scores(queries, bank.keys)
    if mode is AttentionMode.SOFT:
        alpha = ops.softmax(cos)
    elif mode is AttentionMode.HARD:
        # argmax is piecewise constant, so attention enters as a constant
        # and gradients reach the values but not the keys.
        best = cos.data.argmax(axis=1)
        one_hot = np.zeros(cos.shape)
        one_hot[np.arange(cos.shape[0]), best] = 1.0
        alpha = Tensor(one_hot)
    else:
        raise ConfigError(f"unknown attention mode {mode!r}")

    shifts = {meta.name: ops.matmul(alpha, bank.values[meta.name]) for meta in bank.meta}
    return ShiftSet(shifts=shifts, attention=alpha)


def make_value_fn(kind: str, in_dim: int, width: int, rng):
    if kind == "mlp3":
        return ValueMLP3(in_dim, width, rng)
    if kind == "scalar_lambda":
        return ScalarLambda(in_dim, rng)
    if kind == "perceptron1":
        return Perceptron1(in_dim, rng)
    raise ConfigError(f"unknown value function '{kind}'")
