"""Per-example conditioning information for shifted neurons.

During the description phase the meta learner watches the base learner
handle each labeled example and distills, for every shifted layer, one
feature vector per neuron:

* gradient mode: the loss gradient at the layer pre-activation, put through
  a log/sign preprocessing so magnitudes across layers are comparable
  (2 values per neuron);
* direct-feedback mode: the activation derivative times the output error
  (C values per neuron), computed from the forward pass alone - no backward
  traversal happens, which the instrumentation counter can assert.

Extraction treats its result as a constant: meta-training gradients do not
flow back through the extracted values (first-order training only), which
is equivalent to placing a stop-gradient barrier right after extraction.
Extraction never mutates model parameters.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .autodiff import Tape, backward, no_grad
from .errors import ConfigError
from .layers import activation_deriv
from . import ops


class ConditioningMode(str, enum.Enum):
    GRADIENT = "grad"
    DIRECT_FEEDBACK = "df"


@dataclass(frozen=True)
class CsnLayerInfo:
    """Describes one shifted layer's conditioning read point.

    ``reduce`` handles convolutional layers: 'channel' collapses the spatial
    map to one value per filter (gradients sum, activation derivatives
    average), 'unit' keeps every position, 'none' is for flat layers.
    ``steps`` is the sequence length for recurrent layers, else None.
    ``row_len`` is the number of shift values stored per description example
    and time step.
    """

    name: str
    activation: str  # tanh | relu | output
    row_len: int
    reduce: str = "none"
    steps: int | None = None


def preprocess_gradient(grad, p: float = 7.0) -> np.ndarray:
    """Log-magnitude/sign encoding of gradients, elementwise.

    Values with |g| >= e^-p map to (log|g|/p, sgn g); smaller ones map to
    (-1, e^p * g).  Total on all finite inputs (g = 0 gives (-1, 0)); the
    two branches agree at the boundary.  Returns an array shaped like the
    input plus a trailing axis of size 2.
    """
    if p <= 0:
        raise ConfigError(f"preprocessing constant must be positive, got {p}")
    g = np.asarray(grad, dtype=np.float64)
    mag = np.abs(g)
    big = mag >= np.exp(-p)
    safe = np.where(big, mag, 1.0)  # avoid log(0) on the small branch
    first = np.where(big, np.log(safe) / p, -1.0)
    second = np.where(big, np.sign(g), np.exp(p) * g)
    return np.stack([first, second], axis=-1)


def _reduce_grad(g: np.ndarray, info: CsnLayerInfo) -> np.ndarray:
    """Collapse a pre-activation gradient to one value per stored neuron."""
    if info.reduce == "none":
        return g
    if info.reduce == "channel":
        # Chain rule for a scalar shared across a channel's positions.
        return g.sum(axis=(-2, -1))
    return g.reshape(-1)  # unit


def _reduce_deriv(d: np.ndarray, info: CsnLayerInfo) -> np.ndarray:
    """Collapse an activation derivative map to one value per stored neuron."""
    if info.reduce == "none":
        return d
    if info.reduce == "channel":
        # Mean keeps the per-channel value on the same scale as a single
        # neuron's derivative regardless of spatial size.
        return d.mean(axis=(-2, -1))
    return d.reshape(-1)


def extract_gradient_info(model, x, y: np.ndarray, p: float = 7.0,
                          preprocess: bool = True) -> dict:
    """Gradient conditioning for one description example.

    Runs a forward plus one backward pass on a private tape, captures the
    loss gradient at every shifted layer's pre-activation, and preprocesses
    it.  Returns {layer name: (L, m)} arrays ((S, L, m) for recurrent
    layers), detached from any tape.
    """
    with Tape():
        probs, trace = model.forward_trace(model.prepare_batch([x]))
        loss = ops.cross_entropy(probs, np.asarray(y)[None, :])
        nodes = []
        for info in model.csn_layers:
            entry = trace.get(info.name)
            if entry is None:
                raise ConfigError(f"layer '{info.name}' has no registered pre-activation node")
            nodes.extend(entry if isinstance(entry, list) else [entry])
        grads = backward(loss, capture=nodes)

    out = {}
    for info in model.csn_layers:
        entry = trace[info.name]
        if info.steps is None:
            raw = _reduce_grad(grads.wrt(entry)[0], info)
        else:
            raw = np.stack([_reduce_grad(grads.wrt(t)[0], info) for t in entry])
        out[info.name] = preprocess_gradient(raw, p) if preprocess else raw[..., None]
    return out


def extract_df_info(model, x, y: np.ndarray) -> dict:
    """Direct-feedback conditioning for one description example.

    Forward pass only.  Each neuron receives its activation derivative times
    the output error (prediction minus one-hot label); the softmax output
    layer has no per-neuron elementwise derivative, so it uses 1, making its
    feedback equal the true loss gradient at the logits.
    """
    with no_grad():
        probs, trace = model.forward_trace(model.prepare_batch([x]))
    err = probs.data[0] - np.asarray(y, dtype=np.float64)

    out = {}
    for info in model.csn_layers:
        entry = trace.get(info.name)
        if entry is None:
            raise ConfigError(f"layer '{info.name}' has no registered pre-activation node")

        def deriv_of(tensor):
            a = tensor.data[0]
            if info.activation == "output":
                d = np.ones_like(a)
            else:
                d = activation_deriv(info.activation, a)
            return _reduce_deriv(d, info)

        if info.steps is None:
            d = deriv_of(entry)
            out[info.name] = d[:, None] * err[None, :]
        else:
            rows = [deriv_of(t) for t in entry]
            out[info.name] = np.stack([d[:, None] * err[None, :] for d in rows])
    return out


def extract_recurrent_info(model, x_sequence, y: np.ndarray, mode: ConditioningMode,
                           p: float = 7.0, preprocess: bool = True) -> dict:
    """Conditioning for a sequence example, indexed (layer, timestep).

    Same machinery as the flat extractors; recurrent layers contribute one
    row per time step (gradient mode reads d(loss)/d(cell state) through
    time, direct feedback reads tanh'(cell state) at each step).
    """
    if mode is ConditioningMode.GRADIENT:
        return extract_gradient_info(model, x_sequence, y, p=p, preprocess=preprocess)
    return extract_df_info(model, x_sequence, y)


def extract_info(model, x, y: np.ndarray, mode: ConditioningMode,
                 p: float = 7.0, preprocess: bool = True) -> dict:
    if mode is ConditioningMode.GRADIENT:
        return extract_gradient_info(model, x, y, p=p, preprocess=preprocess)
    if mode is ConditioningMode.DIRECT_FEEDBACK:
        return extract_df_info(model, x, y)
    raise ConfigError(f"unknown conditioning mode {mode!r}")


def info_width(mode: ConditioningMode, classes: int, preprocess: bool = True) -> int:
    """Per-neuron feature width the value function must accept."""
    if mode is ConditioningMode.GRADIENT:
        return 2 if preprocess else 1
    return classes
