"""Reverse-mode automatic differentiation over dense float64 arrays.

A ``Tape`` records every differentiable operation in execution order, which
is a topological order by construction: an op can only consume tensors that
already exist.  ``backward`` therefore walks the tape once, in reverse, and
visits each node exactly once.

Tensors are immutable after creation and safe to share read-only; a tape has
a single writer (the thread running the forward pass).
"""

from __future__ import annotations

import contextlib
from typing import Iterable, Sequence

import numpy as np

from .errors import NumericError, UsageError


class Counters:
    """Process-wide instrumentation.

    ``backward_traversals`` counts full reverse sweeps; the direct-feedback
    conditioning path is asserted against it (it must stay at zero during
    extraction).  ``ce_clamps`` counts cross-entropy probability clamps.
    """

    def __init__(self):
        self.reset()

    def reset(self):
        self.backward_traversals = 0
        self.ce_clamps = 0


counters = Counters()

_NO_TAPE = object()
_TAPE_STACK: list = []


def active_tape():
    """The tape ops currently record onto, or None."""
    if not _TAPE_STACK:
        return None
    top = _TAPE_STACK[-1]
    return None if top is _NO_TAPE else top


@contextlib.contextmanager
def no_grad():
    """Suspend recording: ops executed inside compute values only."""
    _TAPE_STACK.append(_NO_TAPE)
    try:
        yield
    finally:
        _TAPE_STACK.pop()


class Tensor:
    """Dense float64 array with optional gradient tracking.

    ``data`` is contiguous row-major and never mutated after construction.
    ``node`` links the tensor to the tape op that produced it (None for
    leaves and constants).
    """

    __slots__ = ("data", "requires_grad", "node", "tape")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.node = None
        self.tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Node:
    """One recorded operation: inputs, output, and its backward rule.

    ``backward`` maps the gradient at the output to a tuple of gradients,
    one per input (None to send nothing).
    """

    __slots__ = ("op", "inputs", "out", "backward", "index")

    def __init__(self, op, inputs, out, backward, index):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.backward = backward
        self.index = index


class Tape:
    """Ordered op record; use as a context manager around a forward pass."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        if popped is not self:  # pragma: no cover - indicates misuse
            raise UsageError("tape context exited out of order")
        return False

    def __len__(self):
        return len(self.nodes)


def record(op: str, out_data: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    """Wrap an op result in a Tensor, recording it when gradients are needed.

    Every op output is checked for finiteness here: NaN/Inf is surfaced as a
    NumericError naming the op, never propagated silently.
    """
    if not np.all(np.isfinite(out_data)):
        raise NumericError(op)
    out = Tensor(out_data)
    tape = active_tape()
    if tape is None or not any(t.requires_grad for t in inputs):
        return out
    for t in inputs:
        if t.node is not None and t.tape is not tape:
            raise UsageError(
                f"op '{op}': input produced on a different tape; "
                "detach it (stop_gradient) before crossing tapes"
            )
    node = Node(op, tuple(inputs), out, backward, len(tape.nodes))
    tape.nodes.append(node)
    out.node = node
    out.tape = tape
    out.requires_grad = True
    return out


class Gradients:
    """Result of a backward sweep: gradient lookup by tensor identity."""

    def __init__(self, table: dict):
        self._table = table

    def wrt(self, tensor: Tensor) -> np.ndarray:
        g = self._table.get(id(tensor))
        if g is None:
            return np.zeros_like(tensor.data)
        return g


def backward(root: Tensor, capture: Iterable[Tensor] = ()) -> Gradients:
    """Reverse-mode sweep from a scalar root.

    Returns gradients for every tensor reachable from the root, including
    named intermediates passed via ``capture`` (zeros if unreachable).
    """
    if root.node is None:
        raise UsageError("backward: tensor is not on a tape")
    if root.size != 1:
        raise UsageError(f"backward: root must be scalar, got shape {root.shape}")
    tape: Tape = root.tape
    counters.backward_traversals += 1

    # Mark ancestors of the root so the reverse sweep skips unrelated nodes.
    needed = set()
    stack = [root.node]
    while stack:
        node = stack.pop()
        if node.index in needed:
            continue
        needed.add(node.index)
        for t in node.inputs:
            if t.node is not None:
                stack.append(t.node)

    table: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(tape.nodes[: root.node.index + 1]):
        if node.index not in needed:
            continue
        g_out = table.get(id(node.out))
        if g_out is None:
            continue
        in_grads = node.backward(g_out)
        for t, g in zip(node.inputs, in_grads):
            if g is None:
                continue
            prev = table.get(id(t))
            table[id(t)] = g if prev is None else prev + g
    # Touch capture handles so zero-gradient intermediates resolve cleanly.
    for t in capture:
        table.setdefault(id(t), np.zeros_like(t.data))
    return Gradients(table)


class Parameter:
    """A learned tensor with a gradient accumulator.

    ``grad`` always matches ``value`` in shape and is zeroed between
    optimizer steps by the training loop.
    """

    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = Tensor(value, requires_grad=True)
        self.grad = np.zeros_like(self.value.data)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0.0

    def assign(self, array: np.ndarray):
        """Replace the parameter value (optimizer step / model load)."""
        arr = np.ascontiguousarray(array, dtype=np.float64)
        if arr.shape != self.value.shape:
            raise UsageError(
                f"parameter '{self.name}': assign shape {arr.shape} != {self.value.shape}"
            )
        self.value = Tensor(arr, requires_grad=True)
        if self.grad.shape != arr.shape:  # pragma: no cover - shapes fixed
            self.grad = np.zeros_like(arr)

    def __repr__(self):
        return f"Parameter({self.name}, shape={self.shape})"


def accumulate_grads(params: Iterable[Parameter], grads: Gradients):
    for p in params:
        p.grad += grads.wrt(p.value)
