"""Finite-difference gradient oracle.

The oracle is deliberately independent of the tape: it perturbs parameter
values and re-evaluates the target function, so a broken backward rule
cannot hide.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autodiff import Parameter, Tape, Tensor, backward
from .errors import OracleInvalidError, UsageError
from . import ops

REL_ERR_DENOM_FLOOR = 1e-8


def _rel_err(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), REL_ERR_DENOM_FLOOR)


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Sequence[Parameter],
    h: float = 1e-5,
    coords_per_param: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare reverse-mode gradients against central differences.

    ``f`` evaluates the scalar loss from the current parameter values; it is
    called repeatedly with perturbed values.  Checks every coordinate unless
    ``coords_per_param`` limits it to a random sample.  Returns the worst
    relative error, with the denominator floored at 1e-8.
    """
    if not (1e-7 <= h <= 1e-3):
        raise UsageError(f"finite_diff_check: h={h} outside [1e-7, 1e-3]")

    with Tape():
        out = f()
        base_value = out.item()
        grads = backward(out)
    analytic = {id(p): grads.wrt(p.value).copy() for p in params}

    with Tape():
        repeat = f().item()
    if repeat != base_value:
        raise OracleInvalidError(
            f"function is not deterministic: {base_value!r} vs {repeat!r}"
        )

    def eval_loss() -> float:
        with Tape():
            return f().item()

    worst = 0.0
    for p in params:
        flat = p.value.data.reshape(-1)
        n = flat.size
        if coords_per_param is not None and coords_per_param < n:
            if rng is None:
                rng = np.random.default_rng(0)
            idxs = rng.choice(n, size=coords_per_param, replace=False)
        else:
            idxs = range(n)
        a_flat = analytic[id(p)].reshape(-1)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            up = eval_loss()
            flat[i] = orig - h
            down = eval_loss()
            flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            worst = max(worst, _rel_err(a_flat[i], numeric))
    return worst


def check_primitive_ops(rng: np.random.Generator | None = None, points: int = 20) -> dict:
    """Verify every primitive op's backward rule against finite differences.

    Returns {op name: worst relative error}; used by the gradcheck command
    so a corrupted rule is reported by name.
    """
    rng = rng or np.random.default_rng(7)
    results: dict[str, float] = {}

    def probe(name, build, param_shapes):
        worst = 0.0
        for _ in range(points):
            params = [
                Parameter(f"{name}{i}", rng.standard_normal(s))
                for i, s in enumerate(param_shapes)
            ]
            worst = max(worst, finite_diff_check(lambda: build(params), params))
        results[name] = worst

    def s(x):  # scalarize
        return ops.tsum(x)

    probe("add", lambda p: s(ops.mul(ops.add(p[0].value, p[1].value), p[0].value)), [(3, 4), (4,)])
    probe("sub", lambda p: s(ops.mul(ops.sub(p[0].value, p[1].value), p[1].value)), [(3, 4), (3, 1)])
    probe("mul", lambda p: s(ops.mul(p[0].value, p[1].value)), [(2, 3), (2, 3)])
    probe("div", lambda p: s(ops.div(p[0].value, ops.add(ops.mul(p[1].value, p[1].value), 1.0))), [(3,), (3,)])
    probe("neg", lambda p: s(ops.mul(ops.neg(p[0].value), p[0].value)), [(5,)])
    probe("matmul", lambda p: s(ops.matmul(p[0].value, p[1].value)), [(3, 4), (4, 2)])
    probe("transpose", lambda p: s(ops.matmul(ops.transpose(p[0].value), p[1].value)), [(4, 3), (4, 2)])
    probe("reshape", lambda p: s(ops.mul(ops.reshape(p[0].value, (6,)), ops.reshape(p[0].value, (6,)))), [(2, 3)])
    probe("concat", lambda p: s(ops.mul(ops.concat([p[0].value, p[1].value], axis=1), 0.5)), [(2, 3), (2, 2)])
    probe("narrow", lambda p: s(ops.mul(ops.narrow(p[0].value, 1, 1, 2), 2.0)), [(3, 4)])
    probe("sum", lambda p: ops.tsum(ops.mul(p[0].value, p[0].value)), [(3, 4)])
    probe("mean", lambda p: s(ops.tmean(ops.mul(p[0].value, p[0].value), axis=1)), [(3, 4)])
    probe("tanh", lambda p: s(ops.tanh(p[0].value)), [(4, 3)])
    probe("sigmoid", lambda p: s(ops.sigmoid(p[0].value)), [(4, 3)])
    probe("relu", lambda p: s(ops.relu(p[0].value)), [(4, 3)])
    probe("exp", lambda p: s(ops.texp(p[0].value)), [(3, 3)])
    probe("log", lambda p: s(ops.log(ops.add(ops.mul(p[0].value, p[0].value), 1.0))), [(4,)])
    probe("sqrt", lambda p: s(ops.sqrt(ops.add(ops.mul(p[0].value, p[0].value), 1.0))), [(4,)])
    probe("clamp_min", lambda p: s(ops.clamp_min(p[0].value, -0.2)), [(4, 4)])
    probe("softmax", lambda p: s(ops.mul(ops.softmax(p[0].value), p[1].value)), [(3, 5), (3, 5)])
    probe("scale", lambda p: s(ops.scale(p[0].value, 1.7)), [(3, 3)])
    probe("gather_rows", lambda p: s(ops.mul(ops.gather_rows(p[0].value, [0, 2, 2]), 1.5)), [(4, 3)])
    probe("conv2d", lambda p: s(ops.conv2d(p[0].value, p[1].value)), [(2, 2, 5, 5), (3, 2, 3, 3)])
    probe("maxpool2", lambda p: s(ops.maxpool2(p[0].value)), [(2, 2, 5, 6)])

    def ce_case(p):
        probs = ops.softmax(p[0].value)
        target = np.zeros((2, 4))
        target[0, 1] = 1.0
        target[1, 3] = 1.0
        return ops.cross_entropy(probs, target)

    probe("cross_entropy", ce_case, [(2, 4)])
    return results
