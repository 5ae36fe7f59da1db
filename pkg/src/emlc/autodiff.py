"""Minimal f64 tensor autodiff: a taped reverse mode (VJP) and a dual-number
forward mode (JVP) over a fixed op vocabulary.

Programs are plain Python callables built from the op functions in this
module (``matmul``, ``add``, ``tanh``, ...).  The same callable runs in three
modes depending on what it is fed:

* raw ``numpy`` arrays        -> plain forward evaluation,
* :class:`TracedTensor` boxes -> forward evaluation onto a tape
  (:class:`ComputationRecord`) that :func:`vjp` can walk backwards,
* :class:`DualTensor` pairs   -> forward-mode (primal, tangent) evaluation.

Everything is float64; tensors are dense row-major arrays.  Values are
immutable once placed on a tape, and each evaluation owns its record, so
records are safe to share across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np


class AutodiffError(Exception):
    """Base class for autodiff failures."""


class ShapeError(AutodiffError):
    """Operands have incompatible shapes."""


class NonFiniteError(AutodiffError):
    """A NaN or Inf appeared in a computed value."""


Tensor = np.ndarray  # dense row-major float64


def tensor(data: Any) -> Tensor:
    """Coerce to a C-contiguous float64 array and reject non-finite values."""
    a = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
    if not np.all(np.isfinite(a)):
        raise NonFiniteError("tensor contains NaN or Inf")
    return a


def check_finite(a: np.ndarray, what: str = "value") -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise NonFiniteError(f"non-finite {what}")
    return a


# ---------------------------------------------------------------------------
# differentiation pass counter (cost-discipline instrumentation)
# ---------------------------------------------------------------------------

@dataclass
class PassCounter:
    """Counts whole differentiation passes, not individual ops.

    forward  : plain/taped forward evaluations
    backward : reverse sweeps over a tape
    tangent  : dual-number forward sweeps (primal + tangent together)
    """

    forward: int = 0
    backward: int = 0
    tangent: int = 0

    def reset(self) -> None:
        self.forward = self.backward = self.tangent = 0

    def total(self) -> int:
        return self.forward + self.backward + self.tangent


PASS_COUNTER = PassCounter()


# ---------------------------------------------------------------------------
# tape structures
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Node:
    """One op application: kind, parent node indices, saved primal value."""

    op: str
    parents: tuple[int, ...]
    value: np.ndarray
    aux: tuple = ()


@dataclass
class ComputationRecord:
    """A taped forward evaluation, topologically ordered (parents precede
    consumers).  Supports reverse-mode VJP and deterministic replay."""

    nodes: list[Node] = field(default_factory=list)
    input_ids: list[int] = field(default_factory=list)
    output_ids: list[int] = field(default_factory=list)

    def output_values(self) -> list[np.ndarray]:
        return [self.nodes[i].value for i in self.output_ids]


class TracedTensor:
    """Handle to a node on a live tape; op functions accept these."""

    __slots__ = ("record", "idx")

    def __init__(self, record: ComputationRecord, idx: int):
        self.record = record
        self.idx = idx

    @property
    def value(self) -> np.ndarray:
        return self.record.nodes[self.idx].value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape


@dataclass
class DualTensor:
    """(primal, tangent) pair for forward-mode JVP."""

    primal: np.ndarray
    tangent: np.ndarray

    def __post_init__(self) -> None:
        self.primal = np.asarray(self.primal, dtype=np.float64)
        self.tangent = np.asarray(self.tangent, dtype=np.float64)
        if self.primal.shape != self.tangent.shape:
            raise ShapeError(
                f"dual primal shape {self.primal.shape} != tangent shape "
                f"{self.tangent.shape}"
            )


# ---------------------------------------------------------------------------
# op definitions
# ---------------------------------------------------------------------------
# forward(vals, aux) -> value
# vjp(g, value, vals, aux) -> cotangent per parent (None = no gradient)
# jvp(tans, vals, value, aux) -> output tangent

@dataclass(frozen=True)
class OpDef:
    forward: Callable[..., np.ndarray]
    vjp: Callable[..., list]
    jvp: Callable[..., np.ndarray]


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a gradient back to a parent's (possibly broadcast) shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _fw_matmul(vals, aux):
    a, b = vals
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    return a @ b


def _fw_add(vals, aux):
    a, b = vals
    if a.shape != b.shape:
        # the only broadcast add supported: matrix [B,n] + bias [n]
        ok = (a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]) or (
            b.ndim == 2 and a.ndim == 1 and b.shape[1] == a.shape[0]
        )
        if not ok:
            raise ShapeError(f"add: {a.shape} + {b.shape}")
    return a + b


def _fw_mul(vals, aux):
    a, b = vals
    if a.shape != b.shape:
        # the only broadcast mul supported: per-row scalar [B,1] * [B,n]
        ok = (
            a.ndim == 2
            and b.ndim == 2
            and a.shape[0] == b.shape[0]
            and (a.shape[1] == 1 or b.shape[1] == 1)
        )
        if not ok:
            raise ShapeError(f"mul: {a.shape} * {b.shape}")
    return a * b


def _softmax(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    s = x - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _fw_concat(vals, aux):
    a, b = vals
    if a.ndim != b.ndim or a.shape[:-1] != b.shape[:-1]:
        raise ShapeError(f"concat: {a.shape} ++ {b.shape}")
    return np.concatenate([a, b], axis=-1)


def _fw_embed(vals, aux):
    (table,) = vals
    (idx,) = aux
    if table.ndim != 2:
        raise ShapeError(f"embed_lookup: table must be 2-D, got {table.shape}")
    if np.any(idx < 0) or np.any(idx >= table.shape[0]):
        raise ShapeError("embed_lookup: index out of range")
    return table[idx]


def _vjp_embed(g, value, vals, aux):
    (table,) = vals
    (idx,) = aux
    out = np.zeros_like(table)
    np.add.at(out, idx, g)
    return [out]


_OPS: dict[str, OpDef] = {
    "matmul": OpDef(
        _fw_matmul,
        lambda g, v, vals, aux: [g @ vals[1].T, vals[0].T @ g],
        lambda t, vals, v, aux: t[0] @ vals[1] + vals[0] @ t[1],
    ),
    "add": OpDef(
        _fw_add,
        lambda g, v, vals, aux: [
            _unbroadcast(g, vals[0].shape),
            _unbroadcast(g, vals[1].shape),
        ],
        lambda t, vals, v, aux: t[0] + t[1],
    ),
    "mul": OpDef(
        _fw_mul,
        lambda g, v, vals, aux: [
            _unbroadcast(g * vals[1], vals[0].shape),
            _unbroadcast(g * vals[0], vals[1].shape),
        ],
        lambda t, vals, v, aux: t[0] * vals[1] + vals[0] * t[1],
    ),
    "relu": OpDef(
        lambda vals, aux: np.maximum(vals[0], 0.0),
        lambda g, v, vals, aux: [g * (vals[0] > 0)],
        lambda t, vals, v, aux: t[0] * (vals[0] > 0),
    ),
    "tanh": OpDef(
        lambda vals, aux: np.tanh(vals[0]),
        lambda g, v, vals, aux: [g * (1.0 - v * v)],
        lambda t, vals, v, aux: t[0] * (1.0 - v * v),
    ),
    "sigmoid": OpDef(
        lambda vals, aux: _sigmoid(vals[0]),
        lambda g, v, vals, aux: [g * v * (1.0 - v)],
        lambda t, vals, v, aux: t[0] * v * (1.0 - v),
    ),
    "softmax": OpDef(
        lambda vals, aux: _softmax(vals[0]),
        lambda g, v, vals, aux: [v * (g - (g * v).sum(axis=-1, keepdims=True))],
        lambda t, vals, v, aux: v * (t[0] - (t[0] * v).sum(axis=-1, keepdims=True)),
    ),
    "log_softmax": OpDef(
        lambda vals, aux: _log_softmax(vals[0]),
        lambda g, v, vals, aux: [g - np.exp(v) * g.sum(axis=-1, keepdims=True)],
        lambda t, vals, v, aux: t[0]
        - (np.exp(v) * t[0]).sum(axis=-1, keepdims=True),
    ),
    "concat": OpDef(
        _fw_concat,
        lambda g, v, vals, aux: [
            g[..., : vals[0].shape[-1]],
            g[..., vals[0].shape[-1] :],
        ],
        lambda t, vals, v, aux: np.concatenate([t[0], t[1]], axis=-1),
    ),
    "embed_lookup": OpDef(
        _fw_embed,
        _vjp_embed,
        lambda t, vals, v, aux: t[0][aux[0]],
    ),
    "reduce_sum": OpDef(
        lambda vals, aux: np.asarray(vals[0].sum()),
        lambda g, v, vals, aux: [np.full(vals[0].shape, float(g))],
        lambda t, vals, v, aux: np.asarray(t[0].sum()),
    ),
    "reduce_mean": OpDef(
        lambda vals, aux: np.asarray(vals[0].mean()),
        lambda g, v, vals, aux: [np.full(vals[0].shape, float(g) / vals[0].size)],
        lambda t, vals, v, aux: np.asarray(t[0].mean()),
    ),
    "scale": OpDef(
        lambda vals, aux: aux[0] * vals[0],
        lambda g, v, vals, aux: [aux[0] * g],
        lambda t, vals, v, aux: aux[0] * t[0],
    ),
}


def _apply(name: str, args: Sequence[Any], aux: tuple = ()) -> Any:
    op = _OPS[name]
    traced = [a for a in args if isinstance(a, TracedTensor)]
    if traced:
        record = traced[0].record
        parents: list[int] = []
        vals: list[np.ndarray] = []
        for a in args:
            if isinstance(a, TracedTensor):
                if a.record is not record:
                    raise AutodiffError("operands belong to different records")
                parents.append(a.idx)
                vals.append(a.value)
            elif isinstance(a, DualTensor):
                raise AutodiffError("cannot mix traced and dual tensors")
            else:
                const = tensor(a)
                record.nodes.append(Node("const", (), const))
                parents.append(len(record.nodes) - 1)
                vals.append(const)
        value = check_finite(op.forward(vals, aux), f"{name} output")
        record.nodes.append(Node(name, tuple(parents), value, aux))
        return TracedTensor(record, len(record.nodes) - 1)

    if any(isinstance(a, DualTensor) for a in args):
        vals = []
        tans = []
        for a in args:
            if isinstance(a, DualTensor):
                vals.append(a.primal)
                tans.append(a.tangent)
            else:
                const = tensor(a)
                vals.append(const)
                tans.append(np.zeros_like(const))
        value = check_finite(op.forward(vals, aux), f"{name} output")
        tangent = op.jvp(tans, vals, value, aux)
        return DualTensor(value, tangent)

    vals = [np.asarray(a, dtype=np.float64) for a in args]
    return check_finite(op.forward(vals, aux), f"{name} output")


# --- public op vocabulary ---------------------------------------------------

def matmul(a, b):
    return _apply("matmul", (a, b))


def add(a, b):
    return _apply("add", (a, b))


def mul(a, b):
    return _apply("mul", (a, b))


def relu(x):
    return _apply("relu", (x,))


def tanh(x):
    return _apply("tanh", (x,))


def sigmoid(x):
    return _apply("sigmoid", (x,))


def softmax(x):
    return _apply("softmax", (x,))


def log_softmax(x):
    return _apply("log_softmax", (x,))


def concat(a, b):
    """Concatenate along the last axis."""
    return _apply("concat", (a, b))


def embed_lookup(table, indices):
    """Row lookup ``table[indices]``; the indices are not differentiable."""
    idx = np.asarray(indices, dtype=np.int64)
    return _apply("embed_lookup", (table,), aux=(idx,))


def reduce_sum(x):
    return _apply("reduce_sum", (x,))


def reduce_mean(x):
    return _apply("reduce_mean", (x,))


def scale(x, c: float):
    return _apply("scale", (x,), aux=(float(c),))


def one_hot(labels, num_classes: int) -> np.ndarray:
    """One-hot encode integer labels as a constant f64 matrix.

    Labels are discrete inputs: the encoding carries no tangent and no
    cotangent, so the result is an ordinary constant in every mode.
    """
    idx = np.asarray(labels, dtype=np.int64)
    if np.any(idx < 0) or np.any(idx >= num_classes):
        raise ShapeError("one_hot: label out of range")
    out = np.zeros((idx.shape[0], num_classes))
    out[np.arange(idx.shape[0]), idx] = 1.0
    return out


# ---------------------------------------------------------------------------
# evaluation entry points
# ---------------------------------------------------------------------------

def _as_output_list(out) -> list:
    return list(out) if isinstance(out, (tuple, list)) else [out]


def evaluate(program: Callable, inputs: Sequence[Any]):
    """Run ``program`` on ``inputs``, taping every op.

    Returns ``(outputs, record)`` where outputs are plain f64 arrays and the
    record supports :func:`vjp` and :func:`replay`.
    """
    record = ComputationRecord()
    boxes = []
    for x in inputs:
        record.nodes.append(Node("input", (), tensor(x)))
        record.input_ids.append(len(record.nodes) - 1)
        boxes.append(TracedTensor(record, len(record.nodes) - 1))
    outs = _as_output_list(program(*boxes))
    for o in outs:
        if not isinstance(o, TracedTensor):
            raise AutodiffError("program output does not depend on its inputs")
        record.output_ids.append(o.idx)
    PASS_COUNTER.forward += 1
    return [o.value for o in outs], record


def run_plain(program: Callable, inputs: Sequence[Any]) -> list[np.ndarray]:
    """Forward evaluation without a tape."""
    PASS_COUNTER.forward += 1
    outs = _as_output_list(program(*[tensor(x) for x in inputs]))
    return [np.asarray(o) for o in outs]


def replay(record: ComputationRecord, inputs: Sequence[Any]) -> list[np.ndarray]:
    """Re-run a record on fresh inputs; identical inputs reproduce the
    original outputs bit for bit."""
    if len(inputs) != len(record.input_ids):
        raise ShapeError("replay: wrong number of inputs")
    values: list[np.ndarray] = [None] * len(record.nodes)  # type: ignore
    it = iter(inputs)
    for i, node in enumerate(record.nodes):
        if node.op == "input":
            x = tensor(next(it))
            if x.shape != node.value.shape:
                raise ShapeError(
                    f"replay: input shape {x.shape} != recorded {node.value.shape}"
                )
            values[i] = x
        elif node.op == "const":
            values[i] = node.value
        else:
            vals = [values[p] for p in node.parents]
            values[i] = check_finite(_OPS[node.op].forward(vals, node.aux))
    PASS_COUNTER.forward += 1
    return [values[i] for i in record.output_ids]


def vjp(record: ComputationRecord, cotangents) -> list[np.ndarray]:
    """Reverse sweep: returns u^T J per recorded input.

    ``cotangents`` is one array per recorded output (a single array is
    accepted for single-output records); each must match that output's shape.
    """
    cots = _as_output_list(cotangents)
    if len(cots) != len(record.output_ids):
        raise ShapeError(
            f"vjp: {len(cots)} cotangents for {len(record.output_ids)} outputs"
        )
    grads: dict[int, np.ndarray] = {}
    for oid, u in zip(record.output_ids, cots):
        u = np.asarray(u, dtype=np.float64)
        if u.shape != record.nodes[oid].value.shape:
            raise ShapeError(
                f"vjp: cotangent shape {u.shape} != output shape "
                f"{record.nodes[oid].value.shape}"
            )
        grads[oid] = grads.get(oid, 0.0) + u
    for idx in range(len(record.nodes) - 1, -1, -1):
        g = grads.pop(idx, None)
        if g is None:
            continue
        node = record.nodes[idx]
        if node.op in ("input", "const"):
            grads[idx] = g  # keep input grads; const grads are dropped below
            continue
        vals = [record.nodes[p].value for p in node.parents]
        parent_cots = _OPS[node.op].vjp(g, node.value, vals, node.aux)
        for pid, pg in zip(node.parents, parent_cots):
            if pg is None:
                continue
            acc = grads.get(pid)
            grads[pid] = pg if acc is None else acc + pg
    PASS_COUNTER.backward += 1
    return [
        grads.get(i, np.zeros_like(record.nodes[i].value))
        for i in record.input_ids
    ]


def jvp(program: Callable, inputs: Sequence[Any], tangents: Sequence[Any]):
    """Forward mode: returns J v per program output, for input tangents v."""
    if len(inputs) != len(tangents):
        raise ShapeError("jvp: one tangent per input required")
    duals = []
    for x, t in zip(inputs, tangents):
        xv, tv = tensor(x), tensor(t)
        if xv.shape != tv.shape:
            raise ShapeError(
                f"jvp: tangent shape {tv.shape} != input shape {xv.shape}"
            )
        duals.append(DualTensor(xv, tv))
    outs = _as_output_list(program(*duals))
    PASS_COUNTER.tangent += 1
    result = []
    for o in outs:
        if isinstance(o, DualTensor):
            result.append(o.tangent)
        else:  # output independent of the inputs
            result.append(np.zeros_like(np.asarray(o, dtype=np.float64)))
    return result


def finite_diff_grad(f: Callable[[np.ndarray], float], theta, step: float) -> np.ndarray:
    """Central-difference gradient estimate of a scalar function (test oracle)."""
    if step <= 0:
        raise ValueError("finite_diff_grad: step must be positive")
    theta = tensor(theta)
    flat = theta.ravel()
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        delta = np.zeros_like(flat)
        delta[i] = step
        fp = float(f((flat + delta).reshape(theta.shape)))
        fm = float(f((flat - delta).reshape(theta.shape)))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError("finite_diff_grad: non-finite function value")
        grad[i] = (fp - fm) / (2.0 * step)
    return grad.reshape(theta.shape)
