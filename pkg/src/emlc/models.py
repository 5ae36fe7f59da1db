"""Student and teacher networks over flat parameter vectors.

The student maps inputs to per-class log-probabilities.  The teacher maps an
input plus its observed (possibly corrupted) label to a corrected soft label:
a small feature extractor produces a representation h, a linear head turns h
into an initial class distribution, the observed label is embedded, and a
one-hidden-layer gate MLP on concat(h, embedding) emits a scalar in (0,1)
that interpolates between the observed label's one-hot and the head's
distribution.  The teacher never sees any student state.

Both models expose their parameters as a single flat f64 vector described by
a ParamLayout (named, disjoint, covering segments), which is what the
bi-level optimizer snapshots and updates.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError


class ParamLayoutError(ValueError):
    pass


@dataclass(frozen=True)
class ParamLayout:
    """Named segment boundaries into a flat parameter vector.

    Segments are stored in order, are disjoint, and cover the vector exactly.
    """

    names: tuple[str, ...]
    shapes: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        if len(self.names) != len(self.shapes):
            raise ParamLayoutError("names and shapes differ in length")
        if len(set(self.names)) != len(self.names):
            raise ParamLayoutError("duplicate segment names")

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(int(np.prod(s)) for s in self.shapes)

    @property
    def offsets(self) -> tuple[int, ...]:
        return tuple(np.concatenate([[0], np.cumsum(self.sizes)]).astype(int))

    @property
    def total(self) -> int:
        return int(sum(self.sizes))

    def slices(self) -> dict[str, slice]:
        off = self.offsets
        return {n: slice(off[i], off[i + 1]) for i, n in enumerate(self.names)}

    def unflatten(self, w: np.ndarray) -> list[np.ndarray]:
        w = np.asarray(w, dtype=np.float64)
        if w.shape != (self.total,):
            raise ShapeError(
                f"flat vector length {w.shape} != layout total ({self.total},)"
            )
        off = self.offsets
        return [
            w[off[i] : off[i + 1]].reshape(self.shapes[i])
            for i in range(len(self.names))
        ]

    def flatten(self, parts) -> np.ndarray:
        if len(parts) != len(self.names):
            raise ShapeError("wrong number of parts for layout")
        for p, s in zip(parts, self.shapes):
            if np.asarray(p).shape != s:
                raise ShapeError(f"part shape {np.asarray(p).shape} != {s}")
        return np.concatenate([np.asarray(p, dtype=np.float64).ravel() for p in parts])


_ACTIVATIONS = ("tanh", "relu")


@dataclass(frozen=True)
class StudentSpec:
    """MLP classifier: input_dim -> hidden... -> classes, log-softmax output.

    tanh hidden layers are the default (smooth everywhere, which the
    finite-difference oracle suites rely on); relu is available for runs
    where memorization behavior matters more than smoothness."""

    input_dim: int
    hidden: tuple[int, ...]
    classes: int
    activation: str = "tanh"

    def __post_init__(self):
        if self.input_dim < 1 or self.classes < 2:
            raise ValueError("student needs input_dim >= 1 and classes >= 2")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden, self.classes)


@dataclass(frozen=True)
class TeacherSpec:
    """Label-correction network: feature extractor, classifier head, label
    embedding table, and a one-hidden-layer sigmoid gate."""

    input_dim: int
    feature_hidden: tuple[int, ...]
    feature_dim: int
    classes: int
    embed_dim: int = 16
    gate_hidden: int = 32
    activation: str = "tanh"

    def __post_init__(self):
        if self.classes < 2:
            raise ValueError("teacher needs classes >= 2")
        if min(self.feature_dim, self.embed_dim, self.gate_hidden) < 1:
            raise ValueError("teacher dims must be positive")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def feature_dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.feature_hidden, self.feature_dim)


def _mlp_layout(prefix: str, dims: tuple[int, ...]):
    names, shapes = [], []
    for i, (din, dout) in enumerate(zip(dims[:-1], dims[1:])):
        names.append(f"{prefix}{i}.W")
        shapes.append((din, dout))
        names.append(f"{prefix}{i}.b")
        shapes.append((dout,))
    return names, shapes


@lru_cache(maxsize=None)
def student_layout(spec: StudentSpec) -> ParamLayout:
    names, shapes = _mlp_layout("layer", spec.dims)
    return ParamLayout(tuple(names), tuple(shapes))


@lru_cache(maxsize=None)
def teacher_layout(spec: TeacherSpec) -> ParamLayout:
    names, shapes = _mlp_layout("feature", spec.feature_dims)
    names += ["classifier.W", "classifier.b", "embed.table"]
    shapes += [
        (spec.feature_dim, spec.classes),
        (spec.classes,),
        (spec.classes, spec.embed_dim),
    ]
    gn, gs = _mlp_layout("gate", (spec.feature_dim + spec.embed_dim, spec.gate_hidden, 1))
    names += gn
    shapes += gs
    return ParamLayout(tuple(names), tuple(shapes))


def teacher_segments(spec: TeacherSpec) -> dict[str, slice]:
    """Coarse contiguous segments of the teacher's flat vector:
    feature / classifier / embed / gate."""
    layout = teacher_layout(spec)
    slc = layout.slices()
    n_feat = 2 * (len(spec.feature_dims) - 1)
    feat_names = layout.names[:n_feat]
    gate_names = [n for n in layout.names if n.startswith("gate")]
    return {
        "feature": slice(slc[feat_names[0]].start, slc[feat_names[-1]].stop),
        "classifier": slice(slc["classifier.W"].start, slc["classifier.b"].stop),
        "embed": slc["embed.table"],
        "gate": slice(slc[gate_names[0]].start, slc[gate_names[-1]].stop),
    }


# ---------------------------------------------------------------------------
# forward passes (polymorphic over plain / traced / dual values)
# ---------------------------------------------------------------------------

def _check_batch(x: np.ndarray, input_dim: int, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != input_dim:
        raise ShapeError(f"{what}: expected [batch, {input_dim}], got {x.shape}")
    return x


def _check_labels(labels, classes: int) -> np.ndarray:
    y = np.asarray(labels, dtype=np.int64)
    if y.ndim != 1:
        raise ShapeError(f"labels must be 1-D, got shape {y.shape}")
    if y.size and (y.min() < 0 or y.max() >= classes):
        raise ValueError(f"label out of range [0, {classes})")
    return y


def _mlp_hidden(params, x, n_layers: int, activation: str = "tanh"):
    """Apply n_layers of affine+activation; params is the flat list (W, b)*."""
    act = ad.tanh if activation == "tanh" else ad.relu
    h = x
    for i in range(n_layers):
        h = act(ad.add(ad.matmul(h, params[2 * i]), params[2 * i + 1]))
    return h


def student_apply(spec: StudentSpec, params, x):
    """Student forward on op-polymorphic per-layer params; returns log-probs."""
    n = len(spec.dims) - 1
    h = _mlp_hidden(params, x, n - 1, spec.activation)
    logits = ad.add(ad.matmul(h, params[2 * (n - 1)]), params[2 * n - 1])
    return ad.log_softmax(logits)


def student_logprob_program(spec: StudentSpec, x: np.ndarray):
    """Program over the student's per-layer params with x closed over."""
    x = _check_batch(x, spec.input_dim, "student input")

    def program(*params):
        return student_apply(spec, params, x)

    return program


def student_forward(spec: StudentSpec, w: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Per-row log-distribution [batch, classes] for flat params w."""
    x = _check_batch(x, spec.input_dim, "student input")
    parts = student_layout(spec).unflatten(w)
    return student_apply(spec, parts, x)


def _teacher_split(spec: TeacherSpec, params):
    n_feat = 2 * (len(spec.feature_dims) - 1)
    return (
        params[:n_feat],                      # feature extractor
        params[n_feat : n_feat + 2],          # classifier W, b
        params[n_feat + 2],                   # embed table
        params[n_feat + 3 :],                 # gate W0, b0, W1, b1
    )


def teacher_classifier_logits(spec: TeacherSpec, params, x):
    feat, clf, _, _ = _teacher_split(spec, params)
    h = _mlp_hidden(feat, x, len(spec.feature_dims) - 1, spec.activation)
    return ad.add(ad.matmul(h, clf[0]), clf[1])


def teacher_gate_logit(spec: TeacherSpec, params, x, noisy_labels):
    """Gate pre-activation [batch, 1] from concat(features, label embedding)."""
    feat, _, embed, gate = _teacher_split(spec, params)
    h = _mlp_hidden(feat, x, len(spec.feature_dims) - 1, spec.activation)
    z = ad.embed_lookup(embed, noisy_labels)
    g = ad.tanh(ad.add(ad.matmul(ad.concat(h, z), gate[0]), gate[1]))
    return ad.add(ad.matmul(g, gate[2]), gate[3])


def teacher_apply(spec: TeacherSpec, params, x, noisy_labels):
    """Full teacher forward; returns (q, gate) with q a per-row distribution.

    q = gate * onehot(noisy label) + (1 - gate) * softmax(classifier), built
    as yhat + gate * (onehot - yhat) so only vocabulary ops are needed.
    """
    feat, clf, embed, gate_p = _teacher_split(spec, params)
    h = _mlp_hidden(feat, x, len(spec.feature_dims) - 1, spec.activation)
    logits = ad.add(ad.matmul(h, clf[0]), clf[1])
    yhat = ad.softmax(logits)
    z = ad.embed_lookup(embed, noisy_labels)
    g = ad.tanh(ad.add(ad.matmul(ad.concat(h, z), gate_p[0]), gate_p[1]))
    gate = ad.sigmoid(ad.add(ad.matmul(g, gate_p[2]), gate_p[3]))  # [B,1]
    onehot = ad.one_hot(noisy_labels, spec.classes)
    q = ad.add(yhat, ad.mul(gate, ad.add(onehot, ad.scale(yhat, -1.0))))
    return q, gate


def teacher_q_program(spec: TeacherSpec, x: np.ndarray, noisy_labels):
    """Program over the teacher's per-layer params returning q only."""
    x = _check_batch(x, spec.input_dim, "teacher input")
    yt = _check_labels(noisy_labels, spec.classes)

    def program(*params):
        q, _ = teacher_apply(spec, params, x, yt)
        return q

    return program


def teacher_forward(spec: TeacherSpec, alpha: np.ndarray, x: np.ndarray, noisy_labels):
    """Corrected soft labels and gate values: (q [batch, C], gate [batch]).

    A pure function of (alpha, x, noisy labels); no student state exists here.
    """
    x = _check_batch(x, spec.input_dim, "teacher input")
    yt = _check_labels(noisy_labels, spec.classes)
    parts = teacher_layout(spec).unflatten(alpha)
    q, gate = teacher_apply(spec, parts, x, yt)
    return q, gate[:, 0]


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

GATE_BIAS_INIT = 2.0  # start in the label-trusting regime: sigmoid(2) ~ 0.88


def init_params(layout: ParamLayout, seed: int) -> np.ndarray:
    """Scaled-uniform init: 2-D segments ~ U(-a, a) with
    a = sqrt(6 / (fan_in + fan_out)); biases start at zero, except the gate
    output bias, which starts positive: most observed labels are clean, so
    the gate should pass them through until trained to do otherwise."""
    rng = np.random.default_rng(seed)
    parts = []
    for name, shape in zip(layout.names, layout.shapes):
        if len(shape) == 2:
            bound = np.sqrt(6.0 / (shape[0] + shape[1]))
            parts.append(rng.uniform(-bound, bound, size=shape))
        elif name == "gate1.b":
            parts.append(np.full(shape, GATE_BIAS_INIT))
        else:
            parts.append(np.zeros(shape))
    return layout.flatten(parts)


def glorot_bound(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


# ---------------------------------------------------------------------------
# checkpoint format: little-endian flat f64 array with a small header
# ---------------------------------------------------------------------------

_MAGIC = b"FLATPAR1"
_VERSION = 1


class CheckpointError(IOError):
    pass


def spec_hash(spec) -> bytes:
    """8-byte digest of a model spec plus its layout."""
    if isinstance(spec, StudentSpec):
        layout = student_layout(spec)
    elif isinstance(spec, TeacherSpec):
        layout = teacher_layout(spec)
    else:
        raise TypeError(f"unknown spec type {type(spec)!r}")
    doc = {
        "kind": type(spec).__name__,
        "spec": {k: list(v) if isinstance(v, tuple) else v for k, v in vars(spec).items()},
        "segments": [[n, list(s)] for n, s in zip(layout.names, layout.shapes)],
    }
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).digest()[:8]


def save_params(path, spec, w: np.ndarray) -> None:
    if isinstance(spec, StudentSpec):
        layout = student_layout(spec)
    else:
        layout = teacher_layout(spec)
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (layout.total,):
        raise ShapeError(f"params length {w.shape} != layout total {layout.total}")
    off = layout.offsets
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(spec_hash(spec))
        fh.write(struct.pack("<I", len(layout.names)))
        for i, name in enumerate(layout.names):
            nb = name.encode()
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<QQ", off[i], off[i + 1]))
        fh.write(struct.pack("<Q", layout.total))
        fh.write(w.astype("<f8").tobytes())


def load_params(path, spec) -> np.ndarray:
    if isinstance(spec, StudentSpec):
        layout = student_layout(spec)
    else:
        layout = teacher_layout(spec)
    with open(path, "rb") as fh:
        if fh.read(8) != _MAGIC:
            raise CheckpointError(f"{path}: not a parameter checkpoint")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        if fh.read(8) != spec_hash(spec):
            raise CheckpointError(f"{path}: checkpoint does not match model spec")
        (nseg,) = struct.unpack("<I", fh.read(4))
        for _ in range(nseg):
            (nlen,) = struct.unpack("<H", fh.read(2))
            fh.read(nlen + 16)
        (count,) = struct.unpack("<Q", fh.read(8))
        if count != layout.total:
            raise CheckpointError(f"{path}: parameter count mismatch")
        data = np.frombuffer(fh.read(8 * count), dtype="<f8")
        if data.size != count:
            raise CheckpointError(f"{path}: truncated checkpoint")
    return data.astype(np.float64)
