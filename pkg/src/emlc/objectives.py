"""Loss functions for the two-level training problem.

Lower level: soft-target cross entropy between the teacher's corrected label
q and the student's log-probabilities, with q held constant when
differentiating with respect to the student.  Upper level: hard-label cross
entropy on clean data.  Teacher side: supervised cross entropy on the
classifier head (gate and embedding excluded), plus a binary cross entropy
that trains the gate to recognize artificially corrupted labels, with either
a random or an adversarial corruption strategy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import models
from .models import StudentSpec, TeacherSpec

CORRUPTION_STRATEGIES = ("none", "random", "adversarial")


def validate_strategy(strategy: str) -> str:
    if strategy not in CORRUPTION_STRATEGIES:
        raise ValueError(
            f"unknown corruption strategy {strategy!r}; "
            f"expected one of {CORRUPTION_STRATEGIES}"
        )
    return strategy


@dataclass(frozen=True)
class LossReport:
    ce: float
    bce: float
    meta: float
    total: float


# ---------------------------------------------------------------------------
# student-side losses
# ---------------------------------------------------------------------------

def _soft_ce_program(spec: StudentSpec, x: np.ndarray, q: np.ndarray):
    """mean_i -sum_c q[i,c] * logp[i,c] with q a constant target."""
    batch = x.shape[0]

    def program(*params):
        logp = models.student_apply(spec, params, x)
        return ad.scale(ad.reduce_sum(ad.mul(q, logp)), -1.0 / batch)

    return program


def soft_ce_lower_loss(
    sspec: StudentSpec,
    w: np.ndarray,
    tspec: TeacherSpec,
    alpha: np.ndarray,
    x: np.ndarray,
    noisy_labels: np.ndarray,
) -> float:
    """Batch-mean cross entropy of the student against the teacher's q."""
    if x.shape[0] == 0:
        raise ValueError("batch must be nonempty")
    q, _ = models.teacher_forward(tspec, alpha, x, noisy_labels)
    (val,) = ad.run_plain(
        _soft_ce_program(sspec, x, q), models.student_layout(sspec).unflatten(w)
    )
    return float(val)


def soft_ce_lower_grad(
    sspec: StudentSpec,
    w: np.ndarray,
    tspec: TeacherSpec,
    alpha: np.ndarray,
    x: np.ndarray,
    noisy_labels: np.ndarray,
) -> tuple[float, np.ndarray]:
    """(loss, d loss / d w); the target q is treated as raw numbers."""
    if x.shape[0] == 0:
        raise ValueError("batch must be nonempty")
    q, _ = models.teacher_forward(tspec, alpha, x, noisy_labels)
    layout = models.student_layout(sspec)
    outs, rec = ad.evaluate(_soft_ce_program(sspec, x, q), layout.unflatten(w))
    grads = ad.vjp(rec, np.asarray(1.0))
    return float(outs[0]), layout.flatten(grads)


def _hard_ce_program(spec: StudentSpec, x: np.ndarray, y: np.ndarray):
    onehot = ad.one_hot(y, spec.classes)
    return _soft_ce_program(spec, x, onehot)


def clean_meta_loss(
    sspec: StudentSpec, w: np.ndarray, x: np.ndarray, y: np.ndarray
) -> float:
    """Mean hard-label cross entropy of the student on clean examples."""
    if x.shape[0] == 0:
        raise ValueError("batch must be nonempty")
    (val,) = ad.run_plain(
        _hard_ce_program(sspec, x, y), models.student_layout(sspec).unflatten(w)
    )
    return float(val)


def clean_meta_grad(
    sspec: StudentSpec, w: np.ndarray, x: np.ndarray, y: np.ndarray
) -> tuple[float, np.ndarray]:
    if x.shape[0] == 0:
        raise ValueError("batch must be nonempty")
    layout = models.student_layout(sspec)
    outs, rec = ad.evaluate(_hard_ce_program(sspec, x, y), layout.unflatten(w))
    grads = ad.vjp(rec, np.asarray(1.0))
    return float(outs[0]), layout.flatten(grads)


# ---------------------------------------------------------------------------
# teacher supervised cross entropy (classifier head only)
# ---------------------------------------------------------------------------

def _teacher_ce_parts(tspec: TeacherSpec):
    """Indices of the layout parts the CE loss touches (feature + classifier).

    The label embedding and the gate MLP are excluded from this loss, so
    their gradient is structurally zero."""
    n_feat = 2 * (len(tspec.feature_dims) - 1)
    return list(range(n_feat + 2))


def _teacher_ce_program(tspec: TeacherSpec, x: np.ndarray, y: np.ndarray):
    onehot = ad.one_hot(y, tspec.classes)
    batch = x.shape[0]

    def program(*used_params):
        params = list(used_params) + [None] * 5  # embed/gate slots, never touched
        logits = models.teacher_classifier_logits(tspec, params, x)
        logp = ad.log_softmax(logits)
        return ad.scale(ad.reduce_sum(ad.mul(onehot, logp)), -1.0 / batch)

    return program


def teacher_ce_loss(
    tspec: TeacherSpec, alpha: np.ndarray, x: np.ndarray, y: np.ndarray
) -> float:
    """Hard cross entropy of the teacher's classifier head on clean data."""
    if x.shape[0] == 0:
        raise ValueError("batch must be nonempty")
    parts = models.teacher_layout(tspec).unflatten(alpha)
    used = [parts[i] for i in _teacher_ce_parts(tspec)]
    (val,) = ad.run_plain(_teacher_ce_program(tspec, x, y), used)
    return float(val)


def teacher_ce_grad(
    tspec: TeacherSpec, alpha: np.ndarray, x: np.ndarray, y: np.ndarray
) -> tuple[float, np.ndarray]:
    """(loss, full-length gradient); embed/gate segments are exactly zero."""
    if x.shape[0] == 0:
        raise ValueError("batch must be nonempty")
    layout = models.teacher_layout(tspec)
    parts = layout.unflatten(alpha)
    idx = _teacher_ce_parts(tspec)
    outs, rec = ad.evaluate(
        _teacher_ce_program(tspec, x, y), [parts[i] for i in idx]
    )
    used_grads = ad.vjp(rec, np.asarray(1.0))
    full = [np.zeros_like(p) for p in parts]
    for i, g in zip(idx, used_grads):
        full[i] = g
    return float(outs[0]), layout.flatten(full)


# ---------------------------------------------------------------------------
# corruption strategies and the gate BCE
# ---------------------------------------------------------------------------

def corrupt_random(
    labels: np.ndarray, classes: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Replace the labels of floor(B/2) randomly chosen positions with
    uniform i.i.d. random labels.  Returns (labels, corrupt_mask)."""
    labels = np.asarray(labels, dtype=np.int64)
    b = labels.shape[0]
    if b < 2:
        raise ValueError("corruption needs a batch of at least 2")
    pos = rng.choice(b, size=b // 2, replace=False)
    out = labels.copy()
    out[pos] = rng.integers(0, classes, size=pos.size)
    mask = np.zeros(b, dtype=bool)
    mask[pos] = True
    return out, mask


def strongest_incorrect(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per row, the class with the highest probability among classes other
    than the given label; ties break to the lowest class index."""
    masked = probs.copy()
    masked[np.arange(labels.shape[0]), labels] = -np.inf
    return masked.argmax(axis=1)


def corrupt_adversarial(
    tspec: TeacherSpec,
    alpha: np.ndarray,
    x: np.ndarray,
    labels: np.ndarray,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Replace floor(B/2) randomly chosen labels with the teacher
    classifier's strongest incorrect prediction for that example."""
    labels = np.asarray(labels, dtype=np.int64)
    b = labels.shape[0]
    if b < 2:
        raise ValueError("corruption needs a batch of at least 2")
    parts = models.teacher_layout(tspec).unflatten(alpha)
    logits = models.teacher_classifier_logits(tspec, parts, x)
    probs = ad.softmax(logits)
    pos = rng.choice(b, size=b // 2, replace=False)
    out = labels.copy()
    out[pos] = strongest_incorrect(probs[pos], labels[pos])
    mask = np.zeros(b, dtype=bool)
    mask[pos] = True
    return out, mask


def _gate_bce_program(
    tspec: TeacherSpec, x: np.ndarray, labels: np.ndarray, clean_target: np.ndarray
):
    """BCE between the gate and the clean/corrupted indicator.

    Expressed through log-softmax over [s, 0] so it shares the stable op
    vocabulary: log sigmoid(s) = log_softmax([s,0])[0] and
    log(1 - sigmoid(s)) = log_softmax([s,0])[1].
    """
    batch = x.shape[0]
    targets = np.column_stack([clean_target, 1.0 - clean_target])

    def program(*params):
        s = models.teacher_gate_logit(tspec, params, x, labels)
        two = ad.concat(s, ad.scale(s, 0.0))
        return ad.scale(ad.reduce_sum(ad.mul(targets, ad.log_softmax(two))), -1.0 / batch)

    return program


def _corrupt_batch(tspec, alpha, x, y, strategy, rng):
    if strategy == "random":
        return corrupt_random(y, tspec.classes, rng)
    return corrupt_adversarial(tspec, alpha, x, y, rng)


def gate_bce_loss(
    tspec: TeacherSpec,
    alpha: np.ndarray,
    x: np.ndarray,
    y: np.ndarray,
    strategy: str,
    rng: np.random.Generator,
) -> float:
    """Corrupt half the clean batch via the strategy, then score the gate
    against the clean-label indicator (1 = untouched label)."""
    validate_strategy(strategy)
    if strategy == "none":
        raise ValueError("gate BCE requires a corruption strategy")
    labels, mask = _corrupt_batch(tspec, alpha, x, y, strategy, rng)
    target = 1.0 - mask.astype(np.float64)
    parts = models.teacher_layout(tspec).unflatten(alpha)
    (val,) = ad.run_plain(_gate_bce_program(tspec, x, labels, target), parts)
    return float(val)


def gate_bce_grad(
    tspec: TeacherSpec,
    alpha: np.ndarray,
    x: np.ndarray,
    y: np.ndarray,
    strategy: str,
    rng: np.random.Generator,
) -> tuple[float, np.ndarray]:
    validate_strategy(strategy)
    if strategy == "none":
        raise ValueError("gate BCE requires a corruption strategy")
    labels, mask = _corrupt_batch(tspec, alpha, x, y, strategy, rng)
    target = 1.0 - mask.astype(np.float64)
    layout = models.teacher_layout(tspec)
    outs, rec = ad.evaluate(
        _gate_bce_program(tspec, x, labels, target), layout.unflatten(alpha)
    )
    grads = ad.vjp(rec, np.asarray(1.0))
    return float(outs[0]), layout.flatten(grads)


# ---------------------------------------------------------------------------
# combined report
# ---------------------------------------------------------------------------

def teacher_total_loss(
    tspec: TeacherSpec,
    alpha: np.ndarray,
    sspec: StudentSpec,
    w_star: np.ndarray,
    x: np.ndarray,
    y: np.ndarray,
    strategy: str,
    rng: np.random.Generator | None = None,
    weights: tuple[float, float, float] = (1.0, 1.0, 1.0),
) -> LossReport:
    """Teacher objective report: supervised CE + gate BCE + the clean loss of
    the updated student.  The meta term enters optimization as a gradient
    from the bi-level machinery; here it is reported as a value."""
    validate_strategy(strategy)
    ce = teacher_ce_loss(tspec, alpha, x, y)
    if strategy == "none":
        bce = 0.0
    else:
        if rng is None:
            raise ValueError("corruption strategies need an rng")
        bce = gate_bce_loss(tspec, alpha, x, y, strategy, rng)
    meta = clean_meta_loss(sspec, w_star, x, y)
    w_ce, w_bce, w_meta = weights
    return LossReport(ce, bce, meta, w_ce * ce + w_bce * bce + w_meta * meta)
