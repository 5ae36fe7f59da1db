"""The optimization core: inner student SGD, the fast discounted
meta-gradient over a k-step look-ahead window, and independent oracles
(finite differences, exact unrolled recursion, dense mixed Hessians) used to
verify it.

The lower loss has the inner-product form  l_i(w, a) = -<q_i(a), f_i(w)>
with f the student's per-class log-probabilities and q the teacher's
corrected soft label, so its sample-wise mixed second derivative factors into
first-order Jacobians:  d^2 l_i / dw da = -J_w(f_i)^T J_a(q_i).  The
meta-gradient therefore never needs a second-order tape: one forward-mode
sweep through the student contracts J_w with the clean feedback gradient, and
one reverse-mode sweep through the teacher contracts the result with J_a.
Contributions from older look-ahead steps are discounted by gamma = 1 - lr
per step.

Everything here is written against a problem object (duck-typed; see
``EMLCProblem`` and ``QuadraticBilinearProblem``) so the same code paths run
on real models and on constructed closed-form test problems.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import models, objectives
from .autodiff import NonFiniteError, PASS_COUNTER, ShapeError
from .models import StudentSpec, TeacherSpec


@dataclass(frozen=True)
class BilevelConfig:
    """Look-ahead depth k, inner/meta learning rates, total inner steps, and
    batch sizes.  The per-step discount is gamma = 1 - inner_lr, so the inner
    rate must lie in (0, 1)."""

    lookahead: int
    inner_lr: float
    meta_lr: float
    total_steps: int
    noisy_batch: int
    clean_batch: int

    def __post_init__(self):
        if self.lookahead < 1:
            raise ValueError("lookahead must be >= 1")
        if not 0.0 < self.inner_lr < 1.0:
            raise ValueError("inner_lr must lie in (0, 1) so the discount is valid")
        if self.meta_lr <= 0.0:
            raise ValueError("meta_lr must be positive")
        if self.lookahead > self.total_steps:
            raise ValueError("lookahead cannot exceed total_steps")

    @property
    def gamma(self) -> float:
        return 1.0 - self.inner_lr


@dataclass
class MetaGradient:
    grad: np.ndarray
    method: str  # fpmg | one_step | unrolled_oracle | finite_diff
    discounts: tuple[float, ...] = ()
    diff_passes_per_pair: int = 0


class SnapshotBuffer:
    """Ring of the look-ahead window's (student params, noisy batch indices)
    pairs plus the newest post-step params.

    At meta-update time the buffer holds exactly k+1 parameter versions:
    the k pre-step snapshots of the window and the freshly updated params.
    ``peak_versions`` records the high-water mark for the memory-bound check.
    """

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._window: list[tuple[np.ndarray, np.ndarray]] = []
        self._latest: np.ndarray | None = None
        self.peak_versions = 0

    def push(self, w_before: np.ndarray, batch_idx: np.ndarray, w_after: np.ndarray):
        self._window.append((w_before, np.asarray(batch_idx)))
        if len(self._window) > self.capacity:
            self._window.pop(0)
        self._latest = w_after
        self.peak_versions = max(self.peak_versions, self.versions_retained)

    @property
    def versions_retained(self) -> int:
        return len(self._window) + (self._latest is not None)

    @property
    def window_complete(self) -> bool:
        return len(self._window) == self.capacity

    def window(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """Oldest first; each entry is (pre-step params, batch indices)."""
        return list(self._window)

    @property
    def latest(self) -> np.ndarray:
        if self._latest is None:
            raise ValueError("no step has been pushed yet")
        return self._latest

    def reset_window(self):
        """Drop the consumed window after a meta-update."""
        self._window.clear()
        self._latest = None


# ---------------------------------------------------------------------------
# problems
# ---------------------------------------------------------------------------

class EMLCProblem:
    """Binds the student/teacher models and datasets to the generic bi-level
    interface.  Batches are index arrays into the stored noisy/clean arrays;
    the noisy view carries only (x, observed label)."""

    def __init__(
        self,
        student: StudentSpec,
        teacher: TeacherSpec,
        noisy_x: np.ndarray,
        noisy_labels: np.ndarray,
        clean_x: np.ndarray,
        clean_y: np.ndarray,
    ):
        self.student = student
        self.teacher = teacher
        self.noisy_x = np.asarray(noisy_x, dtype=np.float64)
        self.noisy_labels = np.asarray(noisy_labels, dtype=np.int64)
        self.clean_x = np.asarray(clean_x, dtype=np.float64)
        self.clean_y = np.asarray(clean_y, dtype=np.int64)
        self._slayout = models.student_layout(student)
        self._tlayout = models.teacher_layout(teacher)

    @property
    def w_dim(self) -> int:
        return self._slayout.total

    @property
    def alpha_dim(self) -> int:
        return self._tlayout.total

    def f_values(self, w, batch_idx) -> np.ndarray:
        return models.student_forward(self.student, w, self.noisy_x[batch_idx])

    def f_jvp(self, w, batch_idx, v) -> np.ndarray:
        prog = models.student_logprob_program(self.student, self.noisy_x[batch_idx])
        return ad.jvp(prog, self._slayout.unflatten(w), self._slayout.unflatten(v))[0]

    def f_vjp(self, w, batch_idx, u) -> np.ndarray:
        prog = models.student_logprob_program(self.student, self.noisy_x[batch_idx])
        _, rec = ad.evaluate(prog, self._slayout.unflatten(w))
        return self._slayout.flatten(ad.vjp(rec, u))

    def q_values(self, alpha, batch_idx) -> np.ndarray:
        q, _ = models.teacher_forward(
            self.teacher, alpha, self.noisy_x[batch_idx], self.noisy_labels[batch_idx]
        )
        return q

    def q_vjp(self, alpha, batch_idx, u) -> np.ndarray:
        prog = models.teacher_q_program(
            self.teacher, self.noisy_x[batch_idx], self.noisy_labels[batch_idx]
        )
        _, rec = ad.evaluate(prog, self._tlayout.unflatten(alpha))
        return self._tlayout.flatten(ad.vjp(rec, u))

    def upper_value(self, w, clean_idx) -> float:
        return objectives.clean_meta_loss(
            self.student, w, self.clean_x[clean_idx], self.clean_y[clean_idx]
        )

    def upper_grad(self, w, clean_idx) -> np.ndarray:
        _, g = objectives.clean_meta_grad(
            self.student, w, self.clean_x[clean_idx], self.clean_y[clean_idx]
        )
        return g


class QuadraticBilinearProblem:
    """Constructed lower loss  0.5 ||w||^2 + w^T B a  with upper loss
    0.5 ||w||^2, expressed in the same -<q, f> inner-product form:

        f(w) = [-0.5 ||w||^2, -w_1, ..., -w_W],   q(a) = [1, (B a)_1, ...].

    Its inner Hessian in w is exactly the identity, which makes the
    discounted approximation exact, and both Hessian blocks are available in
    closed form for the exact unrolled oracle.
    """

    def __init__(self, coupling: np.ndarray):
        self.B = np.asarray(coupling, dtype=np.float64)
        if self.B.ndim != 2:
            raise ShapeError("coupling must be a matrix [w_dim, alpha_dim]")

    @property
    def w_dim(self) -> int:
        return self.B.shape[0]

    @property
    def alpha_dim(self) -> int:
        return self.B.shape[1]

    def f_values(self, w, batch_idx) -> np.ndarray:
        return np.concatenate([[-0.5 * w @ w], -w])[None, :]

    def f_jvp(self, w, batch_idx, v) -> np.ndarray:
        return np.concatenate([[-w @ v], -v])[None, :]

    def f_vjp(self, w, batch_idx, u) -> np.ndarray:
        u = np.asarray(u)[0]
        return -u[0] * w - u[1:]

    def q_values(self, alpha, batch_idx) -> np.ndarray:
        return np.concatenate([[1.0], self.B @ alpha])[None, :]

    def q_vjp(self, alpha, batch_idx, u) -> np.ndarray:
        return self.B.T @ np.asarray(u)[0][1:]

    def upper_value(self, w, clean_idx) -> float:
        return float(0.5 * w @ w)

    def upper_grad(self, w, clean_idx) -> np.ndarray:
        return w.copy()

    # closed-form inner Hessian blocks (enable the exact unrolled oracle)
    def inner_hessian_ww(self, w, alpha, batch_idx) -> np.ndarray:
        return np.eye(self.w_dim)

    def inner_hessian_wa(self, w, alpha, batch_idx) -> np.ndarray:
        return self.B.copy()


# ---------------------------------------------------------------------------
# inner problem steps
# ---------------------------------------------------------------------------

def inner_gradient(problem, w, alpha, batch_idx) -> np.ndarray:
    """Gradient in w of the batch-mean lower loss -mean_i <q_i, f_i>."""
    q = problem.q_values(alpha, batch_idx)
    return problem.f_vjp(w, batch_idx, -q / q.shape[0])


def inner_step(problem, w, alpha, batch_idx, lr: float) -> np.ndarray:
    """One vanilla SGD step on the lower loss (no momentum)."""
    g = inner_gradient(problem, w, alpha, batch_idx)
    if not np.all(np.isfinite(g)):
        raise NonFiniteError("non-finite inner gradient")
    return w - lr * g


def clean_feedback_grad(problem, w_final, clean_idx) -> np.ndarray:
    """Gradient of the clean upper loss at the post-update student params."""
    return problem.upper_grad(w_final, clean_idx)


def meta_step(alpha: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
    if alpha.shape != grad.shape:
        raise ShapeError(f"meta_step: {alpha.shape} vs {grad.shape}")
    return alpha - lr * grad


# ---------------------------------------------------------------------------
# meta-gradients
# ---------------------------------------------------------------------------

def _kernel(problem, w_tau, alpha, batch_idx, g_w) -> np.ndarray:
    """Per-(step, batch) contraction: sum_i (J_w(f_i) g_w)^T J_a(q_i).

    One dual-number forward sweep through f, one taped reverse sweep
    through q; three differentiation passes total.
    """
    jvp_mat = problem.f_jvp(w_tau, batch_idx, g_w)
    return problem.q_vjp(alpha, batch_idx, jvp_mat)


def fpmg(problem, snapshots: SnapshotBuffer, alpha, g_w, lr: float) -> MetaGradient:
    """Discounted meta-gradient over the completed look-ahead window.

    Walks the window newest to oldest; step tau contributes
    discount * (lr / batch_size) * sum_i (J_{w_tau}(f_i) g_w)^T J_a(q_i)
    with the discount starting at 1 and shrinking by gamma = 1 - lr per
    older step.  The accumulated vector is the gradient to descend.
    """
    if not snapshots.window_complete:
        raise ValueError(
            f"snapshot window incomplete: {len(snapshots.window())} of "
            f"{snapshots.capacity} steps recorded"
        )
    grad = np.zeros(problem.alpha_dim)
    gamma = 1.0 - lr
    discount = 1.0
    discounts = []
    max_passes = 0
    for w_tau, batch_idx in reversed(snapshots.window()):
        before = PASS_COUNTER.total()
        res = _kernel(problem, w_tau, alpha, batch_idx, g_w)
        max_passes = max(max_passes, PASS_COUNTER.total() - before)
        grad += discount * (lr / len(batch_idx)) * res
        discounts.append(discount)
        discount *= gamma
    return MetaGradient(grad, "fpmg", tuple(discounts), max_passes)


def one_step_meta_grad(
    problem, w_t, w_t1, alpha, batch_idx, g_w, lr: float
) -> MetaGradient:
    """Exact single-step meta-gradient  -lr * g_w^T H_wa  via the Jacobian
    contraction; ``w_t1`` must be the result of one inner step from ``w_t``
    on this batch (checked)."""
    expected = inner_step(problem, w_t, alpha, batch_idx, lr)
    if not np.allclose(expected, w_t1, rtol=1e-12, atol=1e-12):
        raise ValueError("w_t1 is not one inner step from w_t on this batch")
    res = _kernel(problem, w_t, alpha, batch_idx, g_w)
    return MetaGradient((lr / len(batch_idx)) * res, "one_step", (1.0,))


# ---------------------------------------------------------------------------
# oracles
# ---------------------------------------------------------------------------

_DENSE_GUARD = 10**6


def mixed_hessian_dense(problem, w, alpha, sample_idx) -> np.ndarray:
    """Sample-wise mixed Hessian  -J_w(f_i)^T J_a(q_i)  materialized densely
    (tiny problems only).  Rows of each Jacobian come from one reverse sweep
    per output class."""
    if problem.w_dim * problem.alpha_dim > _DENSE_GUARD:
        raise ValueError(
            f"dense mixed Hessian guard exceeded: "
            f"{problem.w_dim} x {problem.alpha_dim} > {_DENSE_GUARD}"
        )
    batch = np.asarray([sample_idx]).ravel()[:1]
    n_out = problem.f_values(w, batch).shape[1]
    jw = np.empty((n_out, problem.w_dim))
    ja = np.empty((n_out, problem.alpha_dim))
    unit = np.zeros((1, n_out))
    for c in range(n_out):
        unit[0, :] = 0.0
        unit[0, c] = 1.0
        jw[c] = problem.f_vjp(w, batch, unit)
        ja[c] = problem.q_vjp(alpha, batch, unit)
    return -jw.T @ ja


def fd_mixed_hessian(problem, w, alpha, sample_idx, step: float = 1e-4) -> np.ndarray:
    """Central-difference mixed Hessian of the sample-wise lower loss.

    The loss is bilinear in (f, q), so the double central difference
    [l(w+,a+) - l(w+,a-) - l(w-,a+) + l(w-,a-)] / (4 step^2) collapses
    exactly to -(df/2step)(dq/2step)^T with df, dq the central differences of
    the factor outputs; only forward evaluations are used."""
    batch = np.asarray([sample_idx]).ravel()[:1]
    n_out = problem.f_values(w, batch).shape[1]
    df = np.empty((problem.w_dim, n_out))
    for a in range(problem.w_dim):
        e = np.zeros(problem.w_dim)
        e[a] = step
        df[a] = (
            problem.f_values(w + e, batch)[0] - problem.f_values(w - e, batch)[0]
        ) / (2.0 * step)
    dq = np.empty((problem.alpha_dim, n_out))
    for b in range(problem.alpha_dim):
        e = np.zeros(problem.alpha_dim)
        e[b] = step
        dq[b] = (
            problem.q_values(alpha + e, batch)[0]
            - problem.q_values(alpha - e, batch)[0]
        ) / (2.0 * step)
    return -df @ dq.T


def _replay_window(problem, w_start, alpha, batches, lr: float) -> np.ndarray:
    w = w_start
    for batch_idx in batches:
        w = inner_step(problem, w, alpha, batch_idx, lr)
    return w


# central stencils: f'(x) ~ sum_j weight_j * f(x + offset_j * h) / h
_FD_STENCILS = {
    2: ((1, 0.5), (-1, -0.5)),
    4: ((-2, 1.0 / 12.0), (-1, -8.0 / 12.0), (1, 8.0 / 12.0), (2, -1.0 / 12.0)),
}


def unrolled_oracle(
    problem,
    w_start,
    alpha,
    batches,
    clean_idx,
    lr: float,
    fd_step: float = 1e-5,
    fd_order: int = 2,
    method: str = "fd",
) -> MetaGradient:
    """Reference meta-gradient: differentiate the full k-step recursion.

    method="fd": central finite differences over each teacher coordinate,
    replaying the window per probe (default, order 2; order 4 uses a
    five-point stencil for tighter tolerances).

    method="exact": propagate dw/da through the replayed steps with the
    problem's closed-form inner Hessian blocks; only available on problems
    that provide them (the constructed quadratic does, networks do not).
    """
    k = len(batches)
    if k < 1 or k > 8:
        raise ValueError("oracle supports 1 <= k <= 8 recorded batches")
    if method == "exact":
        if not hasattr(problem, "inner_hessian_ww"):
            raise ValueError("problem has no closed-form inner Hessians")
        w = np.asarray(w_start, dtype=np.float64)
        dw = np.zeros((problem.w_dim, problem.alpha_dim))
        for batch_idx in batches:
            hww = problem.inner_hessian_ww(w, alpha, batch_idx)
            hwa = problem.inner_hessian_wa(w, alpha, batch_idx)
            dw = dw - lr * (hww @ dw + hwa)
            w = inner_step(problem, w, alpha, batch_idx, lr)
        grad = dw.T @ problem.upper_grad(w, clean_idx)
        return MetaGradient(grad, "unrolled_oracle")

    if method != "fd":
        raise ValueError(f"unknown oracle method {method!r}")
    if fd_order not in _FD_STENCILS:
        raise ValueError("fd_order must be 2 or 4")
    if problem.alpha_dim * k > _DENSE_GUARD:
        raise ValueError("finite-difference oracle guard exceeded")

    def loss_at(a_vec: np.ndarray) -> float:
        w = _replay_window(problem, w_start, a_vec, batches, lr)
        return problem.upper_value(w, clean_idx)

    grad = np.zeros(problem.alpha_dim)
    for j in range(problem.alpha_dim):
        e = np.zeros(problem.alpha_dim)
        e[j] = 1.0
        grad[j] = sum(
            weight * loss_at(alpha + offset * fd_step * e)
            for offset, weight in _FD_STENCILS[fd_order]
        ) / fd_step
    return MetaGradient(grad, "finite_diff")
