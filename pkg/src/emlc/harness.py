"""Full training loop, metrics, experiment configuration, and persistence.

One experiment is one sequential loop: every step takes a student SGD step on
teacher-corrected soft labels and records a snapshot; when the look-ahead
window completes, the teacher receives one combined update from the
discounted meta-gradient plus the supervised CE and gate-BCE gradients on a
freshly sampled clean batch.  The teacher is untouched between those steps.

Metrics rows are written at a fixed cadence; the returned student is the one
with the highest clean-set accuracy (the clean set doubles as validation).
Identical (config, seed) runs produce bitwise-identical metrics files.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import bilevel, data, models, objectives
from .autodiff import NonFiniteError
from .bilevel import BilevelConfig, EMLCProblem, SnapshotBuffer
from .data import CleanDataset, DatasetPair, NoiseSpec, NoisyDataset
from .models import StudentSpec, TeacherSpec


class ConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    # data
    dataset: str = "spirals"         # blobs | spirals | csv
    csv_path: str = ""
    test_csv_path: str = ""
    classes: int = 4
    dim: int = 2
    noisy_size: int = 2000
    clean_size: int = 100
    test_size: int = 1000
    blob_spread: float = 0.55
    spiral_jitter: float = 0.13
    spiral_turns: float = 1.5
    noise_kind: str = "symmetric"    # none | symmetric | asymmetric
    noise_rate: float = 0.5
    # models
    student_hidden: tuple[int, ...] = (32, 16)
    student_activation: str = "tanh"
    teacher_feature_hidden: tuple[int, ...] = (32,)
    teacher_feature_dim: int = 16
    teacher_embed_dim: int = 16
    teacher_gate_hidden: int = 32
    teacher_activation: str = "tanh"
    # bilevel
    lookahead_k: int = 5
    inner_lr: float = 0.1
    meta_lr: float = 0.2
    noisy_batch: int = 64
    clean_batch: int = 32
    # objectives
    corruption: str = "random"       # none | random | adversarial
    ce_weight: float = 1.0
    bce_weight: float = 1.0
    meta_weight: float = 1.0
    # run
    epochs: int = 40
    eval_every: int = 50             # steps; 0 disables intermediate evals
    lr_step_epochs: int = 0          # 0 = off; else x0.1 at this epoch
    grad_audit_every: int = 0        # 0 = off; else dump every Nth meta step
    audit_oracle: int = 0            # 1 = add finite-diff oracle to the dump
    seed: int = 0
    out_dir: str = ""

    def validate(self) -> "ExperimentConfig":
        if self.dataset not in ("blobs", "spirals", "csv"):
            raise ConfigError(f"unknown dataset kind {self.dataset!r}")
        if self.dataset == "csv" and not self.csv_path:
            raise ConfigError("csv dataset needs csv_path")
        if self.classes < 2 or self.dim < 2:
            raise ConfigError("need classes >= 2 and dim >= 2")
        if self.clean_size >= self.noisy_size:
            raise ConfigError("clean_size must be smaller than noisy_size")
        objectives.validate_strategy(self.corruption)
        NoiseSpec(self.noise_kind, self.noise_rate)
        self.bilevel_config()  # validates k, lrs against total steps
        if self.eval_every < 0 or self.epochs < 1:
            raise ConfigError("epochs >= 1 and eval_every >= 0 required")
        return self

    def student_spec(self) -> StudentSpec:
        return StudentSpec(
            self.dim, tuple(self.student_hidden), self.classes,
            self.student_activation,
        )

    def teacher_spec(self) -> TeacherSpec:
        return TeacherSpec(
            self.dim,
            tuple(self.teacher_feature_hidden),
            self.teacher_feature_dim,
            self.classes,
            self.teacher_embed_dim,
            self.teacher_gate_hidden,
            self.teacher_activation,
        )

    def steps_per_epoch(self, noisy_count: int | None = None) -> int:
        if noisy_count is None:
            noisy_count = self.noisy_size - self.clean_size
        return max(1, math.ceil(noisy_count / self.noisy_batch))

    def total_steps(self, noisy_count: int | None = None) -> int:
        return self.epochs * self.steps_per_epoch(noisy_count)

    def bilevel_config(self, noisy_count: int | None = None) -> BilevelConfig:
        return BilevelConfig(
            self.lookahead_k,
            self.inner_lr,
            self.meta_lr,
            self.total_steps(noisy_count),
            self.noisy_batch,
            self.clean_batch,
        )


_TUPLE_FIELDS = ("student_hidden", "teacher_feature_hidden")


def config_to_text(cfg: ExperimentConfig) -> str:
    lines = []
    for f in fields(ExperimentConfig):
        v = getattr(cfg, f.name)
        if f.name in _TUPLE_FIELDS:
            v = ",".join(str(i) for i in v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def config_from_text(text: str) -> ExperimentConfig:
    """Parse the flat key = value format; '#' starts a comment; unknown keys
    are errors."""
    known = {f.name: f for f in fields(ExperimentConfig)}
    out: dict = {}
    for ln, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {ln}: expected 'key = value', got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"line {ln}: unknown key {key!r}")
        ftype = known[key].type
        if key in _TUPLE_FIELDS:
            out[key] = tuple(int(s) for s in val.split(",") if s.strip())
        elif ftype == "int":
            out[key] = int(val)
        elif ftype == "float":
            out[key] = float(val)
        else:
            out[key] = val
    return ExperimentConfig(**out).validate()


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return config_from_text(fh.read())


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

METRIC_COLUMNS = (
    "step",
    "epoch",
    "meta_loss",
    "teacher_ce",
    "gate_bce",
    "train_label_recovery",
    "wrong_label_recovery",
    "test_accuracy",
)


def _round9(v: float) -> float:
    """Metrics are reported at 9 significant digits; rounding at record time
    keeps the CSV round trip exact."""
    return float(f"{float(v):.9g}")


@dataclass(frozen=True)
class MetricsRecord:
    step: int
    epoch: int
    meta_loss: float
    teacher_ce: float
    gate_bce: float
    train_label_recovery: float
    wrong_label_recovery: float | None
    test_accuracy: float

    def __post_init__(self):
        for name in ("train_label_recovery", "test_accuracy"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        w = self.wrong_label_recovery
        if w is not None and not 0.0 <= w <= 1.0:
            raise ValueError(f"wrong_label_recovery must lie in [0, 1], got {w}")


@dataclass
class TrainResult:
    student_w: np.ndarray        # highest clean-set accuracy checkpoint
    final_student_w: np.ndarray
    teacher_alpha: np.ndarray
    metrics: list[MetricsRecord]
    best_val_accuracy: float
    best_step: int
    meta_update_steps: list[int] = field(default_factory=list)
    snapshot_peak: int = 0


def evaluate_accuracy(
    sspec: StudentSpec, w: np.ndarray, x: np.ndarray, y: np.ndarray
) -> float:
    """Top-1 accuracy; argmax ties break to the lowest class index."""
    if x.shape[0] == 0:
        raise ValueError("test set must be nonempty")
    logp = models.student_forward(sspec, w, x)
    return float((logp.argmax(axis=1) == np.asarray(y)).mean())


def label_recovery(
    tspec: TeacherSpec, alpha: np.ndarray, noisy: NoisyDataset
) -> tuple[float, float | None]:
    """Fraction of noisy-set samples whose teacher argmax equals the true
    label, in total and restricted to the corrupted ones.  The wrong-label
    rate is None when no sample is corrupted."""
    q, _ = models.teacher_forward(tspec, alpha, noisy.x, noisy.noisy_labels)
    pred = q.argmax(axis=1)
    truth = noisy.true_labels
    total = float((pred == truth).mean())
    wrong_mask = noisy.noisy_labels != truth
    if not wrong_mask.any():
        return total, None
    return total, float((pred[wrong_mask] == truth[wrong_mask]).mean())


# ---------------------------------------------------------------------------
# experiment assembly
# ---------------------------------------------------------------------------

def build_datasets(cfg: ExperimentConfig) -> tuple[DatasetPair, CleanDataset]:
    """Deterministic (pair, test set) for a validated config."""
    if cfg.dataset == "csv":
        examples = data.load_examples_csv(cfg.csv_path)
        if not cfg.test_csv_path:
            raise ConfigError("csv dataset needs test_csv_path for evaluation")
        test = CleanDataset.from_examples(data.load_examples_csv(cfg.test_csv_path))
    else:
        if cfg.dataset == "blobs":
            def gen(per_class, seed):
                return data.gen_blobs(
                    cfg.classes, cfg.dim, per_class, cfg.blob_spread, seed
                )
        else:
            def gen(per_class, seed):
                return data.gen_spirals(
                    cfg.classes, cfg.dim, per_class, cfg.spiral_jitter, seed,
                    turns=cfg.spiral_turns,
                )
        examples = gen(cfg.noisy_size // cfg.classes, cfg.seed)
        test = CleanDataset.from_examples(
            gen(cfg.test_size // cfg.classes, cfg.seed + 9001)
        )
    noise = NoiseSpec(cfg.noise_kind, cfg.noise_rate)
    pair = data.make_dataset_pair(examples, cfg.clean_size, noise, cfg.seed + 1)
    return pair, test


def _eval_metrics(cfg, sspec, tspec, w, alpha, pair, test, step, epoch, eval_rng):
    meta = objectives.clean_meta_loss(sspec, w, pair.clean.x, pair.clean.y)
    tce = objectives.teacher_ce_loss(tspec, alpha, pair.clean.x, pair.clean.y)
    if cfg.corruption == "none":
        bce = 0.0
    else:
        bce = objectives.gate_bce_loss(
            tspec, alpha, pair.clean.x, pair.clean.y, cfg.corruption, eval_rng
        )
    total_rec, wrong_rec = label_recovery(tspec, alpha, pair.noisy)
    acc = evaluate_accuracy(sspec, w, test.x, test.y)
    return MetricsRecord(
        step,
        epoch,
        _round9(meta),
        _round9(tce),
        _round9(bce),
        _round9(total_rec),
        None if wrong_rec is None else _round9(wrong_rec),
        _round9(acc),
    )


def train_emlc(
    cfg: ExperimentConfig,
    pair: DatasetPair | None = None,
    test: CleanDataset | None = None,
) -> TrainResult:
    """Run the full two-level loop; see the module docstring for the shape.

    Datasets may be passed in (e.g. to share them with a baseline run);
    otherwise they are built from the config.
    """
    cfg.validate()
    if pair is None or test is None:
        pair, test = build_datasets(cfg)
    sspec, tspec = cfg.student_spec(), cfg.teacher_spec()
    bcfg = cfg.bilevel_config(len(pair.noisy))
    problem = EMLCProblem(
        sspec, tspec, pair.noisy.x, pair.noisy.noisy_labels, pair.clean.x, pair.clean.y
    )

    s_w, s_alpha, s_batch, s_corrupt = np.random.SeedSequence(cfg.seed).spawn(4)
    w = models.init_params(
        models.student_layout(sspec), int(s_w.generate_state(1)[0])
    )
    alpha = models.init_params(
        models.teacher_layout(tspec), int(s_alpha.generate_state(1)[0])
    )
    batch_rng = np.random.default_rng(s_batch)
    corrupt_rng = np.random.default_rng(s_corrupt)

    k = bcfg.lookahead
    total = bcfg.total_steps
    steps_per_epoch = cfg.steps_per_epoch(len(pair.noisy))
    buffer = SnapshotBuffer(k)
    metrics: list[MetricsRecord] = []
    meta_steps: list[int] = []
    best_val, best_w, best_step = -1.0, w.copy(), -1
    alpha_guard = alpha
    audit_rows: list[dict] = []

    try:
        for t in range(total):
            epoch = t // steps_per_epoch
            lr = bcfg.inner_lr
            if cfg.lr_step_epochs and epoch >= cfg.lr_step_epochs:
                lr = bcfg.inner_lr * 0.1
            noisy_idx = data.sample_batch(len(pair.noisy), bcfg.noisy_batch, batch_rng)
            w_next = bilevel.inner_step(problem, w, alpha, noisy_idx, lr)
            buffer.push(w, noisy_idx, w_next)

            if t % k == k - 1:
                assert alpha is alpha_guard, "teacher changed inside a window"
                clean_idx = data.sample_batch(
                    len(pair.clean), bcfg.clean_batch, batch_rng
                )
                g_w = bilevel.clean_feedback_grad(problem, w_next, clean_idx)
                mg = bilevel.fpmg(problem, buffer, alpha, g_w, lr)
                _, ce_g = objectives.teacher_ce_grad(
                    tspec, alpha, pair.clean.x[clean_idx], pair.clean.y[clean_idx]
                )
                total_g = cfg.meta_weight * mg.grad + cfg.ce_weight * ce_g
                if cfg.corruption != "none":
                    _, bce_g = objectives.gate_bce_grad(
                        tspec,
                        alpha,
                        pair.clean.x[clean_idx],
                        pair.clean.y[clean_idx],
                        cfg.corruption,
                        corrupt_rng,
                    )
                    total_g = total_g + cfg.bce_weight * bce_g
                if not np.all(np.isfinite(total_g)):
                    raise NonFiniteError("non-finite teacher gradient")
                meta_steps.append(t)
                if cfg.grad_audit_every and (
                    len(meta_steps) % cfg.grad_audit_every == 0
                ):
                    oracle = None
                    if cfg.audit_oracle:
                        win = buffer.window()
                        oracle = bilevel.unrolled_oracle(
                            problem, win[0][0], alpha,
                            [b for _, b in win], clean_idx, lr,
                        ).grad
                    audit_rows.append(
                        _audit_row(tspec, t, mg.grad, total_g, oracle)
                    )
                alpha = bilevel.meta_step(alpha, total_g, bcfg.meta_lr)
                alpha_guard = alpha
                buffer.reset_window()
            w = w_next

            due = cfg.eval_every and (t + 1) % cfg.eval_every == 0
            if due or t == total - 1:
                rec = _eval_metrics(
                    cfg, sspec, tspec, w, alpha, pair, test, t, epoch,
                    np.random.default_rng((cfg.seed, t)),
                )
                metrics.append(rec)
                val = evaluate_accuracy(sspec, w, pair.clean.x, pair.clean.y)
                if val > best_val:
                    best_val, best_w, best_step = val, w.copy(), t
    except NonFiniteError as err:
        _dump_divergence(cfg, t, w, alpha, err)
        raise TrainingDiverged(f"aborted at step {t}: {err}") from err

    if cfg.grad_audit_every and cfg.out_dir:
        _write_audit(cfg.out_dir, tspec, audit_rows)
    return TrainResult(
        best_w, w, alpha, metrics, best_val, best_step, meta_steps,
        buffer.peak_versions,
    )


def train_ce_baseline(
    cfg: ExperimentConfig,
    pair: DatasetPair | None = None,
    test: CleanDataset | None = None,
) -> TrainResult:
    """Same student, same budget, plain cross entropy on the noisy labels.

    The paired reference for measuring the benefit of label correction; it
    shares the schedule, batch sizes, and clean-set model selection."""
    cfg.validate()
    if pair is None or test is None:
        pair, test = build_datasets(cfg)
    sspec = cfg.student_spec()
    bcfg = cfg.bilevel_config(len(pair.noisy))
    s_w, _, s_batch, _ = np.random.SeedSequence(cfg.seed).spawn(4)
    w = models.init_params(
        models.student_layout(sspec), int(s_w.generate_state(1)[0])
    )
    batch_rng = np.random.default_rng(s_batch)

    total = bcfg.total_steps
    steps_per_epoch = cfg.steps_per_epoch(len(pair.noisy))
    metrics: list[MetricsRecord] = []
    best_val, best_w, best_step = -1.0, w.copy(), -1
    for t in range(total):
        epoch = t // steps_per_epoch
        lr = bcfg.inner_lr
        if cfg.lr_step_epochs and epoch >= cfg.lr_step_epochs:
            lr = bcfg.inner_lr * 0.1
        idx = data.sample_batch(len(pair.noisy), bcfg.noisy_batch, batch_rng)
        _, g = objectives.clean_meta_grad(
            sspec, w, pair.noisy.x[idx], pair.noisy.noisy_labels[idx]
        )
        w = w - lr * g
        due = cfg.eval_every and (t + 1) % cfg.eval_every == 0
        if due or t == total - 1:
            acc = evaluate_accuracy(sspec, w, test.x, test.y)
            metrics.append(
                MetricsRecord(t, epoch, 0.0, 0.0, 0.0, 0.0, None, _round9(acc))
            )
            val = evaluate_accuracy(sspec, w, pair.clean.x, pair.clean.y)
            if val > best_val:
                best_val, best_w, best_step = val, w.copy(), t
    return TrainResult(best_w, w, np.zeros(0), metrics, best_val, best_step)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, int):
        return str(v)
    return f"{v:.9g}"


def write_metrics(
    metrics: list[MetricsRecord],
    out_dir,
    config_text: str,
    seed: int,
    wall_seconds: float,
) -> dict:
    """Write metrics.csv, summary.json, and config.echo; returns the summary."""
    import os

    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "metrics.csv")
    try:
        with open(csv_path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(",".join(METRIC_COLUMNS) + "\n")
            for r in metrics:
                fh.write(
                    ",".join(_fmt(getattr(r, c)) for c in METRIC_COLUMNS) + "\n"
                )
        with open(os.path.join(out_dir, "config.echo"), "w", encoding="utf-8") as fh:
            fh.write(config_text)
        summary = summarize_metrics(metrics)
        summary.update(config=config_text, seed=seed, wall_seconds=wall_seconds)
        with open(os.path.join(out_dir, "summary.json"), "w", encoding="utf-8") as fh:
            json.dump(summary, fh, indent=2)
            fh.write("\n")
    except OSError as err:
        raise OSError(f"writing metrics under {out_dir!r} failed: {err}") from err
    return summary


def summarize_metrics(metrics: list[MetricsRecord]) -> dict:
    if not metrics:
        return {
            "best_accuracy": None,
            "final_accuracy": None,
            "best_total_recovery": None,
            "best_wrong_recovery": None,
            "final_meta_loss": None,
        }
    wrongs = [r.wrong_label_recovery for r in metrics if r.wrong_label_recovery is not None]
    return {
        "best_accuracy": max(r.test_accuracy for r in metrics),
        "final_accuracy": metrics[-1].test_accuracy,
        "best_total_recovery": max(r.train_label_recovery for r in metrics),
        "best_wrong_recovery": max(wrongs) if wrongs else None,
        "final_meta_loss": metrics[-1].meta_loss,
    }


def read_metrics_csv(path) -> list[MetricsRecord]:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != ",".join(METRIC_COLUMNS):
            raise ValueError(f"{path}: unexpected metrics header")
        out = []
        for line in fh:
            parts = line.rstrip("\n").split(",")
            out.append(
                MetricsRecord(
                    int(parts[0]),
                    int(parts[1]),
                    float(parts[2]),
                    float(parts[3]),
                    float(parts[4]),
                    float(parts[5]),
                    float(parts[6]) if parts[6] else None,
                    float(parts[7]),
                )
            )
    return out


def _audit_row(
    tspec: TeacherSpec, step: int, meta_grad, total_grad, oracle_grad=None
) -> dict:
    segs = models.teacher_segments(tspec)
    row = {
        "step": step,
        "meta_norm": float(np.linalg.norm(meta_grad)),
        "total_norm": float(np.linalg.norm(total_grad)),
    }
    for name, slc in segs.items():
        row[f"meta_{name}"] = float(np.linalg.norm(meta_grad[slc]))
    if oracle_grad is None:
        row["oracle_norm"] = None
        row["oracle_rel_err"] = None
    else:
        onorm = float(np.linalg.norm(oracle_grad))
        row["oracle_norm"] = onorm
        row["oracle_rel_err"] = (
            float(np.linalg.norm(meta_grad - oracle_grad)) / onorm if onorm else None
        )
    return row


def _write_audit(out_dir, tspec: TeacherSpec, rows: list[dict]) -> None:
    import os

    os.makedirs(out_dir, exist_ok=True)
    cols = (
        ["step", "meta_norm", "total_norm"]
        + [f"meta_{n}" for n in models.teacher_segments(tspec)]
        + ["oracle_norm", "oracle_rel_err"]
    )
    with open(os.path.join(out_dir, "grad_audit.csv"), "w", encoding="utf-8") as fh:
        fh.write(",".join(cols) + "\n")
        for r in rows:
            fh.write(",".join(_fmt(r[c]) for c in cols) + "\n")


def _dump_divergence(cfg, step, w, alpha, err) -> None:
    if not cfg.out_dir:
        return
    import os

    try:
        os.makedirs(cfg.out_dir, exist_ok=True)
        with open(os.path.join(cfg.out_dir, "divergence.json"), "w") as fh:
            json.dump(
                {
                    "step": int(step),
                    "error": str(err),
                    "w_norm": float(np.linalg.norm(w)),
                    "w_finite": bool(np.all(np.isfinite(w))),
                    "alpha_norm": float(np.linalg.norm(alpha)),
                    "alpha_finite": bool(np.all(np.isfinite(alpha))),
                },
                fh,
                indent=2,
            )
    except OSError:
        pass


def run_experiment(cfg: ExperimentConfig, baseline: bool = False) -> dict:
    """Train, write artifacts to cfg.out_dir, and return the summary."""
    cfg.validate()
    if not cfg.out_dir:
        raise ConfigError("run_experiment needs out_dir")
    start = time.monotonic()
    result = (train_ce_baseline if baseline else train_emlc)(cfg)
    wall = time.monotonic() - start
    return write_metrics(
        result.metrics, cfg.out_dir, config_to_text(cfg), cfg.seed, wall
    )
