"""Synthetic datasets, clean/noisy splitting, artificial label noise, and
batch sampling.

Noisy examples keep their hidden true label for evaluation only; nothing on
the training path reads it (the harness test suite audits this behaviorally).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class LabeledExample:
    x: np.ndarray
    y: int


@dataclass(frozen=True)
class NoisyExample:
    x: np.ndarray
    noisy_label: int
    true_label: int  # evaluation only


@dataclass(frozen=True)
class NoiseSpec:
    """kind: 'none' | 'symmetric' | 'asymmetric'; rate in [0,1]; transition
    map (class -> class) used by the asymmetric kind."""

    kind: str
    rate: float = 0.0
    transition: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.kind not in ("none", "symmetric", "asymmetric"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if not 0.0 <= self.rate <= 1.0:
            raise ValueError("noise rate must lie in [0, 1]")


@dataclass
class CleanDataset:
    x: np.ndarray  # [m, d]
    y: np.ndarray  # [m] int

    def __len__(self) -> int:
        return self.x.shape[0]

    @classmethod
    def from_examples(cls, examples: list[LabeledExample]) -> "CleanDataset":
        return cls(
            np.stack([e.x for e in examples]).astype(np.float64),
            np.array([e.y for e in examples], dtype=np.int64),
        )


@dataclass
class NoisyDataset:
    """Columnar noisy training set.  ``true_labels`` is for evaluation only."""

    x: np.ndarray              # [n, d]
    noisy_labels: np.ndarray   # [n] int
    _true_labels: np.ndarray = field(repr=False)

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def true_labels(self) -> np.ndarray:
        return self._true_labels

    @classmethod
    def from_examples(cls, examples: list[NoisyExample]) -> "NoisyDataset":
        return cls(
            np.stack([e.x for e in examples]).astype(np.float64),
            np.array([e.noisy_label for e in examples], dtype=np.int64),
            np.array([e.true_label for e in examples], dtype=np.int64),
        )


@dataclass
class DatasetPair:
    """Large noisy set plus a small clean set drawn from disjoint examples."""

    noisy: NoisyDataset
    clean: CleanDataset

    def __post_init__(self):
        if len(self.clean) >= len(self.noisy):
            raise ValueError("clean set must be smaller than the noisy set")


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def class_centers(classes: int, dim: int, radius: float = 4.0) -> np.ndarray:
    """Well-separated cluster centers: evenly spaced on a circle in the
    first two coordinates, zero elsewhere."""
    if classes < 2 or dim < 2:
        raise ValueError("need classes >= 2 and dim >= 2")
    ang = 2.0 * np.pi * np.arange(classes) / classes
    centers = np.zeros((classes, dim))
    centers[:, 0] = radius * np.cos(ang)
    centers[:, 1] = radius * np.sin(ang)
    return centers


def gen_blobs(
    classes: int, dim: int, per_class: int, spread: float, seed: int
) -> list[LabeledExample]:
    """Gaussian clusters around well-separated centers, deterministic per seed."""
    rng = np.random.default_rng(seed)
    centers = class_centers(classes, dim)
    out: list[LabeledExample] = []
    for c in range(classes):
        pts = centers[c] + spread * rng.standard_normal((per_class, dim))
        out.extend(LabeledExample(pts[i], c) for i in range(per_class))
    return out


def gen_spirals(
    classes: int,
    dim: int,
    per_class: int,
    jitter: float,
    seed: int,
    turns: float = 1.5,
    radius: float = 4.0,
) -> list[LabeledExample]:
    """Interleaved spiral arms in the first two coordinates, zero elsewhere.

    A deliberately fine-grained layout: adjacent arms sit radius/(classes*turns)
    apart, so resolving the boundary takes many locally consistent labels.
    Deterministic per seed.
    """
    if classes < 2 or dim < 2:
        raise ValueError("need classes >= 2 and dim >= 2")
    rng = np.random.default_rng(seed)
    out: list[LabeledExample] = []
    for c in range(classes):
        t = rng.uniform(0.15, 1.0, per_class)  # position along the arm
        ang = 2.0 * np.pi * (turns * t + c / classes)
        pts = np.zeros((per_class, dim))
        pts[:, 0] = radius * t * np.cos(ang)
        pts[:, 1] = radius * t * np.sin(ang)
        pts += jitter * rng.standard_normal((per_class, dim))
        out.extend(LabeledExample(pts[i], c) for i in range(per_class))
    return out


# ---------------------------------------------------------------------------
# noise injection
# ---------------------------------------------------------------------------

def inject_symmetric(
    examples: list[LabeledExample], rate: float, seed: int
) -> list[NoisyExample]:
    """Give floor(rate * n) randomly chosen examples a uniform random label
    over all classes; the rest keep their label.  Because the replacement may
    coincide with the true label, the wrong-label fraction is rate*(C-1)/C."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError("rate must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    n = len(examples)
    classes = max(e.y for e in examples) + 1
    flip = rng.permutation(n)[: int(rate * n)]
    labels = np.array([e.y for e in examples], dtype=np.int64)
    labels[flip] = rng.integers(0, classes, size=flip.size)
    return [
        NoisyExample(e.x, int(labels[i]), e.y) for i, e in enumerate(examples)
    ]


def circular_successor_map(classes: int) -> tuple[int, ...]:
    """Each class maps to its circular successor."""
    return tuple((c + 1) % classes for c in range(classes))


def cifar10_asymmetric_map() -> tuple[int, ...]:
    """The standard class-to-similar-class flips for the 10 CIFAR categories:
    truck->automobile, bird->airplane, deer->horse, cat<->dog."""
    m = list(range(10))
    m[9] = 1  # truck -> automobile
    m[2] = 0  # bird -> airplane
    m[4] = 7  # deer -> horse
    m[3] = 5  # cat -> dog
    m[5] = 3  # dog -> cat
    return tuple(m)


def inject_asymmetric(
    examples: list[LabeledExample],
    rate: float,
    transition: tuple[int, ...] | None,
    seed: int,
) -> list[NoisyExample]:
    """Relabel floor(rate * n) randomly chosen examples through a fixed
    class->class transition map (circular successor when none is given)."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError("rate must lie in [0, 1]")
    classes = max(e.y for e in examples) + 1
    if transition is None:
        transition = circular_successor_map(classes)
    if len(transition) < classes:
        raise ValueError("transition map must cover every class")
    rng = np.random.default_rng(seed)
    n = len(examples)
    flip = set(rng.permutation(n)[: int(rate * n)].tolist())
    return [
        NoisyExample(e.x, transition[e.y] if i in flip else e.y, e.y)
        for i, e in enumerate(examples)
    ]


def inject_noise(
    examples: list[LabeledExample], spec: NoiseSpec, seed: int
) -> list[NoisyExample]:
    if spec.kind == "none":
        return [NoisyExample(e.x, e.y, e.y) for e in examples]
    if spec.kind == "symmetric":
        return inject_symmetric(examples, spec.rate, seed)
    return inject_asymmetric(examples, spec.rate, spec.transition, seed)


# ---------------------------------------------------------------------------
# splitting and sampling
# ---------------------------------------------------------------------------

def split_clean_noisy(
    examples: list[LabeledExample], clean_size: int, seed: int
) -> tuple[list[LabeledExample], list[LabeledExample]]:
    """Split off a class-balanced clean subset; the remainder becomes the
    to-be-corrupted pool.  Index sets are disjoint by construction."""
    classes = max(e.y for e in examples) + 1
    if clean_size % classes:
        raise ValueError("clean_size must be divisible by the class count")
    if clean_size >= len(examples):
        raise ValueError("clean set must be smaller than the dataset")
    rng = np.random.default_rng(seed)
    per = clean_size // classes
    by_class: dict[int, list[int]] = {c: [] for c in range(classes)}
    for i, e in enumerate(examples):
        by_class[e.y].append(i)
    clean_idx: set[int] = set()
    for c in range(classes):
        pool = np.array(by_class[c])
        if pool.size < per:
            raise ValueError(f"class {c} has fewer than {per} examples")
        clean_idx.update(rng.permutation(pool)[:per].tolist())
    clean = [examples[i] for i in sorted(clean_idx)]
    rest = [examples[i] for i in range(len(examples)) if i not in clean_idx]
    return clean, rest


def make_dataset_pair(
    examples: list[LabeledExample], clean_size: int, noise: NoiseSpec, seed: int
) -> DatasetPair:
    clean, rest = split_clean_noisy(examples, clean_size, seed)
    noisy = inject_noise(rest, noise, seed + 1)
    return DatasetPair(
        NoisyDataset.from_examples(noisy), CleanDataset.from_examples(clean)
    )


def sample_batch(n: int, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform batch of indices without replacement."""
    if batch_size > n:
        raise ValueError(f"batch size {batch_size} exceeds dataset size {n}")
    return rng.choice(n, size=batch_size, replace=False)


# ---------------------------------------------------------------------------
# CSV interchange
# ---------------------------------------------------------------------------

def _feature_header(d: int) -> list[str]:
    return [f"f{i}" for i in range(d)]


def save_examples_csv(path, examples: list[LabeledExample]) -> None:
    d = examples[0].x.shape[0]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(_feature_header(d) + ["label"])
        for e in examples:
            w.writerow([repr(float(v)) for v in e.x] + [e.y])


def load_examples_csv(path) -> list[LabeledExample]:
    with open(path, newline="", encoding="utf-8") as fh:
        r = csv.reader(fh)
        header = next(r)
        if header[-1] != "label" or header[:-1] != _feature_header(len(header) - 1):
            raise ValueError(f"{path}: expected header f0,...,f{{d-1}},label")
        out = []
        for row in r:
            out.append(
                LabeledExample(np.array([float(v) for v in row[:-1]]), int(row[-1]))
            )
    return out


def save_noisy_csv(path, examples: list[NoisyExample]) -> None:
    d = examples[0].x.shape[0]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(_feature_header(d) + ["noisy_label", "true_label"])
        for e in examples:
            w.writerow(
                [repr(float(v)) for v in e.x] + [e.noisy_label, e.true_label]
            )


def load_noisy_csv(path) -> list[NoisyExample]:
    with open(path, newline="", encoding="utf-8") as fh:
        r = csv.reader(fh)
        header = next(r)
        d = len(header) - 2
        if header != _feature_header(d) + ["noisy_label", "true_label"]:
            raise ValueError(
                f"{path}: expected header f0,...,f{{d-1}},noisy_label,true_label"
            )
        out = []
        for row in r:
            out.append(
                NoisyExample(
                    np.array([float(v) for v in row[:d]]),
                    int(row[d]),
                    int(row[d + 1]),
                )
            )
    return out
