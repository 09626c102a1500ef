"""Pseudo-labelling, reliable student-set generation and teacher/student pairing."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .datagen import LabeledSet
from .model import Model, classify, extract, scaled_logits


def pseudo_label(probabilities) -> np.ndarray | int:
    """Index of the largest probability; ties go to the lowest index."""
    p = np.asarray(probabilities)
    out = np.argmax(p, axis=-1)
    return int(out) if p.ndim == 1 else out


def top2_margin(logits: np.ndarray) -> np.ndarray:
    """pi_1 - pi_2 along the last axis."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape[-1] < 2:
        raise ValueError(f"margin needs at least 2 classes, got {logits.shape[-1]}")
    top = np.sort(logits, axis=-1)
    return top[..., -1] - top[..., -2]


def score(model: Model, x: np.ndarray, batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Temperature-scaled logits and probabilities for ``x``, no graph."""
    logits, probs = [], []
    with ad.no_grad():
        for start in range(0, len(x), batch_size):
            h, _ = extract(model, np.asarray(x[start:start + batch_size], dtype=np.float64))
            logits.append(scaled_logits(model, h).data)
            probs.append(classify(model, h).data)
    K = model.arch.num_classes
    if not logits:
        return np.zeros((0, K)), np.zeros((0, K))
    return np.concatenate(logits), np.concatenate(probs)


def average_margin(model: Model, x_unlabeled: np.ndarray) -> float:
    """Mean top-two gap of the scaled logits over the unlabeled target samples."""
    if model.arch.num_classes < 2:
        raise ValueError("average_margin: needs at least 2 classes")
    if len(x_unlabeled) == 0:
        raise ValueError("average_margin: no unlabeled samples")
    logits, _ = score(model, x_unlabeled)
    return float(top2_margin(logits).mean())


@dataclass
class StudentSet:
    indices: np.ndarray  # rows of the unlabeled collection
    pseudo_labels: np.ndarray
    confidences: np.ndarray
    margins: np.ndarray
    iteration: int = 0
    _by_class: dict = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return int(self.indices.size)

    def members_of(self, k: int) -> np.ndarray:
        """Positions (into this set) whose pseudo-label is ``k``."""
        if k not in self._by_class:
            self._by_class[k] = np.flatnonzero(self.pseudo_labels == k)
        return self._by_class[k]

    @classmethod
    def empty(cls, iteration: int = 0) -> "StudentSet":
        z = np.zeros(0)
        return cls(z.astype(np.int64), z.astype(np.int64), z, z, iteration)

    def dump_jsonl(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        with open(path, "w") as fh:
            for i, y, c, m in zip(self.indices, self.pseudo_labels, self.confidences, self.margins):
                fh.write(json.dumps({"index": int(i), "pseudo_label": int(y),
                                     "confidence": float(c), "margin": float(m)}) + "\n")
        return path


def reliable(logits: np.ndarray, probs: np.ndarray, delta: float, alpha: float) -> np.ndarray:
    """Boolean mask: margin above ``delta`` or top probability above ``alpha``."""
    return (top2_margin(logits) > delta) | (probs.max(axis=-1) > alpha)


def build_student_set(model: Model, x_unlabeled: np.ndarray, delta: float, alpha: float,
                      iteration: int = 0) -> StudentSet:
    if delta < 0:
        raise ValueError(f"delta must be >= 0, got {delta}")
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    logits, probs = score(model, x_unlabeled)
    if len(logits) == 0:
        return StudentSet.empty(iteration)
    keep = np.flatnonzero(reliable(logits, probs, delta, alpha))
    labels = pseudo_label(probs)
    return StudentSet(
        indices=keep.astype(np.int64),
        pseudo_labels=labels[keep].astype(np.int64),
        confidences=probs[keep, labels[keep]],
        margins=top2_margin(logits)[keep],
        iteration=iteration,
    )


@dataclass
class PairBatch:
    teacher_x: np.ndarray
    teacher_y: np.ndarray
    teacher_from_target: np.ndarray  # True for labeled-target teachers
    student_rows: np.ndarray  # row into the unlabeled collection, -1 if pair-less
    student_labels: np.ndarray  # pseudo-label, -1 if pair-less

    @property
    def paired(self) -> np.ndarray:
        return self.student_rows >= 0

    def __len__(self) -> int:
        return int(self.teacher_y.size)


def sample_pair_batch(source: LabeledSet, target_labeled: LabeledSet | None, students: StudentSet,
                      batch_size: int, rng: np.random.Generator) -> PairBatch:
    """Draw ``batch_size / 2`` teachers and one same-label student for each.

    Teachers are split evenly between source and labeled target when labeled
    target samples exist; otherwise all come from the source. A teacher whose
    label has no student is kept but marked pair-less.
    """
    if batch_size < 2 or batch_size % 2:
        raise ValueError(f"batch_size must be even and >= 2, got {batch_size}")
    has_target = target_labeled is not None and len(target_labeled) > 0
    if len(source) == 0 and not has_target:
        raise ValueError("sample_pair_batch: teacher set is empty")
    n_teachers = batch_size // 2
    if has_target and len(source):
        n_target = n_teachers // 2
        pools: Sequence[tuple[LabeledSet, int, bool]] = [
            (source, n_teachers - n_target, False), (target_labeled, n_target, True)]
    elif has_target:
        pools = [(target_labeled, n_teachers, True)]
    else:
        pools = [(source, n_teachers, False)]

    xs, ys, flags = [], [], []
    for pool, n, is_target in pools:
        idx = rng.integers(0, len(pool), size=n)
        xs.append(pool.x[idx])
        ys.append(pool.y[idx])
        flags.append(np.full(n, is_target))
    teacher_y = np.concatenate(ys).astype(np.int64)

    rows = np.full(n_teachers, -1, dtype=np.int64)
    labels = np.full(n_teachers, -1, dtype=np.int64)
    for t, y in enumerate(teacher_y):
        members = students.members_of(int(y))
        if members.size == 0:
            continue
        pick = members[rng.integers(0, members.size)]
        rows[t] = students.indices[pick]
        labels[t] = students.pseudo_labels[pick]
    return PairBatch(
        teacher_x=np.concatenate(xs),
        teacher_y=teacher_y,
        teacher_from_target=np.concatenate(flags),
        student_rows=rows,
        student_labels=labels,
    )
