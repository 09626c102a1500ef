"""Evaluation, discrepancy analysis and run reports.

Everything here reads models (or checkpoints) and datasets; nothing feeds
back into training, so analysis cannot disturb training determinism.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .datagen import DatasetSplits, LabeledSet
from .model import Model, embed
from .trainer import evaluate_accuracy

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
NUM_BINS = 50
POPULATIONS = ("inter-domain", "intra-domain")


def evaluate(model: Model, data: LabeledSet) -> float:
    """Fraction of ``data`` whose predicted class equals the label."""
    return evaluate_accuracy(model, data)


def config_digest(config: dict) -> str:
    """sha256 of the canonical JSON form; insensitive to key order."""
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


@dataclass
class SimilarityHistogram:
    population: str
    iteration: int
    edges: list[float]
    counts: list[int]
    mean: float
    pairs: int

    def to_dict(self) -> dict:
        return asdict(self)


def _unit_rows(h: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(h, axis=1, keepdims=True)
    return h / np.maximum(norm, 1e-6)


def same_class_cosines(a: np.ndarray, ya: np.ndarray, b: np.ndarray, yb: np.ndarray, num_classes: int,
                       max_pairs_per_class: int | None = None,
                       rng: np.random.Generator | None = None, tag: str = "") -> np.ndarray:
    """Cosine similarity of every same-class (a, b) pair, class by class.

    With ``max_pairs_per_class`` set, each class contributes a uniform
    seeded sample of that many pairs instead of all of them.
    """
    ua, ub = _unit_rows(a), _unit_rows(b)
    out = []
    for k in range(num_classes):
        ia, ib = np.flatnonzero(ya == k), np.flatnonzero(yb == k)
        if ia.size == 0 or ib.size == 0:
            logger.info("%s: class %d missing from one population; skipped", tag or "similarity", k)
            continue
        sims = ua[ia] @ ub[ib].T
        sims = sims.ravel()
        if max_pairs_per_class is not None and sims.size > max_pairs_per_class:
            if rng is None:
                raise ValueError("sampling pairs needs an rng")
            sims = sims[np.sort(rng.choice(sims.size, size=max_pairs_per_class, replace=False))]
        out.append(sims)
    return np.concatenate(out) if out else np.zeros(0)


def histogram(values: np.ndarray, population: str, iteration: int, bins: int = NUM_BINS) -> SimilarityHistogram:
    edges = np.linspace(-1.0, 1.0, bins + 1)
    # rounding can push a cosine a hair past +-1
    counts, _ = np.histogram(np.clip(values, -1.0, 1.0), bins=edges)
    mean = float(values.mean()) if values.size else float("nan")
    return SimilarityHistogram(population, int(iteration), [float(e) for e in edges],
                               [int(c) for c in counts], mean, int(values.size))


def similarity_histograms(checkpoints: Sequence[tuple[int, Model]], splits: DatasetSplits,
                          max_pairs_per_class: int | None = None, seed: int = 0) -> list[SimilarityHistogram]:
    """Inter- and intra-domain same-class cosine histograms per checkpoint.

    inter-domain pairs a labeled source embedding with an unlabeled target
    embedding of the same class; intra-domain pairs a labeled target
    embedding with an unlabeled target one. Unlabeled classes come from the
    held-out ground truth, so this is evaluator-side only.
    """
    if not checkpoints:
        raise ValueError("similarity_histograms: need at least one checkpoint")
    from .rng import stream

    K = splits.num_classes
    y_tu = splits.target_unlabeled.evaluation_labels()
    series = []
    for iteration, model in checkpoints:
        rng = stream(seed, "analysis")
        h_s = embed(model, splits.source.x)
        h_tl = embed(model, splits.target_labeled.x)
        h_tu = embed(model, splits.target_unlabeled.x)
        inter = same_class_cosines(h_s, splits.source.y, h_tu, y_tu, K, max_pairs_per_class, rng, "inter-domain")
        series.append(histogram(inter, "inter-domain", iteration))
        if len(splits.target_labeled) == 0:
            logger.info("intra-domain: no labeled target samples; histogram skipped")
            continue
        intra = same_class_cosines(h_tl, splits.target_labeled.y, h_tu, y_tu, K, max_pairs_per_class, rng,
                                   "intra-domain")
        series.append(histogram(intra, "intra-domain", iteration))
    return series


def write_histograms(series: Iterable[SimilarityHistogram], path: str | os.PathLike) -> Path:
    path = Path(path)
    doc = {"schema_version": SCHEMA_VERSION, "kind": "similarity_histograms", "bins": NUM_BINS,
           "series": [h.to_dict() for h in series]}
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def read_histograms(path: str | os.PathLike) -> list[SimilarityHistogram]:
    doc = json.loads(Path(path).read_text())
    if doc.get("schema_version") != SCHEMA_VERSION or doc.get("kind") != "similarity_histograms":
        raise ValueError(f"{path}: not a version-{SCHEMA_VERSION} histogram file")
    return [SimilarityHistogram(**h) for h in doc["series"]]


EMBEDDING_SPLITS = (
    ("source", "source"),
    ("target_labeled", "target"),
    ("target_unlabeled", "target"),
    ("val", "target"),
)


def export_embeddings(model: Model, splits: DatasetSplits, path: str | os.PathLike) -> Path:
    """CSV of split tag, domain tag, class label and the embedding coordinates.

    The first line is a ``# schema_version=N`` comment, then the header.
    """
    path = Path(path)
    E = model.arch.embed_dim
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema_version={SCHEMA_VERSION}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["split", "domain", "label"] + [f"e{i}" for i in range(E)])
        for name, _ in EMBEDDING_SPLITS:
            part = getattr(splits, name)
            labels = part.evaluation_labels() if name == "target_unlabeled" else part.y
            h = embed(model, part.x)
            for row, y in zip(h, labels):
                w.writerow([name, part.domain, int(y)] + [repr(float(v)) for v in row])
    return path


def read_embeddings(path: str | os.PathLike) -> tuple[list[tuple[str, str, int]], np.ndarray]:
    with open(path, newline="") as fh:
        first = fh.readline().strip()
        if first != f"# schema_version={SCHEMA_VERSION}":
            raise ValueError(f"{path}: unsupported embeddings schema line {first!r}")
        rows = list(csv.reader(fh))
    body = rows[1:]
    tags = [(r[0], r[1], int(r[2])) for r in body]
    coords = np.array([[float(v) for v in r[3:]] for r in body]) if body else np.zeros((0, len(rows[0]) - 3))
    return tags, coords


@dataclass
class RunReport:
    mode: str
    seed: int
    config_digest: str
    accuracy: dict[str, float]
    wall_clock_seconds: float
    best_iteration: int = 0
    iterations: int = 0
    histograms: list[dict] = field(default_factory=list)
    embedding_paths: list[str] = field(default_factory=list)
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        return asdict(self)

    def write(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path


def split_accuracies(model: Model, splits: DatasetSplits) -> dict[str, float]:
    out = {}
    for name in ("source", "target_labeled", "val"):
        part = getattr(splits, name)
        if len(part):
            out[name] = evaluate(model, part)
    if len(splits.target_unlabeled):
        out["target_unlabeled"] = evaluate(model, splits.target_unlabeled.as_labeled())
    return out
