"""Pre-training and the sample-to-sample self-distillation loop."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import losses
from .datagen import DatasetSplits, LabeledSet
from .model import Model, classify, extract, predict
from .selection import (
    StudentSet,
    average_margin,
    build_student_set,
    pseudo_label,
    sample_pair_batch,
)
from .style import assistant_forward, hook_stats, sample_epsilon

logger = logging.getLogger(__name__)

MODES = ("s3d", "s3d-no-af", "s-plus-t")


@dataclass
class TrainConfig:
    shots: int = 3
    val_per_class: int = 10
    batch_size: int = 32
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    temperature: float = 0.05
    alpha: float = 0.95
    rho: float = 0.1
    M: int = 100
    m: float = 8.0
    max_iterations: int = 10_000
    val_frequency: int = 250
    patience: int = 5
    pretrain_max_iterations: int = 5_000
    pretrain_val_frequency: int = 200
    pretrain_patience: int = 5
    hooks: tuple[bool, ...] = (True, True)
    mode: str = "s3d"
    seed: int = 0

    def __post_init__(self):
        self.hooks = tuple(bool(h) for h in self.hooks)
        self.validate()

    def validate(self) -> None:
        def bad(name, why):
            raise ConfigError(name, why)

        if self.batch_size < 2 or self.batch_size % 2:
            bad("batch_size", "must be even and >= 2")
        if self.M < 1:
            bad("M", "must be >= 1")
        for name in ("patience", "pretrain_patience", "val_frequency", "pretrain_val_frequency"):
            if getattr(self, name) < 1:
                bad(name, "must be >= 1")
        if self.max_iterations < 1 or self.pretrain_max_iterations < 1:
            bad("max_iterations", "must be >= 1")
        if not 0 < self.alpha < 1:
            bad("alpha", "must lie in (0, 1)")
        if self.rho <= 0:
            bad("rho", "must be positive")
        if self.m <= 0:
            bad("m", "must be positive")
        if self.temperature <= 0:
            bad("temperature", "must be positive")
        if self.lr <= 0:
            bad("lr", "must be positive")
        if not 0 <= self.momentum < 1:
            bad("momentum", "must lie in [0, 1)")
        if self.weight_decay < 0:
            bad("weight_decay", "must be >= 0")
        if self.shots < 0 or self.val_per_class < 1:
            bad("shots", "shots must be >= 0 and val_per_class >= 1")
        if self.mode not in MODES:
            bad("mode", f"must be one of {', '.join(MODES)}")
        if self.seed < 0:
            bad("seed", "must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hooks"] = list(self.hooks)
        return d


class ConfigError(ValueError):
    def __init__(self, field_path: str, message: str):
        super().__init__(f"{field_path}: {message}")
        self.field_path = field_path


class SGD:
    """Momentum SGD with L2 weight decay folded into the velocity."""

    def __init__(self, model: Model, lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        self.model = model
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {k: np.zeros_like(p.data) for k, p in model.params.items()}

    def step(self) -> None:
        for name, p in self.model.params.items():
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                bad = int(np.size(g) - np.isfinite(g).sum())
                raise FloatingPointError(f"sgd_step: {bad} non-finite gradient entries in {name!r}")
            v = self.velocity[name]
            v *= self.momentum
            v += g
            if self.weight_decay:
                v += self.weight_decay * p.data
            p.data = p.data - self.lr * v


def evaluate_accuracy(model: Model, data: LabeledSet) -> float:
    if len(data) == 0:
        raise ValueError("evaluate: empty set")
    preds = pseudo_label(predict(model, data.x))
    return float(np.mean(preds == data.y))


@dataclass
class StageResult:
    model: Model
    best_val_acc: float
    best_iteration: int
    iterations: int
    log: list[dict] = field(default_factory=list)
    refreshes: list[int] = field(default_factory=list)


def _teacher_step(model: Model, opt: SGD, batch) -> float:
    model.zero_grad()
    h, _ = extract(model, batch.teacher_x)
    loss = losses.labeled_ce(classify(model, h), batch.teacher_y)
    ad.backward(loss)
    opt.step()
    return loss.item()


def pretrain(model: Model, splits: DatasetSplits, config: TrainConfig, rng: np.random.Generator,
             on_validate: Callable[[int, Model, dict], None] | None = None) -> StageResult:
    """Cross-entropy training on source + labeled target with plateau stopping.

    Returns the best-validation snapshot; a tie goes to the later snapshot.
    Ties do not reset patience.
    """
    if len(splits.source) + len(splits.target_labeled) == 0:
        raise ValueError("pretrain: no labeled data")
    opt = SGD(model, config.lr, config.momentum, config.weight_decay)
    empty = StudentSet.empty()
    best_acc, best_it, best_state, stale = -1.0, 0, model.state(), 0
    log: list[dict] = []
    running: list[float] = []
    it = 0
    for it in range(1, config.pretrain_max_iterations + 1):
        batch = sample_pair_batch(splits.source, splits.target_labeled, empty, config.batch_size, rng)
        running.append(_teacher_step(model, opt, batch))
        if it % config.pretrain_val_frequency == 0:
            acc = evaluate_accuracy(model, splits.val)
            rec = {"iteration": it, "L_lab": float(np.mean(running)), "val_acc": acc}
            running = []
            log.append(rec)
            if on_validate is not None:
                on_validate(it, model, rec)
            improved = acc > best_acc
            if acc >= best_acc:
                best_acc, best_it, best_state = acc, it, model.state()
            stale = 0 if improved else stale + 1
            if stale >= config.pretrain_patience:
                break
    model.load_state(best_state)
    logger.info("pretrain: best val acc %.4f at iteration %d", best_acc, best_it)
    return StageResult(model, best_acc, best_it, it, log)


Diagnostics = Callable[[StudentSet], float | None]


def train_step(model: Model, opt: SGD, splits: DatasetSplits, students: StudentSet, config: TrainConfig,
               iteration: int, rng: np.random.Generator) -> losses.LossBreakdown:
    """One iteration of the paired self-distillation objective."""
    batch = sample_pair_batch(splits.source, splits.target_labeled, students, config.batch_size, rng)
    lam = losses.lambda_rampup(iteration / config.max_iterations, config.m)
    model.zero_grad()
    h_t, hooked_t = extract(model, batch.teacher_x)
    p_t = classify(model, h_t)
    lab = losses.labeled_ce(p_t, batch.teacher_y)
    unl = pair = ad.Tensor(0.0)
    paired = batch.paired
    if config.mode != "s-plus-t" and paired.any():
        x_s = splits.target_unlabeled.x[batch.student_rows[paired]]
        h_s, _ = extract(model, x_s)
        p_s = classify(model, h_s)
        unl = losses.weighted_ce(p_s, batch.student_labels[paired])
        if config.mode == "s3d":
            stats = [(mu[paired], sd[paired]) for mu, sd in hook_stats(hooked_t)]
            eps = np.array([sample_epsilon(config.rho, rng) for _ in range(int(paired.sum()))])
            target = assistant_forward(model, x_s, stats, eps)
        else:
            target = ad.detach(p_t).data[paired]
        pair = losses.pair_kl(target, p_s)
    total = losses.total_loss(lab, unl, pair, lam)
    ad.backward(total)
    opt.step()
    return losses.breakdown(lab, unl, pair, lam, total)


def train_s3d(model: Model, splits: DatasetSplits, config: TrainConfig, delta: float,
              rng: np.random.Generator, diagnostics: Diagnostics | None = None,
              on_validate: Callable[[int, Model, dict], None] | None = None) -> StageResult:
    """Alternate student-set refreshes and paired training; return the best-validation snapshot.

    Validation ties go to the later snapshot but do not reset patience.

    ``diagnostics`` may compute pseudo-label precision for the metrics log;
    it is the only place ground truth of the unlabeled split can enter.
    """
    if len(splits.target_unlabeled) == 0:
        raise ValueError("train_s3d: no unlabeled target samples to adapt to")
    opt = SGD(model, config.lr, config.momentum, config.weight_decay)
    x_tu = splits.target_unlabeled.x
    students = StudentSet.empty()
    refreshes: list[int] = []
    best_acc, best_it, best_state, stale = -1.0, 0, model.state(), 0
    log: list[dict] = []
    window: list[losses.LossBreakdown] = []
    it = 0
    for it in range(config.max_iterations):
        if config.mode != "s-plus-t" and it % config.M == 0:
            students = build_student_set(model, x_tu, delta, config.alpha, iteration=it)
            refreshes.append(it)
        window.append(train_step(model, opt, splits, students, config, it, rng))
        done = it + 1
        if done % config.val_frequency == 0:
            acc = evaluate_accuracy(model, splits.val)
            precision = diagnostics(students) if diagnostics is not None else None
            rec = {
                "iteration": done,
                "L_lab": float(np.mean([w.lab for w in window])),
                "L_unl": float(np.mean([w.unl for w in window])),
                "L_pair": float(np.mean([w.pair for w in window])),
                "lambda": window[-1].lam,
                "val_acc": acc,
                "student_set_size": len(students),
                "pseudo_label_precision": precision,
            }
            window = []
            log.append(rec)
            if on_validate is not None:
                on_validate(done, model, rec)
            improved = acc > best_acc
            if acc >= best_acc:
                best_acc, best_it, best_state = acc, done, model.state()
            stale = 0 if improved else stale + 1
            if stale >= config.patience:
                break
    it = it + 1
    model.load_state(best_state)
    logger.info("train[%s]: best val acc %.4f at iteration %d (ran %d)", config.mode, best_acc, best_it, it)
    return StageResult(model, best_acc, best_it, it, log, refreshes)


def pseudo_label_precision(splits: DatasetSplits) -> Diagnostics:
    """Evaluator-side precision of the student set's pseudo-labels."""
    truth = splits.target_unlabeled.evaluation_labels()

    def measure(students: StudentSet) -> float | None:
        if len(students) == 0:
            return None
        return float(np.mean(truth[students.indices] == students.pseudo_labels))

    return measure


def run_pipeline(model: Model, splits: DatasetSplits, config: TrainConfig, rng_pre: np.random.Generator,
                 rng_s3d: np.random.Generator):
    """pretrain -> delta -> train_s3d, returning both stage results and delta."""
    pre = pretrain(model, splits, config, rng_pre)
    pre_state = model.state()
    delta = average_margin(model, splits.target_unlabeled.x)
    result = train_s3d(model, splits, config, delta, rng_s3d, diagnostics=pseudo_label_precision(splits))
    return pre, pre_state, delta, result
