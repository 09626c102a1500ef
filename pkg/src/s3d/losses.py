"""Training losses and the pair-loss ramp-up weight."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

logger = logging.getLogger(__name__)

LOG_EPS = 1e-12


@dataclass
class LossBreakdown:
    lab: float
    unl: float
    pair: float
    lam: float
    total: float


def _picked(probs: Tensor, labels) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    if probs.ndim != 2 or labels.shape != (probs.shape[0],):
        raise ValueError(f"labels of shape {labels.shape} do not match probabilities {probs.shape}")
    onehot = np.zeros(probs.shape)
    onehot[np.arange(labels.size), labels] = 1.0
    return ad.sum_(probs * onehot, axis=1)


def labeled_ce(probs: Tensor, y) -> Tensor:
    """mean -log p(y | x)."""
    if probs.shape[0] == 0:
        return Tensor(0.0)
    return -ad.mean(ad.log(_picked(probs, y) + LOG_EPS))


def weighted_ce(probs: Tensor, pseudo_labels) -> Tensor:
    """mean -w log p(y_hat | x') with w = p(y_hat | x') held constant."""
    if probs.shape[0] == 0:
        return Tensor(0.0)
    p = _picked(probs, pseudo_labels)
    weight = ad.detach(p)
    return -ad.mean(weight * ad.log(p + LOG_EPS))


def pair_kl(assistant_probs, student_probs: Tensor) -> Tensor:
    """mean_pairs sum_k a_k log(a_k / s_k); the assistant side is a constant."""
    a = assistant_probs.data if isinstance(assistant_probs, Tensor) else np.asarray(assistant_probs, dtype=np.float64)
    if a.shape != student_probs.shape:
        raise ValueError(f"pair_kl: assistant {a.shape} vs student {student_probs.shape}")
    if a.shape[0] == 0:
        return Tensor(0.0)
    log_a = np.log(a + LOG_EPS)
    cross = ad.sum_(ad.log(student_probs + LOG_EPS) * a, axis=1)
    return ad.mean(Tensor((a * log_a).sum(axis=1)) - cross)


def lambda_rampup(t: float, m: float = 8.0) -> float:
    """2 / (1 + exp(-m t)) - 1 for training progress t in [0, 1]."""
    if m <= 0:
        raise ValueError(f"m must be positive, got {m}")
    if not 0.0 <= t <= 1.0:
        logger.warning("ramp-up progress %s outside [0, 1]; clamping", t)
        t = min(max(t, 0.0), 1.0)
    return 2.0 / (1.0 + math.exp(-m * t)) - 1.0


def total_loss(lab: Tensor, unl: Tensor, pair: Tensor, lam: float) -> Tensor:
    return lab + unl + pair * lam


def breakdown(lab: Tensor, unl: Tensor, pair: Tensor, lam: float, total: Tensor) -> LossBreakdown:
    return LossBreakdown(lab.item(), unl.item(), pair.item(), float(lam), total.item())
