"""Feature statistics and assistant generation (AG).

AG re-normalises a student feature map to a style interpolated between the
teacher's and the student's per-channel statistics::

    beta  = eps * mu(z_t)    + (1 - eps) * mu(z_s)
    gamma = eps * sigma(z_t) + (1 - eps) * sigma(z_s)
    AG(z_s) = gamma * (z_s - mu(z_s)) / sigma(z_s) + beta

The assistant is a distillation target only, so everything produced here is
cut from the graph.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import rng as rng_mod
from .autodiff import Tensor
from .model import Model, classify, extract

STD_EPS = 1e-6

Stats = tuple[np.ndarray, np.ndarray]


def feature_stats(z) -> tuple[Tensor, Tensor]:
    """Per-channel spatial mean and population std of ``z`` (..., C, H, W)."""
    z = z if isinstance(z, Tensor) else Tensor(z)
    return ad.channel_mean(z), ad.channel_std(z)


def hook_stats(hooked: Sequence[Tensor]) -> list[Stats]:
    """Detached (mu, sigma) arrays for each hooked block output."""
    out = []
    with ad.no_grad():
        for z in hooked:
            mu, sigma = feature_stats(ad.detach(z))
            out.append((mu.data, sigma.data))
    return out


def sample_epsilon(rho: float, rng: np.random.Generator) -> float:
    """One blend coefficient drawn from Beta(rho, rho)."""
    if rho <= 0:
        raise ValueError(f"rho must be positive, got {rho}")
    return rng_mod.beta(rho, rho, rng)


def ag_blend(z_student, stats_teacher: Stats, eps) -> Tensor:
    """Student feature restyled with interpolated statistics; detached.

    ``eps`` is a scalar or one value per batch row.
    """
    z = z_student if isinstance(z_student, Tensor) else Tensor(z_student)
    mu_t, sigma_t = (np.asarray(s, dtype=np.float64) for s in stats_teacher)
    channels = z.shape[-3]
    if mu_t.shape[-1] != channels or sigma_t.shape[-1] != channels:
        raise ValueError(
            f"ag_blend: teacher stats have {mu_t.shape[-1]} channels, student feature has {channels}"
        )
    e = np.asarray(eps, dtype=np.float64)
    if np.any((e < 0) | (e > 1)):
        raise ValueError("ag_blend: eps must lie in [0, 1]")
    if e.ndim == 1:
        e = e[:, None]
    mu_s, sigma_s = feature_stats(z)
    beta = mu_s * (1.0 - e) + e * mu_t
    gamma = sigma_s * (1.0 - e) + e * sigma_t
    beta = beta.reshape(beta.shape + (1, 1))
    gamma = gamma.reshape(gamma.shape + (1, 1))
    mu_b = mu_s.reshape(mu_s.shape + (1, 1))
    sd_b = ad.clamp_min(sigma_s, STD_EPS).reshape(sigma_s.shape + (1, 1))
    return ad.detach(gamma * ((z - mu_b) / sd_b) + beta)


def assistant_forward(model: Model, x_student, stats_teacher: Sequence[Stats], eps) -> Tensor:
    """Assistant class probabilities p(y | x', phi), detached.

    The same ``eps`` (per pair) is used at every hooked block.
    """
    n_hooks = sum(model.arch.hooks)
    if len(stats_teacher) != n_hooks:
        raise ValueError(f"assistant_forward: got stats for {len(stats_teacher)} hooks, model has {n_hooks}")

    def inject(i: int, z: Tensor) -> Tensor:
        return ag_blend(z, stats_teacher[i], eps)

    h, _ = extract(model, x_student, inject=inject)
    return ad.detach(classify(model, h))
