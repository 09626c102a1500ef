"""Seeded random streams.

Every random draw in the package comes from a numpy ``Generator`` backed by
the counter-based Philox-4x64 bit generator. Independent streams are split
from one root seed with ``SeedSequence`` using a stable integer key derived
from the stream name, so ``stream(7, "data")`` is the same sequence on every
platform and in every process.
"""

from __future__ import annotations

import hashlib

import numpy as np

STREAMS = ("data", "splits", "init", "pretrain", "s3d", "analysis", "eval")


def stream_key(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:4], "little")


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for ``name`` under root ``seed``."""
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    seq = np.random.SeedSequence(int(seed), spawn_key=(stream_key(name),))
    return np.random.Generator(np.random.Philox(seq))


def _log_gamma_draw(shape: float, rng: np.random.Generator) -> float:
    """log of a Gamma(shape, 1) variate via Marsaglia-Tsang.

    For shape < 1 the boost G(a) = G(a + 1) * U**(1/a) is applied in log
    space so tiny shapes do not underflow to zero.
    """
    boost = 0.0
    if shape < 1.0:
        u = rng.random()
        while u == 0.0:
            u = rng.random()
        boost = np.log(u) / shape
        shape += 1.0
    d = shape - 1.0 / 3.0
    c = 1.0 / np.sqrt(9.0 * d)
    while True:
        x = rng.standard_normal()
        v = 1.0 + c * x
        if v <= 0.0:
            continue
        v = v * v * v
        u = rng.random()
        if u < 1.0 - 0.0331 * x**4:
            return float(np.log(d * v) + boost)
        if u > 0.0 and np.log(u) < 0.5 * x * x + d * (1.0 - v + np.log(v)):
            return float(np.log(d * v) + boost)


def beta(a: float, b: float, rng: np.random.Generator) -> float:
    """Beta(a, b) variate as X / (X + Y) with X ~ Gamma(a), Y ~ Gamma(b)."""
    if a <= 0 or b <= 0:
        raise ValueError(f"Beta parameters must be positive, got ({a}, {b})")
    lx = _log_gamma_draw(a, rng)
    ly = _log_gamma_draw(b, rng)
    # X / (X + Y) = 1 / (1 + exp(ly - lx))
    diff = ly - lx
    if diff > 0:
        e = np.exp(-diff)
        return float(e / (1.0 + e))
    return float(1.0 / (1.0 + np.exp(diff)))
