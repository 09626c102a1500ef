"""Synthetic "styled domains" data, SSDA splits and the dataset container.

Each class owns a fixed spatial pattern (a Gaussian bump at a class-indexed
position plus an oriented grating whose frequency depends on the class).
A domain re-styles that content with a per-channel gain and bias and adds
Gaussian pixel noise, so domains differ in exactly the per-channel feature
statistics the assistant generator blends. A domain may also spread its
style per sample: every image draws its own gain multiplier
``exp(N(0, gain_spread))`` and bias offset ``N(0, bias_spread)`` per channel.

Container layout (all little-endian)::

    dataset.json                 manifest, see ``write_dataset``
    <split>.f32                  N x C x H x W float32, row-major (NCHW)
    <split>.labels.i32           N int32 labels
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
SPLITS = ("source", "target_labeled", "target_unlabeled", "val")
EVAL_ONLY_SPLITS = ("target_unlabeled",)


class DatasetFormatError(ValueError):
    """Base class for container read errors."""


class FormatVersionError(DatasetFormatError):
    pass


class TruncatedRecordError(DatasetFormatError):
    pass


class RecordCountMismatchError(DatasetFormatError):
    pass


class InsufficientSamplesError(ValueError):
    pass


@dataclass(frozen=True)
class DomainStyle:
    gain: tuple[float, ...]
    bias: tuple[float, ...]
    noise_std: float = 0.05
    gain_spread: float = 0.0
    bias_spread: float = 0.0


@dataclass(frozen=True)
class DomainSpec:
    num_classes: int = 5
    channels: int = 3
    height: int = 16
    width: int = 16
    samples_per_class: int = 100
    amplitude: float = 1.0
    domains: dict[str, DomainStyle] = field(
        default_factory=lambda: {
            "source": DomainStyle(gain=(1.0, 1.0, 1.0), bias=(0.0, 0.0, 0.0), noise_std=0.05),
            "target": DomainStyle(gain=(1.8, 1.8, 1.8), bias=(0.3, 0.3, 0.3), noise_std=0.05,
                                  gain_spread=0.6, bias_spread=0.6),
        }
    )
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if min(self.channels, self.height, self.width, self.samples_per_class) < 1:
            raise ValueError("channels, height, width and samples_per_class must be positive")
        for name, style in self.domains.items():
            if len(style.gain) != self.channels or len(style.bias) != self.channels:
                raise ValueError(f"domain {name!r}: gain/bias must have {self.channels} entries")
            if any(g <= 0 for g in style.gain):
                raise ValueError(f"domain {name!r}: gains must be strictly positive")
            if min(style.noise_std, style.gain_spread, style.bias_spread) < 0:
                raise ValueError(f"domain {name!r}: noise_std and style spreads must be >= 0")

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (self.channels, self.height, self.width)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["domains"] = {k: asdict(v) for k, v in self.domains.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DomainSpec":
        d = dict(d)
        if "domains" in d:
            d["domains"] = {
                k: DomainStyle(
                    gain=tuple(float(g) for g in v["gain"]),
                    bias=tuple(float(b) for b in v["bias"]),
                    noise_std=float(v.get("noise_std", 0.05)),
                    gain_spread=float(v.get("gain_spread", 0.0)),
                    bias_spread=float(v.get("bias_spread", 0.0)),
                )
                for k, v in d["domains"].items()
            }
        return cls(**d)


@dataclass
class LabeledSet:
    x: np.ndarray  # (N, C, H, W) float32
    y: np.ndarray  # (N,) int32
    domain: str
    index: np.ndarray | None = None  # position in the generating domain collection

    def __len__(self) -> int:
        return int(self.x.shape[0])


class UnlabeledSet:
    """Unlabeled samples whose ground truth is kept for evaluation only.

    Training code receives ``x`` and never calls ``evaluation_labels``.
    """

    def __init__(self, x: np.ndarray, truth: np.ndarray, domain: str, index: np.ndarray | None = None):
        self.x = x
        self._truth = truth
        self.domain = domain
        self.index = index

    def __len__(self) -> int:
        return int(self.x.shape[0])

    def evaluation_labels(self) -> np.ndarray:
        return self._truth

    def as_labeled(self) -> LabeledSet:
        return LabeledSet(self.x, self._truth, self.domain, self.index)


@dataclass
class DatasetSplits:
    source: LabeledSet
    target_labeled: LabeledSet
    target_unlabeled: UnlabeledSet
    val: LabeledSet
    num_classes: int
    seed: int = 0

    @property
    def image_shape(self) -> tuple[int, ...]:
        return tuple(self.source.x.shape[1:])

    def teacher_sets(self) -> list[LabeledSet]:
        return [s for s in (self.source, self.target_labeled) if len(s)]


# ---------------------------------------------------------------------------
# generation

def class_content(spec: DomainSpec, k: int) -> np.ndarray:
    """Unstyled C x H x W pattern of class ``k``."""
    C, H, W = spec.image_shape
    K = spec.num_classes
    yy, xx = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing="ij")
    side = float(min(H, W))
    theta = 2.0 * np.pi * k / K
    cy = (H - 1) / 2.0 + 0.28 * side * np.sin(theta)
    cx = (W - 1) / 2.0 + 0.28 * side * np.cos(theta)
    width = 0.12 * side
    bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * width**2))
    phi = np.pi * k / K
    freq = 1.0 + k
    grating = np.cos(2.0 * np.pi * freq * (xx * np.cos(phi) + yy * np.sin(phi)) / side)
    mix = np.linspace(0.0, 1.0, C) if C > 1 else np.array([0.5])
    content = (1.0 - mix)[:, None, None] * bump + mix[:, None, None] * 0.5 * grating
    return spec.amplitude * content


def generate_domain(spec: DomainSpec, domain_id: str, rng: np.random.Generator) -> LabeledSet:
    """``samples_per_class`` styled, noisy samples of every class, shuffled."""
    if domain_id not in spec.domains:
        raise KeyError(f"unknown domain {domain_id!r}; known: {sorted(spec.domains)}")
    style = spec.domains[domain_id]
    K, n = spec.num_classes, spec.samples_per_class
    templates = np.stack([class_content(spec, k) for k in range(K)])
    gain = np.asarray(style.gain, dtype=np.float64)[None, :, None, None]
    bias = np.asarray(style.bias, dtype=np.float64)[None, :, None, None]
    labels = rng.permutation(np.repeat(np.arange(K, dtype=np.int32), n))
    C = spec.channels
    gain_mult = np.exp(rng.standard_normal((K * n, C, 1, 1)) * style.gain_spread)
    bias_shift = rng.standard_normal((K * n, C, 1, 1)) * style.bias_spread
    noise = rng.standard_normal((K * n, *spec.image_shape)) * style.noise_std
    x = (templates[labels] * (gain * gain_mult) + (bias + bias_shift) + noise).astype(np.float32)
    return LabeledSet(x=x, y=labels.astype(np.int32), domain=domain_id, index=np.arange(K * n))


def make_splits(
    source_set: LabeledSet,
    target_set: LabeledSet,
    shots: int,
    val_per_class: int,
    rng: np.random.Generator,
    num_classes: int | None = None,
    seed: int = 0,
) -> DatasetSplits:
    """Partition the target collection into labeled / unlabeled / validation parts."""
    if shots < 0 or val_per_class < 0:
        raise ValueError("shots and val_per_class must be non-negative")
    K = int(num_classes if num_classes is not None else max(source_set.y.max(), target_set.y.max()) + 1)
    need = shots + val_per_class
    tl, val, tu = [], [], []
    for k in range(K):
        members = np.flatnonzero(target_set.y == k)
        if len(members) < need:
            raise InsufficientSamplesError(
                f"class {k} has {len(members)} target samples, needs {need} "
                f"({shots} shots + {val_per_class} validation)"
            )
        members = rng.permutation(members)
        tl.append(members[:shots])
        val.append(members[shots:need])
        tu.append(members[need:])

    def take(parts):
        idx = np.sort(np.concatenate(parts)).astype(np.int64)
        return idx

    tl_idx, val_idx, tu_idx = take(tl), take(val), take(tu)
    t = target_set
    sub = lambda idx: LabeledSet(t.x[idx], t.y[idx], t.domain, t.index[idx] if t.index is not None else idx)
    unl = UnlabeledSet(t.x[tu_idx], t.y[tu_idx], t.domain, t.index[tu_idx] if t.index is not None else tu_idx)
    return DatasetSplits(
        source=source_set,
        target_labeled=sub(tl_idx),
        target_unlabeled=unl,
        val=sub(val_idx),
        num_classes=K,
        seed=seed,
    )


def build_dataset(spec: DomainSpec, shots: int, val_per_class: int, seed: int) -> DatasetSplits:
    """Generate both domains and split the target, all from one root seed."""
    from . import rng as rng_mod

    data_rng = rng_mod.stream(seed, "data")
    source = generate_domain(spec, "source", data_rng)
    target = generate_domain(spec, "target", data_rng)
    return make_splits(
        source, target, shots, val_per_class, rng_mod.stream(seed, "splits"),
        num_classes=spec.num_classes, seed=seed,
    )


# ---------------------------------------------------------------------------
# container

def _split_arrays(splits: DatasetSplits):
    yield "source", splits.source.x, splits.source.y, splits.source
    yield "target_labeled", splits.target_labeled.x, splits.target_labeled.y, splits.target_labeled
    tu = splits.target_unlabeled
    yield "target_unlabeled", tu.x, tu.evaluation_labels(), tu
    yield "val", splits.val.x, splits.val.y, splits.val


def write_dataset(splits: DatasetSplits, path: str | os.PathLike, spec: DomainSpec | None = None) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": FORMAT_VERSION,
        "byte_order": "little",
        "layout": "NCHW row-major float32; labels int32",
        "shape": list(splits.image_shape),
        "num_classes": splits.num_classes,
        "seed": splits.seed,
        "evaluation_only_labels": list(EVAL_ONLY_SPLITS),
        "splits": {},
    }
    if spec is not None:
        manifest["spec"] = spec.to_dict()
    for name, x, y, holder in _split_arrays(splits):
        x.astype("<f4").tofile(out / f"{name}.f32")
        np.asarray(y).astype("<i4").tofile(out / f"{name}.labels.i32")
        index = holder.index if holder.index is not None else np.arange(len(y))
        manifest["splits"][name] = {
            "count": int(len(y)),
            "domain": holder.domain,
            "index": [int(i) for i in index],
        }
    (out / "dataset.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def _read_records(path: Path, dtype: str, record_items: int, expected: int, what: str) -> np.ndarray:
    record_bytes = record_items * np.dtype(dtype).itemsize
    size = path.stat().st_size
    if size % record_bytes:
        raise TruncatedRecordError(
            f"{path.name}: {size} bytes is not a whole number of {record_bytes}-byte {what} records"
        )
    count = size // record_bytes
    if count != expected:
        raise RecordCountMismatchError(
            f"{path.name}: manifest declares {expected} {what} records, file holds {count}"
        )
    return np.fromfile(path, dtype=dtype)


def read_dataset(path: str | os.PathLike) -> DatasetSplits:
    root = Path(path)
    manifest = json.loads((root / "dataset.json").read_text())
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise FormatVersionError(f"dataset format version {version!r}, reader supports {FORMAT_VERSION}")
    shape = tuple(int(s) for s in manifest["shape"])
    per = int(np.prod(shape))
    parts = {}
    for name in SPLITS:
        meta = manifest["splits"][name]
        n = int(meta["count"])
        x = _read_records(root / f"{name}.f32", "<f4", per, n, "sample").astype(np.float32)
        y = _read_records(root / f"{name}.labels.i32", "<i4", 1, n, "label").astype(np.int32)
        index = np.asarray(meta.get("index", range(n)), dtype=np.int64)
        parts[name] = (x.reshape((n, *shape)), y, meta["domain"], index)
    x, y, dom, idx = parts["target_unlabeled"]
    return DatasetSplits(
        source=LabeledSet(*parts["source"]),
        target_labeled=LabeledSet(*parts["target_labeled"]),
        target_unlabeled=UnlabeledSet(x, y, dom, idx),
        val=LabeledSet(*parts["val"]),
        num_classes=int(manifest["num_classes"]),
        seed=int(manifest.get("seed", 0)),
    )
