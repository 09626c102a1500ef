"""Two-block conv feature extractor and the cosine-similarity classifier."""

from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CKPT_MAGIC = b"S3DCKPT1"
CKPT_VERSION = 1

# inject(hook_ordinal, block_output) -> replacement block output
Injector = Callable[[int, Tensor], Tensor]


@dataclass(frozen=True)
class ArchConfig:
    in_channels: int = 3
    height: int = 16
    width: int = 16
    block_channels: tuple[int, ...] = (16, 32)
    kernel_size: int = 3
    embed_dim: int = 64
    num_classes: int = 5
    temperature: float = 0.05
    hooks: tuple[bool, ...] = (True, True)

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if len(self.hooks) != len(self.block_channels):
            raise ValueError(
                f"hook mask has {len(self.hooks)} entries for {len(self.block_channels)} blocks"
            )
        if self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd for same-size padding")
        scale = 2 ** len(self.block_channels)
        if self.height % scale or self.width % scale:
            raise ValueError(f"input {self.height}x{self.width} not divisible by pooling factor {scale}")

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return (self.in_channels, self.height, self.width)

    def block_shapes(self) -> list[tuple[int, int, int]]:
        h, w, shapes = self.height, self.width, []
        for c in self.block_channels:
            h, w = h // 2, w // 2
            shapes.append((c, h, w))
        return shapes

    @property
    def flat_dim(self) -> int:
        c, h, w = self.block_shapes()[-1]
        return c * h * w

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        d = dict(d)
        for key in ("block_channels", "hooks"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class Model:
    arch: ArchConfig
    params: dict[str, Tensor] = field(default_factory=dict)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            if self.params[k].shape != v.shape:
                raise ValueError(f"{k}: shape {v.shape} does not match {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=np.float64)

    def clone(self) -> "Model":
        m = Model(self.arch, {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.params.items()})
        return m

    def flat_parameters(self) -> np.ndarray:
        return np.concatenate([p.data.ravel() for p in self.params.values()])


def init_model(arch: ArchConfig, rng: np.random.Generator) -> Model:
    """He-normal weights (std sqrt(2 / fan_in)), zero biases."""
    params: dict[str, Tensor] = {}

    def he(shape, fan_in):
        return Tensor(rng.standard_normal(shape) * np.sqrt(2.0 / fan_in), requires_grad=True)

    c_in, k = arch.in_channels, arch.kernel_size
    for i, c_out in enumerate(arch.block_channels, start=1):
        params[f"block{i}.weight"] = he((c_out, c_in, k, k), c_in * k * k)
        params[f"block{i}.bias"] = Tensor(np.zeros(c_out), requires_grad=True)
        c_in = c_out
    params["head.weight"] = he((arch.flat_dim, arch.embed_dim), arch.flat_dim)
    params["head.bias"] = Tensor(np.zeros(arch.embed_dim), requires_grad=True)
    params["classifier.weight"] = he((arch.embed_dim, arch.num_classes), arch.embed_dim)
    return Model(arch, params)


def _as_batch(model: Model, x) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
    if x.ndim == 3:
        x = x.reshape((1, *x.shape))
    if x.shape[1:] != model.arch.input_shape:
        raise ValueError(f"extract: expected inputs of shape (B, {model.arch.input_shape}), got {x.shape}")
    return x


def extract(model: Model, x, inject: Injector | None = None) -> tuple[Tensor, list[Tensor]]:
    """Embedding ``h`` and the outputs of the hooked blocks.

    ``inject`` (if given) is called on every hooked block output and its
    result replaces that output for the rest of the forward pass. The list
    holds the block outputs as produced, before injection.
    """
    x = _as_batch(model, x)
    p = model.params
    pad = model.arch.kernel_size // 2
    z = x
    hooked: list[Tensor] = []
    for i, use_hook in enumerate(model.arch.hooks, start=1):
        z = ad.conv2d(z, p[f"block{i}.weight"], p[f"block{i}.bias"], padding=pad)
        z = ad.avg_pool2(ad.relu(z))
        if use_hook:
            hooked.append(z)
            if inject is not None:
                z = inject(len(hooked) - 1, z)
    flat = z.reshape((z.shape[0], -1))
    h = ad.matmul(flat, p["head.weight"]) + p["head.bias"]
    return h, hooked


def cosine_scores(model: Model, h: Tensor) -> Tensor:
    """cos(h, w_k) for every class column; shape (B, K)."""
    w = ad.l2_normalize(model.params["classifier.weight"], axis=0)
    return ad.matmul(ad.l2_normalize(h, axis=-1), w)


def scaled_logits(model: Model, h: Tensor) -> Tensor:
    return cosine_scores(model, h) * (1.0 / model.arch.temperature)


def classify(model: Model, h: Tensor) -> Tensor:
    return ad.softmax(scaled_logits(model, h), axis=-1)


def forward(model: Model, x) -> Tensor:
    h, _ = extract(model, x)
    return classify(model, h)


def predict(model: Model, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Class probabilities without recording a graph."""
    out = []
    with ad.no_grad():
        for start in range(0, len(x), batch_size):
            out.append(forward(model, np.asarray(x[start:start + batch_size], dtype=np.float64)).data)
    return np.concatenate(out) if out else np.zeros((0, model.arch.num_classes))


def embed(model: Model, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = []
    with ad.no_grad():
        for start in range(0, len(x), batch_size):
            h, _ = extract(model, np.asarray(x[start:start + batch_size], dtype=np.float64))
            out.append(h.data)
    return np.concatenate(out) if out else np.zeros((0, model.arch.embed_dim))


# ---------------------------------------------------------------------------
# checkpoints: magic | u64 header length | JSON header | float64 LE blob

def save_checkpoint(model: Model, path: str | os.PathLike, iteration: int = 0, seed: int = 0,
                    extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "format_version": CKPT_VERSION,
        "arch": model.arch.to_dict(),
        "iteration": int(iteration),
        "seed": int(seed),
        "params": [{"name": k, "shape": list(v.shape)} for k, v in model.params.items()],
        "extra": extra or {},
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = np.concatenate([v.data.ravel() for v in model.params.values()]).astype("<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        fh.write(blob)
    return path


def load_checkpoint(path: str | os.PathLike) -> tuple[Model, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    if header.get("format_version") != CKPT_VERSION:
        raise ValueError(f"{path}: checkpoint version {header.get('format_version')!r} unsupported")
    values = np.frombuffer(raw[16 + hlen:], dtype="<f8")
    expected = sum(int(np.prod(p["shape"])) for p in header["params"])
    if values.size != expected:
        raise ValueError(f"{path}: blob holds {values.size} values, header declares {expected}")
    params, offset = {}, 0
    for p in header["params"]:
        n = int(np.prod(p["shape"]))
        params[p["name"]] = Tensor(values[offset:offset + n].reshape(p["shape"]).astype(np.float64),
                                   requires_grad=True)
        offset += n
    return Model(ArchConfig.from_dict(header["arch"]), params), header
