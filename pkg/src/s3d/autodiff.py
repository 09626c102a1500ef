"""Small reverse-mode autodiff engine over float64 numpy arrays.

Only the operations needed by the training pipeline are provided. Graphs are
built eagerly (define-by-run): every op returns a new ``Tensor`` that
remembers its parents and a closure that pushes gradients back to them.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "GraphError",
    "tensor",
    "no_grad",
    "is_grad_enabled",
    "matmul",
    "conv2d",
    "avg_pool2",
    "relu",
    "log",
    "softmax",
    "l2_normalize",
    "clamp_min",
    "channel_mean",
    "channel_std",
    "reshape",
    "detach",
    "backward",
    "finite_diff_check",
    "NORM_EPS",
]

NORM_EPS = 1e-6

_grad_enabled = True


class GraphError(RuntimeError):
    """Misuse of the differentiation graph (e.g. backward on a consumed graph)."""


@contextlib.contextmanager
def no_grad():
    """Run ops without recording a graph."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


def _as_array(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    return arr


def _check_finite(name: str, data: np.ndarray) -> None:
    # a single reduction propagates any NaN/Inf
    if not math.isfinite(float(np.add.reduce(data, axis=None))) and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{name}: produced non-finite values (shape {data.shape})")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """Dense float64 array with an optional gradient accumulator.

    ``grad`` exists (zero-initialised) iff ``requires_grad`` is set on a leaf;
    intermediate tensors receive gradients only transiently during backward.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "_consumed")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _op: str = "leaf"):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if (self.requires_grad and _op == "leaf") else None
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = _op
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def detach(self):
        return detach(self)

    def backward(self) -> None:
        backward(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(name: str, data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    _check_finite(name, data)
    track = _grad_enabled and any(p.requires_grad for p in parents)
    if not track:
        return Tensor(data, requires_grad=False, _op=name)
    out = Tensor(data, requires_grad=True, _parents=tuple(parents), _op=name)
    out._backward = backward_fn
    return out


def _broadcast_shape(name: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{name}: incompatible shapes {a.shape} and {b.shape}") from None


# elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make("sub", a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape("mul", a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make("mul", a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape("div", a, b)
    if np.any(b.data == 0.0):
        raise ZeroDivisionError(f"div: zero in denominator of shape {b.shape}")
    out_data = a.data / b.data

    def bw(g):
        ga = g / b.data
        gb = -g * out_data / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make("div", out_data, (a, b), bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bw(g):
        return (g * mask,)

    return _make("relu", np.where(mask, x.data, 0.0), (x,), bw)


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise ValueError("log: non-positive input")

    def bw(g):
        return (g / x.data,)

    return _make("log", np.log(x.data), (x,), bw)


def detach(x: Tensor) -> Tensor:
    """Identity in value, severs the graph."""
    return Tensor(x.data.copy(), requires_grad=False, _op="detach")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ValueError(f"reshape: cannot reshape {x.shape} to {shape}") from None

    def bw(g):
        return (g.reshape(x.shape),)

    return _make("reshape", out, (x,), bw)


# reductions --------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make("sum", x.data.sum(axis=axes, keepdims=keepdims), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    if count == 0:
        raise ValueError(f"mean: empty reduction over axes {axes} of shape {x.shape}")

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _make("mean", x.data.mean(axis=axes, keepdims=keepdims), (x,), bw)


# linear algebra / conv -----------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return _make("matmul", a.data @ b.data, (a, b), bw)


def _im2col(xp: np.ndarray, kh: int, kw: int) -> tuple[np.ndarray, int, int]:
    """(B, C, Hp, Wp) -> (B, C*kh*kw, Ho*Wo) patch matrix, ordered like weight.reshape(O, -1)."""
    B, C, Hp, Wp = xp.shape
    Ho, Wo = Hp - kh + 1, Wp - kw + 1
    cols = np.stack([xp[:, :, i:i + Ho, j:j + Wo] for i in range(kh) for j in range(kw)], axis=2)
    return cols.reshape(B, C * kh * kw, Ho * Wo), Ho, Wo


def _pad(a: np.ndarray, p: int) -> np.ndarray:
    return np.pad(a, ((0, 0), (0, 0), (p, p), (p, p))) if p else a


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, padding: int = 0) -> Tensor:
    """Stride-1 cross-correlation of ``x`` (B, C, H, W) with ``weight`` (O, C, kh, kw)."""
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"conv2d: incompatible input {x.shape} and weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ValueError(f"conv2d: bias shape {bias.shape} does not match {weight.shape[0]} filters")
    B, C, H, W = x.shape
    O, _, kh, kw = weight.shape
    p = int(padding)
    if H + 2 * p < kh or W + 2 * p < kw:
        raise ValueError(f"conv2d: kernel {kh}x{kw} larger than padded input {H}x{W} (pad {p})")
    xp = _pad(x.data, p)
    cols, Ho, Wo = _im2col(xp, kh, kw)
    wmat = weight.data.reshape(O, C * kh * kw)
    out = np.matmul(wmat, cols)  # (B, O, Ho*Wo)
    if bias is not None:
        out += bias.data[:, None]
    out_data = out.reshape(B, O, Ho, Wo)

    def bw(g):
        g3 = g.reshape(B, O, Ho * Wo)
        gw = np.tensordot(g3, cols, axes=([0, 2], [0, 2])).reshape(weight.shape)
        gx = None
        if x.requires_grad:
            gcols = np.matmul(wmat.T, g3).reshape(B, C, kh, kw, Ho, Wo)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + Ho, j:j + Wo] += gcols[:, :, i, j]
            gx = gxp[:, :, p:p + H, p:p + W] if p else gxp
        if bias is None:
            return gx, gw
        return gx, gw, g3.sum(axis=(0, 2))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make("conv2d", out_data, parents, bw)


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 average pooling with stride 2 over the last two axes."""
    if x.ndim < 2 or x.shape[-1] % 2 or x.shape[-2] % 2:
        raise ValueError(f"avg_pool2: spatial dims must be even, got shape {x.shape}")
    *lead, H, W = x.shape
    d = x.data
    out = (d[..., 0::2, 0::2] + d[..., 0::2, 1::2] + d[..., 1::2, 0::2] + d[..., 1::2, 1::2]) * 0.25

    def bw(g):
        g = np.broadcast_to((g * 0.25)[..., :, None, :, None], (*lead, H // 2, 2, W // 2, 2))
        return (g.reshape(x.shape),)

    return _make("avg_pool2", out, (x,), bw)


# normalisation / probability ------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make("softmax", s, (x,), bw)


def l2_normalize(x: Tensor, axis: int = -1, eps: float = NORM_EPS) -> Tensor:
    """x / max(||x||, eps) along ``axis``; the guard only engages for near-zero norms."""
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    active = norm > eps
    denom = np.where(active, norm, eps)
    out = x.data / denom

    def bw(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (np.where(active, (g - out * dot) / denom, g / eps),)

    return _make("l2_normalize", out, (x,), bw)


def clamp_min(x: Tensor, lo: float) -> Tensor:
    """max(x, lo) elementwise; gradient passes only where x > lo."""
    mask = x.data > lo

    def bw(g):
        return (g * mask,)

    return _make("clamp_min", np.where(mask, x.data, lo), (x,), bw)


def _spatial_axes(x: Tensor, name: str) -> tuple[int, int]:
    if x.ndim < 3:
        raise ValueError(f"{name}: expected (..., C, H, W), got shape {x.shape}")
    if x.shape[-1] * x.shape[-2] == 0:
        raise ValueError(f"{name}: empty spatial extent in shape {x.shape}")
    return (-2, -1)


def channel_mean(x: Tensor) -> Tensor:
    """Per-channel mean over the two trailing spatial axes."""
    axes = _spatial_axes(x, "channel_mean")
    return mean(x, axis=axes)


def channel_std(x: Tensor) -> Tensor:
    """Per-channel population standard deviation over the spatial axes.

    The gradient at a zero-variance channel is taken as 0.
    """
    _spatial_axes(x, "channel_std")
    hw = x.shape[-1] * x.shape[-2]
    mu = x.data.mean(axis=(-2, -1), keepdims=True)
    centered = x.data - mu
    std = np.sqrt((centered * centered).mean(axis=(-2, -1)))

    def bw(g):
        safe = np.where(std > 0, std, 1.0)
        scale = np.where(std > 0, g / (hw * safe), 0.0)
        return (centered * scale[..., None, None],)

    return _make("channel_std", std, (x,), bw)


# backward ------------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``grad`` of every requires_grad leaf.

    The graph is released afterwards; a second call on the same loss raises.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("backward: loss has no recorded graph (no op touched a requires_grad leaf)")
    if loss._consumed:
        raise GraphError("backward: graph already consumed; run the forward pass again")
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._consumed:
            raise GraphError(f"backward: node {node.op!r} belongs to an already consumed graph")
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
        node._consumed = True
        node._backward = None
        node._parents = ()
    loss._consumed = True


def finite_diff_check(
    fn: Callable[..., Tensor],
    point: Sequence[np.ndarray] | np.ndarray,
    h: float = 1e-5,
) -> float:
    """Compare engine gradients of a scalar closure against central differences.

    ``fn`` receives one Tensor per array in ``point`` and must return a scalar
    Tensor. Returns max |analytic - numeric| / max(1, |analytic|) over all
    coordinates of all inputs.
    """
    if h <= 0:
        raise ValueError("finite_diff_check: h must be positive")
    arrays = [np.array(point, dtype=np.float64)] if isinstance(point, np.ndarray) else [
        np.array(p, dtype=np.float64) for p in point
    ]
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*leaves)
    if not isinstance(out, Tensor) or out.data.size != 1:
        shape = getattr(out, "shape", type(out).__name__)
        raise ValueError(f"finite_diff_check: closure must return a scalar Tensor, got {shape}")
    if out.requires_grad:
        backward(out)
    analytic = [leaf.grad for leaf in leaves]

    def evaluate(vals: Iterable[np.ndarray]) -> float:
        with no_grad():
            return fn(*[Tensor(v) for v in vals]).item()

    worst = 0.0
    for idx, base in enumerate(arrays):
        flat = base.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            plus = evaluate(arrays)
            flat[j] = orig - h
            minus = evaluate(arrays)
            flat[j] = orig
            numeric = (plus - minus) / (2 * h)
            a = analytic[idx].reshape(-1)[j]
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst
