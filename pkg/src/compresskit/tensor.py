"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable primitive records one node on the active tape of the
calling thread. ``backward`` walks that tape in reverse, accumulating
gradients, and then clears it. Operations executed inside ``no_grad()`` are
not recorded.
"""

from __future__ import annotations

import contextlib
import math
import struct
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError, DomainError, ParameterError

__all__ = [
    "Tensor",
    "Tape",
    "SmoothedLabel",
    "active_tape",
    "no_grad",
    "backward",
    "add",
    "sub",
    "mul",
    "div",
    "broadcast_mul",
    "matmul",
    "conv2d",
    "max_pool2d",
    "global_avg_pool",
    "relu",
    "sigmoid",
    "softplus",
    "exp",
    "log",
    "absolute",
    "square",
    "tsum",
    "tmean",
    "reshape",
    "transpose",
    "softmax_with_temperature",
    "log_softmax",
    "kl_divergence",
    "cross_entropy",
    "label_smooth",
    "smoothed_targets",
    "save_tensor",
    "load_tensor",
    "numeric_gradient",
    "gradient_check",
]


class Tensor:
    """A dense row-major float64 array with an optional gradient buffer."""

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if any(d <= 0 for d in arr.shape):
            raise DimensionError(f"tensor dimensions must be positive, got {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._tape: Tape | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = requires_grad
        t._tape = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return _getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of executed primitives for one thread."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.enabled = True

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], fn) -> None:
        out._tape = self
        self.nodes.append(_Node(out, inputs, fn))

    def reset(self) -> None:
        for node in self.nodes:
            node.out._tape = None
        self.nodes.clear()


_local = threading.local()


def active_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = Tape()
    return tape


@contextlib.contextmanager
def no_grad():
    tape = active_tape()
    previous = tape.enabled
    tape.enabled = False
    try:
        yield
    finally:
        tape.enabled = previous


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=np.float64), False)


def _result(arr: np.ndarray, inputs: tuple[Tensor, ...], fn) -> Tensor:
    tape = active_tape()
    needs = tape.enabled and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(arr, needs)
    if needs:
        tape.record(out, inputs, fn)
    return out


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires-grad tensor reachable from ``loss``.

    The tape is consumed: all nodes are dropped afterwards.
    """
    if loss.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    tape = active_tape()
    if loss._tape is not tape:
        raise ContractError("loss is detached from the active tape")
    nodes = tape.nodes
    end = next(i for i in range(len(nodes) - 1, -1, -1) if nodes[i].out is loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(nodes[: end + 1]):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        node.out.grad = g
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if inp._tape is None:
                leaves[key] = inp
    for key, leaf in leaves.items():
        leaf.grad = grads[key]
    tape.reset()


# ----------------------------------------------------------------------------
# elementwise and broadcasting arithmetic


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)

    def fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), fn)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)

    def fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), fn)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)

    def fn(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), fn)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)

    def fn(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / b.data**2, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data / b.data, (a, b), fn)


def broadcast_mul(x, gate, axes: Sequence[int] | None = None) -> Tensor:
    """Multiply ``x`` by ``gate`` after inserting singleton ``axes`` into the gate.

    With ``axes=None`` this is plain numpy broadcasting.
    """
    x, gate = as_tensor(x), as_tensor(gate)
    if axes is not None:
        target = list(gate.shape)
        for ax in sorted(a % x.ndim for a in axes):
            target.insert(ax, 1)
        if len(target) != x.ndim:
            raise DimensionError(
                f"gate of shape {gate.shape} cannot be expanded over axes {tuple(axes)} of {x.shape}"
            )
        gate = reshape(gate, tuple(target))
    return mul(x, gate)


def square(x) -> Tensor:
    x = as_tensor(x)
    return _result(x.data * x.data, (x,), lambda g: (2.0 * x.data * g,))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise DomainError("log of a non-positive value")
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,))


def absolute(x) -> Tensor:
    """|x| with subgradient 0 at x == 0."""
    x = as_tensor(x)
    return _result(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.data)
    return _result(s, (x,), lambda g: (g * s * (1.0 - s),))


def softplus(x) -> Tensor:
    """ln(1 + e^x), evaluated without overflow."""
    x = as_tensor(x)
    out = np.maximum(x.data, 0.0) + np.log1p(np.exp(-np.abs(x.data)))
    return _result(out, (x,), lambda g: (g * _sigmoid(x.data),))


# ----------------------------------------------------------------------------
# reductions and reshaping


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(np.asarray(out, dtype=np.float64), (x,), fn)


def tmean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {x.shape} into {tuple(shape)}") from None
    return _result(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),))


def _getitem(x: Tensor, index) -> Tensor:
    out = x.data[index]

    def fn(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(np.array(out, dtype=np.float64), (x,), fn)


# ----------------------------------------------------------------------------
# linear algebra and convolution


def matmul(a, b) -> Tensor:
    """Matrix product of ``a`` [m x k] (or [k]) and ``b`` [k x n]."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")

    def fn(g):
        if a.ndim == 1:
            ga = b.data @ g if a.requires_grad else None
            gb = np.outer(a.data, g) if b.requires_grad else None
        else:
            ga = g @ b.data.T if a.requires_grad else None
            gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _result(a.data @ b.data, (a, b), fn)


def conv2d(x, kernels, stride: int = 1, padding: int = 0) -> Tensor:
    """Zero-padded 2-D cross-correlation.

    ``x`` is [C_in, H, W] or batched [N, C_in, H, W]; ``kernels`` is
    [C_out, C_in, k, k]. Output spatial size is floor((H + 2p - k)/stride) + 1.
    """
    x, kernels = as_tensor(x), as_tensor(kernels)
    single = x.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4 or kernels.ndim != 4:
        raise DimensionError(f"conv2d expects [N,C,H,W] x [O,C,k,k], got {x.shape} x {kernels.shape}")
    n, c, h, w = xd.shape
    o, ck, kh, kw = kernels.shape
    if ck != c:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape}, kernels {kernels.shape}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise DimensionError(
            f"kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}"
        )
    if stride < 1 or padding < 0:
        raise ParameterError(f"invalid stride {stride} / padding {padding}")
    if padding:
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = xd
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = kernels.data.reshape(o, c * kh * kw)
    out = (cols @ wmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    if single:
        out = out[0]

    def fn(g):
        g4 = g[None] if single else g
        gflat = g4.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gk = (gflat.T @ cols).reshape(kernels.shape) if kernels.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (gflat @ wmat).reshape(n, ho, wo, c, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            gx = gxp[:, :, padding : padding + h, padding : padding + w]
            gx = gx[0] if single else gx
        return gx, gk

    return _result(out, (x, kernels), fn)


def max_pool2d(x, size: int = 2) -> Tensor:
    """Non-overlapping ``size`` x ``size`` max pooling over the last two axes.

    Trailing rows/columns that do not fill a window are dropped; ties route
    the gradient to the first maximal element.
    """
    x = as_tensor(x)
    if x.ndim < 2 or x.shape[-1] < size or x.shape[-2] < size:
        raise DimensionError(f"max_pool2d({size}) needs spatial extent >= {size}, got {x.shape}")
    lead = x.shape[:-2]
    h, w = x.shape[-2] // size, x.shape[-1] // size
    cropped = x.data[..., : h * size, : w * size]
    blocks = cropped.reshape(*lead, h, size, w, size)
    nl = len(lead)
    perm = tuple(range(nl)) + (nl, nl + 2, nl + 1, nl + 3)
    flat = blocks.transpose(perm).reshape(*lead, h, w, size * size)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def fn(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, arg[..., None], g[..., None], axis=-1)
        gblocks = gflat.reshape(*lead, h, w, size, size).transpose(perm)
        gx = np.zeros_like(x.data)
        gx[..., : h * size, : w * size] = gblocks.reshape(cropped.shape)
        return (gx,)

    return _result(out, (x,), fn)


def global_avg_pool(x) -> Tensor:
    """Mean over the two trailing spatial axes: [.., C, H, W] -> [.., C]."""
    x = as_tensor(x)
    if x.ndim < 3 or x.shape[-1] < 1 or x.shape[-2] < 1:
        raise DimensionError(f"global_avg_pool expects [..., C, H, W], got {x.shape}")
    return tmean(x, axis=(-2, -1))


# ----------------------------------------------------------------------------
# probability, losses, label smoothing


def _check_temperature(temperature: float) -> None:
    if not temperature > 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")


def softmax_with_temperature(logits, temperature: float = 1.0) -> Tensor:
    """softmax(logits / T) along the last axis, max-subtracted."""
    _check_temperature(temperature)
    logits = as_tensor(logits)
    z = logits.data / temperature
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    s = e / e.sum(axis=-1, keepdims=True)

    def fn(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)) / temperature,)

    return _result(s, (logits,), fn)


def log_softmax(logits, temperature: float = 1.0) -> Tensor:
    """ln softmax(logits / T) along the last axis."""
    _check_temperature(temperature)
    logits = as_tensor(logits)
    z = logits.data / temperature
    shifted = z - z.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

    def fn(g):
        s = np.exp(out)
        return ((g - s * g.sum(axis=-1, keepdims=True)) / temperature,)

    return _result(out, (logits,), fn)


def _check_distribution(p: np.ndarray, name: str) -> None:
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=-1) - 1.0) > 1e-9):
        raise DomainError(f"{name} is not a probability vector")


def _row_mean_scale(arr: np.ndarray) -> float:
    return 1.0 / (arr.size // arr.shape[-1])


def kl_divergence(p, q) -> Tensor:
    """KL(p || q) in nats along the last axis, averaged over leading axes.

    Terms with p_i == 0 contribute 0; q_i == 0 where p_i > 0 is a domain error.
    """
    p, q = as_tensor(p), as_tensor(q)
    if p.shape != q.shape:
        raise DimensionError(f"kl_divergence shape mismatch: {p.shape} vs {q.shape}")
    _check_distribution(p.data, "p")
    _check_distribution(q.data, "q")
    support = p.data > 0
    if np.any(support & (q.data <= 0)):
        raise DomainError("q vanishes where p has mass")
    safe_p = np.where(support, p.data, 1.0)
    safe_q = np.where(support, q.data, 1.0)
    logratio = np.where(support, np.log(safe_p / safe_q), 0.0)
    scale = _row_mean_scale(p.data)
    value = np.sum(p.data * logratio) * scale

    def fn(g):
        gp = g * scale * np.where(support, logratio + 1.0, 0.0) if p.requires_grad else None
        gq = -g * scale * np.where(support, p.data / safe_q, 0.0) if q.requires_grad else None
        return gp, gq

    return _result(np.asarray(value), (p, q), fn)


def cross_entropy(pred, target) -> Tensor:
    """-sum target_i ln pred_i along the last axis, averaged over leading axes."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"cross_entropy shape mismatch: {pred.shape} vs {target.shape}")
    support = target.data > 0
    if np.any(support & (pred.data <= 0)):
        raise DomainError("pred vanishes at a supported target index")
    safe = np.where(pred.data > 0, pred.data, 1.0)
    logp = np.log(safe)
    scale = _row_mean_scale(pred.data)
    value = -np.sum(np.where(support, target.data * logp, 0.0)) * scale

    def fn(g):
        gp = -g * scale * np.where(support, target.data / safe, 0.0) if pred.requires_grad else None
        gt = -g * scale * logp if target.requires_grad else None
        return gp, gt

    return _result(np.asarray(value), (pred, target), fn)


@dataclass(frozen=True)
class SmoothedLabel:
    distribution: np.ndarray
    class_count: int
    alpha: float
    target: int


def label_smooth(y: int, num_classes: int, alpha: float) -> SmoothedLabel:
    """Mix the one-hot vector of class ``y`` with the uniform distribution."""
    if num_classes < 2:
        raise ParameterError(f"need at least 2 classes, got {num_classes}")
    if not 0 <= y < num_classes:
        raise ParameterError(f"class index {y} out of range for {num_classes} classes")
    if not 0.0 <= alpha < 1.0:
        raise ParameterError(f"smoothing factor must lie in [0, 1), got {alpha}")
    dist = np.full(num_classes, alpha / num_classes)
    dist[y] = (1.0 - alpha) + alpha / num_classes
    return SmoothedLabel(dist, num_classes, float(alpha), int(y))


def smoothed_targets(labels: Iterable[int], num_classes: int, alpha: float) -> np.ndarray:
    """Stack of smoothed label distributions, one row per label."""
    return np.stack([label_smooth(int(y), num_classes, alpha).distribution for y in labels])


# ----------------------------------------------------------------------------
# serialization

_MAGIC = b"CKT1"


def save_tensor(path, tensor) -> None:
    """Write a tensor as: magic, rank, dims (u64 LE), row-major f64 LE values."""
    arr = np.ascontiguousarray(as_tensor(tensor).data, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(arr.tobytes(order="C"))


def load_tensor(path, requires_grad: bool = False) -> Tensor:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MAGIC:
        raise ValueError(f"{path}: not a CKT1 tensor file")
    (rank,) = struct.unpack_from("<Q", blob, 4)
    dims = struct.unpack_from(f"<{rank}Q", blob, 12)
    offset = 12 + 8 * rank
    count = math.prod(dims)
    if len(blob) - offset != 8 * count:
        raise ValueError(f"{path}: payload size does not match header dims {dims}")
    arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).astype(np.float64)
    return Tensor(arr.reshape(dims), requires_grad=requires_grad)


# ----------------------------------------------------------------------------
# finite-difference checking


def numeric_gradient(fn: Callable[[], Tensor], tensor: Tensor, step: float = 1e-3, entries=None) -> np.ndarray:
    """Central differences of scalar ``fn()`` with respect to ``tensor.data``.

    ``entries`` restricts the differencing to those flat indices; the other
    entries of the result are 0.
    """
    grad = np.zeros_like(tensor.data)
    flat = tensor.data.reshape(-1)
    gflat = grad.reshape(-1)
    indices = range(flat.size) if entries is None else entries
    with no_grad():
        for i in indices:
            orig = flat[i]
            flat[i] = orig + step
            up = fn().item()
            flat[i] = orig - step
            down = fn().item()
            flat[i] = orig
            gflat[i] = (up - down) / (2 * step)
    return grad


def gradient_check(fn: Callable[[], Tensor], tensors: Sequence[Tensor], step: float = 1e-3,
                   max_entries: int | None = None, seed: int = 0) -> float:
    """Max relative error between ``backward`` and central differences.

    The denominator is max(|analytic|, |numeric|, 1e-8), elementwise. With
    ``max_entries`` only that many uniformly drawn entries per tensor are
    differenced.
    """
    active_tape().reset()
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    backward(fn())
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t in tensors:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        if max_entries is not None and t.size > max_entries:
            entries = np.sort(rng.choice(t.size, max_entries, replace=False))
        else:
            entries = np.arange(t.size)
        numeric = numeric_gradient(fn, t, step, entries).reshape(-1)[entries]
        a = analytic.reshape(-1)[entries]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-8)
        worst = max(worst, float(np.max(np.abs(a - numeric) / denom)))
    return worst
