"""Rank-4 tensors with reverse-mode automatic differentiation.

Every value is an ``(N, C, H, W)`` array. Operations record their parents
and a backward closure on the output tensor; :func:`backward` walks that
graph in reverse topological order. The graph hangs off the output of a
forward pass, so two passes never share state.

Precision follows the inputs: float32 by default, float64 when the caller
builds leaves with ``dtype=np.float64`` (used by :func:`grad_check`).
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Raised when tensor shapes are incompatible with an operation."""


class ConfigurationError(ValueError):
    """Raised for invalid layer or model settings."""


class ContractError(RuntimeError):
    """Raised when an operation is called outside its contract."""


_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording on the current thread."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else np.float32)
        if arr.ndim != 4:
            raise DimensionError(f"tensor must be rank 4 (N, C, H, W), got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @classmethod
    def scalar(cls, value: float, dtype=np.float32) -> "Tensor":
        return cls(np.full((1, 1, 1, 1), value, dtype=dtype), dtype=dtype)

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return scale(self, -1.0)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.full((1, 1, 1, 1), x, dtype=dtype), dtype=dtype)


def _result_dtype(*tensors: Tensor):
    return np.result_type(*(t.data.dtype for t in tensors))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    return grad.sum(axis=axes, keepdims=True)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    for sa, sb in zip(a.shape, b.shape):
        if sa != sb and sa != 1 and sb != 1:
            raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


# ----------------------------------------------------------------------------
# elementwise
# ----------------------------------------------------------------------------

def add(a, b) -> Tensor:
    """Elementwise sum; size-1 axes broadcast (used for per-channel attention)."""
    if not isinstance(a, Tensor):
        a = _as_tensor(a, b.dtype)
    b = _as_tensor(b, a.dtype)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _as_tensor(a, b.dtype)
    b = _as_tensor(b, a.dtype)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _as_tensor(a, b.dtype)
    b = _as_tensor(b, a.dtype)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), backward)


def div(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _as_tensor(a, b.dtype)
    b = _as_tensor(b, a.dtype)
    _broadcast_shape(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        ga = g / bd
        return _unbroadcast(ga, ad.shape), _unbroadcast(-ga * out, bd.shape)

    return _make(out, (a, b), backward)


def scale(x: Tensor, factor: float) -> Tensor:
    f = x.data.dtype.type(factor)
    return _make(x.data * f, (x,), lambda g: (g * f,))


def relu(x: Tensor) -> Tensor:
    # subgradient at exactly 0 is 0
    mask = x.data > 0
    return _make(np.where(mask, x.data, x.data.dtype.type(0)), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype, copy=False)
    return _make(out, (x,), lambda g: (g * out * (1 - out),))


def absolute(x: Tensor) -> Tensor:
    # derivative 0 where the argument is exactly 0
    sign = np.sign(x.data)
    return _make(np.abs(x.data), (x,), lambda g: (g * sign,))


def square(x: Tensor) -> Tensor:
    d = x.data
    return _make(d * d, (x,), lambda g: (2 * g * d,))


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    """Stack along the channel axis in argument order."""
    if not tensors:
        raise DimensionError("concat_channels needs at least one tensor")
    n, _, h, w = tensors[0].shape
    for t in tensors:
        if (t.shape[0], t.shape[2], t.shape[3]) != (n, h, w):
            raise DimensionError(
                f"concat_channels: {t.shape} does not match N, H, W of {tensors[0].shape}"
            )
    bounds = np.cumsum([0] + [t.shape[1] for t in tensors])
    out = np.concatenate([t.data for t in tensors], axis=1)

    def backward(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(tensors)))

    return _make(out, tuple(tensors), backward)


def elementwise(kind: str, *inputs: Tensor) -> Tensor:
    """Dispatch by name: relu, sigmoid, add, mul, concat_channels."""
    if kind == "relu":
        return relu(*inputs)
    if kind == "sigmoid":
        return sigmoid(*inputs)
    if kind == "add":
        a, b = inputs
        if a.shape != b.shape:
            raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")
        return add(a, b)
    if kind == "mul":
        a, b = inputs
        if a.shape != b.shape:
            raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")
        return mul(a, b)
    if kind == "concat_channels":
        return concat_channels(inputs)
    raise ConfigurationError(f"unknown elementwise kind {kind!r}")


# ----------------------------------------------------------------------------
# reductions
# ----------------------------------------------------------------------------

def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    out = np.asarray(x.data.sum(), dtype=x.dtype).reshape(1, 1, 1, 1)
    return _make(out, (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    shape = x.shape
    n = x.data.size
    out = np.asarray(x.data.mean(), dtype=x.dtype).reshape(1, 1, 1, 1)
    return _make(out, (x,), lambda g: (np.broadcast_to(g / n, shape).copy(),))


def mean_spatial(x: Tensor) -> Tensor:
    """Mean over H and W, keeping a (N, C, 1, 1) shape."""
    n, c, h, w = x.shape
    if h * w == 0:
        raise DimensionError(f"empty spatial extent in {x.shape}")
    out = x.data.mean(axis=(2, 3), keepdims=True)
    return _make(out, (x,), lambda g: (np.broadcast_to(g / (h * w), x.shape).copy(),))


# ----------------------------------------------------------------------------
# convolution
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: int = 3
    dilation: int = 1

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigurationError(f"channel counts must be positive: {self}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigurationError(f"kernel must be a positive odd integer, got {self.kernel}")
        if self.dilation < 1:
            raise ConfigurationError(f"dilation must be positive, got {self.dilation}")

    @property
    def padding(self) -> int:
        return self.dilation * (self.kernel - 1) // 2


def _taps(k: int):
    return [(i, j) for i in range(k) for j in range(k)]


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, spec: ConvSpec) -> Tensor:
    """Stride-1 dilated convolution with same-size zero padding.

    ``weight`` is (outC, inC, k, k) and ``bias`` is (1, outC, 1, 1).
    """
    n, c, h, w = x.shape
    k, d, p = spec.kernel, spec.dilation, spec.padding
    if c != spec.in_channels:
        raise DimensionError(f"conv2d: input has {c} channels, spec expects {spec.in_channels}")
    if weight.shape != (spec.out_channels, spec.in_channels, k, k):
        raise DimensionError(
            f"conv2d: weight shape {weight.shape} != "
            f"{(spec.out_channels, spec.in_channels, k, k)}"
        )
    if bias.shape != (1, spec.out_channels, 1, 1):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != {(1, spec.out_channels, 1, 1)}")
    o = spec.out_channels
    dtype = _result_dtype(x, weight, bias)

    # channels-last im2col: cols[n, y, x, i, j, c]
    x_nhwc = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1), dtype=dtype)
    if k == 1:
        cols = x_nhwc.reshape(n * h * w, c)
    else:
        xp = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=dtype)
        xp[:, p:p + h, p:p + w, :] = x_nhwc
        cols6 = np.empty((n, h, w, k, k, c), dtype=dtype)
        for i, j in _taps(k):
            cols6[:, :, :, i, j, :] = xp[:, i * d:i * d + h, j * d:j * d + w, :]
        cols = cols6.reshape(n * h * w, k * k * c)
    wmat = weight.data.astype(dtype, copy=False).transpose(2, 3, 1, 0).reshape(k * k * c, o)
    out = cols @ wmat
    out += bias.data.reshape(1, o).astype(dtype, copy=False)
    out = np.ascontiguousarray(out.reshape(n, h, w, o).transpose(0, 3, 1, 2))

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * h * w, o)
        gw = (cols.T @ g2).reshape(k, k, c, o).transpose(3, 2, 0, 1)
        gb = g2.sum(axis=0).reshape(1, o, 1, 1)
        gcols = g2 @ wmat.T
        if k == 1:
            gx = gcols.reshape(n, h, w, c)
        else:
            gcols6 = gcols.reshape(n, h, w, k, k, c)
            gxp = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=dtype)
            for i, j in _taps(k):
                gxp[:, i * d:i * d + h, j * d:j * d + w, :] += gcols6[:, :, :, i, j, :]
            gx = gxp[:, p:p + h, p:p + w, :]
        return (
            np.ascontiguousarray(gx.transpose(0, 3, 1, 2)),
            np.ascontiguousarray(gw),
            gb,
        )

    return _make(out, (x, weight, bias), backward)


def depthwise_conv2d(x: Tensor, weight: Tensor, bias: Tensor, spec: ConvSpec) -> Tensor:
    """Per-channel convolution; ``weight`` is (C, 1, k, k)."""
    n, c, h, w = x.shape
    k, d, p = spec.kernel, spec.dilation, spec.padding
    if not (spec.in_channels == spec.out_channels == c):
        raise DimensionError(
            f"depthwise_conv2d: input has {c} channels, spec is "
            f"{spec.in_channels}->{spec.out_channels}"
        )
    if weight.shape != (c, 1, k, k):
        raise DimensionError(f"depthwise_conv2d: weight shape {weight.shape} != {(c, 1, k, k)}")
    if bias.shape != (1, c, 1, 1):
        raise DimensionError(f"depthwise_conv2d: bias shape {bias.shape} != {(1, c, 1, 1)}")
    dtype = _result_dtype(x, weight, bias)
    xp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=dtype)
    xp[:, :, p:p + h, p:p + w] = x.data
    wd = weight.data.astype(dtype, copy=False)
    out = np.zeros((n, c, h, w), dtype=dtype)
    for i, j in _taps(k):
        out += xp[:, :, i * d:i * d + h, j * d:j * d + w] * wd[:, 0, i, j].reshape(1, c, 1, 1)
    out += bias.data.astype(dtype, copy=False)

    def backward(g):
        gw = np.zeros_like(wd)
        gxp = np.zeros_like(xp)
        for i, j in _taps(k):
            window = (slice(None), slice(None), slice(i * d, i * d + h), slice(j * d, j * d + w))
            gw[:, 0, i, j] = np.einsum("nchw,nchw->c", g, xp[window])
            gxp[window] += g * wd[:, 0, i, j].reshape(1, c, 1, 1)
        gb = g.sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
        return gxp[:, :, p:p + h, p:p + w], gw, gb

    return _make(out, (x, weight, bias), backward)


def max_pool2x2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2; a trailing odd row/column is dropped."""
    n, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    if h2 == 0 or w2 == 0:
        raise DimensionError(f"max_pool2x2: spatial extent {h}x{w} too small")
    blocks = x.data[:, :, :2 * h2, :2 * w2].reshape(n, c, h2, 2, w2, 2)
    out = blocks.max(axis=(3, 5))
    # route the gradient to the first maximal element of each window
    flat = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    arg = flat.argmax(axis=-1)

    def backward(g):
        gflat = np.zeros((n, c, h2, w2, 4), dtype=g.dtype)
        np.put_along_axis(gflat, arg[..., None], g[..., None], axis=-1)
        gblocks = gflat.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        gx = np.zeros((n, c, h, w), dtype=g.dtype)
        gx[:, :, :2 * h2, :2 * w2] = gblocks.reshape(n, c, 2 * h2, 2 * w2)
        return (gx,)

    return _make(np.ascontiguousarray(out), (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    return mean_spatial(x)


def pool(x: Tensor, kind: str) -> Tensor:
    if kind == "max2x2":
        return max_pool2x2(x)
    if kind == "global_avg":
        return global_avg_pool(x)
    raise ConfigurationError(f"unknown pool kind {kind!r}")


# ----------------------------------------------------------------------------
# backward pass
# ----------------------------------------------------------------------------

def _topological(root: Tensor) -> list[Tensor]:
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
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, inputs: Iterable[Tensor] | None = None) -> None:
    """Populate ``.grad`` on every reachable leaf that requires grad.

    Leaves listed in ``inputs`` that the loss does not depend on get a zero
    gradient. Existing gradients are overwritten, not accumulated.
    """
    if loss.shape != (1, 1, 1, 1):
        raise ContractError(f"backward needs a scalar (1,1,1,1) loss, got shape {loss.shape}")
    inputs = list(inputs) if inputs is not None else None
    for leaf in inputs or ():
        leaf.grad = None
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.astype(node.data.dtype, copy=False)
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg
    if inputs is not None:
        for leaf in inputs:
            if leaf.grad is None and leaf.requires_grad:
                leaf.grad = np.zeros_like(leaf.data)


# ----------------------------------------------------------------------------
# finite-difference checking
# ----------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    n_checked: int
    worst: tuple[str, int] | None = None
    errors: list[float] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def grad_check(
    builder: Callable[..., Tensor],
    leaves: dict[str, Tensor],
    tolerance: float = 1e-4,
    n_coords: int = 20,
    step: float = 1e-4,
    seed: int = 0,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    ``builder`` receives the leaves as keyword arguments (float64 copies)
    and must return a scalar tensor. Coordinates are sampled uniformly over
    the concatenation of all leaves. Relative error is
    ``|a - n| / max(|a|, |n|, floor)``.
    """
    names = list(leaves)
    replay = {k: Tensor(leaves[k].data.astype(np.float64), requires_grad=True, dtype=np.float64)
              for k in names}
    out = builder(**replay)
    if out.shape != (1, 1, 1, 1):
        raise ContractError(f"grad_check builder must return a scalar, got shape {out.shape}")
    backward(out, replay.values())

    sizes = np.array([replay[k].data.size for k in names])
    rng = np.random.default_rng(seed)
    picks = rng.choice(int(sizes.sum()), size=min(n_coords, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    errors = []
    worst = None
    worst_err = -1.0
    for flat in picks:
        li = int(np.searchsorted(offsets, flat, side="right") - 1)
        name = names[li]
        idx = int(flat - offsets[li])
        leaf = replay[name]
        view = leaf.data.reshape(-1)
        orig = view[idx]
        with no_grad():
            view[idx] = orig + step
            f_plus = builder(**replay).item()
            view[idx] = orig - step
            f_minus = builder(**replay).item()
        view[idx] = orig
        numeric = (f_plus - f_minus) / (2 * step)
        analytic = float(leaf.grad.reshape(-1)[idx])
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
        errors.append(err)
        if err > worst_err:
            worst_err, worst = err, (name, idx)
    return GradCheckReport(
        max_rel_error=max(errors) if errors else 0.0,
        tolerance=tolerance,
        n_checked=len(errors),
        worst=worst,
        errors=errors,
    )
