"""Tensors, the recording tape, and differentiable primitives.

Every op computes its forward value with numpy and, when a :class:`Tape` is
active and some input requires a gradient, appends a node holding a closure
that maps the output gradient to input gradients. :func:`backward` replays the
tape in reverse.

    >>> x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = sum(x * x)
    >>> backward(tape, loss)
    >>> x.grad
    array([2., 4.])
"""
from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .errors import NonFiniteError, ShapeError, TapeError

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))
_state = threading.local()

Axis = Union[int, Sequence[int], None]


class Tensor:
    """N-dimensional float32/float64 array with an optional gradient."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            if dtype is not None:
                raise TypeError(f"unsupported dtype {arr.dtype}; use float32 or float64")
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return self.data.item()

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self):
        return len(self.data)

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
        return slice_(self, index)

    def sum(self, axis: Axis = None, keepdims: bool = False):
        return sum(self, axis, keepdims)

    def mean(self, axis: Axis = None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


@dataclass
class Node:
    op: str
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """Ordered record of ops executed while the tape is active.

    Tapes are thread-confined: each thread has its own stack of active tapes
    and ops record onto the innermost one.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._produced: dict[int, Node] = {}

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, node: Node) -> None:
        self.nodes.append(node)
        self._produced[id(node.output)] = node

    def produced(self, t: Tensor) -> bool:
        return id(t) in self._produced

    def leaves(self) -> list[Tensor]:
        """Gradient-requiring inputs not produced on this tape, in first-use order."""
        seen: set[int] = set()
        out = []
        for node in self.nodes:
            for t in node.inputs:
                if t.requires_grad and id(t) not in self._produced and id(t) not in seen:
                    seen.add(id(t))
                    out.append(t)
        return out


def _tape_stack() -> list:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


def active_tape() -> Optional[Tape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class no_record:
    """Suspend recording in this thread (used by numeric differentiation)."""

    def __enter__(self):
        self._saved = list(_tape_stack())
        _tape_stack().clear()
        return self

    def __exit__(self, *exc):
        _tape_stack().extend(self._saved)
        return False


def emit(op: str, inputs: Sequence[Tensor], data: np.ndarray, backward_fn) -> Tensor:
    """Wrap ``data`` as the output of ``op`` and record it when needed.

    ``backward_fn(grad_out)`` must return one gradient (or None) per input,
    already reduced to that input's shape. Downstream modules use this to
    define fused ops with hand-written backward rules.
    """
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    tape = active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=track)
    if track:
        tape.record(Node(op, tuple(inputs), out, backward_fn))
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate ``.grad`` on every gradient-requiring leaf of ``tape``.

    Leaf gradients are overwritten, not accumulated across calls. A loss that
    does not require a gradient (a detached constant) yields all-zero grads.
    """
    if loss.shape != ():
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    leaves = tape.leaves()
    for leaf in leaves:
        leaf.grad = np.zeros_like(leaf.data)
    if not loss.requires_grad:
        return
    if not tape.produced(loss):
        if any(leaf is loss for leaf in leaves):
            loss.grad = np.ones_like(loss.data)
            return
        raise TapeError("loss tensor was not produced on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    with np.errstate(over="ignore", invalid="ignore"):
        for node in reversed(tape.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            _propagate(tape, node, g, grads)
    for leaf in leaves:
        if not np.isfinite(leaf.grad).all():
            raise NonFiniteError("non-finite gradient reached a leaf tensor")


def _propagate(tape: Tape, node: Node, g: np.ndarray, grads: dict) -> None:
    for t, gi in zip(node.inputs, node.backward(g)):
        if gi is None or not t.requires_grad:
            continue
        if not np.isfinite(gi).all():
            raise NonFiniteError(f"backward of {node.op} produced non-finite gradients")
        if tape.produced(t):
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
        else:
            t.grad += gi


# ---------------------------------------------------------------- helpers


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(op: str, a: tuple, b: tuple) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a} and {b}") from None


def _norm_axes(axis: Axis, ndim: int) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, (int, np.integer)) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    if len(set(out)) != len(out):
        raise ShapeError(f"repeated axis in {axes}")
    return tuple(sorted(out))


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = (_lift(a, b), b) if not isinstance(a, Tensor) else (a, _lift(b, a))
    _broadcast_shape("add", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return emit("add", (a, b), a.data + b.data,
                lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = (_lift(a, b), b) if not isinstance(a, Tensor) else (a, _lift(b, a))
    _broadcast_shape("sub", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return emit("sub", (a, b), a.data - b.data,
                lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = (_lift(a, b), b) if not isinstance(a, Tensor) else (a, _lift(b, a))
    _broadcast_shape("mul", a.shape, b.shape)
    ad, bd = a.data, b.data
    return emit("mul", (a, b), ad * bd,
                lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = (_lift(a, b), b) if not isinstance(a, Tensor) else (a, _lift(b, a))
    _broadcast_shape("div", a.shape, b.shape)
    ad, bd = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        out = ad / bd  # non-finite results are rejected by emit
    return emit("div", (a, b), out,
                lambda g: (_unbroadcast(g / bd, ad.shape),
                           _unbroadcast(-g * out / bd, bd.shape)))


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the erf form of the normal CDF."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * xd * xd) / np.sqrt(2.0 * np.pi)
    return emit("gelu", (x,), xd * cdf, lambda g: (g * (cdf + xd * pdf),))


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return emit("exp", (x,), out, lambda g: (g * out,))


def sqrt(x: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        out = np.sqrt(x.data)
    return emit("sqrt", (x,), out, lambda g: (g * 0.5 / out,))


# ---------------------------------------------------------------- reductions


def sum(x: Tensor, axis: Axis = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axes(axis, x.ndim)
    shape = x.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(shape))

    def bw(g):
        return (np.broadcast_to(g.reshape(kept), shape).copy(),)

    return emit("sum", (x,), x.data.sum(axis=axes, keepdims=keepdims), bw)


def mean(x: Tensor, axis: Axis = None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    shape = x.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(shape))
    count = int(np.prod([shape[i] for i in axes])) if axes else 1

    def bw(g):
        return (np.broadcast_to(g.reshape(kept) / count, shape).astype(x.dtype),)

    return emit("mean", (x,), x.data.mean(axis=axes, keepdims=keepdims), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    (ax,) = _norm_axes(axis, x.ndim)
    shifted = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=ax, keepdims=True)
    return emit("softmax", (x,), y,
                lambda g: (y * (g - (g * y).sum(axis=ax, keepdims=True)),))


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul batch extents differ: {a.shape} @ {b.shape}") from None
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return emit("matmul", (a, b), ad @ bd, bw)


# ---------------------------------------------------------------- shape ops


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(n) for n in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}") from None
    src = x.shape
    return emit("reshape", (x,), out, lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(int(a) for a in axes)
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)) or len(axes) != x.ndim:
        raise ShapeError(f"invalid permutation {axes} for rank {x.ndim}")
    inverse = tuple(np.argsort(axes))
    return emit("transpose", (x,), np.ascontiguousarray(x.data.transpose(axes)),
                lambda g: (np.ascontiguousarray(g.transpose(inverse)),))


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape).copy()
    except ValueError:
        raise ShapeError(f"cannot broadcast {x.shape} to {shape}") from None
    src = x.shape
    return emit("broadcast_to", (x,), out, lambda g: (_unbroadcast(g, src),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    (ax,) = _norm_axes(axis, tensors[0].ndim)
    try:
        out = np.concatenate([t.data for t in tensors], axis=ax)
    except ValueError as e:
        raise ShapeError(f"concat: {e}") from None
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    return emit("concat", tuple(tensors), out,
                lambda g: tuple(np.split(g, bounds, axis=ax)))


def slice_(x: Tensor, index) -> Tensor:
    """Basic or advanced indexing; backward scatters into a zero buffer."""
    out = np.array(x.data[index], copy=True)
    shape, dtype = x.shape, x.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)

    return emit("slice", (x,), out, bw)


def take(x: Tensor, indices: np.ndarray, axis: int) -> Tensor:
    """Gather along one axis; repeated indices accumulate on backward."""
    (ax,) = _norm_axes(axis, x.ndim)
    idx = np.asarray(indices, dtype=np.intp)
    out = np.take(x.data, idx, axis=ax)
    shape, dtype = x.shape, x.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        moved = np.moveaxis(full, ax, 0)
        gm = np.moveaxis(g, list(range(ax, ax + idx.ndim)), list(range(idx.ndim)))
        np.add.at(moved, idx, gm)
        return (full,)

    return emit("take", (x,), out, bw)


# ---------------------------------------------------------------- convolution


def _out_extent(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _check_conv(x: Tensor, kh: int, kw: int, stride: int, pad: int):
    if x.ndim != 4:
        raise ShapeError(f"conv input must be (B, C, H, W), got {x.shape}")
    if stride < 1 or pad < 0:
        raise ShapeError(f"invalid stride {stride} / padding {pad}")
    ho = _out_extent(x.shape[2], kh, stride, pad)
    wo = _out_extent(x.shape[3], kw, stride, pad)
    if ho < 1 or wo < 1:
        raise ShapeError(
            f"conv output extent {ho}x{wo} is not positive "
            f"(input {x.shape[2]}x{x.shape[3]}, kernel {kh}x{kw}, stride {stride}, pad {pad})"
        )
    return ho, wo


def _pad(a: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return a
    return np.pad(a, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def conv2d(x: Tensor, w: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding (no kernel flip)."""
    cout, cin, kh, kw = w.shape
    if x.ndim == 4 and x.shape[1] != cin:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape}, weight {w.shape}")
    ho, wo = _check_conv(x, kh, kw, stride, pad)
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d bias shape {bias.shape} != ({cout},)")
    xd, wd = x.data, w.data
    bsz = xd.shape[0]

    if kh == kw == 1 and pad == 0:
        xs = xd[:, :, ::stride, ::stride]
        out = np.einsum("bchw,oc->bohw", xs, wd[:, :, 0, 0], optimize=True)

        def conv_bw(g):
            gx = np.zeros_like(xd)
            gx[:, :, ::stride, ::stride] = np.einsum("bohw,oc->bchw", g, wd[:, :, 0, 0], optimize=True)
            gw = np.einsum("bohw,bchw->oc", g, xs, optimize=True)[:, :, None, None]
            return gx, gw
    else:
        xp = _pad(xd, pad)
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
        cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(bsz * ho * wo, cin * kh * kw)
        out = (cols @ wd.reshape(cout, -1).T).reshape(bsz, ho, wo, cout).transpose(0, 3, 1, 2)

        def conv_bw(g):
            gflat = g.transpose(0, 2, 3, 1).reshape(bsz * ho * wo, cout)
            gw = (gflat.T @ cols).reshape(wd.shape)
            gcols = (gflat @ wd.reshape(cout, -1)).reshape(bsz, ho, wo, cin, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += \
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, pad:pad + xd.shape[2], pad:pad + xd.shape[3]] if pad else gxp
            return np.ascontiguousarray(gx), gw

    out = np.ascontiguousarray(out)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
        return emit("conv2d", (x, w, bias), out,
                    lambda g: (*conv_bw(g), g.sum(axis=(0, 2, 3))))
    return emit("conv2d", (x, w), out, conv_bw)


def depthwise_conv2d(x: Tensor, w: Tensor, bias: Optional[Tensor] = None,
                     stride: int = 1, pad: int = 0) -> Tensor:
    """Per-channel cross-correlation; ``w`` has shape (C, 1, K, K)."""
    if w.ndim != 4 or w.shape[1] != 1:
        raise ShapeError(f"depthwise weight must be (C, 1, K, K), got {w.shape}")
    c, _, kh, kw = w.shape
    if x.ndim == 4 and x.shape[1] != c:
        raise ShapeError(f"depthwise channel mismatch: input {x.shape}, weight {w.shape}")
    ho, wo = _check_conv(x, kh, kw, stride, pad)
    if bias is not None and bias.shape != (c,):
        raise ShapeError(f"depthwise bias shape {bias.shape} != ({c},)")
    xd, wd = x.data, w.data
    xp = _pad(xd, pad)

    def window(i, j):
        return (slice(None), slice(None),
                slice(i, i + stride * (ho - 1) + 1, stride),
                slice(j, j + stride * (wo - 1) + 1, stride))

    out = np.zeros((xd.shape[0], c, ho, wo), dtype=np.result_type(xd, wd))
    for i in range(kh):
        for j in range(kw):
            out += xp[window(i, j)] * wd[:, 0, i, j][None, :, None, None]

    def conv_bw(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(wd)
        for i in range(kh):
            for j in range(kw):
                win = window(i, j)
                gw[:, 0, i, j] = (g * xp[win]).sum(axis=(0, 2, 3))
                gxp[win] += g * wd[:, 0, i, j][None, :, None, None]
        gx = gxp[:, :, pad:pad + xd.shape[2], pad:pad + xd.shape[3]] if pad else gxp
        return np.ascontiguousarray(gx), gw

    if bias is not None:
        out = out + bias.data[None, :, None, None]
        return emit("depthwise_conv2d", (x, w, bias), out,
                    lambda g: (*conv_bw(g), g.sum(axis=(0, 2, 3))))
    return emit("depthwise_conv2d", (x, w), out, conv_bw)


# ---------------------------------------------------------------- gradient checking


def grad_check(f: Callable[..., Tensor], x, eps: float = 1e-5,
               max_coords: Optional[int] = None, seed: int = 0, floor: float = 1e-8) -> float:
    """Largest relative error between backprop and central differences.

    ``x`` is a float64 tensor (``f(x)``) or a sequence of them (``f(*x)``).
    With ``max_coords`` only that many seeded-random coordinates per tensor
    are probed. Relative error is ``|a - n| / max(floor, |a| + |n|)``; the
    floor keeps gradients that are zero up to rounding from dominating.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        if t.dtype != np.float64:
            raise TypeError("grad_check needs float64 tensors")

    def call():
        return f(xs[0]) if isinstance(x, Tensor) else f(*xs)

    saved = [t.requires_grad for t in xs]
    for t in xs:
        t.requires_grad = True
    try:
        with Tape() as tape:
            y = call()
        backward(tape, y)
        analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in xs]
    finally:
        for t, flag in zip(xs, saved):
            t.requires_grad = flag

    rng = np.random.default_rng(seed)
    worst = 0.0
    with no_record():
        for t, ga in zip(xs, analytic):
            flat = t.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
            for i in coords:
                orig = flat[i]
                flat[i] = orig + eps
                fp = call().item()
                flat[i] = orig - eps
                fm = call().item()
                flat[i] = orig
                num = (fp - fm) / (2 * eps)
                a = ga.reshape(-1)[i]
                err = abs(a - num) / max(floor, abs(a) + abs(num))
                worst = max(worst, err)
    return float(worst)
