"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable computation goes through :func:`apply_primitive`, which
evaluates a primitive from the catalog and, when a :class:`Tape` is active on
the current thread and an input requires gradients, records the application
so :func:`backward` can replay it in reverse.

    >>> x = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = (x * x).sum()
    >>> backward(tape, loss)
    >>> x.grad
    array([2., 4.])
"""
from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .exceptions import NumericFault, ShapeError, TapeError

__all__ = [
    "Tensor",
    "Tape",
    "GradReport",
    "PRIMITIVES",
    "apply_primitive",
    "backward",
    "grad_check",
    "no_grad",
]

_state = threading.local()


def _tape_stack() -> list:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A real ndarray plus gradient bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    # basic properties -------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # operator sugar ---------------------------------------------------
    def __add__(self, other):
        if _is_scalar(other):
            return apply_primitive("add_scalar", [self], {"value": float(other)})
        return apply_primitive("add", [self, _as_tensor(other, self.dtype)])

    __radd__ = __add__

    def __sub__(self, other):
        if _is_scalar(other):
            return apply_primitive("add_scalar", [self], {"value": -float(other)})
        return apply_primitive("sub", [self, _as_tensor(other, self.dtype)])

    def __rsub__(self, other):
        if _is_scalar(other):
            neg = apply_primitive("mul_scalar", [self], {"value": -1.0})
            return apply_primitive("add_scalar", [neg], {"value": float(other)})
        return apply_primitive("sub", [_as_tensor(other, self.dtype), self])

    def __mul__(self, other):
        if _is_scalar(other):
            return apply_primitive("mul_scalar", [self], {"value": float(other)})
        return apply_primitive("mul", [self, _as_tensor(other, self.dtype)])

    __rmul__ = __mul__

    def __truediv__(self, other):
        if _is_scalar(other):
            return apply_primitive("mul_scalar", [self], {"value": 1.0 / float(other)})
        return apply_primitive("div", [self, _as_tensor(other, self.dtype)])

    def __neg__(self):
        return apply_primitive("mul_scalar", [self], {"value": -1.0})

    def __matmul__(self, other):
        return apply_primitive("matmul", [self, _as_tensor(other, self.dtype)])

    def sum(self, axis=None, keepdims: bool = False):
        return apply_primitive("sum", [self], {"axis": axis, "keepdims": keepdims})

    def mean(self, axis=None, keepdims: bool = False):
        return apply_primitive("mean", [self], {"axis": axis, "keepdims": keepdims})

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return apply_primitive("reshape", [self], {"shape": tuple(shape)})

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return apply_primitive("transpose", [self], {"axes": tuple(axes)})


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer))


def _as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


@dataclass
class TapeEntry:
    op_id: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    attrs: dict
    ctx: object


class Tape:
    """Ordered record of primitive applications for one forward pass.

    A tape is bound to the thread that entered it; nested tapes shadow outer
    ones for the duration of the ``with`` block.
    """

    def __init__(self):
        self.entries: List[TapeEntry] = []
        self._produced: Dict[int, int] = {}

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise TapeError("tape exited out of order")
        stack.pop()

    def __len__(self) -> int:
        return len(self.entries)

    def record(self, entry: TapeEntry) -> None:
        self._produced[id(entry.output)] = len(self.entries)
        self.entries.append(entry)

    def produced(self, t: Tensor) -> bool:
        idx = self._produced.get(id(t))
        return idx is not None and self.entries[idx].output is t


class no_grad:
    """Suspend recording: primitives inside run without any active tape."""

    def __enter__(self):
        stack = _tape_stack()
        self._saved = list(stack)
        stack.clear()
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        stack.clear()
        stack.extend(self._saved)


# ---------------------------------------------------------------------------
# primitive catalog
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Primitive:
    # forward(arrays, **attrs) -> (out, ctx)
    forward: Callable
    # backward(grad_out, arrays, out, ctx, **attrs) -> tuple of input grads
    backward: Callable
    arity: Optional[int] = None


PRIMITIVES: Dict[str, Primitive] = {}


def _register(name: str, arity: Optional[int] = None):
    def deco(cls):
        PRIMITIVES[name] = Primitive(cls.forward, cls.backward, arity)
        return cls

    return deco


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(a: np.ndarray, b: np.ndarray, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


@_register("add", 2)
class _Add:
    def forward(arrs):
        a, b = arrs
        _broadcast_shape(a, b, "add")
        return a + b, None

    def backward(g, arrs, out, ctx):
        return _unbroadcast(g, arrs[0].shape), _unbroadcast(g, arrs[1].shape)


@_register("sub", 2)
class _Sub:
    def forward(arrs):
        a, b = arrs
        _broadcast_shape(a, b, "sub")
        return a - b, None

    def backward(g, arrs, out, ctx):
        return _unbroadcast(g, arrs[0].shape), _unbroadcast(-g, arrs[1].shape)


@_register("mul", 2)
class _Mul:
    def forward(arrs):
        a, b = arrs
        _broadcast_shape(a, b, "mul")
        return a * b, None

    def backward(g, arrs, out, ctx):
        a, b = arrs
        return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


@_register("div", 2)
class _Div:
    def forward(arrs):
        a, b = arrs
        _broadcast_shape(a, b, "div")
        return a / b, None

    def backward(g, arrs, out, ctx):
        a, b = arrs
        return _unbroadcast(g / b, a.shape), _unbroadcast(-g * out / b, b.shape)


@_register("add_scalar", 1)
class _AddScalar:
    def forward(arrs, value):
        return arrs[0] + value, None

    def backward(g, arrs, out, ctx, value):
        return (g,)


@_register("mul_scalar", 1)
class _MulScalar:
    def forward(arrs, value):
        return arrs[0] * value, None

    def backward(g, arrs, out, ctx, value):
        return (g * value,)


@_register("matmul", 2)
class _Matmul:
    def forward(arrs):
        a, b = arrs
        if a.ndim < 2 or b.ndim < 2:
            raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
        return np.matmul(a, b), None

    def backward(g, arrs, out, ctx):
        a, b = arrs
        if b.ndim == 2 and a.ndim > 2:
            # shared weight: fold the batch dims into one GEMM
            ga = np.matmul(g, b.T)
            gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb
        ga = np.matmul(g, np.swapaxes(b, -1, -2))
        gb = np.matmul(np.swapaxes(a, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


def _conv_geometry(T: int, k: int, stride: int, padding) -> Tuple[int, int, int]:
    if padding == "same":
        total = k - 1
        left = total // 2
        right = total - left
    elif padding == "valid":
        left = right = 0
    else:
        left = right = int(padding)
    t_out = (T + left + right - k) // stride + 1
    if t_out < 1:
        raise ShapeError(f"conv1d: kernel {k} longer than padded input {T + left + right}")
    return left, right, t_out


@_register("conv1d")
class _Conv1d:
    """Cross-correlation over the last axis, accumulated one kernel tap at a time.

    x: B x Cin x T, w: Cout x (Cin/groups) x k, optional bias: Cout.

    Dense stride-1 convolutions run on a channel-major copy of the padded
    input, flattened to Cin x (B * Tp), so each tap is one large GEMM; the
    k - 1 outputs straddling two sequences are computed and discarded.
    """

    def forward(arrs, stride=1, padding="same", groups=1):
        x, w = arrs[0], arrs[1]
        if x.ndim != 3 or w.ndim != 3:
            raise ShapeError(f"conv1d expects 3-D input and weight, got {x.shape}, {w.shape}")
        B, cin, T = x.shape
        cout, cin_g, k = w.shape
        if cin % groups or cout % groups or cin_g * groups != cin:
            raise ShapeError(
                f"conv1d: weight {w.shape} incompatible with {cin} input channels, groups={groups}"
            )
        if len(arrs) == 3 and arrs[2].shape != (cout,):
            raise ShapeError(f"conv1d: bias shape {arrs[2].shape} != ({cout},)")
        left, right, t_out = _conv_geometry(T, k, stride, padding)
        xp = _pad_last(x, left, right)
        if groups == 1 and stride == 1:
            out = _dense_forward(xp, w, t_out)
        else:
            out = _grouped_forward(xp, w, groups, stride, t_out)
        if len(arrs) == 3:
            out += arrs[2][None, :, None]
        return out, (left, right, t_out)

    def backward(g, arrs, out, ctx, stride=1, padding="same", groups=1):
        x, w = arrs[0], arrs[1]
        left, right, t_out = ctx
        T = x.shape[-1]
        xp = _pad_last(x, left, right)
        if groups == 1 and stride == 1:
            gxp, gw = _dense_backward(g, xp, w)
        else:
            gxp, gw = _grouped_backward(g, xp, w, groups, stride, t_out)
        grads = [np.ascontiguousarray(gxp[..., left : left + T]), gw]
        if len(arrs) == 3:
            grads.append(g.sum(axis=(0, 2)))
        return tuple(grads)


def _pad_last(x, left, right):
    if not (left or right):
        return x
    out = np.zeros(x.shape[:-1] + (x.shape[-1] + left + right,), dtype=x.dtype)
    out[..., left : left + x.shape[-1]] = x
    return out


def _dense_forward(xp, w, t_out):
    k = w.shape[-1]
    wt = np.ascontiguousarray(w.transpose(2, 0, 1))  # BLAS needs unit-stride taps
    out = np.matmul(wt[0], xp[..., :t_out])
    for j in range(1, k):
        out += np.matmul(wt[j], xp[..., j : j + t_out])
    return out


def _dense_backward(g, xp, w):
    k = w.shape[-1]
    t_out = g.shape[-1]
    wt = np.ascontiguousarray(w.transpose(2, 1, 0))  # k x cin x cout
    gw = np.empty((k,) + w.shape[:2], dtype=w.dtype)
    gxp = np.zeros(xp.shape, dtype=g.dtype)
    for j in range(k):
        xs = xp[..., j : j + t_out]
        gw[j] = np.matmul(g, xs.transpose(0, 2, 1)).sum(axis=0)
        gxp[..., j : j + t_out] += np.matmul(wt[j], g)
    return gxp, np.ascontiguousarray(gw.transpose(1, 2, 0))


def _grouped_forward(xp, w, G, stride, t_out):
    B, cin, Tp = xp.shape
    cout, cin_g, k = w.shape
    og = cout // G
    span = stride * (t_out - 1) + 1
    out = np.zeros((B, G, og, t_out), dtype=np.result_type(xp, w))
    xg = xp.reshape(B, G, cin_g, Tp)
    wg = w.reshape(G, og, cin_g, k)
    for j in range(k):
        xs = xg[..., j : j + span : stride]
        if cin_g == 1 and og == 1:
            out += wg[None, :, :, 0, j, None] * xs
        else:
            out += np.matmul(wg[None, :, :, :, j], xs)
    return out.reshape(B, cout, t_out)


def _grouped_backward(g, xp, w, G, stride, t_out):
    B, cin, Tp = xp.shape
    cout, cin_g, k = w.shape
    og = cout // G
    span = stride * (t_out - 1) + 1
    xg = xp.reshape(B, G, cin_g, Tp)
    wg = w.reshape(G, og, cin_g, k)
    gg = g.reshape(B, G, og, t_out)
    gw = np.empty_like(wg)
    gxp = np.zeros(xg.shape, dtype=g.dtype)
    for j in range(k):
        xs = xg[..., j : j + span : stride]
        if cin_g == 1 and og == 1:
            gw[:, 0, 0, j] = np.einsum("bgt,bgt->g", gg[:, :, 0], xs[:, :, 0])
            gxp[..., j : j + span : stride] += wg[None, :, :, 0, j, None] * gg
        else:
            gw[:, :, :, j] = np.einsum("bgot,bgct->goc", gg, xs, optimize=True)
            gxp[..., j : j + span : stride] += np.matmul(
                np.swapaxes(wg[None, :, :, :, j], -1, -2), gg
            )
    return gxp.reshape(B, cin, Tp), gw.reshape(w.shape)


@_register("sigmoid", 1)
class _Sigmoid:
    def forward(arrs):
        return _sig(arrs[0]), None

    def backward(g, arrs, out, ctx):
        return (g * out * (1.0 - out),)


@_register("tanh", 1)
class _Tanh:
    def forward(arrs):
        return np.tanh(arrs[0]), None

    def backward(g, arrs, out, ctx):
        return (g * (1.0 - out * out),)


_GELU_C = math.sqrt(2.0 / math.pi)


@_register("gelu", 1)
class _Gelu:
    """tanh approximation 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""

    def forward(arrs):
        x = arrs[0]
        x2 = x * x
        th = x2 * 0.044715
        th += 1.0
        th *= x
        th *= _GELU_C
        np.tanh(th, out=th)
        out = th + 1.0
        out *= x
        out *= 0.5
        return out, th

    def backward(g, arrs, out, th):
        x = arrs[0]
        # d/dx = 0.5 (1 + th) + 0.5 x (1 - th^2) c (1 + 3 * 0.044715 x^2)
        inner = x * x
        inner *= 3 * 0.044715
        inner += 1.0
        inner *= x
        inner *= 0.5 * _GELU_C
        sech2 = th * th
        np.subtract(1.0, sech2, out=sech2)
        inner *= sech2
        inner += 0.5
        inner += 0.5 * th
        inner *= g
        return (inner,)


@_register("softmax", 1)
class _Softmax:
    def forward(arrs, axis=-1):
        x = arrs[0]
        e = np.exp(x - x.max(axis=axis, keepdims=True))
        return e / e.sum(axis=axis, keepdims=True), None

    def backward(g, arrs, out, ctx, axis=-1):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)


@_register("layer_norm", 1)
class _LayerNorm:
    """Zero-mean, unit-variance normalization along ``axis`` (no affine)."""

    def forward(arrs, axis=1, eps=1e-7):
        x = arrs[0]
        mu = x.mean(axis=axis, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=axis, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        return xc * inv, inv

    def backward(g, arrs, out, inv, axis=1, eps=1e-7):
        gm = g.mean(axis=axis, keepdims=True)
        gxm = (g * out).mean(axis=axis, keepdims=True)
        return (inv * (g - gm - out * gxm),)


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


@_register("sum", 1)
class _Sum:
    def forward(arrs, axis=None, keepdims=False):
        return np.asarray(arrs[0].sum(axis=axis, keepdims=keepdims)), None

    def backward(g, arrs, out, ctx, axis=None, keepdims=False):
        x = arrs[0]
        if not keepdims:
            g = np.expand_dims(g, _norm_axes(axis, x.ndim))
        return (np.broadcast_to(g, x.shape).copy(),)


@_register("mean", 1)
class _Mean:
    def forward(arrs, axis=None, keepdims=False):
        return np.asarray(arrs[0].mean(axis=axis, keepdims=keepdims)), None

    def backward(g, arrs, out, ctx, axis=None, keepdims=False):
        x = arrs[0]
        axes = _norm_axes(axis, x.ndim)
        n = 1
        for a in axes:
            n *= x.shape[a]
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, x.shape).copy(),)


@_register("avg_pool1d", 1)
class _AvgPool1d:
    """Stride-1 moving average over the last axis, zero "same" padding.

    Padded positions count toward the divisor so the operator stays linear
    with a position-independent kernel.
    """

    def forward(arrs, kernel=3):
        x = arrs[0]
        T = x.shape[-1]
        left = (kernel - 1) // 2
        right = kernel - 1 - left
        pad = [(0, 0)] * (x.ndim - 1) + [(left, right)]
        xp = np.pad(x, pad)
        out = np.zeros_like(x)
        for j in range(kernel):
            out += xp[..., j : j + T]
        return out / kernel, (left, right)

    def backward(g, arrs, out, ctx, kernel=3):
        left, right = ctx
        T = g.shape[-1]
        gp = np.zeros(g.shape[:-1] + (T + left + right,), dtype=g.dtype)
        for j in range(kernel):
            gp[..., j : j + T] += g
        # adjoint of the padded window sum; padded positions are dropped
        return (gp[..., left : left + T] / kernel,)


@_register("concat")
class _Concat:
    def forward(arrs, axis=0):
        try:
            return np.concatenate(arrs, axis=axis), [a.shape[axis] for a in arrs]
        except ValueError as e:
            raise ShapeError(f"concat: {e}") from None

    def backward(g, arrs, out, sizes, axis=0):
        cuts = np.cumsum(sizes)[:-1]
        return tuple(np.split(g, cuts, axis=axis))


@_register("slice", 1)
class _Slice:
    def forward(arrs, axis=0, start=0, stop=None):
        x = arrs[0]
        idx = [slice(None)] * x.ndim
        idx[axis] = slice(start, stop)
        out = x[tuple(idx)]
        if out.size == 0:
            raise ShapeError(f"slice [{start}:{stop}] on axis {axis} of {x.shape} is empty")
        return out, tuple(idx)

    def backward(g, arrs, out, idx, axis=0, start=0, stop=None):
        gx = np.zeros_like(arrs[0])
        gx[idx] = g
        return (gx,)


@_register("broadcast_to", 1)
class _BroadcastTo:
    def forward(arrs, shape):
        try:
            return np.broadcast_to(arrs[0], shape).copy(), None
        except ValueError:
            raise ShapeError(f"cannot broadcast {arrs[0].shape} to {shape}") from None

    def backward(g, arrs, out, ctx, shape):
        return (_unbroadcast(g, arrs[0].shape),)


@_register("reshape", 1)
class _Reshape:
    def forward(arrs, shape):
        try:
            return arrs[0].reshape(shape), None
        except ValueError:
            raise ShapeError(f"cannot reshape {arrs[0].shape} to {shape}") from None

    def backward(g, arrs, out, ctx, shape):
        return (g.reshape(arrs[0].shape),)


@_register("transpose", 1)
class _Transpose:
    def forward(arrs, axes):
        return np.ascontiguousarray(np.transpose(arrs[0], axes)), None

    def backward(g, arrs, out, ctx, axes):
        return (np.ascontiguousarray(np.transpose(g, np.argsort(axes))),)


@_register("gru", 5)
class _Gru:
    """Single-layer unidirectional GRU over the last axis.

    x: B x Cin x T; w_ih: 3H x Cin; w_hh: 3H x H; b_ih, b_hh: 3H.
    Gate rows are ordered (reset, update, candidate):

        r = sigmoid(W_ir x + b_ir + W_hr h + b_hr)
        z = sigmoid(W_iz x + b_iz + W_hz h + b_hz)
        n = tanh(W_in x + b_in + r * (W_hn h + b_hn))
        h' = (1 - z) * n + z * h

    The initial state is zero; the output stacks h' at every step (B x H x T).
    """

    def forward(arrs):
        x, w_ih, w_hh, b_ih, b_hh = arrs
        B, cin, T = x.shape
        H3, cin_w = w_ih.shape
        H = H3 // 3
        if cin_w != cin or w_hh.shape != (H3, H) or b_ih.shape != (H3,) or b_hh.shape != (H3,):
            raise ShapeError(
                f"gru: parameter shapes {w_ih.shape}, {w_hh.shape}, {b_ih.shape}, {b_hh.shape} "
                f"incompatible with input {x.shape}"
            )
        xt = np.ascontiguousarray(np.transpose(x, (2, 0, 1)))  # T x B x Cin
        gi = np.matmul(xt, w_ih.T) + b_ih  # T x B x 3H
        dtype = np.result_type(x, w_hh)
        hs = np.zeros((T + 1, B, H), dtype=dtype)
        r_s = np.empty((T, B, H), dtype=dtype)
        z_s = np.empty_like(r_s)
        n_s = np.empty_like(r_s)
        nh_s = np.empty_like(r_s)
        w_hh_t = np.ascontiguousarray(w_hh.T)
        h = hs[0]
        for t in range(T):
            gh = h @ w_hh_t + b_hh
            i_t = gi[t]
            rz = _sig(i_t[:, : 2 * H] + gh[:, : 2 * H])
            r, z = rz[:, :H], rz[:, H:]
            nh = gh[:, 2 * H :]
            n = np.tanh(i_t[:, 2 * H :] + r * nh)
            h = (1.0 - z) * n + z * h
            hs[t + 1] = h
            r_s[t], z_s[t], n_s[t], nh_s[t] = r, z, n, nh
        out = np.ascontiguousarray(np.transpose(hs[1:], (1, 2, 0)))
        return out, (xt, hs, r_s, z_s, n_s, nh_s)

    def backward(g, arrs, out, ctx):
        x, w_ih, w_hh, b_ih, b_hh = arrs
        xt, hs, r_s, z_s, n_s, nh_s = ctx
        T, B, H = r_s.shape
        gT = np.transpose(g, (2, 0, 1))  # T x B x H
        dgi = np.empty((T, B, 3 * H), dtype=g.dtype)
        dgh = np.empty_like(dgi)
        dh = np.zeros((B, H), dtype=g.dtype)
        for t in range(T - 1, -1, -1):
            dh = dh + gT[t]
            r, z, n, nh = r_s[t], z_s[t], n_s[t], nh_s[t]
            h_prev = hs[t]
            dn = dh * (1.0 - z)
            dz_pre = dh * (h_prev - n) * z * (1.0 - z)
            dn_pre = dn * (1.0 - n * n)
            dr_pre = dn_pre * nh * r * (1.0 - r)
            dgi[t, :, :H] = dr_pre
            dgi[t, :, H : 2 * H] = dz_pre
            dgi[t, :, 2 * H :] = dn_pre
            dgh[t, :, :H] = dr_pre
            dgh[t, :, H : 2 * H] = dz_pre
            dgh[t, :, 2 * H :] = dn_pre * r
            dh = dh * z + dgh[t] @ w_hh
        gx = np.matmul(dgi, w_ih)  # T x B x Cin
        gw_ih = np.einsum("tbk,tbc->kc", dgi, xt, optimize=True)
        gw_hh = np.einsum("tbk,tbc->kc", dgh, hs[:-1], optimize=True)
        return (
            np.ascontiguousarray(np.transpose(gx, (1, 2, 0))),
            gw_ih,
            gw_hh,
            dgi.sum(axis=(0, 1)),
            dgh.sum(axis=(0, 1)),
        )


def _sig(x: np.ndarray) -> np.ndarray:
    # 0.5 + 0.5 tanh(x / 2): overflow-free for any finite x
    out = x * 0.5
    np.tanh(out, out=out)
    out *= 0.5
    out += 0.5
    return out


# ---------------------------------------------------------------------------
# engine
# ---------------------------------------------------------------------------


def apply_primitive(op_id: str, inputs: Sequence[Tensor], attrs: Optional[dict] = None) -> Tensor:
    """Evaluate primitive ``op_id`` and record it on the active tape if needed."""
    prim = PRIMITIVES.get(op_id)
    if prim is None:
        raise KeyError(f"unknown primitive {op_id!r}")
    attrs = attrs or {}
    inputs = tuple(inputs)
    if prim.arity is not None and len(inputs) != prim.arity:
        raise ShapeError(f"{op_id} takes {prim.arity} inputs, got {len(inputs)}")
    arrays = [t.data for t in inputs]
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        out, ctx = prim.forward(arrays, **attrs)
    out = np.asarray(out)
    if not np.isfinite(out).all():
        raise NumericFault(f"{op_id} produced non-finite values (output shape {out.shape})")
    result = Tensor(out)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        tape.record(TapeEntry(op_id, inputs, result, attrs, ctx))
    return result


def backward(tape: Tape, root: Tensor, seed: Optional[np.ndarray] = None) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every leaf on ``tape``."""
    if not tape.produced(root):
        raise TapeError("backward root was not produced by this tape")
    if seed is None:
        if root.size != 1:
            raise TapeError(f"non-scalar root {root.shape} needs an explicit seed gradient")
        seed = np.ones_like(root.data)
    else:
        seed = np.asarray(seed, dtype=root.dtype)
        if seed.shape != root.shape:
            raise ShapeError(f"seed shape {seed.shape} != root shape {root.shape}")

    grads: Dict[int, np.ndarray] = {id(root): seed}
    last = tape._produced[id(root)]
    for entry in reversed(tape.entries[: last + 1]):
        g = grads.pop(id(entry.output), None)
        if g is None:
            continue
        prim = PRIMITIVES[entry.op_id]
        arrays = [t.data for t in entry.inputs]
        in_grads = prim.backward(g, arrays, entry.output.data, entry.ctx, **entry.attrs)
        for t, gi in zip(entry.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if tape.produced(t):
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
            else:
                t.grad = gi.astype(t.dtype, copy=True) if t.grad is None else t.grad + gi


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

EPS_DIV = 1e-8


@dataclass
class GradReport:
    analytic: List[np.ndarray]
    numeric: List[np.ndarray]
    max_abs_err: float
    max_rel_err: float
    checked: int = 0
    worst: Optional[Tuple[int, Tuple[int, ...]]] = field(default=None)

    def passed(self, rtol: float) -> bool:
        return self.max_rel_err <= rtol


def _relative_error(a: np.ndarray, n: np.ndarray) -> np.ndarray:
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), EPS_DIV)


def grad_check(
    f: Callable[..., Tensor],
    x,
    eps: float = 1e-5,
    n_samples: Optional[int] = None,
    seed: int = 0,
) -> GradReport:
    """Compare tape gradients with central differences.

    ``x`` is a Tensor or a sequence of Tensors; ``f(*xs)`` must return a scalar
    Tensor. Inputs are perturbed in place, so ``f`` may also close over them
    (e.g. model parameters). When ``n_samples`` is given, only that many
    randomly chosen scalar entries (across all tensors) are checked.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    saved_flags = [t.requires_grad for t in xs]
    for t in xs:
        t.requires_grad = True
        t.grad = None

    def evaluate() -> float:
        with no_grad():
            return float(f(*xs).data)

    base = evaluate()
    if evaluate() != base:
        raise TapeError("grad_check: function is not deterministic; check invalidated")

    with Tape() as tape:
        y = f(*xs)
    if y.size != 1:
        raise ShapeError(f"grad_check needs a scalar function, got shape {y.shape}")
    if tape.produced(y):
        backward(tape, y)
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in xs]

    if n_samples is None:
        picks = [(i, idx) for i, t in enumerate(xs) for idx in np.ndindex(t.shape)]
    else:
        rng = np.random.default_rng(seed)
        sizes = np.array([t.size for t in xs])
        flat = rng.choice(sizes.sum(), size=min(n_samples, sizes.sum()), replace=False)
        offsets = np.cumsum(sizes) - sizes
        picks = []
        for fi in sorted(flat):
            i = int(np.searchsorted(offsets, fi, side="right") - 1)
            picks.append((i, np.unravel_index(fi - offsets[i], xs[i].shape)))

    numeric = [np.full(t.shape, np.nan) for t in xs]
    max_abs = max_rel = 0.0
    worst = None
    for i, idx in picks:
        t = xs[i]
        orig = t.data[idx].copy()
        t.data[idx] = orig + eps
        fp = evaluate()
        t.data[idx] = orig - eps
        fm = evaluate()
        t.data[idx] = orig
        n = (fp - fm) / (2 * eps)
        numeric[i][idx] = n
        a = analytic[i][idx]
        abs_err = abs(a - n)
        rel = float(_relative_error(np.float64(a), np.float64(n)))
        max_abs = max(max_abs, abs_err)
        if rel > max_rel:
            max_rel, worst = rel, (i, tuple(int(v) for v in idx))

    for t, flag in zip(xs, saved_flags):
        t.requires_grad = flag
    return GradReport(analytic, numeric, float(max_abs), float(max_rel), len(picks), worst)
