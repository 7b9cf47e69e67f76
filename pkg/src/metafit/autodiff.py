"""Reverse-mode automatic differentiation over dense numpy tensors.

Every primitive is a :class:`Function` subclass with a numpy ``forward`` and a
``backward`` written in terms of Tensor operations.  Because backward rules
are themselves built from recorded primitives, running :func:`backward` with
``higher_order=True`` leaves the returned gradients attached to the graph and
they can be differentiated again (gradient-through-gradient, as needed for
second-order meta-updates).

Graph recording is governed by a context-local flag, so one thread's
``no_grad`` block never affects another thread.
"""

from __future__ import annotations

import contextlib
import contextvars
import weakref
from collections.abc import Mapping
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DomainError, NumericError, ShapeError, UsageError

# Variance stabilizer used by batchnorm2d.
BN_EPS = 1e-5

_recording: contextvars.ContextVar[bool] = contextvars.ContextVar("metafit_recording", default=True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    token = _recording.set(False)
    try:
        yield
    finally:
        _recording.reset(token)


@contextlib.contextmanager
def enable_grad(flag: bool = True):
    token = _recording.set(flag)
    try:
        yield
    finally:
        _recording.reset(token)


def is_recording() -> bool:
    return _recording.get()


class Tensor:
    """An n-dimensional float array that may participate in a differentiation graph.

    A tensor is *on the graph* when ``requires_grad`` is true: either it is a
    leaf created with ``requires_grad=True`` or it is the output of a recorded
    primitive.  Tensors off the graph are plain immutable values.
    """

    __slots__ = ("data", "requires_grad", "_ctx", "__weakref__")
    __array_ufunc__ = None  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._ctx = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._ctx is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def detach(self, requires_grad: bool = False) -> "Tensor":
        return Tensor(self.data, requires_grad=requires_grad)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=6)}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # arithmetic
    def __add__(self, other):
        return Add.apply(self, _lift(other, self))

    def __radd__(self, other):
        return Add.apply(_lift(other, self), self)

    def __sub__(self, other):
        return Sub.apply(self, _lift(other, self))

    def __rsub__(self, other):
        return Sub.apply(_lift(other, self), self)

    def __mul__(self, other):
        return Mul.apply(self, _lift(other, self))

    def __rmul__(self, other):
        return Mul.apply(_lift(other, self), self)

    def __truediv__(self, other):
        return Div.apply(self, _lift(other, self))

    def __rtruediv__(self, other):
        return Div.apply(_lift(other, self), self)

    def __neg__(self):
        return Neg.apply(self)

    def __matmul__(self, other):
        return MatMul.apply(self, _lift(other, self))

    def __rmatmul__(self, other):
        return MatMul.apply(_lift(other, self), self)

    def __pow__(self, exponent):
        if isinstance(exponent, Tensor):
            raise UsageError("pow: only scalar (non-tensor) exponents are supported")
        return Pow.apply(self, exponent=float(exponent))

    def __getitem__(self, index):
        return GetItem.apply(self, index=index)

    # reductions and shape ops
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return Sum.apply(self, axis=_norm_axis(axis, self.ndim), keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=tuple(shape))

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        return Transpose.apply(self, axes=tuple(axes))

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    # elementwise
    def relu(self):
        return Relu.apply(self)

    def sigmoid(self):
        return Sigmoid.apply(self)

    def exp(self):
        return Exp.apply(self)

    def log(self):
        return Log.apply(self)

    def softmax(self):
        return Softmax.apply(self)

    def clamp_min(self, floor: float):
        return ClampMin.apply(self, floor=float(floor))


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _norm_axis(axis, ndim: int):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim if ndim else a for a in axis))


class Context:
    """Per-application record: inputs, op parameters and saved intermediates."""

    __slots__ = ("inputs", "params", "saved", "_out")

    def __init__(self, inputs: tuple[Tensor, ...], params: dict):
        self.inputs = inputs
        self.params = params
        self.saved: dict = {}
        self._out = None

    @property
    def output(self) -> Tensor:
        out = self._out() if self._out is not None else None
        if out is None:
            raise RuntimeError("output tensor of a recorded op is no longer alive")
        return out


class Function:
    """Base class for differentiable primitives.

    Subclasses implement ``forward(ctx, *arrays, **params) -> ndarray`` and
    ``backward(ctx, grad) -> tuple`` returning one Tensor (or None) per input.
    Backward rules are looked up on the class at backward time.
    """

    name = "function"

    @staticmethod
    def forward(ctx, *arrays, **params):
        raise NotImplementedError

    @staticmethod
    def backward(ctx, grad):
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: Tensor, **params) -> Tensor:
        ctx = Context(inputs, params)
        out = Tensor(cls.forward(ctx, *(t.data for t in inputs), **params))
        if _recording.get() and any(t.requires_grad for t in inputs):
            out.requires_grad = True
            out._ctx = (cls, ctx)
            ctx._out = weakref.ref(out)
        return out


def _broadcast_shape(op: str, a: np.ndarray, b: np.ndarray) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


def sum_to(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Reduce a broadcast gradient back to ``shape``."""
    if g.shape == tuple(shape):
        return g
    lead = g.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and g.shape[i + lead] != 1
    )
    return g.sum(axis=axes).reshape(shape)


class Add(Function):
    name = "add"

    @staticmethod
    def forward(ctx, a, b):
        _broadcast_shape("add", a, b)
        return a + b

    @staticmethod
    def backward(ctx, g):
        a, b = ctx.inputs
        return sum_to(g, a.shape), sum_to(g, b.shape)


class Sub(Function):
    name = "sub"

    @staticmethod
    def forward(ctx, a, b):
        _broadcast_shape("sub", a, b)
        return a - b

    @staticmethod
    def backward(ctx, g):
        a, b = ctx.inputs
        return sum_to(g, a.shape), sum_to(-g, b.shape)


class Mul(Function):
    name = "mul"

    @staticmethod
    def forward(ctx, a, b):
        _broadcast_shape("mul", a, b)
        return a * b

    @staticmethod
    def backward(ctx, g):
        a, b = ctx.inputs
        return sum_to(g * b, a.shape), sum_to(g * a, b.shape)


class Div(Function):
    name = "div"

    @staticmethod
    def forward(ctx, a, b):
        _broadcast_shape("div", a, b)
        if np.any(b == 0):
            raise DomainError("div: division by zero")
        return a / b

    @staticmethod
    def backward(ctx, g):
        a, b = ctx.inputs
        return sum_to(g / b, a.shape), sum_to(-(g * a) / (b * b), b.shape)


class Neg(Function):
    name = "neg"

    @staticmethod
    def forward(ctx, a):
        return -a

    @staticmethod
    def backward(ctx, g):
        return (-g,)


class MatMul(Function):
    name = "matmul"

    @staticmethod
    def forward(ctx, a, b):
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError("matmul", a.shape, b.shape)
        return a @ b

    @staticmethod
    def backward(ctx, g):
        a, b = ctx.inputs
        return g @ b.transpose(), a.transpose() @ g


class Sum(Function):
    name = "sum"

    @staticmethod
    def forward(ctx, a, axis, keepdims):
        return np.sum(a, axis=axis, keepdims=keepdims)

    @staticmethod
    def backward(ctx, g):
        (a,) = ctx.inputs
        axis = ctx.params["axis"]
        if not ctx.params["keepdims"]:
            kept = tuple(1 if i in axis else s for i, s in enumerate(a.shape))
            g = g.reshape(kept)
        return (BroadcastTo.apply(g, shape=a.shape),)


class BroadcastTo(Function):
    name = "broadcast_to"

    @staticmethod
    def forward(ctx, a, shape):
        try:
            return np.broadcast_to(a, shape)
        except ValueError:
            raise ShapeError("broadcast_to", a.shape, shape) from None

    @staticmethod
    def backward(ctx, g):
        return (sum_to(g, ctx.inputs[0].shape),)


class Reshape(Function):
    name = "reshape"

    @staticmethod
    def forward(ctx, a, shape):
        try:
            return a.reshape(shape)
        except ValueError:
            raise ShapeError("reshape", a.shape, shape) from None

    @staticmethod
    def backward(ctx, g):
        return (g.reshape(ctx.inputs[0].shape),)


class Transpose(Function):
    name = "transpose"

    @staticmethod
    def forward(ctx, a, axes):
        if sorted(axes) != list(range(a.ndim)):
            raise ShapeError("transpose", a.shape, axes, detail="axes must permute all dimensions")
        return np.transpose(a, axes)

    @staticmethod
    def backward(ctx, g):
        inverse = tuple(np.argsort(ctx.params["axes"]))
        return (g.transpose(inverse),)


class GetItem(Function):
    name = "getitem"

    @staticmethod
    def forward(ctx, a, index):
        return a[index]

    @staticmethod
    def backward(ctx, g):
        return (IndexScatter.apply(g, index=ctx.params["index"], shape=ctx.inputs[0].shape),)


class IndexScatter(Function):
    """Adjoint of indexing: zeros of ``shape`` with ``grad`` accumulated at ``index``."""

    name = "index_scatter"

    @staticmethod
    def forward(ctx, g, index, shape):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, index, g)
        return out

    @staticmethod
    def backward(ctx, g):
        return (g[ctx.params["index"]],)


class Relu(Function):
    name = "relu"

    @staticmethod
    def forward(ctx, a):
        return np.maximum(a, 0)

    @staticmethod
    def backward(ctx, g):
        a = ctx.inputs[0].data
        return (g * Tensor((a > 0).astype(a.dtype)),)


class Sigmoid(Function):
    name = "sigmoid"

    @staticmethod
    def forward(ctx, a):
        e = np.exp(-np.abs(a))
        return np.where(a >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(a.dtype, copy=False)

    @staticmethod
    def backward(ctx, g):
        s = ctx.output
        return (g * s * (1.0 - s),)


class Softmax(Function):
    name = "softmax"

    @staticmethod
    def forward(ctx, a):
        if a.ndim == 0:
            raise ShapeError("softmax", a.shape, detail="needs at least one axis")
        z = np.exp(a - np.max(a, axis=-1, keepdims=True))
        return z / np.sum(z, axis=-1, keepdims=True)

    @staticmethod
    def backward(ctx, g):
        s = ctx.output
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)


class Log(Function):
    name = "log"

    @staticmethod
    def forward(ctx, a):
        if np.any(a <= 0):
            raise DomainError(f"log: non-positive input (min {np.min(a)!r})")
        return np.log(a)

    @staticmethod
    def backward(ctx, g):
        return (g / ctx.inputs[0],)


class Exp(Function):
    name = "exp"

    @staticmethod
    def forward(ctx, a):
        return np.exp(a)

    @staticmethod
    def backward(ctx, g):
        return (g * ctx.output,)


class Pow(Function):
    name = "pow"

    @staticmethod
    def forward(ctx, a, exponent):
        if exponent != int(exponent) and np.any(a < 0):
            raise DomainError(f"pow: negative base with non-integer exponent {exponent}")
        if exponent < 0 and np.any(a == 0):
            raise DomainError(f"pow: zero base with negative exponent {exponent}")
        return np.power(a, exponent)

    @staticmethod
    def backward(ctx, g):
        c = ctx.params["exponent"]
        a = ctx.inputs[0]
        if c == 0:
            return (g * 0.0,)
        if c == 1:
            return (g,)
        return (g * (a ** (c - 1.0)) * c,)


class ClampMin(Function):
    name = "clamp_min"

    @staticmethod
    def forward(ctx, a, floor):
        return np.maximum(a, np.asarray(floor, dtype=a.dtype))

    @staticmethod
    def backward(ctx, g):
        a = ctx.inputs[0].data
        return (g * Tensor((a > ctx.params["floor"]).astype(a.dtype)),)


class MaxLast(Function):
    """Max over the last axis; gradient goes to the first maximal entry."""

    name = "max_last"

    @staticmethod
    def forward(ctx, a):
        idx = np.argmax(a, axis=-1)
        ctx.saved["mask"] = (np.arange(a.shape[-1]) == idx[..., None]).astype(a.dtype)
        return np.take_along_axis(a, idx[..., None], axis=-1)[..., 0]

    @staticmethod
    def backward(ctx, g):
        return (g.reshape(g.shape + (1,)) * Tensor(ctx.saved["mask"]),)


class Im2Col(Function):
    """3x3 patches with zero padding 1, stride 1: (N,C,H,W) -> (N*H*W, C*9)."""

    name = "im2col"

    @staticmethod
    def forward(ctx, x):
        n, c, h, w = x.shape
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        win = sliding_window_view(xp, (3, 3), axis=(2, 3))  # N,C,H,W,3,3
        return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * h * w, c * 9)

    @staticmethod
    def backward(ctx, g):
        return (Col2Im.apply(g, shape=ctx.inputs[0].shape),)


class Col2Im(Function):
    name = "col2im"

    @staticmethod
    def forward(ctx, cols, shape):
        n, c, h, w = shape
        g6 = cols.reshape(n, h, w, c, 3, 3)
        xp = np.zeros((n, c, h + 2, w + 2), dtype=cols.dtype)
        for di in range(3):
            for dj in range(3):
                xp[:, :, di:di + h, dj:dj + w] += g6[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
        return xp[:, :, 1:-1, 1:-1].copy()

    @staticmethod
    def backward(ctx, g):
        return (Im2Col.apply(g),)


# composite primitives

def add(a, b):
    return as_tensor(a) + b


def sub(a, b):
    return as_tensor(a) - b


def mul(a, b):
    return as_tensor(a) * b


def div(a, b):
    return as_tensor(a) / b


def matmul(a, b):
    return as_tensor(a) @ b


def relu(x):
    return as_tensor(x).relu()


def sigmoid(x):
    return as_tensor(x).sigmoid()


def softmax(x):
    return as_tensor(x).softmax()


def log(x):
    return as_tensor(x).log()


def exp(x):
    return as_tensor(x).exp()


def pow(x, exponent: float):  # noqa: A001
    return as_tensor(x) ** exponent


def clamp_min(x, floor: float):
    return as_tensor(x).clamp_min(floor)


def tsum(x, axis=None, keepdims: bool = False):
    return as_tensor(x).sum(axis=axis, keepdims=keepdims)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    if count == 0:
        raise ShapeError("mean", x.shape, detail="empty reduction")
    return x.sum(axis=axes, keepdims=keepdims) * (1.0 / count)


def conv2d(x, weight, bias) -> Tensor:
    """3x3 cross-correlation, stride 1, zero padding 1.

    x: (N, C, H, W); weight: (F, C, 3, 3); bias: (F,).  Returns (N, F, H, W).
    """
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if (
        x.ndim != 4
        or weight.ndim != 4
        or weight.shape[2:] != (3, 3)
        or weight.shape[1] != x.shape[1]
        or bias.shape != (weight.shape[0],)
    ):
        raise ShapeError("conv2d", x.shape, weight.shape, bias.shape)
    n, c, h, w = x.shape
    f = weight.shape[0]
    cols = Im2Col.apply(x)
    out = cols @ weight.reshape(f, c * 9).transpose() + bias
    return out.reshape(n, h, w, f).transpose(0, 3, 1, 2)


def maxpool2d(x) -> Tensor:
    """2x2 max pooling, stride 2; odd trailing rows/columns are dropped."""
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[2] < 2 or x.shape[3] < 2:
        raise ShapeError("maxpool2d", x.shape, detail="expected (N, C, H>=2, W>=2)")
    n, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    if (h, w) != (2 * h2, 2 * w2):
        x = x[:, :, : 2 * h2, : 2 * w2]
    blocks = x.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    return MaxLast.apply(blocks)


def batchnorm2d(x, scale, shift, eps: float = BN_EPS) -> Tensor:
    """Per-channel normalization with statistics of the current batch."""
    x, scale, shift = as_tensor(x), as_tensor(scale), as_tensor(shift)
    if x.ndim != 4 or scale.shape != (x.shape[1],) or shift.shape != (x.shape[1],):
        raise ShapeError("batchnorm2d", x.shape, scale.shape, shift.shape)
    c = x.shape[1]
    mu = mean(x, axis=(0, 2, 3), keepdims=True)
    centered = x - mu
    var = mean(centered * centered, axis=(0, 2, 3), keepdims=True)
    xhat = centered / ((var + eps) ** 0.5)
    return xhat * scale.reshape(1, c, 1, 1) + shift.reshape(1, c, 1, 1)


PRIMITIVES: dict[str, Callable] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "matmul": matmul,
    "conv2d": conv2d,
    "maxpool2d": maxpool2d,
    "relu": relu,
    "sigmoid": sigmoid,
    "softmax": softmax,
    "log": log,
    "exp": exp,
    "pow": pow,
    "sum": tsum,
    "mean": mean,
    "clamp_min": clamp_min,
    "batchnorm2d": batchnorm2d,
}


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
        if node._ctx is not None:
            for inp in node._ctx[1].inputs:
                if inp.requires_grad and id(inp) not in seen:
                    stack.append((inp, False))
    return order


def backward(root: Tensor, wrt, higher_order: bool = False) -> dict:
    """Gradients of a scalar ``root`` with respect to each tensor in ``wrt``.

    Args:
        root: scalar tensor on the graph.
        wrt: mapping name -> Tensor (a ParamSet) or a sequence of tensors.
        higher_order: record the backward pass itself so the returned
            gradients stay differentiable.

    Returns:
        dict mapping each name (or position, for sequences) to its gradient.
    """
    items = list(wrt.items()) if isinstance(wrt, Mapping) else list(enumerate(wrt))
    if root.size != 1:
        raise UsageError(f"backward: root must be a scalar, got shape {root.shape}")
    for name, p in items:
        if not isinstance(p, Tensor) or not p.requires_grad:
            raise UsageError(f"backward: parameter {name!r} is detached from the graph")
    if not root.requires_grad:
        return {name: Tensor(np.zeros_like(p.data)) for name, p in items}

    order = _topological(root)
    grads: dict[int, Tensor] = {id(root): Tensor(np.ones_like(root.data))}
    with enable_grad(higher_order):
        for node in reversed(order):
            g = grads.get(id(node))
            if g is None or node._ctx is None:
                continue
            fn, ctx = node._ctx
            for inp, ig in zip(ctx.inputs, fn.backward(ctx, g)):
                if ig is None or not inp.requires_grad:
                    continue
                if ig.shape != inp.shape:
                    raise ShapeError(f"{fn.name} backward", ig.shape, inp.shape)
                prev = grads.get(id(inp))
                grads[id(inp)] = ig if prev is None else prev + ig
    out = {}
    for name, p in items:
        g = grads.get(id(p))
        out[name] = g if g is not None else Tensor(np.zeros_like(p.data))
    return out


def gradcheck(fn: Callable[[dict], Tensor], point: Mapping, step: float = 1e-5) -> float:
    """Worst relative error between :func:`backward` and central differences.

    ``fn`` maps a dict of named tensors to a scalar tensor.  Relative error
    uses the denominator ``max(|a|, |b|, 1e-8)``.
    """
    if not step > 0:
        raise UsageError(f"gradcheck: step must be positive, got {step}")
    base = {name: np.array(_raw(v), dtype=np.float64) for name, v in point.items()}

    def evaluate(arrays) -> float:
        params = {n: Tensor(a, requires_grad=True) for n, a in arrays.items()}
        val = fn(params)
        v = float(as_tensor(val).data.reshape(-1)[0])
        if not np.isfinite(v):
            raise NumericError(f"gradcheck: function value is not finite ({v})")
        return v

    params = {n: Tensor(a.copy(), requires_grad=True) for n, a in base.items()}
    root = as_tensor(fn(params))
    if not np.all(np.isfinite(root.data)):
        raise NumericError("gradcheck: function value is not finite")
    analytic = backward(root, params)

    worst = 0.0
    for name, arr in base.items():
        a_grad = analytic[name].data.reshape(-1)
        for i in range(arr.size):
            plus = {n: a.copy() for n, a in base.items()}
            minus = {n: a.copy() for n, a in base.items()}
            plus[name].reshape(-1)[i] += step
            minus[name].reshape(-1)[i] -= step
            numeric = (evaluate(plus) - evaluate(minus)) / (2 * step)
            a = float(a_grad[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst


def _raw(v):
    return v.data if isinstance(v, Tensor) else v
