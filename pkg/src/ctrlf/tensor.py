"""Dense numpy-backed tensor with reverse-mode automatic differentiation.

Every op builds a node holding its parents and a closure that pushes the
output gradient back to them.  ``Tensor.backward`` walks the graph in
reverse topological order, so a tensor consumed twice receives the sum of
both contributions.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class ContractError(RuntimeError):
    """An op was called outside its precondition (e.g. non-scalar backward)."""


_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True
_TAPE: list | None = None
_SCOPE: list[str] = []
_MAC_COUNTER: list[int] | None = None
_DETERMINISTIC = False


def get_default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily switch the dtype new tensors are created with."""
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


def set_deterministic(flag: bool) -> None:
    # Every op here is single-threaded numpy with a fixed reduction order, so
    # results are already bitwise reproducible; the flag is kept so callers
    # can assert the contract and so checkpoints record it.
    global _DETERMINISTIC
    _DETERMINISTIC = bool(flag)


def is_deterministic() -> bool:
    return _DETERMINISTIC


class Record:
    """One entry of the computation record."""

    __slots__ = ("op", "inputs", "output", "scope", "saved")

    def __init__(self, op, inputs, output, scope, saved):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.scope = scope
        self.saved = saved

    def __repr__(self):
        return f"Record({self.op}, in={self.inputs}, out={self.output}, scope={'/'.join(self.scope)})"


@contextlib.contextmanager
def record():
    """Collect a :class:`Record` for every op executed inside the block.

    Records appear in execution order, which is a topological order of the
    graph (an op can only consume tensors that already exist).
    """
    global _TAPE
    prev = _TAPE
    tape: list[Record] = []
    _TAPE = tape
    try:
        yield tape
    finally:
        _TAPE = prev


@contextlib.contextmanager
def scope(name: str):
    _SCOPE.append(name)
    try:
        yield
    finally:
        _SCOPE.pop()


def recording() -> bool:
    return _TAPE is not None


@contextlib.contextmanager
def count_macs():
    """Tally multiply-accumulates of matmul and convolution ops in the block.

    Yields a one-element list whose entry holds the running total.
    """
    global _MAC_COUNTER
    prev = _MAC_COUNTER
    counter = [0]
    _MAC_COUNTER = counter
    try:
        yield counter
    finally:
        _MAC_COUNTER = prev
        if prev is not None:
            prev[0] += counter[0]


def _add_macs(n: int) -> None:
    if _MAC_COUNTER is not None:
        _MAC_COUNTER[0] += int(n)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """An n-dimensional float array that can track gradients.

    ``data`` is treated as immutable once the tensor participates in a graph;
    only ``grad`` is mutated (by accumulation during backward).
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, _parents=(), _op: str = "leaf"):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            # float ndarrays keep their precision; python numbers/lists and ints take the default
            kind = data.dtype.type if isinstance(data, np.ndarray) else None
            dtype = kind if kind in (np.float32, np.float64) else _DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = _op

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
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

    def __len__(self):
        return self.data.shape[0]

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag}, op={self._op})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype.type)

    def zero_grad(self) -> None:
        self.grad = None

    # -- autodiff ---------------------------------------------------------
    def backward(self, grad=None) -> None:
        """Populate ``.grad`` on every upstream tensor that requires it.

        Gradients accumulate: calling twice without zeroing doubles them.
        """
        if grad is None:
            if self.data.size != 1:
                raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype).reshape(self.shape)

        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad and not node._parents:
                node.grad = g.copy() if node.grad is None else node.grad + g
            elif node.requires_grad:
                node.grad = g  # intermediates: final upstream gradient, shared read-only
            if node._backward is not None:
                for parent, pg in node._backward(g):
                    if pg is None or not parent.requires_grad:
                        continue
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    @property
    def T(self):
        return transpose(self, None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)


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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None:
        dtype = _DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype), dtype=dtype)


def _wrap(data: np.ndarray, parents: Sequence[Tensor], backward, op: str, saved=()) -> Tensor:
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, dtype=data.dtype.type, _op=op)
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
    if _TAPE is not None:
        _TAPE.append(Record(op, tuple(id(p) for p in parents), id(out), tuple(_SCOPE), saved))
    return out


def _coerce(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype), dtype=a.dtype.type)
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype), dtype=b.dtype.type)
    elif not isinstance(a, Tensor):
        a, b = as_tensor(a), as_tensor(b)
    return a, b


# -- elementwise arithmetic ---------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    out = a.data + b.data

    def backward(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape)))

    return _wrap(out, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    out = a.data - b.data

    def backward(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(-g, b.shape)))

    return _wrap(out, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    out = a.data * b.data

    def backward(g):
        return (
            (a, _unbroadcast(g * b.data, a.shape) if a.requires_grad else None),
            (b, _unbroadcast(g * a.data, b.shape) if b.requires_grad else None),
        )

    return _wrap(out, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _coerce(a, b)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ((a, ga), (b, gb))

    return _wrap(out, (a, b), backward, "div")


def neg(a: Tensor) -> Tensor:
    return _wrap(-a.data, (a,), lambda g: ((a, -g),), "neg")


def power(a: Tensor, p: float) -> Tensor:
    if isinstance(p, Tensor):
        raise TypeError("only scalar exponents are supported")
    out = a.data ** p

    def backward(g):
        return ((a, g * p * a.data ** (p - 1)),)

    return _wrap(out, (a,), backward, "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _wrap(out, (a,), lambda g: ((a, g * out),), "exp")


def log(a: Tensor) -> Tensor:
    return _wrap(np.log(a.data), (a,), lambda g: ((a, g / a.data),), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _wrap(out, (a,), lambda g: ((a, g * 0.5 / out),), "sqrt")


def tabs(a: Tensor) -> Tensor:
    """Absolute value; the derivative at exactly zero is taken as 0."""
    return _wrap(np.abs(a.data), (a,), lambda g: ((a, g * np.sign(a.data)),), "abs")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _wrap(out, (a,), lambda g: ((a, g * out * (1.0 - out)),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _wrap(out, (a,), lambda g: ((a, g * (1.0 - out * out)),), "tanh")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """GeLU, tanh approximation: 0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
        return ((a, g * d),)

    return _wrap(out.astype(x.dtype, copy=False), (a,), backward, "gelu")


# -- reductions -----------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return ((a, np.broadcast_to(g, a.shape).copy()),)

    return _wrap(np.asarray(out), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return ((a, np.broadcast_to(g / n, a.shape).copy()),)

    return _wrap(np.asarray(out, dtype=a.dtype), (a,), backward, "mean")


def tmax(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    out = a.data.max(axis=axes, keepdims=True)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        mask = a.data == out
        mask = mask / mask.sum(axis=axes, keepdims=True)
        return ((a, g * mask),)

    res = out if keepdims else np.squeeze(out, axis=axes)
    return _wrap(np.asarray(res), (a,), backward, "max")


# -- shape ops ----------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return _wrap(out, (a,), lambda g: ((a, g.reshape(a.shape)),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(ax % a.ndim for ax in axes)
    inv = tuple(np.argsort(axes))
    out = a.data.transpose(axes)
    return _wrap(out, (a,), lambda g: ((a, g.transpose(inv)),), "transpose")


def broadcast_to(a: Tensor, shape) -> Tensor:
    out = np.broadcast_to(a.data, shape)
    return _wrap(out, (a,), lambda g: ((a, _unbroadcast(g, a.shape)),), "broadcast")


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    axis = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(t.ndim) if i != axis
        ):
            raise ShapeError(
                f"concat along axis {axis}: shapes {[x.shape for x in tensors]} disagree off-axis"
            )
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        parts = []
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            parts.append((t, g[tuple(idx)]))
        return parts

    return _wrap(out, tensors, backward, "concat")


def getitem(a: Tensor, idx) -> Tensor:
    out = a.data[idx]

    basic = all(isinstance(i, (slice, int, type(Ellipsis))) or i is None
                for i in (idx if isinstance(idx, tuple) else (idx,)))

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return ((a, full),)

    return _wrap(np.array(out, copy=True), (a,), backward, "slice")


def pad2d(a: Tensor, pad: int, mode: str = "constant") -> Tensor:
    """Zero-pad the last two axes by ``pad`` on each side."""
    if pad == 0:
        return a
    width = [(0, 0)] * (a.ndim - 2) + [(pad, pad), (pad, pad)]
    out = np.pad(a.data, width, mode=mode)

    def backward(g):
        return ((a, g[..., pad:-pad, pad:-pad]),)

    return _wrap(out, (a,), backward, "pad")


# -- matmul / softmax ------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = _coerce(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)
    _add_macs(out.size * a.shape[-1])

    def backward(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ((a, ga), (b, gb))

    return _wrap(out, (a, b), backward, "matmul")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` with max-subtraction for stability."""
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((a, out * (g - dot)),)

    return _wrap(out, (a,), backward, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g):
        p = np.exp(out)
        return ((a, g - p * g.sum(axis=axis, keepdims=True)),)

    return _wrap(out, (a,), backward, "log_softmax")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``softmax(logits)``."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy expects (B, C) logits and (B,) labels, got {logits.shape}, {labels.shape}")
    logp = log_softmax(logits, axis=-1)
    picked = getitem(logp, (np.arange(len(labels)), labels))
    return neg(mean(picked))


# -- convolution ------------------------------------------------------------------

def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """2-D cross-correlation of ``x`` (B, C, H, W) with ``w`` (O, C/groups, k, k)."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects rank-4 input and weight, got {x.shape} and {w.shape}")
    B, C, H, W = x.shape
    O, Cg, k, k2 = w.shape
    if k != k2:
        raise ShapeError(f"only square kernels are supported, got {w.shape}")
    if C % groups or O % groups or C // groups != Cg:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape}, weight {w.shape}, groups={groups}")
    Ho = conv_output_size(H, k, stride, padding)
    Wo = conv_output_size(W, k, stride, padding)
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d input {x.shape} smaller than kernel {k} after padding {padding}")
    _add_macs(B * O * Ho * Wo * Cg * k * k)

    xd = x.data
    wd = w.data
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    hs = stride * (Ho - 1) + 1
    ws = stride * (Wo - 1) + 1

    def window(i, j):
        return xp[:, :, i:i + hs:stride, j:j + ws:stride]

    depthwise = groups == C and Cg == 1
    if k == 1 and groups == 1:
        xs = window(0, 0)
        out = np.einsum("bchw,oc->bohw", xs, wd[:, :, 0, 0], optimize=True)
    elif depthwise:
        mult = O // C
        out = np.zeros((B, O, Ho, Wo), dtype=xd.dtype)
        wv = wd[:, 0].reshape(C, mult, k, k)
        for i in range(k):
            for j in range(k):
                xs = window(i, j)
                out += (xs[:, :, None] * wv[None, :, :, i, j, None, None]).reshape(B, O, Ho, Wo)
    else:
        cols = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
        cols = cols.reshape(B, groups, Cg, Ho, Wo, k, k)
        wg = wd.reshape(groups, O // groups, Cg, k, k)
        out = np.einsum("bgchwij,gocij->bgohw", cols, wg, optimize=True).reshape(B, O, Ho, Wo)
    out = np.ascontiguousarray(out, dtype=xd.dtype)

    def backward(g):
        gx = gw = None
        need_x, need_w = x.requires_grad, w.requires_grad
        if k == 1 and groups == 1:
            xs = window(0, 0)
            if need_w:
                gw = np.einsum("bohw,bchw->oc", g, xs, optimize=True)[:, :, None, None]
            if need_x:
                gxp = np.zeros_like(xp)
                gxp[:, :, 0:hs:stride, 0:ws:stride] = np.einsum("bohw,oc->bchw", g, wd[:, :, 0, 0], optimize=True)
        elif depthwise:
            mult = O // C
            gv = g.reshape(B, C, mult, Ho, Wo)
            wv = wd[:, 0].reshape(C, mult, k, k)
            gwv = np.zeros_like(wv)
            gxp = np.zeros_like(xp) if need_x else None
            for i in range(k):
                for j in range(k):
                    xs = window(i, j)
                    if need_w:
                        gwv[:, :, i, j] = np.einsum("bchw,bcmhw->cm", xs, gv, optimize=True)
                    if need_x:
                        gxp[:, :, i:i + hs:stride, j:j + ws:stride] += (gv * wv[None, :, :, i, j, None, None]).sum(axis=2)
            if need_w:
                gw = gwv.reshape(O, 1, k, k)
        else:
            gg = g.reshape(B, groups, O // groups, Ho, Wo)
            wg = wd.reshape(groups, O // groups, Cg, k, k)
            if need_w:
                cols = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
                cols = cols.reshape(B, groups, Cg, Ho, Wo, k, k)
                gw = np.einsum("bgchwij,bgohw->gocij", cols, gg, optimize=True).reshape(wd.shape)
            if need_x:
                gxp = np.zeros_like(xp)
                for i in range(k):
                    for j in range(k):
                        contrib = np.einsum("bgohw,goc->bgchw", gg, wg[:, :, :, i, j], optimize=True)
                        gxp[:, :, i:i + hs:stride, j:j + ws:stride] += contrib.reshape(B, C, Ho, Wo)
        if need_x:
            gx = gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp
        return ((x, gx), (w, None if gw is None else gw.astype(wd.dtype, copy=False)))

    return _wrap(out, (x, w), backward, "conv2d")
