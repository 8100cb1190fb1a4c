"""Dense tensors with reverse-mode automatic differentiation.

Operations are recorded on a define-by-run tape as they execute. Calling
:func:`backward` on a scalar walks the tape once, in reverse recording order,
and accumulates gradients into every reachable leaf with ``requires_grad``.
The tape is then consumed; a second ``backward`` on a tensor from the same
recording raises :class:`TapeError`.

All buffers are contiguous, row-major ``float64`` arrays unless the process
was started with ``DISENT_FLOAT32=1``.
"""
from __future__ import annotations

import contextlib
import os
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float32 if os.environ.get("DISENT_FLOAT32", "0") == "1" else np.float64

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """A forward operation produced NaN or Inf."""


class TapeError(RuntimeError):
    """The tape is in a state that forbids the requested operation."""


class Tape:
    """Ordered record of primitive applications for one backward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.generation = 0
        self.enabled = True

    def __len__(self):
        return len(self.nodes)

    def reset(self):
        self.nodes = []
        self.generation += 1


class _Node:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op, inputs, output, backward):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


_TAPE = Tape()

# Optional observer of piecewise-linear ops, used by the gradient checker.
_kink_monitor: list | None = None


def get_tape() -> Tape:
    return _TAPE


@contextlib.contextmanager
def no_grad():
    """Disable recording inside the block."""
    prev = _TAPE.enabled
    _TAPE.enabled = False
    try:
        yield
    finally:
        _TAPE.enabled = prev


class Tensor:
    """N-dimensional float array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "_gen", "_logits", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE, copy=True, order="C")
        if arr.ndim and 0 in arr.shape:
            raise ShapeError(f"tensor dimensions must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._node = None
        self._gen = -1
        self._logits = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t._node = None
        t._gen = -1
        t._logits = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        if self.grad is not None:
            self.grad.fill(0.0)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=DTYPE))


def _check_finite(arr: np.ndarray, op: str):
    # a sum is NaN/Inf whenever any element is
    if not np.isfinite(arr.sum()):
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"{op} produced non-finite values")


def _record(op: str, out_arr: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    _check_finite(out_arr, op)
    out = Tensor._wrap(out_arr)
    if _TAPE.enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        node = _Node(op, tuple(inputs), out, backward_fn)
        _TAPE.nodes.append(node)
        out._node = node
        out._gen = _TAPE.generation
    return out


def backward(loss: Tensor):
    """Populate ``.grad`` of every reachable leaf with d(loss)/d(leaf).

    Gradients accumulate into existing buffers, so several backward passes
    before an optimizer step sum their contributions.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        if loss.requires_grad:
            # loss is itself a leaf
            _accumulate_leaf(loss, np.ones_like(loss.data))
            return
        raise TapeError("loss does not depend on any tensor that requires grad")
    if loss._gen != _TAPE.generation:
        raise TapeError("tape already consumed by a previous backward(); rebuild the graph")
    if not _TAPE.nodes:
        raise TapeError("tape is empty")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    nodes = _TAPE.nodes
    try:
        for node in reversed(nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if t._node is None:
                    _accumulate_leaf(t, gi)
                else:
                    key = id(t)
                    prev = grads.get(key)
                    grads[key] = gi if prev is None else prev + gi
    finally:
        _TAPE.reset()


def _accumulate_leaf(t: Tensor, g: np.ndarray):
    if g.shape != t.data.shape:
        g = g.reshape(t.data.shape)
    if t.grad is None:
        t.grad = np.array(g, dtype=DTYPE, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(a: tuple, b: tuple, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a} and {b}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return _record("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape
    return _record("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return _record("mul", ad * bd, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (_unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None)

    return _record("div", out, (a, b), bw)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record("scale", x.data * c, (x,), lambda g: (g * c,))


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _record("exp", out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    if (xd <= 0).any():
        raise ValueError("log requires strictly positive input")
    return _record("log", np.log(xd), (x,), lambda g: (g / xd,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    if _kink_monitor is not None:
        _kink_monitor.append(mask)
    return _record("relu", x.data * mask, (x,), lambda g: (g * mask,))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    mask = x.data > 0
    if _kink_monitor is not None:
        _kink_monitor.append(mask)
    factor = np.where(mask, 1.0, slope).astype(DTYPE, copy=False)
    return _record("leaky_relu", x.data * factor, (x,), lambda g: (g * factor,))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _softplus(v: np.ndarray) -> np.ndarray:
    return np.maximum(v, 0.0) + np.log1p(np.exp(-np.abs(v)))


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)
    res = _record("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))
    # lets probability-space losses switch to the stable logit form
    res._logits = x
    return res


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _record("tanh", out, (x,), lambda g: (g * (1.0 - out * out),))


def softplus(x: Tensor) -> Tensor:
    xd = x.data
    return _record("softplus", _softplus(xd), (x,), lambda g: (g * _sigmoid(xd),))


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    xd = x.data
    inside = (xd >= lo) & (xd <= hi)
    return _record("clamp", np.clip(xd, lo, hi), (x,), lambda g: (g * inside,))


# ---------------------------------------------------------------- shape ops

def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {src} into {shape}") from None
    return _record("reshape", np.ascontiguousarray(out), (x,), lambda g: (g.reshape(src),))


def getitem(x: Tensor, index) -> Tensor:
    src = x.shape
    out = np.ascontiguousarray(x.data[index])

    idx = index if isinstance(index, tuple) else (index,)
    fancy = any(isinstance(i, (np.ndarray, list)) for i in idx)

    def bw(g):
        full = np.zeros(src, dtype=g.dtype)
        if fancy:
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return _record("getitem", out, (x,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {[t.shape for t in tensors]}: {exc}") from None
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record("concat", out, tensors, bw)


def tsum(x: Tensor, axis=None) -> Tensor:
    src = x.shape
    out = np.asarray(x.data.sum(axis=axis), dtype=DTYPE)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _record("sum", out, (x,), bw)


def mean(x: Tensor, axis=None) -> Tensor:
    src = x.shape
    out = np.asarray(x.data.mean(axis=axis), dtype=DTYPE)
    n = x.size / max(out.size, 1)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, src).copy(),)

    return _record("mean", out, (x,), bw)


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        return (g @ bd.T if a.requires_grad else None,
                ad.T @ g if b.requires_grad else None)

    return _record("matmul", ad @ bd, (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with weight laid out as (out_features, in_features)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out += bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        grads = [g @ wd if x.requires_grad else None,
                 g.T @ xd if weight.requires_grad else None]
        if bias is not None:
            grads.append(g.sum(axis=0) if bias.requires_grad else None)
        return grads

    return _record("linear", out, inputs, bw)


def embedding(table: Tensor, ids) -> Tensor:
    """Rows of ``table`` selected by integer ``ids``."""
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise TypeError("embedding ids must be integers")
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise IndexError(f"label id out of range [0, {n}): {ids.min()}..{ids.max()}")
    src = table.shape

    def bw(g):
        full = np.zeros(src, dtype=g.dtype)
        np.add.at(full, ids, g)
        return (full,)

    return _record("embedding", table.data[ids], (table,), bw)


# ---------------------------------------------------------------- convolution

def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Patches of padded NCHW ``xp`` as a (kh*kw*C, N*Ho*Wo) matrix, rows ordered (kh, kw, C)."""
    n, c = xp.shape[:2]
    xc = xp.transpose(1, 0, 2, 3)
    # split into stride phases once so every patch copy reads unit-stride rows
    phases = {}
    for a in range(min(stride, kh)):
        for b in range(min(stride, kw)):
            phases[a, b] = np.ascontiguousarray(xc[:, :, a::stride, b::stride])
    cols = np.empty((kh, kw, c, n, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            ph = phases[i % stride, j % stride]
            r, q = i // stride, j // stride
            cols[i, j] = ph[:, :, r : r + ho, q : q + wo]
    return cols.reshape(kh * kw * c, n * ho * wo)


def _col2im(cols: np.ndarray, shape: tuple, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Scatter-add inverse of :func:`_im2col`; returns an NCHW view of ``shape``."""
    n, c, hp, wp = shape
    cols = cols.reshape(kh, kw, c, n, ho, wo)
    out = np.zeros((c, n, hp, wp), dtype=cols.dtype)
    for a in range(min(stride, kh)):
        for b in range(min(stride, kw)):
            hq = (hp - a + stride - 1) // stride
            wq = (wp - b + stride - 1) // stride
            acc = np.zeros((c, n, hq, wq), dtype=cols.dtype)
            for i in range(a, kh, stride):
                for j in range(b, kw, stride):
                    r, q = i // stride, j // stride
                    acc[:, :, r : r + ho, q : q + wo] += cols[i, j]
            out[:, :, a::stride, b::stride] = acc
    return out.transpose(1, 0, 2, 3)


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    n, c, h, w = x.shape
    out = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=x.dtype)
    out[:, :, p : p + h, p : p + w] = x
    return out


def _to_cnhw(a: np.ndarray) -> np.ndarray:
    return a.transpose(1, 0, 2, 3).reshape(a.shape[1], -1)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation over NCHW input with (Cout, Cin, kh, kw) weights."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ShapeError(f"conv2d: weight {weight.shape} expects {wcin} input channels, input {x.shape} has {cin}")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be positive and padding non-negative")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {x.shape} (padding {padding})")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    xp = _pad(x.data, padding)
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    wk = weight.data.transpose(0, 2, 3, 1).reshape(cout, -1)
    out = wk @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(cout, n, ho, wo).transpose(1, 0, 2, 3))
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gm = _to_cnhw(g)
        gx = gw = None
        if x.requires_grad:
            gxp = _col2im(wk.T @ gm, xp.shape, kh, kw, stride, ho, wo)
            if padding:
                gxp = gxp[:, :, padding : padding + h, padding : padding + w]
            gx = np.ascontiguousarray(gxp)
        if weight.requires_grad:
            gw = np.ascontiguousarray((gm @ cols.T).reshape(cout, kh, kw, cin).transpose(0, 3, 1, 2))
        grads = [gx, gw]
        if bias is not None:
            grads.append(gm.sum(axis=1) if bias.requires_grad else None)
        return grads

    return _record("conv2d", out, inputs, bw)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
                     padding: int = 0, output_padding: int = 0) -> Tensor:
    """Adjoint of :func:`conv2d`; weight laid out as (Cin, Cout, kh, kw).

    Output side is ``(H - 1) * stride - 2 * padding + k + output_padding``.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv_transpose2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    n, cin, h, w = x.shape
    wcin, cout, kh, kw = weight.shape
    if wcin != cin:
        raise ShapeError(f"conv_transpose2d: weight {weight.shape} expects {wcin} input channels, input {x.shape} has {cin}")
    if stride < 1 or padding < 0 or output_padding < 0:
        raise ValueError("stride must be positive, padding and output_padding non-negative")
    ho = (h - 1) * stride - 2 * padding + kh + output_padding
    wo = (w - 1) * stride - 2 * padding + kw + output_padding
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv_transpose2d: empty output for input {x.shape}")
    # full (uncropped) canvas; grows when output_padding exceeds padding
    hf = max((h - 1) * stride + kh, padding + ho)
    wf = max((w - 1) * stride + kw, padding + wo)
    xm = _to_cnhw(x.data)
    wt = weight.data.transpose(2, 3, 1, 0).reshape(-1, cin)
    full = _col2im(wt @ xm, (n, cout, hf, wf), kh, kw, stride, h, w)
    out = np.ascontiguousarray(full[:, :, padding : padding + ho, padding : padding + wo])
    if bias is not None:
        out += bias.data.reshape(1, cout, 1, 1)
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gfull = np.zeros((n, cout, hf, wf), dtype=g.dtype)
        gfull[:, :, padding : padding + ho, padding : padding + wo] = g
        gcols = _im2col(gfull, kh, kw, stride, h, w)
        gx = gw = None
        if x.requires_grad:
            gx = np.ascontiguousarray((wt.T @ gcols).reshape(cin, n, h, w).transpose(1, 0, 2, 3))
        if weight.requires_grad:
            gw = np.ascontiguousarray((gcols @ xm.T).reshape(kh, kw, cout, cin).transpose(3, 2, 0, 1))
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)) if bias.requires_grad else None)
        return grads

    return _record("conv_transpose2d", out, inputs, bw)


# ---------------------------------------------------------------- normalization

def batch_norm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
                 training: bool = True, update_running: bool = True, momentum: float = BN_MOMENTUM,
                 eps: float = BN_EPS) -> Tensor:
    """Per-channel normalization over (N, H, W).

    In training mode the batch statistics are used and, if ``update_running``,
    the running moments are updated in place (unbiased variance).
    """
    if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"batch_norm2d: input {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    n, c, h, w = x.shape
    m = n * h * w
    gd = gamma.data.reshape(1, c, 1, 1)
    xd = x.data
    if training:
        if m < 2:
            raise ValueError("batch_norm2d in training mode needs at least 2 values per channel")
        mu = xd.mean(axis=(0, 2, 3), keepdims=True)
        xc = xd - mu
        var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        if update_running:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu.reshape(c)
            running_var *= 1.0 - momentum
            running_var += momentum * var.reshape(c) * (m / (m - 1))

        def bw(g):
            gb = g.sum(axis=(0, 2, 3))
            gg = (g * xhat).sum(axis=(0, 2, 3))
            gx = None
            if x.requires_grad:
                gx = (gd * inv / m) * (m * g - gb.reshape(1, c, 1, 1) - xhat * gg.reshape(1, c, 1, 1))
            return gx, gg, gb
    else:
        inv = 1.0 / np.sqrt(running_var.reshape(1, c, 1, 1) + eps)
        xhat = (xd - running_mean.reshape(1, c, 1, 1)) * inv

        def bw(g):
            return g * gd * inv, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    out = xhat * gd + beta.data.reshape(1, c, 1, 1)
    return _record("batch_norm2d", out, (x, gamma, beta), bw)


# ---------------------------------------------------------------- fused losses

def bce_with_logits(logits: Tensor, target) -> Tensor:
    """Elementwise Bernoulli negative log-likelihood from logits."""
    target = as_tensor(target)
    if target.shape != logits.shape:
        raise ShapeError(f"bce: logits {logits.shape} vs target {target.shape}")
    ld, td = logits.data, target.data
    out = _softplus(ld) - td * ld
    return _record("bce_with_logits", out, (logits,), lambda g: (g * (_sigmoid(ld) - td),))


def log_softmax(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"log_softmax expects (N, K), got {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    p = np.exp(out)
    return _record("log_softmax", out, (x,), lambda g: (g - p * g.sum(axis=1, keepdims=True),))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels)
    lp = log_softmax(logits)
    n = labels.shape[0]
    picked = getitem(lp, (np.arange(n), labels))
    return scale(tsum(picked), -1.0 / n)


# ---------------------------------------------------------------- gradient checking

class GradCheckReport:
    """Per-parameter maximum relative error of analytic vs numeric gradients."""

    def __init__(self, tolerance: float):
        self.tolerance = tolerance
        self.max_rel_error: dict[str, float] = {}
        self.checked: dict[str, int] = {}
        self.skipped: dict[str, int] = {}
        self.failures: list[str] = []
        self.floor = 0.0

    @property
    def ok(self) -> bool:
        return not self.failures and all(e < self.tolerance for e in self.max_rel_error.values())

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    def lines(self) -> list[str]:
        out = []
        for name, err in self.max_rel_error.items():
            status = "ok" if err < self.tolerance else "FAIL"
            out.append(f"{name}: max_rel_err={err:.3e} checked={self.checked[name]} "
                       f"skipped={self.skipped[name]} {status}")
        out.extend(f"failure: {f}" for f in self.failures)
        return out

    def __str__(self):
        return "\n".join(self.lines())


def _eval_with_kinks(builder: Callable[[], Tensor]):
    global _kink_monitor
    _kink_monitor = []
    try:
        with no_grad():
            val = builder().item()
        return val, _kink_monitor
    finally:
        _kink_monitor = None


def _same_kinks(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def check_gradients(builder: Callable[[], Tensor], params: dict[str, Tensor] | Iterable[Tensor],
                    tolerance: float = 1e-5, h: float = 1e-5, floor: float | None = None,
                    max_entries: int | None = None, seed: int = 0) -> GradCheckReport:
    """Compare backpropagated gradients with central finite differences.

    ``builder`` must deterministically rebuild the scalar loss from the current
    parameter values. The relative error of an entry is
    ``|a - n| / max(|a|, |n|, floor)``. The default ``floor`` is the larger of
    1e-6 and the rounding resolution of the difference quotient
    (``10 * eps * |loss| / h``) divided by ``tolerance``, so gradients that are
    exactly zero (e.g. biases feeding a normalization) are judged on the
    absolute scale the quotient can resolve. Entries whose perturbation flips the
    active side of any relu/leaky_relu (a kink crossing) are skipped; with
    ``h`` at its default this covers every input within 1e-6 of a breakpoint.
    """
    if not isinstance(params, dict):
        params = {p.name or f"param{i}": p for i, p in enumerate(params)}
    report = GradCheckReport(tolerance)
    rng = np.random.default_rng(seed)

    for p in params.values():
        p.grad = None
    try:
        loss = builder()
        base_val = loss.item()
        backward(loss)
    except (NonFiniteError, FloatingPointError, ValueError) as exc:
        report.failures.append(f"forward/backward failed: {exc}")
        return report
    if not np.isfinite(base_val):
        report.failures.append("non-finite loss")
        return report
    _, base_kinks = _eval_with_kinks(builder)
    if floor is None:
        resolution = 10.0 * np.finfo(DTYPE).eps * max(abs(base_val), 1.0) / h
        floor = max(1e-6, resolution / tolerance)
    report.floor = floor

    for name, p in params.items():
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        worst, checked, skipped = 0.0, 0, 0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            try:
                fp, kp = _eval_with_kinks(builder)
                flat[i] = orig - h
                fm, km = _eval_with_kinks(builder)
            except (NonFiniteError, FloatingPointError) as exc:
                report.failures.append(f"{name}[{i}]: {exc}")
                continue
            finally:
                flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                report.failures.append(f"{name}[{i}]: non-finite perturbed loss")
                continue
            if not (_same_kinks(kp, base_kinks) and _same_kinks(km, base_kinks)):
                skipped += 1
                continue
            num = (fp - fm) / (2.0 * h)
            a = analytic.reshape(-1)[i]
            if not np.isfinite(a):
                report.failures.append(f"{name}[{i}]: non-finite analytic gradient")
                continue
            rel = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, rel)
            checked += 1
        report.max_rel_error[name] = worst
        report.checked[name] = checked
        report.skipped[name] = skipped
    for p in params.values():
        p.grad = None
    return report
