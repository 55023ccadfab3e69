"""Dense float64 tensors with reverse-mode automatic differentiation.

Define-by-run tape: every operation returns a new Tensor that remembers its
parents and a vector-Jacobian closure. ``Tensor.backward()`` walks the trace
in reverse topological order exactly once. Only the broadcasting the model
actually needs is implemented.
"""

from __future__ import annotations

import contextlib
from typing import Callable, NamedTuple, Sequence

import numpy as np

DTYPE = np.float64

_CHECKED = False


def set_default_dtype(dtype) -> None:
    """Set the element type for newly created tensors.

    float64 (the default) is required for the finite-difference verification
    paths; float32 roughly halves training time. Switch before building a
    model, not in the middle of a graph.
    """
    global DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    DTYPE = dtype


@contextlib.contextmanager
def default_dtype(dtype):
    global DTYPE
    prev = DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        DTYPE = prev


class CheckedModeError(ValueError):
    """Non-finite values were produced while checked mode is on."""


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ContractError(ValueError):
    """An operation was called outside its contract."""


def set_checked(flag: bool) -> None:
    """Globally enable/disable NaN/Inf rejection at tensor creation."""
    global _CHECKED
    _CHECKED = bool(flag)


def is_checked() -> bool:
    return _CHECKED


@contextlib.contextmanager
def checked(flag: bool = True):
    """Temporarily switch checked mode."""
    global _CHECKED
    prev = _CHECKED
    _CHECKED = bool(flag)
    try:
        yield
    finally:
        _CHECKED = prev


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Skip tape construction inside the block (cheap inference)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class MacCounter:
    """Accumulates multiply-accumulate counts of matmuls executed while active."""

    def __init__(self):
        self.total = 0


_MAC_COUNTERS: list[MacCounter] = []


@contextlib.contextmanager
def count_macs():
    counter = MacCounter()
    _MAC_COUNTERS.append(counter)
    try:
        yield counter
    finally:
        _MAC_COUNTERS.remove(counter)


def _record_macs(n: int) -> None:
    for counter in _MAC_COUNTERS:
        counter.total += n


class Tensor:
    """A dense float64 array plus optional gradient buffer and tape linkage."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, *, op: str = "leaf",
                 _parents: tuple = (), _vjp: Callable | None = None):
        arr = np.asarray(data, dtype=DTYPE)
        if _CHECKED and not np.all(np.isfinite(arr)):
            raise CheckedModeError(f"non-finite values in tensor from op '{op}'")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self._parents = _parents
        self._vjp = _vjp

    # -- inspection ------------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, op="detach")

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, grad={self.grad is not None})"

    # -- backward pass ---------------------------------------------------

    def backward(self) -> None:
        if self.data.size != 1:
            raise ContractError("backward() requires a scalar tensor")
        graph = Graph.trace(self)
        self.grad = np.ones_like(self.data)
        for rec in reversed(graph.records):
            out = rec.output
            if out.grad is None:
                continue
            grads = rec.vjp(out.grad)
            for parent, g in zip(rec.inputs, grads):
                if g is None or not parent.requires_grad:
                    continue
                # gradients are accumulated without in-place writes, so vjps
                # may hand out views and shared buffers
                if parent.grad is None:
                    parent.grad = g
                else:
                    parent.grad = parent.grad + g

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_(self, axis=axis, keepdims=keepdims)


class OpRecord(NamedTuple):
    inputs: tuple
    output: Tensor
    vjp: Callable


class Graph:
    """Topologically ordered list of the op records behind one output tensor."""

    def __init__(self, records: list[OpRecord]):
        self.records = records

    @classmethod
    def trace(cls, root: Tensor) -> "Graph":
        records: list[OpRecord] = []
        visited: set[int] = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                if node._vjp is not None:
                    records.append(OpRecord(node._parents, node, node._vjp))
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        return cls(records)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _needs_grad(*tensors: Tensor) -> bool:
    return _GRAD_ENABLED and any(t.requires_grad for t in tensors)


def make_op(out_data, parents: Sequence[Tensor], vjp: Callable, op: str) -> Tensor:
    """Create the result tensor of an op, attaching tape linkage when needed."""
    if _needs_grad(*parents):
        return Tensor(out_data, requires_grad=True, op=op,
                      _parents=tuple(parents), _vjp=vjp)
    return Tensor(out_data, op=op)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcasted gradient back down to the original operand shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise arithmetic ------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_op(a.data + b.data, (a, b), vjp, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_op(a.data - b.data, (a, b), vjp, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_op(a.data * b.data, (a, b), vjp, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    def vjp(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return make_op(a.data / b.data, (a, b), vjp, "div")


def neg(a: Tensor) -> Tensor:
    return make_op(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return make_op(a.data * s, (a,), lambda g: (g * s,), "scale")


def pow_(a: Tensor, p: float) -> Tensor:
    p = float(p)

    def vjp(g):
        return (g * p * np.power(a.data, p - 1.0),)

    return make_op(np.power(a.data, p), (a,), vjp, "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_op(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return make_op(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def vjp(g):
        return (g * mask,)

    return make_op(a.data * mask, (a,), vjp, "relu")


def sigmoid(a: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-a.data))
    return make_op(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def abs_(a: Tensor) -> Tensor:
    sign = np.sign(a.data)

    def vjp(g):
        return (g * sign,)

    return make_op(np.abs(a.data), (a,), vjp, "abs")


def maximum(a: Tensor, b: Tensor) -> Tensor:
    # subgradient convention: ties route to the first operand
    take_a = a.data >= b.data

    def vjp(g):
        return (_unbroadcast(g * take_a, a.shape),
                _unbroadcast(g * ~take_a, b.shape))

    return make_op(np.maximum(a.data, b.data), (a, b), vjp, "maximum")


def minimum(a: Tensor, b: Tensor) -> Tensor:
    take_a = a.data <= b.data

    def vjp(g):
        return (_unbroadcast(g * take_a, a.shape),
                _unbroadcast(g * ~take_a, b.shape))

    return make_op(np.minimum(a.data, b.data), (a, b), vjp, "minimum")


# -- reductions and shape ops -----------------------------------------------


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape),)
        g_exp = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g_exp, a.shape),)

    return make_op(a.data.sum(axis=axis, keepdims=keepdims), (a,), vjp, "sum")


def mean_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for ax in axes:
            n *= a.shape[ax]
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    old = a.shape

    def vjp(g):
        return (g.reshape(old),)

    return make_op(a.data.reshape(shape), (a,), vjp, "reshape")


def transpose(a: Tensor, axes: tuple) -> Tensor:
    inv = np.argsort(axes)

    def vjp(g):
        return (g.transpose(inv),)

    return make_op(a.data.transpose(axes), (a,), vjp, "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    out = np.concatenate([t.data for t in tensors], axis=axis)
    return make_op(out, tensors, vjp, "concat")


def broadcast_to(a: Tensor, shape: tuple) -> Tensor:
    def vjp(g):
        return (_unbroadcast(g, a.shape),)

    return make_op(np.broadcast_to(a.data, shape).copy(), (a,), vjp, "broadcast_to")


def getitem(a: Tensor, key) -> Tensor:
    def vjp(g):
        da = np.zeros_like(a.data)
        np.add.at(da, key, g)
        return (da,)

    return make_op(a.data[key], (a,), vjp, "getitem")


def take_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows along axis 0; duplicate indices accumulate in backward."""
    idx = np.asarray(idx, dtype=np.intp)

    def vjp(g):
        da = np.zeros_like(a.data)
        np.add.at(da, idx, g)
        return (da,)

    return make_op(a.data[idx], (a,), vjp, "take_rows")


def take_at(a: Tensor, idx: np.ndarray) -> Tensor:
    """Pick one column per row of a rank-2 tensor: out[i] = a[i, idx[i]]."""
    if a.ndim != 2:
        raise DimensionError(f"take_at expects rank-2 input, got {a.shape}")
    idx = np.asarray(idx, dtype=np.intp)
    rows = np.arange(a.shape[0])

    def vjp(g):
        da = np.zeros_like(a.data)
        np.add.at(da, (rows, idx), g)
        return (da,)

    return make_op(a.data[rows, idx], (a,), vjp, "take_at")


def take_hw(a: Tensor, iy: np.ndarray, ix: np.ndarray) -> Tensor:
    """Gather spatial positions of a (..., H, W) tensor: out[..., p] = a[..., iy[p], ix[p]]."""
    iy = np.asarray(iy, dtype=np.intp)
    ix = np.asarray(ix, dtype=np.intp)
    lead = (slice(None),) * (a.ndim - 2)

    def vjp(g):
        da = np.zeros_like(a.data)
        np.add.at(da, lead + (iy, ix), g)
        return (da,)

    return make_op(a.data[lead + (iy, ix)], (a,), vjp, "take_hw")


# -- matmul ------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with stacked leading dims (numpy matmul semantics).

    Supported layouts: a (..., m, k) with b (k, n) or b with identical
    leading dims. Inner extents must agree.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents disagree: {a.shape} x {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul leading dims disagree: {a.shape} x {b.shape}")

    k = a.shape[-1]
    n = b.shape[-1]
    if b.ndim == 2 and a.ndim > 2:
        # single GEMM instead of numpy's stacked-matmul path
        out = (a.data.reshape(-1, k) @ b.data).reshape(a.shape[:-1] + (n,))
    else:
        out = np.matmul(a.data, b.data)
    batch = 1
    for extent in out.shape[:-2]:
        batch *= extent
    _record_macs(batch * a.shape[-2] * k * n)

    def vjp(g):
        da = db = None
        if a.requires_grad:
            if b.ndim == 2:
                da = (g.reshape(-1, n) @ b.data.T).reshape(a.shape)
            else:
                da = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            if b.ndim == 2:
                db = a.data.reshape(-1, k).T @ np.ascontiguousarray(g).reshape(-1, n)
            else:
                db = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return da, db

    return make_op(out, (a, b), vjp, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Fused x @ w + b for a rank-2 weight; w is (in, out)."""
    if b is None:
        return matmul(x, w)
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear inner extents disagree: {x.shape} x {w.shape}")
    k, n = w.shape
    out = x.data.reshape(-1, k) @ w.data
    out += b.data
    out = out.reshape(x.shape[:-1] + (n,))
    _record_macs(out.size // n * k * n)

    def vjp(g):
        dx = dw = db = None
        g2 = np.ascontiguousarray(g).reshape(-1, n)
        if x.requires_grad:
            dx = (g2 @ w.data.T).reshape(x.shape)
        if w.requires_grad:
            dw = x.data.reshape(-1, k).T @ g2
        if b.requires_grad:
            db = g2.sum(axis=0)
        return dx, dw, db

    return make_op(out, (x, w, b), vjp, "linear")


# -- fused numerical ops ------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return make_op(out, (x,), vjp, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def vjp(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return make_op(out, (x,), vjp, "log_softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalization over the last axis with learned scale/shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xhat = x.data - mu
    var = np.einsum("...i,...i->...", xhat, xhat) / x.shape[-1]
    inv = 1.0 / np.sqrt(var + eps)[..., None]
    xhat *= inv
    out = xhat * gamma.data
    out += beta.data
    n = x.shape[-1]

    def vjp(g):
        dgamma = dbeta = dx = None
        if gamma.requires_grad:
            dgamma = (g * xhat).reshape(-1, n).sum(axis=0)
        if beta.requires_grad:
            dbeta = g.reshape(-1, n).sum(axis=0)
        if x.requires_grad:
            gx = g * gamma.data
            dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                        - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return dx, dgamma, dbeta

    return make_op(out, (x, gamma, beta), vjp, "layer_norm")


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, num_heads: int,
                         mask: np.ndarray | None = None) -> Tensor:
    """Fused multi-head attention core.

    q: (G, Tq, C), k/v: (G, Tk, C); mask (G, Tk) with 1 = valid key.
    Returns softmax(q kT / sqrt(d)) v with heads split and re-merged.
    One tape node; the attention weights are kept for the backward pass.
    """
    G, Tq, C = q.shape
    Tk = k.shape[1]
    h = num_heads
    d = C // h
    inv = 1.0 / np.sqrt(d)

    q4 = q.data.reshape(G, Tq, h, d).transpose(0, 2, 1, 3)
    k4 = k.data.reshape(G, Tk, h, d).transpose(0, 2, 1, 3)
    v4 = v.data.reshape(G, Tk, h, d).transpose(0, 2, 1, 3)

    logits = np.matmul(q4, k4.transpose(0, 1, 3, 2))
    logits *= inv
    _record_macs(G * h * Tq * d * Tk)
    if mask is not None:
        logits += np.where(mask > 0, 0.0, -1e30).reshape(G, 1, 1, Tk)
    logits -= logits.max(axis=-1, keepdims=True)
    np.exp(logits, out=logits)
    logits /= logits.sum(axis=-1, keepdims=True)
    attn = logits
    out4 = np.matmul(attn, v4)
    _record_macs(G * h * Tq * Tk * d)
    out = out4.transpose(0, 2, 1, 3).reshape(G, Tq, C)

    def vjp(g):
        g4 = g.reshape(G, Tq, h, d).transpose(0, 2, 1, 3)
        dattn = np.matmul(g4, v4.transpose(0, 1, 3, 2))
        dv4 = np.matmul(attn.transpose(0, 1, 3, 2), g4)
        dlog = (dattn - (dattn * attn).sum(axis=-1, keepdims=True)) * attn
        dlog *= inv
        dq4 = np.matmul(dlog, k4)
        dk4 = np.matmul(dlog.transpose(0, 1, 3, 2), q4)
        dq = dq4.transpose(0, 2, 1, 3).reshape(G, Tq, C)
        dk = dk4.transpose(0, 2, 1, 3).reshape(G, Tk, C)
        dv = dv4.transpose(0, 2, 1, 3).reshape(G, Tk, C)
        return dq, dk, dv

    return make_op(out, (q, k, v), vjp, "attention")


# -- structured ops -----------------------------------------------------------


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of (B, Cin, H, W) with (Cout, Cin, kh, kw)."""
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D operands, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape} vs weight {w.shape}")
    B, Cin, H, W = x.shape
    Cout, _, kh, kw = w.shape
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    if Ho <= 0 or Wo <= 0:
        raise DimensionError("conv2d output would be empty")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    Hp, Wp = xp.shape[2], xp.shape[3]
    sb, sc, sh, sw = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp, shape=(B, Cin, kh, kw, Ho, Wo),
        strides=(sb, sc, sh, sw, sh * stride, sw * stride))
    cols = windows.reshape(B, Cin * kh * kw, Ho * Wo)      # im2col copy
    w2 = w.data.reshape(Cout, Cin * kh * kw)
    out = np.matmul(w2, cols).reshape(B, Cout, Ho, Wo)
    if b is not None:
        out += b.data.reshape(1, Cout, 1, 1)

    parents = (x, w) if b is None else (x, w, b)

    def vjp(g):
        dx = dw = db = None
        g2 = g.reshape(B, Cout, Ho * Wo)
        if b is not None and b.requires_grad:
            db = g.sum(axis=(0, 2, 3))
        if w.requires_grad:
            dw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        if x.requires_grad:
            dcols = np.matmul(w2.T, g2).reshape(B, Cin, kh, kw, Ho, Wo)
            dxp = np.zeros((B, Cin, Hp, Wp), dtype=xp.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + Ho * stride:stride, j:j + Wo * stride:stride] += dcols[:, :, i, j]
            dx = dxp[:, :, padding:padding + H, padding:padding + W] if padding else dxp
        grads = [dx, dw]
        if b is not None:
            grads.append(db)
        return tuple(grads)

    return make_op(out, parents, vjp, "conv2d")


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling of the two trailing axes."""
    out = np.repeat(np.repeat(x.data, 2, axis=-2), 2, axis=-1)

    def vjp(g):
        s = g.shape
        folded = g.reshape(s[:-2] + (s[-2] // 2, 2, s[-1] // 2, 2))
        return (folded.sum(axis=(-3, -1)),)

    return make_op(out, (x,), vjp, "upsample2x")
