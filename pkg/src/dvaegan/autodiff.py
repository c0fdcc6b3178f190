"""Dense n-d float tensors with reverse-mode automatic differentiation.

Operations executed while a Tape is active append backward records in
execution order, so the record list is always topologically sorted and a
single reverse sweep propagates adjoints visiting each node exactly once.
Tensors default to float32; gradient-check tests build float64 graphs.
"""

from __future__ import annotations

import threading

import numpy as np

from .errors import ContractError, DimensionError, DomainError

_TLS = threading.local()


def _tape_stack():
    if not hasattr(_TLS, "stack"):
        _TLS.stack = []
    return _TLS.stack


def current_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of primitive ops for one forward/backward pass."""

    def __init__(self):
        self._records = []  # (out, inputs, backward_fn), append order = topo order

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        popped = _tape_stack().pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self._records)

    def record(self, out, inputs, backward_fn):
        self._records.append((out, inputs, backward_fn))

    def backward(self, loss):
        """Accumulate dLoss/dLeaf into every requires_grad leaf reachable from loss."""
        if loss.data.size != 1:
            raise ContractError(
                f"backward requires a scalar loss, got shape {loss.shape}"
            )
        if loss._tape is not self:
            raise ContractError("loss was not recorded on this tape")
        adjoints = {id(loss): np.ones_like(loss.data)}
        holders = {id(loss): loss}
        for out, inputs, backward_fn in reversed(self._records):
            g = adjoints.pop(id(out), None)
            if g is None:
                continue
            for tensor, contrib in zip(inputs, backward_fn(g)):
                if contrib is None:
                    continue
                key = id(tensor)
                if key in adjoints:
                    adjoints[key] = adjoints[key] + contrib
                else:
                    adjoints[key] = contrib
                    holders[key] = tensor
        for key, g in adjoints.items():
            t = holders[key]
            if t.requires_grad and t._is_leaf:
                if t.grad is None:
                    t.grad = np.zeros_like(t.data)
                t.grad += g


class Tensor:
    """A shape + row-major float buffer, optionally participating in a tape."""

    __slots__ = ("data", "grad", "requires_grad", "_tape", "_is_leaf")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=np.float32 if dtype is None else dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._tape = None
        self._is_leaf = True

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        if self.grad is not None:
            self.grad.fill(0.0)
        elif self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self):
        """Constant view of the same buffer, cut from any tape."""
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def backward(self):
        backward(self)

    # operator sugar; non-Tensor operands are lifted to constants
    def __add__(self, other):
        return add(self, _lift(other, self.dtype))

    def __radd__(self, other):
        return add(_lift(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _lift(other, self.dtype))

    def __rsub__(self, other):
        return sub(_lift(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _lift(other, self.dtype))

    def __rmul__(self, other):
        return mul(_lift(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _lift(other, self.dtype))

    def __rtruediv__(self, other):
        return div(_lift(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, shape):
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def _lift(x, dtype):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def _lift2(a, b):
    if isinstance(a, Tensor):
        return a, _lift(b, a.dtype)
    if isinstance(b, Tensor):
        return _lift(a, b.dtype), b
    return Tensor(np.asarray(a)), Tensor(np.asarray(b))


def _wants_grad(t, tape):
    # leaves contribute iff they require grad; interior nodes iff they live on this tape
    return t.requires_grad if t._is_leaf else (t._tape is tape)


def _apply(data, inputs, backward_fn):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out.grad = None
    out._tape = None
    out._is_leaf = True
    tape = current_tape()
    if tape is not None and any(_wants_grad(t, tape) for t in inputs):
        out._is_leaf = False
        out._tape = tape
        tape.record(out, inputs, backward_fn)
    return out


def _unbroadcast(grad, shape):
    """Sum grad over the dimensions that were broadcast to reach its shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(a, b, op):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(
            f"{op}: shapes {a.shape} and {b.shape} are not broadcast-compatible"
        ) from None


def backward(loss):
    if not isinstance(loss, Tensor):
        raise ContractError("backward expects a Tensor")
    if loss._tape is None:
        raise ContractError("loss is not on an active tape")
    loss._tape.backward(loss)


# ---------------------------------------------------------------------------
# binary elementwise


def add(a, b):
    a, b = _lift2(a, b)
    _check_broadcast(a, b, "add")
    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return _apply(a.data + b.data, (a, b), bw)


def sub(a, b):
    a, b = _lift2(a, b)
    _check_broadcast(a, b, "sub")
    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)
    return _apply(a.data - b.data, (a, b), bw)


def mul(a, b):
    a, b = _lift2(a, b)
    _check_broadcast(a, b, "mul")
    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)
    return _apply(a.data * b.data, (a, b), bw)


def div(a, b):
    a, b = _lift2(a, b)
    _check_broadcast(a, b, "div")
    def bw(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )
    return _apply(a.data / b.data, (a, b), bw)


# ---------------------------------------------------------------------------
# unary elementwise


def neg(a):
    return _apply(-a.data, (a,), lambda g: (-g,))


def texp(a):
    out_data = np.exp(a.data)
    return _apply(out_data, (a,), lambda g: (g * out_data,))


def tlog(a):
    if np.any(a.data <= 0.0):
        raise DomainError("log of a non-positive input")
    return _apply(np.log(a.data), (a,), lambda g: (g / a.data,))


def ttanh(a):
    out_data = np.tanh(a.data)
    return _apply(out_data, (a,), lambda g: (g * (1.0 - out_data * out_data),))


def relu(a):
    mask = a.data > 0
    return _apply(np.where(mask, a.data, 0.0).astype(a.dtype), (a,), lambda g: (g * mask,))


def leaky_relu(a, alpha=0.2):
    mask = a.data > 0
    out_data = np.where(mask, a.data, alpha * a.data).astype(a.dtype)
    return _apply(out_data, (a,), lambda g: (g * np.where(mask, 1.0, alpha).astype(a.dtype),))


def sigmoid(a):
    x = a.data
    out_data = np.empty_like(x)
    pos = x >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out_data[~pos] = ex / (1.0 + ex)
    return _apply(out_data, (a,), lambda g: (g * out_data * (1.0 - out_data),))


def square(a):
    return _apply(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def tsqrt(a):
    if np.any(a.data < 0.0):
        raise DomainError("sqrt of a negative input")
    out_data = np.sqrt(a.data)
    return _apply(out_data, (a,), lambda g: (g / (2.0 * out_data),))


def clip(a, lo, hi):
    """Clamp values to [lo, hi]; gradient passes only through the interior."""
    inside = (a.data > lo) & (a.data < hi)
    return _apply(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "exp": texp,
    "log": tlog,
    "tanh": ttanh,
    "relu": relu,
    "leaky-relu": leaky_relu,
    "sigmoid": sigmoid,
    "neg": neg,
    "square": square,
    "sqrt": tsqrt,
}


def elementwise(kind, a, b=None, alpha=0.2):
    """Dispatch an elementwise primitive by name."""
    if kind not in _ELEMENTWISE:
        raise ContractError(f"unknown elementwise op {kind!r}")
    fn = _ELEMENTWISE[kind]
    if kind in ("add", "sub", "mul", "div"):
        if b is None:
            raise ContractError(f"{kind} needs two operands")
        return fn(a, b)
    if b is not None:
        raise ContractError(f"{kind} takes one operand")
    if kind == "leaky-relu":
        return fn(a, alpha)
    return fn(a)


# ---------------------------------------------------------------------------
# shape / reduction


def reshape(a, shape):
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.data.size:
        raise DimensionError(f"cannot reshape {a.shape} ({a.size} elems) to {shape}")
    old_shape = a.shape
    return _apply(a.data.reshape(shape), (a,), lambda g: (g.reshape(old_shape),))


def narrow(a, axis, start, length):
    """Contiguous slice along one axis."""
    if not (0 <= start and start + length <= a.shape[axis]):
        raise DimensionError(
            f"narrow [{start}:{start + length}] out of range for axis {axis} of {a.shape}"
        )
    index = tuple(
        slice(start, start + length) if d == axis else slice(None)
        for d in range(a.data.ndim)
    )
    def bw(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)
    return _apply(a.data[index].copy(), (a,), bw)


def tsum(a, axis=None, keepdims=False):
    out_data = a.data.sum(axis=axis, keepdims=keepdims)
    def bw(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            for ax in sorted(ax % a.data.ndim for ax in axes):
                g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=False) * np.ones(1, a.dtype),)
    return _apply(np.asarray(out_data, dtype=a.dtype), (a,), bw)


def tmean(a, axis=None, keepdims=False):
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), Tensor(np.asarray(1.0 / n, dtype=a.dtype)))


# ---------------------------------------------------------------------------
# matmul


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(
            f"matmul expects 2-d operands, got {a.shape} and {b.shape}"
        )
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dims differ: {a.shape} x {b.shape}")
    tape = current_tape()
    def bw(g):
        ga = g @ b.data.T if (tape and _wants_grad(a, tape)) else None
        gb = a.data.T @ g if (tape and _wants_grad(b, tape)) else None
        return ga, gb
    return _apply(a.data @ b.data, (a, b), bw)


# ---------------------------------------------------------------------------
# convolution (cross-correlation convention) and its transpose


def _conv_out_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def _im2col(x, kh, kw, stride, pad):
    n, c, h, w = x.shape
    oh = _conv_out_size(h, kh, stride, pad)
    ow = _conv_out_size(w, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    col = np.empty((n, c, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        i_end = i + stride * oh
        for j in range(kw):
            j_end = j + stride * ow
            col[:, :, i, j] = xp[:, :, i:i_end:stride, j:j_end:stride]
    return col.transpose(0, 4, 5, 1, 2, 3).reshape(n * oh * ow, c * kh * kw), oh, ow


def _col2im(cols, n, c, h, w, kh, kw, stride, pad, oh, ow):
    col = cols.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    img = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        i_end = i + stride * oh
        for j in range(kw):
            j_end = j + stride * ow
            img[:, :, i:i_end:stride, j:j_end:stride] += col[:, :, i, j]
    return img[:, :, pad : pad + h, pad : pad + w] if pad else img


def _check_conv_args(x, kernel, stride, pad, op):
    if kernel.data.ndim != 4:
        raise DimensionError(f"{op}: kernel must be 4-d, got {kernel.shape}")
    if x.data.ndim not in (3, 4):
        raise DimensionError(f"{op}: input must be 3-d or 4-d, got {x.shape}")
    if stride < 1:
        raise DimensionError(f"{op}: stride must be >= 1, got {stride}")
    if pad < 0:
        raise DimensionError(f"{op}: pad must be >= 0, got {pad}")


def conv2d(x, kernel, stride=1, pad=0):
    """Strided cross-correlation of (N,C_in,H,W) with (C_out,C_in,k,k)."""
    _check_conv_args(x, kernel, stride, pad, "conv2d")
    batched = x.data.ndim == 4
    xd = x.data if batched else x.data[None]
    n, c_in, h, w = xd.shape
    c_out, kc, kh, kw = kernel.shape
    if kc != c_in:
        raise DimensionError(
            f"conv2d: kernel expects {kc} input channels, image has {c_in}"
        )
    if h + 2 * pad < kh or w + 2 * pad < kw:
        raise DimensionError(
            f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{w + 2 * pad}"
        )
    cols, oh, ow = _im2col(xd, kh, kw, stride, pad)
    k_mat = kernel.data.reshape(c_out, c_in * kh * kw)
    out = (cols @ k_mat.T).reshape(n, oh, ow, c_out).transpose(0, 3, 1, 2)
    if not batched:
        out = out[0]
    tape = current_tape()

    def bw(g):
        gd = g if batched else g[None]
        g_mat = gd.transpose(0, 2, 3, 1).reshape(n * oh * ow, c_out)
        gx = gk = None
        if tape and _wants_grad(x, tape):
            gx = _col2im(g_mat @ k_mat, n, c_in, h, w, kh, kw, stride, pad, oh, ow)
            if not batched:
                gx = gx[0]
        if tape and _wants_grad(kernel, tape):
            gk = (g_mat.T @ cols).reshape(kernel.shape)
        return gx, gk

    return _apply(np.ascontiguousarray(out), (x, kernel), bw)


def deconv2d(x, kernel, stride=1, pad=0):
    """Transposed convolution: the adjoint of conv2d with the same kernel.

    Kernel layout is (C_in, C_out, k, k); output extent is
    (H - 1) * stride - 2 * pad + k.
    """
    _check_conv_args(x, kernel, stride, pad, "deconv2d")
    batched = x.data.ndim == 4
    xd = x.data if batched else x.data[None]
    n, c_in, h, w = xd.shape
    kc, c_out, kh, kw = kernel.shape
    if kc != c_in:
        raise DimensionError(
            f"deconv2d: kernel expects {kc} input channels, image has {c_in}"
        )
    oh = (h - 1) * stride - 2 * pad + kh
    ow = (w - 1) * stride - 2 * pad + kw
    if oh < 1 or ow < 1:
        raise DimensionError(
            f"deconv2d: output extent {oh}x{ow} is empty for input {h}x{w}"
        )
    x_mat = xd.transpose(0, 2, 3, 1).reshape(n * h * w, c_in)
    k_mat = kernel.data.reshape(c_in, c_out * kh * kw)
    out = _col2im(x_mat @ k_mat, n, c_out, oh, ow, kh, kw, stride, pad, h, w)
    if not batched:
        out = out[0]
    tape = current_tape()

    def bw(g):
        gd = g if batched else g[None]
        gx = gk = None
        cols_g = None
        if tape and (_wants_grad(x, tape) or _wants_grad(kernel, tape)):
            cols_g, _, _ = _im2col(gd, kh, kw, stride, pad)
        if tape and _wants_grad(x, tape):
            gx = (cols_g @ k_mat.T).reshape(n, h, w, c_in).transpose(0, 3, 1, 2)
            gx = np.ascontiguousarray(gx)
            if not batched:
                gx = gx[0]
        if tape and _wants_grad(kernel, tape):
            gk = (x_mat.T @ cols_g).reshape(kernel.shape)
        return gx, gk

    return _apply(out, (x, kernel), bw)
