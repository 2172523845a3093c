"""Reverse-mode automatic differentiation on numpy arrays.

Eager tape recording: every primitive computes its output immediately and,
when an active tape exists and some input requires a gradient, appends a
backward closure to that tape. Creation order is a topological order, so
``Tape.backward`` simply walks the recorded nodes in reverse.

Two float widths are supported. Training uses float32; gradient-check
suites run the same code on float64 inputs (ops inherit the dtype of their
operands).

Thread model: a tape is single-writer. Distinct tapes may run in parallel
threads (the active-tape stack is thread-local); tensors are immutable
once their producing op has run.
"""

from __future__ import annotations

import threading

import numpy as np

LOG_EPS = 1e-12  # floor applied inside log(); keeps masked/perturbed inputs finite


class EngineError(Exception):
    """Base class for tensor-engine failures."""


class ShapeError(EngineError):
    """Raised when operand shapes violate a primitive's contract."""


class TapeError(EngineError):
    """Raised on tape misuse (no active tape, double backward, non-scalar loss)."""


_tls = threading.local()


def _tape_stack():
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = []
        _tls.stack = stack
    return stack


def active_tape():
    """Return the innermost active tape, or None."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A numpy array plus its place in one backward graph.

    ``grad`` is populated by ``Tape.backward`` for every tensor that
    requires a gradient and contributes to the loss. Values are never
    mutated after construction.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_bwd")

    _next_id = 0

    def __init__(self, data, requires_grad=False, op=None, parents=(), bwd=None):
        self.data = data
        self.grad = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents = parents
        self._bwd = bwd

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # arithmetic sugar; scalars and ndarrays are wrapped as constants
    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    def __radd__(self, other):
        return add(_wrap(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _wrap(other, self.dtype))

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _wrap(other, self.dtype))

    def __rmul__(self, other):
        return mul(_wrap(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _wrap(other, self.dtype))

    def __neg__(self):
        return neg(self)

    def sum(self, axis=None):
        return reduce_sum(self, axis=axis)


class Tape:
    """Ordered record of one forward pass; backward runs exactly once."""

    def __init__(self):
        self._nodes = []
        self._done = False

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self._nodes)

    def backward(self, loss, check_finite=False):
        """Propagate gradients from a scalar loss through the tape.

        Raises TapeError if the loss is not scalar or if backward already
        ran on this tape.
        """
        if not isinstance(loss, Tensor):
            raise TapeError("backward expects a Tensor loss")
        if loss.size != 1:
            raise TapeError(f"backward requires a scalar loss, got shape {loss.shape}")
        if self._done:
            raise TapeError("backward already ran on this tape")
        self._done = True
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self._nodes):
            if node.grad is not None:
                node._bwd(node.grad)
        if check_finite:
            for node in self._nodes:
                if not np.all(np.isfinite(node.data)):
                    raise EngineError(f"non-finite values in output of {node.op!r}")
                if node.grad is not None and not np.all(np.isfinite(node.grad)):
                    raise EngineError(f"non-finite gradient at {node.op!r}")


def leaf(data, requires_grad=True, dtype=None):
    """Create a graph input holding its own storage."""
    arr = np.asarray(data, dtype=dtype)
    return Tensor(arr, requires_grad=requires_grad, op="leaf")


def constant(data, dtype=None):
    """Create a tensor that never receives gradient."""
    arr = np.asarray(data, dtype=dtype)
    return Tensor(arr, requires_grad=False, op="const")


def _wrap(value, dtype):
    if isinstance(value, Tensor):
        return value
    return constant(np.asarray(value, dtype=dtype))


def stop_gradient(t):
    """Same values, no history: backward contributes zero upstream."""
    if not isinstance(t, Tensor):
        return constant(t)
    return Tensor(t.data, requires_grad=False, op="stop_gradient")


def _accum(t, g):
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _record(out, parents, bwd):
    """Attach a backward closure if any parent participates in a graph."""
    if not any(p.requires_grad for p in parents):
        return out
    tape = active_tape()
    if tape is None:
        raise TapeError(f"{out.op}: inputs require grad but no tape is active")
    out.requires_grad = True
    out._parents = parents
    out._bwd = bwd
    tape._nodes.append(out)
    return out


def _unbroadcast(grad, shape):
    """Reduce a broadcasted gradient back to the parent's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise primitives
# ---------------------------------------------------------------------------


def add(a, b):
    out = Tensor(a.data + b.data, op="add")

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.data.shape))

    return _record(out, (a, b), bwd)


def sub(a, b):
    out = Tensor(a.data - b.data, op="sub")

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g, b.data.shape))

    return _record(out, (a, b), bwd)


def mul(a, b):
    out = Tensor(a.data * b.data, op="mul")

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _record(out, (a, b), bwd)


def div(a, b):
    out = Tensor(a.data / b.data, op="div")

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _record(out, (a, b), bwd)


def neg(a):
    out = Tensor(-a.data, op="neg")

    def bwd(g):
        if a.requires_grad:
            _accum(a, -g)

    return _record(out, (a,), bwd)


def log(a):
    """Natural log with a 1e-12 floor on the argument."""
    clipped = np.maximum(a.data, LOG_EPS)
    out = Tensor(np.log(clipped), op="log")

    def bwd(g):
        if a.requires_grad:
            inside = (a.data >= LOG_EPS).astype(a.data.dtype)
            _accum(a, g * inside / clipped)

    return _record(out, (a,), bwd)


def exp(a):
    out = Tensor(np.exp(a.data), op="exp")

    def bwd(g):
        if a.requires_grad:
            _accum(a, g * out.data)

    return _record(out, (a,), bwd)


def sqrt(a):
    out = Tensor(np.sqrt(a.data), op="sqrt")

    def bwd(g):
        if a.requires_grad:
            _accum(a, g * (0.5 / out.data))

    return _record(out, (a,), bwd)


def absolute(a):
    out = Tensor(np.abs(a.data), op="abs")

    def bwd(g):
        if a.requires_grad:
            _accum(a, g * np.sign(a.data))

    return _record(out, (a,), bwd)


def leaky_relu(a, slope=0.1):
    pos = a.data >= 0
    out = Tensor(np.where(pos, a.data, a.data * slope), op="leaky_relu")

    def bwd(g):
        if a.requires_grad:
            _accum(a, np.where(pos, g, g * slope))

    return _record(out, (a,), bwd)


# ---------------------------------------------------------------------------
# reductions and rearrangement
# ---------------------------------------------------------------------------


def reduce_sum(a, axis=None, keepdims=False):
    out = Tensor(np.sum(a.data, axis=axis, keepdims=keepdims), op="reduce_sum")

    def bwd(g):
        if not a.requires_grad:
            return
        if axis is None:
            _accum(a, np.broadcast_to(g, a.data.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.data.shape).copy())

    return _record(out, (a,), bwd)


def reduce_max(a, axis=None):
    """Maximum along one axis (or all); ties route to the first index."""
    if axis is None:
        flat = a.data.reshape(-1)
        idx = int(np.argmax(flat))
        out = Tensor(a.data.reshape(()) if a.size == 1 else flat[idx].reshape(()), op="reduce_max")

        def bwd_all(g):
            if a.requires_grad:
                full = np.zeros_like(flat)
                full[idx] = g
                _accum(a, full.reshape(a.data.shape))

        return _record(out, (a,), bwd_all)

    idx = np.argmax(a.data, axis=axis)
    out_val = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)
    out = Tensor(out_val, op="reduce_max")

    def bwd(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
            _accum(a, full)

    return _record(out, (a,), bwd)


def reshape(a, shape):
    out = Tensor(a.data.reshape(shape), op="reshape")

    def bwd(g):
        if a.requires_grad:
            _accum(a, g.reshape(a.data.shape))

    return _record(out, (a,), bwd)


def gather_rows(a, index):
    """out[i] = a[i, index[i]] for a 2-D tensor; used for per-sample class picks."""
    if a.data.ndim != 2:
        raise ShapeError(f"gather_rows: expected rank-2 input, got shape {a.data.shape}")
    index = np.asarray(index)
    if index.ndim != 1 or index.shape[0] != a.data.shape[0]:
        raise ShapeError(
            f"gather_rows: index shape {index.shape} does not match rows of {a.data.shape}"
        )
    if index.min() < 0 or index.max() >= a.data.shape[1]:
        raise ShapeError("gather_rows: index out of range")
    rows = np.arange(a.data.shape[0])
    out = Tensor(a.data[rows, index], op="gather_rows")

    def bwd(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[rows, index] = g
            _accum(a, full)

    return _record(out, (a,), bwd)


def l1_norm(a):
    """Sum of absolute values, as a scalar tensor."""
    return reduce_sum(absolute(a))


def l2_norm(a):
    """Euclidean norm of the flattened tensor, as a scalar tensor."""
    return sqrt(reduce_sum(mul(a, a)))


# ---------------------------------------------------------------------------
# network primitives
# ---------------------------------------------------------------------------


def softmax(a):
    """Stable softmax over the last axis."""
    shifted = a.data - np.max(a.data, axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / np.sum(e, axis=-1, keepdims=True)
    out = Tensor(s, op="softmax")

    def bwd(g):
        if a.requires_grad:
            dot = np.sum(g * s, axis=-1, keepdims=True)
            _accum(a, s * (g - dot))

    return _record(out, (a,), bwd)


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul: expected rank-2 operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ: {a.data.shape} x {b.data.shape}")
    out = Tensor(a.data @ b.data, op="matmul")

    def bwd(g):
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ g)

    return _record(out, (a, b), bwd)


def _im2col(x, kh, kw):
    n, h, w, c = x.shape
    oh, ow = h - kh + 1, w - kw + 1
    cols = np.empty((n, oh, ow, kh, kw, c), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = x[:, i : i + oh, j : j + ow, :]
    return cols.reshape(n * oh * ow, kh * kw * c)


def _col2im(dcols, xshape, kh, kw):
    n, h, w, c = xshape
    oh, ow = h - kh + 1, w - kw + 1
    dcols = dcols.reshape(n, oh, ow, kh, kw, c)
    dx = np.zeros(xshape, dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dx[:, i : i + oh, j : j + ow, :] += dcols[:, :, :, i, j, :]
    return dx


def conv2d(x, w, padding="same"):
    """2-D convolution, stride 1, NHWC input and (kh, kw, cin, cout) kernel.

    padding "same" zero-pads so output spatial size equals input size
    (odd kernels only); "valid" applies no padding.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d: input must be rank 4 (NHWC), got {x.data.shape}")
    if w.data.ndim != 4:
        raise ShapeError(f"conv2d: kernel must be rank 4, got {w.data.shape}")
    kh, kw, cin, cout = w.data.shape
    if x.data.shape[3] != cin:
        raise ShapeError(
            f"conv2d: input channels {x.data.shape[3]} do not match kernel {w.data.shape}"
        )
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError(f"conv2d: same padding requires odd kernel, got {kh}x{kw}")
        ph, pw = kh // 2, kw // 2
        xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw), (0, 0))) if ph or pw else x.data
    elif padding == "valid":
        xp = x.data
        if x.data.shape[1] < kh or x.data.shape[2] < kw:
            raise ShapeError(f"conv2d: input {x.data.shape} smaller than kernel {kh}x{kw}")
    else:
        raise ShapeError(f"conv2d: unknown padding {padding!r}")

    n, hp, wp, _ = xp.shape
    oh, ow = hp - kh + 1, wp - kw + 1
    cols = _im2col(xp, kh, kw)
    w2 = w.data.reshape(kh * kw * cin, cout)
    out_val = (cols @ w2).reshape(n, oh, ow, cout)
    out = Tensor(out_val, op="conv2d")
    saved_cols = cols if w.requires_grad else None

    def bwd(g):
        g2 = g.reshape(n * oh * ow, cout)
        if w.requires_grad:
            _accum(w, (saved_cols.T @ g2).reshape(w.data.shape))
        if x.requires_grad:
            dcols = g2 @ w2.T
            dxp = _col2im(dcols, xp.shape, kh, kw)
            if padding == "same" and (kh // 2 or kw // 2):
                ph, pw = kh // 2, kw // 2
                dxp = dxp[:, ph : ph + x.data.shape[1], pw : pw + x.data.shape[2], :]
            _accum(x, dxp)

    return _record(out, (x, w), bwd)


def max_pool(x, size=2):
    """Non-overlapping max pooling (size x size window, stride size)."""
    if x.data.ndim != 4:
        raise ShapeError(f"max_pool: input must be rank 4 (NHWC), got {x.data.shape}")
    n, h, w, c = x.data.shape
    if h % size or w % size:
        raise ShapeError(f"max_pool: spatial dims {h}x{w} not divisible by {size}")
    oh, ow = h // size, w // size
    windows = (
        x.data.reshape(n, oh, size, ow, size, c)
        .transpose(0, 1, 3, 2, 4, 5)
        .reshape(n, oh, ow, size * size, c)
    )
    idx = np.argmax(windows, axis=3)
    out_val = np.take_along_axis(windows, idx[:, :, :, None, :], axis=3).squeeze(3)
    out = Tensor(out_val, op="max_pool")

    def bwd(g):
        if x.requires_grad:
            dwin = np.zeros_like(windows)
            np.put_along_axis(dwin, idx[:, :, :, None, :], g[:, :, :, None, :], axis=3)
            dx = (
                dwin.reshape(n, oh, ow, size, size, c)
                .transpose(0, 1, 3, 2, 4, 5)
                .reshape(n, h, w, c)
            )
            _accum(x, dx)

    return _record(out, (x,), bwd)


def global_avg_pool(x):
    """Mean over both spatial axes: (N, H, W, C) -> (N, C)."""
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool: input must be rank 4, got {x.data.shape}")
    n, h, w, c = x.data.shape
    out = Tensor(x.data.mean(axis=(1, 2)), op="global_avg_pool")

    def bwd(g):
        if x.requires_grad:
            scale = np.asarray(1.0 / (h * w), dtype=x.data.dtype)
            _accum(x, np.broadcast_to((g * scale)[:, None, None, :], x.data.shape).copy())

    return _record(out, (x,), bwd)


def dropout(x, rate, rng):
    """Inverted dropout; rng None (or rate 0) is the identity."""
    if rng is None or rate == 0.0:
        return x
    if not 0.0 < rate < 1.0:
        raise ShapeError(f"dropout: rate must lie in [0, 1), got {rate}")
    keep = (rng.random(size=x.data.shape) >= rate).astype(x.data.dtype)
    scale = np.asarray(1.0 / (1.0 - rate), dtype=x.data.dtype)
    out = Tensor(x.data * keep * scale, op="dropout")

    def bwd(g):
        if x.requires_grad:
            _accum(x, g * keep * scale)

    return _record(out, (x,), bwd)


def batch_norm_train(x, gamma, beta, eps=1e-5):
    """Batch normalization using the current batch's statistics.

    Normalizes over every axis except the last (channels). Returns the
    output tensor plus the batch mean/variance as plain arrays so the
    caller can maintain running statistics.
    """
    axes = tuple(range(x.data.ndim - 1))
    mean = x.data.mean(axis=axes)
    var = x.data.var(axis=axes)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x.data - mean) * inv_std
    out = Tensor(x_hat * gamma.data + beta.data, op="batch_norm")
    m = x.data.size // x.data.shape[-1]

    def bwd(g):
        if beta.requires_grad:
            _accum(beta, g.sum(axis=axes))
        if gamma.requires_grad:
            _accum(gamma, (g * x_hat).sum(axis=axes))
        if x.requires_grad:
            gxh = g * gamma.data
            term = gxh - gxh.mean(axis=axes) - x_hat * (gxh * x_hat).mean(axis=axes)
            _accum(x, term * inv_std)
        _ = m  # element count kept for clarity; means above already divide by it

    return _record(out, (x, gamma, beta), bwd), mean, var


def batch_norm_eval(x, gamma, beta, running_mean, running_var, eps=1e-5):
    """Batch normalization with frozen statistics (pure affine map)."""
    inv_std = 1.0 / np.sqrt(running_var + eps)
    scale = (gamma.data * inv_std).astype(x.data.dtype)
    shift = (beta.data - running_mean * scale).astype(x.data.dtype)
    out = Tensor(x.data * scale + shift, op="batch_norm_eval")

    def bwd(g):
        axes = tuple(range(x.data.ndim - 1))
        if x.requires_grad:
            _accum(x, g * scale)
        if gamma.requires_grad:
            x_hat = (x.data - running_mean) * inv_std
            _accum(gamma, (g * x_hat).sum(axis=axes))
        if beta.requires_grad:
            _accum(beta, g.sum(axis=axes))

    return _record(out, (x, gamma, beta), bwd)
