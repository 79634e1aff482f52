"""Dense-tensor engine with tape-based reverse-mode differentiation.

Tensors wrap contiguous numpy float arrays (float32 by default, float64 for
gradient-check headroom). Operations executed while a :class:`Tape` is active
are recorded in execution order, which is a valid topological order, so a
single reverse sweep computes all gradients.

Thread-safety: tensors are treated as immutable once produced by an op, and a
tape has a single writer. Forward evaluation of independent graphs may run
concurrently on separate tapes; one backward pass is strictly sequential.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

from .errors import ContractError, NumericError, ShapeError

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "apply_op",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "transpose",
    "reshape",
    "tensor_sum",
    "tensor_mean",
    "relu",
    "gelu",
    "exp",
    "log",
    "sqrt",
    "clamp_min",
    "softplus",
    "softmax_row",
    "layer_norm",
    "conv2d",
    "BatchNormState",
    "batch_norm",
    "gather_pairs",
    "l2_normalize",
]

_FLOAT_DTYPES = (np.float32, np.float64)
# python floats, not numpy scalars: numpy scalars would promote float32 graphs
_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    """N-dimensional float array, optionally participating in a gradient tape."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        # float32 is the engine default; float64 is the oracle-mode switch
        arr = np.asarray(data, dtype=np.float32 if dtype is None else dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        arr = np.ascontiguousarray(arr)
        if not np.isfinite(arr).all():
            raise NumericError("tensor values must be finite")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @classmethod
    def _wrap(cls, arr, requires_grad):
        # Internal fast path for op outputs: no copy, no finiteness scan.
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(()))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{flag})"

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

    def __matmul__(self, other):
        return matmul(self, other)


class _TapeOp:
    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


_ACTIVE_TAPE = None


class Tape:
    """Ordered record of operations; consumed by a single backward pass."""

    def __init__(self):
        self._ops = []
        self._consumed = False

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise ContractError("a tape is already active; tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def __len__(self):
        return len(self._ops)

    def reset(self):
        self._ops.clear()
        self._consumed = False


def _coerce_pair(a, b):
    """Promote python scalars/arrays to constant tensors with a matching dtype."""
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        if a.dtype != b.dtype:
            raise ContractError(f"mixed dtypes {a.dtype} vs {b.dtype}")
        return a, b
    if isinstance(a, Tensor):
        return a, Tensor(np.asarray(b, dtype=a.dtype))
    if isinstance(b, Tensor):
        return Tensor(np.asarray(a, dtype=b.dtype)), b
    raise ContractError("at least one operand must be a Tensor")


def apply_op(out_data, inputs, backward_fn):
    """Wrap ``out_data`` as a Tensor and record the op on the active tape.

    ``backward_fn(grad_out)`` must return one gradient array (or None) per
    input, in order. Used by every kernel here and available for composite
    kernels defined elsewhere in the package.
    """
    requires = any(t.requires_grad for t in inputs)
    out = Tensor._wrap(out_data, requires)
    if requires and _ACTIVE_TAPE is not None and not _ACTIVE_TAPE._consumed:
        _ACTIVE_TAPE._ops.append(_TapeOp(tuple(inputs), out, backward_fn))
    return out


def backward(tape, loss):
    """Run the reverse sweep, leaving gradients on every leaf's ``.grad``.

    The loss must be a scalar. Each tape supports exactly one backward pass;
    call :meth:`Tape.reset` (or build a fresh tape) before reusing. Leaves
    that require grad but do not influence the loss receive zero gradients.
    """
    if not isinstance(loss, Tensor) or loss.size != 1:
        raise ContractError("backward requires a scalar loss tensor")
    if tape._consumed:
        raise ContractError("tape already consumed by a backward pass; reset first")
    tape._consumed = True

    produced = set()
    leaves = {}
    for op in tape._ops:
        produced.add(id(op.output))
        for t in op.inputs:
            if t.requires_grad:
                leaves[id(t)] = t
    for tid in produced:
        leaves.pop(tid, None)
    if loss.requires_grad and id(loss) not in produced:
        leaves[id(loss)] = loss

    grads = {id(loss): np.ones_like(loss.data)}
    for op in reversed(tape._ops):
        g = grads.pop(id(op.output), None)
        if g is None:
            continue
        for t, gt in zip(op.inputs, op.backward_fn(g)):
            if gt is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gt
            else:
                grads[key] = gt

    for key, t in leaves.items():
        g = grads.get(key)
        t.grad = np.zeros_like(t.data) if g is None else np.ascontiguousarray(g)


def _sum_to(grad, shape):
    """Reduce a broadcast gradient back down to ``shape``."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b):
    a, b = _coerce_pair(a, b)
    out = a.data + b.data

    def bwd(g):
        return _sum_to(g, a.shape), _sum_to(g, b.shape)

    return apply_op(out, (a, b), bwd)


def sub(a, b):
    a, b = _coerce_pair(a, b)
    out = a.data - b.data

    def bwd(g):
        return _sum_to(g, a.shape), _sum_to(-g, b.shape)

    return apply_op(out, (a, b), bwd)


def mul(a, b):
    a, b = _coerce_pair(a, b)
    out = a.data * b.data

    def bwd(g):
        return _sum_to(g * b.data, a.shape), _sum_to(g * a.data, b.shape)

    return apply_op(out, (a, b), bwd)


def div(a, b):
    a, b = _coerce_pair(a, b)
    out = a.data / b.data

    def bwd(g):
        return (
            _sum_to(g / b.data, a.shape),
            _sum_to(-g * a.data / (b.data * b.data), b.shape),
        )

    return apply_op(out, (a, b), bwd)


def neg(a):
    return apply_op(-a.data, (a,), lambda g: (-g,))


# ---------------------------------------------------------------------------
# linear algebra and structure
# ---------------------------------------------------------------------------


def matmul(a, b):
    """Matrix product with numpy batch broadcasting on the leading axes."""
    a, b = _coerce_pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must have at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as e:
        raise ShapeError(f"matmul batch dims incompatible: {a.shape} @ {b.shape}") from e
    out = a.data @ b.data

    def bwd(g):
        ga = g @ b.data.swapaxes(-1, -2)
        gb = a.data.swapaxes(-1, -2) @ g
        return _sum_to(ga, a.shape), _sum_to(gb, b.shape)

    return apply_op(out, (a, b), bwd)


def transpose(a, axes=None):
    perm = tuple(axes) if axes is not None else tuple(range(a.ndim))[::-1]
    inv = np.argsort(perm)
    out = np.ascontiguousarray(a.data.transpose(perm))

    def bwd(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return apply_op(out, (a,), bwd)


def reshape(a, shape):
    out = a.data.reshape(shape)
    old = a.shape

    def bwd(g):
        return (g.reshape(old),)

    return apply_op(out, (a,), bwd)


def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        ax = axis if isinstance(axis, tuple) else (axis,)
        for a in sorted(a % len(shape) for a in ax):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def tensor_sum(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.shape

    def bwd(g):
        return (np.ascontiguousarray(_expand_reduced(g, shape, axis, keepdims)),)

    return apply_op(np.asarray(out), (a,), bwd)


def tensor_mean(a, axis=None, keepdims=False):
    out = a.data.mean(axis=axis, keepdims=keepdims)
    shape = a.shape
    # python int, not numpy scalar: np.int64 would upcast float32 gradients
    count = a.size if axis is None else int(
        np.prod([shape[ax % len(shape)] for ax in (axis if isinstance(axis, tuple) else (axis,))])
    )

    def bwd(g):
        return (np.ascontiguousarray(_expand_reduced(g, shape, axis, keepdims)) / count,)

    return apply_op(np.asarray(out), (a,), bwd)


def gather_pairs(a, rows, cols):
    """Select ``a[rows[k], cols[k]]`` as a 1-D tensor; backward scatter-adds."""
    if a.ndim != 2:
        raise ShapeError("gather_pairs expects a 2-D tensor")
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    out = a.data[rows, cols]
    shape = a.shape

    def bwd(g):
        ga = np.zeros(shape, dtype=g.dtype)
        np.add.at(ga, (rows, cols), g)
        return (ga,)

    return apply_op(out, (a,), bwd)


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------


def relu(a):
    out = np.maximum(a.data, 0)
    mask = a.data > 0

    def bwd(g):
        return (g * mask,)

    return apply_op(out, (a,), bwd)


def gelu(a):
    """Exact Gaussian-error-linear unit x * Phi(x) (erf form, not tanh)."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = x * cdf

    def bwd(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return (g * (cdf + x * pdf),)

    return apply_op(out, (a,), bwd)


def exp(a):
    out = np.exp(a.data)

    def bwd(g):
        return (g * out,)

    return apply_op(out, (a,), bwd)


def log(a):
    out = np.log(a.data)

    def bwd(g):
        return (g / a.data,)

    return apply_op(out, (a,), bwd)


def sqrt(a):
    out = np.sqrt(a.data)

    def bwd(g):
        return (g * 0.5 / out,)

    return apply_op(out, (a,), bwd)


def clamp_min(a, low):
    out = np.maximum(a.data, low)
    mask = a.data > low

    def bwd(g):
        return (g * mask,)

    return apply_op(out, (a,), bwd)


def softplus(a):
    """log(1 + exp(x)) in the overflow-safe max(x,0) + log1p(exp(-|x|)) form."""
    x = a.data
    out = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))

    def bwd(g):
        # sigmoid(x), split by sign to avoid exp overflow
        pos = x >= 0
        s = np.empty_like(x)
        s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        s[~pos] = ex / (1.0 + ex)
        return (g * s,)

    return apply_op(out, (a,), bwd)


def softmax_row(a):
    """Softmax over the last axis, computed with max subtraction."""
    if a.ndim < 1 or a.shape[-1] < 1:
        raise ShapeError("softmax_row requires a non-empty last axis")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return apply_op(out, (a,), bwd)


# ---------------------------------------------------------------------------
# normalization layers
# ---------------------------------------------------------------------------


def layer_norm(x, gamma, beta, eps=1e-6):
    """Per-row (last axis) zero-mean/unit-variance then affine."""
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError("layer_norm affine parameters must match the last axis")
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    d = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = gamma.data * xhat + beta.data

    def bwd(g):
        dgamma = (g * xhat).reshape(-1, d).sum(axis=0)
        dbeta = g.reshape(-1, d).sum(axis=0)
        gh = g * gamma.data
        dx = inv * (
            gh
            - gh.mean(axis=-1, keepdims=True)
            - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, dgamma, dbeta

    return apply_op(out, (x, gamma, beta), bwd)


class BatchNormState:
    """Running statistics for one batch-norm layer, updated in train mode."""

    def __init__(self, channels, momentum=0.1, eps=1e-5, dtype=np.float32):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps


def batch_norm(x, gamma, beta, state, training):
    """Channel-axis batch normalization for (N, C, H, W) or (N, C) input.

    Training mode normalizes with batch statistics (biased variance) and
    updates ``state`` in place with momentum; inference mode uses the running
    statistics. A batch of one sample is permitted: eps floors the variance.
    """
    if x.ndim not in (2, 4):
        raise ShapeError("batch_norm expects (N, C) or (N, C, H, W) input")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError("batch_norm affine parameters must match the channel axis")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    cshape = (1, c) if x.ndim == 2 else (1, c, 1, 1)
    eps = state.eps

    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        m = state.momentum
        state.running_mean = ((1 - m) * state.running_mean + m * mu).astype(
            state.running_mean.dtype
        )
        state.running_var = ((1 - m) * state.running_var + m * var).astype(
            state.running_var.dtype
        )
    else:
        mu = state.running_mean.astype(x.dtype)
        var = state.running_var.astype(x.dtype)

    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(cshape)) * inv.reshape(cshape)
    out = gamma.data.reshape(cshape) * xhat + beta.data.reshape(cshape)
    count = x.size // c

    def bwd(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        gi = g * (gamma.data * inv).reshape(cshape)
        if training:
            dx = (
                gi
                - gi.mean(axis=axes, keepdims=True)
                - xhat * (gi * xhat).mean(axis=axes, keepdims=True)
            )
        else:
            dx = gi
        return dx, dgamma, dbeta

    return apply_op(out, (x, gamma, beta), bwd)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def conv2d(x, weight, stride=1, padding=0):
    """2-D cross-correlation for (N, C, H, W) or single (C, H, W) input.

    Realized as a sum over kernel offsets of strided-slice GEMMs, which keeps
    both directions of the backward pass as plain tensordots.
    """
    single = x.ndim == 3
    xt = reshape(x, (1,) + x.shape) if single else x
    if xt.ndim != 4 or weight.ndim != 4:
        raise ShapeError("conv2d expects (N, C, H, W) input and (O, C, kh, kw) weight")
    n, cin, h, w = xt.shape
    cout, cin_w, kh, kw = weight.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d channel mismatch: input {cin}, weight {cin_w}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if h + 2 * padding < kh or w + 2 * padding < kw or ho < 1 or wo < 1:
        raise ShapeError(f"conv2d output extent < 1 for input {h}x{w}")

    xp = np.pad(xt.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((n, cout, ho, wo), dtype=xt.dtype)
    hstop = stride * (ho - 1) + 1
    wstop = stride * (wo - 1) + 1
    for dy in range(kh):
        for dx in range(kw):
            xs = xp[:, :, dy : dy + hstop : stride, dx : dx + wstop : stride]
            # (O, C) x (N, C, ho, wo) -> (O, N, ho, wo)
            out += np.tensordot(weight.data[:, :, dy, dx], xs, axes=([1], [1])).transpose(
                1, 0, 2, 3
            )

    def bwd(g):
        dw = np.zeros_like(weight.data)
        dxp = np.zeros_like(xp)
        for dy in range(kh):
            for dx in range(kw):
                xs = xp[:, :, dy : dy + hstop : stride, dx : dx + wstop : stride]
                dw[:, :, dy, dx] = np.tensordot(g, xs, axes=([0, 2, 3], [0, 2, 3]))
                contrib = np.tensordot(g, weight.data[:, :, dy, dx], axes=([1], [0]))
                dxp[:, :, dy : dy + hstop : stride, dx : dx + wstop : stride] += (
                    contrib.transpose(0, 3, 1, 2)
                )
        if padding:
            dx_full = dxp[:, :, padding : padding + h, padding : padding + w]
        else:
            dx_full = dxp
        return np.ascontiguousarray(dx_full), dw

    res = apply_op(out, (xt, weight), bwd)
    return reshape(res, res.shape[1:]) if single else res


# ---------------------------------------------------------------------------
# composites
# ---------------------------------------------------------------------------


def l2_normalize(x, axis=-1):
    """Scale rows to unit L2 norm; zero rows are a contract violation."""
    sq = tensor_sum(mul(x, x), axis=axis, keepdims=True)
    if np.any(sq.data < 1e-24):
        raise NumericError("cannot L2-normalize a (near-)zero vector")
    return div(x, sqrt(sq))
