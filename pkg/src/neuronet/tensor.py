"""Dense tensors with a reverse-mode differentiation tape.

Volumetric tensors use the layout ``[channels, depth, height, width]`` with an
implicit batch of one. Operations executed while a :class:`Tape` is active are
recorded whenever at least one input is tracked (a parameter created with
``requires_grad=True`` or the output of an earlier recorded operation).
:func:`backward` then walks the record once in reverse.

Example::

    w = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        loss = (w * w).sum()
    grads = backward(tape, loss, {"w": w})
"""
import itertools
import threading

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import _kernels
from .errors import ConfigurationError, InternalError, NumericError, UsageError

DEFAULT_DTYPE = np.float32
BN_EPS = 1e-5
BN_MOMENTUM = 0.9

_local = threading.local()
_tape_ids = itertools.count(1)


def _tape_stack():
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Immutable n-dimensional float array.

    ``tape_id`` is ``(tape, index)`` for outputs of recorded operations and
    ``None`` otherwise.
    """

    __slots__ = ("data", "requires_grad", "name", "tape_id")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.array(data, dtype=dtype, copy=True)
        if dtype is None and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.tape_id = None

    @classmethod
    def _wrap(cls, arr):
        t = cls.__new__(cls)
        arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        t.data = arr
        t.requires_grad = False
        t.name = None
        t.tape_id = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self):
        """A copy-free view that is never tracked by any tape."""
        return Tensor._wrap(self.data)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def sum(self):
        return tensor_sum(self)


class _Record:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op, inputs, output, backward):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered log of executed operations; usable as a context manager."""

    def __init__(self):
        self.id = next(_tape_ids)
        self.records = []
        self.consumed = False

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise InternalError("tape stack corrupted")
        stack.pop()
        return False

    def __len__(self):
        return len(self.records)

    def tracks(self, t):
        return t.requires_grad or (t.tape_id is not None and t.tape_id[0] == self.id)


def _check_finite(arr, op):
    if not np.isfinite(arr).all():
        raise NumericError(f"{op} produced non-finite values")


def apply_op(op, inputs, out, backward_fn):
    """Wrap ``out`` as the result of ``op`` and record it on the active tape.

    ``backward_fn(grad, needs)`` receives the output gradient and a tuple of
    booleans saying which inputs require a gradient; it returns one array (or
    ``None``) per input.
    """
    _check_finite(out, op)
    result = Tensor._wrap(out)
    tape = active_tape()
    if tape is not None and any(tape.tracks(t) for t in inputs):
        result.tape_id = (tape.id, len(tape.records))
        tape.records.append(_Record(op, tuple(inputs), result, backward_fn))
    return result


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _grad_dict_key(t):
    return id(t)


def backward(tape, loss, wrt):
    """Gradients of the scalar ``loss`` w.r.t. every tensor in ``wrt``.

    ``wrt`` is a mapping name -> Tensor (a dict of arrays is returned) or a
    sequence of tensors (a list is returned). Tensors the loss does not depend
    on receive exact zeros.
    """
    if tape.consumed:
        raise UsageError("tape has already been differentiated")
    if not isinstance(loss, Tensor) or loss.size != 1:
        raise UsageError("loss must be a scalar tensor")
    if loss.tape_id is None or loss.tape_id[0] != tape.id:
        raise UsageError("loss was not produced on this tape")

    grads = {_grad_dict_key(loss): np.ones_like(loss.data)}
    for index in range(loss.tape_id[1], -1, -1):
        rec = tape.records[index]
        g = grads.pop(_grad_dict_key(rec.output), None)
        if g is None:
            continue
        needs = []
        for t in rec.inputs:
            if t.tape_id is not None and t.tape_id[0] == tape.id and t.tape_id[1] >= index:
                raise InternalError(f"cycle in tape at operation {index} ({rec.op})")
            needs.append(tape.tracks(t))
        in_grads = rec.backward(g, tuple(needs))
        for t, need, gi in zip(rec.inputs, needs, in_grads):
            if not need or gi is None:
                continue
            key = _grad_dict_key(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    tape.consumed = True
    tape.records = []

    def lookup(t):
        g = grads.get(_grad_dict_key(t))
        if g is None:
            return np.zeros_like(t.data)
        return np.asarray(g, dtype=t.dtype).reshape(t.shape)

    if isinstance(wrt, dict):
        return {name: lookup(t) for name, t in wrt.items()}
    return [lookup(t) for t in wrt]


def finite_difference_gradient(f, at, step=1e-5):
    """Central-difference gradient of scalar ``f`` at array/Tensor ``at``.

    ``f`` receives a float64 ndarray of the same shape and returns a float or
    a single-element tensor.
    """
    x = np.array(at.data if isinstance(at, Tensor) else at, dtype=np.float64)
    grad = np.zeros(x.shape, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)

    def value(arr):
        v = f(arr)
        return v.item() if isinstance(v, Tensor) else float(v)

    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = value(x)
        flat[i] = orig - step
        down = value(x)
        flat[i] = orig
        gflat[i] = (up - down) / (2 * step)
    return grad


# ---------------------------------------------------------------------------
# elementwise and reductions


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ConfigurationError(f"add: shape mismatch {a.shape} vs {b.shape}")

    def bw(g, needs):
        return g, g

    return apply_op("add", (a, b), a.data + b.data, bw)


def mul(a, b):
    """Elementwise product of equal-shape tensors, or tensor times scalar."""
    a = as_tensor(a)
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        s = float(b)

        def bw_scalar(g, needs):
            return (g * s,)

        return apply_op("mul", (a,), a.data * a.dtype.type(s), bw_scalar)
    b = as_tensor(b, dtype=a.dtype)
    if a.shape != b.shape:
        raise ConfigurationError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    x, y = a.data, b.data

    def bw(g, needs):
        return (g * y if needs[0] else None), (g * x if needs[1] else None)

    return apply_op("mul", (a, b), x * y, bw)


def tensor_sum(a):
    a = as_tensor(a)
    shape = a.shape

    def bw(g, needs):
        return (np.broadcast_to(g.reshape(()), shape).copy(),)

    return apply_op("sum", (a,), np.asarray(a.data.sum(), dtype=a.dtype), bw)


def leaky_relu(x, alpha=0.1):
    """max(x, alpha*x); the subgradient at exactly 0 is ``alpha``."""
    x = as_tensor(x)
    positive = x.data > 0
    a = x.dtype.type(alpha)
    out = np.where(positive, x.data, x.data * a)

    def bw(g, needs):
        return (np.where(positive, g, g * a),)

    return apply_op("leaky_relu", (x,), out, bw)


# ---------------------------------------------------------------------------
# convolution


def _same_pad(arr, p):
    if p == 0:
        return np.ascontiguousarray(arr)
    return np.pad(arr, ((0, 0), (p, p), (p, p), (p, p)))


def conv3d(x, kernel, bias, stride=1):
    """Same-padded 3D cross-correlation plus bias.

    ``x`` is [C_in, D, H, W], ``kernel`` [C_out, C_in, k, k, k] with odd k,
    ``bias`` [C_out]. Each spatial extent E maps to ceil(E / stride); the
    input is zero padded by k // 2 on both sides.
    """
    x, kernel, bias = as_tensor(x), as_tensor(kernel), as_tensor(bias)
    if x.data.ndim != 4 or kernel.data.ndim != 5:
        raise ConfigurationError(f"conv3d: bad ranks input {x.shape} kernel {kernel.shape}")
    c_out, c_in, k, k2, k3 = kernel.shape
    if not (k == k2 == k3) or k % 2 == 0:
        raise ConfigurationError(f"conv3d: kernel must be cubic with odd extent, got {kernel.shape}")
    if x.shape[0] != c_in:
        raise ConfigurationError(f"conv3d: input has {x.shape[0]} channels, kernel expects {c_in}")
    if bias.shape != (c_out,):
        raise ConfigurationError(f"conv3d: bias shape {bias.shape} != ({c_out},)")
    if stride not in (1, 2):
        raise ConfigurationError(f"conv3d: stride must be 1 or 2, got {stride}")
    if min(x.shape[1:]) < 1:
        raise ConfigurationError("conv3d: empty spatial extent")
    dtype = np.result_type(x.dtype, kernel.dtype)
    p = k // 2
    xp = _same_pad(x.data.astype(dtype, copy=False), p)
    w = kernel.data.astype(dtype, copy=False)
    out = _kernels.correlate(xp, w, stride)
    out += bias.data.astype(dtype)[:, None, None, None]
    in_shape = x.shape

    def bw(g, needs):
        g = np.ascontiguousarray(g)
        n_out = g.shape[1:]
        g2 = g.reshape(c_out, -1)
        gx = gk = gb = None
        if needs[2]:
            gb = g2.sum(axis=1)
        if needs[1]:
            win = sliding_window_view(xp, (k, k, k), axis=(1, 2, 3))[:, ::stride, ::stride, ::stride]
            cols = win.transpose(0, 4, 5, 6, 1, 2, 3).reshape(c_in * k ** 3, -1)
            gk = (g2 @ cols.T).reshape(kernel.shape)
        if needs[0]:
            gcols = (w.reshape(c_out, -1).T @ g2).reshape((c_in, k, k, k) + n_out)
            gxp = np.zeros(xp.shape, dtype=dtype)
            dd, hh, ww = n_out
            for a in range(k):
                for b in range(k):
                    for c in range(k):
                        gxp[:, a:a + stride * dd:stride, b:b + stride * hh:stride,
                            c:c + stride * ww:stride] += gcols[:, a, b, c]
            gx = gxp[:, p:p + in_shape[1], p:p + in_shape[2], p:p + in_shape[3]]
        return gx, gk, gb

    return apply_op("conv3d", (x, kernel, bias), out, bw)


# ---------------------------------------------------------------------------
# batch normalisation


class RunningStats:
    """Per-channel running mean/variance updated by exponential moving average."""

    def __init__(self, channels, dtype=DEFAULT_DTYPE, momentum=BN_MOMENTUM):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)
        self.momentum = momentum

    def update(self, mean, var):
        m = self.momentum
        self.mean = (m * self.mean + (1 - m) * mean).astype(self.mean.dtype)
        self.var = (m * self.var + (1 - m) * var).astype(self.var.dtype)

    def copy(self):
        other = RunningStats(self.mean.shape[0], self.mean.dtype, self.momentum)
        other.mean = self.mean.copy()
        other.var = self.var.copy()
        return other


def batch_norm(x, gamma, beta, running=None, training=True, eps=BN_EPS):
    """Per-channel normalisation over the D*H*W positions of a [C,D,H,W] tensor.

    In training mode batch statistics are used (population variance) and
    ``running`` is updated if given; in inference mode ``running`` supplies the
    statistics.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.shape[0]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ConfigurationError(f"batch_norm: gamma/beta must have shape ({c},)")
    n = int(np.prod(x.shape[1:]))
    if n == 0:
        raise ConfigurationError("batch_norm: zero spatial extent")
    bshape = (c,) + (1,) * (x.data.ndim - 1)
    xd = x.data
    g_ = gamma.data.reshape(bshape)
    axes = tuple(range(1, xd.ndim))

    if training:
        mean = xd.mean(axis=axes)
        centered = xd - mean.reshape(bshape)
        var = (centered * centered).mean(axis=axes)
        inv_std = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
        xhat = centered * inv_std.reshape(bshape)
        if running is not None:
            running.update(mean, var)
    else:
        if running is None:
            raise UsageError("batch_norm: inference mode needs running statistics")
        inv_std = (1.0 / np.sqrt(running.var + eps)).astype(xd.dtype)
        xhat = (xd - running.mean.astype(xd.dtype).reshape(bshape)) * inv_std.reshape(bshape)
    out = xhat * g_ + beta.data.reshape(bshape)

    def bw(g, needs):
        gx = gg = gbeta = None
        if needs[2]:
            gbeta = g.sum(axis=axes)
        if needs[1]:
            gg = (g * xhat).sum(axis=axes)
        if needs[0]:
            dxhat = g * g_
            if training:
                s1 = dxhat.sum(axis=axes).reshape(bshape)
                s2 = (dxhat * xhat).sum(axis=axes).reshape(bshape)
                gx = (dxhat - s1 / n - xhat * (s2 / n)) * inv_std.reshape(bshape)
            else:
                gx = dxhat * inv_std.reshape(bshape)
        return gx, gg, gbeta

    return apply_op("batch_norm", (x, gamma, beta), out, bw)


# ---------------------------------------------------------------------------
# upsampling and softmax


def upsample_weights(extent):
    """Source indices and blend fractions for doubling one axis.

    Output index o samples input coordinate (o + 0.5) / 2 - 0.5 (half-voxel
    centres), clamped to [0, extent - 1].
    """
    src = np.clip((np.arange(2 * extent) + 0.5) / 2 - 0.5, 0.0, extent - 1.0)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, extent - 1)
    return i0, i1, src - i0


def upsample_matrix(extent):
    """Dense [2E, E] form of :func:`upsample_weights` (used for the adjoint)."""
    i0, i1, f = upsample_weights(extent)
    m = np.zeros((2 * extent, extent))
    rows = np.arange(2 * extent)
    np.add.at(m, (rows, i0), 1.0 - f)
    np.add.at(m, (rows, i1), f)
    return m


def _lerp_axis(arr, axis, extent):
    i0, i1, f = upsample_weights(extent)
    shape = [1] * arr.ndim
    shape[axis] = f.size
    f = f.astype(arr.dtype).reshape(shape)
    a = np.take(arr, i0, axis=axis)
    b = np.take(arr, i1, axis=axis)
    # a + f*(b - a) keeps constants exact and stays within [min(a,b), max(a,b)]
    return a + f * (b - a)


def upsample2x(x):
    """Trilinear 2x upsampling of a [C, D, H, W] tensor."""
    x = as_tensor(x)
    if x.data.ndim != 4 or min(x.shape[1:]) < 1:
        raise ConfigurationError(f"upsample2x: expected [C,D,H,W] with positive extents, got {x.shape}")
    extents = x.shape[1:]
    out = x.data
    for axis, e in zip((1, 2, 3), extents):
        out = _lerp_axis(out, axis, e)

    def bw(g, needs):
        for axis, e in zip((1, 2, 3), extents):
            m = upsample_matrix(e).astype(g.dtype)
            g = np.moveaxis(np.moveaxis(g, axis, -1) @ m, -1, axis)
        return (g,)

    return apply_op("upsample2x", (x,), out, bw)


def softmax_channels(x):
    """Softmax over axis 0 with max subtraction."""
    x = as_tensor(x)
    if x.shape[0] < 2:
        raise ConfigurationError("softmax_channels: need at least two channels")
    z = x.data - x.data.max(axis=0, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=0, keepdims=True)

    def bw(g, needs):
        return (p * (g - (g * p).sum(axis=0, keepdims=True)),)

    return apply_op("softmax_channels", (x,), p, bw)
