"""
Minimal reverse-mode differentiation over numpy arrays.

Operations executed while a :class:`Tape` is active, and touching at least one
tensor that requires gradients, are appended to that tape together with a
closure that propagates the output gradient to the inputs. ``backward`` then
walks the tape once, in reverse. With no active tape nothing is recorded, which
is how inference runs.

Only the operators needed by the residual ECG network are provided:
``conv1d_same`` (kernel 5, stride 1, zero "same" padding, cross-correlation),
``relu``, ``maxpool1d`` (size 5, stride 2), ``residual_add``,
``fully_connected``, ``flatten`` and ``softmax_cross_entropy``. Every operator
accepts either a single example or a leading batch axis.
"""

from __future__ import annotations

import threading

import numpy as np

KERNEL = 5
PAD = KERNEL // 2
POOL_SIZE = 5
POOL_STRIDE = 2


class AutodiffError(ValueError):
    pass


class ShapeError(AutodiffError):
    pass


class TapeError(AutodiffError):
    pass


class Tensor:
    """An array with an optional gradient accumulator."""

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.name = name
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def backward(self):
        backward(self)

    def numpy(self):
        return self.data

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


class _Op:
    __slots__ = ("out", "inputs", "grad_fn")

    def __init__(self, out, inputs, grad_fn):
        self.out = out
        self.inputs = inputs
        self.grad_fn = grad_fn


_local = threading.local()


def _stack():
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def active_tape():
    stack = _stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of differentiable operations for one backward pass."""

    def __init__(self):
        self.ops = []
        self.consumed = False

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _stack()
        if not stack or stack[-1] is not self:
            raise TapeError("tapes must be exited in LIFO order")
        stack.pop()
        return False

    def __len__(self):
        return len(self.ops)

    def record(self, out, inputs, grad_fn):
        out._tape = self
        out._position = len(self.ops)
        self.ops.append(_Op(out, inputs, grad_fn))

    def backward(self, loss):
        if loss.data.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise TapeError("loss was not produced on this tape")
        if self.consumed:
            raise TapeError("tape has already been replayed")
        self.consumed = True
        loss.grad = np.ones_like(loss.data)
        for op in reversed(self.ops[:loss._position + 1]):
            if op.out.grad is None:
                continue  # not an ancestor of the loss
            grads = op.grad_fn(op.out.grad)
            for inp, g in zip(op.inputs, grads):
                if not inp.requires_grad or g is None:
                    continue
                if inp.grad is None:
                    inp.grad = np.array(g, dtype=inp.dtype)
                else:
                    inp.grad += g


def backward(loss):
    """Populate ``.grad`` of every tensor the scalar ``loss`` depends on."""
    if loss.data.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        raise TapeError("loss was not recorded on a tape (was a Tape active during forward?)")
    loss._tape.backward(loss)


def _result(data, inputs, grad_fn):
    tape = active_tape()
    out = Tensor(data)
    if tape is not None and any(t.requires_grad for t in inputs):
        # intermediate gradients are allocated during backward
        out.requires_grad = True
        tape.record(out, inputs, grad_fn)
    return out


def _batched(x, core_ndim):
    """View ``x`` with a leading batch axis; returns (array, was_unbatched)."""
    if x.ndim == core_ndim:
        return x[None], True
    if x.ndim == core_ndim + 1:
        return x, False
    raise ShapeError(f"expected {core_ndim} or {core_ndim + 1} dimensions, got shape {x.shape}")


def _unfold(xp, length, flip=False):
    """``cols[n, c, k, t] = xp[n, c, t + k]`` (``t + K - 1 - k`` if flipped), contiguous."""
    n, c, _ = xp.shape
    cols = np.empty((n, c, KERNEL, length), dtype=xp.dtype)
    for k in range(KERNEL):
        s = KERNEL - 1 - k if flip else k
        cols[:, :, k, :] = xp[:, :, s:s + length]
    return cols


def conv1d_same(x, w, b):
    """Length-preserving 1-D cross-correlation.

    ``x``: (C_in, L) or (N, C_in, L); ``w``: (C_out, C_in, 5); ``b``: (C_out,).
    ``out[o, t] = b[o] + sum_{c,k} w[o, c, k] * x_padded[c, t + k]``.
    """
    xd, single = _batched(x.data, 2)
    wd, bd = w.data, b.data
    if wd.ndim != 3:
        raise ShapeError(f"kernel must be (C_out, C_in, K), got shape {wd.shape}")
    if wd.shape[2] != KERNEL:
        raise ShapeError(f"kernel size (dim 2) must be {KERNEL}, got {wd.shape[2]}")
    if wd.shape[1] != xd.shape[1]:
        raise ShapeError(f"input channels mismatch: x has {xd.shape[1]} (dim 1), kernel expects {wd.shape[1]}")
    if bd.shape != (wd.shape[0],):
        raise ShapeError(f"bias shape {bd.shape} does not match output channels {wd.shape[0]} (dim 0)")
    n, c_in, length = xd.shape
    c_out = wd.shape[0]
    xp = np.zeros((n, c_in, length + 2 * PAD), dtype=xd.dtype)
    xp[:, :, PAD:PAD + length] = xd
    cols = _unfold(xp, length).reshape(n, c_in * KERNEL, length)
    wmat = wd.reshape(c_out, c_in * KERNEL)
    wflip = wd.transpose(1, 0, 2).reshape(c_in, c_out * KERNEL)
    out = wmat @ cols + bd[None, :, None]

    def grad_fn(g):
        gb = g[None] if single else g
        dw = (gb @ cols.transpose(0, 2, 1)).sum(axis=0).reshape(wd.shape)
        db = gb.sum(axis=(0, 2))
        # input gradient = correlation of the padded output gradient with the flipped kernel
        gp = np.zeros((n, c_out, length + 2 * PAD), dtype=gb.dtype)
        gp[:, :, PAD:PAD + length] = gb
        gcols = _unfold(gp, length, flip=True).reshape(n, c_out * KERNEL, length)
        dx = wflip @ gcols
        return (dx[0] if single else dx), dw, db

    return _result(out[0] if single else out, (x, w, b), grad_fn)


def relu(x):
    mask = x.data > 0
    out = np.maximum(x.data, 0)
    return _result(out, (x,), lambda g: (g * mask,))


def maxpool1d(x):
    """Max over windows of 5 with stride 2 along the last axis, no padding.

    Gradient goes to the first (lowest-index) maximum of each window.
    """
    xd, single = _batched(x.data, 2)
    length = xd.shape[-1]
    if length < POOL_SIZE:
        raise ShapeError(f"pooling needs length >= {POOL_SIZE}, got {length}")
    n_out = (length - POOL_SIZE) // POOL_STRIDE + 1
    span = POOL_STRIDE * (n_out - 1) + 1
    taps = [xd[:, :, k:k + span:POOL_STRIDE] for k in range(POOL_SIZE)]
    out = taps[0]
    for t in taps[1:]:
        out = np.maximum(out, t)
    # descending sweep leaves the lowest maximal tap
    arg = np.full(out.shape, POOL_SIZE - 1, dtype=np.int8)
    for k in range(POOL_SIZE - 2, -1, -1):
        arg = np.where(taps[k] == out, np.int8(k), arg)

    def grad_fn(g):
        gb = g[None] if single else g
        dx = np.zeros_like(xd)
        for k in range(POOL_SIZE):
            dx[:, :, k:k + span:POOL_STRIDE] += np.where(arg == k, gb, 0)
        return (dx[0] if single else dx,)

    return _result(out[0] if single else out, (x,), grad_fn)


def residual_add(x, y):
    if x.shape != y.shape:
        raise ShapeError(f"residual_add shape mismatch {x.shape} vs {y.shape}")
    return _result(x.data + y.data, (x, y), lambda g: (g, g))


def fully_connected(x, w, b):
    """``w @ x + b`` for x of shape (D_in,) or (N, D_in)."""
    xd, single = _batched(x.data, 1)
    if w.data.ndim != 2 or w.data.shape[1] != xd.shape[1]:
        raise ShapeError(f"weight shape {w.shape} (dim 1) does not match input width {xd.shape[1]}")
    if b.data.shape != (w.data.shape[0],):
        raise ShapeError(f"bias shape {b.shape} does not match output width {w.data.shape[0]} (dim 0)")
    out = xd @ w.data.T + b.data

    def grad_fn(g):
        gb = g[None] if single else g
        dx = gb @ w.data
        return (dx[0] if single else dx), gb.T @ xd, gb.sum(axis=0)

    return _result(out[0] if single else out, (x, w, b), grad_fn)


def flatten(x, batched=None):
    """Collapse all non-batch axes. ``batched`` defaults to ``x.ndim == 3``."""
    if batched is None:
        batched = x.data.ndim == 3
    shape = x.shape
    out = x.data.reshape(shape[0], -1) if batched else x.data.reshape(-1)
    return _result(out, (x,), lambda g: (g.reshape(shape),))


def softmax(logits):
    """Row-wise softmax of a plain array (no gradient)."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean of ``-log softmax(logits)[label]`` over the batch."""
    zd, single = _batched(logits.data, 1)
    y = np.atleast_1d(np.asarray(labels))
    if not np.issubdtype(y.dtype, np.integer):
        raise AutodiffError(f"labels must be integers, got dtype {y.dtype}")
    if y.shape != (zd.shape[0],):
        raise ShapeError(f"{y.shape[0]} labels for {zd.shape[0]} rows of logits")
    k = zd.shape[1]
    if y.size and (y.min() < 0 or y.max() >= k):
        raise AutodiffError(f"label out of range [0, {k})")
    z = zd - zd.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(zd.shape[0])
    loss = np.mean(log_norm - z[rows, y]).astype(zd.dtype)

    def grad_fn(g):
        p = np.exp(z - log_norm[:, None])
        p[rows, y] -= 1
        d = p * (g / zd.shape[0])
        return (d[0] if single else d,)

    return _result(np.asarray(loss), (logits,), grad_fn)
