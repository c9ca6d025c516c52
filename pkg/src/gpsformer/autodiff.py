"""Dense numpy tensors with tape-based reverse-mode differentiation.

Only the operations the point networks in this package need are provided.
Operations record themselves on the innermost active :class:`Tape`; outside a
tape nothing is recorded, which is how inference runs.

    with Tape() as tape:
        loss = cross_entropy(model(x), y)
    tape.backward(loss)
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .errors import AggregationError, GatherIndexError, NonFiniteError, ShapeError, ConfigError

_local = threading.local()

# Flip on in tests / debugging; every op output is then checked for NaN/Inf.
CHECK_FINITE = False


def _tapes():
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def current_tape():
    stack = _tapes()
    return stack[-1] if stack else None


@dataclass
class _Record:
    out: "Tensor"
    parents: tuple
    backward: object


class Tape:
    """Ordered log of differentiable operations executed while active."""

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self):
        _tapes().append(self)
        return self

    def __exit__(self, *exc):
        _tapes().pop()
        return False

    def __len__(self):
        return len(self.records)

    def record(self, out, parents, backward):
        self.records.append(_Record(out, parents, backward))

    def backward(self, loss: "Tensor", grad=None):
        """Accumulate d(loss)/d(leaf) into every leaf's ``grad``.

        Intermediate gradients are reset first, so calling this twice on the
        same tape (after zeroing leaves) reproduces identical gradients.
        """
        for rec in self.records:
            rec.out.grad = None
        if grad is None:
            grad = np.ones_like(loss.data)
        loss.grad = np.asarray(grad, dtype=loss.data.dtype).reshape(loss.shape)
        for rec in reversed(self.records):
            g = rec.out.grad
            if g is None:
                continue
            grads = rec.backward(g)
            for parent, pg in zip(rec.parents, grads):
                if pg is None or not parent.requires_grad:
                    continue
                parent._accumulate(pg)

    def clear(self):
        self.records.clear()

    @staticmethod
    def zero_grad(tensors):
        for t in tensors:
            t.grad = None


@contextlib.contextmanager
def no_grad():
    """Suspend recording, even inside an enclosing tape."""
    stack = _tapes()
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


@dataclass
class FlopCounter:
    macs: int = 0
    by_op: dict = field(default_factory=dict)

    def add(self, op, n):
        self.macs += int(n)
        self.by_op[op] = self.by_op.get(op, 0) + int(n)


@contextlib.contextmanager
def count_flops():
    """Count multiply-accumulates of linear and matmul ops run inside the block."""
    prev = getattr(_local, "flops", None)
    counter = FlopCounter()
    _local.flops = counter
    try:
        yield counter
    finally:
        _local.flops = prev


def _count(op, n):
    counter = getattr(_local, "flops", None)
    if counter is not None:
        counter.add(op, n)


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def _accumulate(self, g):
        g = np.asarray(g, dtype=self.data.dtype)
        if g.shape != self.data.shape:
            g = np.ascontiguousarray(np.broadcast_to(g, self.data.shape))
        if self.grad is None:
            # gradients are never written in place, so sharing the buffer is safe
            self.grad = g
        else:
            self.grad = self.grad + g

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data, parents, backward):
    if CHECK_FINITE and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced (shape {data.shape})")
    tape = current_tape()
    needs = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.record(out, tuple(parents), backward)
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _pair(a, b):
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return as_tensor(a), as_tensor(b)


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = _pair(a, b)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(out, (a, b), backward)


def sub(a, b):
    a, b = _pair(a, b)
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _result(out, (a, b), backward)


def mul(a, b):
    a, b = _pair(a, b)
    out = a.data * b.data

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), backward)


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype, copy=False)

    def backward(g):
        return (g * mask,)

    return _result(out, (x,), backward)


def signed_power(u, s, p):
    """Elementwise ``sign(u)**s * |u|**p`` with a learnable scalar exponent.

    ``|u|`` is clamped below by ``EPS_POW`` inside the power and in the
    log used for the exponent gradient. ``sign(0) == 0`` when ``s == 1``;
    for ``s == 0`` the sign factor is the constant 1.
    """
    u = as_tensor(u)
    p = as_tensor(p)
    if p.data.size != 1 or p.ndim > 1:
        raise ShapeError(f"signed_power exponent must be a scalar, got shape {p.shape}")
    if s not in (0, 1):
        raise ConfigError(f"signed_power s must be 0 or 1, got {s!r}")
    pv = p.data.reshape(())
    a = np.maximum(np.abs(u.data), EPS_POW)
    mag = a ** pv
    sgn = np.sign(u.data)
    out = sgn * mag if s == 1 else mag
    out = out.astype(u.dtype, copy=False)

    def backward(g):
        gu = gp = None
        if u.requires_grad:
            coeff = 1.0 if s == 1 else sgn
            gu = g * coeff * pv * a ** (pv - 1)
        if p.requires_grad:
            gp = np.sum(g * out * np.log(a)).reshape(p.shape)
        return gu, gp

    return _result(out, (u, p), backward)


EPS_POW = 1e-6


# -------------------------------------------------------------- linear algebra

def matmul(a, b):
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)
    _count("matmul", out.size * a.shape[-1])

    def backward(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), backward)


def linear(x, w, b=None):
    """``x @ w + b`` over the last axis of ``x``; leading axes are batch axes."""
    x = as_tensor(x)
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias {b.shape} does not match weight {w.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, w.shape[0])
    out = x2 @ w.data
    if b is not None:
        out = out + b.data
    _count("linear", x2.shape[0] * w.shape[0] * w.shape[1])
    out = out.reshape(*lead, w.shape[1])
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        g2 = g.reshape(-1, w.shape[1])
        gx = (g2 @ w.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _result(out, parents, backward)


def softmax(x, axis=-1):
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), backward)


# ------------------------------------------------------------------ reductions

def tsum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _result(out, (x,), backward)


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis, keepdims), 1.0 / n)


def masked_max_pool(x, valid=None, axis=-2):
    """Per-channel max over ``axis`` (the neighbour axis) restricted to valid slots.

    ``valid`` has the shape of ``x`` without its channel axis. Gradient goes to
    the first maximal entry only.
    """
    x = as_tensor(x)
    axis = axis % x.ndim
    if axis != x.ndim - 2:
        raise ShapeError("masked_max_pool reduces the second-to-last axis")
    data = x.data
    if valid is not None:
        valid = np.asarray(valid, dtype=bool)
        if valid.shape != x.shape[:-1]:
            raise ShapeError(f"mask shape {valid.shape} does not match input {x.shape}")
        if not valid.all():
            nonempty = valid.any(axis=-1)
            if not nonempty.all():
                group = tuple(int(i) for i in np.argwhere(~nonempty)[0])
                raise AggregationError(f"empty neighbour group at index {group}")
            data = np.where(valid[..., None], data, -np.inf)
    elif x.shape[axis] == 0:
        raise AggregationError("cannot pool over an empty axis")
    arg = np.argmax(data, axis=axis)
    out = np.take_along_axis(x.data, arg[..., None, :], axis=axis)[..., 0, :]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, arg[..., None, :], g[..., None, :], axis=axis)
        return (gx,)

    return _result(out, (x,), backward)


# -------------------------------------------------------------- shape plumbing

def reshape(x, shape):
    x = as_tensor(x)
    out = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(x.shape),)

    return _result(out, (x,), backward)


def swapaxes(x, a, b):
    x = as_tensor(x)
    out = np.swapaxes(x.data, a, b)

    def backward(g):
        return (np.swapaxes(g, a, b),)

    return _result(out, (x,), backward)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _result(out, tuple(tensors), backward)


def gather_rows(x, idx):
    """Row gather: ``out[..., k, :] = x[idx[..., k], :]``.

    ``x`` is ``[N, C]`` with any-shaped ``idx``, or batched ``[B, N, C]`` with
    ``idx`` of shape ``[B, ...]``. The backward pass scatter-adds.
    """
    x = as_tensor(x)
    idx = np.asarray(idx)
    if not np.issubdtype(idx.dtype, np.integer):
        raise GatherIndexError(f"gather indices must be integers, got {idx.dtype}")
    if x.ndim == 2:
        n, c = x.shape
        flat = idx.reshape(-1)
        batched = False
    elif x.ndim == 3:
        bsz, n, c = x.shape
        if idx.shape[0] != bsz:
            raise ShapeError(f"gather batch mismatch: x {x.shape}, idx {idx.shape}")
        offs = (np.arange(bsz) * n).reshape((bsz,) + (1,) * (idx.ndim - 1))
        batched = True
    else:
        raise ShapeError(f"gather_rows expects a 2-D or 3-D source, got {x.shape}")
    if idx.size:
        lo, hi = idx.min(), idx.max()
        if lo < 0 or hi >= n:
            bad = lo if lo < 0 else hi
            raise GatherIndexError(f"gather index {int(bad)} out of range for {n} rows")
    if batched:
        flat = (idx + offs).reshape(-1)
        out = x.data.reshape(-1, c)[flat].reshape(idx.shape + (c,))
    else:
        out = x.data[flat].reshape(idx.shape + (c,))

    def backward(g):
        rows = x.data.size // c
        g2 = g.reshape(-1, c)
        scatter = sparse.csr_matrix(
            (np.ones(flat.size, dtype=g2.dtype), (flat, np.arange(flat.size))),
            shape=(rows, flat.size),
        )
        return (np.asarray(scatter @ g2).reshape(x.shape),)

    return _result(out, (x,), backward)


# ------------------------------------------------------------------ normalisers

def _colsum(x2):
    return np.ones(x2.shape[0], dtype=x2.dtype) @ x2


def batch_norm(x, gamma, beta, running_mean, running_var, training, momentum=0.1, eps=1e-5):
    """Per-channel normalisation over every axis but the last.

    ``running_mean``/``running_var`` are plain arrays updated in place when
    ``training`` is true.
    """
    x = as_tensor(x)
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: {c} channels but gamma {gamma.shape}, beta {beta.shape}")
    x2 = x.data.reshape(-1, c)
    n = x2.shape[0]
    if training:
        mu = _colsum(x2) / n
        centred = x2 - mu
        var = _colsum(centred * centred) / n
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (n / max(n - 1, 1))
    else:
        mu, var = running_mean.astype(x.dtype), running_var
        centred = x2 - mu
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    scale = gamma.data * inv
    out = centred * scale
    out += beta.data
    out = out.reshape(x.shape)

    def backward(g):
        g2 = g.reshape(-1, c)
        s1 = _colsum(g2)
        s2 = _colsum(g2 * centred) * inv
        gx = None
        if x.requires_grad:
            if training:
                k = scale / n
                gx = g2 * (k * n)
                gx -= centred * (k * inv * s2)
                gx -= k * s1
            else:
                gx = g2 * scale
            gx = gx.reshape(x.shape)
        return gx, s2, s1

    return _result(out, (x, gamma, beta), backward)


def dropout(x, rate, rng, training):
    x = as_tensor(x)
    if not training or rate <= 0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return mul(x, keep)


# ------------------------------------------------------------------------ loss

def cross_entropy(logits, targets, label_smoothing=0.0):
    """Mean cross-entropy of ``logits[..., C]`` against integer ``targets[...]``."""
    logits = as_tensor(logits)
    targets = np.asarray(targets)
    c = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"targets {targets.shape} do not match logits {logits.shape}")
    z = logits.data.reshape(-1, c).astype(np.float64)
    t = targets.reshape(-1)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    q = np.full_like(logp, label_smoothing / c)
    q[np.arange(t.size), t] += 1.0 - label_smoothing
    loss = -(q * logp).sum() / t.size
    out = np.asarray(loss, dtype=logits.dtype)

    def backward(g):
        gl = (np.exp(logp) - q) / t.size * g
        return (gl.astype(logits.dtype).reshape(logits.shape),)

    return _result(out, (logits,), backward)
