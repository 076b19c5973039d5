"""Minimal dense tensors with tape-based reverse-mode differentiation.

Values are numpy arrays (float32 or float64).  Ops are module-level pure
functions; while a GradientTape is active they record backward closures so
that a single backward pass yields gradients for every tensor that
participated.  Broadcasting is restricted to the trailing axis (bias add,
layer-norm parameters) -- the model needs nothing more general.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ContractError, ShapeError

_ACTIVE_TAPES: list["GradientTape"] = []


class Tensor:
    """Dense n-d array of floats, row-major, immutable by convention."""

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class GradientTape:
    """Records ops in execution order; backward() fills per-tensor gradients.

    One tape per training step, single-threaded.  Use as a context manager:

        with GradientTape() as tape:
            loss = ...
        grads = gradients_of(loss, tape)
    """

    def __init__(self):
        self._records = []  # (out, inputs, backward_fn)
        self._tracked = set()
        self._grads = {}
        self._keepalive = []

    def __enter__(self):
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPES.remove(self)
        return False

    def _watches(self, t):
        return t.requires_grad or id(t) in self._tracked

    def _record(self, out, inputs, backward_fn):
        self._records.append((out, inputs, backward_fn))
        self._tracked.add(id(out))
        self._keepalive.extend(inputs)

    def backward(self, loss):
        if loss.data.size != 1:
            raise ContractError(f"loss must be scalar, got shape {loss.shape}")
        grads = {id(loss): np.ones_like(loss.data)}
        for out, inputs, backward_fn in reversed(self._records):
            g = grads.get(id(out))
            if g is None:
                continue
            for t, gin in zip(inputs, backward_fn(g)):
                if gin is None:
                    continue
                acc = grads.get(id(t))
                grads[id(t)] = gin if acc is None else acc + gin
        self._grads = grads

    def gradient(self, t):
        """Gradient of the last backward()'s loss w.r.t. tensor t."""
        g = self._grads.get(id(t))
        if g is None:
            return np.zeros_like(t.data)
        return g.reshape(t.data.shape)


def gradients_of(loss, tape):
    """Run backward on the tape; returns a lookup fn tensor -> gradient."""
    tape.backward(loss)
    return tape.gradient


def _active_tape(*tensors):
    if not _ACTIVE_TAPES:
        return None
    tape = _ACTIVE_TAPES[-1]
    if any(isinstance(t, Tensor) and tape._watches(t) for t in tensors):
        return tape
    return None


def _unbroadcast_trailing(g, shape):
    # reduce a full-shape gradient down to a trailing-axis parameter shape
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    return g.sum(axis=tuple(range(extra))).reshape(shape)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes incompatible: {a.shape} x {b.shape}")
    out = Tensor(a.data @ b.data)
    tape = _active_tape(a, b)
    if tape is not None:
        ad, bd = a.data, b.data
        tape._record(out, (a, b), lambda g: (g @ bd.T, ad.T @ g))
    return out


def add(a: Tensor, b) -> Tensor:
    """Elementwise add; b may be a same-shape Tensor, a trailing-axis
    parameter (1-d of length a.shape[-1]), or a plain constant array."""
    b_t = b if isinstance(b, Tensor) else None
    bd = b.data if b_t is not None else np.asarray(b)
    if bd.shape != a.shape and bd.shape != a.shape[-1:] and bd.size != 1:
        raise ShapeError(f"add shapes incompatible: {a.shape} + {bd.shape}")
    out = Tensor(a.data + bd)
    tape = _active_tape(a, b_t)
    if tape is not None:
        bshape = bd.shape

        def backward(g):
            gb = _unbroadcast_trailing(g, bshape) if b_t is not None else None
            return (g, gb)

        tape._record(out, (a, b_t) if b_t is not None else (a,),
                     backward if b_t is not None else (lambda g: (g,)))
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, mul(b, -1.0))


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product; b may be a Tensor, scalar, or constant array
    (same shape or trailing-axis)."""
    b_t = b if isinstance(b, Tensor) else None
    bd = b.data if b_t is not None else np.asarray(b)
    if bd.shape not in (a.shape, a.shape[-1:], ()) and bd.size != 1:
        raise ShapeError(f"mul shapes incompatible: {a.shape} * {bd.shape}")
    out = Tensor(a.data * bd)
    tape = _active_tape(a, b_t)
    if tape is not None:
        ad = a.data
        if b_t is not None:
            bshape = bd.shape
            tape._record(out, (a, b_t),
                         lambda g: (g * bd, _unbroadcast_trailing(g * ad, bshape)))
        else:
            tape._record(out, (a,), lambda g: (g * bd,))
    return out


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0.0))
    tape = _active_tape(x)
    if tape is not None:
        pos = x.data > 0
        tape._record(out, (x,), lambda g: (g * pos,))
    return out


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {x.shape}")
    out = Tensor(x.data.T.copy())
    tape = _active_tape(x)
    if tape is not None:
        tape._record(out, (x,), lambda g: (g.T,))
    return out


def concat_last(parts) -> Tensor:
    parts = list(parts)
    out = Tensor(np.concatenate([p.data for p in parts], axis=-1))
    tape = _active_tape(*parts)
    if tape is not None:
        sizes = [p.shape[-1] for p in parts]
        splits = np.cumsum(sizes)[:-1]
        tape._record(out, tuple(parts),
                     lambda g: tuple(np.split(g, splits, axis=-1)))
    return out


def split_last(x: Tensor, sizes) -> list:
    if sum(sizes) != x.shape[-1]:
        raise ShapeError(f"split sizes {sizes} do not cover last dim {x.shape[-1]}")
    splits = np.cumsum(sizes)[:-1]
    pieces = np.split(x.data, splits, axis=-1)
    outs = [Tensor(p.copy()) for p in pieces]
    tape = _active_tape(x)
    if tape is not None:
        offs = np.concatenate([[0], np.cumsum(sizes)])
        for i, out in enumerate(outs):
            lo, hi = int(offs[i]), int(offs[i + 1])

            def backward(g, lo=lo, hi=hi):
                full = np.zeros_like(x.data)
                full[..., lo:hi] = g
                return (full,)

            tape._record(out, (x,), backward)
    return outs


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    out = Tensor(table.data[ids])
    tape = _active_tape(table)
    if tape is not None:
        def backward(g):
            gt = np.zeros_like(table.data)
            np.add.at(gt, ids, g)
            return (gt,)

        tape._record(out, (table,), backward)
    return out


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax over the last axis, stabilized by max subtraction."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(p)
    tape = _active_tape(x)
    if tape is not None:
        tape._record(out, (x,),
                     lambda g: (p * (g - (g * p).sum(axis=-1, keepdims=True)),))
    return out


def masked_softmax_rows(x: Tensor, mask) -> Tensor:
    """Softmax over allowed entries only; disallowed entries are exactly 0.

    mask: boolean array, True = allowed.  A fully-masked row is a contract
    violation (the distribution would be undefined).
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape:
        raise ShapeError(f"mask shape {mask.shape} != input shape {x.shape}")
    if not mask.any(axis=-1).all():
        raise ContractError("masked_softmax_rows: a row has all positions masked")
    neg = np.where(mask, x.data, -np.inf)
    z = neg - neg.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(p)
    tape = _active_tape(x)
    if tape is not None:
        tape._record(out, (x,),
                     lambda g: (p * (g - (g * p).sum(axis=-1, keepdims=True)),))
    return out


def log_softmax_rows(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = Tensor(z - lse)
    tape = _active_tape(x)
    if tape is not None:
        p = np.exp(z - lse)
        tape._record(out, (x,),
                     lambda g: (g - p * g.sum(axis=-1, keepdims=True),))
    return out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize each trailing-axis vector to zero mean / unit variance,
    then scale by gamma and shift by beta."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layer_norm params {gamma.shape}/{beta.shape} do not match dim {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = Tensor(gamma.data * xhat + beta.data)
    tape = _active_tape(x, gamma, beta)
    if tape is not None:
        def backward(g):
            dgamma = _unbroadcast_trailing(g * xhat, gamma.shape)
            dbeta = _unbroadcast_trailing(g, beta.shape)
            dxhat = g * gamma.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            dx = inv * (dxhat - m1 - xhat * m2)
            return (dx, dgamma, dbeta)

        tape._record(out, (x, gamma, beta), backward)
    return out


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(np.asarray(x.data.sum(), dtype=x.dtype))
    tape = _active_tape(x)
    if tape is not None:
        tape._record(out, (x,), lambda g: (np.full_like(x.data, float(g)),))
    return out


def scale(x: Tensor, c: float) -> Tensor:
    return mul(x, float(c))


def glorot(rng, fan_in, fan_out, dtype=np.float64):
    """Glorot-uniform weight matrix."""
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)
