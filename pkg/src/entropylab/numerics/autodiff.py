"""Reverse-mode tape (with optional forward tangents) over a closed primitive set.

Every primitive computes its value with plain numpy, optionally propagates a
forward-mode tangent, and, when any input lives on a tape, records a
vector-Jacobian closure.  Arrays may carry leading batch axes.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .params import ParamVector


class TapeError(RuntimeError):
    pass


class NonFiniteError(ValueError):
    pass


def _digest(arr: np.ndarray) -> bytes:
    return hashlib.blake2b(np.ascontiguousarray(arr).tobytes(), digest_size=16).digest()


class Tensor:
    __slots__ = ("value", "tangent", "tape", "uid")

    def __init__(self, value, tangent=None, tape=None, uid=-1):
        self.value = value
        self.tangent = tangent
        self.tape = tape
        self.uid = uid

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, tracked={self.tape is not None})"


class Tape:
    """Single-use record of one forward pass.

    Backward sweeps may be repeated (one per seed) as long as the parameter
    arrays registered with :meth:`param` are left untouched.
    """

    def __init__(self):
        self._records: list[tuple[int, tuple[Tensor, ...], object]] = []
        self._params: dict[str, tuple[Tensor, np.ndarray, bytes]] = {}
        self._next_uid = 0

    def _uid(self) -> int:
        self._next_uid += 1
        return self._next_uid

    def param(self, name: str, value: np.ndarray, tangent=None) -> Tensor:
        if name in self._params:
            raise TapeError(f"parameter {name!r} registered twice")
        t = Tensor(value, tangent, self, self._uid())
        self._params[name] = (t, value, _digest(value))
        return t

    def params(self, pv: ParamVector, tangents: ParamVector | None = None) -> dict[str, Tensor]:
        return {k: self.param(k, v, None if tangents is None else tangents[k]) for k, v in pv.items()}

    def _record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp) -> None:
        out.tape = self
        out.uid = self._uid()
        self._records.append((out.uid, inputs, vjp))

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, output: Tensor, seed=1.0) -> ParamVector:
        """Exact reverse-mode gradient of ``sum(seed * output)`` w.r.t. every parameter."""
        if output.tape is not self:
            raise TapeError("output tensor was not recorded on this tape")
        for name, (_, arr, dig) in self._params.items():
            if _digest(arr) != dig:
                raise TapeError(f"parameter {name!r} was mutated after the forward pass")
        grads: dict[int, np.ndarray] = {output.uid: np.broadcast_to(np.asarray(seed, dtype=np.float64),
                                                                    output.value.shape).copy()}
        for uid, inputs, vjp in reversed(self._records):
            g = grads.pop(uid, None)
            if g is None:
                continue
            for inp, gi in zip(inputs, vjp(g)):
                if gi is None or inp.tape is not self:
                    continue
                if inp.uid in grads:
                    grads[inp.uid] = grads[inp.uid] + gi
                else:
                    grads[inp.uid] = gi
        out = {}
        for name, (t, arr, _) in self._params.items():
            g = grads.get(t.uid)
            out[name] = np.zeros_like(arr) if g is None else g
        return ParamVector(out)


def backward(tape: Tape, output: Tensor, seed=1.0) -> ParamVector:
    return tape.backward(output, seed)


def constant(value) -> Tensor:
    return Tensor(np.asarray(value, dtype=np.float64))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


def _tan(x: Tensor) -> np.ndarray:
    return x.tangent if x.tangent is not None else np.zeros_like(x.value)


def _emit(value, inputs: tuple[Tensor, ...], vjp, jvp) -> Tensor:
    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise TapeError("inputs recorded on different tapes")
            tape = t.tape
    tangent = jvp() if any(t.tangent is not None for t in inputs) else None
    out = Tensor(value, tangent)
    if tape is not None:
        tape._record(out, inputs, vjp)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _swap(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


# ---------------------------------------------------------------- primitives

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    value = a.value @ b.value

    def vjp(g):
        return (_unbroadcast(g @ _swap(b.value), a.value.shape),
                _unbroadcast(_swap(a.value) @ g, b.value.shape))

    def jvp():
        return _tan(a) @ b.value + a.value @ _tan(b)

    return _emit(value, (a, b), vjp, jvp)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def vjp(g):
        return _unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)

    def jvp():
        return np.broadcast_to(_tan(a) + _tan(b), np.broadcast_shapes(a.value.shape, b.value.shape))

    return _emit(a.value + b.value, (a, b), vjp, jvp)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def vjp(g):
        return _unbroadcast(g * b.value, a.value.shape), _unbroadcast(g * a.value, b.value.shape)

    def jvp():
        return _tan(a) * b.value + a.value * _tan(b)

    return _emit(a.value * b.value, (a, b), vjp, jvp)


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    return _emit(a.value * c, (a,), lambda g: (g * c,), lambda: _tan(a) * c)


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    y = np.tanh(a.value)
    return _emit(y, (a,), lambda g: (g * (1.0 - y * y),), lambda: _tan(a) * (1.0 - y * y))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    s = _sigmoid(a.value)
    d = s * (1.0 - s)
    return _emit(s, (a,), lambda g: (g * d,), lambda: _tan(a) * d)


def log_sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    y = -np.logaddexp(0.0, -a.value)
    d = 1.0 - _sigmoid(a.value)
    return _emit(y, (a,), lambda g: (g * d,), lambda: _tan(a) * d)


def log(a) -> Tensor:
    a = _as_tensor(a)
    return _emit(np.log(a.value), (a,), lambda g: (g / a.value,), lambda: _tan(a) / a.value)


def _softmax_last(x: np.ndarray) -> np.ndarray:
    z = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def softmax_op(a, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; ``mask`` (broadcastable bool) marks allowed entries."""
    a = _as_tensor(a)
    x = a.value if mask is None else np.where(mask, a.value, -np.inf)
    s = _softmax_last(x)

    def vjp(g):
        return (s * (g - np.sum(g * s, axis=-1, keepdims=True)),)

    def jvp():
        t = _tan(a)
        return s * (t - np.sum(t * s, axis=-1, keepdims=True))

    return _emit(s, (a,), vjp, jvp)


def log_softmax(a) -> Tensor:
    a = _as_tensor(a)
    z = a.value - np.max(a.value, axis=-1, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=-1, keepdims=True))
    y = z - lse
    s = np.exp(y)

    def vjp(g):
        return (g - s * np.sum(g, axis=-1, keepdims=True),)

    def jvp():
        t = _tan(a)
        return t - np.sum(s * t, axis=-1, keepdims=True)

    return _emit(y, (a,), vjp, jvp)


def take_rows(table, ids: np.ndarray) -> Tensor:
    """Embedding lookup along the row axis of ``table`` (which may carry a leading batch axis)."""
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)

    def vjp(g):
        if table.value.ndim != 2:
            raise TapeError("take_rows backward supports unbatched tables only")
        out = np.zeros_like(table.value)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, table.value.shape[-1]))
        return (out,)

    return _emit(np.take(table.value, ids, axis=-2), (table,), vjp, lambda: np.take(_tan(table), ids, axis=-2))


def slice_axis(a, axis: int, start: int, stop: int) -> Tensor:
    a = _as_tensor(a)
    idx = [slice(None)] * a.value.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def vjp(g):
        out = np.zeros_like(a.value)
        out[idx] = g
        return (out,)

    return _emit(a.value[idx], (a,), vjp, lambda: _tan(a)[idx])


def concat_last(parts) -> Tensor:
    parts = tuple(_as_tensor(p) for p in parts)
    bounds = np.cumsum([0] + [p.value.shape[-1] for p in parts])

    def vjp(g):
        return tuple(g[..., bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    def jvp():
        return np.concatenate([_tan(p) for p in parts], axis=-1)

    return _emit(np.concatenate([p.value for p in parts], axis=-1), parts, vjp, jvp)


def transpose_last(a) -> Tensor:
    a = _as_tensor(a)
    return _emit(_swap(a.value), (a,), lambda g: (_swap(g),), lambda: _swap(_tan(a)))


def pick_last(a, ids: np.ndarray) -> Tensor:
    """``out[..., t] = a[..., t, ids[..., t]]``."""
    a = _as_tensor(a)
    ids = np.broadcast_to(np.asarray(ids, dtype=np.int64), a.value.shape[:-1])[..., None]

    def vjp(g):
        out = np.zeros_like(a.value)
        np.put_along_axis(out, ids, g[..., None], axis=-1)
        return (out,)

    value = np.take_along_axis(a.value, ids, axis=-1)[..., 0]
    return _emit(value, (a,), vjp, lambda: np.take_along_axis(_tan(a), ids, axis=-1)[..., 0])


def total(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    shape = a.value.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _emit(np.sum(a.value, axis=axis), (a,), vjp, lambda: np.sum(_tan(a), axis=axis))


# ---------------------------------------------------------------- checked helpers

def softmax(logits) -> np.ndarray:
    """Numerically stable softmax of a real array (last axis)."""
    x = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        bad = np.argwhere(~np.isfinite(x))
        raise NonFiniteError(f"softmax input has non-finite entries at {bad[:5].tolist()}")
    return _softmax_last(x)
