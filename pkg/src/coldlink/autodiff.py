"""Reverse-mode automatic differentiation over dense float64 arrays.

Values are numpy arrays wrapped in :class:`Tensor`; every forward op is
recorded on an explicit :class:`Tape` and gradients are obtained by walking
the recorded ops in reverse. The tape is rebuilt for every forward pass
(define-by-run), which keeps per-span re-differentiation in the adaptation
loop simple and exact. Passing ``tape=None`` to any op runs it without
recording (a cheap inference mode).

All arithmetic is 64-bit. Any op that produces a NaN or Inf raises
:class:`NonFiniteError` immediately, so a diverging run fails loudly at the
op that broke instead of corrupting downstream state.
"""

from __future__ import annotations

import struct
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or Inf."""


class GraphError(ValueError):
    """backward() was asked about a value the tape never produced."""


class Tensor:
    """Dense float64 value with shape; gradients live on the Tape, not here."""

    __slots__ = ("data",)

    def __init__(self, data):
        arr = np.asarray(data, dtype=np.float64)
        # sum() propagates NaN/Inf and is cheaper than a full isfinite scan;
        # magnitudes here never get close to overflow territory.
        if not np.isfinite(arr.sum()):
            raise NonFiniteError(f"non-finite tensor of shape {arr.shape}")
        self.data = arr

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(-1)[0])

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape})"


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape))


class Tape:
    """Recorded operation graph for one forward pass.

    Records are natively in topological order (an op's inputs always exist
    before the op runs), so backward() is a single reversed sweep that
    touches each record exactly once.
    """

    __slots__ = ("_records", "_out_ids")

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._out_ids: set[int] = set()

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], back: Callable) -> None:
        self._records.append((out, inputs, back))
        self._out_ids.add(id(out))

    def __len__(self) -> int:
        return len(self._records)


def _emit(tape, data, inputs, back) -> Tensor:
    out = Tensor(data)
    if tape is not None:
        tape.record(out, inputs, back)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a gradient back to the shape of a broadcast operand."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# forward ops
# ---------------------------------------------------------------------------

def matmul(tape, a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape[-1] != b.data.shape[0]:
        raise ValueError(f"matmul shape mismatch {a.shape} x {b.shape}")

    def back(g):
        return (g @ b.data.T, a.data.T @ g)

    return _emit(tape, a.data @ b.data, (a, b), back)


def add(tape, a: Tensor, b: Tensor) -> Tensor:
    def back(g):
        return (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape))

    return _emit(tape, a.data + b.data, (a, b), back)


def sub(tape, a: Tensor, b: Tensor) -> Tensor:
    def back(g):
        return (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape))

    return _emit(tape, a.data - b.data, (a, b), back)


def mul(tape, a: Tensor, b: Tensor) -> Tensor:
    def back(g):
        return (_unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape))

    return _emit(tape, a.data * b.data, (a, b), back)


def scale(tape, a: Tensor, c: float) -> Tensor:
    def back(g):
        return (g * c,)

    return _emit(tape, a.data * c, (a,), back)


def add_const(tape, a: Tensor, c) -> Tensor:
    def back(g):
        return (g,)

    return _emit(tape, a.data + c, (a,), back)


def rsub_const(tape, c: float, a: Tensor) -> Tensor:
    """c - a for a python scalar c."""

    def back(g):
        return (-g,)

    return _emit(tape, c - a.data, (a,), back)


def concat(tape, tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat of zero tensors")
    widths = [t.data.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + widths)

    def back(g):
        moved = np.moveaxis(g, axis, 0)
        return tuple(
            np.moveaxis(moved[bounds[i]:bounds[i + 1]], 0, axis) for i in range(len(widths))
        )

    return _emit(tape, np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), back)


def transpose(tape, a: Tensor) -> Tensor:
    def back(g):
        return (g.T,)

    return _emit(tape, a.data.T, (a,), back)


def row_softmax(tape, a: Tensor) -> Tensor:
    x = a.data
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return ((g - dot) * y,)

    return _emit(tape, y, (a,), back)


def sigmoid(tape, a: Tensor) -> Tensor:
    x = a.data
    y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def back(g):
        return (g * y * (1.0 - y),)

    return _emit(tape, y, (a,), back)


def tanh(tape, a: Tensor) -> Tensor:
    y = np.tanh(a.data)

    def back(g):
        return (g * (1.0 - y * y),)

    return _emit(tape, y, (a,), back)


def relu(tape, a: Tensor) -> Tensor:
    mask = a.data > 0.0

    def back(g):
        return (g * mask,)

    return _emit(tape, np.where(mask, a.data, 0.0), (a,), back)


def log(tape, a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise NonFiniteError("log of non-positive value")

    def back(g):
        return (g / a.data,)

    return _emit(tape, np.log(a.data), (a,), back)


def cos(tape, a: Tensor) -> Tensor:
    def back(g):
        return (-g * np.sin(a.data),)

    return _emit(tape, np.cos(a.data), (a,), back)


def sin(tape, a: Tensor) -> Tensor:
    def back(g):
        return (g * np.cos(a.data),)

    return _emit(tape, np.sin(a.data), (a,), back)


def clamp(tape, a: Tensor, lo: float, hi: float) -> Tensor:
    mask = (a.data > lo) & (a.data < hi)

    def back(g):
        return (g * mask,)

    return _emit(tape, np.clip(a.data, lo, hi), (a,), back)


def interleave_cols(tape, a: Tensor, b: Tensor) -> Tensor:
    """Column-interleave two equal-shape 2-D tensors: out[:, 0::2]=a, out[:, 1::2]=b."""
    if a.data.shape != b.data.shape:
        raise ValueError(f"interleave shape mismatch {a.shape} vs {b.shape}")
    n, m = a.data.shape
    out = np.empty((n, 2 * m))
    out[:, 0::2] = a.data
    out[:, 1::2] = b.data

    def back(g):
        return (g[:, 0::2].copy(), g[:, 1::2].copy())

    return _emit(tape, out, (a, b), back)


def sum_all(tape, a: Tensor) -> Tensor:
    shape = a.data.shape

    def back(g):
        return (np.full(shape, g.reshape(-1)[0]),)

    return _emit(tape, a.data.sum().reshape(1, 1), (a,), back)


def mean_all(tape, a: Tensor) -> Tensor:
    shape = a.data.shape
    n = a.data.size

    def back(g):
        return (np.full(shape, g.reshape(-1)[0] / n),)

    return _emit(tape, a.data.mean().reshape(1, 1), (a,), back)


_GRU_KEYS = (
    "in_update", "hid_update", "bias_update",
    "in_reset", "hid_reset", "bias_reset",
    "in_cand", "hid_cand", "bias_cand",
)


def gru_cell(tape, h_prev: Tensor, x: Tensor, w: Mapping[str, Tensor]) -> Tensor:
    """Canonical gated recurrent unit step built from recorded primitives.

    h' = (1 - u) * c + u * h_prev with update gate u, reset gate r and
    candidate c = tanh(x Wc + (r * h_prev) Uc + bc).
    """
    u = sigmoid(tape, add(tape, add(tape, matmul(tape, x, w["in_update"]),
                                    matmul(tape, h_prev, w["hid_update"])), w["bias_update"]))
    r = sigmoid(tape, add(tape, add(tape, matmul(tape, x, w["in_reset"]),
                                    matmul(tape, h_prev, w["hid_reset"])), w["bias_reset"]))
    c = tanh(tape, add(tape, add(tape, matmul(tape, x, w["in_cand"]),
                                 matmul(tape, mul(tape, r, h_prev), w["hid_cand"])), w["bias_cand"]))
    return add(tape, mul(tape, rsub_const(tape, 1.0, u), c), mul(tape, u, h_prev))


def gru_param_keys() -> tuple[str, ...]:
    return _GRU_KEYS


# ---------------------------------------------------------------------------
# parameter sets
# ---------------------------------------------------------------------------

class ParamSet:
    """Ordered name -> Tensor map. Updates are functional: every optimizer
    step returns a fresh ParamSet and never mutates the input tensors."""

    __slots__ = ("_items",)

    def __init__(self, items: Mapping[str, Tensor] | Iterable[tuple[str, Tensor]] = ()):
        pairs = items.items() if isinstance(items, Mapping) else items
        self._items: dict[str, Tensor] = {}
        for k, v in pairs:
            if k in self._items:
                raise KeyError(f"duplicate parameter key {k!r}")
            self._items[k] = v if isinstance(v, Tensor) else Tensor(v)

    def keys(self):
        return self._items.keys()

    def values(self):
        return self._items.values()

    def items(self):
        return self._items.items()

    def __getitem__(self, key: str) -> Tensor:
        return self._items[key]

    def __contains__(self, key: str) -> bool:
        return key in self._items

    def __len__(self) -> int:
        return len(self._items)

    def copy(self) -> "ParamSet":
        return ParamSet((k, t.copy()) for k, t in self._items.items())

    def subset(self, prefix: str) -> "ParamSet":
        """View (shared tensors) of the keys starting with prefix."""
        return ParamSet((k, t) for k, t in self._items.items() if k.startswith(prefix))

    def merged(self, other: "ParamSet") -> "ParamSet":
        out = dict(self._items)
        for k, t in other.items():
            if k in out:
                raise KeyError(f"duplicate parameter key {k!r} in merge")
            out[k] = t
        return ParamSet(out)

    def zeros_like(self) -> "ParamSet":
        return ParamSet((k, Tensor(np.zeros_like(t.data))) for k, t in self._items.items())

    def allclose(self, other: "ParamSet", atol: float = 0.0) -> bool:
        if list(self.keys()) != list(other.keys()):
            return False
        return all(np.allclose(self[k].data, other[k].data, rtol=0.0, atol=atol) for k in self.keys())


def combine(sets: Sequence[ParamSet], weights: Sequence[float]) -> ParamSet:
    """Key-wise convex combination of parameter sets (weights given)."""
    if len(sets) != len(weights) or not sets:
        raise ValueError("combine needs equal, non-zero numbers of sets and weights")
    keys = list(sets[0].keys())
    for s in sets[1:]:
        if list(s.keys()) != keys:
            raise KeyError("combine over mismatched parameter sets")
    if len(sets) == 1:
        # exact identity for the single-span case, no floating-point round trip
        return sets[0].copy()
    out = {}
    for k in keys:
        acc = weights[0] * sets[0][k].data
        for s, w in zip(sets[1:], weights[1:]):
            acc = acc + w * s[k].data
        out[k] = Tensor(acc)
    return ParamSet(out)


# ---------------------------------------------------------------------------
# backward pass and optimizers
# ---------------------------------------------------------------------------

def backward(tape: Tape, loss: Tensor, params: ParamSet) -> ParamSet:
    """Gradients of a scalar loss w.r.t. every entry of params.

    Parameters not reachable from the loss get zero gradients. Visits each
    recorded op at most once, in reverse record order; results are
    bit-reproducible for identical tapes.
    """
    if loss.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    if id(loss) not in tape._out_ids:
        raise GraphError("loss was not produced on this tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for out, inputs, back in reversed(tape._records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for t, ig in zip(inputs, back(g)):
            if ig is None:
                continue
            cur = grads.get(id(t))
            if cur is None:
                grads[id(t)] = ig.copy()  # own the buffer; backs may return views
            else:
                cur += ig
    out = {}
    for k, t in params.items():
        g = grads.get(id(t))
        out[k] = Tensor(np.zeros_like(t.data)) if g is None else Tensor(g)
    return ParamSet(out)


def _check_keys(params: ParamSet, grads: ParamSet) -> None:
    if list(params.keys()) != list(grads.keys()):
        raise KeyError("parameter/gradient key mismatch")


def sgd_step(params: ParamSet, grads: ParamSet, lr: float) -> ParamSet:
    _check_keys(params, grads)
    return ParamSet((k, Tensor(t.data - lr * grads[k].data)) for k, t in params.items())


class AdamState:
    """First/second moment accumulators, keyed like the ParamSet they serve."""

    __slots__ = ("m", "v", "t")

    def __init__(self, params: ParamSet):
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.t = 0


def adam_step(params: ParamSet, grads: ParamSet, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> ParamSet:
    """Standard Adam update; mutates state, returns a fresh ParamSet."""
    _check_keys(params, grads)
    if set(state.m.keys()) != set(params.keys()):
        raise KeyError("optimizer state does not match parameter keys")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    out = {}
    for k, t in params.items():
        g = grads[k].data
        state.m[k] = beta1 * state.m[k] + (1.0 - beta1) * g
        state.v[k] = beta2 * state.v[k] + (1.0 - beta2) * g * g
        mhat = state.m[k] / c1
        vhat = state.v[k] / c2
        out[k] = Tensor(t.data - lr * mhat / (np.sqrt(vhat) + eps))
    return ParamSet(out)


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------
#
#   magic   4 bytes  b"CLPS"
#   version 1 byte   0x01
#   count   u32 LE   number of entries
#   entry:  klen u16 LE | key utf-8 | ndim u8 | dims u32 LE each | f64 LE payload
#
# Entries are written in ParamSet iteration order; load(save(p)) is
# bit-exact and preserves order.

_MAGIC = b"CLPS"
_VERSION = 1


def save_params(params: ParamSet, path) -> None:
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<B", _VERSION))
        f.write(struct.pack("<I", len(params)))
        for k, t in params.items():
            kb = k.encode("utf-8")
            f.write(struct.pack("<H", len(kb)))
            f.write(kb)
            f.write(struct.pack("<B", t.data.ndim))
            for dim in t.data.shape:
                f.write(struct.pack("<I", dim))
            f.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_params(path) -> ParamSet:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != _MAGIC:
        raise ValueError("not a parameter checkpoint (bad magic)")
    version = raw[4]
    if version != _VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    (count,) = struct.unpack_from("<I", raw, 5)
    off = 9
    items = []
    for _ in range(count):
        (klen,) = struct.unpack_from("<H", raw, off)
        off += 2
        key = raw[off:off + klen].decode("utf-8")
        off += klen
        ndim = raw[off]
        off += 1
        dims = struct.unpack_from(f"<{ndim}I", raw, off) if ndim else ()
        off += 4 * ndim
        n = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(dims).astype(np.float64)
        off += 8 * n
        items.append((key, Tensor(arr)))
    return ParamSet(items)


# ---------------------------------------------------------------------------
# verification helper
# ---------------------------------------------------------------------------

def finite_difference(loss_fn: Callable[[ParamSet], float], params: ParamSet,
                      step: float = 1e-5) -> ParamSet:
    """Central finite-difference gradient of loss_fn at params.

    Perturbs each parameter entry in place (restoring it afterwards), so
    loss_fn must read values through the ParamSet it is given.
    """
    out = {}
    for k, t in params.items():
        flat = t.data.reshape(-1)
        g = np.zeros(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            lp = loss_fn(params)
            flat[i] = orig - step
            lm = loss_fn(params)
            flat[i] = orig
            g[i] = (lp - lm) / (2.0 * step)
        out[k] = Tensor(g.reshape(t.data.shape))
    return ParamSet(out)


def uniform_fan_in(rng: np.random.Generator, fan_in: int, shape) -> Tensor:
    """Weight init: uniform(-1/sqrt(fan_in), +1/sqrt(fan_in))."""
    bound = 1.0 / np.sqrt(fan_in) if fan_in > 0 else 1.0
    return Tensor(rng.uniform(-bound, bound, size=shape))
