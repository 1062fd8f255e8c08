"""Dense tensors with tape-based reverse-mode autodiff.

Every differentiable primitive records one entry on the thread-local tape
when any input requires grad; ``backward`` walks the tape in reverse exactly
once and then clears it.  Cost accounting (MACs and live scalar elements)
is done through :class:`CostCounters` sessions opened with :func:`measure`.
"""
from __future__ import annotations

import contextlib
import itertools
import threading
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np


class DimensionError(ValueError):
    pass


class ContractError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


# additive mask sentinel used in place of -inf before softmax
NEG_SENTINEL = -1e9

_local = threading.local()
_node_ids = itertools.count(1)


def _get(name, default):
    return getattr(_local, name, default)


def default_dtype():
    return _get("dtype", np.float32)


def grad_enabled() -> bool:
    return _get("grad_enabled", True)


@contextlib.contextmanager
def wide_precision() -> Iterator[None]:
    """Create new tensors as float64 inside the block."""
    prev = default_dtype()
    _local.dtype = np.float64
    try:
        yield
    finally:
        _local.dtype = prev


def is_wide() -> bool:
    return default_dtype() == np.float64


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    prev = grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


# ---------------------------------------------------------------- counters


@dataclass
class CostCounters:
    macs: int = 0
    live_elements: int = 0
    peak_live_elements: int = 0

    def alloc(self, n: int) -> None:
        self.live_elements += n
        if self.live_elements > self.peak_live_elements:
            self.peak_live_elements = self.live_elements

    def free(self, n: int) -> None:
        self.live_elements -= n

    def reset(self) -> None:
        self.macs = 0
        self.live_elements = 0
        self.peak_live_elements = 0


def _sessions() -> list:
    s = getattr(_local, "sessions", None)
    if s is None:
        s = _local.sessions = []
    return s


@contextlib.contextmanager
def measure(counters: CostCounters | None = None) -> Iterator[CostCounters]:
    """Count MACs and tensor allocations made by this thread inside the block.

    Only tensors constructed inside the block are counted; their release is
    credited back to the same session whenever it happens.
    """
    c = counters if counters is not None else CostCounters()
    stack = _sessions()
    stack.append(c)
    try:
        yield c
    finally:
        stack.remove(c)


def add_macs(n: int) -> None:
    for c in _sessions():
        c.macs += int(n)


# -------------------------------------------------------------------- tape


class _Record:
    __slots__ = ("out_id", "parents", "backward")

    def __init__(self, out_id, parents, backward):
        self.out_id = out_id
        self.parents = parents
        self.backward = backward


class Tape:
    """Ordered list of recorded primitive applications."""

    def __init__(self) -> None:
        self.records: list[_Record] = []
        self._outputs: set[int] = set()

    def record(self, out: "Tensor", parents: tuple, backward: Callable) -> None:
        self.records.append(_Record(out.node_id, parents, backward))
        self._outputs.add(out.node_id)

    def produced(self, node_id: int) -> bool:
        return node_id in self._outputs

    def clear(self) -> None:
        self.records.clear()
        self._outputs.clear()

    def __len__(self) -> int:
        return len(self.records)


def get_tape() -> Tape:
    t = getattr(_local, "tape", None)
    if t is None:
        t = _local.tape = Tape()
    return t


# ------------------------------------------------------------------ tensor


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "_leaf",
                 "_counted", "_size", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else default_dtype())
        if any(e <= 0 for e in arr.shape):
            raise DimensionError(f"tensor extents must be positive, got {arr.shape}")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._leaf = True
        self.node_id = next(_node_ids)
        sessions = getattr(_local, "sessions", None)
        if sessions:
            self._counted = tuple(sessions)
            self._size = arr.size
            for c in self._counted:
                c.alloc(arr.size)
        else:
            self._counted = ()
            self._size = 0

    def __del__(self):
        for c in getattr(self, "_counted", ()):
            c.free(self._size)

    # -- introspection
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._leaf

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # -- operators
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def astype_(self, dtype) -> "Tensor":
        """Change storage precision in place (parameters only)."""
        self.data = self.data.astype(dtype)
        if self.grad is not None:
            self.grad = self.grad.astype(dtype)
        return self


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _raw(x):
    return x.data if isinstance(x, Tensor) else x


def _pair(a, b):
    """Raw operands; a plain number or array takes the dtype of the tensor operand."""
    ad, bd = _raw(a), _raw(b)
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        bd = np.asarray(bd, dtype=ad.dtype)
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        ad = np.asarray(ad, dtype=bd.dtype)
    return ad, bd


def _wrap(data: np.ndarray, parents: tuple, backward: Callable) -> Tensor:
    out = Tensor(data, dtype=data.dtype if isinstance(data, np.ndarray) else None)
    if grad_enabled() and any(isinstance(p, Tensor) and p.requires_grad for p in parents):
        out.requires_grad = True
        out._leaf = False
        get_tape().record(out, parents, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _needs(p) -> bool:
    return isinstance(p, Tensor) and p.requires_grad


# ----------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    ad, bd = _pair(a, b)
    sa, sb = np.shape(ad), np.shape(bd)

    def bw(g):
        return (_unbroadcast(g, sa) if _needs(a) else None,
                _unbroadcast(g, sb) if _needs(b) else None)

    return _wrap(np.asarray(ad + bd), (a, b), bw)


def sub(a, b) -> Tensor:
    ad, bd = _pair(a, b)
    sa, sb = np.shape(ad), np.shape(bd)

    def bw(g):
        return (_unbroadcast(g, sa) if _needs(a) else None,
                _unbroadcast(-g, sb) if _needs(b) else None)

    return _wrap(np.asarray(ad - bd), (a, b), bw)


def mul(a, b) -> Tensor:
    ad, bd = _pair(a, b)
    sa, sb = np.shape(ad), np.shape(bd)

    def bw(g):
        return (_unbroadcast(g * bd, sa) if _needs(a) else None,
                _unbroadcast(g * ad, sb) if _needs(b) else None)

    return _wrap(np.asarray(ad * bd), (a, b), bw)


def div(a, b) -> Tensor:
    ad, bd = _pair(a, b)
    sa, sb = np.shape(ad), np.shape(bd)

    def bw(g):
        return (_unbroadcast(g / bd, sa) if _needs(a) else None,
                _unbroadcast(-g * ad / (bd * bd), sb) if _needs(b) else None)

    return _wrap(np.asarray(ad / bd), (a, b), bw)


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _wrap(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _wrap(np.log(xd), (x,), lambda g: (g / xd,))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _wrap(np.maximum(x.data, x.data.dtype.type(0)), (x,), lambda g: (g * pos,))


def sigmoid(x: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-x.data))
    return _wrap(y.astype(x.dtype), (x,), lambda g: (g * y * (1 - y),))


def silu(x: Tensor) -> Tensor:
    s = (1.0 / (1.0 + np.exp(-x.data))).astype(x.dtype)
    y = x.data * s
    return _wrap(y, (x,), lambda g: (g * (s + y * (1 - s)),))


def glu(x: Tensor, axis: int = -1) -> Tensor:
    """First half gated by sigmoid of the second half along ``axis``."""
    a, b = np.split(x.data, 2, axis=axis)
    s = (1.0 / (1.0 + np.exp(-b))).astype(x.dtype)

    def bw(g):
        return (np.concatenate([g * s, g * a * s * (1 - s)], axis=axis),)

    return _wrap(a * s, (x,), bw)


# ------------------------------------------------------------ reductions


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _wrap(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return tsum(x, axis, keepdims) * (1.0 / n)


# -------------------------------------------------------- shape plumbing


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _wrap(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _wrap(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    return _wrap(np.swapaxes(x.data, a, b), (x,), lambda g: (np.swapaxes(g, a, b),))


def _basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)


def getitem(x: Tensor, idx) -> Tensor:
    shape, dtype = x.shape, x.dtype
    basic = _basic_index(idx)

    def bw(g):
        gx = np.zeros(shape, dtype=dtype)
        if basic:
            gx[idx] += g
        else:
            np.add.at(gx, idx, g)
        return (gx,)

    out = x.data[idx]
    return _wrap(np.array(out) if basic else out, (x,), bw)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = tuple(as_tensor(t) for t in xs)
    sizes = [t.shape[axis] for t in xs]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _wrap(np.concatenate([t.data for t in xs], axis=axis), xs, bw)


def take_rows(x: Tensor, idx: np.ndarray, axis: int = 0) -> Tensor:
    """Gather along ``axis`` (duplicates allowed); gradient scatter-adds."""
    idx = np.asarray(idx, dtype=np.int64)
    shape, dtype = x.shape, x.dtype

    def bw(g):
        gx = np.zeros(shape, dtype=dtype)
        gm = np.moveaxis(gx, axis, 0)
        np.add.at(gm, idx, np.moveaxis(g, axis, 0))
        return (gx,)

    return _wrap(np.take(x.data, idx, axis=axis), (x,), bw)


# ---------------------------------------------------------------- matmul


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with numpy broadcasting; counts m*n*k MACs."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    if bd.ndim == 2 and ad.ndim > 2:
        # fold leading axes into one GEMM (also for the weight gradient)
        a2 = ad.reshape(-1, ad.shape[-1])
        out = (a2 @ bd).reshape(ad.shape[:-1] + (bd.shape[1],))
        add_macs(out.size * a.shape[-1])

        def bw(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ bd.T).reshape(ad.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _wrap(out, (a, b), bw)
    out = np.matmul(ad, bd)
    add_macs(out.size * a.shape[-1])

    def bw(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape) if b.requires_grad else None
        return ga, gb

    return _wrap(out, (a, b), bw)


# --------------------------------------------------------------- softmax


def _softmax_np(x: np.ndarray, allowed: np.ndarray | None = None) -> np.ndarray:
    if np.isnan(x).any():
        raise NumericError("NaN in softmax input")
    if allowed is not None:
        x = np.where(allowed, x, NEG_SENTINEL)
        dead = ~allowed
    else:
        dead = np.isneginf(x)
        x = np.where(dead, NEG_SENTINEL, x)
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    e = np.where(dead, 0, e)
    s = e.sum(axis=-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        y = np.where(s > 0, e / np.where(s > 0, s, 1), 0)
    return y.astype(x.dtype, copy=False)


def softmax(x: Tensor, allowed: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis.

    Entries equal to -inf (or False in ``allowed``) get weight exactly 0; a
    row with no admissible entry yields all zeros.
    """
    y = _softmax_np(x.data, allowed)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _wrap(y, (x,), bw)


def softmax_rows(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise DimensionError(f"softmax_rows expects a matrix, got {x.shape}")
    return softmax(x)


def log_softmax(x: Tensor) -> Tensor:
    xd = x.data
    m = xd.max(axis=-1, keepdims=True)
    z = xd - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse

    def bw(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return _wrap(y, (x,), bw)


# ------------------------------------------------------------- losses


def cross_entropy(logits: Tensor, targets: np.ndarray, ignore_index: int = -100,
                  label_smoothing: float = 0.0) -> Tensor:
    """Mean label-smoothed cross-entropy over rows whose target != ignore_index."""
    x = logits.data.reshape(-1, logits.shape[-1])
    t = np.asarray(targets).reshape(-1)
    if t.shape[0] != x.shape[0]:
        raise DimensionError(f"{x.shape[0]} logit rows vs {t.shape[0]} targets")
    valid = t != ignore_index
    n = int(valid.sum())
    if n == 0:
        raise ContractError("cross_entropy: no non-ignored targets")
    V = x.shape[1]
    m = x.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(x - m).sum(axis=1, keepdims=True))
    lp = x - lse
    tt = np.where(valid, t, 0)
    nll = -lp[np.arange(len(t)), tt]
    smooth = -lp.mean(axis=1)
    eps = label_smoothing
    per = (1 - eps) * nll + eps * smooth
    loss = np.asarray((per * valid).sum() / n, dtype=x.dtype)
    shape = logits.shape

    def bw(g):
        p = np.exp(lp)
        q = np.full_like(p, eps / V)
        q[np.arange(len(t)), tt] += 1 - eps
        d = (p - q) * (valid[:, None] / n)
        return ((d * g).reshape(shape).astype(x.dtype),)

    return _wrap(loss, (logits,), bw)


# ------------------------------------------------------------- backward


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires-grad leaf reachable from ``loss``."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = get_tape()
    if not tape.produced(loss.node_id):
        raise ContractError("loss was not produced on the active tape")
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    try:
        for rec in reversed(tape.records):
            g = grads.pop(rec.out_id, None)
            if g is None:
                continue
            for p, gp in zip(rec.parents, rec.backward(g)):
                if gp is None or not _needs(p):
                    continue
                if p._leaf:
                    gp = np.asarray(gp, dtype=p.dtype)
                    p.grad = gp.copy() if p.grad is None else p.grad + gp
                elif p.node_id in grads:
                    grads[p.node_id] = grads[p.node_id] + gp
                else:
                    grads[p.node_id] = gp
    finally:
        tape.clear()


# ------------------------------------------------------------ gradcheck


def gradcheck(f: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-4,
              max_coords: int | None = None, seed: int = 0) -> float:
    """Max relative error between autodiff and central differences.

    ``f`` takes no arguments and closes over ``inputs`` (leaf tensors that it
    reads).  Inputs are promoted to float64 for the duration of the check and
    restored afterwards.  ``max_coords`` optionally samples coordinates per
    input.
    """
    inputs = list(inputs)
    old = [t.dtype for t in inputs]
    old_rg = [t.requires_grad for t in inputs]
    get_tape().clear()
    try:
        with wide_precision():
            for t in inputs:
                t.astype_(np.float64)
                t.requires_grad = True
                t.grad = None
            y0 = f()
            y1 = f()
            get_tape().clear()
            if y0.size != 1:
                raise ContractError("gradcheck needs a scalar-valued function")
            if not np.array_equal(y0.data, y1.data):
                raise ContractError("gradcheck: function is not deterministic (dropout enabled?)")
            del y0, y1
            loss = f()
            backward(loss)
            analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in inputs]
            rng = np.random.default_rng(seed)
            worst = 0.0
            with no_grad():
                for t, an in zip(inputs, analytic):
                    flat = t.data.reshape(-1)
                    coords = np.arange(flat.size)
                    if max_coords is not None and flat.size > max_coords:
                        coords = np.sort(rng.choice(flat.size, max_coords, replace=False))
                    for i in coords:
                        orig = flat[i]
                        flat[i] = orig + h
                        fp = f().item()
                        flat[i] = orig - h
                        fm = f().item()
                        flat[i] = orig
                        num = (fp - fm) / (2 * h)
                        a = an.reshape(-1)[i]
                        err = abs(a - num) / max(1.0, abs(a), abs(num))
                        worst = max(worst, err)
            return float(worst)
    finally:
        get_tape().clear()
        for t, dt, rg in zip(inputs, old, old_rg):
            t.astype_(dt)
            t.requires_grad = rg
            t.grad = None
