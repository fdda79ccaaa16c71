"""Dense float64 arrays with a reverse-mode gradient tape.

Every op records its cost class with the active operation counter (if any),
so the energy profiler sees exactly what a forward pass executed.
"""
from __future__ import annotations

import contextlib
import os
from typing import Callable, Iterator, Sequence

import numpy as np

DTYPE = np.float64


class DimensionError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class ContractError(ValueError):
    pass


_DEBUG = os.environ.get("SPIKEMAR_DEBUG", "") not in ("", "0")


def set_debug(flag: bool) -> None:
    """Toggle NaN/Inf screening after every op."""
    global _DEBUG
    _DEBUG = bool(flag)


@contextlib.contextmanager
def debug_mode(flag: bool = True) -> Iterator[None]:
    prev = _DEBUG
    set_debug(flag)
    try:
        yield
    finally:
        set_debug(prev)


# ---------------------------------------------------------------------------
# operation counting hooks (the energy module installs the counter)
# ---------------------------------------------------------------------------

_counters: list = []
_paused = [0]


@contextlib.contextmanager
def counting(counter) -> Iterator:
    _counters.append(counter)
    try:
        yield counter
    finally:
        _counters.pop()


@contextlib.contextmanager
def uncounted() -> Iterator[None]:
    _paused[0] += 1
    try:
        yield
    finally:
        _paused[0] -= 1


@contextlib.contextmanager
def scope(label: str) -> Iterator[None]:
    """Attribute ops executed inside to ``label`` on the active counter."""
    if not _counters:
        yield
        return
    counter = _counters[-1]
    counter.push(label)
    try:
        yield
    finally:
        counter.pop()


def record_op(op: str, **dims) -> None:
    if _counters and not _paused[0]:
        _counters[-1].record(op, dims)


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------

class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class GradTape:
    """Records ops in construction order; ``backward`` replays them in reverse.

    Usage::

        with GradTape() as tape:
            loss = f(params)
        tape.backward(loss)
    """

    _stack: list["GradTape"] = []

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "GradTape":
        GradTape._stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        GradTape._stack.remove(self)

    @classmethod
    def active(cls) -> "GradTape | None":
        return cls._stack[-1] if cls._stack else None

    def record(self, out: "Tensor", inputs: Sequence["Tensor"], backward: Callable) -> None:
        out._node = len(self.nodes)
        self.nodes.append(_Node(out, tuple(inputs), backward))

    def backward(self, loss: "Tensor", seed: np.ndarray | None = None) -> None:
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad."""
        if seed is None:
            if loss.data.size != 1:
                raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
            seed = np.ones_like(loss.data)
        grads: dict[int, np.ndarray] = {}
        if loss._node is None:
            if loss.requires_grad:
                loss._accumulate(seed)
            return
        grads[loss._node] = np.asarray(seed, dtype=DTYPE)
        for idx in range(len(self.nodes) - 1, -1, -1):
            g = grads.pop(idx, None)
            if g is None:
                continue
            node = self.nodes[idx]
            in_grads = node.backward(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if t._node is not None and t._tape is self:
                    prev = grads.get(t._node)
                    grads[t._node] = gi if prev is None else prev + gi
                else:
                    t._accumulate(gi)


# ---------------------------------------------------------------------------
# tensor
# ---------------------------------------------------------------------------

def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


class Tensor:
    """Row-major float64 array, optionally participating in a gradient tape."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=DTYPE)
        _check_finite(arr, "tensor creation")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: int | None = None
        self._tape: GradTape | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t._node = None
        t._tape = None
        return t

    # -- basics ------------------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __float__(self) -> float:
        return self.item()

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        g = np.asarray(g, dtype=DTYPE).reshape(self.shape)
        self.grad = g.copy() if self.grad is None else self.grad + g

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- operator sugar ----------------------------------------------------
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
        return neg(self)

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


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(arr: np.ndarray, inputs: Sequence[Tensor], backward: Callable, op: str, **dims) -> Tensor:
    record_op(op, **dims)
    if _DEBUG:
        _check_finite(arr, f"output of {op}")
    tape = GradTape.active()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(arr, requires_grad=needs)
    if needs:
        out._tape = tape
        tape.record(out, inputs, backward)
    return out


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    sa, sb = a.shape, b.shape
    return _result(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add", n=out.size)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    sa, sb = a.shape, b.shape
    return _result(out, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "add", n=out.size)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,), "neg", n=a.size)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad * bd
    return _result(
        out, (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
        "mul", n=out.size,
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        ga = g / bd
        return _unbroadcast(ga, ad.shape), _unbroadcast(-ga * out, bd.shape)

    return _result(out, (a, b), backward, "mul", n=out.size)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp", n=a.size)


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _result(np.log(ad), (a,), lambda g: (g / ad,), "log", n=a.size)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid", n=a.size)


def silu(a) -> Tensor:
    """x * sigmoid(x)."""
    a = as_tensor(a)
    x = a.data
    sg = _sigmoid(x)
    out = x * sg
    return _result(out, (a,), lambda g: (g * (sg + out * (1.0 - sg)),), "silu", n=a.size)


def softplus(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.logaddexp(0.0, x)
    return _result(out, (a,), lambda g: (g * _sigmoid(x),), "softplus", n=a.size)


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "view")


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    src = a.shape

    def backward(g):
        full = np.zeros(src, dtype=DTYPE)
        full[idx] = g
        return (full,)

    return _result(a.data[idx].copy(), (a,), backward, "view")


def repeat_leading(a, n: int) -> Tensor:
    """Stack ``n`` copies of ``a`` along a new leading axis."""
    a = as_tensor(a)
    out = np.broadcast_to(a.data, (n,) + a.shape).copy()
    return _result(out, (a,), lambda g: (g.sum(axis=0),), "view")


def embedding(weight: Tensor, tokens) -> Tensor:
    """Gather rows of ``weight`` by integer ``tokens``."""
    idx = np.asarray(tokens, dtype=np.int64)
    rows = weight.shape[0]

    def backward(g):
        gw = np.zeros(weight.shape, dtype=DTYPE)
        np.add.at(gw, idx.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (gw,)

    return _result(weight.data[idx], (weight,), backward, "gather", n=idx.size, rows=rows)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _expand_reduced(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims), dtype=DTYPE)
    return _result(out, (a,), lambda g: (_expand_reduced(g, src, axis, keepdims).copy(),), "sum", n=a.size)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    out = np.asarray(a.data.mean(axis=axis, keepdims=keepdims), dtype=DTYPE)
    count = a.size // max(out.size, 1)
    return _result(
        out, (a,), lambda g: (_expand_reduced(g, src, axis, keepdims) / count,), "sum", n=a.size
    )


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """``a[..., m, k] @ b[k, n]``; leading dims of ``a`` are batch."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd
    k, n = bd.shape
    rows = ad.size // k

    def backward(g):
        ga = g @ bd.T
        gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
        return ga, gb

    return _result(out, (a, b), backward, "matmul", rows=rows, k=k, n=n)


def spike_matmul(a, b, nnz: int, steps: int) -> Tensor:
    """Projection whose input rows are ternary spikes (possibly pre-scaled per channel).

    Numerically identical to ``matmul``; counted as ``nnz * n`` accumulates
    instead of multiply-accumulates.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[0] or b.ndim != 2:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd
    k, n = bd.shape
    rows = ad.size // k

    def backward(g):
        return g @ bd.T, ad.reshape(-1, k).T @ g.reshape(-1, n)

    return _result(out, (a, b), backward, "spike_matmul", rows=rows, k=k, n=n, nnz=int(nnz), steps=steps)


def rmsnorm(x, weight=None, eps: float = 1e-6) -> Tensor:
    """``x / sqrt(mean(x**2) + eps)`` over the last axis, times ``weight`` if given."""
    x = as_tensor(x)
    if eps < 0:
        raise ContractError("eps must be non-negative")
    d = x.shape[-1]
    if d < 1:
        raise DimensionError("rmsnorm needs a non-empty last axis")
    xd = x.data
    ms = np.mean(xd * xd, axis=-1, keepdims=True) + eps
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / np.sqrt(ms)
    inv = np.where(np.isfinite(inv), inv, 0.0)
    normed = xd * inv
    inputs: tuple = (x,)
    if weight is not None:
        weight = as_tensor(weight)
        if weight.shape != (d,):
            raise DimensionError(f"rmsnorm weight shape {weight.shape} != ({d},)")
        wd = weight.data
        out = normed * wd
        inputs = (x, weight)
    else:
        wd = None
        out = normed

    def backward(g):
        gn = g * wd if wd is not None else g
        dot = np.sum(gn * normed, axis=-1, keepdims=True)
        gx = inv * (gn - normed * dot / d)
        if wd is None:
            return (gx,)
        gw = (g * normed).reshape(-1, d).sum(axis=0)
        return gx, gw

    return _result(out, inputs, backward, "rmsnorm", n=x.size, weighted=weight is not None)


def log_softmax(logits) -> Tensor:
    """Row-wise log-probabilities over the last axis (max-shifted)."""
    x = as_tensor(logits)
    if x.shape[-1] < 1:
        raise DimensionError("log_softmax needs D >= 1")
    xd = x.data
    shifted = xd - xd.max(axis=-1, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=-1, keepdims=True),)

    return _result(out, (x,), backward, "log_softmax", n=x.size)


softmax_logprobs = log_softmax


def l2norm(x, axes=None) -> Tensor:
    """Euclidean norm over ``axes`` (all by default); subgradient 0 at the origin."""
    x = as_tensor(x)
    xd = x.data
    out = np.sqrt(np.sum(xd * xd, axis=axes))
    src = x.shape

    def backward(g):
        o = out
        if axes is not None:
            ax = (axes,) if isinstance(axes, int) else tuple(axes)
            ax = tuple(a % len(src) for a in ax)
            for a in sorted(ax):
                g = np.expand_dims(g, a)
                o = np.expand_dims(o, a)
        with np.errstate(divide="ignore", invalid="ignore"):
            scale = np.where(o > 0, g / o, 0.0)
        return (xd * scale,)

    return _result(np.asarray(out, dtype=DTYPE), (x,), backward, "l2norm", n=x.size)


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------

def finite_diff_grad(f: Callable, x, h: float = 1e-5) -> Tensor:
    """Central-difference gradient of scalar ``f`` at ``x``."""
    if h <= 0:
        raise ContractError("step h must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=DTYPE)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)

    def call(arr):
        val = f(Tensor._wrap(arr.reshape(base.shape).copy()))
        val = np.asarray(val.data if isinstance(val, Tensor) else val, dtype=DTYPE)
        if val.size != 1:
            raise ContractError(f"finite_diff_grad needs scalar f, got shape {val.shape}")
        return float(val.reshape(()))

    with uncounted():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = call(flat)
            flat[i] = orig - h
            fm = call(flat)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
    return Tensor._wrap(grad)
