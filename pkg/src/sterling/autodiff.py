"""Dense tensors with tape-based reverse-mode differentiation and Adam.

Every objective in the package is expressed with the functions in this
module.  A forward op records itself on the active :class:`Tape` when at
least one input requires a gradient; :func:`backward` then walks the tape
in reverse and returns a :class:`GradMap`.

    with Tape() as tape:
        loss = sum_all(hadamard(x, x))
    grads = backward(tape, loss)
    grads[x]            # == 2 * x.data
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

EPS = 1e-12
LOG_FLOOR = 1e-12


class ShapeError(ValueError):
    pass


class Tensor:
    """A dense real array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return hadamard(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


@dataclass
class _Node:
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of differentiable ops.  Use as a context manager."""

    _active: list["Tape"] = []

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        Tape._active.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._active.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    @classmethod
    def current(cls) -> "Tape | None":
        return cls._active[-1] if cls._active else None


class GradMap(dict):
    """Maps a Tensor to its gradient; untouched tensors get zeros."""

    def __missing__(self, key: Tensor) -> np.ndarray:
        return np.zeros_like(key.data)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out_data: np.ndarray, inputs: tuple, backward_fn) -> Tensor:
    tape = Tape.current()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape.nodes.append(_Node(inputs, out, backward_fn))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def backward(tape: Tape, loss: Tensor) -> GradMap:
    """Accumulate d(loss)/d(t) for every tensor recorded on ``tape``."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = GradMap()
    grads[loss] = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        g = grads.get(node.output)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp in grads:
                grads[inp] = grads[inp] + gi
            else:
                grads[inp] = gi
    return grads


# ---------------------------------------------------------------- linear


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    A, B = a.data, b.data
    return _record(A @ B, (a, b), lambda g: (g @ B.T, A.T @ g))


def transpose(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    return _record(a.data.T, (a,), lambda g: (g.T,))


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def scale(a: Tensor, c: float) -> Tensor:
    a = _as_tensor(a)
    return _record(a.data * c, (a,), lambda g: (g * c,))


def hadamard(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "hadamard")
    A, B = a.data, b.data
    return _record(
        A * B, (a, b), lambda g: (_unbroadcast(g * B, A.shape), _unbroadcast(g * A, B.shape))
    )


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "div")
    A, B = a.data, b.data
    out = A / B
    return _record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / B, A.shape), _unbroadcast(-g * out / B, B.shape)),
    )


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ShapeError(f"concat_cols: row mismatch {a.shape} vs {b.shape}")
    k = a.shape[1]
    return _record(np.concatenate([a.data, b.data], axis=1), (a, b), lambda g: (g[:, :k], g[:, k:]))


def gather_rows(x: Tensor, idx) -> Tensor:
    x = _as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    n = x.shape[0]

    def bw(g):
        out = np.zeros_like(x.data)
        np.add.at(out, idx, g)
        return (out,)

    if idx.size and (idx.min() < -n or idx.max() >= n):
        raise ShapeError(f"gather_rows: index out of range for {n} rows")
    return _record(x.data[idx], (x,), bw)


def spmm(S, x: Tensor) -> Tensor:
    """Constant sparse (or dense) matrix times tensor."""
    x = _as_tensor(x)
    if S.shape[1] != x.shape[0]:
        raise ShapeError(f"spmm: incompatible shapes {S.shape} and {x.shape}")
    out = np.asarray(S @ x.data)
    ST = S.T
    return _record(out.astype(x.dtype, copy=False), (x,), lambda g: (np.asarray(ST @ g).astype(x.dtype, copy=False),))


def mean_operator(adj) -> sp.csr_matrix:
    """Row-normalize a 0/1 adjacency; empty rows stay all-zero."""
    adj = sp.csr_matrix(adj, dtype=np.float64)
    deg = np.asarray(adj.sum(axis=1)).ravel()
    inv = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
    return sp.diags(inv) @ adj


def row_mean_over_neighbors(adj, x: Tensor) -> Tensor:
    """Row r of the output is the mean of x over r's neighbors in ``adj``.

    Isolated rows produce a zero vector.  Callers that apply the same
    adjacency repeatedly can precompute :func:`mean_operator` and use
    :func:`spmm` directly.
    """
    return spmm(mean_operator(adj), x)


# ---------------------------------------------------------- elementwise


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    return _record(np.where(mask, x.data, 0.0).astype(x.dtype), (x,), lambda g: (g * mask,))


def tanh(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    y = np.tanh(x.data)
    return _record(y, (x,), lambda g: (g * (1.0 - y * y),))


def abs_(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    s = np.sign(x.data)
    return _record(np.abs(x.data), (x,), lambda g: (g * s,))


def log(x: Tensor, floor: float = LOG_FLOOR) -> Tensor:
    """log(max(x, floor)); the gradient is zero where the floor is active."""
    x = _as_tensor(x)
    safe = np.maximum(x.data, floor)
    live = x.data > floor
    return _record(np.log(safe), (x,), lambda g: (np.where(live, g / safe, 0.0),))


def softmax_rows(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    return _record(y, (x,), lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))


def threshold_filter(x: Tensor, alpha: float) -> Tensor:
    """Zero every entry below mean + alpha * std of ``x``; keep the rest.

    mean and std are taken over all entries and treated as constants in
    the backward pass.
    """
    x = _as_tensor(x)
    cut = x.data.mean() + alpha * x.data.std() if math.isfinite(alpha) else -np.inf
    keep = x.data >= cut
    return _record(np.where(keep, x.data, 0.0).astype(x.dtype), (x,), lambda g: (g * keep,))


# ----------------------------------------------------------- reductions


def sum_all(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    shape = x.shape
    return _record(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    return scale(sum_all(x), 1.0 / max(x.data.size, 1))


def sum_axis(x: Tensor, axis: int, keepdims: bool = True) -> Tensor:
    x = _as_tensor(x)
    shape = x.shape

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(x.data.sum(axis=axis, keepdims=keepdims), (x,), bw)


def normalize_rows(x: Tensor, eps: float = EPS) -> Tensor:
    """x / max(||x||, eps) row by row."""
    x = _as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    den = np.maximum(norm, eps)
    y = x.data / den
    live = norm > eps

    def bw(g):
        proj = (g * y).sum(axis=-1, keepdims=True)
        return (np.where(live, (g - y * proj) / den, g / den),)

    return _record(y, (x,), bw)


def cosine_rows(a: Tensor, b: Tensor, eps: float = EPS) -> Tensor:
    """Per-row cosine similarity; zero-norm rows give 0."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"cosine_rows: shapes differ {a.shape} vs {b.shape}")
    A, B = a.data, b.data
    na = np.sqrt((A * A).sum(axis=-1))
    nb = np.sqrt((B * B).sum(axis=-1))
    da, db = np.maximum(na, eps), np.maximum(nb, eps)
    dot = (A * B).sum(axis=-1)
    c = dot / (da * db)

    def bw(g):
        g = g[..., None]
        ga = B / (da * db)[..., None] - np.where((na > eps)[..., None], c[..., None] * A / (da * da)[..., None], 0.0)
        gb = A / (da * db)[..., None] - np.where((nb > eps)[..., None], c[..., None] * B / (db * db)[..., None], 0.0)
        return (g * ga, g * gb)

    return _record(c, (a, b), bw)


def stop_gradient(x: Tensor) -> Tensor:
    return Tensor(_as_tensor(x).data, requires_grad=False)


# ----------------------------------------------------------------- Adam


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0

    @classmethod
    def create(cls, params: Iterable[Tensor], lr: float = 5e-4, beta1: float = 0.9,
               beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        params = list(params)
        return cls(
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
            lr=lr, beta1=beta1, beta2=beta2, eps=eps,
        )


def adam_step(state: AdamState, params: Sequence[Tensor], grads) -> None:
    """One bias-corrected Adam update, applied in place to ``params``."""
    if len(params) != len(state.m):
        raise ShapeError(f"adam_step: {len(params)} params but state tracks {len(state.m)}")
    gs = []
    for i, p in enumerate(params):
        g = grads[p] if isinstance(grads, dict) else grads[i]
        g = np.asarray(g)
        if g.shape != p.shape:
            raise ShapeError(f"adam_step: gradient for {p.name or i} has shape {g.shape}, param {p.shape}")
        if not np.all(np.isfinite(g)):
            bad = int((~np.isfinite(g)).sum())
            raise FloatingPointError(f"non-finite gradient in tensor {p.name or i!r} ({bad} entries)")
        gs.append(g)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, gs, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)
