"""Dense float64 tensors with a reverse-mode tape.

Every primitive computes its forward value with numpy and, when a tape is
active and at least one input is tracked, records a closure producing the
vector-Jacobian product for each input.  ``backward`` walks the tape once in
reverse order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from treeground.errors import NumericError, ShapeError

VJP = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """Row-major float64 array plus an optional tape reference."""

    __slots__ = ("data", "requires_grad", "node_id", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.node_id: int | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def tracked(self) -> bool:
        return self.requires_grad or self.node_id is not None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.node_id = None
        out.name = None
        return out

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, tracked={self.tracked})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul_elementwise(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _wrap(data: np.ndarray) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out.node_id = None
    out.name = None
    return out


@dataclass
class TapeEntry:
    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: VJP


@dataclass
class Tape:
    """Ordered record of primitive applications.

    Use as a context manager; operations executed inside the block on tracked
    inputs are appended in execution order, which is a topological order.
    """

    entries: list[TapeEntry] = field(default_factory=list)
    vjp_calls: int = 0

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.entries)

    def record(self, kind: str, inputs: tuple[Tensor, ...], output: Tensor, vjp: VJP) -> None:
        output.node_id = len(self.entries)
        self.entries.append(TapeEntry(kind, inputs, output, vjp))

    def backward(self, loss: Tensor, params: Mapping[str, Tensor] | None = None) -> dict[str, Tensor]:
        return backward(loss, params, tape=self)


_TAPES: list[Tape] = []


def active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def _emit(kind: str, inputs: tuple[Tensor, ...], data: np.ndarray, vjp: VJP) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{kind}: non-finite output (inputs {[t.shape for t in inputs]})")
    out = _wrap(data)
    tape = active_tape()
    if tape is not None and any(t.tracked for t in inputs):
        tape.record(kind, inputs, out, vjp)
    return out


def _mismatch(kind: str, a: Tensor, b: Tensor, why: str = "") -> ShapeError:
    extra = f" ({why})" if why else ""
    return ShapeError(f"{kind}: incompatible shapes {a.shape} and {b.shape}{extra}")


def backward(loss: Tensor, params: Mapping[str, Tensor] | None = None,
             tape: Tape | None = None) -> dict[str, Tensor]:
    """Gradients of a scalar ``loss`` with respect to ``params``.

    Parameters not reachable from ``loss`` get zero gradients.  Without
    ``params`` every tracked leaf reached is returned, keyed by its name (or
    ``id``).
    """
    if loss.size != 1 or loss.ndim > 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.tracked:
        raise NumericError("backward: loss is not tracked")
    tape = tape if tape is not None else active_tape()
    if tape is None:
        raise NumericError("backward: no tape recorded")

    adjoints: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    if loss.requires_grad:
        leaves[id(loss)] = loss
    for entry in reversed(tape.entries):
        g = adjoints.pop(id(entry.output), None)
        if g is None:
            continue
        tape.vjp_calls += 1
        for inp, gi in zip(entry.inputs, entry.vjp(g)):
            if gi is None or not inp.tracked:
                continue
            key = id(inp)
            if key in adjoints:
                adjoints[key] = adjoints[key] + gi
            else:
                adjoints[key] = gi
            if inp.requires_grad:
                leaves[key] = inp

    if params is None:
        return {(t.name or str(k)): _wrap(adjoints[k]) for k, t in leaves.items()}
    return {name: _wrap(adjoints.get(id(p), np.zeros_like(p.data))) for name, p in params.items()}


# ---------------------------------------------------------------------------
# broadcasting helpers: equal shapes, or one shape is a suffix of the other
# ---------------------------------------------------------------------------


def _suffix_compatible(a: tuple, b: tuple) -> bool:
    if a == b:
        return True
    short, long_ = (a, b) if len(a) <= len(b) else (b, a)
    return len(short) < len(long_) and long_[len(long_) - len(short):] == short


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim == 0 or b.ndim == 0:
        ok = False
    elif b.ndim == 1:
        ok = a.shape[-1] == b.shape[0]
    elif b.ndim == 2:
        ok = a.shape[-1] == b.shape[0]
    else:
        ok = a.ndim == b.ndim and a.shape[:-2] == b.shape[:-2] and a.shape[-1] == b.shape[-2]
    if not ok:
        raise _mismatch("matmul", a, b)
    A, B = a.data, b.data
    out = A @ B

    def vjp(g):
        if A.ndim == 1 and B.ndim == 1:
            return g * B, g * A
        if A.ndim == 1:
            return B @ g, np.outer(A, g)
        if B.ndim == 1:
            return np.multiply.outer(g, B), np.einsum("...i,...ij->j", g, A)
        ga = g @ np.swapaxes(B, -1, -2)
        gb = np.swapaxes(A, -1, -2) @ g
        return ga, _reduce_to(gb, B.shape)

    return _emit("matmul", (a, b), out, vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    if not _suffix_compatible(a.shape, b.shape):
        raise _mismatch("add", a, b)
    sa, sb = a.shape, b.shape
    return _emit("add", (a, b), a.data + b.data, lambda g: (_reduce_to(g, sa), _reduce_to(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    if not _suffix_compatible(a.shape, b.shape):
        raise _mismatch("sub", a, b)
    sa, sb = a.shape, b.shape
    return _emit("sub", (a, b), a.data - b.data, lambda g: (_reduce_to(g, sa), -_reduce_to(g, sb)))


def mul_elementwise(a: Tensor, b: Tensor) -> Tensor:
    if not _suffix_compatible(a.shape, b.shape):
        raise _mismatch("mul_elementwise", a, b)
    A, B = a.data, b.data
    return _emit("mul_elementwise", (a, b), A * B,
                 lambda g: (_reduce_to(g * B, A.shape), _reduce_to(g * A, B.shape)))


def scale(x: Tensor, s: "Tensor | float") -> Tensor:
    """``x * s`` for a constant float or a tracked scalar tensor ``s``."""
    if not isinstance(s, Tensor):
        c = float(s)
        return _emit("scale", (x,), x.data * c, lambda g: (g * c,))
    if s.size != 1 or s.ndim > 1:
        raise _mismatch("scale", x, s, "factor must be a scalar")
    X, c = x.data, float(s.data.reshape(()))
    sshape = s.shape
    return _emit("scale", (x, s), X * c,
                 lambda g: (g * c, np.reshape(np.sum(g * X), sshape)))


def div(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise _mismatch("div", a, b)
    A, B = a.data, b.data
    if np.any(B == 0):
        raise NumericError("div: zero denominator")
    out = A / B
    return _emit("div", (a, b), out, lambda g: (g / B, -g * out / B))


def sigmoid(x: Tensor) -> Tensor:
    out = _np_sigmoid(x.data)
    return _emit("sigmoid", (x,), out, lambda g: (g * out * (1.0 - out),))


def log_sigmoid(x: Tensor) -> Tensor:
    X = x.data
    out = np.minimum(X, 0.0) - np.log1p(np.exp(-np.abs(X)))
    return _emit("log_sigmoid", (x,), out, lambda g: (g * _np_sigmoid(-X),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit("relu", (x,), x.data * mask, lambda g: (g * mask,))


def abs_(x: Tensor) -> Tensor:
    sign = np.sign(x.data)
    return _emit("abs", (x,), np.abs(x.data), lambda g: (g * sign,))


def log(x: Tensor) -> Tensor:
    X = x.data
    if np.any(X <= 0):
        raise NumericError("log: non-positive input")
    return _emit("log", (x,), np.log(X), lambda g: (g / X,))


def minimum(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise _mismatch("minimum", a, b)
    pick_a = a.data <= b.data
    return _emit("minimum", (a, b), np.where(pick_a, a.data, b.data),
                 lambda g: (g * pick_a, g * ~pick_a))


def maximum(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise _mismatch("maximum", a, b)
    pick_a = a.data >= b.data
    return _emit("maximum", (a, b), np.where(pick_a, a.data, b.data),
                 lambda g: (g * pick_a, g * ~pick_a))


def softmax_lastdim(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (out * (g - np.sum(g * out, axis=-1, keepdims=True)),)

    return _emit("softmax_lastdim", (x,), out, vjp)


def layernorm_lastdim(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance (no affine part)."""
    X = x.data
    mu = X.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(X.var(axis=-1, keepdims=True) + eps)
    xhat = (X - mu) * inv

    def vjp(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _emit("layernorm_lastdim", (x,), xhat, vjp)


def maxpool_spatial(x: Tensor) -> Tensor:
    """Channelwise max over the trailing two (spatial) axes: (..., C, H, W) -> (..., C)."""
    if x.ndim < 3:
        raise ShapeError(f"maxpool_spatial: expected (..., C, H, W), got shape {x.shape}")
    X = x.data
    flat = X.reshape(X.shape[:-2] + (-1,))
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def vjp(g):
        gf = np.zeros_like(flat)
        np.put_along_axis(gf, idx[..., None], g[..., None], axis=-1)
        return (gf.reshape(X.shape),)

    return _emit("maxpool_spatial", (x,), out, vjp)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat: no inputs")
    ref = tensors[0]
    ax = axis % ref.ndim if ref.ndim else 0
    for t in tensors[1:]:
        if t.ndim != ref.ndim or t.shape[:ax] + t.shape[ax + 1:] != ref.shape[:ax] + ref.shape[ax + 1:]:
            raise _mismatch("concat", ref, t)
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=ax)
    return _emit("concat", tensors, out, lambda g: tuple(np.split(g, bounds, axis=ax)))


def embed_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"embed_lookup: table must be 2-D, got shape {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embed_lookup: ids out of range for table of shape {table.shape}")
    T = table.data

    def vjp(g):
        gt = np.zeros_like(T)
        np.add.at(gt, ids, g)
        return (gt,)

    return _emit("embed_lookup", (table,), T[ids], vjp)


def l2_distance(a: Tensor, b: Tensor) -> Tensor:
    """Squared Euclidean distance along the last axis."""
    if a.shape != b.shape:
        raise _mismatch("l2_distance", a, b)
    d = a.data - b.data
    out = np.sum(d * d, axis=-1)

    def vjp(g):
        gd = 2.0 * d * g[..., None]
        return gd, -gd

    return _emit("l2_distance", (a, b), out, vjp)


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise _mismatch("cosine_similarity", a, b)
    A, B = a.data, b.data
    na = np.linalg.norm(A, axis=-1, keepdims=True)
    nb = np.linalg.norm(B, axis=-1, keepdims=True)
    if np.any(na == 0) or np.any(nb == 0):
        raise NumericError("cosine_similarity: zero vector has no direction")
    cos = np.sum(A * B, axis=-1, keepdims=True) / (na * nb)

    def vjp(g):
        g = g[..., None]
        ga = g * (B / (na * nb) - cos * A / (na * na))
        gb = g * (A / (na * nb) - cos * B / (nb * nb))
        return ga, gb

    return _emit("cosine_similarity", (a, b), cos[..., 0], vjp)


def mean_lastdim(x: Tensor) -> Tensor:
    n = x.shape[-1]
    return _emit("mean_lastdim", (x,), x.data.mean(axis=-1),
                 lambda g: (np.repeat(g[..., None] / n, n, axis=-1),))


def sum_all(x: Tensor) -> Tensor:
    shp = x.shape
    return _emit("sum", (x,), np.asarray(x.data.sum()), lambda g: (np.broadcast_to(g, shp).copy(),))


def reshape(x: Tensor, shape: Iterable[int]) -> Tensor:
    shape = tuple(shape)
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {src} as {shape}") from exc
    return _emit("reshape", (x,), out, lambda g: (g.reshape(src),))


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit("permute", (x,), np.transpose(x.data, axes), lambda g: (np.transpose(g, inv),))


def take(x: Tensor, index) -> Tensor:
    """Rows of ``x`` along axis 0 selected by an integer array or slice."""
    X = x.data
    out = X[index]
    if isinstance(index, slice):
        def vjp(g):
            gx = np.zeros_like(X)
            gx[index] = g
            return (gx,)
    else:
        index = np.asarray(index, dtype=np.int64)

        def vjp(g):
            gx = np.zeros_like(X)
            np.add.at(gx, index, g)
            return (gx,)

    return _emit("take", (x,), np.array(out), vjp)


def unfold3x3(x: Tensor) -> Tensor:
    """Zero-padded 3x3 neighbourhoods: (N, C, H, W) -> (N, H, W, 9*C).

    Feature order is (channel, dy, dx), matching a conv kernel reshaped from
    (C_out, C, 3, 3) to (C_out, 9*C).
    """
    if x.ndim != 4:
        raise ShapeError(f"unfold3x3: expected (N, C, H, W), got shape {x.shape}")
    X = x.data
    n, c, h, w = X.shape
    padded = np.pad(X, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((n, c, 3, 3, h, w))
    for dy in range(3):
        for dx in range(3):
            cols[:, :, dy, dx] = padded[:, :, dy:dy + h, dx:dx + w]
    out = cols.reshape(n, c * 9, h, w).transpose(0, 2, 3, 1)

    def vjp(g):
        gc = g.transpose(0, 3, 1, 2).reshape(n, c, 3, 3, h, w)
        gp = np.zeros_like(padded)
        for dy in range(3):
            for dx in range(3):
                gp[:, :, dy:dy + h, dx:dx + w] += gc[:, :, dy, dx]
        return (gp[:, :, 1:-1, 1:-1],)

    return _emit("unfold3x3", (x,), np.ascontiguousarray(out), vjp)


def _np_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul_elementwise": mul_elementwise,
    "scale": scale,
    "sigmoid": sigmoid,
    "relu": relu,
    "softmax_lastdim": softmax_lastdim,
    "layernorm_lastdim": layernorm_lastdim,
    "maxpool_spatial": maxpool_spatial,
    "concat": lambda *ts, axis=0: concat(ts, axis=axis),
    "embed_lookup": embed_lookup,
    "l2_distance": l2_distance,
    "cosine_similarity": cosine_similarity,
    "mean_lastdim": mean_lastdim,
    # support set needed by the losses and the layer plumbing
    "div": div,
    "log": log,
    "log_sigmoid": log_sigmoid,
    "abs": abs_,
    "minimum": minimum,
    "maximum": maximum,
    "sum": sum_all,
    "reshape": reshape,
    "permute": permute,
    "take": take,
    "unfold3x3": unfold3x3,
}


def apply_primitive(kind: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise ShapeError(f"unknown primitive {kind!r}") from None
    return fn(*inputs, **attrs)
