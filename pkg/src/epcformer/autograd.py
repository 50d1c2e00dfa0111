"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every operation is a plain function taking and returning :class:`Tensor`.
When a :class:`Tape` is active and any input requires a gradient, the
operation appends a backward rule to the tape; ``tape.backward(loss)`` then
replays the rules in reverse order.

Arrays are row-major with features on the last axis (``L x C``).  Leading
batch axes are allowed everywhere; binary ops broadcast like numpy.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

NEG_INF_LOGIT = -1e9


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class TapeError(RuntimeError):
    """Raised on misuse of a tape (double backward, foreign loss)."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_tape", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._tape = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        """Flat row-major view of the data."""
        return self.data.reshape(-1)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


# ---------------------------------------------------------------------------
# tape

_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Ordered record of operations; one backward pass per recording."""

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def reset(self) -> None:
        self.nodes.clear()
        self.consumed = False

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], rule: Callable) -> None:
        out.requires_grad = True
        out._tape = self
        self.nodes.append((out, inputs, rule))

    def backward(self, loss: Tensor) -> None:
        if self.consumed:
            raise TapeError("backward already called on this tape; reset it first")
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        self.consumed = True
        if loss._tape is not self:
            if loss.requires_grad and loss.grad is not None:
                loss.grad = loss.grad + 1.0  # loss is itself a leaf
                return
            raise TapeError("loss was not recorded on this tape")
        loss.grad = np.ones_like(loss.data)
        for out, inputs, rule in reversed(self.nodes):
            g = out.grad
            if g is None:
                continue
            grads = rule(g)
            for inp, gi in zip(inputs, grads):
                if gi is None or not inp.requires_grad:
                    continue
                if inp._tape is None:
                    # leaf: accumulate in place into its own buffer
                    if inp.grad is None:
                        inp.grad = np.zeros_like(inp.data)
                    inp.grad += gi
                elif inp.grad is None:
                    inp.grad = np.array(gi, dtype=np.float64, copy=True)
                else:
                    inp.grad = inp.grad + gi
        # release intermediate buffers
        for out, _, _ in self.nodes:
            if out is not loss:
                out.grad = None


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every leaf reachable from ``loss``."""
    if loss._tape is None:
        raise TapeError("loss was not produced under an active tape")
    loss._tape.backward(loss)


def _make(value: np.ndarray, inputs: Sequence[Tensor], rule: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = value
    out.requires_grad = False
    out.grad = None
    out._tape = None
    out.name = None
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(out, tuple(inputs), rule)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# element-wise arithmetic

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "subtract")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "multiply")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "divide")
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape),
                            _unbroadcast(-g * out / bd, bd.shape)))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _make(a.data * s, (a,), lambda g: (g * s,))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _make(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def log_sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))
    return _make(out, (a,), lambda g: (g * _sigmoid(-x),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    x = a.data
    return _make(np.log(x), (a,), lambda g: (g / x,))


def power(a: Tensor, p: float) -> Tensor:
    x = a.data
    p = float(p)
    return _make(x ** p, (a,), lambda g: (g * p * x ** (p - 1.0),))


def absolute(a: Tensor) -> Tensor:
    x = a.data
    return _make(np.abs(x), (a,), lambda g: (g * np.sign(x),))


def maximum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "maximum")
    pick_a = a.data >= b.data
    return _make(np.where(pick_a, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(g * pick_a, a.shape),
                            _unbroadcast(g * ~pick_a, b.shape)))


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "minimum")
    pick_a = a.data <= b.data
    return _make(np.where(pick_a, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(g * pick_a, a.shape),
                            _unbroadcast(g * ~pick_a, b.shape)))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


# ---------------------------------------------------------------------------
# linear algebra and shape manipulation

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions disagree for shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    try:
        out = ad @ bd
    except ValueError:
        raise ShapeError(f"matmul: cannot batch shapes {a.shape} and {b.shape}") from None

    def rule(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                k = ad.shape[-1]
                gb = ad.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _make(out, (a, b), rule)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Swap the last two axes, or permute by ``axes``."""
    if axes is None:
        if a.ndim < 2:
            raise ShapeError(f"transpose needs at least 2 dims, got {a.shape}")
        axes = list(range(a.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {old} as {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (g.reshape(old),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"concat: incompatible shapes {shapes} along axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(out, tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=axis)))


def concat_rows(tensors: Sequence[Tensor]) -> Tensor:
    return concat(tensors, axis=-2 if as_tensor(tensors[0]).ndim > 1 else 0)


def getitem(a: Tensor, idx) -> Tensor:
    shape = a.shape

    def rule(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _make(a.data[idx], (a,), rule)


def embedding(table: Tensor, ids: np.ndarray, valid: np.ndarray | None = None) -> Tensor:
    """Row lookup ``table[ids]``; rows where ``valid`` is false are exactly zero."""
    ids = np.asarray(ids, dtype=np.int64)
    out = table.data[ids]
    keep = None
    if valid is not None:
        keep = np.asarray(valid, dtype=bool)
        out = np.where(keep[..., None], out, 0.0)

    def rule(g):
        if keep is not None:
            g = np.where(keep[..., None], g, 0.0)
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, g.shape[-1]))
        return (full,)

    return _make(out, (table,), rule)


# ---------------------------------------------------------------------------
# reductions

def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _make(np.asarray(out, dtype=np.float64), (a,), rule)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[i] for i in axes]))
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def softmax(a: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along ``axis``.

    ``mask`` (broadcastable, True = excluded) adds a large negative logit to
    excluded positions.  A slice with every position excluded yields zeros.
    """
    x = a.data
    dead = None
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        x = np.where(mask, x + NEG_INF_LOGIT, x)
        dead = np.all(np.broadcast_to(mask, x.shape), axis=axis, keepdims=True)
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    if dead is not None and dead.any():
        out = np.where(dead, 0.0, out)

    def rule(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), rule)


def softmax_rows(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    return softmax(a, axis=-1, mask=mask)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    z = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def rule(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), rule)


def mean_pool_rows(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Mean over the row axis (-2); ``mask`` marks padded rows (True = padded)."""
    if mask is None:
        return mean(a, axis=-2)
    keep = ~np.asarray(mask, dtype=bool)
    count = keep.sum(axis=-1)
    if np.any(count == 0):
        raise ValueError("empty pool: every row is masked")
    w = keep / count[..., None]
    return _make((a.data * w[..., None]).sum(axis=-2), (a,),
                 lambda g: (g[..., None, :] * w[..., :, None],))


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data

    def rule(g):
        gx = g * gd
        n = x.shape[-1]
        dx = inv / n * (n * gx - gx.sum(axis=-1, keepdims=True)
                        - xhat * (gx * xhat).sum(axis=-1, keepdims=True))
        return (dx, _unbroadcast(g * xhat, gd.shape), _unbroadcast(g, bias.shape))

    return _make(xhat * gd + bias.data, (a, gain, bias), rule)


def l2_normalize(a: Tensor, eps: float = 0.0) -> Tensor:
    """Rows scaled to unit norm; zero rows raise."""
    norm2 = (a.data * a.data).sum(axis=-1, keepdims=True)
    if np.any(norm2 <= eps):
        raise ValueError("zero-norm vector in cosine similarity")
    return mul(a, power(sum_(mul(a, a), axis=-1, keepdims=True), -0.5))


def cosine_similarity(u: Tensor, v: Tensor) -> Tensor:
    if u.shape != v.shape:
        raise ShapeError(f"cosine_similarity: shapes {u.shape} and {v.shape} differ")
    return sum_(mul(l2_normalize(u), l2_normalize(v)), axis=-1)


def cosine_matrix(a: Tensor, b: Tensor) -> Tensor:
    """Pairwise cosine similarities between rows of ``a`` (N x C) and ``b`` (M x C)."""
    return matmul(l2_normalize(a), transpose(l2_normalize(b)))


# ---------------------------------------------------------------------------
# finite-difference verification

def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    diff = np.linalg.norm(analytic - numeric)
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if denom < 1e-12:
        return float(diff)
    return float(diff / denom)


def numeric_grad(fn: Callable[[], Tensor], x: Tensor, eps: float = 1e-5,
                 indices: Iterable[tuple] | None = None) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. entries of ``x``."""
    grad = np.zeros_like(x.data)
    it = indices if indices is not None else np.ndindex(*x.shape)
    for idx in it:
        orig = x.data[idx]
        x.data[idx] = orig + eps
        fp = fn().item()
        x.data[idx] = orig - eps
        fm = fn().item()
        x.data[idx] = orig
        grad[idx] = (fp - fm) / (2 * eps)
    return grad


def check_gradients(fn: Callable[[], Tensor], params: dict[str, Tensor], eps: float = 1e-5,
                    max_entries: int | None = None,
                    rng: np.random.Generator | None = None) -> dict[str, float]:
    """Compare tape gradients with central differences for each named tensor.

    With ``max_entries`` set, only that many randomly chosen coordinates of
    each tensor are probed.  Returns the relative error per tensor.
    """
    for p in params.values():
        p.zero_grad()
    with Tape() as tape:
        loss = fn()
    tape.backward(loss)
    rng = rng or np.random.default_rng(0)
    errors = {}
    for name, p in params.items():
        if max_entries is None or p.data.size <= max_entries:
            idx = list(np.ndindex(*p.shape))
        else:
            flat = rng.choice(p.data.size, size=max_entries, replace=False)
            idx = [np.unravel_index(i, p.shape) for i in sorted(flat)]
        num = numeric_grad(fn, p, eps, idx)
        sel = tuple(np.array(idx).T) if idx and p.ndim else ()
        errors[name] = relative_error(p.grad[sel], num[sel])
    return errors
