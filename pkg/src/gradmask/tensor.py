"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation records its parents and a closure that maps the output
gradient to input gradients. ``backward`` replays those records in reverse
topological order. Binary operations require equal shapes (python scalars
are the only implicit broadcast); use :func:`expand` to broadcast
explicitly.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "DomainError",
    "DegenerateRowError",
    "ProbeError",
    "tensor",
    "no_grad",
    "is_grad_enabled",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "relu",
    "exp",
    "log",
    "sigmoid",
    "abs_",
    "sum_",
    "mean",
    "reshape",
    "transpose",
    "expand",
    "concat",
    "stack",
    "index",
    "softmax_rows",
    "log_softmax_rows",
    "layer_norm",
    "dropout",
    "backward",
    "gradcheck",
    "topological_order",
]


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class DegenerateRowError(ValueError):
    pass


class ProbeError(RuntimeError):
    pass


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """A float64 array plus the bookkeeping needed for reverse-mode AD."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "__weakref__")

    # make numpy defer to our reflected operators
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64) if not isinstance(data, np.ndarray) or data.dtype != np.float64 else data
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def backward(self) -> None:
        backward(self)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.array(x, dtype=np.float64))


def _make(data: np.ndarray, parents: tuple[Tensor, ...], fn: BackwardFn, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = fn
    return out


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape} (use expand() to broadcast)")


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer))


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    if _is_scalar(b):
        a = _as_tensor(a)
        c = float(b)
        return _make(a.data + c, (a,), lambda g: (g,), "add_scalar")
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    if _is_scalar(b):
        return add(a, -float(b))
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    if _is_scalar(b):
        a = _as_tensor(a)
        c = float(b)
        return _make(a.data * c, (a,), lambda g: (g * c,), "mul_scalar")
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def div(a, b) -> Tensor:
    if _is_scalar(b):
        return mul(a, 1.0 / float(b))
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, (a, b), lambda g: (g / bd, -g * out / bd), "div")


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def relu(a) -> Tensor:
    a = _as_tensor(a)
    # derivative at exactly 0 is 0
    pos = a.data > 0
    return _make(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,), "relu")


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log: input has non-positive entries")
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    # split by sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def abs_(a) -> Tensor:
    a = _as_tensor(a)
    sgn = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * sgn,), "abs")


# ---------------------------------------------------------------------------
# linear algebra and shape manipulation


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes must match exactly."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def fn(g):
        return (
            g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None,
            np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None,
        )

    return _make(ad @ bd, (a, b), fn, "matmul")


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {src} to {shape}") from exc
    return _make(out, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; default swaps the last two."""
    a = _as_tensor(a)
    if axes is None:
        axes = list(range(a.ndim))
        axes[-2], axes[-1] = axes[-1], axes[-2]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def expand(a, shape: Sequence[int]) -> Tensor:
    """Explicit broadcast of ``a`` to ``shape`` following numpy alignment rules."""
    a = _as_tensor(a)
    shape = tuple(shape)
    src = a.shape
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise ShapeError(f"expand: cannot expand {src} to {shape}") from exc
    lead = len(shape) - len(src)
    kept = tuple(i + lead for i, s in enumerate(src) if s == 1 and shape[i + lead] != 1)

    def fn(g):
        if lead:
            g = g.sum(axis=tuple(range(lead)))
        if kept:
            g = g.sum(axis=tuple(k - lead for k in kept), keepdims=True)
        return (g,)

    return _make(np.array(out, order="C"), (a,), fn, "expand")


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    src = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _make(np.asarray(out, dtype=np.float64), (a,), fn, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[i] for i in axes]))
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in ts], axis=axis)
    return _make(out, tuple(ts), lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    shapes = {t.shape for t in ts}
    if len(shapes) != 1:
        raise ShapeError(f"stack: shapes differ {sorted(shapes)}")
    out = np.stack([t.data for t in ts], axis=axis)

    def fn(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return _make(out, tuple(ts), fn, "stack")


def index(a, idx) -> Tensor:
    """Basic (non-fancy) indexing; gradient scatters back into a zero array."""
    a = _as_tensor(a)
    src = a.shape

    def fn(g):
        full = np.zeros(src)
        full[idx] = g
        return (full,)

    return _make(np.array(a.data[idx], dtype=np.float64), (a,), fn, "index")


# ---------------------------------------------------------------------------
# attention / normalisation primitives


def _row_exclusion(x: np.ndarray, exclude) -> np.ndarray | None:
    if exclude is None:
        return None
    ex = np.broadcast_to(np.asarray(exclude, dtype=bool), x.shape)
    if np.any(ex.all(axis=-1)):
        raise DegenerateRowError("softmax_rows: a row has every entry excluded")
    return ex


def softmax_rows(scores, exclude=None) -> Tensor:
    """Stable softmax over the last axis.

    Entries flagged in ``exclude`` get probability exactly 0 and take no part
    in the row max or the normaliser.
    """
    s = _as_tensor(scores)
    ex = _row_exclusion(s.data, exclude)
    if ex is None:
        z = s.data - s.data.max(axis=-1, keepdims=True)
        e = np.exp(z)
    else:
        shifted = np.where(ex, -np.inf, s.data)
        z = shifted - shifted.max(axis=-1, keepdims=True)
        e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def fn(g):
        # excluded entries have p == 0, so their gradient is exactly 0
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make(p, (s,), fn, "softmax")


def log_softmax_rows(scores) -> Tensor:
    s = _as_tensor(scores)
    z = s.data - s.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _make(out, (s,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),), "log_softmax")


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then scale and shift."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match feature dim {d}")
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gain.data + bias.data
    lead = tuple(range(x.ndim - 1))

    def fn(g):
        gx = None
        if x.requires_grad:
            gh = g * gain.data
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        gg = (g * xhat).sum(axis=lead) if gain.requires_grad else None
        gb = g.sum(axis=lead) if bias.requires_grad else None
        return gx, gg, gb

    return _make(out, (x, gain, bias), fn, "layer_norm")


def dropout(x, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity in eval mode or when ``p == 0``."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout: p must lie in [0, 1), got {p}")
    x = _as_tensor(x)
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout: training mode needs an rng")
    keep = rng.random(x.shape) >= p
    scale = keep / (1.0 - p)
    return _make(x.data * scale, (x,), lambda g: (g * scale,), "dropout")


# ---------------------------------------------------------------------------
# tape replay


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` that carry gradient, parents before children."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every grad-requiring tensor reachable from ``loss``.

    Leaf gradients accumulate across calls; intermediate gradients are
    overwritten.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        node.grad = g
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def tape_nbytes(root: Tensor) -> int:
    """Bytes held by values on the tape behind ``root`` (gradients double it)."""
    return sum(2 * t.data.nbytes for t in topological_order(root))


def gradcheck(f: Callable[[], Tensor], params: Iterable[Tensor], h: float = 1e-6) -> float:
    """Max relative error between autodiff and central-difference gradients.

    ``f`` is re-evaluated with each parameter element nudged by ``±h``; the
    error per element is ``|g_ad - g_fd| / max(1, |g_ad|, |g_fd|)``.
    """
    params = list(params)
    for p in params:
        p.grad = None
        # nudges go through a flat view, so scalars and strided data need a real buffer
        if not isinstance(p.data, np.ndarray) or not p.data.flags.c_contiguous:
            p.data = np.array(p.data, dtype=np.float64, order="C")
    loss = f()
    if not np.isfinite(loss.data).all():
        raise ProbeError("gradcheck: f is not finite at the probe point")
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    with no_grad():
        for p, g_ad in zip(params, analytic):
            flat = p.data.reshape(-1)
            g_flat = g_ad.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = float(f().data)
                flat[i] = orig - h
                fm = float(f().data)
                flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise ProbeError("gradcheck: f is not finite near the probe point")
                g_fd = (fp - fm) / (2.0 * h)
                err = abs(g_flat[i] - g_fd) / max(1.0, abs(g_flat[i]), abs(g_fd))
                worst = max(worst, err)
    for p in params:
        p.grad = None
    return worst
