"""Reverse-mode automatic differentiation over float64 numpy arrays.

A :class:`Tensor` wraps an ``np.ndarray`` and records, for every operation,
its parent tensors and a closure that propagates the output gradient back to
them.  Calling :meth:`Tensor.backward` on a scalar walks the recorded graph
in reverse topological order and accumulates gradients into ``.grad`` for
every tensor created with ``requires_grad=True``.

Design notes:

* everything is float64; inputs are coerced on construction,
* any tensor holding NaN/Inf raises :class:`NonFiniteError` immediately,
  naming the operation that produced it (overflowing ops error rather than
  clamp),
* operations whose inputs all have ``requires_grad=False`` do not extend the
  graph, so constant subcomputations stay cheap,
* ``backward()`` resets gradients before accumulating, so calling it twice
  yields identical results.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


def _check_finite(arr: np.ndarray, op: str) -> None:
    if arr.size == 0:
        return
    # min+max propagate NaN and turn opposite Infs into NaN; one scalar test
    # instead of a full boolean temporary.
    probe = arr.min() + arr.max()
    if not np.isfinite(probe):
        raise NonFiniteError(f"operation '{op}' produced non-finite values")


class Tensor:
    """Node in a dynamically recorded computation graph.

    Parameters
    ----------
    data : array-like
        Coerced to a float64 ``np.ndarray``.
    requires_grad : bool
        Whether gradients should be accumulated into this tensor.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, _op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        _check_finite(self.data, _op)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[], None] | None = None
        self._op = _op

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
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        grad = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op!r}{grad})"

    # -- graph construction ------------------------------------------------

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> dict["Tensor", np.ndarray]:
        """Backpropagate from a scalar root.

        Returns a map from each reachable ``requires_grad`` leaf to its
        gradient array (also stored on ``.grad``).  Gradients are reset
        before accumulation, so repeated calls give identical results.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward() requires a scalar root, got shape {self.shape}")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))

        for node in order:
            node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                if node.grad is None:
                    continue
                node._backward()

        leaves: dict[Tensor, np.ndarray] = {}
        for node in order:
            if node.requires_grad and node._backward is None:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                leaves[node] = node.grad
        return leaves

    # -- operator sugar ----------------------------------------------------

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable[[], None], op: str) -> Tensor:
    out = Tensor(data, _op=op)
    if any(p.requires_grad or p._backward is not None for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise arithmetic -----------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data
    out = _make(out_data, (a, b), None, "add")

    def backward():
        g = out.grad
        a._accumulate(_unbroadcast(g, a.data.shape))
        b._accumulate(_unbroadcast(g, b.data.shape))

    out._backward = backward if out._parents else None
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _make(a.data - b.data, (a, b), None, "sub")

    def backward():
        g = out.grad
        a._accumulate(_unbroadcast(g, a.data.shape))
        b._accumulate(_unbroadcast(-g, b.data.shape))

    out._backward = backward if out._parents else None
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _make(a.data * b.data, (a, b), None, "mul")

    def backward():
        g = out.grad
        a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    out._backward = backward if out._parents else None
    return out


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _make(a.data / b.data, (a, b), None, "div")

    def backward():
        g = out.grad
        a._accumulate(_unbroadcast(g / b.data, a.data.shape))
        b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    out._backward = backward if out._parents else None
    return out


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul requires ndim >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = _make(np.matmul(a.data, b.data), (a, b), None, "matmul")

    def backward():
        g = out.grad
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        a._accumulate(_unbroadcast(ga, a.data.shape))
        b._accumulate(_unbroadcast(gb, b.data.shape))

    out._backward = backward if out._parents else None
    return out


def power(x, exponent: float) -> Tensor:
    x = as_tensor(x)
    p = float(exponent)
    with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
        data = x.data ** p
    out = _make(data, (x,), None, "power")

    def backward():
        if p == 0.0:
            x._accumulate(np.zeros_like(x.data))
            return
        x._accumulate(out.grad * p * x.data ** (p - 1.0))

    out._backward = backward if out._parents else None
    return out


def sqrt(x) -> Tensor:
    return power(x, 0.5)


def exp(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        data = np.exp(x.data)
    out = _make(data, (x,), None, "exp")

    def backward():
        x._accumulate(out.grad * out.data)

    out._backward = backward if out._parents else None
    return out


def log(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.log(x.data)
    out = _make(data, (x,), None, "log")

    def backward():
        x._accumulate(out.grad / x.data)

    out._backward = backward if out._parents else None
    return out


def abs_(x) -> Tensor:
    """Elementwise absolute value; subgradient 0 at 0."""
    x = as_tensor(x)
    out = _make(np.abs(x.data), (x,), None, "abs")

    def backward():
        x._accumulate(out.grad * np.sign(x.data))

    out._backward = backward if out._parents else None
    return out


def minimum(a, b) -> Tensor:
    """Elementwise minimum; ties route the gradient to the first argument."""
    a, b = as_tensor(a), as_tensor(b)
    out = _make(np.minimum(a.data, b.data), (a, b), None, "minimum")

    def backward():
        g = out.grad
        take_a = (a.data <= b.data).astype(np.float64)
        a._accumulate(_unbroadcast(g * take_a, a.data.shape))
        b._accumulate(_unbroadcast(g * (1.0 - take_a), b.data.shape))

    out._backward = backward if out._parents else None
    return out


def relu(x) -> Tensor:
    x = as_tensor(x)
    out = _make(np.maximum(x.data, 0.0), (x,), None, "relu")

    def backward():
        x._accumulate(out.grad * (x.data > 0.0))

    out._backward = backward if out._parents else None
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    z = np.exp(-np.abs(x.data))
    data = np.where(x.data >= 0.0, 1.0 / (1.0 + z), z / (1.0 + z))
    out = _make(data, (x,), None, "sigmoid")

    def backward():
        x._accumulate(out.grad * out.data * (1.0 - out.data))

    out._backward = backward if out._parents else None
    return out


# -- reductions and normalizers -------------------------------------------


def _norm_axes(axis, ndim: int):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    out = _make(x.data.sum(axis=axes, keepdims=keepdims), (x,), None, "sum")

    def backward():
        g = out.grad
        if not keepdims and axes is not None:
            g = np.expand_dims(g, axes)
        x._accumulate(np.broadcast_to(g, x.data.shape).copy() if g.shape != x.data.shape else g.copy())

    out._backward = backward if out._parents else None
    return out


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    count = x.data.size if axes is None else int(np.prod([x.data.shape[a] for a in axes]))
    out = _make(x.data.mean(axis=axes, keepdims=keepdims), (x,), None, "mean")

    def backward():
        g = out.grad / count
        if not keepdims and axes is not None:
            g = np.expand_dims(g, axes)
        x._accumulate(np.broadcast_to(g, x.data.shape).copy())

    out._backward = backward if out._parents else None
    return out


def softmax(x, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis``."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)
    out = _make(data, (x,), None, "softmax")

    def backward():
        g = out.grad
        y = out.data
        inner = (g * y).sum(axis=axis, keepdims=True)
        x._accumulate(y * (g - inner))

    out._backward = backward if out._parents else None
    return out


def standardize(x, axis, eps: float) -> Tensor:
    """(x - mean) / sqrt(var + eps) over ``axis`` (int or tuple), biased var."""
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    mu = x.data.mean(axis=axes, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    data = centered * inv
    out = _make(data, (x,), None, "standardize")

    def backward():
        g = out.grad
        y = out.data
        gm = g.mean(axis=axes, keepdims=True)
        gy = (g * y).mean(axis=axes, keepdims=True)
        x._accumulate(inv * (g - gm - y * gy))

    out._backward = backward if out._parents else None
    return out


def layer_norm(x, eps: float = 1e-12) -> Tensor:
    """Standardize each row over the last axis (no affine part)."""
    return standardize(x, axis=-1, eps=eps)


def batch_norm_train(x, eps: float = 1e-5) -> Tensor:
    """Standardize each feature over axis 0 using batch statistics."""
    return standardize(x, axis=0, eps=eps)


def cosine_similarity(a, b, eps: float = 1e-12) -> Tensor:
    """Cosine similarity over the last axis with epsilon-guarded norms.

    Supports numpy broadcasting across leading axes, e.g. (N,1,D) against
    (1,M,D) yields an (N,M) similarity matrix.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-1]:
        raise ShapeError(f"cosine_similarity last dims differ: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    dot = (ad * bd).sum(axis=-1, keepdims=True)
    na = np.sqrt((ad * ad).sum(axis=-1, keepdims=True))
    nb = np.sqrt((bd * bd).sum(axis=-1, keepdims=True))
    q = (na + eps) * (nb + eps)
    y = dot / q
    out = _make(y[..., 0], (a, b), None, "cosine_similarity")

    def backward():
        g = out.grad[..., None]
        na_div = np.where(na > 0.0, na, 1.0)
        nb_div = np.where(nb > 0.0, nb, 1.0)
        ga = g * (bd / q - y * ad / (na_div * (na + eps)))
        gb = g * (ad / q - y * bd / (nb_div * (nb + eps)))
        a._accumulate(_unbroadcast(ga, ad.shape))
        b._accumulate(_unbroadcast(gb, bd.shape))

    out._backward = backward if out._parents else None
    return out


# -- structural ops --------------------------------------------------------


def reshape(x, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    out = _make(x.data.reshape(shape), (x,), None, "reshape")

    def backward():
        x._accumulate(out.grad.reshape(x.data.shape))

    out._backward = backward if out._parents else None
    return out


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is not None:
        axes = tuple(a % x.ndim for a in axes)
    out = _make(np.transpose(x.data, axes), (x,), None, "transpose")
    if axes is None:
        inverse = None
    else:
        inverse = tuple(np.argsort(axes))

    def backward():
        x._accumulate(np.transpose(out.grad, inverse))

    out._backward = backward if out._parents else None
    return out


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    if not parts:
        raise ShapeError("concat of an empty sequence")
    data = np.concatenate([p.data for p in parts], axis=axis)
    out = _make(data, parts, None, "concat")
    ax = axis % data.ndim
    sizes = [p.data.shape[ax] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward():
        g = out.grad
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[ax] = slice(lo, hi)
            p._accumulate(g[tuple(sl)])

    out._backward = backward if out._parents else None
    return out


def pad_last2(x, pad: int) -> Tensor:
    """Zero-pad the last two axes by ``pad`` on every side."""
    x = as_tensor(x)
    if x.ndim < 2:
        raise ShapeError(f"pad_last2 requires ndim >= 2, got {x.shape}")
    if pad < 0:
        raise ShapeError("pad must be non-negative")
    width = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (pad, pad)]
    out = _make(np.pad(x.data, width), (x,), None, "pad_last2")

    def backward():
        sl = (Ellipsis, slice(pad, pad + x.data.shape[-2]), slice(pad, pad + x.data.shape[-1]))
        x._accumulate(out.grad[sl])

    out._backward = backward if out._parents else None
    return out


def crop_last2(x, top: int, left: int, height: int, width: int) -> Tensor:
    """Slice a (height, width) window out of the last two axes."""
    x = as_tensor(x)
    if x.ndim < 2:
        raise ShapeError(f"crop_last2 requires ndim >= 2, got {x.shape}")
    if top < 0 or left < 0 or top + height > x.shape[-2] or left + width > x.shape[-1]:
        raise ShapeError(f"crop window out of bounds for {x.shape}")
    sl = (Ellipsis, slice(top, top + height), slice(left, left + width))
    out = _make(x.data[sl], (x,), None, "crop_last2")

    def backward():
        g = np.zeros_like(x.data)
        g[sl] = out.grad
        x._accumulate(g)

    out._backward = backward if out._parents else None
    return out


# -- primitive dispatch and gradient checking ------------------------------

PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "scalar-mul": lambda x, c: mul(x, float(c)),
    "abs": abs_,
    "elementwise-min": minimum,
    "sigmoid": sigmoid,
    "relu": relu,
    "softmax": softmax,
    "layer-normalize": layer_norm,
    "batch-normalize": batch_norm_train,
    "mean": mean,
    "sum": sum_,
    "concat": concat,
    "reshape": reshape,
    "transpose": transpose,
    "exp": exp,
    "log": log,
    "power": power,
    "cosine-similarity": cosine_similarity,
    "pad-last2": pad_last2,
    "crop-last2": crop_last2,
}


def primitive(kind: str, *args, **kwargs) -> Tensor:
    """Dispatch a primitive by name; unknown kinds raise ``ValueError``."""
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive kind {kind!r}; valid: {sorted(PRIMITIVES)}") from None
    return fn(*args, **kwargs)


def grad_check(fn: Callable[[Tensor], Tensor], point, epsilon: float = 1e-5) -> float:
    """Compare analytic and central-difference gradients of a scalar map.

    Returns ``max |a - n| / max(1e-8, |a| + |n|)`` over all entries of the
    input, where ``a`` is the backpropagated gradient and ``n`` the numeric
    one at step ``epsilon``.
    """
    if not (0.0 < epsilon <= 1e-2):
        raise ValueError(f"epsilon must be in (0, 1e-2], got {epsilon}")
    base = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)

    x = Tensor(base.copy(), requires_grad=True)
    out = fn(x)
    if out.data.size != 1:
        raise ShapeError(f"grad_check target must be scalar, got shape {out.shape}")
    out.backward()
    analytic = np.zeros_like(base) if x.grad is None else x.grad.copy()

    numeric = np.zeros_like(base)
    flat = base.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + epsilon
        hi = float(fn(Tensor(base.copy())).data.reshape(()))
        flat[i] = orig - epsilon
        lo = float(fn(Tensor(base.copy())).data.reshape(()))
        flat[i] = orig
        num_flat[i] = (hi - lo) / (2.0 * epsilon)

    denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom)) if base.size else 0.0
