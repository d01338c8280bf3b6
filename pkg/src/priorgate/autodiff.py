"""Dense float64 tensors with reverse-mode gradient accumulation.

Every operation produces a new Tensor that records its inputs and a backward
rule, so each forward pass builds a fresh tape. Calling ``backward()`` on a
result topologically sorts that tape (each node visited exactly once, shared
subexpressions accumulate by summation) and deposits gradients into every
tensor with ``requires_grad=True``.

All data is 64-bit, row-major. Broadcasting follows numpy semantics over
leading axes and size-1 axes; backward rules reduce gradients back to the
operand shapes.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

_SQRT2 = float(np.sqrt(2.0))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class EmptyGroupError(ValueError):
    """A masked softmax group has no supported entries along the axis."""


class NumericError(FloatingPointError):
    """A computation produced non-finite values where finiteness is required."""


class Tensor:
    """A dense float64 array plus an optional gradient buffer.

    A Tensor doubles as a node of the compute graph: results of operations
    carry their parent references and a backward rule; leaves carry neither.
    Data is immutable by convention after it enters a graph; only ``grad``
    buffers mutate during backward.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise DimensionError(
                f"gradient shape {g.shape} does not match tensor shape {self.data.shape}"
            )
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def backward(self, seed=None) -> None:
        """Reverse-mode pass from this tensor through its tape.

        ``seed`` defaults to ones (for a scalar loss, the usual 1.0). Each
        node is visited exactly once in reverse topological order.
        """
        if seed is None:
            seed = np.ones_like(self.data)
        else:
            seed = np.asarray(seed, dtype=np.float64)
            if seed.shape != self.data.shape:
                seed = np.broadcast_to(seed, self.data.shape).copy()
        order = _toposort(self)
        grads: dict[int, np.ndarray] = {id(self): seed}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is not None:
                for parent, pg in node._backward(g):
                    if not parent.requires_grad:
                        continue
                    key = id(parent)
                    if key in grads:
                        grads[key] += pg
                    else:
                        grads[key] = pg.astype(np.float64, copy=True)
            elif node.requires_grad and node._op == "leaf":
                node.accumulate_grad(g)

    # -- operator sugar -------------------------------------------------

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad}, op={self._op})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _toposort(root: Tensor) -> list[Tensor]:
    # Iterative DFS postorder; inputs appear before the tensors built from them.
    order: list[Tensor] = []
    visited = {id(root)}
    stack: list[tuple[Tensor, int]] = [(root, 0)]
    while stack:
        node, idx = stack[-1]
        if idx < len(node._parents):
            stack[-1] = (node, idx + 1)
            child = node._parents[idx]
            if id(child) not in visited:
                visited.add(id(child))
                stack.append((child, 0))
        else:
            order.append(node)
            stack.pop()
    return order


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        out._op = op
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


# -- elementwise arithmetic ---------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def backward(g):
        return ((a, _unbroadcast(g, a.data.shape)), (b, _unbroadcast(g, b.data.shape)))

    return _make(data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data - b.data

    def backward(g):
        return ((a, _unbroadcast(g, a.data.shape)), (b, _unbroadcast(-g, b.data.shape)))

    return _make(data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def backward(g):
        return (
            (a, _unbroadcast(g * b.data, a.data.shape)),
            (b, _unbroadcast(g * a.data, b.data.shape)),
        )

    return _make(data, (a, b), backward, "mul")


def matmul(a, b) -> Tensor:
    """Matrix product with numpy semantics for ndim >= 2 (batched over leading axes)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError("matmul requires operands of ndim >= 2; reshape vectors first")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise DimensionError(
            f"matmul inner extents disagree: {a.data.shape} x {b.data.shape}"
        )
    data = a.data @ b.data

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape)
        return ((a, ga), (b, gb))

    return _make(data, (a, b), backward, "matmul")


def dot(a, b) -> Tensor:
    """Inner product of two 1-D tensors; returns a scalar (0-d) tensor."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 1 or b.data.ndim != 1 or a.data.shape != b.data.shape:
        raise DimensionError(f"dot expects equal-length vectors, got {a.data.shape}, {b.data.shape}")
    data = np.asarray(a.data @ b.data)

    def backward(g):
        return ((a, g * b.data), (b, g * a.data))

    return _make(data, (a, b), backward, "dot")


# -- nonlinearities ------------------------------------------------------


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    d = x.data
    data = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))), np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))

    def backward(g):
        return ((x, g * data * (1.0 - data)),)

    return _make(data, (x,), backward, "sigmoid")


def exp(x) -> Tensor:
    x = as_tensor(x)
    data = np.exp(x.data)

    def backward(g):
        return ((x, g * data),)

    return _make(data, (x,), backward, "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    data = np.log(x.data)

    def backward(g):
        return ((x, g / x.data),)

    return _make(data, (x,), backward, "log")


def powc(x, p: float) -> Tensor:
    """Elementwise power by a constant exponent."""
    x = as_tensor(x)
    data = np.power(x.data, p)

    def backward(g):
        return ((x, g * p * np.power(x.data, p - 1.0)),)

    return _make(data, (x,), backward, "powc")


def gelu(x) -> Tensor:
    """Gaussian error linear unit, exact erf form."""
    x = as_tensor(x)
    d = x.data
    cdf = 0.5 * (1.0 + erf(d / _SQRT2))
    data = d * cdf

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * d * d)
        return ((x, g * (cdf + d * pdf)),)

    return _make(data, (x,), backward, "gelu")


def clamp(x, lo: float, hi: float) -> Tensor:
    """Clip values into [lo, hi]; gradient passes only through unclipped entries."""
    x = as_tensor(x)
    data = np.clip(x.data, lo, hi)
    inside = (x.data > lo) & (x.data < hi)

    def backward(g):
        return ((x, g * inside),)

    return _make(data, (x,), backward, "clamp")


# -- reductions and shape ops ---------------------------------------------


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return ((x, np.broadcast_to(g, x.data.shape).copy()),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return ((x, np.broadcast_to(gg, x.data.shape).copy()),)

    return _make(np.asarray(data), (x,), backward, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    data = x.data.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        n = x.data.size
    elif isinstance(axis, tuple):
        n = int(np.prod([x.data.shape[a] for a in axis]))
    else:
        n = x.data.shape[axis]

    def backward(g):
        if axis is None:
            return ((x, np.broadcast_to(g / n, x.data.shape).copy()),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return ((x, np.broadcast_to(gg / n, x.data.shape).copy()),)

    return _make(np.asarray(data), (x,), backward, "mean")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    data = x.data.reshape(shape)

    def backward(g):
        return ((x, g.reshape(x.data.shape)),)

    return _make(data, (x,), backward, "reshape")


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    data = np.transpose(x.data, axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        return ((x, np.transpose(g, inv)),)

    return _make(data, (x,), backward, "transpose")


def concat(parts, axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        out = []
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            out.append((p, g[tuple(sl)]))
        return tuple(out)

    return _make(data, tuple(parts), backward, "concat")


def gather_by_mask(x, mask) -> Tensor:
    """Select entries (or leading-axis slices) of ``x`` where ``mask`` is true.

    ``mask`` is a plain boolean/binary array covering the leading axes of
    ``x``; the result stacks the selected slices. Backward scatters the
    gradient into zeros at the selected positions.
    """
    x = as_tensor(x)
    m = np.asarray(mask).astype(bool)
    if m.shape != x.data.shape[: m.ndim]:
        raise DimensionError(
            f"mask shape {m.shape} must match leading extents of {x.data.shape}"
        )
    data = x.data[m]

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[m] = g
        return ((x, gx),)

    return _make(data, (x,), backward, "gather_by_mask")


# -- masked softmax --------------------------------------------------------


def masked_softmax(logits, mask=None, axis: int = -1) -> Tensor:
    """Softmax over entries where ``mask`` is 1, along ``axis``.

    Masked-out positions are exactly 0 in the output; each group along the
    axis sums to 1. The per-group maximum is subtracted before
    exponentiation. A group whose mask is entirely zero raises
    EmptyGroupError: the fallback policy belongs to the caller.
    """
    x = as_tensor(logits)
    if mask is None:
        support = np.ones(x.data.shape, dtype=bool)
    else:
        m = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
        if m.shape != x.data.shape:
            raise DimensionError(f"mask shape {m.shape} != logits shape {x.data.shape}")
        support = m > 0.5
        if not support.any(axis=axis).all():
            raise EmptyGroupError("masked_softmax: a group along the axis has an empty mask")
    masked = np.where(support, x.data, -np.inf)
    gmax = masked.max(axis=axis, keepdims=True)
    e = np.exp(masked - gmax)
    denom = e.sum(axis=axis, keepdims=True)
    w = e / denom

    def backward(g):
        t = w * g
        gx = t - w * t.sum(axis=axis, keepdims=True)
        return ((x, gx),)

    return _make(w, (x,), backward, "masked_softmax")


# -- gradient checking ------------------------------------------------------


def grad_check(f, params: list[Tensor], eps: float = 1e-5) -> float:
    """Compare reverse-mode gradients of ``f`` against central differences.

    ``f`` is a deterministic zero-argument callable returning a scalar Tensor
    built from ``params``; it is re-evaluated with each coordinate perturbed
    by ±eps. Returns the maximum relative error over all coordinates, with
    denominator max(|analytic|, |numeric|, 1e-8).
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ValueError(f"eps {eps} outside [1e-7, 1e-3]")
    for p in params:
        p.zero_grad()
    out = f()
    if out.data.size != 1:
        raise DimensionError("grad_check expects a scalar-valued function")
    if not np.isfinite(out.data).all():
        raise NumericError("grad_check: function value is not finite")
    out.backward()
    analytic = [
        (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for p in params
    ]
    for p in params:
        p.zero_grad()

    worst = 0.0
    for p, an in zip(params, analytic):
        flat = p.data.reshape(-1)
        aflat = an.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(f().data)
            flat[i] = orig - eps
            f_minus = float(f().data)
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NumericError("grad_check: perturbed evaluation is not finite")
            numeric = (f_plus - f_minus) / (2.0 * eps)
            denom = max(abs(aflat[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(aflat[i] - numeric) / denom)
    return worst
