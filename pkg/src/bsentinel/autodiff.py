"""Dense-tensor arithmetic with tape-based reverse-mode differentiation.

Working precision is float32; float64 is supported purely so gradients can
be verified against central finite differences with tight tolerances.
Tensors are immutable once created and every op is pure, so a fresh tape is
traced for each forward pass (define-by-run).
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_GELU_K = math.sqrt(2.0 / math.pi)
_GELU_C = 0.044715


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ZeroNormError(ValueError):
    """Vector norm is too close to zero to normalize."""


class Tensor:
    """Immutable n-d value node; records how it was produced for backprop.

    ``requires_grad`` marks a leaf whose gradient should be reported by
    :func:`backward`. Results of ops never require grad themselves; they
    only propagate gradients toward marked leaves.
    """

    __slots__ = ("data", "requires_grad", "_parents", "_vjps", "_needs_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype if dtype is not None else DEFAULT_DTYPE)
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._vjps: tuple[Callable[[np.ndarray], np.ndarray], ...] = ()
        self._needs_grad = self.requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def _from_op(data: np.ndarray, parents: tuple[Tensor, ...], vjps: tuple) -> Tensor:
    out = Tensor.__new__(Tensor)
    data.setflags(write=False)
    out.data = data
    out.requires_grad = False
    if any(p._needs_grad for p in parents):
        out._parents = parents
        out._vjps = vjps
        out._needs_grad = True
    else:
        out._parents = ()
        out._vjps = ()
        out._needs_grad = False
    return out


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op} shape mismatch: {a.data.shape} vs {b.data.shape}")


# ---------------------------------------------------------------------------
# elementwise ops


def add(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        _check_same_shape(a, b, "add")
        return _from_op(a.data + b.data, (a, b), (lambda g: g, lambda g: g))
    return _from_op(a.data + float(b), (a,), (lambda g: g,))


def sub(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        _check_same_shape(a, b, "sub")
        return _from_op(a.data - b.data, (a, b), (lambda g: g, lambda g: -g))
    return _from_op(a.data - float(b), (a,), (lambda g: g,))


def mul(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        _check_same_shape(a, b, "mul")
        return _from_op(a.data * b.data, (a, b), (lambda g: g * b.data, lambda g: g * a.data))
    return scale(a, float(b))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _from_op(a.data * c, (a,), (lambda g: g * c,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _from_op(np.where(mask, a.data, 0), (a,), (lambda g: g * mask,))


def gelu(a: Tensor) -> Tensor:
    """GELU with the tanh approximation."""
    x = a.data
    inner = _GELU_K * (x + _GELU_C * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def vjp(g):
        dinner = _GELU_K * (1.0 + 3.0 * _GELU_C * x**2)
        return g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * dinner)

    return _from_op(out, (a,), (vjp,))


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "scale": scale, "gelu": gelu, "relu": relu}


def elementwise(op_kind: str, a: Tensor, b=None) -> Tensor:
    """Dispatch one of {add, sub, mul, scale, gelu, relu} by name."""
    if op_kind not in _ELEMENTWISE:
        raise ValueError(f"unknown elementwise op {op_kind!r}")
    fn = _ELEMENTWISE[op_kind]
    if op_kind in ("gelu", "relu"):
        return fn(a)
    return fn(a, b)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.data.shape} x {b.data.shape}")
    return _from_op(
        a.data @ b.data,
        (a, b),
        (lambda g: g @ b.data.T, lambda g: a.data.T @ g),
    )


def vecmat(v: Tensor, m: Tensor) -> Tensor:
    """Row vector times matrix: (k,) @ (k, n) -> (n,)."""
    if v.data.ndim != 1 or m.data.ndim != 2 or v.data.shape[0] != m.data.shape[0]:
        raise ShapeError(f"vecmat shape mismatch: {v.data.shape} x {m.data.shape}")
    return _from_op(
        v.data @ m.data,
        (v, m),
        (lambda g: m.data @ g, lambda g: np.outer(v.data, g)),
    )


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.data.shape}")
    return _from_op(np.ascontiguousarray(a.data.T), (a,), (lambda g: g.T,))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a length-d bias vector to every row of an n-by-d matrix."""
    if x.data.ndim != 2 or b.data.ndim != 1 or x.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"add_bias shape mismatch: {x.data.shape} + {b.data.shape}")
    return _from_op(x.data + b.data, (x, b), (lambda g: g, lambda g: g.sum(axis=0)))


def sum_all(a: Tensor) -> Tensor:
    return _from_op(
        np.asarray(a.data.sum(), dtype=a.data.dtype),
        (a,),
        (lambda g: np.broadcast_to(g, a.data.shape).astype(a.data.dtype, copy=True),),
    )


def dot(a: Tensor, b: Tensor) -> Tensor:
    return sum_all(mul(a, b))


def mean_rows(x: Tensor) -> Tensor:
    """Mean over rows of an n-by-d matrix, yielding a length-d vector."""
    if x.data.ndim != 2:
        raise ShapeError(f"mean_rows expects a matrix, got shape {x.data.shape}")
    n = x.data.shape[0]
    return _from_op(
        x.data.mean(axis=0),
        (x,),
        (lambda g: np.broadcast_to(g / n, x.data.shape).astype(x.data.dtype, copy=True),),
    )


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = tuple(parts)
    if not parts or any(p.data.ndim != 2 for p in parts):
        raise ShapeError("concat_rows expects a non-empty sequence of matrices")
    cols = {p.data.shape[1] for p in parts}
    if len(cols) != 1:
        raise ShapeError(f"concat_rows column mismatch: {[p.data.shape for p in parts]}")
    offsets = np.cumsum([0] + [p.data.shape[0] for p in parts])

    def make_vjp(i):
        return lambda g: g[offsets[i]:offsets[i + 1]]

    return _from_op(
        np.concatenate([p.data for p in parts], axis=0),
        parts,
        tuple(make_vjp(i) for i in range(len(parts))),
    )


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = tuple(parts)
    if not parts or any(p.data.ndim != 2 for p in parts):
        raise ShapeError("concat_cols expects a non-empty sequence of matrices")
    rows = {p.data.shape[0] for p in parts}
    if len(rows) != 1:
        raise ShapeError(f"concat_cols row mismatch: {[p.data.shape for p in parts]}")
    offsets = np.cumsum([0] + [p.data.shape[1] for p in parts])

    def make_vjp(i):
        return lambda g: g[:, offsets[i]:offsets[i + 1]]

    return _from_op(
        np.concatenate([p.data for p in parts], axis=1),
        parts,
        tuple(make_vjp(i) for i in range(len(parts))),
    )


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    if x.data.ndim != 2 or not (0 <= start < stop <= x.data.shape[1]):
        raise ShapeError(f"slice_cols [{start}:{stop}] invalid for shape {x.data.shape}")

    def vjp(g):
        full = np.zeros(x.data.shape, dtype=g.dtype)
        full[:, start:stop] = g
        return full

    return _from_op(np.ascontiguousarray(x.data[:, start:stop]), (x,), (vjp,))


def stack_rows(vectors: Sequence[Tensor]) -> Tensor:
    """Stack length-d vectors into a k-by-d matrix."""
    vectors = tuple(vectors)
    if not vectors or any(v.data.ndim != 1 for v in vectors):
        raise ShapeError("stack_rows expects a non-empty sequence of vectors")
    dims = {v.data.shape[0] for v in vectors}
    if len(dims) != 1:
        raise ShapeError(f"stack_rows length mismatch: {[v.data.shape for v in vectors]}")

    def make_vjp(i):
        return lambda g: g[i]

    return _from_op(
        np.stack([v.data for v in vectors], axis=0),
        vectors,
        tuple(make_vjp(i) for i in range(len(vectors))),
    )


# ---------------------------------------------------------------------------
# normalization, softmax, loss


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize every row to zero mean / unit variance, then apply affine."""
    if eps <= 0:
        raise ValueError(f"layer_norm eps must be positive, got {eps}")
    if x.data.ndim != 2 or gamma.data.shape != (x.data.shape[1],) or beta.data.shape != (x.data.shape[1],):
        raise ShapeError(
            f"layer_norm shape mismatch: x {x.data.shape}, gamma {gamma.data.shape}, beta {beta.data.shape}"
        )
    mean = x.data.mean(axis=1, keepdims=True)
    centered = x.data - mean
    var = (centered**2).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gamma.data + beta.data

    def vjp_x(g):
        gg = g * gamma.data
        m1 = gg.mean(axis=1, keepdims=True)
        m2 = (gg * xhat).mean(axis=1, keepdims=True)
        return inv * (gg - m1 - xhat * m2)

    return _from_op(
        out,
        (x, gamma, beta),
        (vjp_x, lambda g: (g * xhat).sum(axis=0), lambda g: g.sum(axis=0)),
    )


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax, shifted by the row max for overflow safety."""
    if x.data.ndim != 2:
        raise ShapeError(f"softmax_rows expects a matrix, got shape {x.data.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        return s * (g - (g * s).sum(axis=1, keepdims=True))

    return _from_op(s, (x,), (vjp,))


def l2_normalize(v: Tensor) -> Tensor:
    """Scale a vector to unit L2 norm, preserving direction."""
    if v.data.ndim != 1:
        raise ShapeError(f"l2_normalize expects a vector, got shape {v.data.shape}")
    norm = float(np.linalg.norm(v.data.astype(np.float64)))
    if norm <= 1e-12:
        raise ZeroNormError(f"cannot normalize vector with near-zero norm {norm:.3e}")
    y = (v.data / norm).astype(v.data.dtype)

    def vjp(g):
        return (g - y * (y @ g)) / norm

    return _from_op(y, (v,), (vjp,))


def cross_entropy_from_logits(s: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean negative log-softmax of the true-class logit, in log-sum-exp form."""
    if s.data.ndim != 2:
        raise ShapeError(f"cross_entropy expects a logit matrix, got shape {s.data.shape}")
    n, k = s.data.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {tuple(labels.shape)}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise ValueError(f"label out of range [0, {k})")
    row_max = s.data.max(axis=1, keepdims=True)
    lse = row_max[:, 0] + np.log(np.exp(s.data - row_max).sum(axis=1))
    loss = np.asarray((lse - s.data[np.arange(n), labels]).mean(), dtype=s.data.dtype)

    def vjp(g):
        p = np.exp(s.data - row_max)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(n), labels] -= 1.0
        return (float(g) / n) * p

    return _from_op(loss, (s,), (vjp,))


# ---------------------------------------------------------------------------
# tape and backward pass


class Tape:
    """Topologically ordered record of the ops reaching a scalar loss."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def build(cls, loss: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(loss, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node._needs_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                stack.append((parent, False))
        return cls(order)

    def run(self, seed_grad: np.ndarray) -> dict[int, tuple[Tensor, np.ndarray]]:
        grads: dict[int, tuple[Tensor, np.ndarray]] = {id(self.nodes[-1]): (self.nodes[-1], seed_grad)}
        for node in reversed(self.nodes):
            entry = grads.get(id(node))
            if entry is None:
                continue
            g = entry[1]
            for parent, vjp in zip(node._parents, node._vjps):
                if not parent._needs_grad:
                    continue
                pg = vjp(g)
                prev = grads.get(id(parent))
                if prev is None:
                    grads[id(parent)] = (parent, np.array(pg, copy=True))
                else:
                    prev[1][...] = prev[1] + pg
        return grads


def backward(loss: Tensor, wrt: Sequence[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Reverse-sweep from a scalar loss; returns grads for requires_grad leaves.

    Tensors listed in ``wrt`` are always present in the result, with a zero
    gradient when the loss does not depend on them. Frozen tensors never get
    a slot.
    """
    if loss.data.shape != ():
        raise ShapeError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    result: dict[Tensor, np.ndarray] = {}
    if loss._needs_grad:
        tape = Tape.build(loss)
        grads = tape.run(np.ones((), dtype=loss.data.dtype))
        for tensor, grad in grads.values():
            if tensor.requires_grad:
                result[tensor] = grad
    if wrt is not None:
        for t in wrt:
            if t.requires_grad and t not in result:
                result[t] = np.zeros(t.data.shape, dtype=t.data.dtype)
    return result


def grad_check(f: Callable[[Tensor], Tensor], at: Tensor, step: float = 1e-5) -> float:
    """Compare the analytic gradient of a scalar function against central
    finite differences; returns max over coordinates of
    |analytic - numeric| / max(1, |analytic|)."""
    if step <= 0:
        raise ValueError(f"finite-difference step must be positive, got {step}")
    base = Tensor(at.data, requires_grad=True, dtype=at.data.dtype)
    out = f(base)
    if out.data.shape != ():
        raise ShapeError(f"grad_check expects a scalar-valued function, got shape {out.data.shape}")
    analytic = backward(out, wrt=[base])[base]

    flat = at.data.astype(at.data.dtype).ravel()
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] = flat[i] + step
        f_plus = float(f(Tensor(bumped.reshape(at.data.shape), dtype=at.data.dtype)).data)
        bumped[i] = flat[i] - step
        f_minus = float(f(Tensor(bumped.reshape(at.data.shape), dtype=at.data.dtype)).data)
        numeric[i] = (f_plus - f_minus) / (2.0 * step)
    numeric = numeric.reshape(at.data.shape)
    denom = np.maximum(1.0, np.abs(analytic))
    return float(np.max(np.abs(analytic - numeric) / denom))
