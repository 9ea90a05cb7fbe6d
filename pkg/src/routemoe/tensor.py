"""Dense tensors with tape-based reverse-mode differentiation.

Values are numpy arrays (float64 by default, float32 via ``set_default_dtype``).
Operations executed inside a ``Graph`` context are recorded on a tape; the
backward sweep walks that tape in exact reverse creation order, so each node
is visited once and gradients of tracked leaves are fully accumulated when the
sweep finishes. Outside a graph the same operations run without recording.

Broadcasting is deliberately restricted: two operands combine elementwise only
when their shapes are equal or one shape is a trailing suffix of the other
(the smaller operand is repeated across the leading batch axes). Everything
else raises ``ShapeError``.
"""

from __future__ import annotations

import numpy as np

from .errors import GraphError, InfeasibleError, NumericalError, ShapeError

_DTYPE = np.dtype(np.float64)

# Name of an op whose backward is intentionally corrupted (negative controls
# for the gradient-check harness). None in normal operation.
_BACKWARD_FAULT: str | None = None


def set_default_dtype(dtype) -> None:
    """Select float64 (default) or float32 for newly created tensors."""
    global _DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ValueError(f"unsupported dtype {dtype!r}; use float32 or float64")
    _DTYPE = dt


def default_dtype() -> np.dtype:
    return _DTYPE


def set_backward_fault(op_name: str | None) -> None:
    """Corrupt the backward rule of the named op ('silu' or 'matmul').

    Used as a negative control: gradient checks must fail while a fault is
    installed. Pass None to restore correct behaviour.
    """
    global _BACKWARD_FAULT
    _BACKWARD_FAULT = op_name


_GRAPH_STACK: list["Graph"] = []


class Graph:
    """Ordered record of operations for one backward sweep.

    Use as a context manager; tensors produced by ops while the graph is
    active are appended to its tape when any input is tracked.
    """

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Graph":
        _GRAPH_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        _GRAPH_STACK.pop()
        return False

    def __len__(self) -> int:
        return len(self.nodes)


def active_graph() -> Graph | None:
    return _GRAPH_STACK[-1] if _GRAPH_STACK else None


class Tensor:
    """A dense array plus an optional slot on the active graph.

    ``grad`` is populated (same shape as ``values``) for tensors created with
    ``requires_grad=True`` once ``backward`` has run; repeated backward calls
    accumulate into it until ``zero_grad`` resets it.
    """

    __slots__ = ("values", "grad", "requires_grad", "_graph", "node_id", "_parents", "_bwd")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=_DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._graph: Graph | None = None
        self.node_id: int | None = None
        self._parents: tuple = ()
        self._bwd = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def tracked(self) -> bool:
        return self.requires_grad or self._graph is not None

    def item(self) -> float:
        return float(self.values)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # arithmetic sugar; all shape rules live in the module functions
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(values) -> Tensor:
    """An untracked tensor (no gradient ever flows into it)."""
    return Tensor(values)


def _result(values: np.ndarray, parents: tuple, bwd) -> Tensor:
    """Wrap an op result, recording it on the active graph when tracked."""
    out = Tensor.__new__(Tensor)
    out.values = values
    out.grad = None
    out.requires_grad = False
    g = _GRAPH_STACK[-1] if _GRAPH_STACK else None
    if g is not None and any(p.requires_grad or p._graph is g for p in parents):
        out._graph = g
        out.node_id = len(g.nodes)
        out._parents = parents
        out._bwd = bwd
        g.nodes.append(out)
    else:
        out._graph = None
        out.node_id = None
        out._parents = ()
        out._bwd = None
    return out


def _accum(grads: dict, t: Tensor, g: np.ndarray) -> None:
    if not (t.requires_grad or t._graph is not None):
        return
    slot = grads.get(id(t))
    if slot is None:
        grads[id(t)] = (t, g)
    else:
        grads[id(t)] = (t, slot[1] + g)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every tracked leaf's ``grad``.

    ``loss`` must be a scalar recorded on a graph. The sweep visits the tape
    in exact reverse creation order, once per node. Calling backward again
    without resetting grads adds another copy of the gradient.
    """
    if loss.shape != ():
        raise GraphError(f"backward requires a scalar loss, got shape {loss.shape}")
    graph = loss._graph
    if graph is None:
        raise GraphError("loss is not recorded on any graph")
    grads: dict[int, tuple[Tensor, np.ndarray]] = {
        id(loss): (loss, np.ones((), dtype=loss.values.dtype))
    }
    for node in reversed(graph.nodes):
        slot = grads.pop(id(node), None)
        if slot is None:
            continue
        node._bwd(slot[1], grads)
    for t, g in grads.values():
        if t.requires_grad:
            t.grad = g if t.grad is None else t.grad + g


# ---------------------------------------------------------------------------
# shape helpers


def _check_suffix(a_shape, b_shape, op: str) -> None:
    if a_shape == b_shape:
        return
    small, large = (a_shape, b_shape) if len(a_shape) <= len(b_shape) else (b_shape, a_shape)
    if len(small) < len(large) and (len(small) == 0 or large[-len(small):] == small):
        return
    raise ShapeError(f"{op}: shapes {a_shape} and {b_shape} are not suffix-broadcastable")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over the leading axes added by suffix broadcasting."""
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_suffix(a.shape, b.shape, "add")
    out = a.values + b.values

    def bwd(g, grads):
        _accum(grads, a, _reduce_to(g, a.shape))
        _accum(grads, b, _reduce_to(g, b.shape))

    return _result(out, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_suffix(a.shape, b.shape, "sub")
    out = a.values - b.values

    def bwd(g, grads):
        _accum(grads, a, _reduce_to(g, a.shape))
        _accum(grads, b, _reduce_to(-g, b.shape))

    return _result(out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_suffix(a.shape, b.shape, "mul")
    out = a.values * b.values

    def bwd(g, grads):
        _accum(grads, a, _reduce_to(g * b.values, a.shape))
        _accum(grads, b, _reduce_to(g * a.values, b.shape))

    return _result(out, (a, b), bwd)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_suffix(a.shape, b.shape, "div")
    out = a.values / b.values

    def bwd(g, grads):
        _accum(grads, a, _reduce_to(g / b.values, a.shape))
        _accum(grads, b, _reduce_to(-g * a.values / (b.values * b.values), b.shape))

    return _result(out, (a, b), bwd)


def neg(x) -> Tensor:
    x = as_tensor(x)

    def bwd(g, grads):
        _accum(grads, x, -g)

    return _result(-x.values, (x,), bwd)


def power(x, exponent: float) -> Tensor:
    """Elementwise x**p for a constant exponent."""
    x = as_tensor(x)
    p = float(exponent)
    out = x.values ** p

    def bwd(g, grads):
        _accum(grads, x, g * p * x.values ** (p - 1.0))

    return _result(out, (x,), bwd)


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.values)

    def bwd(g, grads):
        _accum(grads, x, g * out)

    return _result(out, (x,), bwd)


def log(x) -> Tensor:
    x = as_tensor(x)

    def bwd(g, grads):
        _accum(grads, x, g / x.values)

    return _result(np.log(x.values), (x,), bwd)


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.values)

    def bwd(g, grads):
        _accum(grads, x, g * 0.5 / out)

    return _result(out, (x,), bwd)


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.values)

    def bwd(g, grads):
        _accum(grads, x, g * (1.0 - out * out))

    return _result(out, (x,), bwd)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = 1.0 / (1.0 + np.exp(-x.values))

    def bwd(g, grads):
        _accum(grads, x, g * out * (1.0 - out))

    return _result(out, (x,), bwd)


def relu(x) -> Tensor:
    x = as_tensor(x)

    def bwd(g, grads):
        _accum(grads, x, g * (x.values > 0))

    return _result(np.maximum(x.values, 0.0), (x,), bwd)


def silu(x) -> Tensor:
    """x * sigmoid(x), with d/dx = sigmoid(x) * (1 + x * (1 - sigmoid(x)))."""
    x = as_tensor(x)
    sig = 1.0 / (1.0 + np.exp(-x.values))
    out = x.values * sig

    def bwd(g, grads):
        local = sig * (1.0 + x.values * (1.0 - sig))
        if _BACKWARD_FAULT == "silu":
            local = local * 1.5
        _accum(grads, x, g * local)

    return _result(out, (x,), bwd)


# ---------------------------------------------------------------------------
# linear algebra and structure


def matmul(a, b) -> Tensor:
    """Matrix product. Either both operands carry identical leading batch
    dims, or one operand is a plain matrix broadcast across the other's batch."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-d, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ for shapes {a.shape} and {b.shape}")
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ for shapes {a.shape} and {b.shape}")
    out = a.values @ b.values

    def bwd(g, grads):
        if _BACKWARD_FAULT == "matmul":
            g = g * 1.5
        ga = g @ b.values.swapaxes(-1, -2)
        if ga.ndim > a.ndim:
            ga = ga.sum(axis=tuple(range(ga.ndim - a.ndim)))
        if b.ndim == 2 and g.ndim > 2:
            gb = a.values.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = a.values.swapaxes(-1, -2) @ g
        _accum(grads, a, ga)
        _accum(grads, b, gb)

    return _result(out, (a, b), bwd)


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inverse = tuple(int(i) for i in np.argsort(axes))

    def bwd(g, grads):
        _accum(grads, x, g.transpose(inverse))

    return _result(x.values.transpose(axes), (x,), bwd)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape

    def bwd(g, grads):
        _accum(grads, x, g.reshape(old))

    return _result(x.values.reshape(shape), (x,), bwd)


def concat(parts, axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    out = np.concatenate([p.values for p in parts], axis=axis)
    offsets = np.cumsum([0] + sizes)

    def bwd(g, grads):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accum(grads, p, g[tuple(idx)])

    return _result(out, tuple(parts), bwd)


def slice1d(x, start: int, stop: int) -> Tensor:
    """Contiguous slice of a 1-d tensor."""
    x = as_tensor(x)
    if x.ndim != 1:
        raise ShapeError(f"slice1d expects a 1-d tensor, got shape {x.shape}")

    def bwd(g, grads):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[start:stop] = g
        _accum(grads, x, full)

    return _result(x.values[start:stop].copy(), (x,), bwd)


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.values.sum(axis=axis, keepdims=keepdims)

    def bwd(g, grads):
        if axis is None:
            _accum(grads, x, np.broadcast_to(g, x.shape))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _accum(grads, x, np.broadcast_to(gg, x.shape))

    return _result(out, (x,), bwd)


def tmean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.values.mean(axis=axis, keepdims=keepdims)
    count = x.size if axis is None else x.shape[axis]

    def bwd(g, grads):
        if axis is None:
            _accum(grads, x, np.broadcast_to(g / count, x.shape))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _accum(grads, x, np.broadcast_to(gg / count, x.shape))

    return _result(out, (x,), bwd)


def expand(x, axis: int, reps: int) -> Tensor:
    """Insert a new axis of length ``reps`` (a broadcast repeat)."""
    x = as_tensor(x)
    expanded = np.expand_dims(x.values, axis)
    shape = list(expanded.shape)
    shape[axis] = reps

    def bwd(g, grads):
        _accum(grads, x, g.sum(axis=axis))

    return _result(np.broadcast_to(expanded, shape), (x,), bwd)


def gather_nodes(x, idx) -> Tensor:
    """Select rows along the second-to-last axis.

    x: (..., N, D); idx: integer array (..., S) with matching leading dims.
    Returns (..., S, D). The backward pass scatter-adds into the source rows.
    """
    x = as_tensor(x)
    idx = np.asarray(idx)
    if idx.shape[:-1] != x.shape[:-2]:
        raise ShapeError(f"gather_nodes: index shape {idx.shape} does not match {x.shape}")
    expanded = np.broadcast_to(idx[..., None], idx.shape + (x.shape[-1],))
    out = np.take_along_axis(x.values, expanded, axis=-2)

    def bwd(g, grads):
        full = np.zeros(x.shape, dtype=g.dtype)
        if x.ndim == 2:
            np.add.at(full, idx, g)
        else:
            flat = full.reshape(-1, *x.shape[-2:])
            fidx = idx.reshape(-1, idx.shape[-1])
            rows = np.arange(flat.shape[0])[:, None]
            np.add.at(flat, (rows, fidx), g.reshape(-1, idx.shape[-1], x.shape[-1]))
        _accum(grads, x, full)

    return _result(out, (x,), bwd)


def scatter_nodes(x, idx, size: int) -> Tensor:
    """Adjoint of gather_nodes: add rows of x into a zero (..., size, D) tensor."""
    x = as_tensor(x)
    idx = np.asarray(idx)
    if idx.shape != x.shape[:-1]:
        raise ShapeError(f"scatter_nodes: index shape {idx.shape} does not match {x.shape}")
    out = np.zeros(x.shape[:-2] + (size, x.shape[-1]), dtype=x.values.dtype)
    if x.ndim == 2:
        np.add.at(out, idx, x.values)
    else:
        flat = out.reshape(-1, size, x.shape[-1])
        fidx = idx.reshape(-1, idx.shape[-1])
        rows = np.arange(flat.shape[0])[:, None]
        np.add.at(flat, (rows, fidx), x.values.reshape(-1, idx.shape[-1], x.shape[-1]))

    def bwd(g, grads):
        expanded = np.broadcast_to(idx[..., None], idx.shape + (x.shape[-1],))
        _accum(grads, x, np.take_along_axis(g, expanded, axis=-2))

    return _result(out, (x,), bwd)


def pick(x, idx) -> Tensor:
    """Select one entry along the last axis per leading position."""
    x = as_tensor(x)
    idx = np.asarray(idx)
    if idx.shape != x.shape[:-1]:
        raise ShapeError(f"pick: index shape {idx.shape} does not match {x.shape}")
    out = np.take_along_axis(x.values, idx[..., None], axis=-1)[..., 0]

    def bwd(g, grads):
        full = np.zeros(x.shape, dtype=g.dtype)
        np.put_along_axis(full, idx[..., None], g[..., None], axis=-1)
        _accum(grads, x, full)

    return _result(out, (x,), bwd)


def scale_rows(x, s) -> Tensor:
    """Multiply each row x[..., i, :] by the scalar s[..., i]."""
    x, s = as_tensor(x), as_tensor(s)
    if s.shape != x.shape[:-1]:
        raise ShapeError(f"scale_rows: scale shape {s.shape} does not match {x.shape}")
    out = x.values * s.values[..., None]

    def bwd(g, grads):
        _accum(grads, x, g * s.values[..., None])
        _accum(grads, s, (g * x.values).sum(axis=-1))

    return _result(out, (x, s), bwd)


# ---------------------------------------------------------------------------
# softmax and normalization


def masked_softmax(logits, mask=None) -> Tensor:
    """Softmax over the last axis with hard feasibility masking.

    Masked entries come out exactly 0; unmasked entries are positive and each
    row sums to 1 (max-subtraction for stability). A row with no unmasked
    entry raises ``InfeasibleError``.
    """
    logits = as_tensor(logits)
    if mask is None:
        mvals = None
    else:
        mvals = mask.values if isinstance(mask, Tensor) else np.asarray(mask)
        mvals = mvals.astype(bool)
        if mvals.shape != logits.shape:
            raise ShapeError(
                f"masked_softmax: mask shape {mvals.shape} does not match logits {logits.shape}"
            )
        if not mvals.any(axis=-1).all():
            raise InfeasibleError("masked_softmax: a row has no unmasked entry")
    if mvals is None:
        shifted = logits.values - logits.values.max(axis=-1, keepdims=True)
        z = np.exp(shifted)
    else:
        neg = np.where(mvals, logits.values, -np.inf)
        shifted = neg - neg.max(axis=-1, keepdims=True)
        z = np.where(mvals, np.exp(shifted), 0.0)
    probs = z / z.sum(axis=-1, keepdims=True)

    def bwd(g, grads):
        inner = (g * probs).sum(axis=-1, keepdims=True)
        _accum(grads, logits, probs * (g - inner))

    return _result(probs, (logits,), bwd)


def softmax(logits) -> Tensor:
    return masked_softmax(logits, None)


def instance_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Per-feature normalization across the node axis (second-to-last).

    x: (..., N, D). Each feature column of each instance is standardized over
    its N nodes (biased variance), then scaled and shifted by the learned
    per-feature parameters gamma and beta of shape (D,).
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError(
            f"instance_norm: affine shapes {gamma.shape}/{beta.shape} "
            f"do not match feature dim of {x.shape}"
        )
    n = x.shape[-2]
    mu = x.values.mean(axis=-2, keepdims=True)
    centered = x.values - mu
    var = (centered * centered).mean(axis=-2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gamma.values + beta.values

    def bwd(g, grads):
        reduce_axes = tuple(range(g.ndim - 1))
        _accum(grads, gamma, (g * xhat).sum(axis=reduce_axes))
        _accum(grads, beta, g.sum(axis=reduce_axes))
        gx = g * gamma.values
        gsum = gx.sum(axis=-2, keepdims=True)
        gdot = (gx * xhat).sum(axis=-2, keepdims=True)
        _accum(grads, x, inv / n * (n * gx - gsum - xhat * gdot))

    return _result(out, (x, gamma, beta), bwd)


# ---------------------------------------------------------------------------
# gradient verification


def grad_check_errors(f, point: Tensor, h: float = 1e-4) -> np.ndarray:
    """Per-coordinate relative error between analytic and central differences.

    ``f`` maps a tensor (same shape as ``point``) to a scalar tensor. The
    analytic gradient comes from one recorded forward/backward; the numeric
    estimate perturbs one coordinate at a time by ±h outside any graph.
    """
    x = Tensor(np.array(point.values, dtype=np.float64, copy=True), requires_grad=True)
    with Graph():
        out = f(x)
        if not isinstance(out, Tensor) or out.shape != ():
            raise GraphError("grad_check requires f to return a scalar tensor")
        backward(out)
    analytic = np.zeros(x.size) if x.grad is None else x.grad.ravel().copy()
    x.requires_grad = False
    flat = x.values.ravel()
    errors = np.empty(flat.size)
    with np.errstate(all="ignore"):  # off-domain perturbations surface as NumericalError
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(x).values)
            flat[i] = orig - h
            fm = float(f(x).values)
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * h)
            if not (np.isfinite(numeric) and np.isfinite(analytic[i])):
                raise NumericalError(f"non-finite gradient at coordinate {i}")
            errors[i] = abs(analytic[i] - numeric) / max(1.0, abs(numeric))
    return errors


def grad_check(f, point: Tensor, h: float = 1e-4) -> float:
    """Max relative error of the analytic gradient against central differences."""
    return float(grad_check_errors(f, point, h).max())
