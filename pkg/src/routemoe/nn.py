"""Parameter bookkeeping and the attention/normalization building blocks."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ParamSet:
    """Ordered, named parameter tensors with flat-vector pack/unpack.

    Initialization is uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)); fan_in
    defaults to the first extent of the shape (weights are stored
    (fan_in, fan_out)).
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, shape: tuple[int, ...], rng: np.random.Generator,
            fan_in: int | None = None) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter {name!r}")
        bound = 1.0 / math.sqrt(fan_in if fan_in is not None else shape[0])
        t = Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)
        self._params[name] = t
        return t

    def add_constant(self, name: str, values) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter {name!r}")
        t = Tensor(values, requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def num_values(self) -> int:
        return sum(t.size for t in self._params.values())

    def to_vector(self) -> np.ndarray:
        return np.concatenate([t.values.ravel() for t in self._params.values()])

    def load_vector(self, vec: np.ndarray) -> None:
        off = 0
        for t in self._params.values():
            t.values = vec[off:off + t.size].reshape(t.shape).astype(t.values.dtype)
            off += t.size
        if off != vec.size:
            raise ValueError(f"vector length {vec.size} does not match {off} parameters")

    def offsets(self) -> dict[str, tuple[int, int]]:
        out = {}
        off = 0
        for name, t in self._params.items():
            out[name] = (off, off + t.size)
            off += t.size
        return out


class VectorView:
    """Read a ParamSet's parameters out of one flat tensor.

    Lets a whole model run as a function of a single vector (for gradient
    checking): each lookup slices and reshapes the vector on the active graph.
    """

    def __init__(self, params: ParamSet, vec: Tensor):
        self._shapes = {name: t.shape for name, t in params.items()}
        self._offsets = params.offsets()
        self._vec = vec
        self._cache: dict[str, Tensor] = {}

    def __getitem__(self, name: str) -> Tensor:
        got = self._cache.get(name)
        if got is None:
            lo, hi = self._offsets[name]
            got = T.reshape(T.slice1d(self._vec, lo, hi), self._shapes[name])
            self._cache[name] = got
        return got

    def __contains__(self, name: str) -> bool:
        return name in self._offsets


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    out = T.matmul(x, w)
    return out if b is None else T.add(out, b)


def add_mha_params(params: ParamSet, prefix: str, d: int, rng) -> None:
    for gate in ("wq", "wk", "wv", "wo"):
        params.add(f"{prefix}.{gate}", (d, d), rng)
        params.add(f"{prefix}.{gate[1]}b", (d,), rng, fan_in=d)


def mha(query: Tensor, keys: Tensor, params, prefix: str, heads: int) -> Tensor:
    """Multi-head attention of shape (B, Tq, d) over (B, Tk, d)."""
    d = query.shape[-1]
    dh = d // heads
    B, Tq = query.shape[0], query.shape[1]
    Tk = keys.shape[1]

    def split(t: Tensor, length: int) -> Tensor:
        return T.transpose(T.reshape(t, (B, length, heads, dh)), (0, 2, 1, 3))

    q = split(linear(query, params[f"{prefix}.wq"], params[f"{prefix}.qb"]), Tq)
    k = split(linear(keys, params[f"{prefix}.wk"], params[f"{prefix}.kb"]), Tk)
    v = split(linear(keys, params[f"{prefix}.wv"], params[f"{prefix}.vb"]), Tk)
    scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    mixed = T.matmul(T.softmax(scores), v)
    joined = T.reshape(T.transpose(mixed, (0, 2, 1, 3)), (B, Tq, d))
    return linear(joined, params[f"{prefix}.wo"], params[f"{prefix}.ob"])


def add_norm_params(params: ParamSet, prefix: str, d: int) -> None:
    params.add_constant(f"{prefix}.g", np.ones(d))
    params.add_constant(f"{prefix}.b", np.zeros(d))


def norm(x: Tensor, params, prefix: str) -> Tensor:
    return T.instance_norm(x, params[f"{prefix}.g"], params[f"{prefix}.b"])


def clip_grad_norm(tensors, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = 0.0
    for t in tensors:
        if t.grad is not None:
            total += float((t.grad * t.grad).sum())
    norm_val = math.sqrt(total)
    if norm_val > max_norm and norm_val > 0:
        scale = max_norm / norm_val
        for t in tensors:
            if t.grad is not None:
                t.grad = t.grad * scale
    return norm_val


class AdamW:
    """Adaptive-moment optimizer with decoupled weight decay."""

    def __init__(self, params: ParamSet, lr: float = 1e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 1e-6):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {name: np.zeros(t.shape) for name, t in params.items()}
        self.v = {name: np.zeros(t.shape) for name, t in params.items()}

    def step(self, lr_scale: float = 1.0) -> None:
        self.step_count += 1
        b1, b2 = self.betas
        bias1 = 1.0 - b1 ** self.step_count
        bias2 = 1.0 - b2 ** self.step_count
        lr = self.lr * lr_scale
        for name, t in self.params.items():
            g = t.grad
            if g is None:
                continue
            m = self.m[name] = b1 * self.m[name] + (1 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1 - b2) * (g * g)
            update = (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            t.values = t.values - lr * update - lr * self.weight_decay * t.values

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.m:
            out[f"opt.m.{name}"] = self.m[name]
            out[f"opt.v.{name}"] = self.v[name]
        return out

    def load_state_arrays(self, blocks: dict[str, np.ndarray], step_count: int) -> None:
        for name in self.m:
            self.m[name] = blocks[f"opt.m.{name}"]
            self.v[name] = blocks[f"opt.v.{name}"]
        self.step_count = step_count
