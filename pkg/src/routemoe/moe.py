"""Sparse mixture-of-experts layer.

A lightweight router maps each routed unit (a node embedding, or a pooled
instance representation) to a probability over m experts; the k highest
survive and their weights are renormalized, so gradients keep flowing through
the kept probabilities. Experts are two-layer feed-forward blocks; the
residual-refined variant adds a linear refinement of the input in the original
feature space on top of an up/SiLU/down main path. An always-on shared expert
can be added to capture structure common to every distribution.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .nn import ParamSet, linear
from .tensor import Tensor

EXPERT_KINDS = ("vanilla", "r2e")
GATING_MODES = ("topk", "sampling")


@dataclass
class MoEConfig:
    m: int = 8                   # experts
    k: int = 3                   # activated per unit
    expert_kind: str = "r2e"
    int_dim: int = 128           # expert intermediate dimension
    shared_expert: bool = True
    gating: str = "topk"

    def __post_init__(self):
        if not 1 <= self.k <= self.m:
            raise ConfigError(f"need 1 <= k <= m, got k={self.k} m={self.m}")
        if self.int_dim < 1:
            raise ConfigError(f"int_dim must be >= 1, got {self.int_dim}")
        if self.expert_kind not in EXPERT_KINDS:
            raise ConfigError(f"expert_kind must be one of {EXPERT_KINDS}")
        if self.gating not in GATING_MODES:
            raise ConfigError(f"gating must be one of {GATING_MODES}")


@dataclass(frozen=True)
class GateDecision:
    """Routing outcome for one unit."""

    selected: tuple[int, ...]     # k distinct expert indices
    weights: np.ndarray           # (k,) positive, sums to 1
    raw_probs: np.ndarray         # (m,) full softmax output


class RouteResult:
    """Batched routing outcome; behaves as a sequence of GateDecision."""

    def __init__(self, selected: np.ndarray, weights: Tensor, raw_probs: Tensor):
        self.selected = selected      # (U, k) int
        self.weights = weights        # (U, k) tensor
        self.raw_probs = raw_probs    # (U, m) tensor

    def __len__(self) -> int:
        return self.selected.shape[0]

    def __getitem__(self, i: int) -> GateDecision:
        return GateDecision(tuple(int(j) for j in self.selected[i]),
                            self.weights.values[i].copy(),
                            self.raw_probs.values[i].copy())

    def __iter__(self):
        return (self[i] for i in range(len(self)))


def _topk_select(probs: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries per row, ties to the lower index."""
    # argsort on (-prob, index) pairs: stable sort of -probs gives exactly that
    order = np.argsort(-probs, axis=-1, kind="stable")
    return np.sort(order[..., :k], axis=-1)


def _sample_select(probs: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Draw k distinct experts per row, sequentially renormalizing."""
    U, m = probs.shape
    out = np.empty((U, k), dtype=np.int64)
    for u in range(U):
        p = probs[u].copy()
        for j in range(k):
            p = p / p.sum()
            cum = np.cumsum(p)
            idx = int(np.searchsorted(cum, rng.random(), side="right"))
            idx = min(idx, m - 1)
            while p[idx] == 0.0:  # guard against landing on a zeroed interval
                idx = (idx + 1) % m
            out[u, j] = idx
            p[idx] = 0.0
    return np.sort(out, axis=-1)


def route(x: Tensor, router_w: Tensor, router_b: Tensor, cfg: MoEConfig,
          rng: np.random.Generator | None = None,
          forced_selected: np.ndarray | None = None) -> RouteResult:
    """Gate a batch of units (U, d) across cfg.m experts.

    Top-k keeps the k largest probabilities (ties to the lower expert index);
    sampling draws k distinct experts proportional to the probabilities and
    needs ``rng``. Renormalized weights are a masked softmax of the routing
    logits, so they stay differentiable through the kept probabilities.
    ``forced_selected`` replays a fixed selection (gradient-check harness).
    """
    logits = linear(x, router_w, router_b)
    raw_probs = T.softmax(logits)
    if forced_selected is not None:
        selected = np.asarray(forced_selected)
    elif cfg.gating == "topk":
        selected = _topk_select(raw_probs.values, cfg.k)
    else:
        if rng is None:
            raise ConfigError("sampling gating requires an rng")
        selected = _sample_select(raw_probs.values, cfg.k, rng)
    keep = np.zeros(raw_probs.shape, dtype=bool)
    np.put_along_axis(keep, selected, True, axis=-1)
    weights_full = T.masked_softmax(logits, keep)
    return RouteResult(selected, _gather_weights(weights_full, selected), raw_probs)


def _gather_weights(weights_full: Tensor, selected: np.ndarray) -> Tensor:
    """(U, m) renormalized probabilities -> (U, k) in selection order."""
    U, k = selected.shape
    cols = []
    for j in range(k):
        cols.append(T.reshape(T.pick(weights_full, selected[:, j]), (U, 1)))
    return T.concat(cols, axis=-1)


@dataclass
class ExpertParams:
    """One expert's maps; ``refine`` present only for the residual-refined kind."""

    up: Tensor
    up_bias: Tensor
    down: Tensor
    down_bias: Tensor
    refine: Tensor | None = None
    refine_bias: Tensor | None = None


def add_expert_params(params: ParamSet, prefix: str, d: int, int_dim: int,
                      kind: str, rng) -> None:
    params.add(f"{prefix}.up", (d, int_dim), rng)
    params.add(f"{prefix}.up_b", (int_dim,), rng, fan_in=d)
    params.add(f"{prefix}.down", (int_dim, d), rng)
    params.add(f"{prefix}.down_b", (d,), rng, fan_in=int_dim)
    if kind == "r2e":
        params.add(f"{prefix}.refine", (d, d), rng)
        params.add(f"{prefix}.refine_b", (d,), rng, fan_in=d)


def expert_view(params, prefix: str, kind: str) -> ExpertParams:
    if kind == "r2e":
        return ExpertParams(params[f"{prefix}.up"], params[f"{prefix}.up_b"],
                            params[f"{prefix}.down"], params[f"{prefix}.down_b"],
                            params[f"{prefix}.refine"], params[f"{prefix}.refine_b"])
    return ExpertParams(params[f"{prefix}.up"], params[f"{prefix}.up_b"],
                        params[f"{prefix}.down"], params[f"{prefix}.down_b"])


def expert_forward(x: Tensor, p: ExpertParams, kind: str) -> Tensor:
    """vanilla: down(relu(up(x))); r2e: down(silu(up(x))) + refine(x)."""
    hidden = linear(x, p.up, p.up_bias)
    if kind == "vanilla":
        return linear(T.relu(hidden), p.down, p.down_bias)
    main = linear(T.silu(hidden), p.down, p.down_bias)
    return T.add(main, linear(x, p.refine, p.refine_bias))


def moe_forward(x: Tensor, gates: RouteResult, experts: list[ExpertParams],
                shared: ExpertParams | None) -> Tensor:
    """Weighted combination of each unit's selected experts.

    x: (U, d). Only experts that some unit selected are evaluated, each on
    exactly the rows routed to it; the shared expert (when present) runs on
    every row with weight 1.
    """
    U = x.shape[0]
    selected = gates.selected
    out = None
    for j, expert in enumerate(experts):
        kind = "r2e" if expert.refine is not None else "vanilla"
        hits = selected == j
        unit_idx = np.nonzero(hits.any(axis=-1))[0]
        if unit_idx.size == 0:
            continue
        slot = hits[unit_idx].argmax(axis=-1)
        xin = T.gather_nodes(x, unit_idx)
        w = T.pick(T.gather_nodes(gates.weights, unit_idx), slot)
        piece = T.scatter_nodes(T.scale_rows(expert_forward(xin, expert, kind), w),
                                unit_idx, U)
        out = piece if out is None else T.add(out, piece)
    if shared is not None:
        kind = "r2e" if shared.refine is not None else "vanilla"
        base = expert_forward(x, shared, kind)
        out = base if out is None else T.add(out, base)
    if out is None:
        raise ConfigError("moe_forward: no experts evaluated")
    return out


def load_balance_loss(raw_probs: Tensor, selected: np.ndarray, k: int) -> Tensor:
    """m * sum_j importance_j * load_j over a batch of routed units.

    importance is the mean routing probability per expert (differentiable);
    load is the observed selection frequency, treated as a constant.
    """
    U, m = raw_probs.shape
    counts = np.zeros(m)
    np.add.at(counts, selected.ravel(), 1.0)
    load = counts / (U * k)
    importance = T.tmean(raw_probs, axis=0)
    return T.mul(T.tsum(T.mul(importance, T.constant(load))), float(m))


def usage_histogram(decisions, m: int) -> np.ndarray:
    """Per-expert selection counts over a stream of GateDecision/RouteResult."""
    counts = np.zeros(m, dtype=np.int64)
    if isinstance(decisions, RouteResult):
        np.add.at(counts, decisions.selected.ravel(), 1)
        return counts
    for dec in decisions:
        if isinstance(dec, RouteResult):
            np.add.at(counts, dec.selected.ravel(), 1)
        else:
            for j in dec.selected:
                counts[j] += 1
    return counts


def write_usage_csv(path, rows) -> None:
    """rows: iterable of (distribution, counts ndarray)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["distribution", "expert_index", "count", "frequency"])
        for label, counts in rows:
            total = counts.sum()
            for j, c in enumerate(counts):
                freq = 0.0 if total == 0 else c / total
                writer.writerow([label, j, int(c), repr(float(freq))])
