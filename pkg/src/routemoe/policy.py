"""The routing policy network.

Encoder: node features -> embeddings through attention layers whose
feed-forward slots can be sparse expert mixtures routed per node. A dedicated
attention block pools the final embeddings into one instance representation,
which feeds a distribution classifier and, when the decoder carries experts,
gates them once per instance so decoding reuses a single expert activation
pattern for every step. Decoder: context attention over node embeddings, the
gated feed-forward slot, then single-head compatibility scores with tanh
clipping and feasibility-masked softmax.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import env
from . import tensor as T
from .errors import ConfigError
from .generate import Instance, TRAIN_LABELS, rng_stream
from .moe import MoEConfig, RouteResult, add_expert_params, expert_view, moe_forward, route
from .nn import ParamSet, add_mha_params, add_norm_params, linear, mha, norm
from .tensor import Tensor

PLACEMENTS = ("dense", "encoder_only", "decoder_only", "both")
ROUTING_MODES = ("instance", "node")


@dataclass
class PolicyConfig:
    d: int = 128
    heads: int = 8
    enc_layers: int = 6
    moe: MoEConfig = field(default_factory=MoEConfig)
    moe_placement: str = "both"
    decoder_routing: str = "instance"
    clip: float = 10.0
    num_classes: int = 3

    def __post_init__(self):
        if self.d % self.heads != 0:
            raise ConfigError(f"d={self.d} must be divisible by heads={self.heads}")
        if self.clip <= 0:
            raise ConfigError(f"clip must be positive, got {self.clip}")
        if self.num_classes < 1:
            raise ConfigError(f"num_classes must be >= 1, got {self.num_classes}")
        if self.moe_placement not in PLACEMENTS:
            raise ConfigError(f"moe_placement must be one of {PLACEMENTS}")
        if self.decoder_routing not in ROUTING_MODES:
            raise ConfigError(f"decoder_routing must be one of {ROUTING_MODES}")

    @property
    def encoder_moe(self) -> bool:
        return self.moe_placement in ("encoder_only", "both")

    @property
    def decoder_moe(self) -> bool:
        return self.moe_placement in ("decoder_only", "both")


def class_index(label: str) -> int:
    """Training-distribution class id; unseen labels fall outside [0, C)."""
    return TRAIN_LABELS.index(label) if label in TRAIN_LABELS else -1


# ---------------------------------------------------------------------------
# parameters


def _add_ffn_slot(params: ParamSet, prefix: str, d: int, cfg: PolicyConfig,
                  rng, use_moe: bool) -> None:
    m = cfg.moe
    if use_moe:
        params.add(f"{prefix}.router.w", (d, m.m), rng)
        params.add(f"{prefix}.router.b", (m.m,), rng, fan_in=d)
        for j in range(m.m):
            add_expert_params(params, f"{prefix}.e{j}", d, m.int_dim, m.expert_kind, rng)
        if m.shared_expert:
            add_expert_params(params, f"{prefix}.shared", d, m.int_dim, m.expert_kind, rng)
    else:
        add_expert_params(params, f"{prefix}.ffn", d, m.int_dim, "vanilla", rng)


def init_params(cfg: PolicyConfig, problem: str, seed: int) -> ParamSet:
    rng = rng_stream(seed, 1000)
    params = ParamSet()
    d = cfg.d
    if problem == "TSP":
        params.add("embed.w", (2, d), rng)
        params.add("embed.b", (d,), rng, fan_in=2)
    else:
        params.add("embed_depot.w", (2, d), rng)
        params.add("embed_depot.b", (d,), rng, fan_in=2)
        params.add("embed_cust.w", (3, d), rng)
        params.add("embed_cust.b", (d,), rng, fan_in=3)
    for i in range(cfg.enc_layers):
        add_mha_params(params, f"enc{i}.mha", d, rng)
        add_norm_params(params, f"enc{i}.norm1", d)
        _add_ffn_slot(params, f"enc{i}", d, cfg, rng, cfg.encoder_moe)
        add_norm_params(params, f"enc{i}.norm2", d)
    add_mha_params(params, "inst.mha", d, rng)
    params.add("cls.w", (d, cfg.num_classes), rng)
    params.add("cls.b", (cfg.num_classes,), rng, fan_in=d)
    ctx_in = 3 * d if problem == "TSP" else 2 * d + 1
    params.add("dec.ctx.w", (ctx_in, d), rng)
    params.add("dec.ctx.b", (d,), rng, fan_in=ctx_in)
    add_mha_params(params, "dec.mha", d, rng)
    _add_ffn_slot(params, "dec", d, cfg, rng, cfg.decoder_moe)
    params.add("dec.key.w", (d, d), rng)
    return params


def _ffn_slot(x_flat: Tensor, params, prefix: str, cfg: PolicyConfig, use_moe: bool,
              gates: RouteResult | None) -> Tensor:
    """Apply the feed-forward slot to flattened units (U, d)."""
    m = cfg.moe
    if not use_moe:
        return _expert(x_flat, params, f"{prefix}.ffn", "vanilla")
    experts = [expert_view(params, f"{prefix}.e{j}", m.expert_kind) for j in range(m.m)]
    shared = expert_view(params, f"{prefix}.shared", m.expert_kind) if m.shared_expert else None
    return moe_forward(x_flat, gates, experts, shared)


def _expert(x: Tensor, params, prefix: str, kind: str) -> Tensor:
    from .moe import expert_forward
    return expert_forward(x, expert_view(params, prefix, kind), kind)


# ---------------------------------------------------------------------------
# batching


@dataclass
class InstanceBatch:
    problem: str
    coords: np.ndarray                 # (B, N, 2)
    demands: np.ndarray | None         # (B, n) normalized
    instances: list[Instance]

    @property
    def B(self) -> int:
        return self.coords.shape[0]

    @property
    def num_nodes(self) -> int:
        return self.coords.shape[1]


def make_batch(instances) -> InstanceBatch:
    instances = list(instances)
    problem = instances[0].problem
    if any(i.problem != problem for i in instances):
        raise ConfigError("cannot batch mixed problems")
    if any(i.num_nodes != instances[0].num_nodes for i in instances):
        raise ConfigError("cannot batch mixed instance sizes")
    coords = np.stack([i.coords for i in instances])
    demands = np.stack([i.demands for i in instances]) if problem == "CVRP" else None
    return InstanceBatch(problem, coords, demands, instances)


@dataclass
class InstanceEncoding:
    """Encoder output for a batch (B may be 1 for the single-instance API)."""

    node_embs: Tensor                       # (B, N, d)
    z_inst: Tensor                          # (B, d)
    class_probs: Tensor                     # (B, C)
    decoder_gates: RouteResult | None       # instance routing only, one per instance
    encoder_gates: list[RouteResult] = field(default_factory=list)


@dataclass
class ForcedChoices:
    """Frozen stochastic choices so a rollout can be replayed at perturbed
    parameters (the gradient-check harness); selections are piecewise
    constant, so the replayed loss is what backward differentiates."""

    first: np.ndarray
    actions: list[np.ndarray]
    enc_selected: list[np.ndarray]
    dec_inst_selected: np.ndarray | None
    dec_step_selected: list[np.ndarray]


def encode_batch(batch: InstanceBatch, params, cfg: PolicyConfig,
                 forced: ForcedChoices | None = None) -> InstanceEncoding:
    B, N, d = batch.B, batch.num_nodes, cfg.d
    if batch.problem == "TSP":
        x = linear(T.constant(batch.coords), params["embed.w"], params["embed.b"])
    else:
        depot = linear(T.constant(batch.coords[:, :1, :]),
                       params["embed_depot.w"], params["embed_depot.b"])
        feats = np.concatenate([batch.coords[:, 1:, :], batch.demands[:, :, None]], axis=-1)
        customers = linear(T.constant(feats), params["embed_cust.w"], params["embed_cust.b"])
        x = T.concat([depot, customers], axis=-2)
    encoder_gates: list[RouteResult] = []
    for i in range(cfg.enc_layers):
        h = norm(T.add(x, mha(x, x, params, f"enc{i}.mha", cfg.heads)), params, f"enc{i}.norm1")
        flat = T.reshape(h, (B * N, d))
        if cfg.encoder_moe:
            sel = forced.enc_selected[i] if forced is not None else None
            gates = route(flat, params[f"enc{i}.router.w"], params[f"enc{i}.router.b"],
                          cfg.moe, forced_selected=sel)
            encoder_gates.append(gates)
            out = _ffn_slot(flat, params, f"enc{i}", cfg, True, gates)
        else:
            out = _ffn_slot(flat, params, f"enc{i}", cfg, False, None)
        x = norm(T.add(h, T.reshape(out, (B, N, d))), params, f"enc{i}.norm2")
    z = instance_representation_batch(x, params, cfg)
    class_probs = T.softmax(linear(z, params["cls.w"], params["cls.b"]))
    decoder_gates = None
    if cfg.decoder_moe and cfg.decoder_routing == "instance":
        sel = forced.dec_inst_selected if forced is not None else None
        decoder_gates = route(z, params["dec.router.w"], params["dec.router.b"],
                              cfg.moe, forced_selected=sel)
    return InstanceEncoding(x, z, class_probs, decoder_gates, encoder_gates)


def instance_representation_batch(node_embs: Tensor, params, cfg: PolicyConfig) -> Tensor:
    """One dedicated attention block over nodes, then mean pooling."""
    return T.tmean(mha(node_embs, node_embs, params, "inst.mha", cfg.heads), axis=-2)


def classify_distribution(z_inst: Tensor, params, num_classes: int) -> Tensor:
    single = z_inst.ndim == 1
    z = T.reshape(z_inst, (1, -1)) if single else z_inst
    probs = T.softmax(linear(z, params["cls.w"], params["cls.b"]))
    return T.reshape(probs, (num_classes,)) if single else probs


def cross_entropy(class_probs: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of the true distribution labels."""
    single = class_probs.ndim == 1
    probs = T.reshape(class_probs, (1, -1)) if single else class_probs
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    C = probs.shape[-1]
    if ((labels < 0) | (labels >= C)).any():
        raise ConfigError(f"labels must lie in [0, {C}), got {labels}")
    return T.neg(T.tmean(T.log(T.pick(probs, labels))))


# ---------------------------------------------------------------------------
# decoding


def _instance_gates_for_units(gates: RouteResult, S: int) -> RouteResult:
    """Repeat per-instance gate decisions across the S start trajectories."""
    selected = np.repeat(gates.selected, S, axis=0)
    B, k = gates.selected.shape
    weights = T.reshape(T.expand(gates.weights, 1, S), (B * S, k))
    raw = T.reshape(T.expand(gates.raw_probs, 1, S), (B * S, gates.raw_probs.shape[-1]))
    return RouteResult(selected, weights, raw)


def _decode_probs(state: env.BatchState, encoding: InstanceEncoding, params,
                  cfg: PolicyConfig, first: np.ndarray,
                  dec_routes: list[RouteResult],
                  forced_sel: np.ndarray | None = None) -> Tensor:
    B, S = state.current.shape
    d = cfg.d
    node_embs = encoding.node_embs
    mean_emb = T.expand(T.tmean(node_embs, axis=-2), 1, S)
    last_emb = T.gather_nodes(node_embs, state.current)
    if state.problem == "TSP":
        third = T.gather_nodes(node_embs, first)
    else:
        third = T.reshape(T.constant(state.remaining), (B, S, 1))
    ctx = T.concat([mean_emb, last_emb, third], axis=-1)
    q = linear(ctx, params["dec.ctx.w"], params["dec.ctx.b"])
    h = mha(q, node_embs, params, "dec.mha", cfg.heads)
    flat = T.reshape(h, (B * S, d))
    if cfg.decoder_moe:
        if cfg.decoder_routing == "instance":
            gates = _instance_gates_for_units(encoding.decoder_gates, S)
        else:
            gates = route(flat, params["dec.router.w"], params["dec.router.b"],
                          cfg.moe, forced_selected=forced_sel)
            dec_routes.append(gates)
        out = _ffn_slot(flat, params, "dec", cfg, True, gates)
    else:
        out = _ffn_slot(flat, params, "dec", cfg, False, None)
    h = T.reshape(out, (B, S, d))
    keys = T.matmul(node_embs, params["dec.key.w"])
    scores = T.mul(T.matmul(h, T.transpose(keys, (0, 2, 1))), 1.0 / math.sqrt(d))
    clipped = T.mul(T.tanh(scores), cfg.clip)
    return T.masked_softmax(clipped, state.feasible())


def _sample_actions(probs: np.ndarray, mask: np.ndarray,
                    rng: np.random.Generator) -> np.ndarray:
    cum = probs.cumsum(axis=-1)
    u = rng.random(probs.shape[:-1])
    idx = (u[..., None] < cum).argmax(axis=-1)
    feasible = np.take_along_axis(mask, idx[..., None], axis=-1)[..., 0]
    if not feasible.all():
        fallback = np.where(mask, probs, -1.0).argmax(axis=-1)
        idx = np.where(feasible, idx, fallback)
    return idx


@dataclass
class RolloutResult:
    tours: np.ndarray                     # (B, S, T)
    costs: np.ndarray                     # (B, S)
    logps: Tensor                         # (B, S) summed over policy steps
    step_probs: list[Tensor]              # per policy step, (B, S, N)
    encoding: InstanceEncoding
    decoder_routes: list[RouteResult]     # one entry (instance) or per step (node)
    choices: ForcedChoices


def rollout_batch(batch: InstanceBatch, params, cfg: PolicyConfig, mode: str,
                  starts: int, rng: np.random.Generator | None = None,
                  forced: ForcedChoices | None = None) -> RolloutResult:
    """Roll out ``starts`` trajectories per instance.

    Multi-start: trajectory s begins at node s (TSP) / customer s+1 (CVRP);
    the forced first move contributes no log-probability. ``mode`` is greedy
    (argmax) or sample (needs rng). ``forced`` replays recorded choices.
    """
    B, N = batch.B, batch.num_nodes
    n_customers = N - 1 if batch.problem == "CVRP" else N
    if not 1 <= starts <= n_customers:
        raise ConfigError(f"starts must be in [1, {n_customers}], got {starts}")
    if mode == "sample" and rng is None and forced is None:
        raise ConfigError("sample mode requires an rng")
    if mode not in ("greedy", "sample"):
        raise ConfigError(f"mode must be greedy or sample, got {mode!r}")

    encoding = encode_batch(batch, params, cfg, forced)
    state = env.BatchState(batch.problem, N, B, starts, batch.demands)
    if forced is not None:
        first = forced.first
    else:
        offset = 1 if batch.problem == "CVRP" else 0
        first = np.broadcast_to(np.arange(starts) + offset, (B, starts)).copy()
    state.force_first(first)

    logp = T.constant(np.zeros((B, starts)))
    step_probs: list[Tensor] = []
    actions_taken: list[np.ndarray] = []
    dec_routes: list[RouteResult] = []
    if encoding.decoder_gates is not None:
        dec_routes.append(encoding.decoder_gates)
    max_steps = 2 * N + 3
    step_idx = 0
    while not state.all_done():
        if step_idx >= max_steps:
            raise RuntimeError("rollout exceeded the step bound without finishing")
        forced_sel = None
        if forced is not None and cfg.decoder_moe and cfg.decoder_routing == "node":
            forced_sel = forced.dec_step_selected[step_idx]
        probs = _decode_probs(state, encoding, params, cfg, first, dec_routes, forced_sel)
        mask = state.feasible()
        if forced is not None:
            actions = forced.actions[step_idx]
        elif mode == "greedy":
            actions = probs.values.argmax(axis=-1)
        else:
            actions = _sample_actions(probs.values, mask, rng)
        active = (~state.done).astype(np.float64)
        step_lp = T.mul(T.log(T.pick(probs, actions)), T.constant(active))
        logp = T.add(logp, step_lp)
        step_probs.append(probs)
        actions_taken.append(actions)
        state.apply(actions)
        step_idx += 1

    tours = state.tour_array()
    costs = env.batch_tour_costs(batch.coords, tours, batch.problem)
    choices = ForcedChoices(
        first=first,
        actions=actions_taken,
        enc_selected=[g.selected for g in encoding.encoder_gates],
        dec_inst_selected=(encoding.decoder_gates.selected
                           if encoding.decoder_gates is not None else None),
        dec_step_selected=[g.selected for g in dec_routes] if (
            cfg.decoder_moe and cfg.decoder_routing == "node") else [],
    )
    return RolloutResult(tours, costs, logp, step_probs, encoding, dec_routes, choices)


# ---------------------------------------------------------------------------
# single-instance API


def encode(inst: Instance, params, cfg: PolicyConfig) -> InstanceEncoding:
    """Encode one instance; tensors come back without the batch axis."""
    enc = encode_batch(make_batch([inst]), params, cfg)
    return InstanceEncoding(
        node_embs=T.reshape(enc.node_embs, enc.node_embs.shape[1:]),
        z_inst=T.reshape(enc.z_inst, (cfg.d,)),
        class_probs=T.reshape(enc.class_probs, (cfg.num_classes,)),
        decoder_gates=enc.decoder_gates,
        encoder_gates=enc.encoder_gates,
    )


def instance_representation(node_embs: Tensor, params, cfg: PolicyConfig) -> Tensor:
    single = node_embs.ndim == 2
    x = T.reshape(node_embs, (1,) + node_embs.shape) if single else node_embs
    z = instance_representation_batch(x, params, cfg)
    return T.reshape(z, (cfg.d,)) if single else z


def decode_step(state: env.RolloutState, inst: Instance, encoding: InstanceEncoding,
                params, cfg: PolicyConfig) -> Tensor:
    """Next-node probabilities (N,) for a single trajectory state."""
    from .errors import InfeasibleError
    if state.done:
        raise InfeasibleError("decode_step on a terminal state")
    batch_state = env.BatchState(inst.problem, inst.num_nodes, 1, 1,
                                 inst.demands[None, :] if inst.problem == "CVRP" else None)
    batch_state.visited[0, 0] = state.visited
    batch_state.current[0, 0] = state.current
    batch_state.remaining[0, 0] = state.remaining_capacity
    node_embs = encoding.node_embs
    if node_embs.ndim == 2:
        node_embs = T.reshape(node_embs, (1,) + node_embs.shape)
    enc = InstanceEncoding(node_embs, encoding.z_inst, encoding.class_probs,
                           encoding.decoder_gates, encoding.encoder_gates)
    # TSP context carries the starting node; the CVRP context uses capacity instead
    first = np.array([[state.partial_tour[0]]])
    probs = _decode_probs(batch_state, enc, params, cfg, first, [])
    return T.reshape(probs, (inst.num_nodes,))


def rollout_policy(inst: Instance, params, cfg: PolicyConfig, mode: str, starts: int,
                   rng: np.random.Generator | None = None) -> RolloutResult:
    """Single-instance rollout; tours (starts, T), log-probs (starts,)."""
    result = rollout_batch(make_batch([inst]), params, cfg, mode, starts, rng)
    return RolloutResult(
        tours=result.tours[0],
        costs=result.costs[0],
        logps=T.reshape(result.logps, (starts,)),
        step_probs=result.step_probs,
        encoding=result.encoding,
        decoder_routes=result.decoder_routes,
        choices=result.choices,
    )
