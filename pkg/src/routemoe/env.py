"""The routing MDP: feasibility masks, transitions, costs, and augmentation.

CVRP instances use demands normalized by capacity, so the vehicle capacity is
1.0 here and ``remaining_capacity`` lives in [0, 1]. A CVRP trajectory starts
at the depot (node 0), may return to it to reload, and is done once every
customer is served and the vehicle is back at the depot. Consecutive
depot-depot moves are masked out.

``RolloutState`` is the single-trajectory reference implementation;
``BatchState`` is the vectorized mirror used for batched rollouts and is
property-tested against the scalar version.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import InfeasibleError, InvalidTourError
from .generate import Instance

CAP_EPS = 1e-9          # slack when comparing demands against remaining capacity
VALIDATE_EPS = 1e-6     # tolerance when auditing subtour loads


@dataclass
class RolloutState:
    """One partial trajectory."""

    visited: np.ndarray           # bool over nodes; depot entry stays False
    current: int
    remaining_capacity: float     # 1.0 for TSP (unused)
    partial_tour: list[int] = field(default_factory=list)
    done: bool = False


def initial_state(inst: Instance, first_node: int | None = None) -> RolloutState:
    """Fresh state; for TSP a first node must be supplied (it is forced, not
    chosen by the policy), for CVRP the trajectory begins at the depot."""
    visited = np.zeros(inst.num_nodes, dtype=bool)
    if inst.problem == "TSP":
        if first_node is None:
            raise ValueError("TSP state needs a starting node")
        visited[first_node] = True
        return RolloutState(visited, first_node, 1.0, [first_node], inst.num_nodes == 1)
    return RolloutState(visited, 0, 1.0, [0], False)


def feasible_mask(state: RolloutState, inst: Instance) -> np.ndarray:
    """Boolean mask of allowed next nodes."""
    if state.done:
        raise InfeasibleError("state is terminal")
    if inst.problem == "TSP":
        return ~state.visited
    mask = np.zeros(inst.num_nodes, dtype=bool)
    fits = inst.demands <= state.remaining_capacity + CAP_EPS
    mask[1:] = ~state.visited[1:] & fits
    mask[0] = state.current != 0
    return mask


def step(state: RolloutState, action: int, inst: Instance) -> RolloutState:
    """Apply an action, returning the successor state."""
    if not feasible_mask(state, inst)[action]:
        raise InfeasibleError(f"action {action} is infeasible from node {state.current}")
    visited = state.visited.copy()
    tour = state.partial_tour + [int(action)]
    if inst.problem == "TSP":
        visited[action] = True
        return RolloutState(visited, int(action), 1.0, tour, bool(visited.all()))
    if action == 0:
        remaining = 1.0
    else:
        visited[action] = True
        remaining = state.remaining_capacity - float(inst.demands[action - 1])
    done = bool(visited[1:].all()) and action == 0
    return RolloutState(visited, int(action), remaining, tour, done)


def _euclidean(coords: np.ndarray, a: int, b: int) -> float:
    d = coords[a] - coords[b]
    return float(np.hypot(d[0], d[1]))


def tour_cost(inst: Instance, tour) -> float:
    """Length of a validated tour (64-bit; TSP closes the cycle)."""
    report = validate(inst, tour)
    if not report.ok:
        raise InvalidTourError(f"infeasible tour: {report.violations[0]}")
    coords = np.asarray(inst.coords, dtype=np.float64)
    total = 0.0
    for a, b in zip(tour, tour[1:]):
        total += _euclidean(coords, a, b)
    if inst.problem == "TSP":
        total += _euclidean(coords, tour[-1], tour[0])
    return total


def path_cost(coords: np.ndarray, tour, closed: bool) -> float:
    """Unvalidated tour length (helper for oracles and batched evaluation)."""
    pts = np.asarray(coords, dtype=np.float64)[list(tour)]
    seg = np.hypot(*(pts[1:] - pts[:-1]).T).sum()
    if closed:
        seg += float(np.hypot(*(pts[0] - pts[-1])))
    return float(seg)


@dataclass(frozen=True)
class ValidationReport:
    ok: bool
    violations: tuple[str, ...] = ()


def validate(inst: Instance, tour) -> ValidationReport:
    """Audit a tour: visit-exactly-once, subtour loads, depot start/end."""
    tour = [int(t) for t in tour]
    problems = []
    if inst.problem == "TSP":
        counts = np.bincount(tour, minlength=inst.num_nodes)
        for node in np.nonzero(counts > 1)[0]:
            problems.append(f"duplicate node {node}")
        for node in np.nonzero(counts == 0)[0]:
            problems.append(f"missing node {node}")
        return ValidationReport(not problems, tuple(problems))
    customers = [t for t in tour if t != 0]
    counts = np.bincount(customers, minlength=inst.num_nodes)
    for node in np.nonzero(counts > 1)[0]:
        problems.append(f"duplicate node {node}")
    for node in np.nonzero(counts[1:] == 0)[0] + 1:
        problems.append(f"missing node {node}")
    if not tour or tour[0] != 0:
        problems.append("tour does not start at the depot")
    if not tour or tour[-1] != 0:
        problems.append("tour does not end at the depot")
    load = 0.0
    subtour = 0
    for node in tour[1:]:
        if node == 0:
            subtour += 1
            load = 0.0
        else:
            load += float(inst.demands[node - 1])
            if load > 1.0 + VALIDATE_EPS:
                problems.append(f"capacity exceeded on subtour {subtour} (load {load:.6f})")
                load = -np.inf  # report each overloaded subtour once
    return ValidationReport(not problems, tuple(problems))


AUGMENTATIONS = (
    lambda x, y: (x, y),
    lambda x, y: (y, x),
    lambda x, y: (x, 1.0 - y),
    lambda x, y: (y, 1.0 - x),
    lambda x, y: (1.0 - x, y),
    lambda x, y: (1.0 - y, x),
    lambda x, y: (1.0 - x, 1.0 - y),
    lambda x, y: (1.0 - y, 1.0 - x),
)


def augment8(inst: Instance) -> list[Instance]:
    """The 8 dihedral transforms of the unit square applied to all coords."""
    out = []
    x, y = inst.coords[:, 0], inst.coords[:, 1]
    for tf in AUGMENTATIONS:
        nx, ny = tf(x, y)
        out.append(replace(inst, coords=np.stack([nx, ny], axis=1)))
    return out


def write_tour_json(path, inst: Instance, tour, cost: float) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"instance_seed": int(inst.seed), "tour": [int(t) for t in tour],
                   "cost": float(cost)}, fh)


# ---------------------------------------------------------------------------
# vectorized rollout state


class BatchState:
    """Vectorized trajectories for B instances x S starts (same n, problem).

    Mirrors feasible_mask/step exactly; finished CVRP trajectories idle at the
    depot, flagged by ``done`` so idle moves can be excluded from log-probs.
    """

    def __init__(self, problem: str, num_nodes: int, batch: int, starts: int,
                 demands: np.ndarray | None):
        self.problem = problem
        self.num_nodes = num_nodes
        self.B = batch
        self.S = starts
        self.demands = demands  # (B, n) normalized, CVRP only
        self.visited = np.zeros((batch, starts, num_nodes), dtype=bool)
        self.done = np.zeros((batch, starts), dtype=bool)
        self.current = np.zeros((batch, starts), dtype=np.int64)
        self.remaining = np.ones((batch, starts))
        self.tours: list[np.ndarray] = []

    def force_first(self, first: np.ndarray) -> None:
        """Force each trajectory's first customer/node (POMO multi-start)."""
        first = first.astype(np.int64)
        b = np.arange(self.B)[:, None]
        s = np.arange(self.S)[None, :]
        if self.problem == "TSP":
            self.visited[b, s, first] = True
            self.current[:] = first
            self.tours.append(first.copy())
        else:
            self.tours.append(np.zeros((self.B, self.S), dtype=np.int64))
            self.visited[b, s, first] = True
            self.current[:] = first
            self.remaining = self.remaining - self._demand_of(first)
            self.tours.append(first.copy())

    def _demand_of(self, nodes: np.ndarray) -> np.ndarray:
        dem = np.zeros(nodes.shape)
        mask = nodes > 0
        idx = np.clip(nodes - 1, 0, None)
        gathered = np.take_along_axis(
            np.broadcast_to(self.demands[:, None, :], (self.B, self.S, self.demands.shape[1])),
            idx[..., None], axis=2)[..., 0]
        dem[mask] = gathered[mask]
        return dem

    def feasible(self) -> np.ndarray:
        """(B, S, N) mask; done trajectories are granted a depot self-loop."""
        if self.problem == "TSP":
            return ~self.visited
        mask = np.zeros((self.B, self.S, self.num_nodes), dtype=bool)
        fits = self.demands[:, None, :] <= self.remaining[..., None] + CAP_EPS
        mask[..., 1:] = ~self.visited[..., 1:] & fits
        mask[..., 0] = self.current != 0
        mask[self.done] = False
        mask[self.done, 0] = True
        return mask

    def apply(self, actions: np.ndarray) -> None:
        actions = actions.astype(np.int64)
        if self.problem == "TSP":
            b = np.arange(self.B)[:, None]
            s = np.arange(self.S)[None, :]
            self.visited[b, s, actions] = True
            self.current = actions
            self.tours.append(actions.copy())
            self.done = self.visited.all(axis=-1)
            return
        active = ~self.done
        effective = np.where(active, actions, 0)  # finished trajectories idle at the depot
        at_depot = effective == 0
        new_remaining = np.where(at_depot, 1.0, self.remaining - self._demand_of(effective))
        self.remaining = np.where(active, new_remaining, self.remaining)
        vb, vs = np.nonzero(active & ~at_depot)
        self.visited[vb, vs, effective[vb, vs]] = True
        self.current = np.where(active, effective, self.current)
        self.tours.append(effective.copy())
        self.done = self.done | (self.visited[..., 1:].all(axis=-1) & (self.current == 0))

    def all_done(self) -> bool:
        return bool(self.done.all())

    def tour_array(self) -> np.ndarray:
        """(B, S, T) actions taken so far (done trajectories padded with 0)."""
        return np.stack(self.tours, axis=-1)


def batch_tour_costs(coords: np.ndarray, tours: np.ndarray, problem: str) -> np.ndarray:
    """Tour lengths for (B, S, T) tours over (B, N, 2) coords.

    CVRP tours are depot-padded, which adds zero-length edges; TSP tours are
    closed. Costs are always accumulated in float64.
    """
    coords = np.asarray(coords, dtype=np.float64)
    B, S, T = tours.shape
    bidx = np.arange(B)[:, None, None]
    pts = coords[bidx, tours]                       # (B, S, T, 2)
    seg = np.sqrt(((pts[..., 1:, :] - pts[..., :-1, :]) ** 2).sum(-1)).sum(-1)
    if problem == "TSP":
        seg += np.sqrt(((pts[..., 0, :] - pts[..., -1, :]) ** 2).sum(-1))
    return seg
