"""Reference solvers: exact ground truth at small n, a deterministic
nearest-neighbor + 2-opt heuristic at validation scale, and gap bookkeeping.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass

import numpy as np

from . import env
from .errors import ConfigError
from .generate import Instance

BRUTE_MAX = 9
HELD_KARP_MAX = 13
EXACT_CVRP_MAX = 8


@dataclass(frozen=True)
class ReferenceResult:
    cost: float
    tour: tuple[int, ...]
    method: str          # brute | held_karp | nn_2opt | external
    exact: bool


def _dist_matrix(coords: np.ndarray) -> np.ndarray:
    diff = coords[:, None, :] - coords[None, :, :]
    return np.sqrt((diff * diff).sum(-1))


def brute_force_tsp(inst: Instance) -> ReferenceResult:
    """Exhaustive minimum over all cyclic tours (n <= 9)."""
    n = inst.num_nodes
    if n > BRUTE_MAX:
        raise ConfigError(f"brute force refuses n={n} > {BRUTE_MAX}")
    dist = _dist_matrix(inst.coords)
    best_cost = math.inf
    best = None
    for perm in itertools.permutations(range(1, n)):
        if n > 2 and perm[0] > perm[-1]:
            continue  # each cycle appears once per orientation
        tour = (0,) + perm
        cost = dist[tour[-1], 0]
        for a, b in zip(tour, tour[1:]):
            cost += dist[a, b]
        if cost < best_cost:
            best_cost = cost
            best = tour
    return ReferenceResult(float(best_cost), best, "brute", True)


def held_karp_tsp(inst: Instance) -> ReferenceResult:
    """Exact TSP via subset dynamic programming (n <= 13)."""
    n = inst.num_nodes
    if n > HELD_KARP_MAX:
        raise ConfigError(f"held-karp refuses n={n} > {HELD_KARP_MAX}")
    dist = _dist_matrix(inst.coords)
    if n == 2:
        return ReferenceResult(float(2 * dist[0, 1]), (0, 1), "held_karp", True)
    full = 1 << n
    dp = np.full((full, n), np.inf)
    parent = np.full((full, n), -1, dtype=np.int8)
    dp[1, 0] = 0.0
    bits = 1 << np.arange(n)
    for mask in range(1, full):
        if not mask & 1:
            continue
        row = dp[mask]
        finite = np.isfinite(row)
        if not finite.any():
            continue
        targets = np.nonzero(~(mask & bits).astype(bool))[0]
        if targets.size == 0:
            continue
        cand = row[finite, None] + dist[np.ix_(np.nonzero(finite)[0], targets)]
        argmin = cand.argmin(axis=0)
        values = cand[argmin, np.arange(targets.size)]
        sources = np.nonzero(finite)[0][argmin]
        new_masks = mask | bits[targets]
        better = values < dp[new_masks, targets]
        dp[new_masks[better], targets[better]] = values[better]
        parent[new_masks[better], targets[better]] = sources[better]
    closing = dp[full - 1] + dist[:, 0]
    last = int(closing[1:].argmin()) + 1
    cost = float(closing[last])
    tour = [last]
    mask = full - 1
    while last != 0:
        prev = int(parent[mask, last])
        mask ^= 1 << last
        last = prev
        tour.append(last)
    tour.reverse()
    return ReferenceResult(cost, tuple(tour), "held_karp", True)


def _open_path_cost(dist: np.ndarray, nodes: tuple[int, ...]) -> tuple[float, tuple[int, ...]]:
    """Optimal depot->nodes->depot subtour by enumeration (small subsets)."""
    best = math.inf
    best_order = nodes
    for perm in itertools.permutations(nodes):
        if len(perm) > 1 and perm[0] > perm[-1]:
            continue
        cost = dist[0, perm[0]] + dist[perm[-1], 0]
        for a, b in zip(perm, perm[1:]):
            cost += dist[a, b]
        if cost < best:
            best = cost
            best_order = perm
    return best, best_order


def exact_cvrp_small(inst: Instance) -> ReferenceResult:
    """Optimal CVRP by set-partition DP over feasible customer subsets (n <= 8)."""
    n = inst.n
    if n > EXACT_CVRP_MAX:
        raise ConfigError(f"exact CVRP refuses n={n} > {EXACT_CVRP_MAX}")
    dist = _dist_matrix(inst.coords)
    demands = inst.demands
    full = 1 << n
    subset_cost = np.full(full, np.inf)
    subset_order: list[tuple[int, ...] | None] = [None] * full
    for mask in range(1, full):
        members = tuple(i + 1 for i in range(n) if mask >> i & 1)
        if sum(demands[m - 1] for m in members) > 1.0 + env.VALIDATE_EPS:
            continue
        subset_cost[mask], subset_order[mask] = _open_path_cost(dist, members)
    best = np.full(full, np.inf)
    choice = np.zeros(full, dtype=np.int64)
    best[0] = 0.0
    for mask in range(1, full):
        sub = mask
        while sub:
            if np.isfinite(subset_cost[sub]):
                cand = best[mask ^ sub] + subset_cost[sub]
                if cand < best[mask]:
                    best[mask] = cand
                    choice[mask] = sub
            sub = (sub - 1) & mask
    tour = [0]
    mask = full - 1
    while mask:
        sub = int(choice[mask])
        tour.extend(subset_order[sub])
        tour.append(0)
        mask ^= sub
    return ReferenceResult(float(best[full - 1]), tuple(tour), "held_karp", True)


# ---------------------------------------------------------------------------
# nearest neighbor + 2-opt


def _nn_tsp(dist: np.ndarray) -> list[int]:
    n = dist.shape[0]
    tour = [0]
    unvisited = set(range(1, n))
    while unvisited:
        cur = tour[-1]
        nxt = min(unvisited, key=lambda j: (dist[cur, j], j))
        tour.append(nxt)
        unvisited.remove(nxt)
    return tour


def _two_opt_cycle(tour: list[int], dist: np.ndarray) -> list[int]:
    """First-improvement 2-opt on a closed tour, fixed lexicographic scan."""
    n = len(tour)
    improved = True
    while improved:
        improved = False
        for i in range(n - 1):
            a, b = tour[i], tour[i + 1]
            for j in range(i + 2, n):
                if i == 0 and j == n - 1:
                    continue
                c, d = tour[j], tour[(j + 1) % n]
                delta = dist[a, c] + dist[b, d] - dist[a, b] - dist[c, d]
                if delta < -1e-12:
                    tour[i + 1:j + 1] = tour[i + 1:j + 1][::-1]
                    improved = True
                    a, b = tour[i], tour[i + 1]
    return tour


def _nn_cvrp(dist: np.ndarray, demands: np.ndarray) -> list[list[int]]:
    n = len(demands)
    unvisited = set(range(1, n + 1))
    subtours = []
    while unvisited:
        load = 0.0
        cur = 0
        subtour = []
        while True:
            feasible = [j for j in unvisited if load + demands[j - 1] <= 1.0 + env.CAP_EPS]
            if not feasible:
                break
            nxt = min(feasible, key=lambda j: (dist[cur, j], j))
            subtour.append(nxt)
            load += demands[nxt - 1]
            unvisited.remove(nxt)
            cur = nxt
        subtours.append(subtour)
    return subtours


def _two_opt_path(path: list[int], dist: np.ndarray) -> list[int]:
    """First-improvement 2-opt on a depot-anchored open path."""
    improved = True
    while improved:
        improved = False
        full = [0] + path + [0]
        for i in range(len(full) - 2):
            for j in range(i + 2, len(full) - 1):
                a, b, c, d = full[i], full[i + 1], full[j], full[j + 1]
                delta = dist[a, c] + dist[b, d] - dist[a, b] - dist[c, d]
                if delta < -1e-12:
                    full[i + 1:j + 1] = full[i + 1:j + 1][::-1]
                    improved = True
        path = full[1:-1]
    return path


def _relocate_between_subtours(subtours, dist, demands):
    """Move single customers between subtours while it strictly helps."""
    loads = [sum(demands[c - 1] for c in st) for st in subtours]
    improved = True
    while improved:
        improved = False
        for si in range(len(subtours)):
            for pos in range(len(subtours[si])):
                cust = subtours[si][pos]
                around = [0] + subtours[si] + [0]
                p = pos + 1
                remove_gain = (dist[around[p - 1], cust] + dist[cust, around[p + 1]]
                               - dist[around[p - 1], around[p + 1]])
                for sj in range(len(subtours)):
                    if sj == si:
                        continue
                    if loads[sj] + demands[cust - 1] > 1.0 + env.CAP_EPS:
                        continue
                    target = [0] + subtours[sj] + [0]
                    best_delta, best_at = 0.0, None
                    for q in range(len(target) - 1):
                        ins = (dist[target[q], cust] + dist[cust, target[q + 1]]
                               - dist[target[q], target[q + 1]])
                        delta = ins - remove_gain
                        if delta < -1e-12 and (best_at is None or delta < best_delta):
                            best_delta, best_at = delta, q
                    if best_at is not None:
                        subtours[si].pop(pos)
                        subtours[sj].insert(best_at, cust)
                        loads[si] -= demands[cust - 1]
                        loads[sj] += demands[cust - 1]
                        improved = True
                        break
                if improved:
                    break
            if improved:
                break
    return [st for st in subtours if st]


def nn_2opt(inst: Instance, construction_only: bool = False) -> ReferenceResult:
    """Nearest-neighbor construction plus first-improvement local search.

    TSP: 2-opt on the cycle. CVRP: 2-opt inside each subtour plus single
    customer relocation between subtours. Fully deterministic (ties break on
    the lower node index).
    """
    dist = _dist_matrix(inst.coords)
    if inst.problem == "TSP":
        tour = _nn_tsp(dist)
        if not construction_only:
            tour = _two_opt_cycle(tour, dist)
        return ReferenceResult(env.path_cost(inst.coords, tour, closed=True),
                               tuple(tour), "nn_2opt", False)
    subtours = _nn_cvrp(dist, inst.demands)
    if not construction_only:
        while True:
            subtours = [_two_opt_path(st, dist) for st in subtours]
            before = _flat_cost(subtours, dist)
            subtours = _relocate_between_subtours(subtours, dist, inst.demands)
            subtours = [_two_opt_path(st, dist) for st in subtours]
            if _flat_cost(subtours, dist) >= before - 1e-12:
                break
    tour = [0]
    for st in subtours:
        tour.extend(st)
        tour.append(0)
    return ReferenceResult(env.path_cost(inst.coords, tour, closed=False),
                           tuple(tour), "nn_2opt", False)


def _flat_cost(subtours, dist) -> float:
    total = 0.0
    for st in subtours:
        full = [0] + st + [0]
        for a, b in zip(full, full[1:]):
            total += dist[a, b]
    return total


def gap(model_cost: float, ref_cost: float) -> float:
    """(model - reference) / reference; negative when the model wins."""
    if ref_cost <= 0:
        raise ValueError(f"reference cost must be positive, got {ref_cost}")
    return (model_cost - ref_cost) / ref_cost


def reference_solve(inst: Instance) -> ReferenceResult:
    """Best available reference: exact when small, heuristic otherwise."""
    if inst.problem == "TSP" and inst.num_nodes <= 12:
        return held_karp_tsp(inst)
    if inst.problem == "CVRP" and inst.n <= EXACT_CVRP_MAX:
        return exact_cvrp_small(inst)
    return nn_2opt(inst)


def reference_costs(instances) -> np.ndarray:
    return np.array([reference_solve(inst).cost for inst in instances])


def load_reference_csv(path) -> dict[int, float]:
    """External reference costs keyed by instance seed (CSV: seed,cost)."""
    out: dict[int, float] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.reader(fh):
            if not row or row[0].strip().lower() == "seed":
                continue
            out[int(row[0])] = float(row[1])
    return out


def write_reference_cache(path, dataset_checksum: str, results) -> None:
    """Cache file: dataset_checksum, instance_index, method, cost."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["dataset_checksum", "instance_index", "method", "cost"])
        for i, res in enumerate(results):
            writer.writerow([dataset_checksum, i, res.method, repr(res.cost)])


def read_reference_cache(path, dataset_checksum: str) -> dict[int, float] | None:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except FileNotFoundError:
        return None
    out: dict[int, float] = {}
    for row in rows[1:]:
        if row and row[0] == dataset_checksum:
            out[int(row[1])] = float(row[3])
    return out or None
