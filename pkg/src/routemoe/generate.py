"""Synthetic TSP/CVRP instances on the unit square, seven spatial families.

Uniform, Cluster, and Mixed are the training distributions; Explosion,
Expansion, Grid, and Implosion are held-out mutations of a uniform base.
All randomness derives from a counter-based Philox generator split into
independent streams (base coordinates / family mutation / demands), so a
degenerate mutation reproduces the Uniform instance bit for bit and datasets
are reproducible across platforms.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

DIST_LABELS = ("Uniform", "Cluster", "Mixed", "Explosion", "Expansion", "Grid",
               "Implosion", "External")
TRAIN_LABELS = ("Uniform", "Cluster", "Mixed")

_STREAM_BASE = 0
_STREAM_FAMILY = 1
_STREAM_DEMAND = 2


def rng_stream(seed: int, *path: int) -> np.random.Generator:
    """Philox generator for an independent, reproducible stream."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=path)))


@dataclass(frozen=True)
class Instance:
    """One routing instance.

    coords live in [0,1]^2; for CVRP row 0 is the depot and ``demands`` holds
    the n customer demands normalized by the vehicle capacity (so the vehicle
    effectively has capacity 1). For TSP there is no depot row and demands is
    None.
    """

    problem: str
    coords: np.ndarray
    demands: np.ndarray | None
    capacity: float | None
    dist_label: str
    seed: int

    @property
    def n(self) -> int:
        """Number of customers."""
        return len(self.coords) - 1 if self.problem == "CVRP" else len(self.coords)

    @property
    def num_nodes(self) -> int:
        return len(self.coords)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Instance):
            return NotImplemented
        return (self.problem == other.problem
                and np.array_equal(self.coords, other.coords)
                and ((self.demands is None) == (other.demands is None))
                and (self.demands is None or np.array_equal(self.demands, other.demands))
                and self.capacity == other.capacity
                and self.dist_label == other.dist_label
                and self.seed == other.seed)


_FAMILY_DEFAULTS = {
    "Uniform": {},
    "Cluster": {"n_clusters_min": 3, "n_clusters_max": 8, "sigma": 0.07},
    "Mixed": {"n_clusters_min": 3, "n_clusters_max": 8, "sigma": 0.07},
    "Explosion": {"radius": 0.3, "rate": 10.0},
    "Expansion": {"push": 0.2},
    "Grid": {"snap_fraction": 0.7, "grid_size": None},
    "Implosion": {"radius": 0.3, "contraction": 0.25},
}


@dataclass
class DistributionSpec:
    """A family plus its parameters and the customer count."""

    family: str
    n: int
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.family not in _FAMILY_DEFAULTS:
            raise ConfigError(
                f"unknown family {self.family!r}; expected one of {sorted(_FAMILY_DEFAULTS)}")
        if self.n < 2:
            raise ConfigError(f"need at least 2 nodes, got n={self.n}")
        merged = dict(_FAMILY_DEFAULTS[self.family])
        unknown = set(self.params) - set(merged)
        if unknown:
            raise ConfigError(f"unknown params for {self.family}: {sorted(unknown)}")
        merged.update(self.params)
        self.params = merged
        self._validate()

    def _validate(self):
        p = self.params
        if "sigma" in p and not p["sigma"] > 0:
            raise ConfigError(f"sigma must be positive, got {p['sigma']}")
        if "n_clusters_min" in p:
            lo, hi = p["n_clusters_min"], p["n_clusters_max"]
            if not (isinstance(lo, int) and isinstance(hi, int) and 1 <= lo <= hi):
                raise ConfigError(f"bad cluster-count range [{lo}, {hi}]")
        # radius 0 is the degenerate no-op mutation, so the lower bound is inclusive
        if "radius" in p and not 0.0 <= p["radius"] <= 0.5:
            raise ConfigError(f"radius must be in [0, 0.5], got {p['radius']}")
        if "rate" in p and not p["rate"] > 0:
            raise ConfigError(f"rate must be positive, got {p['rate']}")
        if "contraction" in p and not 0.0 <= p["contraction"] < 1.0:
            raise ConfigError(f"contraction must be in [0, 1), got {p['contraction']}")
        if "push" in p and not p["push"] >= 0:
            raise ConfigError(f"push must be non-negative, got {p['push']}")
        if "snap_fraction" in p and not 0.0 <= p["snap_fraction"] <= 1.0:
            raise ConfigError(f"snap_fraction must be in [0, 1], got {p['snap_fraction']}")
        g = p.get("grid_size")
        if g is not None and not (isinstance(g, int) and g >= 2):
            raise ConfigError(f"grid_size must be an int >= 2, got {g}")


def _cluster_points(rng: np.random.Generator, n: int, params: dict):
    """Cluster recipe; returns (points, centers, assignment) for inspection."""
    n_c = int(rng.integers(params["n_clusters_min"], params["n_clusters_max"] + 1))
    centers = rng.random((n_c, 2))
    assignment = rng.integers(0, n_c, size=n)
    sigma = params["sigma"]
    points = np.empty((n, 2))
    for i in range(n):
        c = centers[assignment[i]]
        while True:
            p = c + rng.normal(0.0, sigma, size=2)
            if 0.0 <= p[0] <= 1.0 and 0.0 <= p[1] <= 1.0:
                points[i] = p
                break
    return points, centers, assignment


def _mutate_explosion(base, rng, params):
    c = rng.random(2)
    radius, rate = params["radius"], params["rate"]
    out = base.copy()
    for i in range(len(out)):
        p = out[i]
        while True:
            delta = p - c
            dist = math.hypot(delta[0], delta[1])
            if dist >= radius:
                out[i] = p
                break
            if dist == 0.0:
                p = rng.random(2)
                continue
            moved = c + (radius + rng.exponential(1.0 / rate)) * delta / dist
            if 0.0 <= moved[0] <= 1.0 and 0.0 <= moved[1] <= 1.0:
                out[i] = moved
                break
            p = rng.random(2)
    return out


def _mutate_implosion(base, rng, params):
    c = rng.random(2)
    radius, contraction = params["radius"], params["contraction"]
    out = base.copy()
    delta = out - c
    inside = np.hypot(delta[:, 0], delta[:, 1]) < radius
    out[inside] = c + contraction * delta[inside]
    return out


def _mutate_expansion(base, rng, params):
    c = rng.random(2)
    push = params["push"]
    out = base.copy()
    for i in range(len(out)):
        p = out[i]
        while True:
            delta = p - c
            dist = math.hypot(delta[0], delta[1])
            if dist == 0.0:
                p = rng.random(2)
                continue
            moved = c + min(1.0, dist + push) * delta / dist
            if 0.0 <= moved[0] <= 1.0 and 0.0 <= moved[1] <= 1.0:
                out[i] = moved
                break
            p = rng.random(2)
    return out


def _mutate_grid(base, rng, params, n):
    g = params["grid_size"] or math.ceil(math.sqrt(n))
    g = max(g, 2)
    snapped_count = int(round(params["snap_fraction"] * n))
    chosen = rng.permutation(n)[:snapped_count]
    out = base.copy()
    out[chosen] = np.round(out[chosen] * (g - 1)) / (g - 1)
    return out


def generate_coords(spec: DistributionSpec, seed: int) -> np.ndarray:
    """Customer coordinates for one instance of the requested family."""
    n = spec.n
    base_rng = rng_stream(seed, _STREAM_BASE)
    family_rng = rng_stream(seed, _STREAM_FAMILY)
    fam = spec.family
    if fam == "Cluster":
        return _cluster_points(family_rng, n, spec.params)[0]
    if fam == "Mixed":
        n_uniform = (n + 1) // 2
        uniform_part = base_rng.random((n_uniform, 2))
        cluster_part = _cluster_points(family_rng, n - n_uniform, spec.params)[0]
        combined = np.concatenate([uniform_part, cluster_part], axis=0)
        return combined[family_rng.permutation(n)]
    base = base_rng.random((n, 2))
    if fam == "Uniform":
        return base
    if fam == "Explosion":
        return _mutate_explosion(base, family_rng, spec.params)
    if fam == "Implosion":
        return _mutate_implosion(base, family_rng, spec.params)
    if fam == "Expansion":
        return _mutate_expansion(base, family_rng, spec.params)
    if fam == "Grid":
        return _mutate_grid(base, family_rng, spec.params, n)
    raise ConfigError(f"family {fam!r} has no generator")


def demand_profile(n: int):
    """Vehicle capacity and the integer demand sampler for n customers.

    Demands are uniform integers in {1..9}. Capacity is 30/40/50 at
    n = 20/50/100 and extends piecewise-linearly in between and beyond.
    """
    if n < 1:
        raise ConfigError(f"need at least one customer, got n={n}")
    knots_n = (20.0, 50.0, 100.0)
    knots_q = (30.0, 40.0, 50.0)
    if n <= knots_n[1]:
        lo, hi, qlo, qhi = knots_n[0], knots_n[1], knots_q[0], knots_q[1]
    else:
        lo, hi, qlo, qhi = knots_n[1], knots_n[2], knots_q[1], knots_q[2]
    capacity = qlo + (n - lo) * (qhi - qlo) / (hi - lo)

    def sampler(rng: np.random.Generator, count: int) -> np.ndarray:
        return rng.integers(1, 10, size=count).astype(np.float64)

    return capacity, sampler


def generate_instance(spec: DistributionSpec, problem: str, seed: int) -> Instance:
    """Deterministic instance for (spec, problem, seed)."""
    if problem not in ("TSP", "CVRP"):
        raise ConfigError(f"problem must be TSP or CVRP, got {problem!r}")
    customers = generate_coords(spec, seed)
    if problem == "TSP":
        return Instance("TSP", customers, None, None, spec.family, seed)
    depot = rng_stream(seed, _STREAM_DEMAND).random(2)
    capacity, sampler = demand_profile(spec.n)
    raw = sampler(rng_stream(seed, _STREAM_DEMAND, 1), spec.n)
    coords = np.concatenate([depot[None, :], customers], axis=0)
    return Instance("CVRP", coords, raw / capacity, capacity, spec.family, seed)


# ---------------------------------------------------------------------------
# JSONL dataset format


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def instance_to_json_line(inst: Instance) -> str:
    coords = ",".join(f"[{_fmt(x)},{_fmt(y)}]" for x, y in inst.coords)
    parts = [f'"problem":"{inst.problem}"', f'"n":{inst.n}', f'"coords":[{coords}]']
    if inst.demands is not None:
        parts.append('"demands":[' + ",".join(_fmt(d) for d in inst.demands) + "]")
    cap = "null" if inst.capacity is None else _fmt(inst.capacity)
    parts.append(f'"capacity":{cap}')
    parts.append(f'"dist_label":"{inst.dist_label}"')
    parts.append(f'"seed":{int(inst.seed)}')
    return "{" + ",".join(parts) + "}"


def instance_from_json(obj: dict) -> Instance:
    coords = np.asarray(obj["coords"], dtype=np.float64)
    demands = obj.get("demands")
    if demands is not None:
        demands = np.asarray(demands, dtype=np.float64)
    capacity = obj.get("capacity")
    return Instance(obj["problem"], coords, demands,
                    None if capacity is None else float(capacity),
                    obj["dist_label"], int(obj["seed"]))


def write_dataset(instances, path) -> str:
    """Write instances as JSONL; returns the sha256 checksum of the file."""
    digest = hashlib.sha256()
    with open(path, "w", encoding="utf-8") as fh:
        for inst in instances:
            line = instance_to_json_line(inst) + "\n"
            fh.write(line)
            digest.update(line.encode("utf-8"))
    return digest.hexdigest()


def read_dataset(path) -> list[Instance]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(instance_from_json(json.loads(line)))
    return out


def generate_dataset(spec: DistributionSpec, problem: str, count: int, seed: int,
                     path) -> tuple[int, str]:
    """Generate ``count`` instances (per-instance seeds seed..seed+count-1)
    and write them to ``path``. Returns (count, sha256 checksum)."""
    if count < 1:
        raise ConfigError(f"count must be >= 1, got {count}")
    insts = (generate_instance(spec, problem, seed + i) for i in range(count))
    checksum = write_dataset(insts, path)
    return count, checksum
