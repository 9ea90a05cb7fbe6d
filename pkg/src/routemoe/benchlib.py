"""TSPLIB / CVRPLIB ingestion and benchmark cost accounting.

Only EUC_2D instances are supported. Benchmark costs are reported with the
classic nearest-integer rounding on the original coordinates so gaps line up
with published optima, while the policy network consumes the min-max
normalized copy; the tour permutation transfers between the two.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ParseError, UnsupportedFormatError
from .generate import Instance


@dataclass(frozen=True)
class LibHeader:
    name: str
    type: str            # "TSP" or "CVRP"
    dimension: int
    edge_weight_type: str
    capacity: float | None = None


@dataclass(frozen=True)
class ScaleRecord:
    """Mapping from normalized back to original coordinates."""

    offset: tuple[float, float]
    scale: float


def euc2d_distance(a, b) -> int:
    """Rounded Euclidean edge length (nint rule: floor(d + 0.5))."""
    return int(math.floor(math.hypot(a[0] - b[0], a[1] - b[1]) + 0.5))


def _header_value(line: str) -> str:
    return line.split(":", 1)[1].strip()


def parse_lib(text: str):
    """Parse a TSPLIB/CVRPLIB document.

    Returns (header, coords, demands, depot_index) with node indices remapped
    so the depot (CVRP) occupies slot 0; depot_index is the depot's position
    in the file's own ordering (None for TSP). Raises ParseError with a line
    number on malformed sections.
    """
    name = ""
    ptype = None
    dimension = None
    ewt = None
    capacity = None
    coords: dict[int, tuple[float, float]] = {}
    demands: dict[int, float] = {}
    depot_ids: list[int] = []

    lines = text.splitlines()
    i = 0
    while i < len(lines):
        line = lines[i].strip()
        i += 1
        if not line or line == "EOF":
            continue
        upper = line.upper()
        if upper.startswith("NAME"):
            name = _header_value(line)
        elif upper.startswith("TYPE"):
            ptype = _header_value(line).upper()
        elif upper.startswith("DIMENSION"):
            dimension = int(_header_value(line))
        elif upper.startswith("EDGE_WEIGHT_TYPE"):
            ewt = _header_value(line).upper()
        elif upper.startswith("CAPACITY"):
            capacity = float(_header_value(line))
        elif upper.startswith("NODE_COORD_SECTION"):
            if dimension is None:
                raise ParseError(f"line {i}: NODE_COORD_SECTION before DIMENSION")
            for _ in range(dimension):
                if i >= len(lines) or len(lines[i].split()) < 3:
                    raise ParseError(f"line {i + 1}: coordinate section ended early "
                                     f"(expected {dimension} entries, got {len(coords)})")
                tok = lines[i].split()
                coords[int(tok[0])] = (float(tok[1]), float(tok[2]))
                i += 1
        elif upper.startswith("DEMAND_SECTION"):
            if dimension is None:
                raise ParseError(f"line {i}: DEMAND_SECTION before DIMENSION")
            for _ in range(dimension):
                if i >= len(lines) or len(lines[i].split()) < 2:
                    raise ParseError(f"line {i + 1}: demand section ended early "
                                     f"(expected {dimension} entries, got {len(demands)})")
                tok = lines[i].split()
                demands[int(tok[0])] = float(tok[1])
                i += 1
        elif upper.startswith("DEPOT_SECTION"):
            while i < len(lines):
                tok = lines[i].strip()
                i += 1
                if not tok:
                    continue
                val = int(tok.split()[0])
                if val == -1:
                    break
                depot_ids.append(val)
        # anything else (COMMENT, DISPLAY_DATA_TYPE, ...) is ignored

    if ptype not in ("TSP", "CVRP"):
        raise ParseError(f"unsupported or missing TYPE: {ptype!r}")
    if ewt != "EUC_2D":
        raise UnsupportedFormatError(f"unsupported EDGE_WEIGHT_TYPE: {ewt!r} (EUC_2D only)")
    if dimension is None or dimension < 2:
        raise ParseError(f"missing or invalid DIMENSION: {dimension!r}")
    if not coords:
        raise ParseError("missing NODE_COORD_SECTION")
    if len(coords) != dimension:
        raise ParseError(f"DIMENSION={dimension} but {len(coords)} coordinates parsed")

    order = sorted(coords)
    if ptype == "CVRP":
        if capacity is None or capacity <= 0:
            raise ParseError(f"CVRP requires positive CAPACITY, got {capacity!r}")
        if not demands:
            raise ParseError("CVRP requires DEMAND_SECTION")
        if len(demands) != dimension:
            raise ParseError(f"DIMENSION={dimension} but {len(demands)} demands parsed")
        depot_id = depot_ids[0] if depot_ids else order[0]
        depot_pos = order.index(depot_id)
        remapped = [depot_id] + [idx for idx in order if idx != depot_id]
        xy = np.array([coords[idx] for idx in remapped], dtype=np.float64)
        dem = np.array([demands[idx] for idx in remapped[1:]], dtype=np.float64)
        header = LibHeader(name, "CVRP", dimension, ewt, capacity)
        return header, xy, dem, depot_pos
    header = LibHeader(name, "TSP", dimension, ewt, None)
    xy = np.array([coords[idx] for idx in order], dtype=np.float64)
    return header, xy, None, None


def normalize_unit_square(raw: np.ndarray) -> tuple[np.ndarray, ScaleRecord]:
    """Aspect-preserving min-max scaling into [0,1]^2.

    Both axes are divided by the larger axis range and translated to start at
    0, so original tour lengths equal ``scale`` times normalized lengths.
    """
    raw = np.asarray(raw, dtype=np.float64)
    mins = raw.min(axis=0)
    span = float((raw.max(axis=0) - mins).max())
    if span == 0.0:
        raise ParseError("degenerate instance: all points identical")
    return (raw - mins) / span, ScaleRecord((float(mins[0]), float(mins[1])), span)


def to_instance(header: LibHeader, raw_coords: np.ndarray,
                raw_demands: np.ndarray | None) -> tuple[Instance, ScaleRecord]:
    """Normalized Instance (dist_label External) plus the scale record."""
    norm, record = normalize_unit_square(raw_coords)
    if header.type == "CVRP":
        inst = Instance("CVRP", norm, raw_demands / header.capacity, header.capacity,
                        "External", 0)
    else:
        inst = Instance("TSP", norm, None, None, "External", 0)
    return inst, record


def tour_cost_rounded(raw_coords: np.ndarray, tour, closed: bool) -> int:
    """Integer tour length under the nint rounding on original coordinates."""
    total = 0
    for a, b in zip(tour, tour[1:]):
        total += euc2d_distance(raw_coords[a], raw_coords[b])
    if closed and len(tour) > 1:
        total += euc2d_distance(raw_coords[tour[-1]], raw_coords[tour[0]])
    return total


def benchmark_gap(model_cost_raw: float, best_known: float) -> float:
    if best_known <= 0:
        raise ValueError(f"best_known must be positive, got {best_known}")
    return (model_cost_raw - best_known) / best_known
