import numpy as np
import pytest

from routemoe import benchlib as B
from routemoe.errors import ParseError, UnsupportedFormatError

TSP_3 = """NAME : tiny3
TYPE : TSP
DIMENSION : 3
EDGE_WEIGHT_TYPE : EUC_2D
NODE_COORD_SECTION
1 0.0 0.0
2 10.0 0.0
3 0.0 10.0
EOF
"""

CVRP_4 = """NAME : cv4
TYPE : CVRP
DIMENSION : 4
EDGE_WEIGHT_TYPE : EUC_2D
CAPACITY : 30
NODE_COORD_SECTION
1 5 5
2 0 0
3 10 0
4 10 10
DEMAND_SECTION
1 0
2 7
3 8
4 9
DEPOT_SECTION
1
-1
EOF
"""


def test_parse_tsp_coords_in_declared_order():
    header, coords, demands, depot = B.parse_lib(TSP_3)
    assert header.type == "TSP" and header.dimension == 3
    assert demands is None and depot is None
    np.testing.assert_array_equal(coords, [[0, 0], [10, 0], [0, 10]])


def test_parse_cvrp_capacity_and_depot_remap():
    header, coords, demands, depot_pos = B.parse_lib(CVRP_4)
    assert header.capacity == 30
    assert depot_pos == 0
    np.testing.assert_array_equal(coords[0], [5, 5])
    np.testing.assert_array_equal(demands, [7, 8, 9])


def test_parse_cvrp_nonfirst_depot_moves_to_slot_zero():
    text = CVRP_4.replace("DEPOT_SECTION\n1\n-1", "DEPOT_SECTION\n3\n-1")
    _, coords, demands, depot_pos = B.parse_lib(text)
    np.testing.assert_array_equal(coords[0], [10, 0])
    assert depot_pos == 2
    np.testing.assert_array_equal(demands, [0, 7, 9])


def test_parse_short_coord_section_errors_with_line():
    bad = TSP_3.replace("3 0.0 10.0\n", "")
    with pytest.raises(ParseError) as exc:
        B.parse_lib(bad)
    assert "line" in str(exc.value)


def test_parse_rejects_geo():
    with pytest.raises(UnsupportedFormatError):
        B.parse_lib(TSP_3.replace("EUC_2D", "GEO"))


def test_parse_serialize_parse_idempotent():
    _, coords, _, _ = B.parse_lib(TSP_3)
    section = "\n".join(f"{i + 1} {x:.17g} {y:.17g}" for i, (x, y) in enumerate(coords))
    rebuilt = TSP_3.split("NODE_COORD_SECTION")[0] + "NODE_COORD_SECTION\n" + section + "\nEOF\n"
    _, coords2, _, _ = B.parse_lib(rebuilt)
    np.testing.assert_array_equal(coords, coords2)


def test_euc2d_rounding():
    assert B.euc2d_distance((0, 0), (3, 4)) == 5
    assert B.euc2d_distance((0, 0), (1, 1)) == 1  # nint(1.41421) = 1
    assert B.euc2d_distance((2.5, 7.0), (2.5, 7.0)) == 0


def test_normalize_identity_when_already_unit():
    pts = np.array([[0.0, 0.0], [1.0, 0.25], [0.5, 1.0]])
    norm, rec = B.normalize_unit_square(pts)
    np.testing.assert_array_equal(norm, pts)
    assert rec.scale == 1.0


def test_normalize_scales_by_larger_axis():
    norm, rec = B.normalize_unit_square(np.array([[0.0, 0.0], [100.0, 50.0]]))
    np.testing.assert_allclose(norm, [[0, 0], [1, 0.5]])
    assert rec.scale == 100.0


def test_normalize_homogeneity_of_costs():
    rng = np.random.default_rng(2)
    raw = rng.uniform(-50, 400, size=(8, 2))
    norm, rec = B.normalize_unit_square(raw)
    tour = rng.permutation(8)
    raw_len = sum(np.hypot(*(raw[a] - raw[b])) for a, b in zip(tour, np.roll(tour, -1)))
    norm_len = sum(np.hypot(*(norm[a] - norm[b])) for a, b in zip(tour, np.roll(tour, -1)))
    np.testing.assert_allclose(raw_len, rec.scale * norm_len, rtol=1e-12)


def test_normalize_degenerate_rejected():
    with pytest.raises(ParseError):
        B.normalize_unit_square(np.array([[1.0, 1.0], [1.0, 1.0]]))


def test_tour_cost_rounded_square():
    pts = np.array([[0, 0], [0, 10], [10, 10], [10, 0]], dtype=float)
    assert B.tour_cost_rounded(pts, [0, 1, 2, 3], closed=True) == 40


def test_benchmark_gap_table_rows():
    assert B.benchmark_gap(21282, 21282) == 0.0
    assert abs(B.benchmark_gap(21285, 21282) - 0.000141) < 2e-6
    assert B.benchmark_gap(27591, 27591) == 0.0


def test_to_instance_normalizes_and_labels_external():
    header, coords, demands, _ = B.parse_lib(CVRP_4)
    inst, rec = B.to_instance(header, coords, demands)
    assert inst.dist_label == "External"
    assert inst.problem == "CVRP"
    assert (inst.coords >= 0).all() and (inst.coords <= 1).all()
    np.testing.assert_allclose(inst.demands, np.array([7, 8, 9]) / 30.0)
    assert rec.scale == 10.0
