import numpy as np
import pytest

from routemoe import generate as G
from routemoe.errors import ConfigError


def coords_of(family, n, seed, problem="TSP", **params):
    spec = G.DistributionSpec(family, n, dict(params))
    return G.generate_instance(spec, problem, seed).coords


@pytest.mark.parametrize("family", [f for f in G.DIST_LABELS if f != "External"])
@pytest.mark.parametrize("seed", [0, 1, 99])
def test_all_families_inside_unit_square_and_deterministic(family, seed):
    a = coords_of(family, 60, seed)
    b = coords_of(family, 60, seed)
    assert np.array_equal(a, b)
    assert a.shape == (60, 2)
    assert (a >= 0.0).all() and (a <= 1.0).all()


def test_uniform_same_seed_identical_bytes():
    spec = G.DistributionSpec("Uniform", 4)
    a = G.instance_to_json_line(G.generate_instance(spec, "TSP", 7))
    b = G.instance_to_json_line(G.generate_instance(spec, "TSP", 7))
    assert a == b


def test_cluster_points_near_centers():
    rng = G.rng_stream(5, 1)
    pts, centers, assignment = G._cluster_points(rng, 100, G._FAMILY_DEFAULTS["Cluster"])
    sigma = G._FAMILY_DEFAULTS["Cluster"]["sigma"]
    dist = np.hypot(*(pts - centers[assignment]).T)
    assert (dist <= 3 * sigma).mean() >= 0.80


def test_implosion_radius_zero_equals_uniform():
    uniform = coords_of("Uniform", 40, 123)
    degenerate = coords_of("Implosion", 40, 123, radius=0.0)
    assert np.array_equal(uniform, degenerate)


def test_implosion_contracts_points():
    base = coords_of("Uniform", 200, 11)
    imploded = coords_of("Implosion", 200, 11)
    moved = ~np.all(base == imploded, axis=1)
    assert moved.any()
    # every moved point ended strictly closer to the untouched ones' hull interior
    assert np.array_equal(base[~moved], imploded[~moved])


def test_explosion_clears_disk_around_center():
    spec = G.DistributionSpec("Explosion", 300)
    pts = G.generate_coords(spec, 42)
    base = coords_of("Uniform", 300, 42)
    moved = ~np.all(pts == base, axis=1)
    assert moved.any()


def test_mixed_split_counts():
    n = 31
    spec = G.DistributionSpec("Mixed", n)
    base = G.rng_stream(3, 0).random(((n + 1) // 2, 2))
    pts = G.generate_coords(spec, 3)
    # ceil(n/2) points are the base uniform draws, floor(n/2) come from clusters
    matches = sum(any(np.array_equal(p, b) for b in base) for p in pts)
    assert matches == (n + 1) // 2


def test_grid_points_on_lattice():
    n = 50
    g = int(np.ceil(np.sqrt(n)))
    pts = coords_of("Grid", n, 17)
    lattice = np.arange(g) / (g - 1)
    on_lattice = np.array([
        any(x == lx for lx in lattice) and any(y == ly for ly in lattice) for x, y in pts
    ])
    assert on_lattice.sum() == round(0.7 * n)


def test_demand_profile_knots_and_interpolation():
    assert G.demand_profile(20)[0] == 30.0
    assert G.demand_profile(50)[0] == 40.0
    assert G.demand_profile(100)[0] == 50.0
    assert G.demand_profile(35)[0] == 35.0
    assert G.demand_profile(75)[0] == 45.0
    with pytest.raises(ConfigError):
        G.demand_profile(0)


def test_demands_integer_one_to_nine_and_normalized():
    spec = G.DistributionSpec("Uniform", 50)
    inst = G.generate_instance(spec, "CVRP", 9)
    raw = inst.demands * inst.capacity
    assert inst.capacity == 40.0
    np.testing.assert_allclose(raw, np.round(raw), atol=1e-9)
    assert ((raw >= 1) & (raw <= 9)).all()
    assert ((inst.demands > 0) & (inst.demands <= 1)).all()


def test_cvrp_same_seed_same_demands():
    spec = G.DistributionSpec("Uniform", 20)
    a = G.generate_instance(spec, "CVRP", 4)
    b = G.generate_instance(spec, "CVRP", 4)
    assert np.array_equal(a.demands, b.demands)
    assert a.num_nodes == 21


def test_dataset_roundtrip_single_instance(tmp_path):
    spec = G.DistributionSpec("Cluster", 12)
    path = tmp_path / "one.jsonl"
    count, checksum = G.generate_dataset(spec, "CVRP", 1, 77, path)
    assert count == 1
    back = G.read_dataset(path)
    assert len(back) == 1
    assert back[0] == G.generate_instance(spec, "CVRP", 77)
    assert len(checksum) == 64


def test_dataset_line_count_and_seed_sensitivity(tmp_path):
    spec = G.DistributionSpec("Uniform", 5)
    p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    _, c1 = G.generate_dataset(spec, "TSP", 50, 0, p1)
    _, c2 = G.generate_dataset(spec, "TSP", 50, 1, p2)
    assert len(p1.read_text().splitlines()) == 50
    assert c1 != c2


def test_spec_validation_errors():
    with pytest.raises(ConfigError):
        G.DistributionSpec("Donut", 10)
    with pytest.raises(ConfigError):
        G.DistributionSpec("Uniform", 1)
    with pytest.raises(ConfigError):
        G.DistributionSpec("Cluster", 10, {"sigma": 0.0})
    with pytest.raises(ConfigError):
        G.DistributionSpec("Implosion", 10, {"radius": 0.6})
    with pytest.raises(ConfigError):
        G.DistributionSpec("Grid", 10, {"snap_fraction": 1.5})
    with pytest.raises(ConfigError):
        G.DistributionSpec("Uniform", 10, {"sigma": 1.0})
