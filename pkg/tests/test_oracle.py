import numpy as np
import pytest

from routemoe import env, oracle
from routemoe.errors import ConfigError
from routemoe.generate import DistributionSpec, Instance, generate_instance


def tsp(n, seed):
    return generate_instance(DistributionSpec("Uniform", n), "TSP", seed)


def cvrp(n, seed):
    return generate_instance(DistributionSpec("Uniform", n), "CVRP", seed)


def test_brute_force_triangle():
    inst = Instance("TSP", np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]), None, None,
                    "Uniform", 0)
    res = oracle.brute_force_tsp(inst)
    assert res.cost == pytest.approx(2 + np.sqrt(2))
    assert res.exact


def test_brute_force_square():
    inst = Instance("TSP", np.array([[0.0, 0.0], [1.0, 1.0], [0.0, 1.0], [1.0, 0.0]]),
                    None, None, "Uniform", 0)
    assert oracle.brute_force_tsp(inst).cost == pytest.approx(4.0)


def test_brute_force_refuses_large():
    with pytest.raises(ConfigError):
        oracle.brute_force_tsp(tsp(10, 0))


def test_held_karp_collinear():
    pts = np.array([[0.1, 0.5], [0.4, 0.5], [0.25, 0.5], [0.9, 0.5], [0.6, 0.5]])
    inst = Instance("TSP", pts, None, None, "Uniform", 0)
    res = oracle.held_karp_tsp(inst)
    assert res.cost == pytest.approx(2 * 0.8)


@pytest.mark.parametrize("seed", range(25))
def test_held_karp_matches_brute_force(seed):
    inst = tsp(8, seed)
    hk = oracle.held_karp_tsp(inst)
    bf = oracle.brute_force_tsp(inst)
    assert abs(hk.cost - bf.cost) < 1e-9
    assert env.validate(inst, hk.tour).ok
    assert abs(env.tour_cost(inst, list(hk.tour)) - hk.cost) < 1e-9


def test_held_karp_n13_under_a_second():
    import time
    inst = tsp(13, 3)
    t0 = time.monotonic()
    res = oracle.held_karp_tsp(inst)
    assert time.monotonic() - t0 < 1.0
    assert env.validate(inst, res.tour).ok


def test_exact_cvrp_single_customer():
    inst = Instance("CVRP", np.array([[0.5, 0.5], [0.5, 0.9]]), np.array([0.4]),
                    30.0, "Uniform", 0)
    res = oracle.exact_cvrp_small(inst)
    assert res.cost == pytest.approx(0.8)
    assert res.tour == (0, 1, 0)


def test_exact_cvrp_forced_split_when_demands_fill_vehicle():
    inst = Instance("CVRP", np.array([[0.5, 0.5], [0.2, 0.5], [0.8, 0.5]]),
                    np.array([1.0, 1.0]), 30.0, "Uniform", 0)
    res = oracle.exact_cvrp_small(inst)
    assert res.cost == pytest.approx(2 * 0.3 + 2 * 0.3)
    assert env.validate(inst, res.tour).ok


@pytest.mark.parametrize("seed", range(10))
def test_exact_cvrp_beats_heuristic(seed):
    inst = cvrp(6, seed)
    exact = oracle.exact_cvrp_small(inst)
    heur = oracle.nn_2opt(inst)
    assert env.validate(inst, exact.tour).ok
    assert env.validate(inst, heur.tour).ok
    assert exact.cost <= heur.cost + 1e-9


@pytest.mark.parametrize("problem", ["TSP", "CVRP"])
@pytest.mark.parametrize("seed", range(5))
def test_nn_2opt_validates_and_improves_on_construction(problem, seed):
    inst = generate_instance(DistributionSpec("Cluster", 30), problem, seed)
    construction = oracle.nn_2opt(inst, construction_only=True)
    improved = oracle.nn_2opt(inst)
    assert env.validate(inst, construction.tour).ok
    assert env.validate(inst, improved.tour).ok
    assert improved.cost <= construction.cost + 1e-12
    assert not improved.exact


def test_nn_2opt_deterministic():
    inst = tsp(40, 11)
    a = oracle.nn_2opt(inst)
    b = oracle.nn_2opt(inst)
    assert a.tour == b.tour and a.cost == b.cost


def test_gap_values():
    assert oracle.gap(10.0, 10.0) == 0.0
    assert oracle.gap(15.81, 15.68) == pytest.approx(0.00829, abs=2e-4)
    assert oracle.gap(9.0, 10.0) < 0
    with pytest.raises(ValueError):
        oracle.gap(1.0, 0.0)


def test_reference_solve_dispatch():
    assert oracle.reference_solve(tsp(8, 0)).method == "held_karp"
    assert oracle.reference_solve(tsp(20, 0)).method == "nn_2opt"
    assert oracle.reference_solve(cvrp(6, 0)).exact
    assert not oracle.reference_solve(cvrp(15, 0)).exact


def test_reference_csv_roundtrip(tmp_path):
    path = tmp_path / "refs.csv"
    results = [oracle.reference_solve(tsp(6, s)) for s in range(3)]
    oracle.write_reference_cache(path, "abc123", results)
    cached = oracle.read_reference_cache(path, "abc123")
    assert cached == {i: results[i].cost for i in range(3)}
    assert oracle.read_reference_cache(path, "zzz") is None
    ext = tmp_path / "ext.csv"
    ext.write_text("seed,cost\n5,1.25\n9,2.5\n")
    assert oracle.load_reference_csv(ext) == {5: 1.25, 9: 2.5}
