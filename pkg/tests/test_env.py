import numpy as np
import pytest

from routemoe import env
from routemoe.errors import InfeasibleError, InvalidTourError
from routemoe.generate import DistributionSpec, Instance, generate_instance


def tsp(n, seed=0):
    return generate_instance(DistributionSpec("Uniform", n), "TSP", seed)


def cvrp(n, seed=0):
    return generate_instance(DistributionSpec("Uniform", n), "CVRP", seed)


def square_tsp():
    return Instance("TSP", np.array([[0.0, 0.0], [0.0, 1.0], [1.0, 1.0], [1.0, 0.0]]),
                    None, None, "Uniform", 0)


def test_fresh_tsp_mask_counts():
    inst = tsp(5)
    state = env.initial_state(inst, first_node=2)
    mask = env.feasible_mask(state, inst)
    assert mask.sum() == 4 and not mask[2]


def test_cvrp_zero_capacity_only_depot():
    inst = cvrp(5)
    state = env.initial_state(inst)
    state = env.step(state, 1, inst)
    state.remaining_capacity = 0.0
    mask = env.feasible_mask(state, inst)
    assert mask[0] and mask[1:].sum() == 0


def test_cvrp_depot_resets_capacity_and_customer_consumes():
    inst = cvrp(6, seed=3)
    state = env.initial_state(inst)
    state = env.step(state, 2, inst)
    assert state.remaining_capacity == pytest.approx(1.0 - inst.demands[1])
    state = env.step(state, 0, inst)
    assert state.remaining_capacity == 1.0
    assert not state.done


def test_cvrp_terminates_after_last_customer_then_depot():
    inst = cvrp(2, seed=1)
    state = env.initial_state(inst)
    state = env.step(state, 1, inst)
    state = env.step(state, 2, inst) if env.feasible_mask(state, inst)[2] else \
        env.step(env.step(state, 0, inst), 2, inst)
    state = env.step(state, 0, inst)
    assert state.done
    report = env.validate(inst, state.partial_tour)
    assert report.ok


def test_depot_depot_move_masked():
    inst = cvrp(4)
    state = env.initial_state(inst)
    assert not env.feasible_mask(state, inst)[0]
    state = env.step(state, 1, inst)
    state = env.step(state, 0, inst)
    assert not env.feasible_mask(state, inst)[0]


def test_infeasible_action_raises():
    inst = tsp(4)
    state = env.initial_state(inst, first_node=1)
    with pytest.raises(InfeasibleError):
        env.step(state, 1, inst)


def test_tour_cost_unit_square():
    assert env.tour_cost(square_tsp(), [0, 1, 2, 3]) == pytest.approx(4.0)


def test_tour_cost_single_customer_out_and_back():
    inst = Instance("CVRP", np.array([[0.2, 0.2], [0.2, 0.7]]), np.array([0.5]),
                    30.0, "Uniform", 0)
    assert env.tour_cost(inst, [0, 1, 0]) == pytest.approx(1.0)


def test_tour_cost_matches_pairwise_oracle():
    inst = tsp(7, seed=5)
    tour = list(np.random.default_rng(1).permutation(7))
    expected = sum(
        np.hypot(*(inst.coords[a] - inst.coords[b]))
        for a, b in zip(tour, tour[1:] + tour[:1])
    )
    assert abs(env.tour_cost(inst, tour) - expected) < 1e-12


def test_tour_cost_rotation_reversal_invariance():
    inst = tsp(6, seed=9)
    tour = [0, 3, 1, 5, 2, 4]
    base = env.tour_cost(inst, tour)
    assert abs(env.tour_cost(inst, tour[2:] + tour[:2]) - base) < 1e-12
    assert abs(env.tour_cost(inst, tour[::-1]) - base) < 1e-12


def test_tour_cost_rejects_bad_tour():
    with pytest.raises(InvalidTourError):
        env.tour_cost(square_tsp(), [0, 1, 2])


def test_validate_reports():
    inst = cvrp(3, seed=2)
    ok = env.validate(inst, [0, 1, 2, 3, 0])
    assert ok.ok
    missing = env.validate(inst, [0, 1, 3, 0])
    assert not missing.ok and any("missing node 2" in v for v in missing.violations)
    dup = env.validate(inst, [0, 1, 1, 2, 3, 0])
    assert not dup.ok and any("duplicate node 1" in v for v in dup.violations)
    overload = Instance("CVRP", inst.coords, np.array([0.7, 0.8, 0.9]), 10.0, "Uniform", 0)
    bad = env.validate(overload, [0, 1, 2, 3, 0])
    assert not bad.ok and any("capacity" in v and "subtour 0" in v for v in bad.violations)


def test_augment8_identity_involution_and_isometry():
    inst = cvrp(10, seed=4)
    variants = env.augment8(inst)
    assert len(variants) == 8
    assert np.array_equal(variants[0].coords, inst.coords)
    twice = env.augment8(variants[6])[6]
    np.testing.assert_allclose(twice.coords, inst.coords, atol=1e-15)
    tour = [0, 3, 1, 0, 2, 5, 4, 0, 6, 7, 8, 9, 10, 0]
    if env.validate(inst, tour).ok:
        costs = [env.tour_cost(v, tour) for v in variants]
        assert max(costs) - min(costs) < 1e-12


def test_augment8_fixed_tour_costs_agree_random():
    rng = np.random.default_rng(0)
    for seed in range(5):
        inst = tsp(8, seed=seed)
        tour = list(rng.permutation(8))
        costs = [env.tour_cost(v, tour) for v in env.augment8(inst)]
        assert max(costs) - min(costs) < 1e-12


def random_scalar_rollout(inst, rng):
    if inst.problem == "TSP":
        state = env.initial_state(inst, first_node=int(rng.integers(inst.num_nodes)))
    else:
        state = env.initial_state(inst)
        first = int(rng.integers(1, inst.num_nodes))
        state = env.step(state, first, inst)
    while not state.done:
        mask = env.feasible_mask(state, inst)
        choices = np.nonzero(mask)[0]
        state = env.step(state, int(rng.choice(choices)), inst)
    return state


@pytest.mark.parametrize("problem", ["TSP", "CVRP"])
def test_masking_closure_random_policies(problem):
    rng = np.random.default_rng(123)
    for seed in range(40):
        inst = generate_instance(DistributionSpec("Cluster", 8), problem, seed)
        state = random_scalar_rollout(inst, rng)
        assert env.validate(inst, state.partial_tour).ok


def test_batch_state_matches_scalar_reference():
    rng = np.random.default_rng(7)
    for problem in ("TSP", "CVRP"):
        insts = [generate_instance(DistributionSpec("Mixed", 7), problem, s) for s in range(3)]
        demands = np.stack([i.demands for i in insts]) if problem == "CVRP" else None
        batch = env.BatchState(problem, insts[0].num_nodes, 3, 2, demands)
        scalar = []
        firsts = rng.integers(1 if problem == "CVRP" else 0, insts[0].num_nodes, size=(3, 2))
        for b in range(3):
            row = []
            for s in range(2):
                if problem == "TSP":
                    row.append(env.initial_state(insts[b], first_node=int(firsts[b, s])))
                else:
                    row.append(env.step(env.initial_state(insts[b]), int(firsts[b, s]), insts[b]))
            scalar.append(row)
        batch.force_first(firsts)
        for _ in range(40):
            if batch.all_done():
                break
            mask = batch.feasible()
            actions = np.zeros((3, 2), dtype=np.int64)
            for b in range(3):
                for s in range(2):
                    st = scalar[b][s]
                    if st.done:
                        expected = np.zeros(insts[b].num_nodes, dtype=bool)
                        expected[0] = True
                        assert np.array_equal(mask[b, s], expected)
                        continue
                    assert np.array_equal(mask[b, s], env.feasible_mask(st, insts[b]))
                    choices = np.nonzero(mask[b, s])[0]
                    actions[b, s] = rng.choice(choices)
                    scalar[b][s] = env.step(st, int(actions[b, s]), insts[b])
            batch.apply(actions)
            for b in range(3):
                for s in range(2):
                    st = scalar[b][s]
                    assert batch.done[b, s] == st.done
                    if not st.done:
                        assert batch.current[b, s] == st.current
                        assert abs(batch.remaining[b, s] - st.remaining_capacity) < 1e-12
                        assert np.array_equal(batch.visited[b, s], st.visited)
        assert batch.all_done()
        tours = batch.tour_array()
        costs = env.batch_tour_costs(np.stack([i.coords for i in insts]), tours, problem)
        for b in range(3):
            for s in range(2):
                trimmed = [t for t in tours[b, s]]
                assert env.validate(insts[b], scalar[b][s].partial_tour).ok
                assert costs[b, s] == pytest.approx(
                    env.tour_cost(insts[b], scalar[b][s].partial_tour), abs=1e-9)


def test_write_tour_json(tmp_path):
    inst = tsp(4, seed=8)
    path = tmp_path / "tour.json"
    env.write_tour_json(path, inst, [0, 1, 2, 3], 3.21)
    import json
    data = json.loads(path.read_text())
    assert data == {"instance_seed": 8, "tour": [0, 1, 2, 3], "cost": 3.21}
