import networkx as nx
import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from src.config import SAMPLE_FREQ_COUNT
from src.decouple import (
    DecouplingError,
    build_working_set,
    closed_loop,
    closed_loop_partition,
    default_sample_points,
    friend_zero_pattern_ok,
    invariance_violations,
    load_solution,
    numeric_threshold,
    partition_nodes,
    prepare_system,
    save_solution,
    selection_matrix,
    sensor_set,
    solution_to_json,
    solve_ddp,
    solve_ddp_on_system,
    synthesize_friend,
    verify_numeric,
    verify_solution,
)
from src.netgraph import GraphError, InfeasiblePlacement, forward_reach
from src.oscillator import extended_graph
from src.sim import spectrum
from tests.conftest import first_order_system


@pytest.fixture
def toy_model(toy_case):
    return prepare_system(toy_case)


def dominant_matrix(rng: np.random.Generator, n: int, p: float = 0.3) -> np.ndarray:
    """Random sparse matrix with a strictly dominant negative diagonal."""
    A = rng.uniform(-2.0, 2.0, (n, n)) * (rng.random((n, n)) < p)
    np.fill_diagonal(A, 0.0)
    np.fill_diagonal(A, -(np.abs(A).sum(axis=1) + 1.0))
    return A


def test_toy_model_graph(toy_model):
    sys, g = toy_model.system, toy_model.graph
    assert sys.node_of_state == (4, 3, 1, 2)
    assert g.admissible == {1, 2, 4}
    assert sorted((t, h) for t, h, _ in g.edges) == [(1, 2), (2, 1), (2, 4), (3, 2), (3, 4), (4, 3)]


def test_connected_grid_reaches_every_node(toy_model):
    # symmetric line coupling plus the theta/omega pair of each generator;
    # a case that passes load_case never gives an unreachable target
    g = toy_model.graph
    assert nx.is_strongly_connected(g.digraph)
    assert all(forward_reach(g, {v}) == g.nodes for v in g.nodes)


def test_toy_solution(toy_case):
    solution = solve_ddp(toy_case, {1}, {4})
    assert solution.actuator_set == {2}
    assert solution.sensor_set == {1}
    assert solution.invariant_core == {1}
    assert solution.working_set == {1}
    assert solution.friend.shape == (1, 1)
    assert solution.friend[0, 0] > 0
    assert solution.report.verified
    assert solution.report.near_zero_modes == 0
    assert any("overlaps the disturbance set" in note for note in solution.report.notes)

    disturbed, decoupled = partition_nodes(solution)
    assert disturbed == {1}
    assert decoupled == {2, 3, 4}


def test_toy_direct_edge_is_infeasible(toy_model):
    with pytest.raises(InfeasiblePlacement) as info:
        solve_ddp_on_system(toy_model.system, toy_model.graph, {2}, {4})
    assert info.value.edge == (2, 4)


@pytest.mark.parametrize("d, t", [({3}, {4}), (set(), {4}), ({1}, set()), ({1, 4}, {4})])
def test_query_validation(toy_model, d, t):
    with pytest.raises(GraphError):
        solve_ddp_on_system(toy_model.system, toy_model.graph, d, t)


def test_unreachable_target_needs_no_feedback():
    A = np.array([
        [-3.0, 1.0, 0.0, 0.0],
        [1.0, -3.0, 0.0, 0.0],
        [0.0, 0.0, -3.0, 1.0],
        [0.0, 0.0, 1.0, -3.0],
    ])
    sys = first_order_system(A)
    solution = solve_ddp_on_system(sys, extended_graph(sys), {1}, {4})
    assert solution.actuator_set == frozenset()
    assert solution.sensor_set == frozenset()
    assert solution.friend.shape == (0, 0)
    assert_array_equal(solution.A_cl, A)
    assert solution.report.verified


def test_friend_and_closed_loop_on_chain():
    A = np.array([
        [-2.0, 0.5, 0.0],
        [1.5, -2.0, 0.5],
        [0.0, 0.7, -2.0],
    ])
    sys = first_order_system(A)
    G = synthesize_friend(sys, {2}, {1})
    assert_array_equal(G, [[1.5]])
    A_cl = closed_loop(sys, {2}, {1}, G)
    assert A_cl[1, 0] == 0.0
    assert friend_zero_pattern_ok(sys, A_cl, {2}, {1})
    assert not friend_zero_pattern_ok(sys, A, {2}, {1})

    with pytest.raises(DecouplingError):
        closed_loop(sys, {2}, {1}, G * 1.1)
    with pytest.raises(ValueError):
        closed_loop(sys, {2}, {1}, np.ones((2, 1)))
    with pytest.raises(ValueError):
        synthesize_friend(sys, {1, 2}, {1})


def test_perturbed_gain_fails_verification():
    A = np.array([
        [-2.0, 0.5, 0.0],
        [1.5, -2.0, 0.5],
        [0.0, 0.7, -2.0],
    ])
    sys = first_order_system(A)
    g = extended_graph(sys)
    good = verify_solution(sys, g, {1}, {3}, {2}, {1}, synthesize_friend(sys, {2}, {1}))
    assert good.verified
    bad = verify_solution(sys, g, {1}, {3}, {2}, {1}, np.array([[1.4]]))
    assert not bad.zero_pattern
    assert bad.structural
    assert bad.numeric_residual > bad.numeric_threshold
    assert not bad.verified


def test_selection_matrix_follows_node_order(toy_model):
    S = selection_matrix(toy_model.system, {4, 1})
    # node 1 sits in state row 2, node 4 in row 0
    assert S[2, 0] == 1.0
    assert S[0, 1] == 1.0
    assert S.sum() == 2.0


def test_working_set_preconditions(g5):
    assert build_working_set(g5, {1, 2, 3}, {1}, {5}) == {1, 2, 3}
    assert sensor_set(g5, {1, 2, 3}) == {3}
    with pytest.raises(GraphError):
        build_working_set(g5, {2, 3}, {1}, {5})
    with pytest.raises(GraphError):
        build_working_set(g5, {1, 2, 5}, {1}, {5})


def test_working_set_drops_dead_ends(g5_pendant):
    # node 6 hangs off the path and never reaches T
    assert build_working_set(g5_pendant, {1, 2, 3, 6}, {1}, {5}) == {1, 2, 3}


def test_sample_points():
    points = default_sample_points()
    assert points.size == SAMPLE_FREQ_COUNT + 5
    assert_allclose(points[:SAMPLE_FREQ_COUNT].real, 0.0)
    assert points[0].imag == pytest.approx(2 * np.pi * 0.01)
    assert points[SAMPLE_FREQ_COUNT - 1].imag == pytest.approx(2 * np.pi * 100)
    extra = points[SAMPLE_FREQ_COUNT:]
    assert ((extra.real >= 0.1) & (extra.real <= 10.0)).all()
    assert_array_equal(default_sample_points(), points)


def test_verify_numeric_resamples_at_poles():
    # s = 0 is an eigenvalue of (A, E)
    A = np.array([[0.0, 0.0], [1.0, -1.0]])
    sys = first_order_system(A)
    residual = verify_numeric(sys, A, {1}, {2}, sample_points=[0.0])
    assert np.isfinite(residual)
    assert residual > 0


@pytest.mark.slow
def test_structural_implies_numeric_on_random_systems():
    rng = np.random.default_rng(42)
    checked = 0
    for _ in range(500):
        n = int(rng.integers(3, 9))
        A = dominant_matrix(rng, n)
        sys = first_order_system(A)
        g = extended_graph(sys)
        perm = [int(v) + 1 for v in rng.permutation(n)]
        d, t = {perm[0]}, {perm[1]}
        try:
            solution = solve_ddp_on_system(sys, g, d, t)
        except InfeasiblePlacement:
            continue
        checked += 1
        report = solution.report
        assert report.structural
        assert report.zero_pattern
        assert report.numeric_residual <= numeric_threshold(sys)
        assert report.stable
        assert invariance_violations(sys, solution.A_cl, solution.working_set, t) == []
        disturbed, _ = closed_loop_partition(sys, solution.A_cl, d)
        assert not disturbed & t
    assert checked > 100


@pytest.mark.slow
def test_structural_check_on_random_sensor_sets():
    rng = np.random.default_rng(43)
    for _ in range(500):
        n = int(rng.integers(3, 9))
        A = dominant_matrix(rng, n, p=0.4)
        sys = first_order_system(A)
        g = extended_graph(sys)
        nodes = [int(v) + 1 for v in rng.permutation(n)]
        d, t = {nodes[0]}, {nodes[1]}
        b = {v for v in nodes[2:] if rng.random() < 0.5}
        c = {v for v in nodes if v not in b and rng.random() < 0.5}
        G = synthesize_friend(sys, b, c)
        report = verify_solution(sys, g, d, t, b, c, G)
        if report.structural:
            assert report.numeric_ok


def test_solution_file(tmp_path, toy_case):
    solution = solve_ddp(toy_case, {1}, {4})
    doc = solution_to_json(solution)
    assert doc["B"] == [2]
    assert doc["labels"]["B"] == ["phase_2"]
    assert doc["labels"]["T"] == ["freq_3"]
    assert doc["verification"]["verified"] is True

    path = tmp_path / "solution.json"
    save_solution(solution, path)
    stored = load_solution(path)
    assert stored.b == {2}
    assert stored.c == {1}
    assert_allclose(stored.friend, solution.friend)
    assert stored.feedback.gain.shape == (1, 1)


def test_load_solution_rejects_malformed(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{"B": [1, 2], "C": [3], "G": [1.0], "D": [4], "T": [5]}', encoding="utf-8")
    with pytest.raises(ValueError):
        load_solution(path)


@pytest.mark.slow
def test_new_england_placement(new_england_solution):
    solution = new_england_solution
    assert solution.actuator_set == {16}
    assert solution.sensor_set == {19, 21, 24}
    assert not solution.sensor_set & solution.disturbance_set
    assert_allclose(solution.friend.ravel(), [55.3272, 78.7903, 181.4040], rtol=5e-3)
    assert solution.labeling.node_label(16) == "phase_16"


@pytest.mark.slow
def test_new_england_flat_voltage_gain(new_england_case):
    # unit voltages only change line weights, so the gain stays near the full-data one
    solution = solve_ddp(new_england_case, {22, 44}, {40, 41}, flat_voltage=True)
    assert solution.actuator_set == {16}
    assert solution.sensor_set == {19, 21, 24}
    assert_allclose(solution.friend.ravel(), [55.3272, 78.7903, 181.4040], rtol=0.15)
    assert solution.report.verified


@pytest.mark.slow
def test_new_england_verification(new_england, new_england_solution):
    report = new_england_solution.report
    assert report.structural
    assert report.zero_pattern
    assert report.numeric_ok
    assert report.stable
    assert report.near_zero_modes == 0
    assert report.max_real < 0

    open_loop = spectrum(new_england.system, new_england.system.A_mat)
    assert open_loop.near_zero_modes == 1
    assert nx.is_strongly_connected(new_england.graph.digraph)


@pytest.mark.slow
def test_new_england_partition(new_england_solution):
    solution = new_england_solution
    disturbed, decoupled = partition_nodes(solution)
    assert {40, 41} <= decoupled
    assert {22, 44} <= disturbed
    assert invariance_violations(solution.system, solution.A_cl, solution.working_set, solution.target_set) == []
