import math
import runpy

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from scipy import linalg

from src.oscillator import (
    DescriptorSystem,
    Equilibrium,
    ModelError,
    NoConvergence,
    OscillatorNetwork,
    SingularDescriptor,
    assemble_descriptor,
    cohesive_margin,
    default_state_nodes,
    descriptor_system,
    equilibrium_state,
    extended_graph,
    linearize,
    nonlinear_rhs,
    power_mismatch,
    solve_equilibrium,
    sync_condition_check,
    sync_frequency,
)


def two_node(f=(1.0, -1.0), a=2.0, second_order=()):
    return OscillatorNetwork(
        coupling=np.array([[0.0, a], [a, 0.0]]),
        second_order=second_order,
        inertia=np.ones(len(second_order)),
        damping=np.ones(2),
        natural_freq=np.array(f),
    )


def random_network(rng: np.random.Generator) -> OscillatorNetwork:
    n = int(rng.integers(3, 8))
    upper = np.triu(rng.uniform(1.0, 3.0, (n, n)) * (rng.random((n, n)) < 0.4), 1)
    upper[np.arange(n - 1), np.arange(1, n)] = rng.uniform(1.0, 3.0, n - 1)
    r = int(rng.integers(0, n + 1))
    second = tuple(sorted(int(v) for v in rng.choice(n, size=r, replace=False)))
    return OscillatorNetwork(
        coupling=upper + upper.T,
        second_order=second,
        inertia=rng.uniform(0.1, 1.0, r),
        damping=rng.uniform(0.5, 2.0, n),
        natural_freq=rng.uniform(-0.3, 0.3, n),
    )


def test_sync_frequency():
    net = OscillatorNetwork(np.zeros((2, 2)), (), np.array([]), np.array([1.0, 3.0]), np.array([2.0, 2.0]))
    assert sync_frequency(net) == pytest.approx(1.0)


def test_network_validation():
    with pytest.raises(ModelError):
        OscillatorNetwork(np.array([[0.0, 1.0], [2.0, 0.0]]), (), [], np.ones(2), np.zeros(2))
    with pytest.raises(ModelError):
        OscillatorNetwork(np.array([[0.0, 1.0], [1.0, 0.0]]), (0,), [0.0], np.ones(2), np.zeros(2))
    with pytest.raises(ModelError):
        OscillatorNetwork(np.array([[0.0, 1.0], [1.0, 0.0]]), (), [], np.array([1.0, 0.0]), np.zeros(2))
    with pytest.raises(ModelError):
        OscillatorNetwork(np.array([[0.0, 1.0], [1.0, 0.0]]), (2,), [1.0], np.ones(2), np.zeros(2))


def test_two_node_equilibrium():
    eq = solve_equilibrium(two_node())
    assert eq.omega_star == pytest.approx(0.0)
    assert eq.theta_star[0] == 0.0
    assert eq.theta_star[1] == pytest.approx(-math.pi / 6, abs=1e-9)
    assert eq.residual <= 1e-10
    assert eq.cohesive
    assert eq.cohesive_margin == pytest.approx(math.pi / 6, abs=1e-9)
    assert_allclose(power_mismatch(two_node(), eq.theta_star, eq.omega_star), 0.0, atol=1e-10)


def test_equilibrium_without_locked_state():
    with pytest.raises(NoConvergence):
        solve_equilibrium(two_node(f=(2.0, -2.0), a=1.0))


def test_equilibrium_rejects_disconnected_coupling():
    net = OscillatorNetwork(np.zeros((2, 2)), (), [], np.ones(2), np.array([1.0, -1.0]))
    with pytest.raises(ModelError):
        solve_equilibrium(net)


def test_cohesive_flag():
    assert cohesive_margin(np.array([[0.0, 1.0], [1.0, 0.0]]), [0.0, 2.0]) == pytest.approx(2.0)
    eq = Equilibrium(np.array([0.0, 2.0]), 0.0, 0.0, 2.0)
    assert not eq.cohesive
    with pytest.raises(ModelError):
        linearize(two_node(), eq)


def test_sync_condition_two_nodes():
    ok, lhs = sync_condition_check(two_node())
    assert ok
    assert lhs == pytest.approx(0.5)

    ok, lhs = sync_condition_check(two_node(f=(3.0, -3.0), a=1.0))
    assert not ok
    assert lhs == pytest.approx(3.0)

    with pytest.raises(ModelError):
        sync_condition_check(two_node(), gamma=math.pi / 2)


def test_linearized_laplacian_properties():
    rng = np.random.default_rng(3)
    for _ in range(20):
        net = random_network(rng)
        eq = solve_equilibrium(net)
        A_tilde, K = linearize(net, eq)
        assert_allclose(K, K.T, atol=1e-12)
        assert_allclose(K.sum(axis=1), 0.0, atol=1e-12)
        assert linalg.eigvalsh(K)[0] >= -1e-10
        assert (A_tilde >= 0).all()


def test_assemble_descriptor_blocks():
    K = np.array([[1.0, -1.0], [-1.0, 1.0]])
    sys = assemble_descriptor(K, [2.0], [0.5], [3.0])
    assert_array_equal(sys.E, np.diag([2.0, 1.0, 3.0]))
    assert_array_equal(sys.A_mat, [[-0.5, -1.0, 1.0], [1.0, 0.0, 0.0], [0.0, 1.0, -1.0]])
    assert_array_equal(sys.B_full, [[1.0, 0.0], [0.0, 0.0], [0.0, 1.0]])
    assert (sys.n, sys.N) == (2, 3)

    g = extended_graph(sys)
    assert sorted((t, h) for t, h, _ in g.edges) == [(1, 2), (2, 1), (2, 3), (3, 1)]
    assert g.admissible == {1, 3}


def test_assemble_descriptor_rejects_singular_e():
    K = np.array([[1.0, -1.0], [-1.0, 1.0]])
    with pytest.raises(SingularDescriptor):
        assemble_descriptor(K, [0.0], [0.5], [3.0])
    with pytest.raises(SingularDescriptor):
        assemble_descriptor(K, [1.0], [0.5], [-1.0])


def test_descriptor_rejects_bad_ordering():
    with pytest.raises(ModelError):
        DescriptorSystem(np.eye(2), np.zeros((2, 2)), np.eye(2), 0, 2, (1, 1), ("a", "b"))


def test_state_nodes_follow_block_order():
    net = OscillatorNetwork(
        coupling=np.ones((3, 3)) - np.eye(3),
        second_order=(2,),
        inertia=[1.0],
        damping=np.ones(3),
        natural_freq=np.zeros(3),
    )
    nodes, labels = default_state_nodes(net)
    assert nodes == (4, 3, 1, 2)
    assert labels == ("freq_3", "phase_3", "phase_1", "phase_2")

    sys = descriptor_system(net, solve_equilibrium(net))
    assert sys.state_index(4) == 0
    assert sys.state_index(3) == 1
    assert list(sys.rows({2, 1})) == [2, 3]
    assert sys.label_of(4) == "freq_3"
    with pytest.raises(ModelError):
        sys.state_index(5)


def test_jacobian_matches_finite_differences():
    rng = np.random.default_rng(11)
    h = 1e-6
    for _ in range(20):
        net = random_network(rng)
        eq = solve_equilibrium(net)
        sys = descriptor_system(net, eq)
        x_star = equilibrium_state(net, eq)
        J = np.empty((sys.N, sys.N))
        for j in range(sys.N):
            step = np.zeros(sys.N)
            step[j] = h
            J[:, j] = (nonlinear_rhs(net, x_star + step) - nonlinear_rhs(net, x_star - step)) / (2 * h)
        assert np.abs(J - sys.A_mat).max() <= 1e-6


def test_frequency_rows_vanish_at_equilibrium():
    rng = np.random.default_rng(12)
    net = random_network(rng)
    eq = solve_equilibrium(net)
    F = nonlinear_rhs(net, equilibrium_state(net, eq))
    assert_allclose(F[:net.r], 0.0, atol=1e-9)
    assert_allclose(F[net.r:2 * net.r], eq.omega_star)


def test_linearized_spectrum_has_single_zero_mode():
    rng = np.random.default_rng(13)
    for _ in range(10):
        net = random_network(rng)
        sys = descriptor_system(net, solve_equilibrium(net))
        lam = linalg.eigvals(sys.A_mat, sys.E)
        near_zero = np.abs(lam) < 1e-8
        assert near_zero.sum() == 1
        assert (lam[~near_zero].real < 0).all()


def test_module_demo(capsys):
    runpy.run_module("src.oscillator", run_name="__main__")
    out = capsys.readouterr().out
    assert "Two-node phase-locked equilibrium" in out
    assert "N = 3, r = 1" in out
