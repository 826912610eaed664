import math
from dataclasses import dataclass
from functools import cached_property

import networkx as nx
import numpy as np
from scipy import linalg

from src.config import EQUILIBRIUM_MAX_ITER, EQUILIBRIUM_TOL, MIN_NEWTON_STEP, DEFAULT_GAMMA, PSD_TOL
from src.netgraph import InfluenceGraph, laplacian_from_adjacency


class ModelError(ValueError):
    pass


class SingularDescriptor(ModelError):
    pass


class NoConvergence(RuntimeError):
    pass


class NotCohesive(RuntimeError):
    """Newton converged, but some coupled pair sits at or beyond a quarter turn."""

    def __init__(self, message: str, equilibrium: "Equilibrium"):
        super().__init__(message)
        self.equilibrium = equilibrium


@dataclass(frozen=True, eq=False)
class OscillatorNetwork:
    """
    Mixed first/second-order oscillator network

        M_i theta_i'' + D_i theta_i' = f_i - sum_j a_ij sin(theta_i - theta_j)   (i second order)
        D_i theta_i' = f_i - sum_j a_ij sin(theta_i - theta_j)                  (i first order)

    Node positions are 0-based; `inertia` is ordered like `second_order`.
    """
    coupling: np.ndarray
    second_order: tuple[int, ...]
    inertia: np.ndarray
    damping: np.ndarray
    natural_freq: np.ndarray

    def __post_init__(self):
        A = np.asarray(self.coupling, dtype=float)
        if A.ndim != 2 or A.shape[0] != A.shape[1] or A.shape[0] < 1:
            raise ModelError(f"Coupling must be a non-empty square matrix, got shape {A.shape}")
        n = A.shape[0]
        if not np.allclose(A, A.T, rtol=0.0, atol=1e-12 * max(1.0, np.abs(A).max())):
            raise ModelError("Coupling matrix is not symmetric")
        if (A < 0).any() or np.any(np.diag(A) != 0):
            raise ModelError("Coupling must be nonnegative with a zero diagonal")

        second = tuple(int(i) for i in self.second_order)
        if len(set(second)) != len(second) or any(not 0 <= i < n for i in second):
            raise ModelError(f"Invalid second-order node positions: {second}")

        M = np.asarray(self.inertia, dtype=float).reshape(-1)
        D = np.asarray(self.damping, dtype=float).reshape(-1)
        f = np.asarray(self.natural_freq, dtype=float).reshape(-1)
        if M.shape != (len(second),):
            raise ModelError(f"Expected {len(second)} inertia values, got {M.shape[0]}")
        if D.shape != (n,) or f.shape != (n,):
            raise ModelError(f"Damping and natural frequencies need {n} entries each")
        if (M <= 0).any():
            raise ModelError("Inertia must be strictly positive")
        if (D <= 0).any():
            raise ModelError("Damping must be strictly positive")

        object.__setattr__(self, "coupling", A)
        object.__setattr__(self, "second_order", second)
        object.__setattr__(self, "inertia", M)
        object.__setattr__(self, "damping", D)
        object.__setattr__(self, "natural_freq", f)

    @property
    def n(self) -> int:
        return self.coupling.shape[0]

    @property
    def r(self) -> int:
        return len(self.second_order)

    @property
    def k(self) -> int:
        return self.n - self.r

    @cached_property
    def first_order(self) -> tuple[int, ...]:
        second = set(self.second_order)
        return tuple(i for i in range(self.n) if i not in second)

    @property
    def block_order(self) -> tuple[int, ...]:
        """Node positions with the second-order block first."""
        return self.second_order + self.first_order


@dataclass(frozen=True, eq=False)
class Equilibrium:
    theta_star: np.ndarray
    omega_star: float
    residual: float
    cohesive_margin: float
    iterations: int = 0

    @property
    def cohesive(self) -> bool:
        return self.cohesive_margin < math.pi / 2


def sync_frequency(net: OscillatorNetwork) -> float:
    total = float(net.damping.sum())
    if total <= 0:
        raise ModelError("Total damping must be positive")
    return float(net.natural_freq.sum()) / total


def _phase_differences(theta: np.ndarray) -> np.ndarray:
    return theta[:, None] - theta[None, :]


def power_mismatch(net: OscillatorNetwork, theta, omega: float) -> np.ndarray:
    """f_i - D_i omega - sum_j a_ij sin(theta_i - theta_j) for every node."""
    theta = np.asarray(theta, dtype=float)
    flows = (net.coupling * np.sin(_phase_differences(theta))).sum(axis=1)
    return net.natural_freq - net.damping * omega - flows


def _cosine_laplacian(A: np.ndarray, theta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    A_tilde = A * np.cos(_phase_differences(theta))
    K = np.diag(A_tilde.sum(axis=1)) - A_tilde
    return A_tilde, K


def cohesive_margin(A: np.ndarray, theta) -> float:
    theta = np.asarray(theta, dtype=float)
    rows, cols = np.nonzero(np.triu(A, 1))
    if rows.size == 0:
        return 0.0
    return float(np.abs(theta[rows] - theta[cols]).max())


def is_connected(A: np.ndarray) -> bool:
    if A.shape[0] == 1:
        return True
    return nx.is_connected(nx.from_numpy_array(A))


def solve_equilibrium(net: OscillatorNetwork, tol: float = EQUILIBRIUM_TOL,
                      max_iter: int = EQUILIBRIUM_MAX_ITER) -> Equilibrium:
    """
    Phase-locked equilibrium by damped Newton from a flat start.

    The gauge is fixed with theta_1 = 0, so Newton runs on the reduced n-1
    unknowns where the Jacobian -K(theta) is nonsingular for a connected graph.
    """
    if not is_connected(net.coupling):
        raise ModelError("Coupling graph is not connected")

    omega = sync_frequency(net)
    theta = np.zeros(net.n)
    F = power_mismatch(net, theta, omega)
    residual = float(np.abs(F).max())
    iterations = 0

    while residual > tol and iterations < max_iter:
        iterations += 1
        _, K = _cosine_laplacian(net.coupling, theta)
        try:
            delta = linalg.solve(-K[1:, 1:], -F[1:])
        except (linalg.LinAlgError, ValueError) as exc:
            raise NoConvergence(f"Singular Newton Jacobian at iteration {iterations}: {exc}") from exc

        step = 1.0
        while step >= MIN_NEWTON_STEP:
            trial = theta.copy()
            trial[1:] += step * delta
            F_trial = power_mismatch(net, trial, omega)
            trial_residual = float(np.abs(F_trial).max())
            if trial_residual < residual:
                theta, F, residual = trial, F_trial, trial_residual
                break
            step /= 2
        else:
            raise NoConvergence(
                f"Damped Newton stalled at iteration {iterations} with residual {residual:.3e}"
            )

    if residual > tol:
        raise NoConvergence(f"Residual {residual:.3e} above {tol:.1e} after {max_iter} iterations")

    eq = Equilibrium(
        theta_star=theta,
        omega_star=omega,
        residual=residual,
        cohesive_margin=cohesive_margin(net.coupling, theta),
        iterations=iterations,
    )
    if not eq.cohesive:
        raise NotCohesive(
            f"Equilibrium found but the largest edge phase gap {eq.cohesive_margin:.4f} rad is not below pi/2",
            eq,
        )
    return eq


def sync_condition_check(net: OscillatorNetwork, gamma: float = DEFAULT_GAMMA) -> tuple[bool, float]:
    """Sufficient condition ||Delta^T L^+ beta||_inf <= sin(gamma) for a cohesive locked state."""
    if not 0 <= gamma < math.pi / 2:
        raise ModelError(f"gamma must lie in [0, pi/2), got {gamma}")
    L, Delta, _ = laplacian_from_adjacency(net.coupling)
    if net.n > 1 and np.linalg.matrix_rank(L) < net.n - 1:
        raise ModelError("Coupling graph is not connected")

    beta = net.natural_freq - net.damping * sync_frequency(net)
    if Delta.shape[1] == 0:
        return True, 0.0
    lhs = float(np.abs(Delta.T @ linalg.pinv(L) @ beta).max())
    return lhs <= math.sin(gamma), lhs


def linearize(net: OscillatorNetwork, eq: Equilibrium) -> tuple[np.ndarray, np.ndarray]:
    """Return (A_tilde, K) with a~_ij = a_ij cos(theta*_i - theta*_j) and K its Laplacian."""
    if not eq.cohesive:
        raise ModelError("Linearization needs a cohesive equilibrium")
    A_tilde, K = _cosine_laplacian(net.coupling, np.asarray(eq.theta_star, dtype=float))
    scale = max(1.0, float(np.abs(K).max()))
    if net.n > 1 and linalg.eigvalsh(K)[0] < PSD_TOL * scale:
        raise ModelError("Linearized coupling is not positive semi-definite")
    return A_tilde, K


@dataclass(frozen=True, eq=False)
class DescriptorSystem:
    """
    E x' = A_mat x + B_full u with states in block order
    [omega (second order), theta (second order), theta (first order)].

    node_of_state[i] is the 1-based extended-graph node of state row i.
    """
    E: np.ndarray
    A_mat: np.ndarray
    B_full: np.ndarray
    r: int
    k: int
    node_of_state: tuple[int, ...]
    labels: tuple[str, ...]

    def __post_init__(self):
        N = 2 * self.r + self.k
        if self.E.shape != (N, N) or self.A_mat.shape != (N, N):
            raise ModelError(f"E and A_mat must be {N}x{N}")
        if self.B_full.shape != (N, self.r + self.k):
            raise ModelError(f"B_full must be {N}x{self.r + self.k}")
        if sorted(self.node_of_state) != list(range(1, N + 1)):
            raise ModelError("node_of_state must be a permutation of 1..N")
        if len(self.labels) != N:
            raise ModelError(f"Expected {N} state labels, got {len(self.labels)}")

    @property
    def n(self) -> int:
        return self.r + self.k

    @property
    def N(self) -> int:
        return 2 * self.r + self.k

    @cached_property
    def _row_of_node(self) -> dict[int, int]:
        return {node: row for row, node in enumerate(self.node_of_state)}

    def state_index(self, node: int) -> int:
        """0-based state row of an extended-graph node."""
        try:
            return self._row_of_node[int(node)]
        except KeyError:
            raise ModelError(f"Node {node} outside 1..{self.N}") from None

    def rows(self, nodes) -> np.ndarray:
        """State rows for nodes, in ascending node order."""
        return np.array([self.state_index(v) for v in sorted(nodes)], dtype=int)

    def label_of(self, node: int) -> str:
        return self.labels[self.state_index(node)]

    @property
    def frequency_rows(self) -> np.ndarray:
        return np.arange(self.r)

    @property
    def phase_rows(self) -> np.ndarray:
        return np.arange(self.r, self.N)


def default_state_nodes(net: OscillatorNetwork) -> tuple[tuple[int, ...], tuple[str, ...]]:
    """Phase of node position p is node p+1; the g-th second-order frequency is node n+g+1."""
    freq_nodes = tuple(net.n + g + 1 for g in range(net.r))
    phase_nodes = tuple(p + 1 for p in net.block_order)
    labels = tuple(f"freq_{p + 1}" for p in net.second_order) + tuple(f"phase_{p + 1}" for p in net.block_order)
    return freq_nodes + phase_nodes, labels


def assemble_descriptor(K, M, D_v1, D_v2, ordering=None, labels=None) -> DescriptorSystem:
    """
    E = blockdiag(M, I_r, D_v2) and

        A_mat = [[-D_v1, -K_a,   -K_b],
                 [ I_r,   0,      0  ],
                 [ 0,    -K_b^T, -K_c]]

    with K already partitioned second-order first.
    """
    K = np.asarray(K, dtype=float)
    M = np.asarray(M, dtype=float).reshape(-1)
    D_v1 = np.asarray(D_v1, dtype=float).reshape(-1)
    D_v2 = np.asarray(D_v2, dtype=float).reshape(-1)
    r, k = M.size, D_v2.size
    n = r + k
    if D_v1.size != r:
        raise ModelError(f"Expected {r} second-order damping values, got {D_v1.size}")
    if K.shape != (n, n):
        raise ModelError(f"K must be {n}x{n}, got {K.shape}")
    for name, values in (("M", M), ("D_v1", D_v1), ("D_v2", D_v2)):
        if (values <= 0).any():
            raise SingularDescriptor(f"{name} has a nonpositive diagonal entry")

    N = 2 * r + k
    E = np.diag(np.concatenate([M, np.ones(r), D_v2]))
    A_mat = np.zeros((N, N))
    K_a, K_b, K_c = K[:r, :r], K[:r, r:], K[r:, r:]
    A_mat[:r, :r] = -np.diag(D_v1)
    A_mat[:r, r:2 * r] = -K_a
    A_mat[:r, 2 * r:] = -K_b
    A_mat[r:2 * r, :r] = np.eye(r)
    A_mat[2 * r:, r:2 * r] = -K_b.T
    A_mat[2 * r:, 2 * r:] = -K_c

    B_full = np.zeros((N, n))
    B_full[:r, :r] = np.eye(r)
    B_full[2 * r:, r:] = np.eye(k)

    if ordering is None:
        ordering = tuple(range(1, N + 1))
    if labels is None:
        labels = tuple(f"x_{i}" for i in ordering)
    return DescriptorSystem(E, A_mat, B_full, r, k, tuple(int(v) for v in ordering), tuple(labels))


def descriptor_system(net: OscillatorNetwork, eq: Equilibrium, ordering=None, labels=None) -> DescriptorSystem:
    _, K = linearize(net, eq)
    idx = list(net.block_order)
    default_ordering, default_labels = default_state_nodes(net)
    return assemble_descriptor(
        K[np.ix_(idx, idx)],
        net.inertia,
        net.damping[list(net.second_order)],
        net.damping[list(net.first_order)],
        ordering=default_ordering if ordering is None else ordering,
        labels=default_labels if labels is None else labels,
    )


def node_matrix(sys: DescriptorSystem, state_matrix) -> np.ndarray:
    """Re-index an N x N state-row matrix by 1-based node (entry [node-1, node-1])."""
    perm = np.asarray(sys.node_of_state) - 1
    out = np.zeros((sys.N, sys.N))
    out[np.ix_(perm, perm)] = state_matrix
    return out


def extended_graph(sys: DescriptorSystem, state_matrix=None) -> InfluenceGraph:
    """
    One node per state, edge (i, j) per off-diagonal nonzero A[j, i]. Inputs
    enter through rows of B_full holding an identity entry; those nodes are
    the admissible actuator locations.
    """
    A = sys.A_mat if state_matrix is None else state_matrix
    admissible = [sys.node_of_state[row] for row in np.flatnonzero(sys.B_full.any(axis=1))]
    labels = [""] * sys.N
    for row, node in enumerate(sys.node_of_state):
        labels[node - 1] = sys.labels[row]
    return InfluenceGraph.from_matrix(node_matrix(sys, A), admissible=admissible, labels=labels)


def equilibrium_state(net: OscillatorNetwork, eq: Equilibrium) -> np.ndarray:
    """Block-ordered state vector of the locked solution."""
    theta = np.asarray(eq.theta_star, dtype=float)
    return np.concatenate([
        np.full(net.r, eq.omega_star),
        theta[list(net.second_order)],
        theta[list(net.first_order)],
    ])


def nonlinear_rhs(net: OscillatorNetwork, x) -> np.ndarray:
    """
    Right-hand side F(x) of the nonlinear model E x' = F(x), state in block order.
    Its Jacobian at the locked solution is A_mat.
    """
    x = np.asarray(x, dtype=float)
    r = net.r
    if x.shape != (2 * r + net.k,):
        raise ModelError(f"State must have {2 * r + net.k} entries, got {x.shape}")
    omega = x[:r]
    theta = np.empty(net.n)
    theta[list(net.block_order)] = x[r:]
    flows = (net.coupling * np.sin(_phase_differences(theta))).sum(axis=1)

    second, first = list(net.second_order), list(net.first_order)
    return np.concatenate([
        net.natural_freq[second] - net.damping[second] * omega - flows[second],
        omega,
        net.natural_freq[first] - flows[first],
    ])


if __name__ == "__main__":
    # one swing-equation node feeding one load node through a unit line
    demo = OscillatorNetwork(
        coupling=np.array([[0.0, 1.0], [1.0, 0.0]]),
        second_order=(0,),
        inertia=np.array([0.1]),
        damping=np.array([1.0, 1.0]),
        natural_freq=np.array([0.5, -0.5]),
    )
    print("Two-node phase-locked equilibrium")
    print("=" * 50)
    eq = solve_equilibrium(demo)
    print(f"theta* = {np.round(eq.theta_star, 6).tolist()} rad after {eq.iterations} iterations")
    print(f"Residual: {eq.residual:.3e}, cohesive margin: {eq.cohesive_margin:.4f} rad")
    sys = descriptor_system(demo, eq)
    print(f"Descriptor system: N = {sys.N}, r = {sys.r}, states {list(sys.labels)}")
