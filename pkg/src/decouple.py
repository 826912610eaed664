import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import linalg

from src.config import (
    DECOUPLING_TOL,
    LOAD_DAMPING_EPS,
    RANDOM_SAMPLE_COUNT,
    SAMPLE_FREQ_COUNT,
    SAMPLE_FREQ_MAX_HZ,
    SAMPLE_FREQ_MIN_HZ,
    SAMPLE_SEED,
)
from src.netgraph import (
    GraphError,
    InfluenceGraph,
    backward_reach,
    ddpof_structural_check,
    forward_reach,
    in_boundary,
    min_actuator_placement,
    nodeset,
    out_boundary,
    paths_union,
)
from src.oscillator import (
    DescriptorSystem,
    Equilibrium,
    OscillatorNetwork,
    descriptor_system,
    extended_graph,
    solve_equilibrium,
)
from src.powergrid import GridCase, NodeLabeling, build_oscillator_network
from src.sim import FeedbackLaw, spectrum


class DecouplingError(RuntimeError):
    pass


@dataclass
class VerificationReport:
    structural: bool
    zero_pattern: bool
    numeric_residual: float
    numeric_threshold: float
    stable: bool
    max_real: float
    near_zero_modes: int
    notes: list[str] = field(default_factory=list)

    @property
    def numeric_ok(self) -> bool:
        return self.numeric_residual <= self.numeric_threshold

    @property
    def verified(self) -> bool:
        return self.structural and self.zero_pattern and self.numeric_ok and self.stable

    def to_dict(self) -> dict:
        return {
            "structural": self.structural,
            "zero_pattern": self.zero_pattern,
            "numeric_residual": self.numeric_residual,
            "numeric_threshold": self.numeric_threshold,
            "numeric_ok": self.numeric_ok,
            "stable": self.stable,
            "max_real": self.max_real,
            "near_zero_modes": self.near_zero_modes,
            "verified": self.verified,
            "notes": list(self.notes),
        }


@dataclass(frozen=True, eq=False)
class DecouplingSolution:
    disturbance_set: frozenset[int]
    target_set: frozenset[int]
    actuator_set: frozenset[int]
    sensor_set: frozenset[int]
    invariant_core: frozenset[int]
    working_set: frozenset[int]
    friend: np.ndarray
    system: DescriptorSystem
    graph: InfluenceGraph
    A_cl: np.ndarray
    report: VerificationReport
    labeling: NodeLabeling | None = None

    @property
    def feedback(self) -> FeedbackLaw:
        return FeedbackLaw(tuple(sorted(self.actuator_set)), tuple(sorted(self.sensor_set)), self.friend)

    @property
    def selectors(self) -> dict[str, np.ndarray]:
        """B (N x m), C (p x N), D (N x d), T (t x N)."""
        sys = self.system
        return {
            "B": selection_matrix(sys, self.actuator_set),
            "C": selection_matrix(sys, self.sensor_set).T,
            "D": selection_matrix(sys, self.disturbance_set),
            "T": selection_matrix(sys, self.target_set).T,
        }


@dataclass(frozen=True, eq=False)
class GridModel:
    """Everything derived from a case up to the extended graph."""
    case: GridCase
    network: OscillatorNetwork
    labeling: NodeLabeling
    equilibrium: Equilibrium
    system: DescriptorSystem
    graph: InfluenceGraph


def selection_matrix(sys: DescriptorSystem, nodes) -> np.ndarray:
    """N x len(nodes) matrix of elementary columns, one per node in ascending order."""
    S = np.zeros((sys.N, len(nodes)))
    for j, row in enumerate(sys.rows(nodes)):
        S[row, j] = 1.0
    return S


def build_working_set(g: InfluenceGraph, z_core, d, t) -> frozenset[int]:
    """W = Z° ∩ (P ∪ D), where P is the union of D-to-T paths."""
    z_core, d, t = nodeset(g, z_core), nodeset(g, d), nodeset(g, t)
    if not d <= z_core:
        raise GraphError(f"Disturbance nodes {sorted(d - z_core)} are outside the invariant core")
    if z_core & t:
        raise GraphError(f"Invariant core contains target nodes {sorted(z_core & t)}")
    return z_core & (paths_union(g, d, t) | d)


def sensor_set(g: InfluenceGraph, w) -> frozenset[int]:
    return in_boundary(g, w)


def synthesize_friend(sys: DescriptorSystem, b_set, c_set) -> np.ndarray:
    """G[i, j] = A_mat[b_i, c_j], actuators and sensors in ascending node order."""
    b_set, c_set = frozenset(b_set), frozenset(c_set)
    if b_set & c_set:
        raise ValueError(f"Actuator and sensor sets overlap: {sorted(b_set & c_set)}")
    return sys.A_mat[np.ix_(sys.rows(b_set), sys.rows(c_set))].copy()


def friend_zero_pattern_ok(sys: DescriptorSystem, A_cl, b_set, c_set) -> bool:
    """(B, C) block of A_cl exactly zero, every other entry identical to A_mat."""
    A_cl = np.asarray(A_cl)
    mask = np.zeros(sys.A_mat.shape, dtype=bool)
    mask[np.ix_(sys.rows(b_set), sys.rows(c_set))] = True
    return bool(np.all(A_cl[mask] == 0.0) and np.array_equal(A_cl[~mask], sys.A_mat[~mask]))


def closed_loop(sys: DescriptorSystem, b_set, c_set, G, strict: bool = True) -> np.ndarray:
    """A_cl = A_mat - B G C."""
    G = np.asarray(G, dtype=float)
    if G.shape != (len(b_set), len(c_set)):
        raise ValueError(f"Gain shape {G.shape} does not match {len(b_set)} actuators x {len(c_set)} sensors")
    B = selection_matrix(sys, b_set)
    C = selection_matrix(sys, c_set).T
    A_cl = sys.A_mat - B @ G @ C
    if strict and not friend_zero_pattern_ok(sys, A_cl, b_set, c_set):
        raise DecouplingError("Closed loop does not cancel exactly the sensor-to-actuator entries")
    return A_cl


def default_sample_points(seed: int = SAMPLE_SEED) -> np.ndarray:
    """Imaginary-axis points over 0.01-100 Hz plus random points in the right half plane."""
    f = np.logspace(math.log10(SAMPLE_FREQ_MIN_HZ), math.log10(SAMPLE_FREQ_MAX_HZ), SAMPLE_FREQ_COUNT)
    rng = np.random.default_rng(seed)
    random_points = rng.uniform(0.1, 10.0, RANDOM_SAMPLE_COUNT) + 1j * rng.uniform(-10.0, 10.0, RANDOM_SAMPLE_COUNT)
    return np.concatenate([1j * 2 * math.pi * f, random_points])


def numeric_threshold(sys: DescriptorSystem, tol: float = DECOUPLING_TOL) -> float:
    return tol * max(1.0, float(np.abs(sys.A_mat).max()))


def verify_numeric(sys: DescriptorSystem, A_cl, d_set, t_set, sample_points=None, max_resample: int = 10) -> float:
    """max over samples s of |T (sE - A_cl)^-1 D|_max."""
    d_rows, t_rows = sys.rows(d_set), sys.rows(t_set)
    if d_rows.size == 0 or t_rows.size == 0:
        return 0.0
    points = default_sample_points() if sample_points is None else np.asarray(sample_points, dtype=complex)
    rng = np.random.default_rng(SAMPLE_SEED + 1)
    D = selection_matrix(sys, d_set).astype(complex)

    worst = 0.0
    for s in points:
        for _ in range(max_resample):
            M = s * sys.E - A_cl
            try:
                lu = linalg.lu_factor(M)
            except (linalg.LinAlgError, ValueError):
                lu = None
            if lu is not None and np.min(np.abs(np.diag(lu[0]))) > 0:
                X = linalg.lu_solve(lu, D)
                worst = max(worst, float(np.abs(X[t_rows]).max()))
                break
            s = s + complex(rng.uniform(0.01, 0.1), rng.uniform(-0.1, 0.1))
        else:
            raise DecouplingError(f"Resolvent stayed singular near s = {s}")
    return worst


def verify_solution(sys: DescriptorSystem, g: InfluenceGraph, d, t, b, c, G, A_cl=None,
                    notes: list[str] | None = None) -> VerificationReport:
    """Structural, zero-pattern, transfer and spectrum checks for a (B, C, G) triple."""
    A_cl = closed_loop(sys, b, c, G, strict=False) if A_cl is None else A_cl
    spec = spectrum(sys, A_cl)
    return VerificationReport(
        structural=ddpof_structural_check(g, d, t, b, c),
        zero_pattern=friend_zero_pattern_ok(sys, A_cl, b, c),
        numeric_residual=verify_numeric(sys, A_cl, d, t),
        numeric_threshold=numeric_threshold(sys),
        stable=spec.stable,
        max_real=spec.max_real,
        near_zero_modes=spec.near_zero_modes,
        notes=list(notes or []),
    )


def prepare_system(case: GridCase, eps: float = LOAD_DAMPING_EPS, flat_voltage: bool = False,
                   verbose: bool = False) -> GridModel:
    """Equilibrium, linearization, descriptor form and extended graph of a grid case."""
    net, labeling = build_oscillator_network(case, eps=eps, flat_voltage=flat_voltage)
    eq = solve_equilibrium(net)
    if verbose:
        print(f"Equilibrium: {eq.iterations} Newton iterations, residual {eq.residual:.2e}, "
              f"max edge phase gap {eq.cohesive_margin:.4f} rad")
    ordering, labels = labeling.state_ordering()
    sys = descriptor_system(net, eq, ordering=ordering, labels=labels)
    g = extended_graph(sys)
    if verbose:
        print(f"Extended graph: {g.n} nodes, {len(g.edges)} edges, {len(g.admissible)} admissible")
    return GridModel(case, net, labeling, eq, sys, g)


def solve_ddp_on_system(sys: DescriptorSystem, g: InfluenceGraph, d_set, t_set,
                        labeling: NodeLabeling | None = None, verbose: bool = False) -> DecouplingSolution:
    d, t = nodeset(g, d_set), nodeset(g, t_set)
    if not d or not t:
        raise GraphError("Disturbance and target sets must be nonempty")
    if d & t:
        raise GraphError(f"Disturbance and target sets overlap: {sorted(d & t)}")
    if not d <= g.admissible:
        raise GraphError(f"Disturbance nodes {sorted(d - g.admissible)} have no input channel")

    notes = []
    b, z = min_actuator_placement(g, d, t)
    w = build_working_set(g, z, d, t)
    if b and out_boundary(g, w) != b:
        msg = (f"Out-border of W {sorted(out_boundary(g, w))} differs from B {sorted(b)}; "
               f"keeping B from the placement")
        print(f"Warning: {msg}")
        notes.append(msg)

    # No actuator means nothing to feed back
    c = sensor_set(g, w) if b else frozenset()
    if c & d:
        msg = f"Sensor set overlaps the disturbance set at {sorted(c & d)}"
        print(f"Warning: {msg}")
        notes.append(msg)

    G = synthesize_friend(sys, b, c)
    A_cl = closed_loop(sys, b, c, G)
    report = verify_solution(sys, g, d, t, b, c, G, A_cl, notes)

    if verbose:
        print("=" * 50)
        print(f"Actuators B: {sorted(b)}")
        print(f"Sensors   C: {sorted(c)}")
        print(f"|Z°| = {len(z)}, |W| = {len(w)}")
        print(f"Friend G: {np.array2string(G, precision=4)}")
        print(f"Verified: {report.verified} (numeric residual {report.numeric_residual:.2e})")
    if not report.verified:
        print("Warning: decoupling verification failed")

    return DecouplingSolution(d, t, b, c, z, w, G, sys, g, A_cl, report, labeling)


def solve_ddp(case: GridCase, d_set, t_set, eps: float = LOAD_DAMPING_EPS, flat_voltage: bool = False,
              verbose: bool = False) -> DecouplingSolution:
    """Equilibrium through verification for one (D, T) query on a grid case."""
    model = prepare_system(case, eps=eps, flat_voltage=flat_voltage, verbose=verbose)
    return solve_ddp_on_system(model.system, model.graph, d_set, t_set, model.labeling, verbose=verbose)


def closed_loop_partition(sys: DescriptorSystem, A_cl, d_set) -> tuple[frozenset[int], frozenset[int]]:
    """(disturbed, decoupled): nodes reachable from D in graph(A_cl), and the rest."""
    g_cl = extended_graph(sys, A_cl)
    disturbed = forward_reach(g_cl, d_set)
    return disturbed, g_cl.nodes - disturbed


def partition_nodes(solution: DecouplingSolution) -> tuple[frozenset[int], frozenset[int]]:
    return closed_loop_partition(solution.system, solution.A_cl, solution.disturbance_set)


def invariance_violations(sys: DescriptorSystem, A_cl, w, t) -> list[tuple[int, int]]:
    """Closed-loop edges leaving W towards a node that can still reach T."""
    g_cl = extended_graph(sys, A_cl)
    w, t = nodeset(g_cl, w), nodeset(g_cl, t)
    reaches_t = backward_reach(g_cl, t)
    return sorted(
        (tail, head) for tail, head, _ in g_cl.edges
        if tail in w and head not in w and head in reaches_t
    )


def _labels(solution: DecouplingSolution, nodes) -> list[str]:
    return [solution.graph.label(v) for v in sorted(nodes)]


def solution_to_json(solution: DecouplingSolution) -> dict:
    sets = {
        "D": solution.disturbance_set,
        "T": solution.target_set,
        "B": solution.actuator_set,
        "C": solution.sensor_set,
        "Z": solution.invariant_core,
        "W": solution.working_set,
    }
    return {
        **{name: sorted(nodes) for name, nodes in sets.items()},
        "labels": {name: _labels(solution, nodes) for name, nodes in sets.items()},
        "G": [[float(x) for x in row] for row in solution.friend],
        "verification": solution.report.to_dict(),
    }


def save_solution(solution: DecouplingSolution, path: Path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as f:
        json.dump(solution_to_json(solution), f, indent=2)


@dataclass(frozen=True, eq=False)
class StoredSolution:
    d: frozenset[int]
    t: frozenset[int]
    b: frozenset[int]
    c: frozenset[int]
    friend: np.ndarray
    z: frozenset[int] = frozenset()
    w: frozenset[int] = frozenset()

    @property
    def feedback(self) -> FeedbackLaw:
        return FeedbackLaw(tuple(sorted(self.b)), tuple(sorted(self.c)), self.friend)


def load_solution(path) -> StoredSolution:
    with Path(path).open("r", encoding="utf-8") as f:
        doc = json.load(f)
    try:
        b, c = frozenset(doc["B"]), frozenset(doc["C"])
        friend = np.array(doc["G"], dtype=float).reshape(len(b), len(c))
        return StoredSolution(
            d=frozenset(doc["D"]),
            t=frozenset(doc["T"]),
            b=b,
            c=c,
            friend=friend,
            z=frozenset(doc.get("Z", [])),
            w=frozenset(doc.get("W", [])),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"Malformed solution file {path}: {exc}") from exc
