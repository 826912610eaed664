import numpy as np
import pytest

from src.config import CASES_DIR
from src.decouple import prepare_system, solve_ddp_on_system
from src.netgraph import InfluenceGraph
from src.oscillator import DescriptorSystem
from src.powergrid import case_from_dict, load_case

NEW_ENGLAND = CASES_DIR / "new_england_39.json"


def path_graph(n: int = 5, extra=(), admissible=None) -> InfluenceGraph:
    """Bidirectional path 1 <-> 2 <-> ... <-> n plus extra (tail, head) edges."""
    edges = []
    for i in range(1, n):
        edges += [(i, i + 1, 1.0), (i + 1, i, 1.0)]
    size = max([n] + [max(e) for e in extra])
    edges += [(t, h, 1.0) for t, h in extra]
    admissible = range(1, size + 1) if admissible is None else admissible
    return InfluenceGraph(size, tuple(edges), admissible=frozenset(admissible))


def random_digraph(rng: np.random.Generator, n: int, p: float = 0.3, p_admissible: float = 0.8) -> InfluenceGraph:
    mask = rng.random((n, n)) < p
    np.fill_diagonal(mask, False)
    weights = rng.uniform(0.5, 2.0, (n, n)) * rng.choice([-1.0, 1.0], (n, n))
    admissible = [v + 1 for v in range(n) if rng.random() < p_admissible]
    return InfluenceGraph.from_matrix(np.where(mask, weights, 0.0), admissible=admissible)


def random_disjoint_sets(rng: np.random.Generator, n: int) -> tuple[frozenset, frozenset]:
    perm = [int(v) + 1 for v in rng.permutation(n)]
    nd = int(rng.integers(1, min(2, n - 1) + 1))
    nt = int(rng.integers(1, min(2, n - nd) + 1))
    return frozenset(perm[:nd]), frozenset(perm[nd:nd + nt])


def first_order_system(A) -> DescriptorSystem:
    """E = I, every state its own input channel, node i is state row i-1."""
    A = np.asarray(A, dtype=float)
    N = A.shape[0]
    return DescriptorSystem(
        E=np.eye(N),
        A_mat=A,
        B_full=np.eye(N),
        r=0,
        k=N,
        node_of_state=tuple(range(1, N + 1)),
        labels=tuple(f"phase_{i}" for i in range(1, N + 1)),
    )


def toy_case_dict(with_generator: bool = True) -> dict:
    """Three buses on a line, generator at bus 3 when requested."""
    doc = {
        "base_mva": 100,
        "nominal_hz": 60,
        "buses": [
            {"id": 1, "v": 1.0, "p": -0.2},
            {"id": 2, "v": 1.0, "p": -0.1},
            {"id": 3, "v": 1.0, "p": 0.3},
        ],
        "lines": [
            {"from": 1, "to": 2, "x": 0.1},
            {"from": 2, "to": 3, "x": 0.2},
        ],
        "generators": [],
    }
    if with_generator:
        doc["generators"] = [{"bus": 3, "m": 0.2, "p_rated": 1.0, "droop": 0.05}]
    return doc


@pytest.fixture
def g5() -> InfluenceGraph:
    return path_graph(5)


@pytest.fixture
def g5_pendant() -> InfluenceGraph:
    return path_graph(5, extra=[(3, 6)])


@pytest.fixture
def toy_case():
    return case_from_dict(toy_case_dict())


@pytest.fixture(scope="session")
def new_england_case():
    return load_case(NEW_ENGLAND)


@pytest.fixture(scope="session")
def new_england(new_england_case):
    return prepare_system(new_england_case)


@pytest.fixture(scope="session")
def new_england_solution(new_england):
    return solve_ddp_on_system(new_england.system, new_england.graph, {22, 44}, {40, 41}, new_england.labeling)
