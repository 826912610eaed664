import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable

import networkx as nx
import numpy as np
from networkx.algorithms.flow import edmonds_karp

# Node indices are 1-based everywhere outside this module's internals.
NodeSet = frozenset

_SOURCE = "source"
_SINK = "sink"


class GraphError(ValueError):
    pass


class InfeasiblePlacement(GraphError):
    """No actuator set can cut every disturbance-to-target path."""

    def __init__(self, message: str, edge: tuple[int, int] | None = None):
        super().__init__(message)
        self.edge = edge


@dataclass(frozen=True)
class InfluenceGraph:
    """
    Weighted digraph of state-to-state influence.

    Edge (tail, head) exists iff A[head, tail] != 0 for tail != head, i.e. the
    tail state appears in the head state's equation. Self-loops are never stored.
    """
    n: int
    edges: tuple[tuple[int, int, float], ...]
    labels: tuple[str, ...] = ()
    admissible: frozenset[int] = field(default_factory=frozenset)

    def __post_init__(self):
        if self.n < 1:
            raise GraphError(f"Graph needs at least one node, got n={self.n}")
        seen = set()
        for tail, head, weight in self.edges:
            if tail == head:
                raise GraphError(f"Self-loop on node {tail} is not allowed")
            for v in (tail, head):
                if not 1 <= v <= self.n:
                    raise GraphError(f"Edge ({tail}, {head}) outside node range 1..{self.n}")
            if weight == 0:
                raise GraphError(f"Edge ({tail}, {head}) has zero weight")
            if (tail, head) in seen:
                raise GraphError(f"Duplicate edge ({tail}, {head})")
            seen.add((tail, head))
        if self.labels and len(self.labels) != self.n:
            raise GraphError(f"Expected {self.n} labels, got {len(self.labels)}")
        bad = [v for v in self.admissible if not 1 <= v <= self.n]
        if bad:
            raise GraphError(f"Admissible nodes out of range: {sorted(bad)}")

    @classmethod
    def from_matrix(cls, A, admissible: Iterable[int] = (), labels: Iterable[str] = ()):
        A = np.asarray(A, dtype=float)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise GraphError(f"Adjacency must be square, got shape {A.shape}")
        heads, tails = np.nonzero(A)
        edges = tuple(
            (int(t) + 1, int(h) + 1, float(A[h, t]))
            for t, h in sorted(zip(tails, heads))
            if t != h
        )
        return cls(A.shape[0], edges, tuple(labels), frozenset(int(v) for v in admissible))

    @property
    def nodes(self) -> frozenset[int]:
        return frozenset(range(1, self.n + 1))

    @cached_property
    def digraph(self) -> nx.DiGraph:
        G = nx.DiGraph()
        G.add_nodes_from(range(1, self.n + 1))
        G.add_weighted_edges_from(self.edges)
        return G

    def label(self, v: int) -> str:
        return self.labels[v - 1] if self.labels else str(v)

    def to_json(self) -> dict:
        return {
            "n": self.n,
            "edges": [[t, h, w] for t, h, w in self.edges],
            "admissible": sorted(self.admissible),
            "labels": {str(v): self.label(v) for v in range(1, self.n + 1)},
        }

    @classmethod
    def from_json(cls, doc: dict):
        try:
            n = int(doc["n"])
            edges = tuple((int(t), int(h), float(w)) for t, h, w in doc["edges"])
        except (KeyError, TypeError, ValueError) as exc:
            raise GraphError(f"Malformed graph document: {exc}") from exc
        raw_labels = doc.get("labels") or {}
        labels = tuple(raw_labels.get(str(v), str(v)) for v in range(1, n + 1)) if raw_labels else ()
        return cls(n, edges, labels, frozenset(int(v) for v in doc.get("admissible", [])))


def save_graph(g: InfluenceGraph, path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as f:
        json.dump(g.to_json(), f, indent=2)


def load_graph(path: Path) -> InfluenceGraph:
    with Path(path).open("r", encoding="utf-8") as f:
        return InfluenceGraph.from_json(json.load(f))


def nodeset(g: InfluenceGraph, nodes: Iterable[int]) -> NodeSet:
    """Validate node indices against g and freeze them."""
    members = frozenset(int(v) for v in nodes)
    bad = sorted(v for v in members if not 1 <= v <= g.n)
    if bad:
        raise GraphError(f"Node indices out of range 1..{g.n}: {bad}")
    return members


def out_boundary(g: InfluenceGraph, w: Iterable[int]) -> NodeSet:
    w = nodeset(g, w)
    return frozenset(h for t in w for h in g.digraph.successors(t) if h not in w)


def in_boundary(g: InfluenceGraph, w: Iterable[int]) -> NodeSet:
    w = nodeset(g, w)
    return frozenset(t for t in w if any(h not in w for h in g.digraph.successors(t)))


def forward_reach(g: InfluenceGraph, s: Iterable[int]) -> NodeSet:
    s = nodeset(g, s)
    reach = set(s)
    for v in s:
        reach |= nx.descendants(g.digraph, v)
    return frozenset(reach)


def backward_reach(g: InfluenceGraph, s: Iterable[int]) -> NodeSet:
    s = nodeset(g, s)
    reach = set(s)
    for v in s:
        reach |= nx.ancestors(g.digraph, v)
    return frozenset(reach)


def paths_union(g: InfluenceGraph, d: Iterable[int], t: Iterable[int]) -> NodeSet:
    """
    Nodes lying on some D-to-T walk: forward reach of D intersected with
    backward reach of T. Superset of the simple-path union.
    """
    d, t = nodeset(g, d), nodeset(g, t)
    if d & t:
        raise GraphError(f"Disturbance and target sets overlap: {sorted(d & t)}")
    return forward_reach(g, d) & backward_reach(g, t)


def is_controlled_invariant(g: InfluenceGraph, z: Iterable[int], b: Iterable[int]) -> bool:
    z, b = nodeset(g, z), nodeset(g, b)
    return all(h in z or h in b for t in z for h in g.digraph.successors(t))


def is_conditioned_invariant(g: InfluenceGraph, s: Iterable[int], c: Iterable[int]) -> bool:
    s, c = nodeset(g, s), nodeset(g, c)
    return all(h in s for t in s - c for h in g.digraph.successors(t))


def max_controlled_invariant(g: InfluenceGraph, z0: Iterable[int], b: Iterable[int]) -> NodeSet:
    """Largest Z inside z0 whose out-edges all land in Z or b (deletion fixed point)."""
    z, b = set(nodeset(g, z0)), nodeset(g, b)
    changed = True
    while changed:
        changed = False
        for v in sorted(z):
            if any(h not in z and h not in b for h in g.digraph.successors(v)):
                z.discard(v)
                changed = True
    return frozenset(z)


def max_controlled_invariant_by_reach(g: InfluenceGraph, z0: Iterable[int], b: Iterable[int]) -> NodeSet:
    """Same set as max_controlled_invariant, computed as z0 minus the nodes that escape z0 avoiding b."""
    z0, b = nodeset(g, z0), nodeset(g, b)
    outside = g.nodes - z0 - b
    blocked = nx.restricted_view(g.digraph, [], [(t, h) for t, h, _ in g.edges if h in b])
    escaping = set(outside)
    for v in outside:
        escaping |= nx.ancestors(blocked, v)
    return z0 - escaping


def min_conditioned_invariant(g: InfluenceGraph, s0: Iterable[int], c: Iterable[int]) -> NodeSet:
    """Smallest S containing s0 whose non-sensor nodes keep their out-edges inside S."""
    s, c = set(nodeset(g, s0)), nodeset(g, c)
    frontier = sorted(v for v in s if v not in c)
    while frontier:
        v = frontier.pop()
        for h in g.digraph.successors(v):
            if h not in s:
                s.add(h)
                if h not in c:
                    frontier.append(h)
    return frozenset(s)


def _split_flow_network(g: InfluenceGraph, d: NodeSet, t: NodeSet) -> nx.DiGraph:
    # Each node becomes in -> out; only admissible interior nodes get unit capacity,
    # edges without a capacity attribute are unbounded for networkx.
    F = nx.DiGraph()
    cuttable = g.admissible - d - t
    for v in range(1, g.n + 1):
        if v in cuttable:
            F.add_edge(("in", v), ("out", v), capacity=1)
        else:
            F.add_edge(("in", v), ("out", v))
    for tail, head, _ in g.edges:
        F.add_edge(("out", tail), ("in", head))
    for v in sorted(d):
        F.add_edge(_SOURCE, ("in", v))
    for v in sorted(t):
        F.add_edge(("out", v), _SINK)
    return F


def min_actuator_placement(g: InfluenceGraph, d: Iterable[int], t: Iterable[int]) -> tuple[NodeSet, NodeSet]:
    """
    Minimum-cardinality admissible actuator set b cutting every D-to-T path,
    with z = max_controlled_invariant(nodes - t, b).

    Solved as a unit-capacity node-split max-flow; the sink-side minimum cut is
    selected, which leaves z as large as possible.
    """
    d, t = nodeset(g, d), nodeset(g, t)
    if d & t:
        raise GraphError(f"Disturbance and target sets overlap: {sorted(d & t)}")
    z0 = g.nodes - t

    if not forward_reach(g, d) & t:
        b = frozenset()
        return b, max_controlled_invariant(g, z0, b)

    for tail, head, _ in g.edges:
        if tail in d and head in t:
            raise InfeasiblePlacement(
                f"Direct edge ({tail}, {head}) from a disturbance to a target leaves no node to cut",
                edge=(tail, head),
            )

    F = _split_flow_network(g, d, t)
    try:
        R = edmonds_karp(F, _SOURCE, _SINK)
    except nx.NetworkXUnbounded as exc:
        raise InfeasiblePlacement(
            "Some disturbance-to-target path contains no admissible node outside D and T"
        ) from exc

    residual = nx.DiGraph()
    residual.add_nodes_from(R.nodes)
    residual.add_edges_from(
        (u, v) for u, v, attr in R.edges(data=True) if attr["capacity"] - attr["flow"] > 0
    )
    sink_side = nx.ancestors(residual, _SINK) | {_SINK}
    b = frozenset(
        v for v in range(1, g.n + 1)
        if ("in", v) not in sink_side and ("out", v) in sink_side
    )
    if len(b) != R.graph["flow_value"]:
        raise GraphError(f"Cut size {len(b)} differs from max-flow value {R.graph['flow_value']}")

    z = max_controlled_invariant(g, z0, b)
    if not d <= z or out_boundary(g, z) != b:
        raise GraphError("Placement violates the out-border identity b = out_boundary(z)")
    return b, z


def ddpof_structural_check(g: InfluenceGraph, d: Iterable[int], t: Iterable[int],
                           b: Iterable[int], c: Iterable[int]) -> bool:
    """True iff deleting every sensor-to-actuator edge disconnects T from D."""
    d, t, b, c = (nodeset(g, x) for x in (d, t, b, c))
    if d & t:
        raise GraphError(f"Disturbance and target sets overlap: {sorted(d & t)}")
    cancelled = [(tail, head) for tail, head, _ in g.edges if tail in c and head in b]
    view = nx.restricted_view(g.digraph, [], cancelled)
    reached = set(d)
    for v in d:
        reached |= nx.descendants(view, v)
    return not (reached & t)


def laplacian_from_adjacency(A) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Laplacian L, oriented incidence matrix Delta (n x q, -1 at the lower-index
    source, +1 at the sink) and the edge weights, with L = Delta diag(w) Delta^T.
    """
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise GraphError(f"Adjacency must be square, got shape {A.shape}")
    if not np.allclose(A, A.T, rtol=0.0, atol=1e-12 * max(1.0, np.abs(A).max(initial=0.0))):
        raise GraphError("Adjacency matrix is not symmetric")
    if (A < 0).any():
        raise GraphError("Adjacency matrix has negative entries")
    if np.any(np.diag(A) != 0):
        raise GraphError("Adjacency matrix has a nonzero diagonal")

    n = A.shape[0]
    G = nx.from_numpy_array(A)
    edgelist = sorted((min(u, v), max(u, v)) for u, v in G.edges())
    L = nx.laplacian_matrix(G, nodelist=list(range(n)), weight="weight").toarray()
    if edgelist:
        Delta = nx.incidence_matrix(G, nodelist=list(range(n)), edgelist=edgelist, oriented=True).toarray()
    else:
        Delta = np.zeros((n, 0))
    weights = np.array([A[u, v] for u, v in edgelist], dtype=float)
    return L, Delta, weights


if __name__ == "__main__":
    # 1 -> 2 -> 3 -> 4 -> 5 with a bypass 2 -> 4; node 1 disturbed, node 5 protected
    edges = [(i, i + 1, 1.0) for i in range(1, 5)] + [(2, 4, 1.0)]
    demo = InfluenceGraph(5, tuple(edges), admissible=frozenset(range(1, 6)))
    print("Minimum actuator placement on a 5-node chain")
    print("=" * 50)
    b, c = min_actuator_placement(demo, {1}, {5})
    print(f"Actuators B: {sorted(b)}")
    print(f"Sensors C: {sorted(c)}")
    print(f"Structural check: {ddpof_structural_check(demo, {1}, {5}, b, c)}")
