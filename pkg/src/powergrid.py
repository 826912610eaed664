import json
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import networkx as nx
import numpy as np
import pandas as pd

from src.config import DEFAULT_BASE_MVA, DEFAULT_NOMINAL_HZ, DEFAULT_VOLTAGE, LOAD_DAMPING_EPS
from src.oscillator import OscillatorNetwork


class CaseError(ValueError):
    pass


BUS_COLUMNS = ["id", "v", "p"]
LINE_COLUMNS = ["from", "to", "x"]
GENERATOR_COLUMNS = ["bus", "m", "p_rated", "droop"]


@dataclass(frozen=True, eq=False)
class GridCase:
    """Lossless grid: bus table sorted by id, line table, generator table sorted by bus."""
    buses: pd.DataFrame
    lines: pd.DataFrame
    generators: pd.DataFrame
    base_mva: float = DEFAULT_BASE_MVA
    nominal_hz: float = DEFAULT_NOMINAL_HZ
    name: str = ""

    @property
    def bus_ids(self) -> list[int]:
        return self.buses["id"].tolist()

    @property
    def generator_buses(self) -> list[int]:
        return self.generators["bus"].tolist()

    @cached_property
    def position(self) -> dict[int, int]:
        """Bus id -> 0-based position in the sorted bus table."""
        return {bus: i for i, bus in enumerate(self.bus_ids)}


def _table(records, columns: list[str], what: str) -> pd.DataFrame:
    if not isinstance(records, list):
        raise CaseError(f"'{what}' must be a list")
    df = pd.DataFrame(records)
    if df.empty:
        return pd.DataFrame({c: pd.Series(dtype=float) for c in columns})
    missing = [c for c in columns if c not in df.columns]
    if what == "buses" and "v" in missing:
        # Flat profile when the case omits magnitudes
        df["v"] = DEFAULT_VOLTAGE
        missing.remove("v")
    if missing:
        raise CaseError(f"'{what}' entries missing fields: {missing}")
    try:
        df = df[columns].astype(float)
    except (TypeError, ValueError) as exc:
        raise CaseError(f"Non-numeric value in '{what}': {exc}") from exc
    if df.isna().any().any():
        raise CaseError(f"Missing values in '{what}'")
    return df


def case_from_dict(doc: dict) -> GridCase:
    """Validate a case document and build a GridCase."""
    if not isinstance(doc, dict) or "buses" not in doc or "lines" not in doc:
        raise CaseError("Case document needs 'buses' and 'lines'")

    buses = _table(doc["buses"], BUS_COLUMNS, "buses")
    lines = _table(doc["lines"], LINE_COLUMNS, "lines")
    generators = _table(doc.get("generators", []), GENERATOR_COLUMNS, "generators")
    if buses.empty:
        raise CaseError("Case has no buses")

    for df, cols in ((buses, ["id"]), (lines, ["from", "to"]), (generators, ["bus"])):
        for col in cols:
            if not (df[col] == df[col].round()).all():
                raise CaseError(f"Column '{col}' must hold integer bus ids")
            df[col] = df[col].astype(int)

    if buses["id"].duplicated().any():
        raise CaseError(f"Duplicate bus ids: {sorted(buses.loc[buses['id'].duplicated(), 'id'].tolist())}")
    if (buses["v"] <= 0).any():
        raise CaseError("Bus voltage magnitudes must be positive")

    known = set(buses["id"])
    if (lines["x"] <= 0).any():
        bad = lines.loc[lines["x"] <= 0, ["from", "to"]].values.tolist()
        raise CaseError(f"Nonpositive reactance on lines {bad}")
    unknown = (set(lines["from"]) | set(lines["to"])) - known
    if unknown:
        raise CaseError(f"Lines reference unknown buses {sorted(unknown)}")
    if (lines["from"] == lines["to"]).any():
        raise CaseError("Lines must join two distinct buses")

    if not set(generators["bus"]) <= known:
        raise CaseError(f"Generators at unknown buses {sorted(set(generators['bus']) - known)}")
    if generators["bus"].duplicated().any():
        raise CaseError("At most one generator per bus")
    if (generators["m"] <= 0).any():
        raise CaseError("Generator inertia must be positive")

    G = nx.MultiGraph()
    G.add_nodes_from(known)
    G.add_edges_from(zip(lines["from"], lines["to"]))
    if not nx.is_connected(G):
        parts = sorted(len(c) for c in nx.connected_components(G))
        raise CaseError(f"Network is not connected (component sizes {parts})")

    return GridCase(
        buses=buses.sort_values("id").reset_index(drop=True),
        lines=lines.reset_index(drop=True),
        generators=generators.sort_values("bus").reset_index(drop=True),
        base_mva=float(doc.get("base_mva", DEFAULT_BASE_MVA)),
        nominal_hz=float(doc.get("nominal_hz", DEFAULT_NOMINAL_HZ)),
        name=str(doc.get("name", "")),
    )


def load_case(path) -> GridCase:
    path = Path(path)
    try:
        with path.open("r", encoding="utf-8") as f:
            doc = json.load(f)
    except json.JSONDecodeError as exc:
        raise CaseError(f"{path} is not valid JSON: {exc}") from exc
    return case_from_dict(doc)


def coupling_from_lines(case: GridCase, flat_voltage: bool = False) -> np.ndarray:
    """a_ij = sum over parallel lines of V_i V_j / X_ij."""
    n = len(case.buses)
    v = np.ones(n) if flat_voltage else case.buses["v"].to_numpy(dtype=float)
    A = np.zeros((n, n))
    for frm, to, x in case.lines[["from", "to", "x"]].itertuples(index=False):
        i, j = case.position[int(frm)], case.position[int(to)]
        a = v[i] * v[j] / x
        A[i, j] += a
        A[j, i] += a
    return A


def droop_damping(case: GridCase, omega_nominal: float = 1.0) -> np.ndarray:
    """
    Primary-control damping D_i = P_i / (e_p omega_nominal) per generator, in
    generator-bus order. The magnitude is used so damping stays positive.
    """
    gens = case.generators
    if (gens["droop"] <= 0).any():
        raise CaseError(f"Zero or negative droop at buses {gens.loc[gens['droop'] <= 0, 'bus'].tolist()}")
    if (gens["p_rated"] <= 0).any():
        raise CaseError(f"Zero rated power at buses {gens.loc[gens['p_rated'] <= 0, 'bus'].tolist()}")
    if omega_nominal <= 0:
        raise CaseError("Nominal angular frequency must be positive")
    return np.abs(gens["p_rated"].to_numpy(dtype=float) / (gens["droop"].to_numpy(dtype=float) * omega_nominal))


def load_side_damping(k: int, eps: float = LOAD_DAMPING_EPS) -> np.ndarray:
    if k < 0:
        raise CaseError(f"Node count must be nonnegative, got {k}")
    return np.full(k, float(eps))


@dataclass(frozen=True)
class NodeLabeling:
    """
    Extended-graph numbering: phase of the bus at sorted position p is node p+1,
    frequency of the g-th generator (by bus id) is node n+g.
    """
    bus_ids: tuple[int, ...]
    generator_buses: tuple[int, ...]

    @property
    def n(self) -> int:
        return len(self.bus_ids)

    @property
    def r(self) -> int:
        return len(self.generator_buses)

    @property
    def node_count(self) -> int:
        return self.n + self.r

    def phase_node(self, bus: int) -> int:
        try:
            return self.bus_ids.index(int(bus)) + 1
        except ValueError:
            raise CaseError(f"Unknown bus {bus}") from None

    def frequency_node(self, bus: int) -> int:
        try:
            return self.n + self.generator_buses.index(int(bus)) + 1
        except ValueError:
            raise CaseError(f"Bus {bus} has no generator") from None

    def bus_of(self, node: int) -> tuple[str, int]:
        node = int(node)
        if 1 <= node <= self.n:
            return "phase", self.bus_ids[node - 1]
        if self.n < node <= self.node_count:
            return "freq", self.generator_buses[node - self.n - 1]
        raise CaseError(f"Node {node} outside 1..{self.node_count}")

    def node_label(self, node: int) -> str:
        kind, bus = self.bus_of(node)
        return f"{kind}_{bus}"

    def node_of(self, label: str) -> int:
        kind, _, bus = label.partition("_")
        if kind == "phase":
            return self.phase_node(int(bus))
        if kind == "freq":
            return self.frequency_node(int(bus))
        raise CaseError(f"Unrecognised node label '{label}'")

    def state_ordering(self) -> tuple[tuple[int, ...], tuple[str, ...]]:
        """Nodes and labels per descriptor state row: [freq of gens, phase of gens, phase of loads]."""
        gens = set(self.generator_buses)
        loads = [b for b in self.bus_ids if b not in gens]
        nodes = (
            [self.frequency_node(b) for b in self.generator_buses]
            + [self.phase_node(b) for b in self.generator_buses]
            + [self.phase_node(b) for b in loads]
        )
        return tuple(nodes), tuple(self.node_label(v) for v in nodes)


def build_oscillator_network(case: GridCase, eps: float = LOAD_DAMPING_EPS,
                             flat_voltage: bool = False) -> tuple[OscillatorNetwork, NodeLabeling]:
    """
    Generators become swing-equation (second-order) nodes with droop damping
    D = P / e_p, the remaining buses first-order nodes with damping eps.
    Frequency states are per-unit of the nominal angular frequency.
    """
    second_order = tuple(case.position[b] for b in case.generator_buses)
    k = len(case.buses) - len(second_order)

    damping = np.empty(len(case.buses))
    damping[list(second_order)] = droop_damping(case)
    first_order = [i for i in range(len(case.buses)) if i not in set(second_order)]
    damping[first_order] = load_side_damping(k, eps)

    net = OscillatorNetwork(
        coupling=coupling_from_lines(case, flat_voltage=flat_voltage),
        second_order=second_order,
        inertia=case.generators["m"].to_numpy(dtype=float),
        damping=damping,
        natural_freq=case.buses["p"].to_numpy(dtype=float),
    )
    labeling = NodeLabeling(tuple(case.bus_ids), tuple(case.generator_buses))
    return net, labeling


def case_summary(case: GridCase) -> pd.DataFrame:
    """One row per bus with its role, data and extended-graph nodes."""
    labeling = NodeLabeling(tuple(case.bus_ids), tuple(case.generator_buses))
    G = nx.MultiGraph()
    G.add_nodes_from(case.bus_ids)
    G.add_edges_from(zip(case.lines["from"], case.lines["to"]))
    gens = case.generators.set_index("bus")

    rows = []
    for bus, v, p in case.buses[["id", "v", "p"]].itertuples(index=False):
        is_gen = bus in gens.index
        rows.append({
            "bus": int(bus),
            "kind": "generator" if is_gen else "load",
            "v": v,
            "p": p,
            "degree": G.degree(bus),
            "phase_node": labeling.phase_node(bus),
            "freq_node": labeling.frequency_node(bus) if is_gen else None,
            "m": gens.at[bus, "m"] if is_gen else None,
            "p_rated": gens.at[bus, "p_rated"] if is_gen else None,
        })
    return pd.DataFrame(rows)
