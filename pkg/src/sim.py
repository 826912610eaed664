import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import linalg

from src.config import (
    DEFAULT_DT,
    DEFAULT_HORIZON,
    DEFAULT_NOMINAL_HZ,
    NEAR_ZERO_TOL,
    SMOOTHING_STEPS,
    STABILITY_TOL,
    STEADY_STATE_WINDOW,
)
from src.oscillator import DescriptorSystem

CONTROLLERS = ("none", "ideal", "filtered")


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class Disturbance:
    node: int
    amplitude: float
    start: float = 0.0


@dataclass(frozen=True)
class Scenario:
    """Step disturbances plus integration and controller settings."""
    disturbances: tuple[Disturbance, ...] = ()
    horizon: float = DEFAULT_HORIZON
    dt: float = DEFAULT_DT
    controller: str = "none"
    tau: float | None = None
    x0: tuple[float, ...] | None = None
    smoothing_steps: int = SMOOTHING_STEPS

    @property
    def steps(self) -> int:
        return int(round(self.horizon / self.dt))

    def validate(self, sys: DescriptorSystem | None = None):
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if not self.horizon > 0 or self.steps < 1:
            raise ValueError(f"Horizon {self.horizon} s is shorter than one step of {self.dt} s")
        if self.controller not in CONTROLLERS:
            raise ValueError(f"Unknown controller '{self.controller}', expected one of {CONTROLLERS}")
        if self.controller == "filtered" and not (self.tau is not None and self.tau > 0):
            raise ValueError("Filtered controller needs a positive time constant tau")
        if self.smoothing_steps < 0:
            raise ValueError("smoothing_steps must be nonnegative")
        for dist in self.disturbances:
            if not 0 <= dist.start <= self.horizon:
                raise ValueError(f"Disturbance on node {dist.node} starts at {dist.start} s, outside [0, {self.horizon}]")
        if sys is not None:
            admissible = {sys.node_of_state[row] for row in np.flatnonzero(sys.B_full.any(axis=1))}
            for dist in self.disturbances:
                if dist.node not in admissible:
                    raise ValueError(f"Disturbance node {dist.node} has no input channel")
            if self.x0 is not None and len(self.x0) != sys.N:
                raise ValueError(f"Initial state needs {sys.N} entries, got {len(self.x0)}")

    def with_controller(self, controller: str, tau: float | None = None) -> "Scenario":
        return replace(self, controller=controller, tau=tau)

    def scaled(self, factor: float) -> "Scenario":
        return replace(self, disturbances=tuple(
            Disturbance(d.node, d.amplitude * factor, d.start) for d in self.disturbances
        ))

    def to_dict(self) -> dict:
        return {
            "disturbances": [{"node": d.node, "amplitude": d.amplitude, "start": d.start} for d in self.disturbances],
            "horizon": self.horizon,
            "dt": self.dt,
            "controller": self.controller,
            "tau": self.tau,
            "smoothing_steps": self.smoothing_steps,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Scenario":
        try:
            disturbances = tuple(
                Disturbance(int(d["node"]), float(d["amplitude"]), float(d.get("start", 0.0)))
                for d in doc.get("disturbances", [])
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"Malformed disturbance entry: {exc}") from exc
        tau = doc.get("tau")
        return cls(
            disturbances=disturbances,
            horizon=float(doc.get("horizon", DEFAULT_HORIZON)),
            dt=float(doc.get("dt", DEFAULT_DT)),
            controller=str(doc.get("controller", "none")),
            tau=None if tau is None else float(tau),
            smoothing_steps=int(doc.get("smoothing_steps", SMOOTHING_STEPS)),
        )


def load_scenario(path) -> Scenario:
    with Path(path).open("r", encoding="utf-8") as f:
        return Scenario.from_dict(json.load(f))


@dataclass(frozen=True, eq=False)
class FeedbackLaw:
    """Static output feedback u = -G y with y the sensor states, both sets ascending."""
    b_set: tuple[int, ...]
    c_set: tuple[int, ...]
    gain: np.ndarray

    def __post_init__(self):
        gain = np.asarray(self.gain, dtype=float).reshape(len(self.b_set), len(self.c_set))
        object.__setattr__(self, "gain", gain)
        object.__setattr__(self, "b_set", tuple(sorted(self.b_set)))
        object.__setattr__(self, "c_set", tuple(sorted(self.c_set)))

    @property
    def m(self) -> int:
        return len(self.b_set)

    def matrices(self, sys: DescriptorSystem) -> tuple[np.ndarray, np.ndarray]:
        """Actuator selector B (N x m) and sensor selector C (p x N)."""
        B = np.zeros((sys.N, self.m))
        for i, row in enumerate(sys.rows(self.b_set)):
            B[row, i] = 1.0
        C = np.zeros((len(self.c_set), sys.N))
        for j, row in enumerate(sys.rows(self.c_set)):
            C[j, row] = 1.0
        return B, C


@dataclass(frozen=True, eq=False)
class TimeSeries:
    """Trajectories on a uniform grid. States are deviations in state-row order, frequencies in p.u."""
    t: np.ndarray
    states: np.ndarray
    control: np.ndarray
    labels: tuple[str, ...]
    node_of_state: tuple[int, ...]
    r: int
    control_nodes: tuple[int, ...] = ()
    meta: dict = field(default_factory=dict)
    nominal_hz: float = DEFAULT_NOMINAL_HZ

    def row(self, node: int) -> int:
        try:
            return self.node_of_state.index(int(node))
        except ValueError:
            raise ValueError(f"Node {node} is not a state of this run") from None

    def is_frequency(self, node: int) -> bool:
        return self.row(node) < self.r

    def trace(self, node: int) -> np.ndarray:
        return self.states[:, self.row(node)]

    def frequency_hz(self, node: int) -> np.ndarray:
        if not self.is_frequency(node):
            raise ValueError(f"Node {node} is not a frequency state")
        return self.trace(node) * self.nominal_hz

    def to_frame(self) -> pd.DataFrame:
        """t, then one column per state in ascending node order (frequencies in Hz), then u_<node>."""
        columns = {"t": self.t}
        for node in sorted(self.node_of_state):
            row = self.row(node)
            values = self.states[:, row]
            columns[self.labels[row]] = values * self.nominal_hz if row < self.r else values
        for i, node in enumerate(self.control_nodes):
            columns[f"u_{node}"] = self.control[:, i]
        return pd.DataFrame(columns)


def ideal_closed_loop(sys: DescriptorSystem, A_eff, feedback: FeedbackLaw) -> np.ndarray:
    B_sel, C_sel = feedback.matrices(sys)
    return np.asarray(A_eff, dtype=float) - B_sel @ feedback.gain @ C_sel


def filtered_system(sys: DescriptorSystem, A_eff, feedback: FeedbackLaw, tau: float) -> tuple[np.ndarray, np.ndarray]:
    """
    Plant plus m low-pass states u_f with tau u_f' = -G C x - u_f:

        E_aug = blockdiag(E, I_m),  A_aug = [[A_eff, B], [-G C / tau, -I / tau]]
    """
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    B_sel, C_sel = feedback.matrices(sys)
    m = feedback.m
    E_aug = linalg.block_diag(sys.E, np.eye(m))
    A_aug = np.block([
        [np.asarray(A_eff, dtype=float), B_sel],
        [-feedback.gain @ C_sel / tau, -np.eye(m) / tau],
    ])
    return E_aug, A_aug


def _input_schedule(scenario: Scenario, n_steps: int) -> tuple[list[int], np.ndarray, list[int]]:
    """Distinct disturbance nodes, per-interval input values and onset step indices."""
    nodes = sorted({d.node for d in scenario.disturbances})
    w = np.zeros((n_steps, len(nodes)))
    onsets = []
    for dist in scenario.disturbances:
        k0 = int(round(dist.start / scenario.dt))
        if k0 >= n_steps:
            continue
        w[k0:, nodes.index(dist.node)] += dist.amplitude
        onsets.append(k0)
    return nodes, w, sorted(set(onsets))


def _factor(M: np.ndarray, what: str):
    lu, piv = linalg.lu_factor(M, check_finite=True)
    if np.min(np.abs(np.diag(lu))) == 0.0:
        raise SimulationError(f"Singular {what} step matrix; choose a different dt")
    return lu, piv


def simulate(sys: DescriptorSystem, A_eff, scenario: Scenario, feedback: FeedbackLaw | None = None,
             nominal_hz: float = DEFAULT_NOMINAL_HZ) -> TimeSeries:
    """
    Fixed-step trapezoidal integration of E x' = A_eff x + B u + D w.
    Frequency states are p.u.; `nominal_hz` only scales what is reported in Hz.

    Inputs are held constant on each step and switch exactly at grid points.
    The step that follows a discontinuity is taken as implicit-Euler half
    steps so the stiff load modes do not ring.
    """
    scenario.validate(sys)
    A_eff = np.asarray(A_eff, dtype=float)
    if A_eff.shape != (sys.N, sys.N):
        raise ValueError(f"A_eff must be {sys.N}x{sys.N}, got {A_eff.shape}")
    if scenario.controller != "none" and feedback is None:
        raise ValueError(f"Controller '{scenario.controller}' needs a feedback law")

    h = scenario.dt
    n_steps = scenario.steps
    t = np.arange(n_steps + 1) * h

    E, A = sys.E, A_eff
    m = 0
    if feedback is not None and scenario.controller != "none":
        _, C_sel = feedback.matrices(sys)
        m = feedback.m
        if scenario.controller == "ideal":
            A = ideal_closed_loop(sys, A_eff, feedback)
        else:
            E, A = filtered_system(sys, A_eff, feedback, scenario.tau)
    size = A.shape[0]

    nodes, w, onsets = _input_schedule(scenario, n_steps)
    D_sel = np.zeros((size, len(nodes)))
    for j, row in enumerate(sys.rows(nodes)):
        D_sel[row, j] = 1.0

    x = np.zeros((n_steps + 1, size))
    if scenario.x0 is not None:
        x[0, :sys.N] = scenario.x0

    # x_{k+1} = Phi x_k + Gamma w_k
    lu_trap = _factor(E - h / 2 * A, "trapezoidal")
    Phi = linalg.lu_solve(lu_trap, E + h / 2 * A)
    Gamma = linalg.lu_solve(lu_trap, h * D_sel)

    smooth = set()
    if scenario.smoothing_steps > 0:
        smooth = {0} | set(onsets)
        sub = h / scenario.smoothing_steps
        lu_be = lu_trap if scenario.smoothing_steps == 2 else _factor(E - sub * A, "implicit-Euler")
        Phi_be = linalg.lu_solve(lu_be, E)
        Gamma_be = linalg.lu_solve(lu_be, sub * D_sel)

    for k in range(n_steps):
        if k in smooth:
            xk = x[k]
            for _ in range(scenario.smoothing_steps):
                xk = Phi_be @ xk + Gamma_be @ w[k]
            x[k + 1] = xk
        else:
            x[k + 1] = Phi @ x[k] + Gamma @ w[k]

    finite = np.isfinite(x).all(axis=1)
    if not finite.all():
        first = int(np.argmin(finite))
        raise SimulationError(f"Non-finite state at t = {t[first]:.6g} s")

    states = x[:, :sys.N]
    if scenario.controller == "ideal":
        control = -(states @ C_sel.T) @ feedback.gain.T
    elif scenario.controller == "filtered":
        control = x[:, sys.N:]
    else:
        control = np.zeros((n_steps + 1, 0))

    return TimeSeries(
        t=t,
        states=states,
        control=control,
        labels=sys.labels,
        node_of_state=sys.node_of_state,
        r=sys.r,
        control_nodes=feedback.b_set if m else (),
        meta={"controller": scenario.controller, "tau": scenario.tau, "dt": h},
        nominal_hz=float(nominal_hz),
    )


def lowpass_reference(amplitude, tau: float, t):
    """Step response a (1 - exp(-t / tau)) of a first-order low-pass filter."""
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    return amplitude * (1.0 - np.exp(-np.asarray(t, dtype=float) / tau))


@dataclass(frozen=True, eq=False)
class SteadyState:
    drift_slopes: pd.Series
    u_ss: pd.Series
    u_ss_total: float
    freq_ss: pd.Series

    def to_dict(self) -> dict:
        return {
            "drift_slopes": {k: float(v) for k, v in self.drift_slopes.items()},
            "u_ss": {k: float(v) for k, v in self.u_ss.items()},
            "u_ss_total": float(self.u_ss_total),
            "u_ss_magnitude": abs(float(self.u_ss_total)),
            "freq_ss_hz": {k: float(v) for k, v in self.freq_ss.items()},
        }


def steady_state_report(ts: TimeSeries, window: float = STEADY_STATE_WINDOW) -> SteadyState:
    """
    Least-squares phase drift slopes (rad/s), mean control inputs and mean
    frequency deviations (Hz) over the last `window` seconds.
    """
    span = ts.t[-1] - ts.t[0]
    if window > span + 1e-12:
        raise ValueError(f"Window {window} s is longer than the {span} s horizon")
    mask = ts.t >= ts.t[-1] - window - 1e-12
    t_win = ts.t[mask]
    phase = ts.states[mask][:, ts.r:]
    phase_labels = list(ts.labels[ts.r:])

    if t_win.size >= 2:
        slopes = np.polyfit(t_win - t_win[0], phase, 1)[0]
    else:
        slopes = np.zeros(phase.shape[1])
    u_mean = ts.control[mask].mean(axis=0) if ts.control.shape[1] else np.zeros(0)
    freq = ts.states[mask][:, :ts.r].mean(axis=0) * ts.nominal_hz

    return SteadyState(
        drift_slopes=pd.Series(slopes, index=phase_labels),
        u_ss=pd.Series(u_mean, index=[f"u_{v}" for v in ts.control_nodes], dtype=float),
        u_ss_total=float(u_mean.sum()),
        freq_ss=pd.Series(freq, index=list(ts.labels[:ts.r])),
    )


@dataclass(frozen=True, eq=False)
class SpectrumReport:
    eigenvalues: np.ndarray
    max_real: float
    stable: bool
    near_zero_modes: int

    def to_dict(self) -> dict:
        return {
            "verdict": "STABLE" if self.stable else "UNSTABLE",
            "max_real": self.max_real,
            "near_zero_modes": self.near_zero_modes,
        }


def spectrum(sys: DescriptorSystem, A_eff, E=None) -> SpectrumReport:
    """Generalized eigenvalues of (A_eff, E), sorted by decreasing real part."""
    E = sys.E if E is None else E
    try:
        eig = linalg.eigvals(np.asarray(A_eff, dtype=float), E)
    except (linalg.LinAlgError, ValueError) as exc:
        raise SimulationError(f"Eigensolver failed: {exc}") from exc
    if not np.isfinite(eig).all():
        raise SimulationError("Infinite eigenvalues; E is singular")
    eig = eig[np.argsort(-eig.real, kind="stable")]
    max_real = float(eig.real.max()) if eig.size else -math.inf
    return SpectrumReport(
        eigenvalues=eig,
        max_real=max_real,
        stable=max_real <= STABILITY_TOL,
        near_zero_modes=int((np.abs(eig.real) <= NEAR_ZERO_TOL).sum()),
    )


def peak_report(ts: TimeSeries, nodes, t_from: float | None = None, t_to: float | None = None) -> float:
    """Largest |frequency deviation| in Hz over the frequency states among `nodes`."""
    nodes = sorted(set(nodes))
    if not nodes:
        raise ValueError("Empty node set")
    freq_nodes = [v for v in nodes if ts.is_frequency(v)]
    if not freq_nodes:
        raise ValueError(f"None of the nodes {nodes} is a frequency state")
    t_from = ts.t[0] if t_from is None else t_from
    t_to = ts.t[-1] if t_to is None else t_to
    if t_from > t_to or t_from < ts.t[0] - 1e-12 or t_to > ts.t[-1] + 1e-12:
        raise ValueError(f"Interval [{t_from}, {t_to}] outside the simulated horizon")
    mask = (ts.t >= t_from - 1e-12) & (ts.t <= t_to + 1e-12)
    return float(max(np.abs(ts.frequency_hz(v)[mask]).max() for v in freq_nodes))


def sweep_filter_constants(sys: DescriptorSystem, feedback: FeedbackLaw, scenario: Scenario, taus,
                           A_eff=None, workers: int = 1, verbose: bool = False,
                           nominal_hz: float = DEFAULT_NOMINAL_HZ) -> dict[float, TimeSeries]:
    """Filtered closed-loop runs, one per tau, returned in the order given."""
    A_eff = sys.A_mat if A_eff is None else A_eff
    taus = [float(tau) for tau in taus]

    def run(tau):
        if verbose:
            print(f"Simulating filtered feedback with tau = {tau} s...")
        return simulate(sys, A_eff, scenario.with_controller("filtered", tau), feedback, nominal_hz=nominal_hz)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = list(pool.map(run, taus))
    return dict(zip(taus, results))


if __name__ == "__main__":
    from src.config import DEFAULT_CASE, DEFAULT_STEPS
    from src.decouple import prepare_system
    from src.powergrid import load_case

    case = load_case(DEFAULT_CASE)
    model = prepare_system(case)
    scenario = Scenario(disturbances=tuple(Disturbance(*step) for step in DEFAULT_STEPS))
    print(f"Open-loop run on {DEFAULT_CASE.name} ({scenario.horizon:g} s, dt = {scenario.dt:g} s)")
    print("=" * 50)
    ts = simulate(model.system, model.system.A_mat, scenario, nominal_hz=case.nominal_hz)
    steady = steady_state_report(ts)
    print(f"Mean drift slope: {steady.drift_slopes.mean():.6g} rad/s")
    print(f"Peak frequency deviation: {peak_report(ts, ts.node_of_state[:ts.r]):.6g} Hz")
