import argparse
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from src.config import (
    CSV_FLOAT_FORMAT,
    DEFAULT_CASE,
    DEFAULT_DISTURBANCE_NODES,
    DEFAULT_DT,
    DEFAULT_HORIZON,
    DEFAULT_STEPS,
    DEFAULT_TARGET_NODES,
    LOAD_DAMPING_EPS,
    OUTPUT_DIR,
    STEADY_STATE_WINDOW,
)
from src.decouple import (
    DecouplingError,
    closed_loop,
    closed_loop_partition,
    load_solution,
    prepare_system,
    save_solution,
    solve_ddp_on_system,
    verify_solution,
)
from src.netgraph import InfeasiblePlacement, save_graph
from src.oscillator import ModelError, NoConvergence, NotCohesive
from src.plots import plot_timeseries
from src.powergrid import CaseError, case_summary, load_case
from src.sim import (
    Disturbance,
    Scenario,
    SimulationError,
    filtered_system,
    ideal_closed_loop,
    load_scenario,
    peak_report,
    simulate,
    spectrum,
    steady_state_report,
)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_INFEASIBLE = 2
EXIT_VERIFICATION = 3


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage, which would read as INFEASIBLE
    def error(self, message):
        raise UsageError(message)


@dataclass
class RunConfig:
    case: Path = DEFAULT_CASE
    disturb: tuple[int, ...] = DEFAULT_DISTURBANCE_NODES
    target: tuple[int, ...] = DEFAULT_TARGET_NODES
    out_dir: Path = OUTPUT_DIR
    eps: float = LOAD_DAMPING_EPS
    flat_voltage: bool = False
    verbose: bool = False
    solution: Path | None = None
    scenario: Path | None = None
    steps: tuple[tuple[int, float, float], ...] = DEFAULT_STEPS
    horizon: float = DEFAULT_HORIZON
    dt: float = DEFAULT_DT
    open_loop: bool = False
    ideal: bool = False
    taus: tuple[float, ...] = ()
    plot: tuple[str, ...] = ()
    graph: bool = False

    def validate(self, needs_sets: bool = False, needs_solution: bool = False):
        if not Path(self.case).exists():
            raise FileNotFoundError(f"Case file not found: {self.case}")
        if needs_sets and (not self.disturb or not self.target):
            raise UsageError("Disturbance and target node lists must be nonempty")
        if needs_solution and (self.solution is None or not Path(self.solution).exists()):
            raise FileNotFoundError(f"Solution file not found: {self.solution}")
        if self.scenario is not None and not Path(self.scenario).exists():
            raise FileNotFoundError(f"Scenario file not found: {self.scenario}")


def _node_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated node ids, got '{text}'") from None


def _step(text: str) -> tuple[int, float, float]:
    parts = text.split(":")
    try:
        if len(parts) == 2:
            return int(parts[0]), float(parts[1]), 0.0
        if len(parts) == 3:
            return int(parts[0]), float(parts[1]), float(parts[2])
    except ValueError:
        pass
    raise argparse.ArgumentTypeError(f"expected node:amplitude[:start], got '{text}'")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ddp", description="Minimal-actuator disturbance decoupling for oscillator networks.")
    sub = parser.add_subparsers(dest="command", required=True)

    common = _Parser(add_help=False)
    common.add_argument("--case", type=Path, default=DEFAULT_CASE, help="Grid case JSON")
    common.add_argument("--out", type=Path, default=OUTPUT_DIR, help="Output directory")
    common.add_argument("--eps", type=float, default=LOAD_DAMPING_EPS, help="Load-side damping")
    common.add_argument("--flat-voltage", action="store_true", help="Ignore case voltages (V = 1)")
    common.add_argument("--verbose", action="store_true")

    sets = _Parser(add_help=False)
    sets.add_argument("--disturb", type=_node_list, default=DEFAULT_DISTURBANCE_NODES)
    sets.add_argument("--target", type=_node_list, default=DEFAULT_TARGET_NODES)

    sub.add_parser("place", parents=[common, sets], help="Minimal actuator placement")
    sub.add_parser("synthesize", parents=[common, sets], help="Placement, friend gain and verification")

    p_sim = sub.add_parser("simulate", parents=[common, sets], help="Time-domain runs")
    p_sim.add_argument("--solution", type=Path, help="Stored solution JSON (computed inline if omitted)")
    p_sim.add_argument("--scenario", type=Path, help="Scenario JSON")
    p_sim.add_argument("--step", type=_step, action="append", help="node:amplitude[:start], repeatable")
    p_sim.add_argument("--horizon", type=float, default=DEFAULT_HORIZON)
    p_sim.add_argument("--dt", type=float, default=DEFAULT_DT)
    p_sim.add_argument("--open-loop", action="store_true")
    p_sim.add_argument("--ideal", action="store_true")
    p_sim.add_argument("--tau", type=float, action="append", help="Filtered feedback time constant, repeatable")
    p_sim.add_argument("--plot", type=lambda s: tuple(c for c in s.split(",") if c), default=(),
                       help="Comma-separated CSV columns to plot as SVG")

    p_check = sub.add_parser("check", parents=[common], help="Re-verify a stored solution")
    p_check.add_argument("--solution", type=Path, required=True)

    p_info = sub.add_parser("case-info", parents=[common], help="Summarize a case")
    p_info.add_argument("--graph", action="store_true", help="Export the extended graph as JSON")
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    return RunConfig(
        case=args.case,
        disturb=getattr(args, "disturb", DEFAULT_DISTURBANCE_NODES),
        target=getattr(args, "target", DEFAULT_TARGET_NODES),
        out_dir=args.out,
        eps=args.eps,
        flat_voltage=args.flat_voltage,
        verbose=args.verbose,
        solution=getattr(args, "solution", None),
        scenario=getattr(args, "scenario", None),
        steps=tuple(getattr(args, "step", None) or DEFAULT_STEPS),
        horizon=getattr(args, "horizon", DEFAULT_HORIZON),
        dt=getattr(args, "dt", DEFAULT_DT),
        open_loop=getattr(args, "open_loop", False),
        ideal=getattr(args, "ideal", False),
        taus=tuple(getattr(args, "tau", None) or ()),
        plot=getattr(args, "plot", ()),
        graph=getattr(args, "graph", False),
    )


def _write_json(doc: dict, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2)
    return path


def _model(config: RunConfig):
    case = load_case(config.case)
    return prepare_system(case, eps=config.eps, flat_voltage=config.flat_voltage, verbose=config.verbose)


def cmd_place(config: RunConfig) -> int:
    config.validate(needs_sets=True)
    model = _model(config)
    path = config.out_dir / "placement.json"
    try:
        solution = solve_ddp_on_system(model.system, model.graph, config.disturb, config.target,
                                       model.labeling, verbose=config.verbose)
    except InfeasiblePlacement as exc:
        _write_json({
            "D": sorted(config.disturb),
            "T": sorted(config.target),
            "feasible": False,
            "reason": str(exc),
            "edge": list(exc.edge) if exc.edge else None,
        }, path)
        raise

    _write_json({
        "D": sorted(solution.disturbance_set),
        "T": sorted(solution.target_set),
        "B": sorted(solution.actuator_set),
        "C": sorted(solution.sensor_set),
        "Z": sorted(solution.invariant_core),
        "W": sorted(solution.working_set),
        "feasible": True,
    }, path)
    print(f"B = {sorted(solution.actuator_set)}, C = {sorted(solution.sensor_set)}")
    print(f"Placement saved to: {path}")
    return EXIT_OK


def cmd_synthesize(config: RunConfig) -> int:
    config.validate(needs_sets=True)
    model = _model(config)
    solution = solve_ddp_on_system(model.system, model.graph, config.disturb, config.target,
                                   model.labeling, verbose=config.verbose)
    path = config.out_dir / "solution.json"
    save_solution(solution, path)
    print(f"B = {sorted(solution.actuator_set)}, C = {sorted(solution.sensor_set)}")
    print(f"G = {solution.friend.tolist()}")
    print(f"Solution saved to: {path}")
    return EXIT_OK if solution.report.verified else EXIT_VERIFICATION


def _scenario(config: RunConfig) -> Scenario:
    if config.scenario is not None:
        return load_scenario(config.scenario)
    return Scenario(
        disturbances=tuple(Disturbance(node, amp, start) for node, amp, start in config.steps),
        horizon=config.horizon,
        dt=config.dt,
    )


def _run_modes(config: RunConfig) -> list[tuple[str, str, float | None]]:
    modes = []
    if config.open_loop:
        modes.append(("open_loop", "none", None))
    if config.ideal:
        modes.append(("ideal", "ideal", None))
    for tau in config.taus:
        modes.append((f"tau_{tau:g}", "filtered", tau))
    if not modes:
        modes = [("open_loop", "none", None), ("ideal", "ideal", None)]
    return modes


def _run_summary(ts, sys, A_run, E_run, decoupled_freq: list[int], scenario: Scenario) -> dict:
    window = min(STEADY_STATE_WINDOW, scenario.horizon)
    steady = steady_state_report(ts, window)
    slopes = steady.drift_slopes.to_numpy()
    spec = spectrum(sys, A_run, E_run)
    summary = {
        **steady.to_dict(),
        "slope_mean": float(slopes.mean()) if slopes.size else 0.0,
        "slope_spread": float(np.ptp(slopes)) if slopes.size else 0.0,
        "spectrum": spec.to_dict(),
        "decoupled_generators": decoupled_freq,
        "peaks_hz": {},
    }
    if decoupled_freq:
        summary["peaks_hz"]["all"] = peak_report(ts, decoupled_freq)
        for start in sorted({d.start for d in scenario.disturbances}):
            t_to = min(start + STEADY_STATE_WINDOW, ts.t[-1])
            summary["peaks_hz"][f"from_{start:g}"] = peak_report(ts, decoupled_freq, start, t_to)
    return summary


def cmd_simulate(config: RunConfig) -> int:
    config.validate(needs_solution=config.solution is not None)
    model = _model(config)
    sys_ = model.system

    if config.solution is not None:
        stored = load_solution(config.solution)
        d_set, feedback = stored.d, stored.feedback
    else:
        solution = solve_ddp_on_system(sys_, model.graph, config.disturb, config.target,
                                       model.labeling, verbose=config.verbose)
        d_set, feedback = solution.disturbance_set, solution.feedback
    A_cl = closed_loop(sys_, feedback.b_set, feedback.c_set, feedback.gain, strict=False)
    _, decoupled = closed_loop_partition(sys_, A_cl, d_set)
    decoupled_freq = sorted(v for v in decoupled if sys_.state_index(v) < sys_.r)

    scenario = _scenario(config)
    scenario.validate(sys_)
    summary = {"scenario": scenario.to_dict(), "B": list(feedback.b_set), "C": list(feedback.c_set), "runs": {}}

    for name, controller, tau in _run_modes(config):
        print(f"Simulating {name} ({scenario.horizon:g} s, dt = {scenario.dt:g} s)...")
        run = scenario.with_controller(controller, tau)
        ts = simulate(sys_, sys_.A_mat, run, feedback if controller != "none" else None,
                      nominal_hz=model.case.nominal_hz)

        if controller == "none":
            A_run, E_run = sys_.A_mat, None
        elif controller == "ideal":
            A_run, E_run = ideal_closed_loop(sys_, sys_.A_mat, feedback), None
        else:
            E_run, A_run = filtered_system(sys_, sys_.A_mat, feedback, tau)

        csv_path = config.out_dir / f"timeseries_{name}.csv"
        csv_path.parent.mkdir(parents=True, exist_ok=True)
        ts.to_frame().to_csv(csv_path, index=False, float_format=CSV_FLOAT_FORMAT)
        print(f"  Saved {csv_path}")
        summary["runs"][name] = _run_summary(ts, sys_, A_run, E_run, decoupled_freq, run)

        if config.plot:
            svg = plot_timeseries(ts, list(config.plot), config.out_dir / f"timeseries_{name}.svg", title=name)
            print(f"  Saved {svg}")

        if config.verbose:
            run_summary = summary["runs"][name]
            print(pd.DataFrame({
                "u_ss_total": [run_summary["u_ss_total"]],
                "slope_mean": [run_summary["slope_mean"]],
                "slope_spread": [run_summary["slope_spread"]],
                "verdict": [run_summary["spectrum"]["verdict"]],
            }).to_string(index=False))

    path = _write_json(summary, config.out_dir / "summary.json")
    print(f"Summary saved to: {path}")
    return EXIT_OK


def cmd_check(config: RunConfig) -> int:
    config.validate(needs_solution=True)
    model = _model(config)
    stored = load_solution(config.solution)
    for name, nodes in (("D", stored.d), ("T", stored.t), ("B", stored.b), ("C", stored.c)):
        bad = sorted(v for v in nodes if not 1 <= v <= model.graph.n)
        if bad:
            raise UsageError(f"Solution set {name} has nodes outside the case: {bad}")

    report = verify_solution(model.system, model.graph, stored.d, stored.t, stored.b, stored.c, stored.friend)
    checks = {
        "structural": report.structural,
        "zero_pattern": report.zero_pattern,
        "numeric": report.numeric_ok,
        "stable": report.stable,
    }
    doc = {"checks": checks, "passed": report.verified, "report": report.to_dict()}
    path = _write_json(doc, config.out_dir / "check_report.json")

    print("=" * 50)
    for name, ok in checks.items():
        print(f"{name:<14}{'PASS' if ok else 'FAIL'}")
    print("=" * 50)
    print(f"Report saved to: {path}")
    return EXIT_OK if report.verified else EXIT_VERIFICATION


def cmd_case_info(config: RunConfig) -> int:
    config.validate()
    case = load_case(config.case)
    table = case_summary(case)
    print(f"Case: {case.name or config.case}")
    print(f"Buses: {len(case.buses)}, lines: {len(case.lines)}, generators: {len(case.generators)}")
    print(f"Base: {case.base_mva:g} MVA, {case.nominal_hz:g} Hz, net injection {case.buses['p'].sum():.6g} p.u.")
    if config.verbose:
        print(table.to_string(index=False))

    csv_path = config.out_dir / "case_info.csv"
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    table.to_csv(csv_path, index=False, float_format=CSV_FLOAT_FORMAT)
    print(f"Bus table saved to: {csv_path}")

    if config.graph:
        model = prepare_system(case, eps=config.eps, flat_voltage=config.flat_voltage, verbose=config.verbose)
        graph_path = config.out_dir / "extended_graph.json"
        save_graph(model.graph, graph_path)
        print(f"Extended graph saved to: {graph_path}")
    return EXIT_OK


COMMANDS = {
    "place": cmd_place,
    "synthesize": cmd_synthesize,
    "simulate": cmd_simulate,
    "check": cmd_check,
    "case-info": cmd_case_info,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        config = config_from_args(args)
        return COMMANDS[args.command](config)
    except InfeasiblePlacement as e:
        print(f"Error: INFEASIBLE: {e}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (OSError, json.JSONDecodeError, CaseError, ModelError, ValueError) as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_ERROR
    except (NoConvergence, NotCohesive, SimulationError, DecouplingError) as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
