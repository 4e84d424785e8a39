"""Command-line entry point: subcommands wiring the modules to CSV/JSON reports."""

from __future__ import annotations

import argparse
import hashlib
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .dynamics import ControlGrid, IntegrationError, ParticleState, Trajectory, integrate, simulate_feedback
from .measure import convergence_study
from .objective import dissipativity_deficit, objective
from .ocp import solve
from .scenario import ConfigError, Scenario, compute_static_pair, estimate_constants, load_scenario
from .turnpike import SweepTable, TurnpikeReport, horizon_sweep, theorem_bounds

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


class NumericalFailure(RuntimeError):
    """Solver stall or sweep-row failure surfaced under --strict."""


@dataclass(frozen=True)
class RunManifest:
    """Provenance record written next to every file-producing run."""

    subcommand: str
    config_digest: str
    seed: int | None
    version: str
    duration_seconds: float
    outputs: list

    def as_dict(self) -> dict:
        return {
            "subcommand": self.subcommand,
            "config_digest": self.config_digest,
            "seed": self.seed,
            "version": self.version,
            "duration_seconds": self.duration_seconds,
            "outputs": self.outputs,
        }


# --------------------------------------------------------------------------
# deterministic serialization: floats at 17 significant digits (round-trip exact)

def _fmt_float(x: float) -> str:
    text = format(float(x), ".17g")
    if not any(ch in text for ch in (".", "e", "n", "i")):  # keep a float marker
        text += ".0"
    return text


def _json_value(value, indent: int) -> str:
    pad = " " * indent
    if value is None:
        return "null"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return _fmt_float(value)
    if isinstance(value, str):
        import json as _json

        return _json.dumps(value)
    if isinstance(value, dict):
        if not value:
            return "{}"
        items = [f'{pad}  "{k}": {_json_value(v, indent + 2)}' for k, v in value.items()]
        return "{\n" + ",\n".join(items) + "\n" + pad + "}"
    if isinstance(value, (list, tuple, np.ndarray)):
        seq = list(value)
        if not seq:
            return "[]"
        items = [f"{pad}  {_json_value(v, indent + 2)}" for v in seq]
        return "[\n" + ",\n".join(items) + "\n" + pad + "]"
    raise TypeError(f"cannot serialize {type(value).__name__}")


def render_json(report: dict) -> str:
    return _json_value(report, 0) + "\n"


def _csv_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return _fmt_float(value)
    return str(value)


def render_csv(header: list, rows: list) -> str:
    lines = [",".join(header)]
    lines += [",".join(_csv_cell(v) for v in row) for row in rows]
    return "\n".join(lines) + "\n"


def emit_report(report, fmt: str, path: str | Path) -> None:
    """Write a report deterministically: same report, byte-identical file."""
    path = Path(path)
    if fmt == "json":
        text = render_json(report)
    elif fmt == "csv":
        header, rows = report
        text = render_csv(header, rows)
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    try:
        path.write_text(text)
    except OSError as exc:
        raise OSError(f"cannot write report to {path}: {exc}") from None


# --------------------------------------------------------------------------
# report shaping

def trajectory_rows(traj: Trajectory, grid: ControlGrid):
    n, d = traj.positions.shape[1:]
    header = ["t", "particle"] + [f"x_{i}" for i in range(d)] + [f"u_{i}" for i in range(d)]
    controls = grid.node_values()
    rows = []
    for m, t in enumerate(traj.times):
        for k in range(n):
            rows.append([float(t), k, *traj.positions[m, k], *controls[m, k]])
    return header, rows


def turnpike_report_dict(rep: TurnpikeReport) -> dict:
    return {
        "scenario_digest": rep.scenario_digest,
        "a": rep.a,
        "b": rep.b,
        "lambda": rep.lam,
        "alpha": rep.alpha,
        "constants": rep.constants.as_dict(),
        "initial_distance_mean": rep.initial_distance_mean,
        "initial_distance_rms": rep.initial_distance_rms,
        "min_deficit": rep.min_deficit,
        "gate": rep.gate,
        "deficit_tol": rep.deficit_tol,
        "c_diss": rep.c_diss,
        "A_star": rep.A_star,
        "bound_first_order": rep.bound_first_order,
        "margin_first_order": rep.margin_first_order,
        "lhs_second_order": rep.lhs_second_order,
        "bound_second_order": rep.bound_second_order,
        "margin_second_order": rep.margin_second_order,
        "B_star": rep.B_star,
        "bound_sqrt_window": rep.bound_sqrt_window,
        "margin_sqrt_window": rep.margin_sqrt_window,
        "sqrt_window_note": rep.sqrt_window_note,
        "A_star_measure": rep.A_star_measure,
        "bound_measure": rep.bound_measure,
        "margin_measure": rep.margin_measure,
        "t0": rep.t0,
        "t1": rep.t1,
        "solver_value": rep.solver_value,
        "solver_termination": rep.solver_termination,
    }


SWEEP_COLUMNS = ["b", "A_star", "bound_first_order", "margin_first_order",
                 "lhs_second_order", "bound_second_order", "B_star", "bound_sqrt_window",
                 "min_deficit", "gate", "t0", "t1"]


def sweep_rows(table: SweepTable):
    rows = []
    for row in table.rows:
        if row.report is None:
            rows.append([row.b] + [None] * (len(SWEEP_COLUMNS) - 1))
            continue
        r = row.report
        rows.append([r.b, r.A_star, r.bound_first_order, r.margin_first_order,
                     r.lhs_second_order, r.bound_second_order, r.B_star, r.bound_sqrt_window,
                     r.min_deficit, r.gate, r.t0, r.t1])
    return SWEEP_COLUMNS, rows


# --------------------------------------------------------------------------
# subcommand implementations

def _load(args) -> tuple[Scenario, str]:
    path = Path(args.config)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return load_scenario(raw.decode()), hashlib.sha256(raw).hexdigest()


def _write_manifest(subcommand: str, digest: str, scenario: Scenario, started: float, outputs: list):
    if not outputs:
        return
    manifest = RunManifest(
        subcommand=subcommand,
        config_digest=digest,
        seed=scenario.seed,
        version=__version__,
        duration_seconds=time.perf_counter() - started,
        outputs=[str(p) for p in outputs],
    )
    primary = Path(outputs[0])
    emit_report(manifest.as_dict(), "json", primary.with_name(primary.stem + ".manifest.json"))


def _cmd_simulate(args) -> int:
    started = time.perf_counter()
    s, digest = _load(args)
    grid = ControlGrid.zeros(s)
    traj = integrate(ParticleState(s.initial, s.a), grid, s)
    emit_report(trajectory_rows(traj, grid), "csv", args.out)
    _write_manifest("simulate", digest, s, started, [args.out])
    return EXIT_OK


def _cmd_feedback(args) -> int:
    started = time.perf_counter()
    s, digest = _load(args)
    pair = compute_static_pair(s)
    traj, grid = simulate_feedback(ParticleState(s.initial, s.a), pair, s)
    emit_report(trajectory_rows(traj, grid), "csv", args.out)
    _write_manifest("feedback", digest, s, started, [args.out])
    return EXIT_OK


def _cmd_constants(args) -> int:
    started = time.perf_counter()
    s, digest = _load(args)
    consts = estimate_constants(s, args.radius)
    if args.out:
        emit_report(consts.as_dict(), "json", args.out)
        _write_manifest("constants", digest, s, started, [args.out])
    else:
        sys.stdout.write(render_json(consts.as_dict()))
    return EXIT_OK


def _cmd_solve(args) -> int:
    started = time.perf_counter()
    s, digest = _load(args)
    sol = solve(s)
    if args.strict and sol.termination == "line-search stall":
        raise NumericalFailure("solver line-search stall")
    outputs = []
    if args.out_traj:
        emit_report(trajectory_rows(sol.trajectory, sol.control), "csv", args.out_traj)
        outputs.append(args.out_traj)
    report = {
        "V": sol.value,
        "state_part": sol.breakdown.state_part,
        "control_part": sol.breakdown.control_part,
        "iterations": sol.iterations,
        "grad_norm": sol.grad_norm,
        "termination": sol.termination,
    }
    if args.out_report:
        emit_report(report, "json", args.out_report)
        outputs.append(args.out_report)
    else:
        sys.stdout.write(render_json(report))
    _write_manifest("solve", digest, s, started, outputs)
    return EXIT_OK


def _cmd_dissipativity(args) -> int:
    started = time.perf_counter()
    s, digest = _load(args)
    pair = compute_static_pair(s)
    if args.policy == "feedback":
        traj, grid = simulate_feedback(ParticleState(s.initial, s.a), pair, s)
    else:
        sol = solve(s)
        traj, grid = sol.trajectory, sol.control
    curve = dissipativity_deficit(traj, grid, pair, s)
    rows = list(zip(curve.tau, curve.lhs, curve.rhs, curve.deficit))
    emit_report((["tau", "lhs", "rhs", "deficit"], rows), "csv", args.out)
    _write_manifest("dissipativity", digest, s, started, [args.out])
    return EXIT_OK


def _cmd_turnpike(args) -> int:
    started = time.perf_counter()
    s, digest = _load(args)
    sol = solve(s)
    if args.strict and sol.termination == "line-search stall":
        raise NumericalFailure("solver line-search stall")
    report = turnpike_report_dict(theorem_bounds(sol, estimate_constants(s)))
    if args.out:
        emit_report(report, "json", args.out)
        _write_manifest("turnpike", digest, s, started, [args.out])
    else:
        sys.stdout.write(render_json(report))
    return EXIT_OK


def _cmd_sweep(args) -> int:
    started = time.perf_counter()
    s, digest = _load(args)
    b_list = [float(x) for x in args.b.split(",")]
    table = horizon_sweep(s, b_list)
    if args.strict:
        failed = [row for row in table.rows if row.error is not None]
        if failed:
            raise NumericalFailure(f"sweep row b = {failed[0].b} failed: {failed[0].error}")
    emit_report(sweep_rows(table), "csv", args.out)
    _write_manifest("sweep", digest, s, started, [args.out])
    return EXIT_OK


def _cmd_meanfield(args) -> int:
    started = time.perf_counter()
    s, digest = _load(args)
    n_list = [int(x) for x in args.n_list.split(",")]
    seeds = [int(x) for x in args.seeds.split(",")]
    report = convergence_study(s, n_list, policy=args.policy, seeds=seeds)
    medians = report.median_by_n()
    j_medians = {n: float(np.median([r.objective for r in report.rows if r.N == n])) for n in report.N_list}
    doc = {
        "N_list": report.N_list,
        "N_ref": report.N_ref,
        "seeds": report.seeds,
        "policy": report.policy,
        "rows": [{"seed": r.seed, "N": r.N, "sup_w1": r.sup_w1, "objective": r.objective} for r in report.rows],
        "median_sup_w1": [m[1] for m in medians],
        "median_objective_gap": [m[2] for m in medians],
    }
    outputs = []
    if args.out:
        emit_report(doc, "json", args.out)
        outputs.append(args.out)
    else:
        sys.stdout.write(render_json(doc))
    if args.out_csv:
        rows = [[n, med_w1, j_medians[n]] for n, med_w1, _ in medians]
        emit_report((["N", "sup_W1", "J_N"], rows), "csv", args.out_csv)
        outputs.append(args.out_csv)
    _write_manifest("meanfield", digest, s, started, outputs)
    return EXIT_OK


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mft",
        description="Particle consensus control lab: simulation, trajectory optimization, turnpike diagnostics.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config(p):
        p.add_argument("--config", required=True, help="TOML scenario file")

    p = sub.add_parser("simulate", help="integrate the zero-control system, write trajectory CSV")
    add_config(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("feedback", help="integrate the feedback closed loop, write trajectory CSV")
    add_config(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("constants", help="effective constants as JSON")
    add_config(p)
    p.add_argument("--radius", type=float, default=None, help="ball radius (default: max initial distance)")
    p.add_argument("--out", default=None)

    p = sub.add_parser("solve", help="solve the control problem")
    add_config(p)
    p.add_argument("--out-traj", default=None)
    p.add_argument("--out-report", default=None)
    p.add_argument("--strict", action="store_true", help="treat a line-search stall as failure")

    p = sub.add_parser("dissipativity", help="dissipativity curve as CSV")
    add_config(p)
    p.add_argument("--policy", choices=["feedback", "solved"], default="solved")
    p.add_argument("--out", required=True)

    p = sub.add_parser("turnpike", help="tail-bound report as JSON")
    add_config(p)
    p.add_argument("--out", default=None)
    p.add_argument("--strict", action="store_true")

    p = sub.add_parser("sweep", help="horizon sweep as CSV")
    add_config(p)
    p.add_argument("--b", required=True, help="comma-separated terminal times")
    p.add_argument("--out", required=True)
    p.add_argument("--strict", action="store_true")

    p = sub.add_parser("meanfield", help="particle-count convergence study")
    add_config(p)
    p.add_argument("--n-list", default="8,16,32,64")
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--policy", choices=["feedback", "solved"], default="feedback")
    p.add_argument("--out", default=None)
    p.add_argument("--out-csv", default=None)

    return parser


_COMMANDS = {
    "simulate": _cmd_simulate,
    "feedback": _cmd_feedback,
    "constants": _cmd_constants,
    "solve": _cmd_solve,
    "dissipativity": _cmd_dissipativity,
    "turnpike": _cmd_turnpike,
    "sweep": _cmd_sweep,
    "meanfield": _cmd_meanfield,
}


def dispatch(argv) -> int:
    """Run one subcommand; exit code 0 on success, 2 on config error, 3 on numerical failure."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (IntegrationError, NumericalFailure, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def main(argv=None) -> int:
    return dispatch(sys.argv[1:] if argv is None else argv)


if __name__ == "__main__":
    sys.exit(main())
