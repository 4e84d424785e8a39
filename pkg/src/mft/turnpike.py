"""Interior-decay (turnpike) quantities, bound checks, witness times, horizon sweeps."""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .measure import empirical
from .objective import dissipativity_deficit, distance_samples
from .ocp import OptimalSolution, solve
from .scenario import EffectiveConstants, Scenario, SolverConfig, StaticPair, estimate_constants


def first_order_coefficient(c0: float, lam: float, horizon: float) -> float:
    """Decay coefficient of the first-order tail bound: C0^2 / (lambda * (b-a))."""
    return c0**2 / (lam * horizon)


def second_order_coefficient(c0: float, alpha: float, horizon: float) -> float:
    """Decay coefficient of the refined tail bound: C0^3 / (alpha (1-alpha)^2 (b-a)^2)."""
    return c0**3 / (alpha * (1.0 - alpha) ** 2 * horizon**2)


def sqrt_window_coefficient(c0: float, horizon: float) -> float:
    """Decay coefficient of the sqrt-window tail bound: C0^3 / (sqrt(b-a)(sqrt(b-a)-1)).

    Substituting alpha = 1 - 1/sqrt(b-a) into the refined coefficient gives
    exactly this value; requires b - a > 1.
    """
    rt = math.sqrt(horizon)
    return c0**3 / (rt * (rt - 1.0))


@dataclass(frozen=True, eq=False)
class TurnpikeReport:
    """Left/right sides and margins of every tail bound, plus the inputs used.

    Margins are rhs - lhs. Bound checks are only asserted downstream when the
    gate holds (measured dissipativity deficit >= -deficit_tol), because the
    tail bounds consume dissipativity as a hypothesis. The sqrt-window fields
    are None when b - a <= 1.
    """

    scenario_digest: str
    a: float
    b: float
    lam: float
    alpha: float
    constants: EffectiveConstants
    initial_distance_mean: float        # (1/N) sum_k |psi0_k - psi_sigma|
    initial_distance_rms: float         # (1/N) sqrt(sum_k |psi0_k - psi_sigma|^2)
    min_deficit: float
    gate: bool
    deficit_tol: float
    c_diss: float
    A_star: float
    bound_first_order: float
    margin_first_order: float
    lhs_second_order: float
    bound_second_order: float
    margin_second_order: float
    B_star: float | None
    bound_sqrt_window: float | None
    margin_sqrt_window: float | None
    sqrt_window_note: str | None
    A_star_measure: float
    bound_measure: float
    margin_measure: float
    t0: float | None                    # witness in [a, a + lam (b-a)]
    t1: float | None                    # witness in [b - alpha (b-a), b - alpha^2 (b-a)]
    solver_value: float
    solver_termination: str


@dataclass(frozen=True, eq=False)
class SweepRow:
    b: float
    report: TurnpikeReport | None
    error: str | None = None


@dataclass(frozen=True, eq=False)
class SweepTable:
    rows: list
    slope_A_star: float | None          # log-log slope of A_star vs (b - a)
    slope_reference: float = -1.0       # first-order bound decays like 1/(b-a)


def _gap_samples(sol: OptimalSolution, pair: StaticPair) -> np.ndarray:
    """(1/N) (|psi - psi_s|_N + |u - u_s|_N)^2 at every node time."""
    psi_norm, u_norm = distance_samples(sol.trajectory, sol.control, pair)
    return (psi_norm + u_norm) ** 2 / sol.trajectory.positions.shape[1]


def _snap(times: np.ndarray, t_lo: float) -> int:
    return int(np.argmin(np.abs(times - t_lo)))


def _tail_trapezoid(samples: np.ndarray, times: np.ndarray, j: int) -> float:
    if j >= len(times) - 1:
        return 0.0
    return float(np.trapezoid(samples[j:], dx=float(times[1] - times[0])))


def interior_metric(sol: OptimalSolution, pair: StaticPair, t_lo: float) -> float:
    """Tail integral (1/N) int_{t_lo}^{b} (|psi-psi_s|_N + |u-u_s|_N)^2 dt.

    t_lo is snapped to the nearest node; the integral uses the same
    trapezoid rule as the objective.
    """
    times = sol.trajectory.times
    if not times[0] - 1e-12 <= t_lo <= times[-1] + 1e-12:
        raise ValueError(f"t_lo = {t_lo} outside [{times[0]}, {times[-1]}]")
    samples = _gap_samples(sol, pair)
    return _tail_trapezoid(samples, times, _snap(times, t_lo))


def _earliest_witness(times: np.ndarray, samples: np.ndarray, window: tuple, threshold: float) -> float | None:
    lo, hi = window
    mask = (times >= lo - 1e-12) & (times <= hi + 1e-12)
    idx = np.nonzero(mask & (samples <= threshold))[0]
    return float(times[idx[0]]) if idx.size else None


def _measure_tail(sol: OptimalSolution, pair: StaticPair, j: int) -> float:
    """Tail integral of the empirical-measure integrand
    int (|x - psi_s|^2 + |u - u_s|^2) d mu_N, trapezoid from node j."""
    traj, grid = sol.trajectory, sol.control
    u_nodes = grid.node_values()
    psi_s, u_s = pair.psi_sigma, pair.u_sigma
    vals = np.empty(traj.positions.shape[0])
    for m in range(traj.positions.shape[0]):
        mu = empirical(traj.positions[m])
        state_term = mu.integrate(lambda x: np.sum((x - psi_s) ** 2, axis=-1))
        control_term = float(np.mean(np.sum((u_nodes[m] - u_s) ** 2, axis=-1)))
        vals[m] = state_term + control_term
    return _tail_trapezoid(vals, traj.times, j)


def theorem_bounds(sol: OptimalSolution, consts: EffectiveConstants,
                   lam: float | None = None, alpha: float | None = None) -> TurnpikeReport:
    """Evaluate every tail bound on a solved trajectory and report margins.

    Windows: first-order bound on [a + lam(b-a), b]; refined bound on
    [a + (1-alpha^2)(b-a), b]; sqrt-window bound on [a + 2 sqrt(b-a) - 1, b]
    for b - a > 1. Witness times t0, t1 are located by grid search; "not
    found" is reported as None (diagnostic, not an error).
    """
    if sol.scenario is None or sol.pair is None:
        raise ValueError("solution must carry its scenario and static pair")
    s, pair = sol.scenario, sol.pair
    lam = s.lam if lam is None else lam
    alpha = s.alpha if alpha is None else alpha
    a, b = s.a, s.b
    horizon = b - a
    c0 = consts.C0

    dist = np.linalg.norm(s.initial - pair.psi_sigma, axis=1)
    mean_dist = float(dist.mean())
    rms_dist = float(np.sqrt(np.sum(dist**2)) / s.N)

    curve = dissipativity_deficit(sol.trajectory, sol.control, pair, s)
    gate = curve.min_deficit >= -s.deficit_tol

    times = sol.trajectory.times
    samples = _gap_samples(sol, pair)

    a_star = _tail_trapezoid(samples, times, _snap(times, a + lam * horizon))
    bound_first = first_order_coefficient(c0, lam, horizon) * mean_dist

    j_second = _snap(times, a + (1.0 - alpha**2) * horizon)
    lhs_second = _tail_trapezoid(samples, times, j_second)
    bound_second = second_order_coefficient(c0, alpha, horizon) * mean_dist

    if horizon > 1.0:
        j_sqrt = _snap(times, a + 2.0 * math.sqrt(horizon) - 1.0)
        b_star = _tail_trapezoid(samples, times, j_sqrt)
        bound_sqrt = sqrt_window_coefficient(c0, horizon) * rms_dist
        margin_sqrt = bound_sqrt - b_star
        note = None
    else:
        b_star = bound_sqrt = margin_sqrt = None
        note = "requires b - a > 1"

    j_measure = _snap(times, a + lam * horizon)
    a_star_measure = _measure_tail(sol, pair, j_measure)
    initial_measure_dist = empirical(s.initial).integrate(
        lambda x: np.linalg.norm(x - pair.psi_sigma, axis=-1))
    bound_measure = first_order_coefficient(c0, lam, horizon) * initial_measure_dist

    t0 = _earliest_witness(
        times, samples, (a, a + lam * horizon),
        c0 * mean_dist / (lam * horizon))
    t1 = _earliest_witness(
        times, samples, (b - alpha * horizon, b - alpha**2 * horizon),
        second_order_coefficient(c0, alpha, horizon) / c0 * mean_dist)

    return TurnpikeReport(
        scenario_digest=s.digest(),
        a=a, b=b, lam=lam, alpha=alpha,
        constants=consts,
        initial_distance_mean=mean_dist,
        initial_distance_rms=rms_dist,
        min_deficit=curve.min_deficit,
        gate=bool(gate),
        deficit_tol=s.deficit_tol,
        c_diss=s.c_diss,
        A_star=a_star,
        bound_first_order=bound_first,
        margin_first_order=bound_first - a_star,
        lhs_second_order=lhs_second,
        bound_second_order=bound_second,
        margin_second_order=bound_second - lhs_second,
        B_star=b_star,
        bound_sqrt_window=bound_sqrt,
        margin_sqrt_window=margin_sqrt,
        sqrt_window_note=note,
        A_star_measure=a_star_measure,
        bound_measure=bound_measure,
        margin_measure=bound_measure - a_star_measure,
        t0=t0, t1=t1,
        solver_value=sol.value,
        solver_termination=sol.termination,
    )


def _sweep_one(s: Scenario, b: float, lam: float, alpha: float, cfg: SolverConfig | None) -> SweepRow:
    try:
        sb = s.with_horizon(b)
        sol = solve(sb, cfg)
        consts = estimate_constants(sb)
        return SweepRow(b=b, report=theorem_bounds(sol, consts, lam, alpha))
    except Exception as exc:  # per-row failures recorded, sweep continues
        return SweepRow(b=b, report=None, error=f"{type(exc).__name__}: {exc}")


def horizon_sweep(s: Scenario, b_list, lam: float | None = None, alpha: float | None = None,
                  cfg: SolverConfig | None = None) -> SweepTable:
    """Solve the same initial problem over increasing horizons and tabulate bounds.

    Also fits the log-log slope of A_star against b - a; the first-order
    bound predicts slope -1, faster decay is common, so the slope is a
    diagnostic while the per-row margin is the assertion.
    """
    b_list = [float(b) for b in b_list]
    if any(y <= x for x, y in zip(b_list, b_list[1:])):
        raise ValueError("b list must be strictly ascending")
    if any(b <= s.a for b in b_list):
        raise ValueError("every b must exceed a")
    lam = s.lam if lam is None else lam
    alpha = s.alpha if alpha is None else alpha

    workers = max(1, int(os.environ.get("MFT_THREADS", "1")))
    if workers > 1 and len(b_list) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(lambda b: _sweep_one(s, b, lam, alpha, cfg), b_list))
    else:
        rows = [_sweep_one(s, b, lam, alpha, cfg) for b in b_list]

    pts = [(r.b - s.a, r.report.A_star) for r in rows if r.report is not None and r.report.A_star > 0.0]
    slope = None
    if len(pts) >= 2:
        x = np.log([p[0] for p in pts])
        y = np.log([p[1] for p in pts])
        slope = float(np.polyfit(x, y, 1)[0])
    return SweepTable(rows=rows, slope_A_star=slope)
