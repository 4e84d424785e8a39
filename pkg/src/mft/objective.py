"""Running cost, integral objective, dissipativity-deficit diagnostics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import ControlGrid, Trajectory
from .scenario import Scenario, StaticPair


@dataclass(frozen=True, eq=False)
class CostBreakdown:
    """Integral objective split into state and control contributions."""

    total: float
    state_part: float
    control_part: float
    node_samples: np.ndarray  # running cost at every node time


@dataclass(frozen=True, eq=False)
class DissipativityCurve:
    """Accumulated running cost vs accumulated squared distance to the static pair.

    Two right-hand-side forms are tracked: the squared-sum form
    (1/N)(|psi - psi_s|_N + |u - u_s|_N)^2 and the smaller sum-of-squares
    form (1/N) sum_k (|psi_k - psi_s|^2 + |u_k - u_s|^2), which is the
    empirical-measure integrand. deficit = lhs - c_diss * rhs.
    """

    tau: np.ndarray
    lhs: np.ndarray
    rhs: np.ndarray              # squared-sum form, scaled by c_diss in deficit
    rhs_sum_of_squares: np.ndarray
    deficit: np.ndarray
    min_deficit: float
    c_diss: float


def _check_grids(traj: Trajectory, u: ControlGrid):
    if traj.positions.shape[0] != u.values.shape[0] + 1 or not np.array_equal(traj.times, u.times):
        raise ValueError("trajectory and control grid do not share node times")


def running_cost(state, controls: np.ndarray, s: Scenario) -> float:
    """Mean per-particle running cost (1/N) sum_k [L(psi_k) + Psi(u_k)].

    state may be a ParticleState or a bare (N, d) positions array.
    """
    positions = state.positions if hasattr(state, "positions") else np.asarray(state, dtype=float)
    return float(np.mean(s.state_cost.evaluate(positions) + s.control_cost.evaluate(controls)))


def node_cost_samples(traj: Trajectory, u: ControlGrid, s: Scenario) -> tuple[np.ndarray, np.ndarray]:
    """State and control running-cost samples at every node time."""
    state_samples = s.state_cost.evaluate(traj.positions).mean(axis=1)
    control_samples = s.control_cost.evaluate(u.node_values()).mean(axis=1)
    return state_samples, control_samples


def trapezoid_weights(m: int, dt: float) -> np.ndarray:
    w = np.full(m + 1, dt)
    w[0] = w[-1] = 0.5 * dt
    return w


def objective(traj: Trajectory, u: ControlGrid, s: Scenario) -> CostBreakdown:
    """Composite-trapezoid value of the integral objective on the node grid.

    The control sample at a node is the value of the interval starting
    there; the final node reuses the last interval's control.
    """
    _check_grids(traj, u)
    state_samples, control_samples = node_cost_samples(traj, u, s)
    state_part = float(np.trapezoid(state_samples, dx=traj.dt))
    control_part = float(np.trapezoid(control_samples, dx=traj.dt))
    return CostBreakdown(
        total=state_part + control_part,
        state_part=state_part,
        control_part=control_part,
        node_samples=state_samples + control_samples,
    )


def distance_samples(traj: Trajectory, u: ControlGrid, pair: StaticPair):
    """Per-node aggregate distances |psi - psi_s|_N and |u - u_s|_N."""
    dpsi = traj.positions - pair.psi_sigma
    du = u.node_values() - pair.u_sigma
    psi_norm = np.sqrt(np.sum(dpsi * dpsi, axis=(1, 2)))
    u_norm = np.sqrt(np.sum(du * du, axis=(1, 2)))
    return psi_norm, u_norm


def _cumulative_trapezoid(samples: np.ndarray, dt: float) -> np.ndarray:
    out = np.empty_like(samples)
    out[0] = 0.0
    np.cumsum(0.5 * dt * (samples[1:] + samples[:-1]), out=out[1:])
    return out


def dissipativity_deficit(traj: Trajectory, u: ControlGrid, pair: StaticPair, s: Scenario) -> DissipativityCurve:
    """Measure, per node time tau, how far the accumulated running cost exceeds
    the accumulated squared distance to the static pair.

    Nothing is assumed about the sign: the deficit is a reported diagnostic,
    and downstream bound checks gate on its minimum.
    """
    _check_grids(traj, u)
    n = traj.positions.shape[1]
    state_samples, control_samples = node_cost_samples(traj, u, s)
    psi_norm, u_norm = distance_samples(traj, u, pair)

    f_samples = state_samples + control_samples
    squared_sum = (psi_norm + u_norm) ** 2 / n
    sum_of_squares = (psi_norm**2 + u_norm**2) / n

    lhs = _cumulative_trapezoid(f_samples, traj.dt)
    rhs = _cumulative_trapezoid(squared_sum, traj.dt)
    rhs_sos = _cumulative_trapezoid(sum_of_squares, traj.dt)
    deficit = lhs - s.c_diss * rhs
    return DissipativityCurve(
        tau=traj.times.copy(),
        lhs=lhs,
        rhs=rhs,
        rhs_sum_of_squares=rhs_sos,
        deficit=deficit,
        min_deficit=float(deficit.min()),
        c_diss=s.c_diss,
    )
