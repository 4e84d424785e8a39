"""Interaction drift, RK4 integration of the controlled system, feedback law."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scenario import KernelSpec, Scenario, StaticPair


class IntegrationError(RuntimeError):
    """State became non-finite during integration."""

    def __init__(self, time: float):
        super().__init__(f"non-finite state at t = {time}")
        self.time = time


@dataclass(frozen=True, eq=False)
class ParticleState:
    """Positions of N particles in R^d at one time."""

    positions: np.ndarray  # (N, d)
    time: float

    def __post_init__(self):
        positions = np.asarray(self.positions, dtype=float)
        if positions.ndim != 2:
            raise ValueError("positions must be a 2-d array (N, d)")
        object.__setattr__(self, "positions", positions)


@dataclass(frozen=True, eq=False)
class ControlGrid:
    """Piecewise-constant per-particle controls on a uniform time grid.

    values[m] applies on [times[m], times[m+1]); the node-M control reuses
    the last interval's value.
    """

    times: np.ndarray   # (M+1,)
    values: np.ndarray  # (M, N, d)

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if values.shape[0] != times.shape[0] - 1:
            raise ValueError("need exactly one control value per grid interval")
        steps = np.diff(times)
        if not np.allclose(steps, steps[0], rtol=1e-12, atol=1e-12):
            raise ValueError("control grid must be uniformly spaced")
        if not np.all(np.isfinite(values)):
            raise ValueError("control values must be finite")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    def node_values(self) -> np.ndarray:
        """Controls sampled at every node, (M+1, N, d); node M reuses values[-1]."""
        return np.concatenate([self.values, self.values[-1:]], axis=0)

    @staticmethod
    def zeros(s: Scenario) -> "ControlGrid":
        return ControlGrid(times=s.node_times(), values=np.zeros((s.M, s.N, s.d)))


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Particle positions at all node times plus integrator metadata."""

    times: np.ndarray       # (M+1,)
    positions: np.ndarray   # (M+1, N, d)
    control: ControlGrid
    dt: float
    scheme: str = "rk4"
    substeps: int = 1

    def state_at(self, m: int) -> ParticleState:
        return ParticleState(positions=self.positions[m], time=float(self.times[m]))


def drift(state: ParticleState, s: Scenario) -> np.ndarray:
    """Mean pairwise interaction velocity (1/N) sum_i P(psi_i - psi_k), per particle."""
    return _drift(state.positions, s.kernel)


def _drift(positions: np.ndarray, kernel: KernelSpec) -> np.ndarray:
    if kernel.variant == "zero":
        return np.zeros_like(positions)
    n = positions.shape[0]
    diff = positions[:, None, :] - positions[None, :, :]  # diff[i, k] = psi_i - psi_k
    return kernel.apply(diff).sum(axis=0) / n


def _drift_vjp(positions: np.ndarray, v: np.ndarray, kernel: KernelSpec) -> np.ndarray:
    """Transposed-Jacobian product of the drift map with v, shape (N, d).

    Diagonal pair terms cancel between the two sums, so all pairs are kept.
    """
    n = positions.shape[0]
    if kernel.variant == "zero":
        return np.zeros_like(v)
    if kernel.variant == "linear":
        return kernel.kappa * (v.sum(axis=0) / n - v)
    diff = positions[:, None, :] - positions[None, :, :]
    # T[a, b] = DP(psi_a - psi_b)^T v_b; row sums give the incoming term
    # sum_k DP(psi_j - psi_k)^T v_k, column sums the outgoing term
    # [sum_i DP(psi_i - psi_j)]^T v_j
    t = kernel.dp_t_apply(diff, np.broadcast_to(v[None, :, :], diff.shape))
    return (t.sum(axis=1) - t.sum(axis=0)) / n


def _rk4_step(positions: np.ndarray, u: np.ndarray, h: float, kernel: KernelSpec, substeps: int = 1):
    """One control interval of classical RK4 with constant control u.

    Returns the new positions and the stage-input tape consumed by the
    adjoint sweep: one (x1, x2, x3, x4) tuple per substep.
    """
    hs = h / substeps
    tape = []
    x = positions
    for _ in range(substeps):
        k1 = _drift(x, kernel) + u
        x2 = x + 0.5 * hs * k1
        k2 = _drift(x2, kernel) + u
        x3 = x + 0.5 * hs * k2
        k3 = _drift(x3, kernel) + u
        x4 = x + hs * k3
        k4 = _drift(x4, kernel) + u
        tape.append((x, x2, x3, x4))
        x = x + (hs / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return x, tape


def _rk4_step_vjp(tape, lam: np.ndarray, h: float, kernel: KernelSpec):
    """Reverse sweep of one control interval; returns (state adjoint, control gradient)."""
    substeps = len(tape)
    hs = h / substeps
    lam_u = np.zeros_like(lam)
    for x1, x2, x3, x4 in reversed(tape):
        l_k1 = (hs / 6.0) * lam
        l_k2 = (hs / 3.0) * lam
        l_k3 = (hs / 3.0) * lam
        l_k4 = (hs / 6.0) * lam
        lam_s = lam.copy()

        g4 = _drift_vjp(x4, l_k4, kernel)
        lam_u += l_k4
        lam_s += g4
        l_k3 = l_k3 + hs * g4

        g3 = _drift_vjp(x3, l_k3, kernel)
        lam_u += l_k3
        lam_s += g3
        l_k2 = l_k2 + 0.5 * hs * g3

        g2 = _drift_vjp(x2, l_k2, kernel)
        lam_u += l_k2
        lam_s += g2
        l_k1 = l_k1 + 0.5 * hs * g2

        g1 = _drift_vjp(x1, l_k1, kernel)
        lam_u += l_k1
        lam_s += g1

        lam = lam_s
    return lam, lam_u


def integrate(initial: ParticleState, u: ControlGrid, s: Scenario, substeps: int | None = None) -> Trajectory:
    """Integrate the controlled system with one RK4 step per control interval.

    substeps > 1 subdivides each interval (same constant control) for
    convergence studies.
    """
    if initial.time != s.a:
        raise ValueError(f"initial state time {initial.time} != scenario start {s.a}")
    substeps = substeps if substeps is not None else s.solver.substeps
    m_steps = u.values.shape[0]
    dt = u.dt
    out = np.empty((m_steps + 1,) + initial.positions.shape)
    out[0] = initial.positions
    x = initial.positions
    for m in range(m_steps):
        x, _ = _rk4_step(x, u.values[m], dt, s.kernel, substeps)
        if not np.all(np.isfinite(x)):
            raise IntegrationError(float(u.times[m + 1]))
        out[m + 1] = x
    return Trajectory(times=u.times.copy(), positions=out, control=u, dt=dt, substeps=substeps)


def feedback_control(state: ParticleState, pair: StaticPair, s: Scenario) -> np.ndarray:
    """Stabilizing feedback beta*(psi_sigma - psi_k) minus the interaction drift.

    Adding the drift back cancels exactly, so the closed-loop velocity is
    beta*(psi_sigma - psi_k).
    """
    return s.beta * (pair.psi_sigma - state.positions) - _drift(state.positions, s.kernel)


def simulate_feedback(initial: ParticleState, pair: StaticPair, s: Scenario,
                      substeps: int | None = None) -> tuple[Trajectory, ControlGrid]:
    """Integrate the feedback closed loop; distances to the static state contract
    like exp(-beta (t - a)).

    The feedback is re-evaluated at every RK4 stage (true closed loop); the
    returned ControlGrid holds the left-node samples of the feedback law.
    """
    if initial.time != s.a:
        raise ValueError(f"initial state time {initial.time} != scenario start {s.a}")
    substeps = substeps if substeps is not None else s.solver.substeps
    kernel = s.kernel
    beta, psi_sigma = s.beta, pair.psi_sigma

    def closed_loop(x: np.ndarray) -> np.ndarray:
        fb = beta * (psi_sigma - x) - _drift(x, kernel)
        return _drift(x, kernel) + fb

    times = s.node_times()
    dt = s.dt
    hs = dt / substeps
    positions = np.empty((s.M + 1, s.N, s.d))
    controls = np.empty((s.M, s.N, s.d))
    x = initial.positions
    positions[0] = x
    for m in range(s.M):
        controls[m] = beta * (psi_sigma - x) - _drift(x, kernel)
        for _ in range(substeps):
            k1 = closed_loop(x)
            k2 = closed_loop(x + 0.5 * hs * k1)
            k3 = closed_loop(x + 0.5 * hs * k2)
            k4 = closed_loop(x + hs * k3)
            x = x + (hs / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(x)):
            raise IntegrationError(float(times[m + 1]))
        positions[m + 1] = x

    grid = ControlGrid(times=times, values=controls)
    traj = Trajectory(times=times, positions=positions, control=grid, dt=dt, substeps=substeps)
    return traj, grid
