"""Direct transcription solver: exact discrete adjoints plus L-BFGS/Armijo descent."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .dynamics import (
    ControlGrid,
    IntegrationError,
    ParticleState,
    Trajectory,
    _rk4_step,
    _rk4_step_vjp,
    integrate,
    simulate_feedback,
)
from .objective import CostBreakdown, objective, trapezoid_weights
from .scenario import Scenario, SolverConfig, StaticPair, compute_static_pair

__all__ = ["SolverConfig", "OptimalSolution", "gradient", "solve", "optimal_value"]


@dataclass(frozen=True, eq=False)
class OptimalSolution:
    """Best control/trajectory pair found, with its certificate quantities.

    value equals objective(trajectory, control).total recomputed, bit for bit.
    The reported minimizer is the found local one; no uniqueness is claimed.
    """

    control: ControlGrid
    trajectory: Trajectory
    value: float
    breakdown: CostBreakdown
    iterations: int
    grad_norm: float
    termination: str                      # "gradient tolerance" | "iteration cap" | "line-search stall"
    log: list = field(default_factory=list)  # (iteration, objective, grad norm, step) tuples
    scenario: Scenario | None = None
    pair: StaticPair | None = None


def _forward_with_tape(u_values: np.ndarray, s: Scenario):
    """Integrate and keep the RK4 stage tape needed by the reverse sweep."""
    m_steps = u_values.shape[0]
    dt = (s.b - s.a) / m_steps
    positions = np.empty((m_steps + 1, s.N, s.d))
    positions[0] = s.initial
    tapes = []
    x = s.initial
    for m in range(m_steps):
        x, tape = _rk4_step(x, u_values[m], dt, s.kernel, s.solver.substeps)
        if not np.all(np.isfinite(x)):
            raise IntegrationError(s.a + dt * (m + 1))
        positions[m + 1] = x
        tapes.append(tape)
    return positions, tapes, dt


def _objective_and_gradient(u_values: np.ndarray, s: Scenario):
    """Discrete objective and its exact gradient w.r.t. every control value.

    The state part is differentiated by reverse-mode transversal of the RK4
    steps; the control part directly. Both use the same trapezoid weights as
    objective().
    """
    positions, tapes, dt = _forward_with_tape(u_values, s)
    m_steps = u_values.shape[0]
    n = s.N
    w = trapezoid_weights(m_steps, dt)

    state_samples = s.state_cost.evaluate(positions).mean(axis=1)
    control_samples = s.control_cost.evaluate(u_values).mean(axis=1)
    # node M reuses the last interval's control value
    value = float(w @ state_samples + w @ np.concatenate([control_samples, [control_samples[-1]]]))

    grad = np.empty_like(u_values)
    # control part: value of u_m is sampled at node m, and also at node M for m = M-1
    w_eff = w[:-1].copy()
    w_eff[-1] += w[-1]
    grad[:] = (w_eff[:, None, None] / n) * s.control_cost.grad(u_values)

    # state part: reverse sweep; lam_m = d(state part)/d(positions_m)
    lam = (w[m_steps] / n) * s.state_cost.grad(positions[m_steps])
    for m in range(m_steps - 1, -1, -1):
        lam, lam_u = _rk4_step_vjp(tapes[m], lam, dt, s.kernel)
        grad[m] += lam_u
        lam = lam + (w[m] / n) * s.state_cost.grad(positions[m])
    return value, grad, positions


def gradient(u: ControlGrid, s: Scenario) -> np.ndarray:
    """Exact gradient of the discrete objective w.r.t. the control values."""
    _, grad, _ = _objective_and_gradient(u.values, s)
    return grad


def _two_loop_direction(g: np.ndarray, memory: list) -> np.ndarray:
    """L-BFGS two-loop recursion on flattened arrays."""
    q = g.copy()
    alphas = []
    for s_vec, y_vec, rho in reversed(memory):
        a = rho * np.dot(s_vec, q)
        alphas.append(a)
        q -= a * y_vec
    s_vec, y_vec, _ = memory[-1]
    q *= np.dot(s_vec, y_vec) / np.dot(y_vec, y_vec)
    for (s_vec, y_vec, rho), a in zip(memory, reversed(alphas)):
        b = rho * np.dot(y_vec, q)
        q += (a - b) * s_vec
    return -q


def solve(s: Scenario, cfg: SolverConfig | None = None) -> OptimalSolution:
    """Minimize the discrete objective over piecewise-constant controls.

    Armijo backtracking guarantees a nonincreasing objective across accepted
    iterates; with the default feedback warm start the returned value never
    exceeds the feedback objective.
    """
    cfg = cfg or s.solver
    if cfg is not s.solver:
        s = replace(s, solver=cfg)
    pair = compute_static_pair(s)

    if cfg.warm_start == "feedback":
        _, warm = simulate_feedback(ParticleState(s.initial, s.a), pair, s)
        u = warm.values.copy()
    else:
        u = np.zeros((s.M, s.N, s.d))

    shape = u.shape
    x = u.reshape(-1)
    f, g_arr, _ = _objective_and_gradient(x.reshape(shape), s)
    g = g_arr.reshape(-1)
    best_f, best_x = f, x.copy()
    memory: list = []
    log = []
    termination = "iteration cap"
    it = 0
    step = 0.0

    for it in range(cfg.max_iter):
        gnorm = float(np.linalg.norm(g))
        log.append((it, f, gnorm, step))
        if gnorm / max(1.0, abs(f)) <= cfg.grad_tol:
            termination = "gradient tolerance"
            break

        if cfg.lbfgs and memory:
            p = _two_loop_direction(g, memory)
            if np.dot(g, p) >= 0.0:
                p = -g
            step = 1.0
        else:
            p = -g
            step = 1.0 / max(1.0, gnorm)

        slope = float(np.dot(g, p))
        stalled = False
        while True:
            try:
                f_new, g_new_arr, _ = _objective_and_gradient((x + step * p).reshape(shape), s)
            except IntegrationError:
                f_new = np.inf
                g_new_arr = None
            if f_new <= f + cfg.armijo_c1 * step * slope:
                break
            step *= cfg.backtrack
            if step < 1e-18:
                stalled = True
                break
        if stalled:
            termination = "line-search stall"
            break

        x_new = x + step * p
        g_new = g_new_arr.reshape(-1)
        s_vec, y_vec = x_new - x, g_new - g
        sy = float(np.dot(s_vec, y_vec))
        if cfg.lbfgs and sy > 1e-12 * np.linalg.norm(s_vec) * np.linalg.norm(y_vec):
            memory.append((s_vec, y_vec, 1.0 / sy))
            if len(memory) > cfg.lbfgs_memory:
                memory.pop(0)
        x, f, g = x_new, f_new, g_new
        if f < best_f:
            best_f, best_x = f, x.copy()

    grid = ControlGrid(times=s.node_times(), values=best_x.reshape(shape))
    traj = integrate(ParticleState(s.initial, s.a), grid, s)
    breakdown = objective(traj, grid, s)
    return OptimalSolution(
        control=grid,
        trajectory=traj,
        value=breakdown.total,
        breakdown=breakdown,
        iterations=it,
        grad_norm=float(np.linalg.norm(g)),
        termination=termination,
        log=log,
        scenario=s,
        pair=pair,
    )


def optimal_value(s: Scenario, cfg: SolverConfig | None = None) -> float:
    """Value of the transcribed problem at the found minimizer."""
    return solve(s, cfg).value
