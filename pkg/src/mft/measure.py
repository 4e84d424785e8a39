"""Empirical measures, exact Wasserstein-1 distances, convergence in the particle count."""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .dynamics import ParticleState, simulate_feedback
from .objective import objective
from .ocp import solve as ocp_solve
from .scenario import Scenario, compute_static_pair, sample_uniform_ball

HUNGARIAN_CAP = 512


@dataclass(frozen=True, eq=False)
class EmpiricalMeasure:
    """Equal-weight atoms at n points in R^d."""

    atoms: np.ndarray  # (n, d)

    def __post_init__(self):
        atoms = np.asarray(self.atoms, dtype=float)
        if atoms.ndim != 2:
            raise ValueError("atoms must be a 2-d array (n, d)")
        if not np.all(np.isfinite(atoms)):
            raise ValueError("atoms must be finite")
        object.__setattr__(self, "atoms", atoms)

    @property
    def n(self) -> int:
        return self.atoms.shape[0]

    @property
    def weight(self) -> float:
        return 1.0 / self.n

    def integrate(self, fn) -> float:
        """Integral of a pointwise function against the measure (mean over atoms)."""
        return float(np.mean(fn(self.atoms)))


@dataclass(frozen=True, eq=False)
class ConvergenceRow:
    seed: int
    N: int
    sup_w1: float
    objective: float


@dataclass(frozen=True, eq=False)
class ConvergenceReport:
    """Distances to the largest-N run, which stands in for the limiting measure."""

    N_list: list
    N_ref: int
    seeds: list
    policy: str
    rows: list  # ConvergenceRow per (seed, N)

    def median_by_n(self) -> list:
        """(N, median sup W1, median |J_N - J_ref|) per N, ascending."""
        out = []
        ref = {r.seed: r.objective for r in self.rows if r.N == self.N_ref}
        for n in self.N_list:
            w1s = [r.sup_w1 for r in self.rows if r.N == n]
            gaps = [abs(r.objective - ref[r.seed]) for r in self.rows if r.N == n]
            out.append((n, float(np.median(w1s)), float(np.median(gaps))))
        return out


def empirical(state) -> EmpiricalMeasure:
    """Empirical measure of a particle state: one 1/N atom per particle."""
    positions = state.positions if hasattr(state, "positions") else np.asarray(state, dtype=float)
    return EmpiricalMeasure(atoms=positions.copy())


def _equalize(mu: EmpiricalMeasure, nu: EmpiricalMeasure):
    """Replicate atoms to the lcm of the two counts; preserves both measures exactly."""
    n, m = mu.n, nu.n
    if n == m:
        return mu.atoms, nu.atoms
    l = math.lcm(n, m)
    return np.repeat(mu.atoms, l // n, axis=0), np.repeat(nu.atoms, l // m, axis=0)


def _w1_sorted_1d(x: np.ndarray, y: np.ndarray) -> float:
    """Exact 1-d Wasserstein-1 of equal-count uniform atoms: sorted matching."""
    return float(np.mean(np.abs(np.sort(x[:, 0]) - np.sort(y[:, 0]))))


def _w1_assignment(x: np.ndarray, y: np.ndarray) -> float:
    """Exact W1 via minimum-cost perfect matching on the Euclidean cost matrix."""
    cost = np.linalg.norm(x[:, None, :] - y[None, :, :], axis=-1)
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].sum() / x.shape[0])


def wasserstein1(mu: EmpiricalMeasure, nu: EmpiricalMeasure, cap: int = HUNGARIAN_CAP) -> float:
    """Exact Wasserstein-1 distance between two uniform empirical measures.

    d = 1 uses the sorted-matching formula; d > 1 solves the assignment
    problem on the pairwise Euclidean costs. Unequal atom counts are
    replicated to their lcm first.
    """
    if mu.atoms.shape[1] != nu.atoms.shape[1]:
        raise ValueError(f"dimension mismatch: {mu.atoms.shape[1]} vs {nu.atoms.shape[1]}")
    x, y = _equalize(mu, nu)
    if x.shape[1] == 1:
        return _w1_sorted_1d(x, y)
    if x.shape[0] > cap:
        raise ValueError(f"assignment solve capped at {cap} atoms, got {x.shape[0]}")
    return _w1_assignment(x, y)


def _run_policy(s: Scenario, policy: str):
    if policy == "feedback":
        pair = compute_static_pair(s)
        traj, grid = simulate_feedback(ParticleState(s.initial, s.a), pair, s)
        return traj, grid, objective(traj, grid, s).total
    if policy == "solved":
        sol = ocp_solve(s)
        return sol.trajectory, sol.control, sol.value
    raise ValueError(f"unknown control policy {policy!r}; choose 'feedback' or 'solved'")


def _study_one_seed(s: Scenario, n_list, n_ref: int, policy: str, seed: int, cap: int):
    # sample the reference cloud once; each N uses its prefix (nested sampling)
    ref_initial = _sample_for_study(s, n_ref, seed)
    runs = []
    for n in n_list:
        sn = s.with_particles(ref_initial[:n])
        traj, _, total = _run_policy(sn, policy)
        runs.append((n, traj, total))
    ref_traj = runs[-1][1]
    if s.d > 1 and n_ref > cap:
        raise ValueError(f"assignment solve capped at {cap} atoms, got {n_ref}")
    out = []
    for n, traj, total in runs:
        reps = n_ref // n
        sup_w1 = 0.0
        for m in range(ref_traj.positions.shape[0]):
            atoms = np.repeat(traj.positions[m], reps, axis=0)
            ref_atoms = ref_traj.positions[m]
            w1 = _w1_sorted_1d(atoms, ref_atoms) if s.d == 1 else _w1_assignment(atoms, ref_atoms)
            sup_w1 = max(sup_w1, w1)
        out.append(ConvergenceRow(seed=seed, N=n, sup_w1=sup_w1, objective=total))
    return out


def _sample_for_study(s: Scenario, n: int, seed: int) -> np.ndarray:
    if s.init_label == "point":
        return np.tile(s.initial[0], (n, 1))
    if s.init_label != "uniform-ball" or s.init_center is None or s.init_radius is None:
        raise ValueError("convergence_study needs a sampler-based scenario ('uniform-ball' or 'point')")
    return sample_uniform_ball(n, s.d, s.init_center, s.init_radius, seed)


def convergence_study(s: Scenario, n_list, policy: str = "feedback", seeds=(0,),
                      cap: int = HUNGARIAN_CAP) -> ConvergenceReport:
    """Rerun one scenario at increasing particle counts and compare trajectories.

    All counts share one seeded point stream per seed (first N points), so
    the initial empirical measures converge by construction. Distances are
    sup over node times of W1 against the largest count, whose run is the
    stand-in for the limit; atom counts are equalized by replication, which
    requires every N to divide the largest one.
    """
    n_list = sorted(int(n) for n in n_list)
    if any(b <= a for a, b in zip(n_list, n_list[1:])):
        raise ValueError("N list must be strictly ascending")
    n_ref = n_list[-1]
    for n in n_list:
        if n_ref % n != 0:
            raise ValueError(f"every N must divide the reference count {n_ref}; {n} does not")

    workers = max(1, int(os.environ.get("MFT_THREADS", "1")))
    if workers > 1 and len(seeds) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_seed = list(pool.map(lambda sd: _study_one_seed(s, n_list, n_ref, policy, sd, cap), seeds))
    else:
        per_seed = [_study_one_seed(s, n_list, n_ref, policy, sd, cap) for sd in seeds]

    rows = [row for chunk in per_seed for row in chunk]
    return ConvergenceReport(N_list=list(n_list), N_ref=n_ref, seeds=list(seeds), policy=policy, rows=rows)
