"""Numerical lab for controlled N-particle consensus dynamics.

Simulates interacting particles under per-particle controls, solves the
finite-horizon control problem by direct transcription with exact discrete
adjoints, and measures dissipativity, cheap-control and interior-decay
(turnpike) inequalities, including their empirical-measure forms.
"""

__version__ = "0.1.0"

from .scenario import (
    KernelSpec,
    Scenario,
    SolverConfig,
    StaticPair,
    EffectiveConstants,
    load_scenario,
    compute_static_pair,
    estimate_constants,
)
from .dynamics import ParticleState, ControlGrid, Trajectory, drift, integrate, feedback_control, simulate_feedback
from .objective import CostBreakdown, DissipativityCurve, running_cost, objective, dissipativity_deficit
from .ocp import OptimalSolution, gradient, solve, optimal_value
from .measure import EmpiricalMeasure, ConvergenceReport, empirical, wasserstein1, convergence_study
from .turnpike import TurnpikeReport, interior_metric, theorem_bounds, horizon_sweep
