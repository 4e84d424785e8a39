"""Problem description: kernels, costs, constants, static pair, config loading."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import ndtri
from scipy.stats import qmc

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

KERNEL_VARIANTS = ("zero", "linear", "bounded-influence")
SAMPLERS = ("uniform-ball", "point")

# sample count for the low-discrepancy sweeps backing the constant estimates
SWEEP_SAMPLES = 10_000
SWEEP_SEED = 20_240_901
CLOSED_FORM_SLACK = 1e-9


class ConfigError(ValueError):
    """Raised for config parse failures and scenario invariant violations."""


@dataclass(frozen=True)
class KernelSpec:
    """Pairwise interaction kernel P acting on particle differences.

    Variants:
      zero                P(x) = 0
      linear              P(x) = kappa * x
      bounded-influence   P(x) = c * x / (1 + |x|^2)

    All variants satisfy P(0) = 0 and |P(x)| <= growth_bound() * |x|.
    """

    variant: str
    kappa: float = 0.0
    c: float = 0.0

    def __post_init__(self):
        if self.variant not in KERNEL_VARIANTS:
            raise ConfigError(f"unknown kernel variant {self.variant!r}; choose from {KERNEL_VARIANTS}")

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Evaluate P on an array of difference vectors, shape (..., d)."""
        if self.variant == "zero":
            return np.zeros_like(x)
        if self.variant == "linear":
            return self.kappa * x
        r2 = np.sum(x * x, axis=-1, keepdims=True)
        return self.c * x / (1.0 + r2)

    def dp_t_apply(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Transposed-Jacobian product DP(x)^T v, elementwise over leading axes."""
        if self.variant == "zero":
            return np.zeros_like(v)
        if self.variant == "linear":
            return self.kappa * v
        # DP(x) = c * [(1 + |x|^2) I - 2 x x^T] / (1 + |x|^2)^2, symmetric
        r2 = np.sum(x * x, axis=-1, keepdims=True)
        xv = np.sum(x * v, axis=-1, keepdims=True)
        return self.c * ((1.0 + r2) * v - 2.0 * x * xv) / (1.0 + r2) ** 2

    def growth_bound(self) -> float:
        """Closed-form constant C_P with |P(x)| <= C_P |x| for all x."""
        if self.variant == "zero":
            return 0.0
        if self.variant == "linear":
            return abs(self.kappa)
        return abs(self.c)


@dataclass(frozen=True)
class StateCostSpec:
    """State running cost L; built-in: quadratic L(x) = |x - target|^2."""

    name: str
    target: np.ndarray

    def __post_init__(self):
        if self.name != "quadratic":
            raise ConfigError(f"unknown state cost {self.name!r}; only 'quadratic' is built in")
        object.__setattr__(self, "target", np.asarray(self.target, dtype=float))

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        diff = x - self.target
        return np.sum(diff * diff, axis=-1)

    def grad(self, x: np.ndarray) -> np.ndarray:
        return 2.0 * (x - self.target)


@dataclass(frozen=True)
class ControlCostSpec:
    """Control running cost Psi(u) = gamma * |u|^q with gamma >= 0, q >= 1.

    Named 'quadratic' (q fixed to 2) or 'power' (q free). Psi(0) = 0, Psi is
    convex, and its Lipschitz constant on the ball B(0, R) is gamma*q*R^(q-1).
    """

    name: str
    gamma: float
    q: float = 2.0

    def __post_init__(self):
        if self.name not in ("quadratic", "power"):
            raise ConfigError(f"unknown control cost {self.name!r}; choose 'quadratic' or 'power'")
        if self.name == "quadratic" and self.q != 2.0:
            raise ConfigError("control cost 'quadratic' requires q = 2")
        if self.gamma < 0:
            raise ConfigError("control cost weight gamma must be >= 0")
        if self.q < 1:
            raise ConfigError("control cost exponent q must be >= 1")

    def evaluate(self, u: np.ndarray) -> np.ndarray:
        norms = np.linalg.norm(u, axis=-1)
        return self.gamma * norms**self.q

    def grad(self, u: np.ndarray) -> np.ndarray:
        if self.q == 2.0:
            return 2.0 * self.gamma * u
        norms = np.linalg.norm(u, axis=-1, keepdims=True)
        # subgradient 0 at the origin for q < 2
        scale = np.where(norms > 0, norms ** (self.q - 2.0), 0.0)
        return self.gamma * self.q * scale * u

    def lipschitz_on_ball(self, radius: float) -> float:
        if radius == 0.0:
            return 0.0
        return self.gamma * self.q * radius ** (self.q - 1.0)


@dataclass(frozen=True)
class SolverConfig:
    """Tuning for the transcription solver (ocp module)."""

    grad_tol: float = 1e-6          # relative: |g| / max(1, |J|)
    max_iter: int = 5000
    armijo_c1: float = 1e-4
    backtrack: float = 0.5
    warm_start: str = "feedback"    # or "zeros"
    lbfgs: bool = True
    lbfgs_memory: int = 10
    substeps: int = 1

    def __post_init__(self):
        if self.grad_tol <= 0:
            raise ConfigError("grad_tol must be > 0")
        if not 0.0 < self.backtrack < 1.0:
            raise ConfigError("backtrack factor must lie in (0, 1)")
        if self.warm_start not in ("feedback", "zeros"):
            raise ConfigError("warm_start must be 'feedback' or 'zeros'")
        if self.substeps < 1:
            raise ConfigError("substeps must be >= 1")


@dataclass(frozen=True)
class StaticPair:
    """Static state/control pair: zero control, stationary uniform state."""

    psi_sigma: np.ndarray
    u_sigma: np.ndarray


@dataclass(frozen=True)
class EffectiveConstants:
    """Constants entering the cheap-control bound, valid on a ball of radius R.

    C_P:   kernel growth bound, |P(x)| <= C_P |x| (global).
    C_L:   linear bound L(x) <= C_L |x - psi_sigma| on B(psi_sigma, R).
    C_Psi: Lipschitz bound of Psi from 0 on the control ball B(0, (beta + 2 C_P) R).
    C0:    (C_L + beta*C_Psi + 2*C_P*C_Psi) / beta.
    """

    C_P: float
    C_L: float
    C_Psi: float
    R: float
    C0: float

    def as_dict(self) -> dict:
        return {"C_P": self.C_P, "C_L": self.C_L, "C_Psi": self.C_Psi, "R": self.R, "C0": self.C0}


@dataclass(frozen=True, eq=False)
class Scenario:
    """Immutable problem description driving every module."""

    d: int
    N: int
    a: float
    b: float
    M: int
    beta: float
    kernel: KernelSpec
    state_cost: StateCostSpec
    control_cost: ControlCostSpec
    initial: np.ndarray             # (N, d) materialized initial positions
    init_label: str = "explicit"    # "explicit" or sampler name
    seed: int | None = None
    init_center: np.ndarray | None = None   # sampler parameters, kept for resampling studies
    init_radius: float | None = None
    lam: float = 0.5
    alpha: float = 0.5
    c_diss: float = 1.0
    deficit_tol: float = 1e-8
    solver: SolverConfig = field(default_factory=SolverConfig)

    def __post_init__(self):
        if self.d < 1:
            raise ConfigError("d must be a positive integer")
        if self.N < 1:
            raise ConfigError("N must be a positive integer")
        if not self.b > self.a:
            raise ConfigError("b must exceed a")
        if self.M < 2:
            raise ConfigError("M must be >= 2")
        if self.beta <= 0:
            raise ConfigError("beta must be > 0")
        if not 0.0 < self.lam < 1.0:
            raise ConfigError("lambda must lie strictly inside (0, 1)")
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError("alpha must lie strictly inside (0, 1)")
        initial = np.asarray(self.initial, dtype=float)
        if initial.shape != (self.N, self.d):
            raise ConfigError(f"initial states must have shape ({self.N}, {self.d}), got {initial.shape}")
        if not np.all(np.isfinite(initial)):
            raise ConfigError("initial states must be finite")
        if self.state_cost.target.shape != (self.d,):
            raise ConfigError("state cost target must have shape (d,)")
        initial.setflags(write=False)
        object.__setattr__(self, "initial", initial)
        if self.init_center is not None:
            object.__setattr__(self, "init_center", np.asarray(self.init_center, dtype=float))

    @property
    def dt(self) -> float:
        return (self.b - self.a) / self.M

    def node_times(self) -> np.ndarray:
        return self.a + self.dt * np.arange(self.M + 1)

    def with_horizon(self, b: float) -> "Scenario":
        return replace(self, b=b)

    def with_particles(self, initial: np.ndarray) -> "Scenario":
        initial = np.asarray(initial, dtype=float)
        return replace(self, N=initial.shape[0], initial=initial)

    def digest(self) -> str:
        """Stable content hash over every field, for report provenance."""
        payload = {
            "d": self.d, "N": self.N, "a": self.a, "b": self.b, "M": self.M,
            "beta": self.beta,
            "kernel": [self.kernel.variant, self.kernel.kappa, self.kernel.c],
            "state_cost": [self.state_cost.name, self.state_cost.target.tolist()],
            "control_cost": [self.control_cost.name, self.control_cost.gamma, self.control_cost.q],
            "initial": self.initial.tolist(),
            "init_label": self.init_label, "seed": self.seed,
            "init_center": None if self.init_center is None else self.init_center.tolist(),
            "init_radius": self.init_radius,
            "lam": self.lam, "alpha": self.alpha,
            "c_diss": self.c_diss, "deficit_tol": self.deficit_tol,
            "solver": [self.solver.grad_tol, self.solver.max_iter, self.solver.armijo_c1,
                       self.solver.backtrack, self.solver.warm_start, self.solver.lbfgs,
                       self.solver.lbfgs_memory, self.solver.substeps],
        }
        text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()


# --------------------------------------------------------------------------
# initial-state samplers

def sample_uniform_ball(n: int, d: int, center: np.ndarray, radius: float, seed: int) -> np.ndarray:
    """n points uniform in the ball B(center, radius), deterministic in seed.

    Draws are consumed one row per point, so the first k rows for count n
    equal the rows for count k (nested sampling across n).
    """
    rng = np.random.default_rng(seed)
    raw = rng.random(size=(n, d + 1))
    u = np.clip(raw[:, :d], 1e-12, 1.0 - 1e-12)
    direction = ndtri(u)
    norms = np.linalg.norm(direction, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    factor = raw[:, d:] ** (1.0 / d)
    return np.asarray(center, dtype=float) + radius * factor * direction / norms


def _materialize_initial(sampler: str, n: int, d: int, center, radius: float, seed: int | None) -> np.ndarray:
    if sampler == "uniform-ball":
        if seed is None:
            raise ConfigError("sampler 'uniform-ball' requires an explicit seed")
        return sample_uniform_ball(n, d, np.asarray(center, dtype=float), radius, seed)
    if sampler == "point":
        return np.tile(np.asarray(center, dtype=float), (n, 1))
    raise ConfigError(f"unknown initial-state sampler {sampler!r}; choose from {SAMPLERS}")


# --------------------------------------------------------------------------
# config loading

_SECTION_KEYS = {
    "scenario": {"d", "N", "a", "b", "M", "beta", "initial", "seed", "center", "radius"},
    "kernel": {"variant", "kappa", "c"},
    "cost": {"state", "target", "control", "gamma", "q"},
    "solver": {"grad_tol", "max_iter", "armijo_c1", "backtrack", "warm_start",
               "lbfgs", "lbfgs_memory", "substeps"},
    "turnpike": {"lambda", "alpha", "c_diss", "deficit_tol"},
}


def _require(section: dict, name: str, key: str):
    if key not in section:
        raise ConfigError(f"missing required key '{key}' in section [{name}]")
    return section[key]


def load_scenario(config_text: str) -> Scenario:
    """Parse a sectioned TOML document into a validated Scenario.

    Sections: [scenario], [kernel], [cost], [solver], [turnpike]; the last
    two are optional. Unknown sections or keys are hard errors.
    """
    try:
        doc = tomllib.loads(config_text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config parse error: {exc}") from None

    unknown_sections = set(doc) - set(_SECTION_KEYS)
    if unknown_sections:
        raise ConfigError(f"unknown config section(s): {sorted(unknown_sections)}")
    for name, keys in _SECTION_KEYS.items():
        extra = set(doc.get(name, {})) - keys
        if extra:
            raise ConfigError(f"unknown key(s) in section [{name}]: {sorted(extra)}")
    for name in ("scenario", "kernel", "cost"):
        if name not in doc:
            raise ConfigError(f"missing required section [{name}]")

    sc, kc, cc = doc["scenario"], doc["kernel"], doc["cost"]
    d = int(_require(sc, "scenario", "d"))
    n = int(_require(sc, "scenario", "N"))

    kernel = KernelSpec(
        variant=_require(kc, "kernel", "variant"),
        kappa=float(kc.get("kappa", 0.0)),
        c=float(kc.get("c", 0.0)),
    )
    state_cost = StateCostSpec(name=_require(cc, "cost", "state"), target=_require(cc, "cost", "target"))
    control_cost = ControlCostSpec(
        name=_require(cc, "cost", "control"),
        gamma=float(_require(cc, "cost", "gamma")),
        q=float(cc.get("q", 2.0)),
    )

    init_spec = _require(sc, "scenario", "initial")
    seed = sc.get("seed")
    seed = int(seed) if seed is not None else None
    init_center = None
    init_radius = None
    if isinstance(init_spec, str):
        init_center = np.asarray(sc.get("center", [0.0] * d), dtype=float)
        init_radius = float(sc.get("radius", 1.0))
        initial = _materialize_initial(init_spec, n, d, init_center, init_radius, seed)
        init_label = init_spec
    else:
        initial = np.asarray(init_spec, dtype=float)
        init_label = "explicit"

    sol = doc.get("solver", {})
    solver = SolverConfig(
        grad_tol=float(sol.get("grad_tol", 1e-6)),
        max_iter=int(sol.get("max_iter", 5000)),
        armijo_c1=float(sol.get("armijo_c1", 1e-4)),
        backtrack=float(sol.get("backtrack", 0.5)),
        warm_start=sol.get("warm_start", "feedback"),
        lbfgs=bool(sol.get("lbfgs", True)),
        lbfgs_memory=int(sol.get("lbfgs_memory", 10)),
        substeps=int(sol.get("substeps", 1)),
    )
    tp = doc.get("turnpike", {})

    return Scenario(
        d=d, N=n,
        a=float(_require(sc, "scenario", "a")),
        b=float(_require(sc, "scenario", "b")),
        M=int(_require(sc, "scenario", "M")),
        beta=float(_require(sc, "scenario", "beta")),
        kernel=kernel, state_cost=state_cost, control_cost=control_cost,
        initial=initial, init_label=init_label, seed=seed,
        init_center=init_center, init_radius=init_radius,
        lam=float(tp.get("lambda", 0.5)),
        alpha=float(tp.get("alpha", 0.5)),
        c_diss=float(tp.get("c_diss", 1.0)),
        deficit_tol=float(tp.get("deficit_tol", 1e-8)),
        solver=solver,
    )


# --------------------------------------------------------------------------
# static pair and effective constants

def _descend_to_minimum(fun, grad, x0: np.ndarray, tol: float = 1e-12, max_iter: int = 10_000) -> np.ndarray:
    """Backtracking gradient descent; fallback minimizer for non-quadratic costs."""
    x = np.asarray(x0, dtype=float).copy()
    for _ in range(max_iter):
        g = grad(x)
        gn = float(np.linalg.norm(g))
        if gn <= tol:
            return x
        step = 1.0
        fx = fun(x)
        while fun(x - step * g) > fx - 1e-4 * step * gn * gn:
            step *= 0.5
            if step < 1e-18:
                raise RuntimeError(f"static-state search stalled at residual {gn:.3e}")
        x = x - step * g
    raise RuntimeError(f"static-state search did not converge in {max_iter} iterations (residual {gn:.3e})")


def compute_static_pair(s: Scenario) -> StaticPair:
    """Minimizer of the state cost, paired with the zero control.

    The uniform state with every particle at the minimizer is stationary
    under zero control because the kernel vanishes at the origin.
    """
    if s.state_cost.name == "quadratic":
        psi_sigma = s.state_cost.target.copy()
    else:
        psi_sigma = _descend_to_minimum(s.state_cost.evaluate, s.state_cost.grad, np.zeros(s.d))
    p0 = s.kernel.apply(np.zeros(s.d))
    if np.any(p0 != 0.0):
        raise RuntimeError(f"kernel does not vanish at the origin: P(0) = {p0}")
    return StaticPair(psi_sigma=psi_sigma, u_sigma=np.zeros(s.d))


def _ball_sweep(center: np.ndarray, radius: float, count: int, dim: int, seed: int) -> np.ndarray:
    """Low-discrepancy sweep of B(center, radius): Halton directions and radii."""
    halton = qmc.Halton(d=dim + 1, seed=seed)
    raw = halton.random(count)
    u = np.clip(raw[:, :dim], 1e-12, 1.0 - 1e-12)
    direction = ndtri(u)
    norms = np.linalg.norm(direction, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    factor = raw[:, dim:] ** (1.0 / dim)
    return np.asarray(center, dtype=float) + radius * factor * direction / norms


def default_radius(s: Scenario, pair: StaticPair | None = None) -> float:
    """Largest initial distance to the static state; the closed-loop flow never leaves this ball."""
    pair = pair or compute_static_pair(s)
    return float(np.linalg.norm(s.initial - pair.psi_sigma, axis=1).max())


def estimate_constants(s: Scenario, R: float | None = None) -> EffectiveConstants:
    """Effective constants on the ball B(psi_sigma, R).

    R defaults to the largest initial distance to the static state. Closed
    forms (kernel growth bound; C_L = R for the quadratic state cost;
    C_Psi = gamma*q*R_u^(q-1) on the control ball of radius
    R_u = (beta + 2 C_P) R) are cross-checked against low-discrepancy
    sampled suprema; a sampled value exceeding its closed form signals a
    wrong closed form and raises.
    """
    pair = compute_static_pair(s)
    if R is None:
        R = default_radius(s, pair)
    if R < 0:
        raise ConfigError("R must be >= 0")

    c_p = s.kernel.growth_bound()
    if R > 0 and s.kernel.variant != "zero":
        pts = _ball_sweep(np.zeros(s.d), 2.0 * R, SWEEP_SAMPLES, s.d, SWEEP_SEED)
        norms = np.linalg.norm(pts, axis=1)
        keep = norms > 0
        ratios = np.linalg.norm(s.kernel.apply(pts[keep]), axis=1) / norms[keep]
        sampled = float(ratios.max())
        if sampled > c_p + CLOSED_FORM_SLACK:
            raise RuntimeError(f"sampled kernel growth ratio {sampled} exceeds closed form {c_p}")

    if R == 0.0:
        c_l = 0.0
    elif s.state_cost.name == "quadratic":
        c_l = R
        pts = _ball_sweep(pair.psi_sigma, R, SWEEP_SAMPLES, s.d, SWEEP_SEED + 1)
        dist = np.linalg.norm(pts - pair.psi_sigma, axis=1)
        keep = dist > 0
        sampled = float((s.state_cost.evaluate(pts[keep]) / dist[keep]).max())
        if sampled > c_l + CLOSED_FORM_SLACK:
            raise RuntimeError(f"sampled state-cost ratio {sampled} exceeds closed form {c_l}")
    else:
        pts = _ball_sweep(pair.psi_sigma, R, SWEEP_SAMPLES, s.d, SWEEP_SEED + 1)
        dist = np.linalg.norm(pts - pair.psi_sigma, axis=1)
        keep = dist > 0
        c_l = float((s.state_cost.evaluate(pts[keep]) / dist[keep]).max())

    r_u = (s.beta + 2.0 * c_p) * R
    c_psi = s.control_cost.lipschitz_on_ball(r_u)
    if r_u > 0:
        pts = _ball_sweep(np.zeros(s.d), r_u, SWEEP_SAMPLES, s.d, SWEEP_SEED + 2)
        vals = s.control_cost.evaluate(pts)
        half = SWEEP_SAMPLES // 2
        gaps = np.linalg.norm(pts[:half] - pts[half : 2 * half], axis=1)
        keep = gaps > 1e-9
        sampled = float((np.abs(vals[:half] - vals[half : 2 * half])[keep] / gaps[keep]).max())
        if sampled > c_psi + CLOSED_FORM_SLACK:
            raise RuntimeError(f"sampled control-cost Lipschitz ratio {sampled} exceeds closed form {c_psi}")

    c0 = (c_l + s.beta * c_psi + 2.0 * c_p * c_psi) / s.beta
    return EffectiveConstants(C_P=c_p, C_L=c_l, C_Psi=c_psi, R=float(R), C0=c0)
