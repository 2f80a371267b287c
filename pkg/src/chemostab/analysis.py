"""Stability oracles, certificate audits, and phase-space datasets.

Everything here consumes the model modules and the integrator; nothing here
is needed by them. Sampling is seeded and results come back in input order
whether or not a process pool was used.
"""

from __future__ import annotations

import dataclasses
import enum
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from . import age, lumped
from .kinetics import DomainError
from .lumped import FeedbackConfig
from .sim import (
    BoundaryHit,
    IntegrationError,
    IntegratorConfig,
    Trajectory,
    convergence_metrics,
    integrate,
)
from .stability import (  # noqa: F401  re-exported oracles
    StabilityReport,
    Verdict,
    build_report,
    eig_signs,
    numeric_jacobian,
    routh_hurwitz,
)

Model = Union[lumped.LumpedSystem, age.AgeSystem]


# --- modes and model dispatch -----------------------------------------------


@dataclass(frozen=True)
class OpenLoop:
    D: float


@dataclass(frozen=True)
class ClosedLoop:
    cfg: FeedbackConfig


Mode = Union[OpenLoop, ClosedLoop]


def _is_age(model) -> bool:
    if isinstance(model, age.AgeSystem):
        return True
    if isinstance(model, lumped.LumpedSystem):
        return False
    raise TypeError(f"unsupported model type {type(model).__name__}")


def state_dim(model) -> int:
    return 3 if _is_age(model) else 2


def field_for(model, eq, mode: Mode):
    """``rhs(t, y)`` for the requested loop; ``eq`` is unused in open loop."""
    if isinstance(mode, OpenLoop):
        return age.open_loop_field3(model, mode.D) if _is_age(model) else lumped.open_loop_field(model, mode.D)
    if _is_age(model):
        return age.closed_loop_field3(model, eq, mode.cfg)
    return lumped.closed_loop_field(model, eq, mode.cfg)


def equilibria_of(model) -> list:
    return age.equilibria3(model) if _is_age(model) else lumped.equilibria(model)


def eq_state(eq) -> np.ndarray:
    if isinstance(eq, age.AgeEquilibrium):
        return np.array([eq.X_star, eq.Y_star, eq.S_star])
    return np.array([eq.X_star, eq.S_star])


def is_washout(model, eq_ref, state) -> bool:
    """Biomass below 1e-6 X* and substrate within 1e-3 S_in of the inflow level."""
    return bool(
        state[0] < 1e-6 * eq_ref.X_star and abs(state[-1] - model.S_in) < 1e-3 * model.S_in
    )


# --- Lyapunov audit ---------------------------------------------------------


@dataclass(frozen=True)
class AuditResult:
    n_samples: int
    n_violations: int
    worst_V_dot: float
    worst_point: np.ndarray


def sample_box(dim: int, n: int, half_width: float, exclude_radius: float, rng: np.random.Generator) -> np.ndarray:
    """``n`` uniform points in ``[-w, w]^dim`` outside a small origin ball; shape (dim, n)."""
    out = np.empty((dim, 0))
    while out.shape[1] < n:
        z = rng.uniform(-half_width, half_width, size=(dim, n - out.shape[1]))
        keep = np.linalg.norm(z, axis=0) >= exclude_radius
        out = np.concatenate([out, z[:, keep]], axis=1)
    return out


def lyapunov_audit(
    model,
    eq,
    cfg: FeedbackConfig,
    consts,
    n_samples: int = 100_000,
    half_width: float = 4.0,
    exclude_radius: float = 1e-6,
    seed: int = 0,
) -> AuditResult:
    """Count sampled z-points where the certificate's derivative is not negative."""
    rng = np.random.default_rng(seed)
    dim = state_dim(model)
    z = sample_box(dim, n_samples, half_width, exclude_radius, rng)
    if dim == 3:
        vdot = age.V3_dot(model, eq, cfg, consts, z)
    else:
        vdot = lumped.V2_dot(model, eq, cfg, consts, z)
    vdot = np.where(np.isfinite(vdot), vdot, np.inf)
    i = int(np.argmax(vdot))
    return AuditResult(n_samples, int(np.sum(vdot >= 0)), float(vdot[i]), z[:, i].copy())


def R_bound(model, eq, consts) -> float:
    """The lower bound that the certificate's R must exceed."""
    if _is_age(model):
        return age.R_lower_bound3(model, consts.A, consts.Omega, consts.c)
    return lumped.R_lower_bound(model, consts.A, consts.c)


def corrupted_constants(model, eq, consts, factor: float = 0.5):
    """Copy of ``consts`` with R set to ``factor`` times its lower bound."""
    return dataclasses.replace(consts, R=factor * R_bound(model, eq, consts))


# --- trajectories over many initial conditions ------------------------------


class TrackStatus(str, enum.Enum):
    OK = "ok"
    BOUNDARY_HIT = "boundary_hit"
    FAILED = "failed"


@dataclass
class Track:
    init: np.ndarray
    status: TrackStatus
    trajectory: Optional[Trajectory]
    message: str = ""

    @property
    def final_state(self) -> np.ndarray:
        return self.trajectory.final_state if self.trajectory is not None else self.init


def _run_track(job) -> Track:
    model, eq, mode, init, t_final, config = job
    rhs = field_for(model, eq, mode)
    try:
        traj = integrate(rhs, (0.0, t_final), init, config, model.contains)
    except BoundaryHit as exc:
        return Track(np.asarray(init, dtype=float), TrackStatus.BOUNDARY_HIT, None, str(exc))
    except IntegrationError as exc:
        return Track(np.asarray(init, dtype=float), TrackStatus.FAILED, None, str(exc))
    except DomainError as exc:
        return Track(np.asarray(init, dtype=float), TrackStatus.FAILED, None, str(exc))
    return Track(np.asarray(init, dtype=float), TrackStatus.OK, traj)


def _map(fn, jobs, threads: int):
    if threads <= 1 or len(jobs) < 2:
        return [fn(j) for j in jobs]
    try:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, jobs, chunksize=max(1, len(jobs) // (4 * threads))))
    except (OSError, PermissionError):
        # sandboxes without working semaphores: fall back to serial
        return [fn(j) for j in jobs]


def default_threads() -> int:
    return max(1, min(8, os.cpu_count() or 1))


def run_many(model, eq, mode: Mode, inits, t_final: float, config: IntegratorConfig = IntegratorConfig(), threads: int = 1) -> list[Track]:
    jobs = [(model, eq, mode, np.asarray(x, dtype=float), t_final, config) for x in inits]
    return _map(_run_track, jobs, threads)


def log_grid(lo: float, hi: float, n: int) -> np.ndarray:
    return np.geomspace(lo, hi, n)


def initial_grid(model, n_X: int, n_S: int, X_range=(0.01, 50.0), S_fraction=(0.01, 0.99), log_X: bool = True, Y_equals_X: bool = True) -> np.ndarray:
    """Tensor grid of initial states; for the age model ``Y0 = X0`` unless told otherwise."""
    Xs = np.geomspace(*X_range, n_X) if log_X else np.linspace(*X_range, n_X)
    Ss = np.geomspace(S_fraction[0] * model.S_in, S_fraction[1] * model.S_in, n_S)
    pts = [(X, S) for X in Xs for S in Ss]
    if _is_age(model):
        if not Y_equals_X:
            raise ValueError("pass explicit initial conditions for independent Y0")
        return np.array([(X, X, S) for X, S in pts])
    return np.array(pts)


def random_initial_states(model, n: int, seed: int, X_range=(0.01, 50.0), S_fraction=(0.01, 0.99)) -> np.ndarray:
    """Log-uniform biomass(es) and uniform substrate fractions."""
    rng = np.random.default_rng(seed)
    lx = np.log(X_range)
    cols = [np.exp(rng.uniform(*lx, n))]
    if _is_age(model):
        cols.append(np.exp(rng.uniform(*lx, n)))
    cols.append(rng.uniform(*S_fraction, n) * model.S_in)
    return np.column_stack(cols)


@dataclass
class PortraitDataset:
    model_kind: str
    mode: Mode
    tracks: list[Track]


def phase_portrait(model, eq, mode: Mode, inits, t_final: float, config: IntegratorConfig = IntegratorConfig(), threads: int = 1) -> PortraitDataset:
    """One polyline per initial state; failures are recorded on the track, not raised."""
    tracks = run_many(model, eq, mode, inits, t_final, config, threads)
    return PortraitDataset("age" if _is_age(model) else "lumped", mode, tracks)


class BasinLabel(str, enum.Enum):
    TARGET = "target"
    OTHER = "other_equilibrium"
    WASHOUT = "washout"
    UNDECIDED = "undecided"


@dataclass
class BasinMap:
    inits: np.ndarray
    labels: list[BasinLabel]
    tracks: list[Track] = field(repr=False, default_factory=list)

    def counts(self) -> dict[str, int]:
        out = {lab.value: 0 for lab in BasinLabel}
        for lab in self.labels:
            out[lab.value] += 1
        return out

    def fraction(self, label: BasinLabel) -> float:
        return sum(lab is label for lab in self.labels) / len(self.labels)


def classify_track(model, eq_target, others, track: Track, tol: float) -> BasinLabel:
    if track.trajectory is None:
        return BasinLabel.UNDECIDED
    state = track.trajectory.final_state
    if convergence_metrics(track.trajectory, eq_state(eq_target), tol).converged:
        return BasinLabel.TARGET
    for other in others:
        if convergence_metrics(track.trajectory, eq_state(other), tol).converged:
            return BasinLabel.OTHER
    if is_washout(model, eq_target, state):
        return BasinLabel.WASHOUT
    return BasinLabel.UNDECIDED


def basin_sample(model, eq_target, mode: Mode, inits, t_final: float, tol: float = 1e-6, config: IntegratorConfig = IntegratorConfig(), threads: int = 1) -> BasinMap:
    """Label each initial state by where its trajectory sits at ``t_final``.

    A state counts as converged to an equilibrium when it is within ``tol``
    (max norm) at the end of the run; anything that is neither near an
    equilibrium nor washed out stays undecided.
    """
    inits = np.asarray(inits, dtype=float)
    tracks = run_many(model, eq_target, mode, inits, t_final, config, threads)
    target = eq_state(eq_target)
    others = [e for e in equilibria_of(model) if not np.allclose(eq_state(e), target, rtol=0, atol=1e-9)]
    labels = [classify_track(model, eq_target, others, tr, tol) for tr in tracks]
    return BasinMap(inits, labels, tracks)


# --- divergence demonstration ----------------------------------------------


@dataclass(frozen=True)
class DivergenceRun:
    scenario: lumped.Theorem2Scenario
    times: np.ndarray
    z: np.ndarray
    X: np.ndarray
    bound_slack: float

    @property
    def holds(self) -> bool:
        return self.bound_slack >= 0


def divergence_run(
    sys: lumped.LumpedSystem,
    scenario: lumped.Theorem2Scenario,
    feedback: Optional[FeedbackConfig],
    t_final: float = 50.0,
    n_out: int = 501,
    config: IntegratorConfig = IntegratorConfig(),
) -> DivergenceRun:
    """Integrate from the scenario's start under ``D = D*`` (``feedback=None``)
    or the stabilizing feedback form, and measure ``x1_0 - theta t - x1(t)``.

    The smallest value of that slack over ``n_out`` uniform times is stored
    as ``bound_slack``; the linear decay bound holds when it is nonnegative.
    """
    eq = scenario.eq
    if feedback is None:
        D_fn = lambda z: sys.D_star
    else:
        D_fn = lambda z: lumped.feedback_D_z(sys, eq, feedback, z)
    rhs = lumped.theorem2_field(sys, eq, D_fn)
    traj = integrate(rhs, (0.0, t_final), scenario.initial_state(), config)
    ts = np.linspace(0.0, t_final, n_out)
    z = np.array([traj.interpolate(t) for t in ts])
    slack = scenario.x1_0 - scenario.theta * ts - z[:, 0]
    X = np.array([lumped.from_z(sys, eq, zz)[0] for zz in z])
    return DivergenceRun(scenario, ts, z, X, float(slack.min()))
