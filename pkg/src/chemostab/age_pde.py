"""Upwind simulation of the age-structured chemostat.

The density ``f(t, a)`` over age obeys transport with removal
``-(beta(a) + D) f``, a renewal condition ``f(t, 0) = mu(S) * int k f`` and
the substrate balance ``S' = D (S_in - S) - mu(S) * int q f``. When the
kernels ``q`` and ``k`` have the exponential-affine form built here, the
weighted moments ``X = int q f`` and ``Y = int k f`` obey the 3-state ODE of
:mod:`chemostab.age`; this module exists to check that reduction.

The density is stored as cell averages on ``[i da, (i+1) da)``; age
integrals use the midpoint rule over cells, and the renewal value acts as
the inflow ghost cell of the upwind scheme. With that pairing the discrete
feed moment obeys an explicit Euler step of its ODE exactly when
``beta == b``, leaving an O(da) residual only in the birth moment.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional

import numpy as np
from scipy.integrate import cumulative_trapezoid

from . import age
from ._numerics import bisect
from .kinetics import DomainError, GrowthRateModel
from .lumped import FeedbackConfig
from .sim import IntegratorConfig, Trajectory, integrate

TRUNCATION_TOL = 1e-8


class KernelError(ValueError):
    """The mortality kernel violates a structural bound."""


class CFLError(ValueError):
    """Time step too large for the explicit upwind scheme."""


@dataclass(frozen=True)
class AgeGrid:
    a_max: float
    n_cells: int

    def __post_init__(self):
        if not self.a_max > 0:
            raise ValueError(f"a_max must be > 0, got {self.a_max}")
        if self.n_cells < 16:
            raise ValueError(f"n_cells must be >= 16, got {self.n_cells}")

    @property
    def da(self) -> float:
        return self.a_max / self.n_cells

    @property
    def ages(self) -> np.ndarray:
        """Cell midpoints."""
        return (np.arange(self.n_cells) + 0.5) * self.da

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(0.0, self.a_max, self.n_cells + 1)

    def refined(self) -> "AgeGrid":
        return AgeGrid(self.a_max, 2 * self.n_cells)


def truncation_age(b: float, D_ref: float, p0: float, q0: float, gamma: float, tol: float = TRUNCATION_TOL) -> float:
    """Age beyond which the birth weight of a steady population is negligible.

    A population held at dilution ``D_ref`` has density proportional to
    ``exp(-int beta - D_ref a)``, so its birth integrand is proportional to
    ``(p0 + gamma q0 a) exp(-(b + D_ref) a)`` whatever ``beta`` is. The
    returned age is where that weight falls to ``tol`` times its maximum.
    """
    rate = b + D_ref
    if rate <= 0:
        raise ValueError("b + D_ref must be positive")
    slope = gamma * q0

    def weight(a):
        return (p0 + slope * a) * math.exp(-rate * a)

    a_peak = max(0.0, 1.0 / rate - p0 / slope) if slope > 0 else 0.0
    target = tol * weight(a_peak)
    hi = a_peak + 1.0
    while weight(hi) > target:
        hi *= 2.0
    return bisect(lambda a: weight(a) - target, a_peak, hi)


@dataclass(frozen=True)
class MortalityKernel:
    """Age-dependent death rate and the feed and birth weights it induces.

    ``beta``, ``q`` and ``k`` are sampled at cell midpoints. ``M_bound`` is the
    smallest constant for which ``gamma a <= M exp(b a - int beta)`` holds on
    the grid beyond ``a_bar`` unless a larger one was supplied.
    """

    beta_fn: Callable
    b: float
    gamma: float
    p0: float
    q0: float
    grid: AgeGrid
    beta: np.ndarray
    q: np.ndarray
    k: np.ndarray
    a_bar: float
    M_bound: float
    lipschitz_q: float
    lipschitz_k: float


def build_kernels(
    beta_fn: Callable,
    b: float,
    gamma: float,
    p0: float,
    q0: float,
    grid: AgeGrid,
    a_bar: float = 0.0,
    M: Optional[float] = None,
) -> MortalityKernel:
    """Sample ``beta`` and build ``q``, ``k`` on ``grid``.

    Raises:
        KernelError: ``beta(a) > b`` or the ``gamma a`` growth bound fails at
            some grid age ``a >= a_bar``; the message names the inequality and
            the age.
    """
    if b < 0 or gamma < 0:
        raise ValueError("b and gamma must be >= 0")
    if p0 <= 0 or q0 <= 0:
        raise ValueError("p0 and q0 must be > 0")
    if a_bar < 0:
        raise ValueError("a_bar must be >= 0")
    # nodes and midpoints interleaved; midpoints are the odd entries
    a = np.linspace(0.0, grid.a_max, 2 * grid.n_cells + 1)
    beta = np.broadcast_to(np.asarray(beta_fn(a), dtype=float), a.shape).copy()
    if np.any(beta < 0):
        i = int(np.argmax(beta < 0))
        raise KernelError(f"beta(a) >= 0 fails at age a={a[i]!r}")
    tail = a >= a_bar
    bad = tail & (beta > b * (1 + 1e-12))
    if np.any(bad):
        i = int(np.argmax(bad))
        raise KernelError(f"beta(a) <= b fails at age a={a[i]!r} (beta={beta[i]!r}, b={b!r})")
    # integrating beta - b directly keeps the beta == b case exact
    decay = np.exp(cumulative_trapezoid(beta - b, a, initial=0.0))
    needed = float(np.max(gamma * a[tail] * decay[tail])) if np.any(tail) else 0.0
    if M is None:
        M = needed
    elif needed > M * (1 + 1e-12):
        ratio = gamma * a * decay
        i = int(np.argmax(tail & (ratio > M * (1 + 1e-12))))
        raise KernelError(
            f"gamma*a <= M*exp(b*a - int_0^a beta) fails at age a={a[i]!r} "
            f"(gamma*a*exp(int beta - b*a)={ratio[i]!r}, M={M!r})"
        )
    mid = slice(1, None, 2)
    q = q0 * decay[mid]
    k = decay[mid] * (p0 + gamma * q0 * a[mid])
    da = grid.da
    return MortalityKernel(
        beta_fn, b, gamma, p0, q0, grid, beta[mid], q, k, a_bar, float(M),
        float(np.max(np.abs(np.diff(q))) / da), float(np.max(np.abs(np.diff(k))) / da),
    )


@dataclass
class PdeState:
    f: np.ndarray
    S: float

    def __post_init__(self):
        self.f = np.asarray(self.f, dtype=float)
        if np.any(self.f < 0):
            raise DomainError("density must be nonnegative")


class Moments(NamedTuple):
    X: float
    Y: float


def _integral(values: np.ndarray, da: float) -> float:
    return float(np.sum(values)) * da


def moments(state: PdeState, kernel: MortalityKernel) -> Moments:
    da = kernel.grid.da
    return Moments(_integral(kernel.q * state.f, da), _integral(kernel.k * state.f, da))


def birth_density(state: PdeState, kernel: MortalityKernel, growth: GrowthRateModel) -> float:
    """Renewal value ``mu(S) * int k f`` entering at age zero."""
    return float(growth._value(state.S)) * _integral(kernel.k * state.f, kernel.grid.da)


def _check_step(kernel, D, dt):
    da = kernel.grid.da
    if D < 0:
        raise DomainError(f"dilution rate must be >= 0, got {D}")
    if dt <= 0:
        raise CFLError("dt must be positive")
    if dt > da * (1 + 1e-12):
        raise CFLError(f"CFL condition dt <= da violated: dt={dt!r}, da={da!r}")
    if dt / da + dt * (float(kernel.beta.max()) + D) > 1 + 1e-12:
        raise CFLError(
            f"positivity condition dt/da + dt*(max beta + D) <= 1 violated: dt={dt!r}, D={D!r}"
        )


def pde_step(state: PdeState, kernel: MortalityKernel, growth: GrowthRateModel, S_in: float, D: float, dt: float) -> PdeState:
    """One explicit upwind step; returns a new state.

    Substrate, transport and the renewal inflow all use the current time
    level, so the step is a plain explicit Euler step of the semi-discrete
    system.
    """
    _check_step(kernel, D, dt)
    f, S = state.f, state.S
    da = kernel.grid.da
    m = growth._value(S)
    X = _integral(kernel.q * f, da)
    S_new = S + dt * (D * (S_in - S) - m * X)
    if not 0 < S_new < S_in:
        raise DomainError(f"substrate left (0, {S_in}): S={S_new!r}")
    inflow = np.empty_like(f)
    inflow[0] = m * _integral(kernel.k * f, da)
    inflow[1:] = f[:-1]
    out = f - (dt / da) * (f - inflow) - dt * (kernel.beta + D) * f
    return PdeState(out, S_new)


# --- initial profiles -------------------------------------------------------


def exponential_profile(grid: AgeGrid, amplitude: float, rate: float) -> np.ndarray:
    return amplitude * np.exp(-rate * grid.ages)


def cohort_profile(grid: AgeGrid, mass: float, center: float, width: float) -> np.ndarray:
    """Gaussian bump of total mass ``mass`` around age ``center``."""
    shape = np.exp(-0.5 * ((grid.ages - center) / width) ** 2)
    return mass * shape / _integral(shape, grid.da)


def compatible_exponential(kernel: MortalityKernel, growth: GrowthRateModel, S0: float, X0: float) -> np.ndarray:
    """Exponential profile satisfying the renewal condition at ``S0`` with feed moment ``X0``.

    Matching the boundary avoids a jump travelling along ``a = t``, which a
    first-order scheme would smear at a slower-than-linear rate.
    """
    grid, m = kernel.grid, growth._value(S0)
    if m <= 0 or X0 <= 0:
        raise ValueError("need mu(S0) > 0 and X0 > 0")

    def mismatch(rate):
        return m * _integral(kernel.k * np.exp(-rate * grid.ages), grid.da) - 1.0

    hi = 1.0
    while mismatch(hi) > 0:
        hi *= 2.0
    lo = hi / 2
    while mismatch(lo) < 0 and lo > 1e-12:
        lo /= 2
    rate = bisect(mismatch, lo, hi)
    shape = np.exp(-rate * grid.ages)
    return X0 * shape / _integral(kernel.q * shape, grid.da)


def steady_profile(kernel: MortalityKernel, sys: age.AgeSystem, eq: age.AgeEquilibrium) -> np.ndarray:
    """Stationary density under ``D*``, scaled so its feed moment is ``X*``."""
    a = kernel.grid.ages
    beta_int = cumulative_trapezoid(kernel.beta, a, initial=0.0) + kernel.beta[0] * a[0]
    shape = np.exp(-beta_int - sys.D_star * a)
    return eq.X_star * shape / _integral(kernel.q * shape, kernel.grid.da)


# --- runs -------------------------------------------------------------------


@dataclass
class PdeRun:
    """Moment trajectory of a PDE run; ``states`` columns are (X, Y, S)."""

    trajectory: Trajectory
    final: PdeState
    boundary_ratio: float
    meta: dict = field(default_factory=dict)


def run_pde(
    init: PdeState,
    kernel: MortalityKernel,
    growth: GrowthRateModel,
    S_in: float,
    D_fn: Callable[[float, float, float], float],
    t_final: float,
    dt: float,
) -> PdeRun:
    """Step the PDE to ``t_final`` with the dilution rate ``D_fn(X, Y, S)``.

    ``dt`` is shrunk so an integer number of steps lands on ``t_final``.
    ``boundary_ratio`` is the largest value of f at the oldest age relative
    to max f seen during the run.
    """
    n_steps = max(1, math.ceil(t_final / dt - 1e-12))
    dt = t_final / n_steps
    state = PdeState(init.f.copy(), init.S)
    times = np.empty(n_steps + 1)
    states = np.empty((n_steps + 1, 3))
    inputs = np.empty(n_steps + 1)
    tail = 0.0
    for i in range(n_steps + 1):
        X, Y = moments(state, kernel)
        D = D_fn(X, Y, state.S)
        times[i], states[i], inputs[i] = i * dt, (X, Y, state.S), D
        peak = float(state.f.max())
        if peak > 0:
            tail = max(tail, float(state.f[-1]) / peak)
        if i < n_steps:
            state = pde_step(state, kernel, growth, S_in, D, dt)
    derivs = np.gradient(states, times, axis=0) if n_steps > 1 else np.zeros_like(states)
    traj = Trajectory(times, states, derivs, inputs=inputs, meta={"kind": "pde", "dt": dt})
    return PdeRun(traj, state, tail)


def _check_consistent(kernel: MortalityKernel, sys: age.AgeSystem):
    for name in ("b", "gamma", "p0", "q0"):
        if not math.isclose(getattr(kernel, name), getattr(sys, name), rel_tol=1e-12, abs_tol=0.0):
            raise ValueError(f"kernel {name}={getattr(kernel, name)} differs from system {name}={getattr(sys, name)}")


def closed_loop_pde(
    init: PdeState,
    kernel: MortalityKernel,
    sys: age.AgeSystem,
    eq: age.AgeEquilibrium,
    cfg: FeedbackConfig,
    t_final: float,
    dt: float,
) -> PdeRun:
    """PDE run with the stabilizing feedback evaluated on the current moments."""
    _check_consistent(kernel, sys)

    def D_fn(X, Y, S):
        return age.feedback_D3(sys, eq, cfg, (X, Y, S))

    run = run_pde(init, kernel, sys.growth, sys.S_in, D_fn, t_final, dt)
    run.meta.update(kind="closed", delta=cfg.delta, alpha=cfg.alpha)
    return run


def open_loop_pde(init: PdeState, kernel: MortalityKernel, sys: age.AgeSystem, D: float, t_final: float, dt: float) -> PdeRun:
    _check_consistent(kernel, sys)
    run = run_pde(init, kernel, sys.growth, sys.S_in, lambda X, Y, S: D, t_final, dt)
    run.meta.update(kind="open", D=D)
    return run


# --- reduction check --------------------------------------------------------


@dataclass(frozen=True)
class ReductionComparison:
    n_cells: int
    da: float
    dt: float
    max_rel_error: float
    component_errors: tuple[float, float, float]
    pde: PdeRun
    ode: Trajectory


def compare_with_ode(
    init: PdeState,
    kernel: MortalityKernel,
    sys: age.AgeSystem,
    eq: age.AgeEquilibrium,
    cfg: Optional[FeedbackConfig],
    t_final: float,
    dt: float,
    ode_config: IntegratorConfig = IntegratorConfig(rel_tol=1e-11, abs_tol=1e-13),
) -> ReductionComparison:
    """Run the PDE and the 3-state ODE from the same moments and compare.

    ``cfg=None`` runs both open loop at ``D*``. Errors are
    ``|pde - ode| / |ode|`` per component, maximised over the PDE time nodes.
    """
    if cfg is None:
        pde = open_loop_pde(init, kernel, sys, sys.D_star, t_final, dt)
        rhs = age.open_loop_field3(sys, sys.D_star)
    else:
        pde = closed_loop_pde(init, kernel, sys, eq, cfg, t_final, dt)
        rhs = age.closed_loop_field3(sys, eq, cfg)
    x0 = pde.trajectory.states[0]
    ode = integrate(rhs, (0.0, t_final), x0, ode_config, sys.contains)
    ref = np.array([ode.interpolate(t) for t in pde.trajectory.times])
    rel = np.abs(pde.trajectory.states - ref) / np.abs(ref)
    comp = tuple(float(v) for v in rel.max(axis=0))
    return ReductionComparison(
        kernel.grid.n_cells, kernel.grid.da, pde.trajectory.meta["dt"], max(comp), comp, pde, ode
    )


@dataclass(frozen=True)
class RefinementRow:
    n_cells: int
    da: float
    dt: float
    max_rel_error: float
    ratio: Optional[float]


def refinement_study(
    sys: age.AgeSystem,
    eq: age.AgeEquilibrium,
    cfg: Optional[FeedbackConfig],
    beta_fn: Callable,
    init_fn: Callable[[MortalityKernel], PdeState],
    n_cells_list=(1024, 2048, 4096),
    t_final: float = 50.0,
    a_max: Optional[float] = None,
    courant: float = 0.5,
) -> list[RefinementRow]:
    """Reduction error on successively refined grids with ``dt = courant * da``.

    ``ratio`` is the previous row's error over this row's, so first-order
    behaviour shows up as values near 2 when the grid doubles.
    """
    if a_max is None:
        a_max = truncation_age(sys.b, sys.D_star, sys.p0, sys.q0, sys.gamma)
    rows: list[RefinementRow] = []
    for n in n_cells_list:
        kernel = build_kernels(beta_fn, sys.b, sys.gamma, sys.p0, sys.q0, AgeGrid(a_max, n))
        cmp = compare_with_ode(init_fn(kernel), kernel, sys, eq, cfg, t_final, courant * kernel.grid.da)
        ratio = rows[-1].max_rel_error / cmp.max_rel_error if rows else None
        rows.append(RefinementRow(n, cmp.da, cmp.dt, cmp.max_rel_error, ratio))
    return rows
