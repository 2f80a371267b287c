"""Adaptive Dormand-Prince integration with open-domain guards.

The integrator never projects states back into the domain: a trial step
whose stages or endpoint leave the guarded domain is rejected and halved.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .kinetics import DomainError


class IntegrationError(RuntimeError):
    """Raised when the integrator cannot continue."""


class BoundaryHit(IntegrationError):
    """Step size collapsed while the trajectory pressed against the domain edge."""


@dataclass(frozen=True)
class IntegratorConfig:
    rel_tol: float = 1e-9
    abs_tol: float = 1e-11
    max_step: float = math.inf
    first_step: Optional[float] = None

    def __post_init__(self):
        for name in ("rel_tol", "abs_tol"):
            tol = getattr(self, name)
            if not 0 < tol <= 1e-2:
                raise ValueError(f"{name} must lie in (0, 1e-2], got {tol}")
        if self.max_step <= 0:
            raise ValueError("max_step must be positive")


@dataclass
class Trajectory:
    """Accepted integrator steps, plus optional input and Lyapunov columns."""

    times: np.ndarray
    states: np.ndarray
    derivs: np.ndarray
    inputs: Optional[np.ndarray] = None
    lyapunov: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    @property
    def final_state(self) -> np.ndarray:
        return self.states[-1]

    def __len__(self):
        return len(self.times)

    def interpolate(self, t: float) -> np.ndarray:
        """Cubic Hermite dense output between accepted steps."""
        ts = self.times
        if t <= ts[0]:
            return self.states[0].copy()
        if t >= ts[-1]:
            return self.states[-1].copy()
        i = int(np.searchsorted(ts, t)) - 1
        h = ts[i + 1] - ts[i]
        s = (t - ts[i]) / h
        y0, y1 = self.states[i], self.states[i + 1]
        f0, f1 = self.derivs[i], self.derivs[i + 1]
        h00 = 2 * s**3 - 3 * s**2 + 1
        h10 = s**3 - 2 * s**2 + s
        h01 = -2 * s**3 + 3 * s**2
        h11 = s**3 - s**2
        return h00 * y0 + h10 * h * f0 + h01 * y1 + h11 * h * f1


# Dormand-Prince 5(4) tableau.
_C = (0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0)
_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
_E = (
    71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40,
)


def _initial_step(rhs, t0, y0, f0, span, rtol, atol):
    scale = atol + rtol * np.abs(y0)
    d0 = float(np.sqrt(np.mean((y0 / scale) ** 2)))
    d1 = float(np.sqrt(np.mean((f0 / scale) ** 2)))
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    return min(h0, span)


def integrate(
    rhs: Callable[[float, np.ndarray], np.ndarray],
    t_span: tuple[float, float],
    init,
    config: IntegratorConfig = IntegratorConfig(),
    domain_guard: Optional[Callable[[np.ndarray], bool]] = None,
) -> Trajectory:
    """Integrate ``y' = rhs(t, y)`` over ``t_span`` with an embedded RK 5(4) pair.

    Args:
        rhs: vector field; may raise :class:`DomainError` at stage states,
            which counts as leaving the domain.
        t_span: ``(t0, t1)`` with ``t1 > t0``.
        init: initial state, must satisfy ``domain_guard``.
        config: tolerances and step limits.
        domain_guard: returns True for states inside the open domain.

    Returns:
        Trajectory holding every accepted step.

    Raises:
        BoundaryHit: step size fell below ``1e-12 * span``.
        IntegrationError: non-finite derivative at an accepted state.
    """
    t0, t1 = float(t_span[0]), float(t_span[1])
    span = t1 - t0
    if span <= 0:
        raise ValueError("t_span must be increasing")
    y = np.array(init, dtype=float)
    if domain_guard is not None and not domain_guard(y):
        raise DomainError(f"initial state {y} outside the domain")
    rtol, atol = config.rel_tol, config.abs_tol
    f = np.asarray(rhs(t0, y), dtype=float)
    if not np.all(np.isfinite(f)):
        raise IntegrationError(f"non-finite derivative at t={t0}")
    h = config.first_step or _initial_step(rhs, t0, y, f, span, rtol, atol)
    h = min(h, config.max_step)
    h_min = 1e-12 * span

    times, states, derivs = [t0], [y], [f]
    t = t0
    k = [f, None, None, None, None, None, None]
    a1, a2, a3, a4, a5, a6 = _A[1:]
    e = _E
    while t < t1:
        if t + h > t1:
            h = t1 - t
        ok = True
        try:
            k[1] = rhs(t + _C[1] * h, y + h * a1[0] * k[0])
            k[2] = rhs(t + _C[2] * h, y + h * (a2[0] * k[0] + a2[1] * k[1]))
            k[3] = rhs(t + _C[3] * h, y + h * (a3[0] * k[0] + a3[1] * k[1] + a3[2] * k[2]))
            k[4] = rhs(
                t + _C[4] * h,
                y + h * (a4[0] * k[0] + a4[1] * k[1] + a4[2] * k[2] + a4[3] * k[3]),
            )
            k[5] = rhs(
                t + h,
                y + h * (a5[0] * k[0] + a5[1] * k[1] + a5[2] * k[2] + a5[3] * k[3] + a5[4] * k[4]),
            )
            y_new = y + h * (a6[0] * k[0] + a6[2] * k[2] + a6[3] * k[3] + a6[4] * k[4] + a6[5] * k[5])
            if domain_guard is not None and not domain_guard(y_new):
                ok = False
            else:
                k[6] = rhs(t + h, y_new)
        except DomainError:
            ok = False
        if ok:
            err_vec = h * (
                e[0] * k[0] + e[2] * k[2] + e[3] * k[3] + e[4] * k[4] + e[5] * k[5] + e[6] * k[6]
            )
            scale = atol + rtol * np.maximum(np.abs(y), np.abs(y_new))
            err = math.sqrt(float(np.mean((err_vec / scale) ** 2)))
            if not math.isfinite(err):
                ok = False
        if not ok:
            h *= 0.5
            if h < h_min:
                raise BoundaryHit(f"step size underflow at t={t}, state={y}")
            continue
        if err <= 1.0:
            t = t + h
            y = y_new
            f = np.asarray(k[6], dtype=float)
            if not np.all(np.isfinite(f)):
                raise IntegrationError(f"non-finite derivative at t={t}")
            k[0] = f
            times.append(t)
            states.append(y)
            derivs.append(f)
            fac = 5.0 if err == 0 else min(5.0, 0.9 * err ** -0.2)
        else:
            fac = max(0.2, 0.9 * err ** -0.2)
        h = min(h * fac, config.max_step)
        if h < h_min:
            raise BoundaryHit(f"step size underflow at t={t}, state={y}")
    return Trajectory(np.array(times), np.array(states), np.array(derivs))


# --- closed-loop runs -------------------------------------------------------


def _model_hooks(model, eq, cfg):
    # Imported lazily: the model modules have no need for the integrator.
    from . import age, lumped

    if isinstance(model, lumped.LumpedSystem):
        return (
            lumped.closed_loop_field(model, eq, cfg),
            lambda y: lumped.feedback_D(model, eq, cfg, y),
            model.contains,
            lambda consts, y: lumped.V2(model, eq, cfg, consts, lumped.to_z(model, eq, y)),
        )
    if isinstance(model, age.AgeSystem):
        return (
            age.closed_loop_field3(model, eq, cfg),
            lambda y: age.feedback_D3(model, eq, cfg, y),
            model.contains,
            lambda consts, y: age.V3(model, eq, cfg, consts, age.to_z3(model, eq, y)),
        )
    raise TypeError(f"unsupported model type {type(model).__name__}")


def simulate_closed_loop(
    model,
    eq,
    cfg,
    init,
    t_final: float,
    config: IntegratorConfig = IntegratorConfig(),
    lyapunov_consts=None,
) -> Trajectory:
    """Run the stabilizing feedback on a lumped or age model from ``init``.

    The applied dilution rate is recorded at every accepted step. Passing
    ``lyapunov_consts`` also fills the ``lyapunov`` column with V2 or V3.
    """
    rhs, feedback, guard, V = _model_hooks(model, eq, cfg)
    traj = integrate(rhs, (0.0, t_final), init, config, guard)
    inputs = np.array([feedback(y) for y in traj.states])
    if not np.all(inputs > 0):
        # the feedback is positive on the open domain; reaching here is a bug
        raise IntegrationError("non-positive dilution rate recorded on a closed-loop run")
    traj.inputs = inputs
    if lyapunov_consts is not None:
        traj.lyapunov = np.array([V(lyapunov_consts, y) for y in traj.states])
    traj.meta.update(kind="closed", delta=cfg.delta, alpha=cfg.alpha)
    return traj


@dataclass(frozen=True)
class ConvergenceMetrics:
    converged: bool
    settle_time: Optional[float]
    final_error: float


def convergence_metrics(traj: Trajectory, target, tol: float, components=None) -> ConvergenceMetrics:
    """Max-norm distance to ``target`` and the time after which it stays below ``tol``.

    ``components`` restricts the norm to selected state indices (``target``
    then lists only those). The crossing after the last excursion is located
    on the Hermite interpolant, so the settle time does not depend on step
    placement.
    """
    idx = slice(None) if components is None else list(components)
    target = np.asarray(target, dtype=float)
    err = np.max(np.abs(traj.states[:, idx] - target), axis=1)
    final = float(err[-1])
    if final > tol:
        return ConvergenceMetrics(False, None, final)
    outside = np.nonzero(err > tol)[0]
    if outside.size == 0:
        return ConvergenceMetrics(True, float(traj.times[0]), final)
    i = int(outside[-1])
    lo, hi = float(traj.times[i]), float(traj.times[i + 1])

    def excess(t):
        return float(np.max(np.abs(traj.interpolate(t)[idx] - target))) - tol

    if excess(hi) > 0:
        # interpolant overshoots at the node; fall back to the node itself
        return ConvergenceMetrics(True, hi, final)
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if excess(mid) > 0:
            lo = mid
        else:
            hi = mid
    return ConvergenceMetrics(True, hi, final)
