"""The lumped chemostat with mortality.

State ``(X, S)`` lives in ``(0, inf) x (0, S_in)``::

    X' = (p0 mu(S) - b - D) X
    S' = D (S_in - S) - mu(S) X

The logarithmic coordinates ``z = (x1, x2)`` send the open domain onto the
plane and the target equilibrium to the origin. The stabilizing feedback is
the mortality-free law ``D* mu(S) X / (mu(S*) X*)`` plus a nonnegative term
that only acts while ``S <= S*``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np
from scipy import integrate as _quad

from . import stability
from ._numerics import GRID_POINTS, grid_max, grid_min
from .kinetics import DomainError, GrowthRateModel, invert_mu, mu_sup_and_lipschitz


class AssumptionError(ValueError):
    """A structural assumption needed by a construction does not hold."""


@dataclass(frozen=True)
class LumpedSystem:
    growth: GrowthRateModel
    S_in: float
    D_star: float
    b: float
    p0: float = 1.0

    def __post_init__(self):
        if not self.S_in > 0:
            raise ValueError(f"S_in must be > 0, got {self.S_in}")
        if not self.D_star > 0:
            raise ValueError(f"D_star must be > 0, got {self.D_star}")
        if not self.b >= 0:
            raise ValueError(f"b must be >= 0, got {self.b}")
        if not self.p0 > 0:
            raise ValueError(f"p0 must be > 0, got {self.p0}")

    def contains(self, state) -> bool:
        X, S = state[0], state[1]
        return X > 0 and 0 < S < self.S_in


@dataclass(frozen=True)
class LumpedEquilibrium:
    X_star: float
    S_star: float
    kappa: float
    mu_star: float


@dataclass(frozen=True)
class FeedbackConfig:
    """Gains of the stabilizing feedback: ``delta > 0``, ``0 <= alpha < 1``."""

    delta: float
    alpha: float = 0.0

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError(f"delta must be > 0, got {self.delta}")
        if not 0 <= self.alpha < 1:
            raise ValueError(f"alpha must lie in [0, 1), got {self.alpha}")


@dataclass(frozen=True)
class LyapunovConstants2:
    A: float
    r: float
    c: float
    R: float


class TransformConstants(NamedTuple):
    g: float
    p: float


class AssumptionCheck(NamedTuple):
    holds: bool
    margin: float


def _check_state(sys: LumpedSystem, state):
    X, S = float(state[0]), float(state[1])
    if not (X > 0 and 0 < S < sys.S_in):
        raise DomainError(f"state (X={X}, S={S}) outside (0,inf) x (0,{sys.S_in})")
    return X, S


def rhs_open(sys: LumpedSystem, state, D: float) -> np.ndarray:
    X, S = _check_state(sys, state)
    if D < 0:
        raise DomainError(f"dilution rate must be >= 0, got {D}")
    m = sys.growth._value(S)
    return np.array([(sys.p0 * m - sys.b - D) * X, D * (sys.S_in - S) - m * X])


def equilibria(sys: LumpedSystem) -> list[LumpedEquilibrium]:
    """Interior equilibria under the constant input ``D*``, ascending in S*."""
    target = (sys.b + sys.D_star) / sys.p0
    out = []
    for S_star in invert_mu(sys.growth, target, sys.S_in):
        m = float(sys.growth._value(S_star))
        X_star = sys.D_star * (sys.S_in - S_star) / m
        out.append(LumpedEquilibrium(X_star, S_star, (sys.S_in - S_star) / S_star, m))
    return out


def make_equilibrium(sys: LumpedSystem, S_star: float) -> LumpedEquilibrium:
    """Equilibrium record for a known S*, e.g. a tangential root."""
    m = float(sys.growth._value(S_star))
    return LumpedEquilibrium(
        sys.D_star * (sys.S_in - S_star) / m, S_star, (sys.S_in - S_star) / S_star, m
    )


# --- coordinate change ------------------------------------------------------


def to_z(sys: LumpedSystem, eq: LumpedEquilibrium, state) -> np.ndarray:
    X, S = _check_state(sys, state)
    x1 = math.log(eq.mu_star * X / (sys.D_star * (sys.S_in - S)))
    x2 = math.log(S * (sys.S_in - eq.S_star) / (eq.S_star * (sys.S_in - S)))
    return np.array([x1, x2])


def from_z(sys: LumpedSystem, eq: LumpedEquilibrium, z) -> np.ndarray:
    x1, x2 = float(z[0]), float(z[1])
    S_in, S_star = sys.S_in, eq.S_star
    # written with e^{-x2} so large positive x2 cannot overflow
    den = (S_in - S_star) * math.exp(-x2) + S_star
    X = sys.D_star * S_in * (S_in - S_star) * math.exp(x1 - x2) / (eq.mu_star * den)
    S = S_star * S_in / den
    return np.array([X, S])


def p_of(eq, x2):
    return eq.kappa * np.exp(-x2) + 1.0


def substrate_of(sys, eq, x2):
    return sys.S_in / p_of(eq, x2)


def g_of(sys, eq, x2):
    return sys.growth._value(substrate_of(sys, eq, x2)) / eq.mu_star


def g_prime_of(sys, eq, x2):
    p = p_of(eq, x2)
    dS = sys.S_in * eq.kappa * np.exp(-x2) / (p * p)
    return sys.growth._derivative(sys.S_in / p) * dS / eq.mu_star


def transform_constants(sys: LumpedSystem, eq: LumpedEquilibrium, x2: float) -> TransformConstants:
    """``g(x2) = mu(S_in / p(x2)) / mu(S*)`` and ``p(x2) = kappa e^{-x2} + 1``."""
    return TransformConstants(float(g_of(sys, eq, x2)), float(p_of(eq, x2)))


# --- feedback and closed loop ----------------------------------------------


def feedback_D(sys: LumpedSystem, eq: LumpedEquilibrium, cfg: FeedbackConfig, state) -> float:
    X, S = _check_state(sys, state)
    return _feedback(sys, eq, cfg.delta * sys.b, cfg.alpha, X, S)


def _feedback(sys, eq, gain, alpha, X, S):
    m = sys.growth._value(S)
    D = sys.D_star * m * X / (eq.mu_star * eq.X_star)
    if S <= eq.S_star and gain:
        D += gain * (abs(m - eq.mu_star) / eq.mu_star) ** (1 + alpha)
    return D


def rhs_closed(sys: LumpedSystem, eq: LumpedEquilibrium, cfg: FeedbackConfig, state) -> np.ndarray:
    return rhs_open(sys, state, feedback_D(sys, eq, cfg, state))


def sdot_closed(sys: LumpedSystem, eq: LumpedEquilibrium, cfg: FeedbackConfig, state) -> float:
    """Closed-loop substrate rate written in the form that exposes the sign of S - S*."""
    X, S = _check_state(sys, state)
    m = sys.growth._value(S)
    out = m * X * (eq.S_star - S) / (sys.S_in - eq.S_star)
    if S <= eq.S_star:
        out += (
            cfg.delta * sys.b * (sys.S_in - S)
            * abs(m - eq.mu_star) ** (1 + cfg.alpha) / eq.mu_star ** (1 + cfg.alpha)
        )
    return out


def closed_loop_field(sys: LumpedSystem, eq: LumpedEquilibrium, cfg: FeedbackConfig):
    """Fast ``rhs(t, y)`` for the integrator; raises DomainError off-domain."""
    val = sys.growth._value
    S_in, p0, b, Ds = sys.S_in, sys.p0, sys.b, sys.D_star
    k1 = Ds / (eq.mu_star * eq.X_star)
    gain, expo, mus, Ss = cfg.delta * b, 1 + cfg.alpha, eq.mu_star, eq.S_star

    def rhs(t, y):
        X, S = y[0], y[1]
        if not (X > 0 and 0 < S < S_in):
            raise DomainError("left the open domain")
        m = val(S)
        D = k1 * m * X
        if S <= Ss and gain:
            D += gain * (abs(m - mus) / mus) ** expo
        return np.array([(p0 * m - b - D) * X, D * (S_in - S) - m * X])

    return rhs


def open_loop_field(sys: LumpedSystem, D: float):
    val = sys.growth._value
    S_in, p0, b = sys.S_in, sys.p0, sys.b

    def rhs(t, y):
        X, S = y[0], y[1]
        if not (X > 0 and 0 < S < S_in):
            raise DomainError("left the open domain")
        m = val(S)
        return np.array([(p0 * m - b - D) * X, D * (S_in - S) - m * X])

    return rhs


def u_of(sys, eq, cfg, x2):
    """Fortifying term of the feedback in z coordinates (zero for x2 > 0)."""
    g = g_of(sys, eq, x2)
    return np.where(x2 <= 0, cfg.delta * sys.b * np.abs(g - 1) ** (1 + cfg.alpha), 0.0)


def feedback_D_z(sys, eq, cfg, z) -> float:
    x1, x2 = z[0], z[1]
    g, p = g_of(sys, eq, x2), p_of(eq, x2)
    return (eq.kappa + 1) * sys.D_star * g * np.exp(x1 - x2) / p + u_of(sys, eq, cfg, x2)


def z_rhs_open(sys, eq, z, D) -> np.ndarray:
    x1, x2 = z[0], z[1]
    g, p = g_of(sys, eq, x2), p_of(eq, x2)
    return np.array([
        sys.b * (g - 1) + sys.D_star * g * (1 - np.exp(x1)),
        p * (D - sys.D_star * g * np.exp(x1)),
    ])


def z_rhs_closed(sys, eq, cfg, z) -> np.ndarray:
    x1, x2 = z[0], z[1]
    g, p = g_of(sys, eq, x2), p_of(eq, x2)
    Ds = sys.D_star
    return np.array([
        sys.b * (g - 1) + Ds * g * (1 - np.exp(x1)),
        Ds * g * np.exp(x1 - x2) * (1 - np.exp(x2)) + p * u_of(sys, eq, cfg, x2),
    ])


# --- local stability ---------------------------------------------------------


def char_poly(sys: LumpedSystem, eq: LumpedEquilibrium) -> tuple[float, float, float]:
    """Open-loop characteristic polynomial ``s^2 + a1 s + a0`` at ``eq``."""
    Ds, b = sys.D_star, sys.b
    g0 = float(g_of(sys, eq, 0.0))
    gp = float(g_prime_of(sys, eq, 0.0))
    p0 = eq.kappa + 1
    return (1.0, Ds * (g0 + p0 * gp), Ds * p0 * gp * (b + Ds * g0))


def classify_equilibrium(sys: LumpedSystem, eq: LumpedEquilibrium, reference=None) -> stability.StabilityReport:
    """Routh-Hurwitz on the closed-form polynomial, cross-checked against
    the eigenvalues of a numeric Jacobian in original coordinates."""
    J = stability.numeric_jacobian(
        lambda y: rhs_open(sys, y, sys.D_star), [eq.X_star, eq.S_star]
    )
    return stability.build_report(char_poly(sys, eq), J, reference)


# --- assumption (A) and the Lyapunov certificate -----------------------------


def check_assumption_A(sys: LumpedSystem, eq: LumpedEquilibrium) -> AssumptionCheck:
    """``min_{S in [S*, S_in]} p0 mu(S) - b``; the assumption holds iff positive."""
    _, margin = grid_min(
        lambda s: sys.p0 * sys.growth._value(s) - sys.b, eq.S_star, sys.S_in
    )
    return AssumptionCheck(margin > 0, float(margin))


def lipschitz_A(sys, eq) -> float:
    L = mu_sup_and_lipschitz(sys.growth, sys.S_in).L
    return L * sys.p0 * eq.S_star / (sys.b + sys.D_star)


def lyapunov_constants(sys: LumpedSystem, eq: LumpedEquilibrium, cfg: FeedbackConfig) -> LyapunovConstants2:
    """Deterministic admissible constants for the 2-state certificate.

    r is the exact supremum of ``b (mu(S*)/mu(S) - 1) / D*`` over
    ``[S*, S_in]`` (clamped at 0), c makes ``r + e^{-c} = (1 + r)/2``, and
    R is twice its lower bound ``A^2 b^2 e^c / D*^2`` (R = 1 when b = 0).
    """
    check = check_assumption_A(sys, eq)
    if not check.holds:
        raise AssumptionError(
            f"assumption (A) fails: min p0*mu(S) - b over [S*, S_in] = {check.margin:.6g}"
        )
    A = lipschitz_A(sys, eq)
    _, r = grid_max(
        lambda s: sys.b * (eq.mu_star / sys.growth._value(s) - 1.0) / sys.D_star,
        eq.S_star, sys.S_in,
    )
    r = max(0.0, r)
    if r >= 1:
        raise AssumptionError(f"r = {r} is not below 1")
    c = -math.log((1 - r) / 2)
    bound = R_lower_bound(sys, A, c)
    R = 2 * bound if bound > 0 else 1.0
    return LyapunovConstants2(A, r, c, R)


def R_lower_bound(sys, A, c) -> float:
    return A * A * sys.b ** 2 * math.exp(c) / sys.D_star ** 2


def Q_prime(sys, eq, cfg, consts, x2):
    x2 = np.asarray(x2, dtype=float)
    g, p = g_of(sys, eq, x2), p_of(eq, x2)
    with np.errstate(over="ignore", invalid="ignore"):
        neg = x2 - sys.b / (2 * sys.D_star * cfg.delta) * np.abs(g - 1) ** (1 - cfg.alpha) / (p * g)
        pos = consts.R * np.exp(x2) * np.expm1(x2) / (g * g)
    return np.where(x2 <= 0, neg, pos)


def Q(sys, eq, cfg, consts, x2: float, tol: float = 1e-10) -> float:
    x2 = float(x2)
    if x2 <= 0:
        k = sys.b / (2 * sys.D_star * cfg.delta)
        if k == 0 or x2 == 0:
            return 0.5 * x2 * x2
        fn = lambda s: abs(float(g_of(sys, eq, s)) - 1) ** (1 - cfg.alpha) / (
            float(p_of(eq, s)) * float(g_of(sys, eq, s))
        )
        val, _ = _quad.quad(fn, x2, 0.0, epsabs=tol, epsrel=tol, limit=200)
        return 0.5 * x2 * x2 + k * val
    fn = lambda s: math.exp(s) * math.expm1(s) / float(g_of(sys, eq, s)) ** 2
    val, _ = _quad.quad(fn, 0.0, x2, epsabs=tol, epsrel=tol, limit=200)
    return consts.R * val


def V2(sys, eq, cfg, consts, z) -> float:
    x1 = float(z[0])
    return math.expm1(x1) - x1 + Q(sys, eq, cfg, consts, z[1])


def V2_dot(sys, eq, cfg, consts, z):
    """Derivative of V2 along the closed loop; accepts ``z`` of shape (2, ...)."""
    x1 = np.asarray(z[0], dtype=float)
    x2 = np.asarray(z[1], dtype=float)
    g, p = g_of(sys, eq, x2), p_of(eq, x2)
    u = u_of(sys, eq, cfg, x2)
    qp = Q_prime(sys, eq, cfg, consts, x2)
    Ds, b = sys.D_star, sys.b
    e1 = np.expm1(x1)
    return (
        b * (g - 1) * e1
        - Ds * g * e1 ** 2
        + qp * p * u
        - Ds * qp * g * np.exp(x1 - x2) * np.expm1(x2)
    )


def V2_dot_gradient(sys, eq, cfg, consts, z) -> float:
    """Independent route: gradient of V2 dotted with the closed-loop field."""
    x1, x2 = float(z[0]), float(z[1])
    f = z_rhs_closed(sys, eq, cfg, np.array([x1, x2]))
    return math.expm1(x1) * f[0] + float(Q_prime(sys, eq, cfg, consts, x2)) * f[1]


# --- necessity: the divergence scenario when (A) is violated ---------------


@dataclass(frozen=True)
class Theorem2Scenario:
    """Constants of the divergence construction for a nonnegative feedback.

    Starting from ``(x1_0, xbar2)`` in z coordinates, every closed loop
    with ``D >= 0`` keeps ``x2 >= beta`` and ``x1(t) <= x1_0 - theta t``.
    """

    eq: LumpedEquilibrium
    S_bar: float
    theta: float
    beta: float
    xbar2: float
    x1_0: float
    G: float
    M: float
    margin: float

    def initial_state(self) -> np.ndarray:
        return np.array([self.x1_0, self.xbar2])


def _x2_of_S(sys, eq, S):
    return math.log(S * (sys.S_in - eq.S_star) / (eq.S_star * (sys.S_in - S)))


def _theorem2_hypotheses(sys, eq, S_bar) -> Optional[str]:
    if not eq.S_star < S_bar < sys.S_in:
        return f"S_bar={S_bar} must lie in (S*={eq.S_star}, S_in={sys.S_in})"
    m_in = sys.p0 * sys.growth._value(sys.S_in)
    m_bar = sys.p0 * sys.growth._value(S_bar)
    if not m_in < m_bar < sys.b:
        return (
            f"need p0*mu(S_in) < p0*mu(S_bar) < b, got {m_in:.6g}, {m_bar:.6g}, {sys.b:.6g}"
        )
    _, dmax = grid_max(sys.growth._derivative, S_bar, sys.S_in)
    if dmax > 0:
        return f"mu' must be <= 0 on [S_bar, S_in]; max is {dmax:.3g}"
    return None


def theorem2_scenario(
    sys: LumpedSystem,
    S_bar: Optional[float] = None,
    eq: Optional[LumpedEquilibrium] = None,
) -> Theorem2Scenario:
    """Build the divergence scenario showing global stabilization is impossible.

    When ``S_bar`` is omitted, the feasible set on the decreasing tail of mu
    is scanned on a grid and its midpoint taken. ``eq`` defaults to the
    lowest-S equilibrium.
    """
    if eq is None:
        eqs = equilibria(sys)
        if not eqs:
            raise AssumptionError("system has no interior equilibrium")
        eq = eqs[0]
    if S_bar is None:
        xs = np.linspace(eq.S_star, sys.S_in, GRID_POINTS + 1)[1:-1]
        der = sys.growth._derivative(xs)
        # suffix condition: mu' <= 0 from S_bar up to S_in
        tail_ok = np.flip(np.logical_and.accumulate(np.flip(der <= 0)))
        m = sys.p0 * sys.growth._value(xs)
        m_in = sys.p0 * sys.growth._value(sys.S_in)
        feasible = xs[tail_ok & (m < sys.b) & (m > m_in)]
        if feasible.size == 0:
            raise AssumptionError("no S_bar satisfies the divergence hypotheses")
        S_bar = float(feasible[feasible.size // 2])
    problem = _theorem2_hypotheses(sys, eq, S_bar)
    if problem:
        raise AssumptionError(problem)

    b, Ds, p0, kappa, S_in = sys.b, sys.D_star, sys.p0, eq.kappa, sys.S_in
    theta = b - p0 * float(sys.growth._value(S_bar))
    beta = _x2_of_S(sys, eq, S_bar)
    _, M = grid_max(lambda s: np.abs(sys.growth._derivative(s)), S_bar, S_in)
    G = 1 + p0 * kappa * S_in * M / ((Ds + b) * (kappa + math.exp(beta)))

    g_beta = float(g_of(sys, eq, beta))
    for frac in (0.9, 0.99, 0.999, 0.9999):
        S2 = S_bar + frac * (S_in - S_bar)
        xbar2 = _x2_of_S(sys, eq, S2)
        if float(g_of(sys, eq, xbar2)) < g_beta:
            break
    else:
        raise AssumptionError("mu is flat on [S_bar, S_in); no admissible xbar2")
    slack = b - theta - (b + Ds) * float(g_of(sys, eq, xbar2))
    # spend half the slack on the exponential term
    x1_0 = math.log(0.5 * slack * theta / ((kappa + 1) * G * b * Ds))
    margin = b - theta - (b + Ds) * float(g_of(sys, eq, xbar2)) - (
        (kappa + 1) * G * b * Ds * math.exp(x1_0) / theta
    )
    return Theorem2Scenario(eq, S_bar, theta, beta, xbar2, x1_0, G, M, margin)


def theorem2_field(sys, eq, D_fn):
    """z-coordinate field for an arbitrary nonnegative feedback ``D_fn(z)``."""
    def rhs(t, z):
        return z_rhs_open(sys, eq, z, D_fn(z))
    return rhs
