"""Three-state chemostat obtained from the age-structured model.

State ``(X, Y, S)``: feed activity, birth activity, substrate::

    X' = q0 mu(S) Y - (b + D) X
    Y' = p0 mu(S) Y + gamma X - (b + D) Y
    S' = D (S_in - S) - mu(S) X

The feedback is the lumped law with the fortifying gain ``delta`` in place
of ``delta * b``; it never reads Y.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np
from scipy import integrate as _quad

from . import stability
from ._numerics import grid_max
from .kinetics import DomainError, GrowthRateModel, invert_mu, mu_sup_and_lipschitz
from .lumped import AssumptionError, FeedbackConfig, g_of, p_of


@dataclass(frozen=True)
class AgeSystem:
    growth: GrowthRateModel
    S_in: float
    D_star: float
    b: float
    p0: float
    q0: float
    gamma: float

    def __post_init__(self):
        if not self.S_in > 0:
            raise ValueError(f"S_in must be > 0, got {self.S_in}")
        if not self.D_star > 0:
            raise ValueError(f"D_star must be > 0, got {self.D_star}")
        if not self.b >= 0:
            raise ValueError(f"b must be >= 0, got {self.b}")
        if not self.p0 > 0:
            raise ValueError(f"p0 must be > 0, got {self.p0}")
        if not self.q0 > 0:
            raise ValueError(f"q0 must be > 0, got {self.q0}")
        if not self.gamma >= 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")

    @property
    def growth_level(self) -> float:
        """Value of mu(S*) at any equilibrium under ``D*``."""
        bd = self.b + self.D_star
        return bd * bd / (self.p0 * bd + self.gamma * self.q0)

    def contains(self, state) -> bool:
        X, Y, S = state[0], state[1], state[2]
        return X > 0 and Y > 0 and 0 < S < self.S_in


@dataclass(frozen=True)
class AgeEquilibrium:
    X_star: float
    Y_star: float
    S_star: float
    kappa: float
    lam: float
    mu_star: float


@dataclass(frozen=True)
class LyapunovConstants3:
    A: float
    Omega: float
    B: float
    r: float
    c: float
    R: float
    phi: float


class AssumptionCCheck(NamedTuple):
    holds: bool
    margin: float
    r: float


def _check_state(sys: AgeSystem, state):
    X, Y, S = float(state[0]), float(state[1]), float(state[2])
    if not (X > 0 and Y > 0 and 0 < S < sys.S_in):
        raise DomainError(
            f"state (X={X}, Y={Y}, S={S}) outside (0,inf)^2 x (0,{sys.S_in})"
        )
    return X, Y, S


def rhs_open3(sys: AgeSystem, state, D: float) -> np.ndarray:
    X, Y, S = _check_state(sys, state)
    if D < 0:
        raise DomainError(f"dilution rate must be >= 0, got {D}")
    m = sys.growth._value(S)
    bD = sys.b + D
    return np.array([
        sys.q0 * m * Y - bD * X,
        sys.p0 * m * Y + sys.gamma * X - bD * Y,
        D * (sys.S_in - S) - m * X,
    ])


def _make_eq(sys: AgeSystem, S_star: float) -> AgeEquilibrium:
    bd = sys.b + sys.D_star
    w = sys.p0 * bd + sys.gamma * sys.q0
    X = sys.D_star * (sys.S_in - S_star) * w / bd ** 2
    Y = sys.D_star * (sys.S_in - S_star) * w * w / (sys.q0 * bd ** 3)
    m = float(sys.growth._value(S_star))
    lam = 1 - sys.p0 * m / bd
    return AgeEquilibrium(X, Y, S_star, (sys.S_in - S_star) / S_star, lam, m)


def equilibria3(sys: AgeSystem) -> list[AgeEquilibrium]:
    return [_make_eq(sys, s) for s in invert_mu(sys.growth, sys.growth_level, sys.S_in)]


def make_equilibrium3(sys: AgeSystem, S_star: float) -> AgeEquilibrium:
    return _make_eq(sys, S_star)


def lambda_both(sys: AgeSystem, eq: AgeEquilibrium) -> tuple[float, float]:
    """``(gamma X* / (Y* (b+D*)), 1 - p0 mu(S*) / (b+D*))``."""
    bd = sys.b + sys.D_star
    return sys.gamma * eq.X_star / (eq.Y_star * bd), 1 - sys.p0 * eq.mu_star / bd


# --- coordinates --------------------------------------------------------------


def to_z3(sys: AgeSystem, eq: AgeEquilibrium, state) -> np.ndarray:
    X, Y, S = _check_state(sys, state)
    S_in, Ss = sys.S_in, eq.S_star
    return np.array([
        math.log((S_in - Ss) * X / (eq.X_star * (S_in - S))),
        math.log(eq.X_star * Y / (eq.Y_star * X)),
        math.log(S * (S_in - Ss) / (Ss * (S_in - S))),
    ])


def from_z3(sys: AgeSystem, eq: AgeEquilibrium, z) -> np.ndarray:
    x1, x2, x3 = float(z[0]), float(z[1]), float(z[2])
    p = eq.kappa * math.exp(-x3) + 1
    k = (eq.kappa + 1) / p
    return np.array([
        eq.X_star * k * math.exp(x1 - x3),
        eq.Y_star * k * math.exp(x1 + x2 - x3),
        sys.S_in / p,
    ])


# --- feedback ---------------------------------------------------------------


def feedback_D3(sys: AgeSystem, eq: AgeEquilibrium, cfg: FeedbackConfig, state) -> float:
    X, _, S = _check_state(sys, state)
    m = sys.growth._value(S)
    D = sys.D_star * m * X / (eq.mu_star * eq.X_star)
    if S <= eq.S_star:
        D += cfg.delta * (abs(m - eq.mu_star) / eq.mu_star) ** (1 + cfg.alpha)
    return D


def rhs_closed3(sys, eq, cfg, state) -> np.ndarray:
    return rhs_open3(sys, state, feedback_D3(sys, eq, cfg, state))


def closed_loop_field3(sys: AgeSystem, eq: AgeEquilibrium, cfg: FeedbackConfig):
    val = sys.growth._value
    S_in, p0, q0, b, gam = sys.S_in, sys.p0, sys.q0, sys.b, sys.gamma
    k1 = sys.D_star / (eq.mu_star * eq.X_star)
    gain, expo, mus, Ss = cfg.delta, 1 + cfg.alpha, eq.mu_star, eq.S_star

    def rhs(t, y):
        X, Y, S = y[0], y[1], y[2]
        if not (X > 0 and Y > 0 and 0 < S < S_in):
            raise DomainError("left the open domain")
        m = val(S)
        D = k1 * m * X
        if S <= Ss:
            D += gain * (abs(m - mus) / mus) ** expo
        bD = b + D
        return np.array([q0 * m * Y - bD * X, p0 * m * Y + gam * X - bD * Y, D * (S_in - S) - m * X])

    return rhs


def open_loop_field3(sys: AgeSystem, D: float):
    val = sys.growth._value
    S_in, p0, q0, b, gam = sys.S_in, sys.p0, sys.q0, sys.b, sys.gamma
    bD = b + D

    def rhs(t, y):
        X, Y, S = y[0], y[1], y[2]
        if not (X > 0 and Y > 0 and 0 < S < S_in):
            raise DomainError("left the open domain")
        m = val(S)
        return np.array([q0 * m * Y - bD * X, p0 * m * Y + gam * X - bD * Y, D * (S_in - S) - m * X])

    return rhs


def u3_of(sys, eq, cfg, x3):
    g = g_of(sys, eq, x3)
    return np.where(x3 <= 0, cfg.delta * np.abs(g - 1) ** (1 + cfg.alpha), 0.0)


def z_rhs_open3(sys, eq, z, D) -> np.ndarray:
    x1, x2, x3 = z[0], z[1], z[2]
    g, p = g_of(sys, eq, x3), p_of(eq, x3)
    return np.array([
        _x1_dot(sys, g, x1, x2),
        _x2_dot(sys, eq, g, x2),
        p * (D - sys.D_star * g * np.exp(x1)),
    ])


def z_rhs_closed3(sys, eq, cfg, z) -> np.ndarray:
    x1, x2, x3 = z[0], z[1], z[2]
    g, p = g_of(sys, eq, x3), p_of(eq, x3)
    return np.array([
        _x1_dot(sys, g, x1, x2),
        _x2_dot(sys, eq, g, x2),
        sys.D_star * g * np.exp(x1 - x3) * (1 - np.exp(x3)) + p * u3_of(sys, eq, cfg, x3),
    ])


def _x1_dot(sys, g, x1, x2):
    bd = sys.b + sys.D_star
    return bd * g * np.expm1(x2) + sys.b * (g - 1) - sys.D_star * g * np.expm1(x1)


def _x2_dot(sys, eq, g, x2):
    lam = eq.lam
    return (sys.b + sys.D_star) * (lam * (1 - g) + lam * np.expm1(-x2) - g * np.expm1(x2))


# --- local stability ------------------------------------------------------------


def char_poly3(sys: AgeSystem, eq: AgeEquilibrium) -> tuple[float, float, float, float]:
    """Closed-form cubic ``s^3 + a2 s^2 + a1 s + a0`` with ``zeta = mu'(S*) X*``."""
    b, Ds, q0, gam = sys.b, sys.D_star, sys.q0, sys.gamma
    bd = b + Ds
    w = sys.p0 * bd + gam * q0
    zeta = float(sys.growth._derivative(eq.S_star)) * eq.X_star
    a2 = b + gam * q0 * bd / w + 2 * Ds + zeta
    a1 = bd * (Ds + (Ds + zeta) * gam * q0 / w + 2 * zeta)
    a0 = bd * bd * zeta
    return (1.0, a2, a1, a0)


def jacobian3(sys: AgeSystem, eq: AgeEquilibrium) -> np.ndarray:
    """Analytic open-loop Jacobian in the (S, X, Y) ordering."""
    Ds, b = sys.D_star, sys.b
    dm = float(sys.growth._derivative(eq.S_star))
    m = eq.mu_star
    return np.array([
        [-Ds - dm * eq.X_star, -m, 0.0],
        [sys.q0 * dm * eq.Y_star, -(b + Ds), sys.q0 * m],
        [sys.p0 * dm * eq.Y_star, sys.gamma, -b - Ds + sys.p0 * m],
    ])


def classify_equilibrium3(sys: AgeSystem, eq: AgeEquilibrium, reference=None) -> stability.StabilityReport:
    """Routh-Hurwitz on the closed-form cubic vs numeric-Jacobian eigenvalues.

    Coefficient discrepancies and verdict disagreements are written to the
    report's ``notes``; they are never silently reconciled.
    """
    J = stability.numeric_jacobian(
        lambda y: rhs_open3(sys, y, sys.D_star), [eq.X_star, eq.Y_star, eq.S_star]
    )
    return stability.build_report(char_poly3(sys, eq), J, reference)


def closed_loop_linearization3(sys, eq, cfg) -> np.ndarray:
    """Numeric Jacobian of the closed loop in z coordinates at the origin."""
    return stability.numeric_jacobian(lambda z: z_rhs_closed3(sys, eq, cfg, z), np.zeros(3))


# --- assumption (C) and the 3-state certificate -----------------------------------


def _c_terms(sys, eq, phi):
    bd = sys.b + sys.D_star
    lam = eq.lam
    lin = sys.b - lam * bd / 2
    quad = (1 + lam) * lam ** 2 * phi * bd ** 2 / (4 * sys.D_star)
    rhs = sys.D_star * (1 - 1 / (4 * (1 + lam) * phi))
    return lin, quad, rhs


def check_assumption_C(sys: AgeSystem, eq: AgeEquilibrium, phi: float) -> AssumptionCCheck:
    """Sup over [S*, S_in] of the left side versus the right side.

    With ``w = mu(S*)/mu(S) - 1`` the left side is ``lin w + quad w^2``;
    ``r`` is right side minus the supremum, so holds <=> margin > 0 <=> r > 0.
    """
    if not phi > 1:
        raise ValueError(f"phi must exceed 1, got {phi}")
    lin, quad, rhs = _c_terms(sys, eq, phi)

    def lhs(s):
        w = eq.mu_star / sys.growth._value(s) - 1
        return lin * w + quad * w * w

    _, sup = grid_max(lhs, eq.S_star, sys.S_in)
    margin = rhs - sup
    return AssumptionCCheck(margin > 0, float(margin), float(margin))


PHI_GRID = 1 + np.geomspace(1e-3, 99.0, 400)


def find_phi(sys: AgeSystem, eq: AgeEquilibrium) -> Optional[float]:
    """Margin-maximizing phi on a log grid in (1, 100], or None if none works."""
    best, best_margin = None, 0.0
    for phi in PHI_GRID:
        m = check_assumption_C(sys, eq, float(phi)).margin
        if m > best_margin:
            best, best_margin = float(phi), m
    return best


def lyapunov_constants3(sys: AgeSystem, eq: AgeEquilibrium, cfg: FeedbackConfig, phi: float) -> LyapunovConstants3:
    check = check_assumption_C(sys, eq, phi)
    if not check.holds:
        raise AssumptionError(
            f"assumption (C) fails at phi={phi}: margin {check.margin:.6g}"
        )
    b, Ds, lam = sys.b, sys.D_star, eq.lam
    bd = b + Ds
    B = (1 + lam) * phi * bd ** 2 / Ds
    Omega = 2 * b * b + lam * B * B * Ds * Ds / (2 * bd * bd)
    r = check.r
    wmax = _max_rel_gap(sys, eq)
    need = (b + lam * bd / 2) * wmax + 2 * Ds
    c = max(math.log(need / r), 0.0) + math.log(2)
    L = mu_sup_and_lipschitz(sys.growth, sys.S_in).L
    A = L * eq.S_star / eq.mu_star
    bound = R_lower_bound3(sys, A, Omega, c)
    R = 2 * bound if bound > 0 else 1.0
    return LyapunovConstants3(A, Omega, B, r, c, R, phi)


def _max_rel_gap(sys, eq) -> float:
    """``max |g - 1| / g`` over x3 >= 0, i.e. over S in [S*, S_in]."""
    return grid_max(
        lambda s: np.abs(1 - eq.mu_star / sys.growth._value(s)), eq.S_star, sys.S_in
    )[1]


def R_lower_bound3(sys, A, Omega, c) -> float:
    return A * A * Omega * math.exp(c) / sys.D_star ** 2


def c_condition_slack(sys, eq, consts) -> float:
    """``r e^c`` minus the left side of the c-condition (positive when met)."""
    bd = sys.b + sys.D_star
    wmax = _max_rel_gap(sys, eq)
    return consts.r * math.exp(consts.c) - ((sys.b + eq.lam * bd / 2) * wmax + 2 * sys.D_star)


def Q3_prime(sys, eq, cfg, consts, x3):
    x3 = np.asarray(x3, dtype=float)
    g, p = g_of(sys, eq, x3), p_of(eq, x3)
    with np.errstate(over="ignore", invalid="ignore"):
        neg = x3 - consts.Omega / (2 * sys.D_star * cfg.delta) * np.abs(g - 1) ** (1 - cfg.alpha) / (p * g)
        pos = consts.R * np.exp(x3) * np.expm1(x3) / (g * g)
    return np.where(x3 <= 0, neg, pos)


def Q3(sys, eq, cfg, consts, x3: float, tol: float = 1e-10) -> float:
    x3 = float(x3)
    if x3 <= 0:
        k = consts.Omega / (2 * sys.D_star * cfg.delta)
        if k == 0 or x3 == 0:
            return 0.5 * x3 * x3
        fn = lambda s: abs(float(g_of(sys, eq, s)) - 1) ** (1 - cfg.alpha) / (
            float(p_of(eq, s)) * float(g_of(sys, eq, s))
        )
        val, _ = _quad.quad(fn, x3, 0.0, epsabs=tol, epsrel=tol, limit=200)
        return 0.5 * x3 * x3 + k * val
    fn = lambda s: math.exp(s) * math.expm1(s) / float(g_of(sys, eq, s)) ** 2
    val, _ = _quad.quad(fn, 0.0, x3, epsabs=tol, epsrel=tol, limit=200)
    return consts.R * val


def V3(sys, eq, cfg, consts, z) -> float:
    x1, x2 = float(z[0]), float(z[1])
    bd = sys.b + sys.D_star
    return (
        math.expm1(x1) - x1
        + consts.B * (math.expm1(x2) - x2) / bd
        + Q3(sys, eq, cfg, consts, z[2])
    )


def V3_dot(sys, eq, cfg, consts, z):
    """Closed-loop derivative of V3; ``z`` may have shape (3, ...)."""
    x1 = np.asarray(z[0], dtype=float)
    x2 = np.asarray(z[1], dtype=float)
    x3 = np.asarray(z[2], dtype=float)
    b, Ds, B, lam = sys.b, sys.D_star, consts.B, eq.lam
    bd = b + Ds
    g, p = g_of(sys, eq, x3), p_of(eq, x3)
    u = u3_of(sys, eq, cfg, x3)
    qp = Q3_prime(sys, eq, cfg, consts, x3)
    e1, e2 = np.expm1(x1), np.expm1(x2)
    return (
        bd * g * e1 * e2
        + b * (g - 1) * e1
        + B * lam * (1 - g) * e2
        - B * (lam * np.exp(-x2) + g) * e2 ** 2
        - Ds * g * e1 ** 2
        - Ds * g * np.exp(x1 - x3) * qp * np.expm1(x3)
        + qp * p * u
    )


def V3_dot_gradient(sys, eq, cfg, consts, z) -> float:
    x1, x2, x3 = (float(v) for v in z)
    f = z_rhs_closed3(sys, eq, cfg, np.array([x1, x2, x3]))
    bd = sys.b + sys.D_star
    return (
        math.expm1(x1) * f[0]
        + consts.B * math.expm1(x2) / bd * f[1]
        + float(Q3_prime(sys, eq, cfg, consts, x3)) * f[2]
    )


def reduces_to_lumped(sys: AgeSystem):
    """The lumped system sharing growth, S_in, D*, b and p0."""
    from .lumped import LumpedSystem

    return LumpedSystem(sys.growth, sys.S_in, sys.D_star, sys.b, sys.p0)
