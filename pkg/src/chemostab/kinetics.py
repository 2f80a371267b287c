"""Specific growth rate models mu(S) and the one-dimensional queries on them.

Every model is bounded, C^1 on [0, inf), with mu(0) = 0 and mu(S) > 0 for
S > 0. Values accept floats or numpy arrays; negative concentrations raise
:class:`DomainError`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from ._numerics import GRID_POINTS, bisect, grid_max


class DomainError(ValueError):
    """A state or argument lies outside the model's domain."""


def _check_nonneg(S):
    if isinstance(S, float | int):
        if S < 0:
            raise DomainError(f"concentration must be >= 0, got {S}")
    elif np.any(np.asarray(S) < 0):
        raise DomainError("concentration must be >= 0")


class GrowthRateModel:
    """Base class: subclasses provide ``_value`` and ``_derivative``."""

    def value(self, S):
        _check_nonneg(S)
        return self._value(S)

    def derivative(self, S):
        _check_nonneg(S)
        return self._derivative(S)

    def sup_on(self, S_in: float) -> float:
        return grid_max(self._value, 0.0, S_in)[1]


@dataclass(frozen=True)
class Haldane(GrowthRateModel):
    """Substrate-inhibited kinetics ``M S / (K + S + a S^2)``."""

    M: float
    K: float
    a: float

    def __post_init__(self):
        if not (self.M > 0 and self.K > 0 and self.a > 0):
            raise ValueError("Haldane parameters M, K, a must be positive")

    def _value(self, S):
        return self.M * S / (self.K + S + self.a * S * S)

    def _derivative(self, S):
        den = self.K + S + self.a * S * S
        return self.M * (self.K - self.a * S * S) / (den * den)

    @property
    def peak(self) -> float:
        return math.sqrt(self.K / self.a)

    def sup_on(self, S_in):
        if self.peak <= S_in:
            return self.M / (1.0 + 2.0 * math.sqrt(self.K * self.a))
        return float(self._value(S_in))


@dataclass(frozen=True)
class Monod(GrowthRateModel):
    """Saturating kinetics ``mu_max S / (K + S)``."""

    mu_max: float
    K: float

    def __post_init__(self):
        if not (self.mu_max > 0 and self.K > 0):
            raise ValueError("Monod parameters mu_max, K must be positive")

    def _value(self, S):
        return self.mu_max * S / (self.K + S)

    def _derivative(self, S):
        den = self.K + S
        return self.mu_max * self.K / (den * den)

    def sup_on(self, S_in):
        return float(self._value(S_in))


@dataclass(frozen=True)
class Custom(GrowthRateModel):
    """User-supplied kinetics with declared bounds.

    The declarations are checked against a dense sample of ``[0, domain_max]``
    at construction; inconsistent declarations raise ``ValueError``.
    """

    value_fn: Callable
    derivative_fn: Callable
    declared_sup: float
    declared_lipschitz: float
    domain_max: float = 100.0

    def __post_init__(self):
        xs = np.linspace(0.0, self.domain_max, 10 * GRID_POINTS + 1)
        vals = np.array([self.value_fn(float(s)) for s in xs])
        ders = np.array([self.derivative_fn(float(s)) for s in xs])
        if abs(vals[0]) > 0.0:
            raise ValueError("custom growth model must satisfy mu(0) = 0")
        if np.any(vals[1:] <= 0):
            raise ValueError("custom growth model must be positive for S > 0")
        if vals.max() > self.declared_sup * (1 + 1e-9):
            raise ValueError(
                f"declared sup {self.declared_sup} below sampled max {vals.max()}"
            )
        if np.abs(ders).max() > self.declared_lipschitz * (1 + 1e-9):
            raise ValueError(
                f"declared Lipschitz bound {self.declared_lipschitz} below "
                f"sampled max |mu'| {np.abs(ders).max()}"
            )

    def _value(self, S):
        if isinstance(S, np.ndarray):
            return np.array([self.value_fn(float(s)) for s in S.ravel()]).reshape(S.shape)
        return self.value_fn(S)

    def _derivative(self, S):
        if isinstance(S, np.ndarray):
            return np.array([self.derivative_fn(float(s)) for s in S.ravel()]).reshape(S.shape)
        return self.derivative_fn(S)

    def sup_on(self, S_in):
        return min(self.declared_sup, super().sup_on(S_in))


class SupLipschitz(NamedTuple):
    sup_mu: float
    L: float


def mu(model: GrowthRateModel, S):
    return model.value(S)


def mu_prime(model: GrowthRateModel, S):
    return model.derivative(S)


def mu_sup_and_lipschitz(model: GrowthRateModel, S_in: float) -> SupLipschitz:
    """Supremum of mu and of |mu'| over [0, S_in]."""
    if S_in <= 0:
        raise DomainError("S_in must be positive")
    sup_mu = model.sup_on(S_in)
    L = grid_max(lambda s: np.abs(model._derivative(s)), 0.0, S_in)[1]
    if isinstance(model, Custom):
        L = min(L, model.declared_lipschitz)
    return SupLipschitz(float(sup_mu), float(L))


def invert_mu(model: GrowthRateModel, target: float, S_in: float) -> list[float]:
    """All S in (0, S_in) with mu(S) = target, ascending.

    Roots are bracketed by sign changes on a uniform grid and refined by
    bisection to 1e-12; tangential (even-multiplicity) roots are not reported.
    """
    if target <= 0:
        raise ValueError("target rate must be positive")
    xs = np.linspace(0.0, S_in, GRID_POINTS + 1)
    h = np.asarray(model._value(xs), dtype=float) - target
    roots = []
    for i in range(GRID_POINTS):
        if h[i] == 0.0:
            roots.append(float(xs[i]))
        elif h[i] * h[i + 1] < 0:
            lo, hi = float(xs[i]), float(xs[i + 1])
            roots.append(bisect(lambda s: model._value(s) - target, lo, hi))
    return sorted(r for r in roots if 0.0 < r < S_in)


def derivative_error(model: GrowthRateModel, S_max: float, n: int = 1000, h: float = 1e-6) -> float:
    """Worst mismatch between the analytic derivative and central differences.

    Relative error where |mu'| > 1e-3, absolute otherwise.
    """
    xs = np.linspace(h, S_max, n)
    fd = (model._value(xs + h) - model._value(xs - h)) / (2 * h)
    an = model._derivative(xs)
    scale = np.maximum(np.abs(an), 1e-3)
    return float(np.max(np.abs(fd - an) / scale))


def from_spec(spec: dict) -> GrowthRateModel:
    """Build a model from a config mapping such as ``{"type": "haldane", ...}``."""
    kind = spec.get("type")
    params = {k: v for k, v in spec.items() if k != "type"}
    if kind == "haldane":
        return Haldane(**params)
    if kind == "monod":
        return Monod(**params)
    raise ValueError(f"unknown growth model type {kind!r}")


def to_spec(model: GrowthRateModel) -> dict:
    if isinstance(model, Haldane):
        return {"type": "haldane", "M": model.M, "K": model.K, "a": model.a}
    if isinstance(model, Monod):
        return {"type": "monod", "mu_max": model.mu_max, "K": model.K}
    raise ValueError("custom growth models have no config representation")
