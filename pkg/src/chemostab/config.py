"""Scenario files: strict pydantic models and their conversion to model objects.

Numbers may be given as JSON numbers or as exact fractions in a string
(``"16/3"``), which keeps canned parameter lists free of rounding.
"""

from __future__ import annotations

from fractions import Fraction
from pathlib import Path
from typing import Annotated, Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, BeforeValidator, ConfigDict, Field, model_validator

from . import age, age_pde, kinetics, lumped


class ConfigError(ValueError):
    """A scenario is well-formed but unusable for the requested command."""


def _rational(value):
    if isinstance(value, str):
        try:
            return float(Fraction(value.replace(" ", "")))
        except (ValueError, ZeroDivisionError) as exc:
            raise ValueError(f"not a number or fraction: {value!r}") from exc
    return value


Num = Annotated[float, BeforeValidator(_rational)]


class _Strict(BaseModel):
    model_config = ConfigDict(strict=True, extra="forbid", frozen=True)


class HaldaneSpec(_Strict):
    type: Literal["haldane"]
    M: Annotated[Num, Field(gt=0)]
    K: Annotated[Num, Field(gt=0)]
    a: Annotated[Num, Field(gt=0)]


class MonodSpec(_Strict):
    type: Literal["monod"]
    mu_max: Annotated[Num, Field(gt=0)]
    K: Annotated[Num, Field(gt=0)]


GrowthSpec = Annotated[Union[HaldaneSpec, MonodSpec], Field(discriminator="type")]


class ConstantBeta(_Strict):
    """Age-independent mortality; ``value`` defaults to the system's b."""

    type: Literal["constant"]
    value: Optional[Annotated[Num, Field(ge=0)]] = None


class SaturatingBeta(_Strict):
    """``beta(a) = b (1 - exp(-rate a))``."""

    type: Literal["saturating"]
    rate: Annotated[Num, Field(gt=0)]


BetaSpec = Annotated[Union[ConstantBeta, SaturatingBeta], Field(discriminator="type")]


class GridSpec(_Strict):
    n_cells: Annotated[int, Field(ge=16)] = 4096
    a_max: Optional[Annotated[Num, Field(gt=0)]] = None


class Parameters(_Strict):
    S_in: Annotated[Num, Field(gt=0)]
    D_star: Annotated[Num, Field(gt=0)]
    b: Annotated[Num, Field(ge=0)]
    p0: Annotated[Num, Field(gt=0)] = 1.0
    q0: Optional[Annotated[Num, Field(gt=0)]] = None
    gamma: Optional[Annotated[Num, Field(ge=0)]] = None
    beta: Optional[BetaSpec] = None
    grid: Optional[GridSpec] = None


class FeedbackSpec(_Strict):
    delta: Annotated[Num, Field(gt=0)]
    alpha: Annotated[Num, Field(ge=0, lt=1)] = 0.0
    phi: Optional[Annotated[Num, Field(gt=1)]] = None


class InitialGrid(_Strict):
    n_X: Annotated[int, Field(ge=1)] = 20
    n_S: Annotated[int, Field(ge=1)] = 20
    X_range: tuple[Annotated[Num, Field(gt=0)], Annotated[Num, Field(gt=0)]] = (0.01, 50.0)
    S_fraction: tuple[Annotated[Num, Field(gt=0, lt=1)], Annotated[Num, Field(gt=0, lt=1)]] = (0.01, 0.99)


class RandomInitial(_Strict):
    n: Annotated[int, Field(ge=1)]
    X_range: tuple[Annotated[Num, Field(gt=0)], Annotated[Num, Field(gt=0)]] = (0.01, 50.0)
    S_fraction: tuple[Annotated[Num, Field(gt=0, lt=1)], Annotated[Num, Field(gt=0, lt=1)]] = (0.01, 0.99)


class RunSpec(_Strict):
    t_final: Annotated[Num, Field(gt=0)]
    mode: Literal["open", "closed"] = "closed"
    D: Optional[Annotated[Num, Field(ge=0)]] = None
    rel_tol: Annotated[Num, Field(gt=0, le=1e-2)] = 1e-9
    abs_tol: Annotated[Num, Field(gt=0, le=1e-2)] = 1e-11
    initial_conditions: Optional[list[list[Num]]] = None
    grid: Optional[InitialGrid] = None
    random: Optional[RandomInitial] = None
    deltas: Optional[list[Annotated[Num, Field(gt=0)]]] = None
    settle_tol: Annotated[Num, Field(gt=0)] = 1e-3
    basin_tol: Annotated[Num, Field(gt=0)] = 1e-6


class CompatibleProfile(_Strict):
    type: Literal["compatible_exponential"]
    S0: Annotated[Num, Field(gt=0)]
    X0: Annotated[Num, Field(gt=0)]


class ExponentialProfile(_Strict):
    type: Literal["exponential"]
    S0: Annotated[Num, Field(gt=0)]
    amplitude: Annotated[Num, Field(ge=0)]
    rate: Annotated[Num, Field(gt=0)]


class CohortProfile(_Strict):
    type: Literal["cohort"]
    S0: Annotated[Num, Field(gt=0)]
    mass: Annotated[Num, Field(ge=0)]
    center: Annotated[Num, Field(ge=0)]
    width: Annotated[Num, Field(gt=0)]


class SteadyProfile(_Strict):
    type: Literal["steady"]


ProfileSpec = Annotated[
    Union[CompatibleProfile, ExponentialProfile, CohortProfile, SteadyProfile],
    Field(discriminator="type"),
]


class PdeSpec(_Strict):
    t_final: Annotated[Num, Field(gt=0)] = 50.0
    courant: Annotated[Num, Field(gt=0, le=1)] = 0.5
    refinements: list[Annotated[int, Field(ge=16)]] = [1024, 2048, 4096]
    initial_profile: ProfileSpec = CompatibleProfile(type="compatible_exponential", S0=1.0, X0=1.0)


class ReferencePoly(_Strict):
    """A published characteristic polynomial to compare against, keyed by S*."""

    S_star: Num
    coeffs: list[Num]


class Theorem2Spec(_Strict):
    S_bar: Optional[Annotated[Num, Field(gt=0)]] = None
    t_final: Annotated[Num, Field(gt=0)] = 50.0
    decay_horizon: Annotated[Num, Field(gt=0)] = 100.0


class OutputSpec(_Strict):
    prefix: str = ""


class ScenarioConfig(_Strict):
    model: Literal["lumped", "age", "age_pde"]
    growth: GrowthSpec
    parameters: Parameters
    feedback: Optional[FeedbackSpec] = None
    target_S_star: Optional[Num] = None
    run: Optional[RunSpec] = None
    pde: Optional[PdeSpec] = None
    reference_char_polys: list[ReferencePoly] = []
    theorem2: Optional[Theorem2Spec] = None
    outputs: OutputSpec = OutputSpec()

    @model_validator(mode="after")
    def _age_fields(self):
        p = self.parameters
        if self.model in ("age", "age_pde"):
            missing = [n for n in ("q0", "gamma") if getattr(p, n) is None]
            if missing:
                raise ValueError(f"parameters.{missing[0]} is required for model {self.model!r}")
        if self.model == "age_pde" and p.beta is None:
            raise ValueError("parameters.beta is required for model 'age_pde'")
        return self


def load_config(path) -> ScenarioConfig:
    return ScenarioConfig.model_validate_json(Path(path).read_text())


def scenario_path(name: str) -> Path:
    return Path(__file__).parent / "scenarios" / f"{name}.json"


# --- conversion -------------------------------------------------------------


def growth_model(cfg: ScenarioConfig) -> kinetics.GrowthRateModel:
    return kinetics.from_spec(cfg.growth.model_dump())


def build_system(cfg: ScenarioConfig):
    p, growth = cfg.parameters, growth_model(cfg)
    if cfg.model == "lumped":
        return lumped.LumpedSystem(growth, p.S_in, p.D_star, p.b, p.p0)
    return age.AgeSystem(growth, p.S_in, p.D_star, p.b, p.p0, p.q0, p.gamma)


def feedback_config(cfg: ScenarioConfig, delta: Optional[float] = None) -> lumped.FeedbackConfig:
    if cfg.feedback is None:
        raise ConfigError("scenario has no feedback section")
    return lumped.FeedbackConfig(cfg.feedback.delta if delta is None else delta, cfg.feedback.alpha)


def target_equilibrium(cfg: ScenarioConfig, sys):
    """Equilibrium named by ``target_S_star``, else the one with the largest S*."""
    eqs = age.equilibria3(sys) if isinstance(sys, age.AgeSystem) else lumped.equilibria(sys)
    if not eqs:
        return None
    if cfg.target_S_star is None:
        return eqs[-1]
    best = min(eqs, key=lambda e: abs(e.S_star - cfg.target_S_star))
    if abs(best.S_star - cfg.target_S_star) > 1e-6 * max(1.0, abs(cfg.target_S_star)):
        raise ConfigError(f"no equilibrium with S* = {cfg.target_S_star}")
    return best


def reference_for(cfg: ScenarioConfig, S_star: float):
    for ref in cfg.reference_char_polys:
        if abs(ref.S_star - S_star) <= 1e-6 * max(1.0, abs(S_star)):
            return tuple(ref.coeffs)
    return None


def beta_function(cfg: ScenarioConfig):
    p = cfg.parameters
    spec = p.beta or ConstantBeta(type="constant")
    if isinstance(spec, ConstantBeta):
        value = p.b if spec.value is None else spec.value
        return lambda a: np.full_like(np.asarray(a, dtype=float), value)
    b, rate = p.b, spec.rate
    return lambda a: b * (1.0 - np.exp(-rate * np.asarray(a, dtype=float)))


def age_grid(cfg: ScenarioConfig, n_cells: Optional[int] = None) -> age_pde.AgeGrid:
    p = cfg.parameters
    grid = p.grid or GridSpec()
    a_max = grid.a_max
    if a_max is None:
        a_max = age_pde.truncation_age(p.b, p.D_star, p.p0, p.q0, p.gamma)
    return age_pde.AgeGrid(a_max, n_cells or grid.n_cells)


def build_kernel(cfg: ScenarioConfig, n_cells: Optional[int] = None) -> age_pde.MortalityKernel:
    p = cfg.parameters
    return age_pde.build_kernels(beta_function(cfg), p.b, p.gamma, p.p0, p.q0, age_grid(cfg, n_cells))


def initial_profile(cfg: ScenarioConfig, kernel, sys, eq) -> age_pde.PdeState:
    spec = (cfg.pde or PdeSpec()).initial_profile
    grid = kernel.grid
    if isinstance(spec, CompatibleProfile):
        return age_pde.PdeState(age_pde.compatible_exponential(kernel, sys.growth, spec.S0, spec.X0), spec.S0)
    if isinstance(spec, ExponentialProfile):
        return age_pde.PdeState(age_pde.exponential_profile(grid, spec.amplitude, spec.rate), spec.S0)
    if isinstance(spec, CohortProfile):
        return age_pde.PdeState(age_pde.cohort_profile(grid, spec.mass, spec.center, spec.width), spec.S0)
    return age_pde.PdeState(age_pde.steady_profile(kernel, sys, eq), eq.S_star)
