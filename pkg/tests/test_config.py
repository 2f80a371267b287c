import json

import numpy as np
import pytest
from pydantic import ValidationError

from chemostab import age, config, lumped
from chemostab.config import ConfigError, ScenarioConfig

BASE = {
    "model": "lumped",
    "growth": {"type": "haldane", "M": "7/2", "K": 1, "a": 1},
    "parameters": {"S_in": "16/3", "D_star": 0.9, "b": 0.1},
}


def parse(**over):
    doc = json.loads(json.dumps(BASE))
    for k, v in over.items():
        doc[k] = v
    return ScenarioConfig.model_validate_json(json.dumps(doc))


def test_fractions_are_exact():
    cfg = parse()
    assert cfg.parameters.S_in == 16 / 3
    assert cfg.growth.M == 3.5


def test_unknown_keys_rejected():
    with pytest.raises(ValidationError, match="extra"):
        parse(colour="blue")
    with pytest.raises(ValidationError):
        parse(parameters={"S_in": 1, "D_star": 1, "b": 0, "flux": 2})


def test_positivity_messages_name_the_field():
    with pytest.raises(ValidationError) as info:
        parse(parameters={"S_in": -1, "D_star": 0.9, "b": 0.1})
    assert "S_in" in str(info.value)


def test_bad_fraction_string():
    with pytest.raises(ValidationError):
        parse(parameters={"S_in": "16/0", "D_star": 0.9, "b": 0.1})


def test_strict_types():
    with pytest.raises(ValidationError):
        parse(run={"t_final": 10, "grid": {"n_X": "4"}})


def test_age_models_need_extra_parameters():
    with pytest.raises(ValidationError, match="q0"):
        parse(model="age")
    with pytest.raises(ValidationError, match="beta"):
        parse(model="age_pde", parameters={"S_in": 5, "D_star": 0.9, "b": 0.1, "q0": 1, "gamma": 0.2})


def test_shipped_scenarios_build(scenario):
    e1 = scenario("example1")
    sys1 = config.build_system(e1)
    assert isinstance(sys1, lumped.LumpedSystem)
    assert config.target_equilibrium(e1, sys1).S_star == pytest.approx(2.0)
    e2 = scenario("example2")
    sys2 = config.build_system(e2)
    assert isinstance(sys2, age.AgeSystem)
    assert config.reference_for(e2, 0.5) == (1, 6.6, 10.98, 4.5)
    assert config.reference_for(e2, 1.0) is None
    t2 = scenario("theorem2")
    assert [e.S_star for e in lumped.equilibria(config.build_system(t2))] == pytest.approx([0.5, 2.0])


def test_target_defaults_to_largest_root(scenario):
    cfg = parse()
    assert config.target_equilibrium(cfg, config.build_system(cfg)).S_star == pytest.approx(2.0)


def test_missing_target_is_config_error():
    cfg = parse(target_S_star=1.0)
    with pytest.raises(ConfigError):
        config.target_equilibrium(cfg, config.build_system(cfg))


def test_feedback_override():
    cfg = parse(feedback={"delta": 10, "alpha": 0.5})
    assert config.feedback_config(cfg, 100.0).delta == 100.0
    with pytest.raises(ConfigError):
        config.feedback_config(parse())


def test_beta_specs():
    p = {"S_in": 5, "D_star": 0.9, "b": 0.1, "q0": 1, "gamma": 0.2}
    cfg = parse(model="age_pde", parameters={**p, "beta": {"type": "saturating", "rate": 2}})
    beta = config.beta_function(cfg)
    assert beta(np.array([0.0]))[0] == 0.0
    assert beta(np.array([50.0]))[0] == pytest.approx(0.1)
    cfg = parse(model="age_pde", parameters={**p, "beta": {"type": "constant"}, "grid": {"n_cells": 32, "a_max": 10}})
    assert np.all(config.beta_function(cfg)(np.linspace(0, 3, 4)) == 0.1)
    k = config.build_kernel(cfg)
    assert k.grid.n_cells == 32 and k.grid.a_max == 10


def test_initial_profiles(scenario):
    cfg = scenario("example2")
    sys = config.build_system(cfg)
    eq = config.target_equilibrium(cfg, sys)
    kernel = config.build_kernel(cfg, 64)
    st = config.initial_profile(cfg, kernel, sys, eq)
    assert st.S == 1.0
    for spec in (
        {"type": "exponential", "S0": 1.5, "amplitude": 2, "rate": 1},
        {"type": "cohort", "S0": 1.5, "mass": 2, "center": 1, "width": 0.3},
        {"type": "steady"},
    ):
        c = cfg.model_copy(update={"pde": config.PdeSpec.model_validate({"initial_profile": spec})})
        st = config.initial_profile(c, kernel, sys, eq)
        assert np.all(st.f >= 0)
