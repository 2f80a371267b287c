import math

import numpy as np
import pytest

from chemostab import lumped, sim
from chemostab.kinetics import DomainError
from chemostab.lumped import FeedbackConfig
from chemostab.sim import BoundaryHit, IntegrationError, IntegratorConfig, convergence_metrics, integrate


def test_linear_decay():
    cfg = IntegratorConfig(rel_tol=1e-10, abs_tol=1e-12)
    traj = integrate(lambda t, y: -y, (0.0, 1.0), [1.0], cfg)
    assert traj.final_state[0] == pytest.approx(math.exp(-1), rel=1e-9)
    assert traj.times[-1] == 1.0
    assert np.all(np.diff(traj.times) > 0)
    assert len(traj) == len(traj.states) == len(traj.derivs)


def test_zero_field_is_constant():
    traj = integrate(lambda t, y: np.zeros(2), (0.0, 10.0), [1.5, -2.0])
    assert np.all(traj.states == np.array([1.5, -2.0]))


def test_dense_output_accuracy():
    traj = integrate(lambda t, y: -y, (0.0, 3.0), [1.0], IntegratorConfig(1e-10, 1e-12))
    for t in np.linspace(0, 3, 37):
        assert traj.interpolate(t)[0] == pytest.approx(math.exp(-t), rel=1e-6)


def test_boundary_hit_reported():
    with pytest.raises(BoundaryHit):
        integrate(lambda t, y: -np.ones(1), (0.0, 2.0), [1.0], domain_guard=lambda y: y[0] > 0)


def test_domain_error_in_stage_counts_as_exit():
    def rhs(t, y):
        if y[0] <= 0:
            raise DomainError("left")
        return -np.ones(1)

    with pytest.raises(BoundaryHit):
        integrate(rhs, (0.0, 2.0), [1.0])


def test_non_finite_derivative():
    with pytest.raises(IntegrationError):
        integrate(lambda t, y: np.array([np.nan]), (0.0, 1.0), [1.0])


def test_initial_state_outside_guard():
    with pytest.raises(DomainError):
        integrate(lambda t, y: y, (0.0, 1.0), [-1.0], domain_guard=lambda y: y[0] > 0)


def test_config_validation():
    with pytest.raises(ValueError):
        IntegratorConfig(rel_tol=0.1)
    with pytest.raises(ValueError):
        IntegratorConfig(abs_tol=0.0)
    with pytest.raises(ValueError):
        IntegratorConfig(max_step=-1.0)
    with pytest.raises(ValueError):
        integrate(lambda t, y: y, (1.0, 0.0), [1.0])


def test_example_closed_loop_converges_at_two_tolerances(ex1, ex1_eq, fb):
    finals = []
    for rtol in (1e-8, 1e-10):
        traj = sim.simulate_closed_loop(ex1, ex1_eq, fb, [1.0, 1.0], 200.0, IntegratorConfig(rtol, rtol * 1e-2))
        finals.append(traj.final_state)
        assert traj.final_state == pytest.approx([3.0, 2.0], abs=1e-6)
    assert np.max(np.abs(finals[0] - finals[1])) < 1e-6


def test_self_convergence(ex1, ex1_eq, fb):
    loose = IntegratorConfig(1e-6, 1e-8)
    tight = IntegratorConfig(5e-7, 5e-9)
    a = sim.simulate_closed_loop(ex1, ex1_eq, fb, [10.0, 4.5], 20.0, loose).final_state
    b = sim.simulate_closed_loop(ex1, ex1_eq, fb, [10.0, 4.5], 20.0, tight).final_state
    assert np.max(np.abs(a - b)) < 10 * 1e-6 * np.max(np.abs(a))


def test_stationary_run_from_equilibrium(ex1, ex1_eq, fb):
    traj = sim.simulate_closed_loop(ex1, ex1_eq, fb, [3.0, 2.0], 50.0)
    assert np.allclose(traj.states, [3.0, 2.0], atol=1e-8)
    assert np.allclose(traj.inputs, 0.9, atol=1e-8)
    assert convergence_metrics(traj, [3.0, 2.0], 1e-6).settle_time == 0.0


def test_inputs_positive_and_lyapunov_nonincreasing(ex1, ex1_eq, fb):
    consts = lumped.lyapunov_constants(ex1, ex1_eq, fb)
    traj = sim.simulate_closed_loop(ex1, ex1_eq, fb, [1.0, 1.0], 60.0, lyapunov_consts=consts)
    assert np.all(traj.inputs > 0)
    assert np.all(np.diff(traj.lyapunov) <= 1e-8)
    assert traj.meta == {"kind": "closed", "delta": 10.0, "alpha": 0.5}


def test_age_closed_loop_converges(ex2, ex2_eq, fb2):
    rng = np.random.default_rng(2)
    for _ in range(3):
        init = [rng.uniform(0.1, 20), rng.uniform(0.1, 20), rng.uniform(0.05, 0.95) * ex2.S_in]
        traj = sim.simulate_closed_loop(ex2, ex2_eq, fb2, init, 300.0)
        assert traj.final_state == pytest.approx([3.0, 3.0, 2.0], abs=1e-6)
        assert np.all(traj.inputs > 0)


def test_age_lyapunov_column(ex2, ex2_eq, fb2):
    from chemostab import age

    consts = age.lyapunov_constants3(ex2, ex2_eq, fb2, 1.1)
    traj = sim.simulate_closed_loop(ex2, ex2_eq, fb2, [1.0, 5.0, 1.0], 40.0, lyapunov_consts=consts)
    assert np.all(np.diff(traj.lyapunov) <= 1e-8)


def test_unsupported_model():
    with pytest.raises(TypeError):
        sim.simulate_closed_loop(object(), None, FeedbackConfig(1.0), [1.0], 1.0)


def test_larger_gain_settles_substrate_faster(ex1, ex1_eq):
    times = {}
    for delta in (1.0, 100.0):
        traj = sim.simulate_closed_loop(ex1, ex1_eq, FeedbackConfig(delta, 0.5), [1.0, 1.0], 200.0)
        times[delta] = convergence_metrics(traj, [2.0], 1e-3, components=[1]).settle_time
    assert times[100.0] < times[1.0]


def test_settle_time_located_between_steps():
    traj = integrate(lambda t, y: -y, (0.0, 10.0), [1.0], IntegratorConfig(1e-10, 1e-12))
    m = convergence_metrics(traj, [0.0], 1e-2)
    assert m.converged
    assert m.settle_time == pytest.approx(math.log(100), rel=1e-6)


def test_diverging_trajectory_not_converged(divergent):
    sc = lumped.theorem2_scenario(divergent, S_bar=3.5)
    rhs = lumped.theorem2_field(divergent, sc.eq, lambda z: divergent.D_star)
    traj = integrate(rhs, (0.0, 20.0), sc.initial_state())
    m = convergence_metrics(traj, [0.0, 0.0], 1e-3)
    assert not m.converged and m.settle_time is None
