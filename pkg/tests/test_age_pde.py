import math

import numpy as np
import pytest

from chemostab import age, age_pde
from chemostab.age_pde import AgeGrid, CFLError, KernelError, PdeState
from chemostab.kinetics import DomainError
from chemostab.sim import IntegratorConfig, integrate


def const(value):
    return lambda a: np.full_like(np.asarray(a, dtype=float), value)


def saturating(b):
    return lambda a: b * (1 - np.exp(-np.asarray(a, dtype=float)))


@pytest.fixture(scope="module")
def a_max(ex2):
    return age_pde.truncation_age(ex2.b, ex2.D_star, ex2.p0, ex2.q0, ex2.gamma)


@pytest.fixture(scope="module")
def kernel(ex2, a_max):
    return age_pde.build_kernels(const(ex2.b), ex2.b, ex2.gamma, ex2.p0, ex2.q0, AgeGrid(a_max, 512))


def test_grid_geometry():
    g = AgeGrid(8.0, 16)
    assert g.da == 0.5
    assert g.ages[0] == 0.25 and g.ages[-1] == 7.75
    assert len(g.nodes) == 17
    assert g.refined().n_cells == 32
    with pytest.raises(ValueError):
        AgeGrid(1.0, 8)
    with pytest.raises(ValueError):
        AgeGrid(0.0, 32)


def test_truncation_age(ex2, a_max):
    w = lambda a: (ex2.p0 + ex2.gamma * ex2.q0 * a) * math.exp(-(ex2.b + ex2.D_star) * a)
    peak = max(w(a) for a in np.linspace(0, 5, 50001))
    assert w(a_max) == pytest.approx(1e-8 * peak, rel=1e-6)
    assert a_max == pytest.approx(20.2216, abs=1e-4)


def test_kernel_constant_mortality(ex2, kernel):
    a = kernel.grid.ages
    assert np.all(kernel.q == ex2.q0)
    assert np.allclose(kernel.k, ex2.p0 + ex2.gamma * ex2.q0 * a, rtol=1e-15, atol=0)
    assert kernel.M_bound == pytest.approx(ex2.gamma * kernel.grid.a_max)


def test_kernel_without_aging(ex2, a_max):
    k = age_pde.build_kernels(const(ex2.b), ex2.b, 0.0, ex2.p0, ex2.q0, AgeGrid(a_max, 64))
    assert np.all(k.k == ex2.p0)


def test_kernel_saturating_mortality_against_closed_form(ex2):
    b = ex2.b
    k = age_pde.build_kernels(saturating(b), b, ex2.gamma, ex2.p0, ex2.q0, AgeGrid(20.0, 4096))
    a = k.grid.ages
    # int_0^a beta = b (a - 1 + e^{-a})
    decay = np.exp(b * (a - 1 + np.exp(-a)) - b * a)
    for i in np.linspace(0, len(a) - 1, 5).astype(int):
        assert k.q[i] == pytest.approx(ex2.q0 * decay[i], rel=1e-7)
        assert k.k[i] == pytest.approx(decay[i] * (ex2.p0 + ex2.gamma * ex2.q0 * a[i]), rel=1e-7)
    assert k.lipschitz_q < 1 and k.lipschitz_k < 1


def test_kernel_rejects_excess_mortality(ex2):
    with pytest.raises(KernelError, match=r"beta\(a\) <= b fails at age"):
        age_pde.build_kernels(const(2 * ex2.b), ex2.b, ex2.gamma, ex2.p0, ex2.q0, AgeGrid(10.0, 32))


def test_kernel_mortality_check_respects_threshold_age(ex2):
    beta = lambda a: np.where(np.asarray(a) < 1.0, 2 * ex2.b, ex2.b)
    with pytest.raises(KernelError):
        age_pde.build_kernels(beta, ex2.b, 0.0, ex2.p0, ex2.q0, AgeGrid(10.0, 32))
    k = age_pde.build_kernels(beta, ex2.b, 0.0, ex2.p0, ex2.q0, AgeGrid(10.0, 32), a_bar=1.0)
    assert k.a_bar == 1.0


def test_kernel_rejects_small_growth_bound(ex2):
    with pytest.raises(KernelError, match="gamma\\*a <= M"):
        age_pde.build_kernels(const(ex2.b), ex2.b, ex2.gamma, ex2.p0, ex2.q0, AgeGrid(10.0, 32), M=1.0)


def test_state_validation():
    with pytest.raises(ValueError):
        PdeState(np.array([1.0, -1e-3]), 1.0)


def test_moments_of_empty_and_single_cell(kernel):
    z = PdeState(np.zeros(kernel.grid.n_cells), 1.0)
    assert age_pde.moments(z, kernel) == (0.0, 0.0)
    f = np.zeros(kernel.grid.n_cells)
    i = 37
    f[i] = 2.5 / kernel.grid.da
    X, Y = age_pde.moments(PdeState(f, 1.0), kernel)
    assert X == pytest.approx(2.5 * kernel.q[i], rel=1e-14)
    assert Y == pytest.approx(2.5 * kernel.k[i], rel=1e-14)


def test_zero_population_step(ex2, kernel):
    z = PdeState(np.zeros(kernel.grid.n_cells), 1.0)
    dt = 0.5 * kernel.grid.da
    out = age_pde.pde_step(z, kernel, ex2.growth, ex2.S_in, 0.9, dt)
    assert np.all(out.f == 0)
    assert out.S == pytest.approx(1.0 + dt * 0.9 * (ex2.S_in - 1.0), rel=1e-15)


def test_pure_transport_shifts_one_cell(haldane):
    k = age_pde.build_kernels(const(0.0), 0.0, 0.0, 1.0, 1.0, AgeGrid(10.0, 64))
    f = age_pde.cohort_profile(k.grid, 1.0, 3.0, 0.5)
    out = age_pde.pde_step(PdeState(f, 1.0), k, haldane, 16 / 3, 0.0, k.grid.da)
    assert np.allclose(out.f[1:], f[:-1], rtol=0, atol=1e-15)


def test_one_step_moments_follow_euler(ex2, kernel):
    f = age_pde.compatible_exponential(kernel, ex2.growth, 1.0, 1.0)
    state = PdeState(f, 1.0)
    dt, D = 0.5 * kernel.grid.da, 0.9
    X, Y = age_pde.moments(state, kernel)
    dX, dY, dS = age.rhs_open3(ex2, (X, Y, 1.0), D)
    X1, Y1 = age_pde.moments(age_pde.pde_step(state, kernel, ex2.growth, ex2.S_in, D, dt), kernel)
    # the feed moment loses only what leaves through the oldest cell
    assert X1 == pytest.approx(X + dt * dX - dt * ex2.q0 * f[-1], rel=1e-12)
    assert abs(Y1 - (Y + dt * dY)) <= dt * kernel.grid.da * abs(dY + Y)


def test_cfl_violations(ex2, kernel):
    s = PdeState(np.zeros(kernel.grid.n_cells), 1.0)
    with pytest.raises(CFLError):
        age_pde.pde_step(s, kernel, ex2.growth, ex2.S_in, 0.9, 1.5 * kernel.grid.da)
    with pytest.raises(CFLError, match="positivity"):
        age_pde.pde_step(s, kernel, ex2.growth, ex2.S_in, 0.9, kernel.grid.da)
    with pytest.raises(DomainError):
        age_pde.pde_step(s, kernel, ex2.growth, ex2.S_in, -0.1, 0.5 * kernel.grid.da)


def test_substrate_exit_is_an_error(ex2, kernel):
    f = age_pde.compatible_exponential(kernel, ex2.growth, 1e-3, 500.0)
    with pytest.raises(DomainError):
        age_pde.pde_step(PdeState(f, 1e-3), kernel, ex2.growth, ex2.S_in, 0.0, 0.5 * kernel.grid.da)


def test_compatible_profile_meets_renewal(ex2, kernel):
    f = age_pde.compatible_exponential(kernel, ex2.growth, 1.0, 2.0)
    s = PdeState(f, 1.0)
    assert age_pde.moments(s, kernel).X == pytest.approx(2.0, rel=1e-12)
    rate = -math.log(f[1] / f[0]) / kernel.grid.da
    amplitude = f[0] * math.exp(rate * kernel.grid.ages[0])
    assert age_pde.birth_density(s, kernel, ex2.growth) == pytest.approx(amplitude, rel=1e-9)


def test_steady_profile_stays_put(ex2, ex2_eq, fb2, kernel):
    f = age_pde.steady_profile(kernel, ex2, ex2_eq)
    run = age_pde.closed_loop_pde(PdeState(f, ex2_eq.S_star), kernel, ex2, ex2_eq, fb2, 20.0, 0.5 * kernel.grid.da)
    target = np.array([ex2_eq.X_star, ex2_eq.Y_star, ex2_eq.S_star])
    assert np.all(np.abs(run.trajectory.states - target) <= 0.01 * target)


def test_zero_mass_washes_out(ex2, ex2_eq, kernel):
    run = age_pde.open_loop_pde(PdeState(np.zeros(kernel.grid.n_cells), 1.0), kernel, ex2, 0.9, 30.0, 0.5 * kernel.grid.da)
    dt = run.trajectory.meta["dt"]
    n = len(run.trajectory.times) - 1
    assert run.final.S == pytest.approx(ex2.S_in - (ex2.S_in - 1.0) * (1 - dt * 0.9) ** n, rel=1e-12)
    assert run.final.S > 0.999 * ex2.S_in
    ode = integrate(age.open_loop_field3(ex2, 0.9), (0.0, 30.0), [1e-9, 1e-9, 1.0])
    assert ode.final_state[2] > 0.999 * ex2.S_in


def test_kernel_system_mismatch(ex2, ex2_eq, fb2, a_max):
    k = age_pde.build_kernels(const(ex2.b), ex2.b, 0.0, ex2.p0, ex2.q0, AgeGrid(a_max, 64))
    with pytest.raises(ValueError, match="gamma"):
        age_pde.closed_loop_pde(PdeState(np.ones(64), 1.0), k, ex2, ex2_eq, fb2, 1.0, 0.1)


def test_reduction_error_first_order_on_coarse_grids(ex2, ex2_eq, fb2, a_max):
    rows = age_pde.refinement_study(
        ex2, ex2_eq, fb2, const(ex2.b),
        lambda k: PdeState(age_pde.compatible_exponential(k, ex2.growth, 1.0, 1.0), 1.0),
        n_cells_list=(128, 256, 512), t_final=10.0, a_max=a_max,
    )
    assert rows[0].ratio is None
    for row in rows[1:]:
        assert 1.6 <= row.ratio <= 2.4
    assert rows[-1].max_rel_error < rows[0].max_rel_error


def test_open_loop_reduction(ex2, ex2_eq, kernel):
    init = PdeState(age_pde.compatible_exponential(kernel, ex2.growth, 1.0, 1.0), 1.0)
    cmp = age_pde.compare_with_ode(init, kernel, ex2, ex2_eq, None, 10.0, 0.5 * kernel.grid.da)
    assert cmp.max_rel_error < 0.02
    assert cmp.pde.meta["kind"] == "open"
    assert cmp.pde.boundary_ratio < 1e-6


def test_density_stays_nonnegative(ex2, ex2_eq, fb2, kernel):
    init = PdeState(age_pde.cohort_profile(kernel.grid, 2.0, 1.5, 0.3), 3.0)
    state = init
    for _ in range(200):
        X, Y = age_pde.moments(state, kernel)
        D = age.feedback_D3(ex2, ex2_eq, fb2, (X, Y, state.S))
        state = age_pde.pde_step(state, kernel, ex2.growth, ex2.S_in, D, 0.5 * kernel.grid.da)
        assert np.all(state.f >= 0)
