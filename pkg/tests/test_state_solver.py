import numpy as np
import pytest

from convch.analysis import generalized_mean
from convch.grid import FieldPair, Velocity, build_channel_grid, velocity_from_stream
from convch.potentials import eval_potential, make_spec
from convch.state_solver import (ConvergenceError, SolverParams, State, initial_state, simulate, step,
                                 validate_data, weak_residual)


@pytest.fixture
def g():
    return build_channel_grid(2 * np.pi, 1.0, 16, 9)


def smooth_rho0(g, mean=0.1, amp=0.3):
    X, Y = g.mesh
    return FieldPair.from_bulk(mean + amp * (np.cos(X) * np.cos(np.pi * Y) + 0.5 * np.sin(2 * X) * Y**2))


def cell_flow(g, a=1.0):
    X, Y = g.mesh
    return velocity_from_stream(a * np.sin(np.pi * Y) ** 2 * np.cos(X), g)


def test_params_validation(g):
    with pytest.raises(ValueError):
        SolverParams(tauO=-1.0)
    with pytest.raises(ValueError):
        SolverParams(dt=0.0)
    assert SolverParams().step_size(g) == pytest.approx(1e-3 * 2 * np.pi / (16 * 9))


@pytest.mark.parametrize("family", ["regular", "logarithmic", "obstacle"])
def test_constant_state_is_stationary(g, family):
    spec = make_spec(family, eps=1e-2)
    m = 0.4
    s = initial_state(FieldPair.constant(m, g), spec, g)
    s1 = step(s, None, SolverParams(dt=0.1), spec, g)
    np.testing.assert_allclose(s1.rho.flat(), m, atol=1e-13)
    np.testing.assert_allclose(s1.mu.flat(), eval_potential(spec, "bulk", m, 1), rtol=1e-10)


def test_mass_conserved_each_step(g):
    spec = make_spec("regular")
    traj = simulate(smooth_rho0(g), cell_flow(g, 2.0), SolverParams(dt=0.01, tauO=0.1), spec, g, 0.5)
    drift = np.abs(traj.diagnostics["mass"] - traj.m0)
    assert np.max(drift) <= 1e-12 * (1 + abs(traj.m0))


def test_energy_nonincreasing_without_flow(g):
    spec = make_spec("regular")
    traj = simulate(smooth_rho0(g, amp=0.5), None, SolverParams(dt=0.01), spec, g, 2.0)
    e = traj.diagnostics["energy"]
    assert len(e) == 201
    assert np.all(np.diff(e) <= 1e-12 * abs(e[0]))
    assert e[-1] < e[0]


def test_weak_residual_of_computed_step(g):
    spec = make_spec("logarithmic", eps=1e-3)
    p = SolverParams(dt=0.01, tauO=0.05, tauG=0.2)
    u = cell_flow(g)
    s0 = initial_state(smooth_rho0(g), spec, g)
    s1 = step(s0, u, p, spec, g)
    r1, r2 = weak_residual(s0, s1, u, p, spec, g)
    assert r1 <= 10 * p.newton_tol and r2 <= 10 * p.newton_tol


def test_mu_shift_changes_r2_by_total_measure(g):
    spec = make_spec("regular")
    p = SolverParams(dt=0.01)
    s0 = initial_state(smooth_rho0(g), spec, g)
    s1 = step(s0, None, p, spec, g)
    bumped = State(s1.rho, s1.mu + 1.0, s1.t)
    _, r2 = weak_residual(s0, bumped, None, p, spec, g)
    assert r2 == pytest.approx(g.area + g.perimeter, rel=1e-8)


def test_zero_fields_have_zero_residual(g):
    spec = make_spec("regular")
    z = FieldPair.constant(0.0, g)
    r = weak_residual(State(z, z, 0.0), State(z, z, 0.01), Velocity.zero(g), SolverParams(dt=0.01), spec, g)
    assert r == (0.0, 0.0)


def test_zero_final_time(g):
    rho0 = smooth_rho0(g)
    traj = simulate(rho0, None, SolverParams(dt=0.01), make_spec(), g, 0.0)
    assert len(traj) == 1
    np.testing.assert_array_equal(traj.rho[0], rho0.flat())


def test_constant_datum_stays_constant(g):
    traj = simulate(FieldPair.constant(-0.3, g), cell_flow(g), SolverParams(dt=0.05), make_spec(), g, 1.0)
    np.testing.assert_allclose(traj.rho, -0.3, atol=1e-13)


def test_store_every_keeps_final_state(g):
    p = SolverParams(dt=0.01)
    full = simulate(smooth_rho0(g), None, p, make_spec(), g, 0.25)
    thin = simulate(smooth_rho0(g), None, p, make_spec(), g, 0.25, store_every=10)
    np.testing.assert_allclose(thin.times, [0.0, 0.1, 0.2, 0.25])
    np.testing.assert_allclose(thin.rho[-1], full.rho[-1], atol=1e-14)


def test_validate_constant_datum(g):
    rep = validate_data(FieldPair.constant(0.2, g), cell_flow(g), make_spec("regular"), g)
    assert rep.passed
    np.testing.assert_allclose(rep.eps_norms, rep.eps_norms[0], rtol=1e-12)


def test_validate_flags_log_datum_touching_pure_phase(g):
    X, Y = g.mesh
    rho0 = FieldPair.from_bulk(np.clip(1.5 * np.cos(X) * np.cos(np.pi * Y), -1, 1))
    rep = validate_data(rho0, None, make_spec("logarithmic", eps=1e-2), g)
    assert rep.checks["mean_interior"]
    assert not rep.checks["eps_bounded"] and not rep.passed


def test_validate_flags_bad_controls(g):
    rho0 = FieldPair.constant(0.0, g)
    spec = make_spec()
    X, Y = g.mesh
    comp = Velocity(np.cos(X) * (1 + Y), 0 * X)
    assert not validate_data(rho0, comp, spec, g).checks["divergence_free"]
    leaky = Velocity(0 * X, np.ones(g.shape))
    assert not validate_data(rho0, leaky, spec, g).checks["wall_tangent"]
    assert not validate_data(FieldPair(rho0.bulk, rho0.bdry + 0.1), None, spec, g).checks["trace"]
    with pytest.raises(ValueError):
        simulate(rho0, comp, SolverParams(dt=0.1), spec, g, 0.2)


def test_schedule_length_and_shape_errors(g):
    rho0 = FieldPair.constant(0.0, g)
    with pytest.raises(ValueError):
        simulate(rho0, [Velocity.zero(g)], SolverParams(dt=0.1), make_spec(), g, 0.3)
    with pytest.raises(ValueError):
        simulate(rho0, np.zeros((3, 2, 4, 4)), SolverParams(dt=0.1), make_spec(), g, 0.3, validate=False)


def test_newton_failure_reports_step(g):
    p = SolverParams(dt=0.01, newton_max=1, newton_tol=1e-16)
    with pytest.raises(ConvergenceError) as err:
        simulate(smooth_rho0(g, amp=0.5), None, p, make_spec("logarithmic", eps=1e-4), g, 0.05)
    assert err.value.step_index == 0


def test_log_family_stays_inside_unit_interval(g):
    spec = make_spec("logarithmic", eps=1e-4)
    traj = simulate(smooth_rho0(g, amp=0.6), cell_flow(g, 2.0), SolverParams(dt=0.01), spec, g, 1.0)
    assert np.max(np.abs(traj.rho)) < 1.0


def test_uniform_in_tau_bound(g):
    spec = make_spec()
    u = cell_flow(g)
    maxima = []
    for tau in (0.2, 0.1, 0.05, 0.025, 0.0):
        traj = simulate(smooth_rho0(g), u, SolverParams(dt=0.01, tauO=tau, tauG=tau), spec, g, 0.5)
        grad2 = np.einsum("ij,ij->i", traj.rho, (g.stiffness @ traj.rho.T).T)
        maxima.append(np.sqrt(np.max(grad2 + traj.rho**2 @ g.mass)))
    assert max(maxima) < 2 * min(maxima)


def test_trajectory_mean_matches_m0(g):
    traj = simulate(smooth_rho0(g), cell_flow(g), SolverParams(dt=0.02), make_spec(), g, 0.2)
    for k in range(len(traj)):
        assert generalized_mean(traj.state(k).rho, g) == pytest.approx(traj.m0, abs=1e-13)
