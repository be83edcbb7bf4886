import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from convch.grid import (FieldPair, Velocity, advect, advect_conservative, build_channel_grid,
                         convection_matrix, divergence, gradient, laplace_beltrami, laplacian_bulk,
                         leray_project, normal_derivative, velocity_from_stream)


@pytest.fixture
def g():
    return build_channel_grid(2 * np.pi, 1.0, 16, 9)


def test_rejects_bad_dimensions():
    with pytest.raises(ValueError):
        build_channel_grid(0.0, 1.0, 8, 5)
    with pytest.raises(ValueError):
        build_channel_grid(1.0, 1.0, 3, 5)


def test_quadrature_weights_sum_to_measures():
    g = build_channel_grid(2.0, 1.0, 8, 5)
    assert np.isclose(g.bulk_weights.sum(), 2.0)
    assert np.isclose(g.bdry_weights.sum(), 4.0)
    assert np.isclose(g.mass.sum(), 6.0)


def test_bulk_quadrature_exact_for_linear_in_y(g):
    _, Y = g.mesh
    assert np.isclose(np.sum(g.bulk_weights * (1 + Y)), g.Lx * 1.5)


def test_stiffness_symmetric_with_constant_kernel(g):
    k = g.stiffness
    assert abs(k - k.T).max() < 1e-14
    assert np.max(np.abs(k @ np.ones(g.n))) < 1e-12
    v = np.random.default_rng(0).standard_normal(g.n)
    assert v @ (k @ v) > 0


def test_stiffness_fourier_eigenvalue(g):
    # x-modes are exact eigenvectors of the periodic second difference
    X, _ = g.mesh
    for kx in (1, 3):
        f = np.cos(kx * X).ravel()
        lam = (2 - 2 * np.cos(kx * g.hx)) / g.hx**2
        kf = (g.stiffness @ f).reshape(g.shape)
        np.testing.assert_allclose(kf[1:-1], (lam * g.bulk_weights * np.cos(kx * X))[1:-1], atol=1e-12)
        # walls carry the extra surface Laplace-Beltrami term
        np.testing.assert_allclose(kf[0], (lam * (g.bulk_weights[0] + g.hx) * np.cos(kx * X))[0], atol=1e-12)


def test_stiffness_matches_negative_laplacian_inside(g):
    X, Y = g.mesh
    f = np.sin(X) * np.cos(2 * Y) + Y**3
    kf = (g.stiffness @ f.ravel()).reshape(g.shape)
    lap = laplacian_bulk(f, g)
    np.testing.assert_allclose(kf[1:-1], -(g.bulk_weights * lap)[1:-1], atol=1e-12)


def test_normal_derivative_exact_on_quadratics(g):
    _, Y = g.mesh
    f = 2 * Y**2 - Y
    dn = normal_derivative(f, g)
    np.testing.assert_allclose(dn[0], 1.0, atol=1e-12)   # -(4y - 1) at y=0
    np.testing.assert_allclose(dn[1], 3.0, atol=1e-12)   # 4y - 1 at y=1


def test_laplacian_with_given_normal_derivative(g):
    X, Y = g.mesh
    f = Y**2
    lap = laplacian_bulk(f, g, dnu=np.stack([np.zeros(g.nx), 2 * np.ones(g.nx)]))
    np.testing.assert_allclose(lap, 2.0, atol=1e-10)


def test_laplace_beltrami_fourier(g):
    x = g.x
    f = np.stack([np.sin(2 * x), np.cos(2 * x)])
    lam = (2 - 2 * np.cos(2 * g.hx)) / g.hx**2
    np.testing.assert_allclose(laplace_beltrami(f, g), -lam * f, atol=1e-12)


def test_stream_velocity_divergence_free_and_tangent(g):
    X, Y = g.mesh
    u = velocity_from_stream(np.sin(np.pi * Y) ** 2 * np.cos(X) + 0.3 * Y, g)
    assert np.max(np.abs(divergence(u, g))) < 1e-12
    assert np.all(u.uy[[0, -1]] == 0)


def test_stream_function_must_be_wall_constant(g):
    X, Y = g.mesh
    with pytest.raises(ValueError):
        velocity_from_stream(np.cos(X) * (1 + Y), g)


def test_gradient_shape_and_exactness(g):
    X, Y = g.mesh
    gr = gradient(3 * Y + 0 * X, g)
    assert gr.shape == (2,) + g.shape
    np.testing.assert_allclose(gr[1], 3.0, atol=1e-12)
    np.testing.assert_allclose(gr[0], 0.0, atol=1e-12)


def test_advective_and_conservative_forms_converge_at_second_order():
    errs = []
    for nx, ny in ((16, 9), (32, 17), (64, 33)):
        g = build_channel_grid(2 * np.pi, 1.0, nx, ny)
        X, Y = g.mesh
        u = velocity_from_stream(np.sin(np.pi * Y) ** 2 * np.cos(X), g)
        rho = np.cos(X) * np.cos(np.pi * Y)
        d = np.abs(advect(rho, u, g) - advect_conservative(rho, u, g))
        errs.append(np.max(d[(Y > 0.25) & (Y < 0.75)]))
    assert errs[0] / errs[1] > 3.5 and errs[1] / errs[2] > 3.5


def test_stream_velocity_is_exactly_solenoidal_under_sbp_pairing():
    # H Dy + Dy^T H only sees the walls, where a stream function is constant
    g = build_channel_grid(2.0, 1.0, 8, 6)
    h = np.diag(np.full(g.ny, g.hy))
    h[0, 0] = h[-1, -1] = g.hy / 2
    d1 = g.dy.toarray()[::g.nx, ::g.nx]
    b = h @ d1 + d1.T @ h
    expect = np.zeros_like(b)
    expect[0, 0], expect[-1, -1] = -1.0, 1.0
    np.testing.assert_allclose(b, expect, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_convection_conserves_mass(seed):
    g = build_channel_grid(2.0, 1.0, 8, 6)
    rng = np.random.default_rng(seed)
    c = convection_matrix(rng.standard_normal(g.shape), rng.standard_normal(g.shape), g)
    rho = rng.standard_normal(g.n)
    assert abs(np.sum(c @ rho)) < 1e-12 * (1 + np.abs(c).sum())


def test_leray_projection_fixes_solenoidal_fields(g):
    X, Y = g.mesh
    u = velocity_from_stream(np.sin(np.pi * Y) ** 2 * np.sin(2 * X) + Y, g)
    px, py = leray_project(u.ux, u.uy, g)
    np.testing.assert_allclose(px, u.ux, atol=1e-12)
    np.testing.assert_allclose(py, u.uy, atol=1e-12)


def test_leray_projection_idempotent(g):
    rng = np.random.default_rng(3)
    px, py = leray_project(rng.standard_normal(g.shape), rng.standard_normal(g.shape), g)
    qx, qy = leray_project(px, py, g)
    np.testing.assert_allclose(qx, px, atol=1e-12)
    np.testing.assert_allclose(qy, py, atol=1e-12)


def test_leray_annihilates_gradient_fields():
    g = build_channel_grid(2 * np.pi, 1.0, 32, 17)
    X, Y = g.mesh
    w = g.bulk_weights
    for phi in (np.cos(X) * np.cos(np.pi * Y), np.cos(2 * X) + Y**2, np.sin(X) * Y**3):
        gr = gradient(phi, g)
        px, py = leray_project(gr[0], gr[1], g)
        n_in = np.sqrt(np.sum(w * (gr[0] ** 2 + gr[1] ** 2)))
        n_out = np.sqrt(np.sum(w * (px**2 + py**2)))
        assert n_out <= 1e-10 * n_in


def test_fieldpair_trace_and_arithmetic(g):
    rng = np.random.default_rng(0)
    a = FieldPair.from_bulk(rng.standard_normal(g.shape))
    assert a.is_trace_compatible()
    b = FieldPair(a.bulk, a.bdry + 1e-3)
    assert not b.is_trace_compatible(1e-6)
    c = 2 * a - a
    np.testing.assert_array_equal(c.bulk, a.bulk)
    np.testing.assert_array_equal(FieldPair.from_flat(a.flat(), g).bdry, a.bdry)


def test_zero_velocity(g):
    u = Velocity.zero(g)
    assert u.stacked().shape == (2,) + g.shape
    assert not u.stacked().any()
