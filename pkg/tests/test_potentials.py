import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from convch.potentials import (DomainError, Potential, beta_min_section, check_compatibility,
                               check_mean_admissible, eval_potential, lower_bound, make_spec,
                               moreau_envelope, yosida, yosida_derivative)

finite = st.floats(-5, 5, allow_nan=False)


def test_invalid_parameters():
    with pytest.raises(ValueError):
        Potential("quartic")
    with pytest.raises(ValueError):
        Potential("logarithmic", c1=0.5)
    with pytest.raises(ValueError):
        make_spec(eps=0.0)


@pytest.mark.parametrize("family", ["logarithmic", "obstacle"])
@settings(max_examples=200, deadline=None)
@given(r1=finite, r2=finite, eps=st.sampled_from([1e-1, 1e-2, 1e-3]))
def test_yosida_monotone_and_lipschitz(family, r1, r2, eps):
    pot = Potential(family)
    b1, b2 = yosida(pot, eps, r1), yosida(pot, eps, r2)
    assert (b1 - b2) * (r1 - r2) >= -1e-12
    assert abs(b1 - b2) <= abs(r1 - r2) / eps * (1 + 1e-9) + 1e-12


def test_obstacle_closed_form():
    pot = Potential("obstacle")
    r = np.array([-3.0, -1.0, 0.0, 0.7, 1.0, 1.5])
    np.testing.assert_array_equal(yosida(pot, 0.5, r), [-4.0, 0.0, 0.0, 0.0, 0.0, 1.0])
    np.testing.assert_allclose(moreau_envelope(pot, 0.5, r), [4.0, 0, 0, 0, 0, 0.25])


def test_log_yosida_converges_to_artanh():
    pot = Potential("logarithmic")
    r = np.linspace(-0.95, 0.95, 20)
    exact = 2 * np.arctanh(r)
    errs = [np.max(np.abs(yosida(pot, e, r) - exact)) for e in (1e-2, 1e-3, 1e-4)]
    assert errs[0] > errs[1] > errs[2]
    assert errs[2] < 1e-2


def test_log_resolvent_equation():
    pot = Potential("logarithmic")
    eps = 1e-3
    r = np.array([-1.0, -0.5, 0.3, 0.999, 1.02])
    b = yosida(pot, eps, r)
    s = r - eps * b          # resolvent: s + eps*beta(s) = r, beta(s) = b
    np.testing.assert_allclose(2 * np.arctanh(s), b, rtol=1e-8)


@pytest.mark.parametrize("family", ["regular", "logarithmic", "obstacle"])
def test_envelope_derivative_is_yosida(family):
    pot = Potential(family)
    r = np.linspace(-1.5, 1.5, 31) + 0.013
    h = 1e-6
    fd = (moreau_envelope(pot, 1e-2, r + h) - moreau_envelope(pot, 1e-2, r - h)) / (2 * h)
    np.testing.assert_allclose(fd, yosida(pot, 1e-2, r), rtol=1e-5, atol=1e-5)


@pytest.mark.parametrize("family", ["regular", "logarithmic", "obstacle"])
def test_derivative_orders_consistent(family):
    spec = make_spec(family, eps=1e-2)
    r = np.linspace(-0.9, 0.9, 19) + 0.013
    h = 1e-6
    for order in (0, 1):
        fd = (eval_potential(spec, "bulk", r + h, order) - eval_potential(spec, "bulk", r - h, order)) / (2 * h)
        np.testing.assert_allclose(fd, eval_potential(spec, "bulk", r, order + 1), rtol=1e-5, atol=1e-4)


def test_regular_values():
    spec = make_spec("regular")
    assert eval_potential(spec, "bulk", 1.0) == pytest.approx(0.0, abs=1e-15)
    assert eval_potential(spec, "bulk", 0.0) == pytest.approx(0.25)
    assert eval_potential(spec, "bulk", 0.0, 2) == pytest.approx(-1.0)
    assert yosida_derivative(Potential(), 1e-3, 2.0) == pytest.approx(12.0)


def test_unregularized_domain_errors():
    spec = make_spec("logarithmic")
    with pytest.raises(DomainError):
        eval_potential(spec, "bulk", 1.0, regularized=False)
    with pytest.raises(DomainError):
        eval_potential(make_spec("obstacle"), "surface", 1.2, regularized=False)
    assert np.isfinite(eval_potential(spec, "bulk", 1.0))


def test_surface_regularized_at_eta_eps():
    spec = make_spec("obstacle", eps=1e-2, eta=3.0)
    assert eval_potential(spec, "surface", 1.3, 1) == pytest.approx(0.3 / 3e-2 - 2 * 1.3)
    assert eval_potential(spec, "bulk", 1.3, 1) == pytest.approx(0.3 / 1e-2 - 2 * 1.3)


@pytest.mark.parametrize("family", ["regular", "logarithmic", "obstacle"])
def test_lower_bound_holds(family):
    eps = 1e-2
    spec = make_spec(family, eps=eps)
    r = np.linspace(-3, 3, 6001)
    assert np.min(eval_potential(spec, "bulk", r)) >= lower_bound(spec.bulk, eps) - 1e-12


def test_min_section():
    assert beta_min_section(Potential("obstacle"), 1.0) == 0.0
    with pytest.raises(DomainError):
        beta_min_section(Potential("obstacle"), 1.01)
    assert beta_min_section(Potential("logarithmic"), 0.5) == pytest.approx(2 * np.arctanh(0.5))


def test_compatibility_checks():
    samples = np.linspace(-0.99, 0.99, 51)
    assert check_compatibility(Potential("logarithmic"), Potential("logarithmic"), samples).passed
    rep = check_compatibility(Potential("logarithmic"), Potential("regular"), samples)
    assert not rep.domain_ok and not rep.passed
    # regular bulk, log surface: domains nest; |r^3| <= |2 artanh r| on (-1, 1)
    assert check_compatibility(Potential("regular"), Potential("logarithmic"), samples).passed
    rep = check_compatibility(Potential("logarithmic"), Potential("obstacle"), samples)
    assert not rep.domain_ok


def test_mean_admissible():
    assert check_mean_admissible(0.5, Potential("logarithmic"))
    assert not check_mean_admissible(1.0, Potential("obstacle"))
    assert check_mean_admissible(7.0, Potential("regular"))
