import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dbhlab.errors import DomainError
from dbhlab.meanfield import (
    ALPHA_C,
    closed_form_phi,
    dispersion,
    dispersion_overlay,
    energy_functional,
    gamma_of,
    ground_energy,
    heff_bogoliubov,
    mean_field_hamiltonian,
    minimize_energy_numeric,
    order_parameter,
    point_from_gamma,
    speed_of_sound,
    variational_point,
)

# (U/4) sqrt(sqrt2 alpha_c) (gamma + 1) at gamma = 1, evaluated by hand
CS_GAMMA1 = 0.246293


def test_critical_coupling():
    assert ALPHA_C == pytest.approx(0.171573, abs=1e-6)
    assert ALPHA_C / 4 == pytest.approx(0.042893, abs=1e-6)
    p = variational_point(ALPHA_C / 4, 1.0)
    assert p.gamma == pytest.approx(1.0)
    assert p.phi == 0.0 and p.psi == 0.0


def test_order_parameter_at_gamma_two():
    p = point_from_gamma(2.0)
    assert p.psi == pytest.approx(0.73919, abs=1e-5)
    assert p.psi == pytest.approx(order_parameter(p.chi0), abs=1e-12)


@given(g=st.floats(0.0, 10.0))
def test_point_invariants(g):
    p = point_from_gamma(g)
    assert np.dot(p.chi0, p.chi0) == pytest.approx(1.0)
    if g <= 1:
        assert p.phi == 0 and p.psi == 0
    else:
        assert p.psi > 0


def test_psi_continuous_at_transition():
    assert point_from_gamma(1.0 + 1e-10).psi < 1e-4
    assert point_from_gamma(1.0 + 1e-10).psi > 0


def test_invalid_inputs():
    with pytest.raises(DomainError):
        variational_point(0.1, 0.0)
    with pytest.raises(DomainError):
        variational_point(-0.1, 1.0)


def test_ground_energy_is_lowest_mean_field_level():
    for g in (0.5, 1.0, 1.3, 2.5):
        p = point_from_gamma(g)
        e = np.linalg.eigvalsh(mean_field_hamiltonian(p))
        assert p.omega0 == pytest.approx(e[0], abs=1e-12)
        assert ground_energy(g, 1.0) == p.omega0


def test_minimizer_examples():
    J15 = 1.5 * ALPHA_C / 4
    assert abs(minimize_energy_numeric(J15, 1.0) - 0.5 * math.acos(2 / 3)) < 1e-8
    assert minimize_energy_numeric(0.5 * ALPHA_C / 4, 1.0) == 0.0
    phi = minimize_energy_numeric(J15, 1.0)
    e = energy_functional(phi, J15, 1.0)
    assert e <= energy_functional(phi + 0.01, J15, 1.0)
    assert e <= energy_functional(phi - 0.01, J15, 1.0)


@pytest.mark.parametrize("g", np.linspace(1.01, 5.0, 12))
def test_closed_form_phi_is_the_minimizer(g):
    assert abs(minimize_energy_numeric(g * ALPHA_C / 4, 1.0) - closed_form_phi(g)) < 1e-8


# --- excitations ----------------------------------------------------------------


def test_goldstone_gapless_and_higgs_gapped():
    p = point_from_gamma(1.1)
    lo, hi = dispersion(0.0, 0.0, p)
    assert lo == 0.0
    assert hi > 0
    for g in (1.0, 1.5, 3.0):
        assert dispersion(1e-6, 0.0, point_from_gamma(g))[0] < 1e-6


def test_dispersion_requires_superfluid_side():
    with pytest.raises(DomainError):
        dispersion(0.1, 0.1, point_from_gamma(0.8))


momenta = st.floats(-math.pi, math.pi).filter(lambda k: abs(k) > 1e-3)


@given(kx=momenta, ky=momenta, g=st.sampled_from([1.05, 1.5, 3.0]))
def test_bogoliubov_matches_closed_form(kx, ky, g):
    p = point_from_gamma(g)
    ev, (wm, wp) = heff_bogoliubov(kx, ky, p)
    lo, hi = dispersion(kx, ky, p)
    assert abs(wm - lo) < 1e-8 and abs(wp - hi) < 1e-8
    assert lo <= hi
    # +- pairs and a doubly degenerate zero for the condensate mode
    re = np.sort(ev.real)
    assert np.allclose(re, -re[::-1], atol=1e-8)
    assert np.sum(np.abs(ev) < 1e-6) >= 2


def test_bogoliubov_at_goldstone_point():
    # four zero eigenvalues with a Jordan block: sqrt(eps) accuracy only
    p = point_from_gamma(1.5)
    ev, (wm, wp) = heff_bogoliubov(0.0, 0.0, p)
    assert wm < 1e-6
    assert wp == pytest.approx(dispersion(0.0, 0.0, p)[1], abs=1e-8)


def test_near_transition_goldstone_below_higgs():
    lo, hi = dispersion(0.01, 0.0, point_from_gamma(1.01))
    assert lo < 0.05 * hi
    _, (wm, wp) = heff_bogoliubov(0.01, 0.0, point_from_gamma(1.01))
    assert wm < 0.05 * wp


def test_speed_of_sound_at_transition():
    c = speed_of_sound(point_from_gamma(1.0))
    assert c == pytest.approx(CS_GAMMA1, abs=1e-6)
    p = point_from_gamma(1.0)
    assert dispersion(1e-3, 0.0, p)[0] / 1e-3 == pytest.approx(c, rel=1e-3)


def test_speed_of_sound_increasing():
    cs = [speed_of_sound(point_from_gamma(g)) for g in np.linspace(1, 3, 21)]
    assert all(np.diff(cs) > 0)


@pytest.mark.parametrize("g", [1.05, 1.5, 3.0])
def test_slope_fit_matches_speed_of_sound(g):
    p = point_from_gamma(g)
    k = np.logspace(-4, -2, 9)
    w = dispersion(k, np.zeros_like(k), p)[0]
    slope = np.polyfit(k, w, 1)[0]
    assert slope == pytest.approx(speed_of_sound(p), rel=1e-3)


def test_overlay():
    k = np.linspace(-1, 1, 11)
    p = point_from_gamma(1.4)
    assert np.allclose(dispersion_overlay(k, gamma=p.gamma), dispersion(k, 0 * k, p)[0])
    assert np.allclose(dispersion_overlay(k, J=p.J), dispersion(k, 0 * k, p)[0])
    curve = dispersion_overlay(k, alpha_c=0.3, gamma=1.1)
    assert np.allclose(curve, curve[::-1])
    assert curve[5] == 0.0 and curve[6] > 0
    pairs = np.column_stack([k, np.zeros_like(k)])
    assert np.allclose(dispersion_overlay(pairs, gamma=1.1, alpha_c=0.3), curve)
    with pytest.raises(DomainError):
        dispersion_overlay(k)
    with pytest.raises(DomainError):
        dispersion_overlay(k, gamma=0.9)


def test_gamma_definition():
    assert gamma_of(ALPHA_C / 4, 1.0) == pytest.approx(1.0)
    assert gamma_of(0.1, 2.0) == pytest.approx(0.4 / (ALPHA_C * 2.0))
