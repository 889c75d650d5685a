from __future__ import annotations

import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose
from scipy.integrate import quad

from sheathkit.errors import CurvatureDegenerate, NonPositiveDensity, RangeExceeded
from sheathkit.profiles import (ElectronModel, InjectionProfile, build_well, bump_unit_mass, check_hypotheses,
                                ion_density)


def _mp_bump_mass():
    return float(mpmath.quad(lambda z: mpmath.exp(-1 / (1 - z**2)), [-1, 0, 1]))


def test_bump_unit_mass_matches_high_precision_quadrature():
    assert_allclose(bump_unit_mass(), _mp_bump_mass(), rtol=1e-13)


def test_injection_profile_has_requested_mass_and_support():
    prof = InjectionProfile(3.0, 1.0, 0.7)
    mass, _ = quad(prof.value, 2.0, 4.0, points=[3.0], epsabs=1e-14)
    assert_allclose(mass, 0.7, rtol=1e-10)
    assert prof.support == (2.0, 4.0)
    assert prof.value(np.array([1.99, 4.01])).tolist() == [0.0, 0.0]


@given(st.floats(0.0, 6.0))
@settings(max_examples=60, deadline=None)
def test_derivative_l1_matches_quadrature(r):
    prof = InjectionProfile(3.0, 1.0, 1.0)
    lo = max(r, 2.0)
    expected = quad(lambda v: abs(prof.derivative(v)), lo, 4.0, points=[3.0], epsabs=1e-13, limit=200)[0] if lo < 4 else 0.0
    assert_allclose(prof.derivative_l1(r), expected, rtol=1e-8, atol=1e-12)


def test_derivative_l1_total_is_twice_the_peak():
    prof = InjectionProfile(3.0, 1.0, 1.0)
    assert_allclose(prof.derivative_l1(0.0), 2 * prof.amplitude * math.exp(-1.0), rtol=1e-14)


def test_boltzmann_antiderivative_vanishes_at_zero():
    m = ElectronModel.boltzmann(2.0)
    assert m.antiderivative(0.0) == 0.0
    assert_allclose(m.antiderivative(-1.0), 2.0 * (math.exp(-1.0) - 1.0), rtol=1e-15)


def test_tabulated_model_reproduces_knots_and_rejects_out_of_range():
    psi = np.linspace(-2.0, 0.5, 11)
    m = ElectronModel.tabulated(psi, np.exp(psi))
    assert_allclose(m.density(psi), np.exp(psi), rtol=1e-14)
    assert_allclose(m.density(-1.3), math.exp(-1.3), rtol=1e-3)
    with pytest.raises(RangeExceeded):
        m.density(-2.5)


def test_tabulated_from_csv(tmp_path):
    path = tmp_path / "ne.csv"
    psi = np.linspace(-2.0, 0.5, 11)
    path.write_text("psi,ne\n" + "".join(f"{a},{b}\n" for a, b in zip(psi, np.exp(psi))))
    m = ElectronModel.from_csv(path)
    assert_allclose(m.reference_density, 1.0, rtol=1e-12)


def test_non_positive_density_rejected():
    with pytest.raises(NonPositiveDensity):
        ElectronModel.boltzmann(0.0)
    m = ElectronModel.tabulated([-1.0, -0.5, 0.0], [-0.1, 0.5, 1.0])
    with pytest.raises(NonPositiveDensity):
        check_hypotheses(m, InjectionProfile(3.0, 1.0, 1.0), -1.0)


def test_reference_hypotheses_pass():
    rep = check_hypotheses(ElectronModel.boltzmann(1.0), InjectionProfile(3.0, 1.0, 1.0), -1.0)
    assert rep.passed, rep.failures()
    # Bohm margin oracle: n_e'(0) - int mu / v^2 by arbitrary precision quadrature
    prof = InjectionProfile(3.0, 1.0, 1.0)
    amp = prof.amplitude
    inv_sq = mpmath.quad(lambda v: amp * mpmath.exp(-1 / (1 - (v - 3) ** 2)) / v**2, [2, 3, 4])
    assert_allclose(rep.bohm_margin, 1.0 - float(inv_sq), rtol=1e-10)


def test_neutrality_failure_is_reported():
    rep = check_hypotheses(ElectronModel.boltzmann(1.0), InjectionProfile(3.0, 1.0, 0.9), -1.0)
    assert not rep.neutrality_ok
    assert "neutrality" in rep.failures()


def test_ion_density_at_zero_potential_is_the_mass():
    prof = InjectionProfile(3.0, 1.0, 1.0)
    assert_allclose(ion_density(prof, 0.0), [1.0], rtol=1e-10)


def _mp_slope(s):
    prof = InjectionProfile(3.0, 1.0, 1.0)
    amp = prof.amplitude
    ions = mpmath.quad(lambda w: amp * mpmath.exp(-1 / (1 - (w - 3) ** 2)) * w / mpmath.sqrt(w**2 - 2 * s), [2, 3, 4])
    return float((mpmath.exp(s) - ions) / s)


def test_well_constants_match_independent_oracle(ref_well):
    # alpha is the minimum of Q'(s)/s over [phi_b, 0); it is attained at phi_b for this profile
    samples = np.linspace(-1.0, -0.05, 12)
    ratios = [_mp_slope(s) for s in samples]
    assert_allclose(ref_well.alpha, min(ratios), rtol=1e-9)
    assert_allclose(ref_well.alpha, 0.5329827330, rtol=1e-9)
    # beta = Q''(0) equals the Bohm margin
    assert_allclose(ref_well.beta, 0.8826429298, rtol=1e-9)
    assert ref_well.alpha <= ref_well.beta


def test_well_cancellation_free_forms_agree(ref_well):
    s = np.array([-1.0, -0.5, -1e-3, -1e-6])
    assert_allclose(ref_well.slope(s) * s, ref_well.q_prime(s), rtol=1e-6, atol=1e-12)
    assert_allclose(ref_well.slope(np.array([-1e-9])), [ref_well.beta], rtol=1e-6)


def test_non_neutral_well_is_degenerate():
    with pytest.raises(CurvatureDegenerate):
        build_well(ElectronModel.boltzmann(1.0), InjectionProfile(3.0, 1.0, 0.5), -1.0)
    proto = build_well(ElectronModel.boltzmann(1.0), InjectionProfile(3.0, 1.0, 0.0), -1.0, strict=False)
    assert not proto.neutral and math.isnan(proto.alpha)
