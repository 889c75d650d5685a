from __future__ import annotations

import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from sheathkit.equilibrium import solve_equilibrium
from sheathkit.errors import ConditionViolated
from sheathkit.profiles import ElectronModel, InjectionProfile, build_well
from sheathkit.stability import (NO_DELAY, closure_residuals, critical_margin, delayed_gronwall_simulate,
                                 delta_threshold, fit_decay, kappa_residual, linear_condition,
                                 nonlinear_thresholds, solve_kappa, stability_report, write_stability_csv)


def _mp_kappa(alpha, T):
    return float(mpmath.findroot(lambda k: alpha * (mpmath.exp(k * T) - 1) - k, (1e-3 / T, 50 / T), solver="anderson"))


def test_kappa_reference_value():
    k = solve_kappa(0.5, 1.0)
    assert_allclose(k, 1.2564312086261697, rtol=1e-13)
    assert_allclose(k, _mp_kappa(0.5, 1.0), rtol=1e-12)
    assert kappa_residual(k, 0.5, 1.0) < 1e-14


@given(st.floats(1e-3, 0.99), st.floats(1e-2, 50.0))
@settings(max_examples=80, deadline=None)
def test_kappa_solves_its_equation(product, T):
    alpha = product / T
    k = solve_kappa(alpha, T)
    assert k > 0
    assert kappa_residual(k, alpha, T) < 1e-10 * max(1.0, k)


def test_kappa_decreases_with_alpha():
    ks = [solve_kappa(a, 1.0) for a in (0.1, 0.3, 0.6, 0.9)]
    assert np.all(np.diff(ks) < 0)


def test_kappa_limits_and_errors():
    assert solve_kappa(0.0, 2.0) == NO_DELAY
    with pytest.raises(ConditionViolated):
        solve_kappa(1.0, 1.0)
    with pytest.raises(ValueError):
        solve_kappa(0.5, 0.0)


def test_delta_threshold_sign_change_and_critical_margin():
    r_star = critical_margin(-1.0)
    assert 2.0 < r_star < 3.0
    assert delta_threshold(r_star * 0.99, -1.0) < 0 < delta_threshold(r_star * 1.01, -1.0)
    # independent root of r^2 (exp(-2/r) - 1/4) = 2/r by mpmath
    oracle = float(mpmath.findroot(lambda r: r**2 * (mpmath.exp(-2 / r) - 0.25) - 2 / r, 2.3))
    assert_allclose(r_star, oracle, rtol=1e-12)


def test_critical_margin_without_wall_drop():
    # delta_r = r^2 (exp(-2/r) - 1/4) vanishes where exp(-2/r) = 1/4
    assert_allclose(critical_margin(0.0), 2.0 / math.log(4.0), rtol=1e-12)


def test_gronwall_equality_stays_under_envelope():
    for init in (lambda t: 1.0, lambda t: math.exp(-t), lambda t: 1.0 + math.sin(5 * t)):
        series = delayed_gronwall_simulate(init, 0.5, 1.0, 12.0, 1e-3)
        assert series.bound_ok
        assert series.z[-1] < series.z[0] * math.exp(-0.9 * series.kappa * 12.0) * 10


def test_gronwall_rate_matches_kappa():
    series = delayed_gronwall_simulate(lambda t: 1.0, 0.5, 1.0, 20.0, 1e-3)
    tail = series.t > 10
    rate = -np.polyfit(series.t[tail], np.log(series.z[tail]), 1)[0]
    assert_allclose(rate, series.kappa, rtol=1e-3)


def test_fit_decay_recovers_exact_exponential():
    t = np.linspace(0, 5, 101)
    fit = fit_decay(t, 3.0 * np.exp(-0.7 * t), 0.7, 1.0)
    assert_allclose(fit.C, 3.0, rtol=1e-12)
    assert_allclose(fit.fitted_rate, 0.7, rtol=1e-10)
    assert fit.envelope_ok and not fit.extinct
    slow = fit_decay(t, np.exp(-0.2 * t), 0.7, 1.0)
    assert not slow.envelope_ok


def test_fit_decay_reports_extinction():
    t = np.linspace(0, 3, 31)
    y = np.where(t < 0.5, 1.0, 0.0)
    fit = fit_decay(t, y, 0.4, 1.0)
    assert fit.extinct and fit.envelope_ok
    assert fit_decay(t, np.zeros_like(t), 0.4, 1.0).extinct


def test_closure_residuals_vanish_on_equality_solution():
    series = delayed_gronwall_simulate(lambda t: 1.0, 0.5, 1.0, 5.0, 1e-3)
    _, res = closure_residuals(series.t, series.z, 0.5, 1.0)
    assert np.max(np.abs(res[1:])) < 1e-6


def test_linear_condition_reference(ref_eq):
    lin = linear_condition(ref_eq, 3.0)
    assert_allclose(lin.dvf_norm, ref_eq.profile.derivative_l1(3.0))
    assert_allclose(lin.margin, 1.0 - 2.0 * lin.dvf_norm / 3.0 / ref_eq.lam**2)
    # the unscaled profile is far too steep for a Debye length of 0.1
    assert not lin.passed


def test_no_injection_means_full_margin():
    well = build_well(ElectronModel.boltzmann(1.0), InjectionProfile(3.0, 1.0, 0.0), -1.0, strict=False)
    eq = solve_equilibrium(well, 0.1)
    lin = linear_condition(eq, 0.0)
    assert lin.margin == 1.0 and lin.passed


def scaled_nonlinear_eq(c=0.001):
    well = build_well(ElectronModel.boltzmann(c), InjectionProfile(5.0, 1.0, c), -1.0)
    return solve_equilibrium(well, 0.1)


def test_nonlinear_thresholds_scaled_profile():
    nl = nonlinear_thresholds(scaled_nonlinear_eq(), 4.0)
    assert nl.passed and not nl.no_threshold
    assert_allclose(nl.delta_r, delta_threshold(4.0, -1.0))
    assert nl.eps0 < nl.eps0_quadratic_lambda
    assert nl.binding() in ("mickey", "window")


def test_stability_report_csv(ref_eq, tmp_path):
    reps = [stability_report(ref_eq, r) for r in (0.0, 3.0)]
    path = tmp_path / "st.csv"
    write_stability_csv(reps, path)
    lines = path.read_text().splitlines()
    assert len(lines) == 3
    assert lines[0].startswith("lam,r,T_r")
