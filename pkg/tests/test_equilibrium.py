from __future__ import annotations

import math

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from sheathkit.equilibrium import (SEPARATRIX_TOL, Region, classify, classify_point, eval_f_inf, quasineutral_norm,
                                   quasineutrality_scan, sinh_ratio, solve_equilibrium, verify_equilibrium_bounds)
from sheathkit.profiles import ElectronModel, InjectionProfile, build_well


def test_sinh_ratio_is_stable_for_large_arguments():
    x = np.array([0.0, 0.5, 0.99, 1.0])
    assert_allclose(sinh_ratio(2.0, x), np.sinh(2.0 * x) / np.sinh(2.0), rtol=1e-14)
    big = sinh_ratio(800.0, x)
    assert np.all(np.isfinite(big))
    assert_allclose(big[-1], 1.0)
    assert_allclose(big[2], math.exp(-8.0), rtol=1e-12)


def test_reference_equilibrium_shape(ref_eq):
    assert ref_eq.phi[0] == 0.0 and ref_eq.phi[-1] == -1.0
    assert np.all(np.diff(ref_eq.phi) <= 1e-14)
    assert ref_eq.monotone_ok and ref_eq.concave_ok
    assert ref_eq.dphi[0] < 0


def test_reference_equilibrium_solves_the_boundary_value_problem(ref_eq):
    h = ref_eq.x[1] - ref_eq.x[0]
    phi = ref_eq.phi
    lap = (phi[2:] - 2 * phi[1:-1] + phi[:-2]) / h**2
    resid = -ref_eq.lam**2 * lap + ref_eq.well.q_prime(phi[1:-1])
    assert np.max(np.abs(resid)) < 1e-8


def test_sandwich_and_edge_slope(ref_eq):
    rep = verify_equilibrium_bounds(ref_eq)
    assert rep.passed
    assert not rep.violations
    assert rep.edge_slope <= rep.edge_slope_bound


def test_zero_wall_potential_gives_zero_equilibrium():
    well = build_well(ElectronModel.boltzmann(1.0), InjectionProfile(3.0, 1.0, 1.0), 0.0)
    eq = solve_equilibrium(well, 0.1)
    assert not np.any(eq.phi)


def test_inverse_and_energy_gap(ref_eq):
    for y in (-0.9, -0.3, -1e-3):
        x0 = ref_eq.inverse(y)
        assert_allclose(ref_eq.phi_at(x0), y, atol=1e-13)
    assert_allclose(ref_eq.energy_gap(0.5, 1.0), 1.0 + 2 * ref_eq.phi_at(0.5))


@given(st.floats(0.0, 1.0), st.floats(-8.0, 8.0))
@settings(max_examples=200, deadline=None)
def test_classification_is_a_partition(ref_eq, x, v):
    code = int(classify(ref_eq, x, v))
    gap = v * v + 2 * ref_eq.phi_at(x)
    if abs(gap) < SEPARATRIX_TOL:
        assert code == Region.SEPARATRIX
    elif gap > 0:
        assert code == (Region.DPLUS if v > 0 else Region.DMINUS)
    else:
        assert code == Region.DPLUS_MINUS
    assert classify_point(ref_eq, x, v).kind == code


def test_f_inf_vanishes_off_dplus(ref_eq):
    assert eval_f_inf(ref_eq, 0.5, -3.0) == 0.0
    assert eval_f_inf(ref_eq, 0.5, 0.1) == 0.0
    e = math.sqrt(3.0**2 + 2 * ref_eq.phi_at(0.5))
    assert_allclose(eval_f_inf(ref_eq, 0.5, 3.0), ref_eq.profile.value(e))


def test_charge_density_is_zero_at_the_core(ref_eq):
    assert abs(ref_eq.charge_density()[0]) < 1e-10


def test_quasineutral_norm_decreases(ref_well):
    rows, decreasing = quasineutrality_scan(ref_well, [0.2, 0.1, 0.05])
    assert decreasing
    assert rows[0].norm > rows[-1].norm


def test_csv_export(ref_eq, tmp_path):
    path = tmp_path / "eq.csv"
    ref_eq.to_csv(path)
    data = np.genfromtxt(path, delimiter=",", names=True)
    assert data.dtype.names == ("x", "phi_inf", "dphi_inf", "charge_density")
    assert_allclose(data["phi_inf"], ref_eq.phi)


def test_quasineutral_norm_positive(ref_eq):
    assert quasineutral_norm(ref_eq) > 0
