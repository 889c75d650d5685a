from __future__ import annotations

import pytest

from sheathkit.equilibrium import solve_equilibrium
from sheathkit.profiles import ElectronModel, InjectionProfile, build_well


def reference_well(phi_b=-1.0):
    return build_well(ElectronModel.boltzmann(1.0), InjectionProfile(3.0, 1.0, 1.0), phi_b)


@pytest.fixture(scope="session")
def ref_well():
    return reference_well()


@pytest.fixture(scope="session")
def ref_eq(ref_well):
    return solve_equilibrium(ref_well, 0.1)


@pytest.fixture(scope="session")
def coarse_eq(ref_well):
    return solve_equilibrium(ref_well, 0.2)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    RESULTS = getattr(mod, "RESULTS", None)
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(RESULTS):
        terminalreporter.write_line(RESULTS[key])
