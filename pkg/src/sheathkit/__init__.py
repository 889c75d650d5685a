"""Kinetic plasma-sheath toolkit: equilibrium, characteristics, Poisson solvers, evolution and stability checks."""

from .errors import SheathError
from .profiles import ElectronModel, InjectionProfile, build_well, check_hypotheses
from .equilibrium import Equilibrium, solve_equilibrium

__version__ = "0.1.0"

__all__ = ["SheathError", "ElectronModel", "InjectionProfile", "build_well", "check_hypotheses", "Equilibrium",
           "solve_equilibrium", "__version__"]
