"""Linearized and nonlinear Poisson solvers with their a priori estimates as runtime checks."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_banded

from .equilibrium import Equilibrium
from .errors import NoConvergence, SingularSystem

ESTIMATE_SLACK = 1e-6
ARMIJO = 1e-4
NEWTON_TOL = 1e-10
NEWTON_MAX = 60


def trapezoid(values, x) -> float:
    values = np.asarray(values, dtype=float)
    h = np.diff(x)
    return float(np.sum(0.5 * h * (values[1:] + values[:-1])))


@dataclass(frozen=True)
class SourceDensity:
    x: np.ndarray
    values: np.ndarray
    l1_norm: float

    @classmethod
    def from_values(cls, x, values) -> "SourceDensity":
        x = np.asarray(x, dtype=float)
        values = np.asarray(values, dtype=float)
        return cls(x, values, trapezoid(np.abs(values), x))

    @property
    def sup_norm(self) -> float:
        return float(np.max(np.abs(self.values))) if self.values.size else 0.0


@dataclass(frozen=True)
class PotentialField:
    x: np.ndarray
    values: np.ndarray
    first_derivative: np.ndarray
    second_derivative: np.ndarray
    iterations: int = 0
    energy_history: tuple = ()

    @property
    def cell_slopes(self) -> np.ndarray:
        return np.diff(self.values) / np.diff(self.x)


def _tridiag_solve(lam, h, diag_extra, rhs):
    n = rhs.size
    if n == 0:
        return rhs.copy()
    main = 2.0 * lam**2 / h**2 + diag_extra
    if np.any(~np.isfinite(main)) or np.any(main <= 0):
        raise SingularSystem("Poisson operator lost diagonal dominance")
    ab = np.zeros((3, n))
    ab[0, 1:] = -lam**2 / h**2
    ab[1] = main
    ab[2, :-1] = -lam**2 / h**2
    return solve_banded((1, 1), ab, rhs)


def _derivatives(x, values, second):
    """Nodal first derivative: centred inside, boundary value from the cell slope corrected by curvature."""
    h = x[1] - x[0]
    d = np.empty_like(values)
    d[1:-1] = (values[2:] - values[:-2]) / (2 * h)
    d[0] = (values[1] - values[0]) / h - 0.5 * h * second[0]
    d[-1] = (values[-1] - values[-2]) / h + 0.5 * h * second[-1]
    return d


def solve_linear_poisson(eq: Equilibrium, rho: SourceDensity, coefficient=None) -> PotentialField:
    """-lam^2 V'' + c V = rho, V(0) = V(1) = 0, with c = n_e'(phi_inf) unless ``coefficient`` is given."""
    x = rho.x
    h = x[1] - x[0]
    lam = eq.lam
    if coefficient is None:
        c = eq.model.derivative(_phi_on(eq, x))
    else:
        c = np.broadcast_to(np.asarray(coefficient, dtype=float), x.shape)
    values = np.zeros_like(x)
    values[1:-1] = _tridiag_solve(lam, h, c[1:-1], rho.values[1:-1])
    second = (c * values - rho.values) / lam**2
    return PotentialField(x, values, _derivatives(x, values, second), second)


def _phi_on(eq: Equilibrium, x):
    if x.shape == eq.x.shape and np.array_equal(x, eq.x):
        return eq.phi
    return eq.phi_at(x)


def _nonlinear_energy(model, phi, psi, rho, lam, h):
    inner = slice(1, -1)
    grad = 0.5 * lam**2 * np.sum(np.diff(psi) ** 2) / h
    pot = model.antiderivative(phi[inner] + psi[inner]) - model.antiderivative(phi[inner])
    lin = (model.density(phi[inner]) + rho[inner]) * psi[inner]
    return grad + h * np.sum(pot - lin)


def solve_nonlinear_poisson(eq: Equilibrium, rho: SourceDensity, tol: float = NEWTON_TOL,
                            max_iter: int = NEWTON_MAX, initial=None) -> PotentialField:
    """-lam^2 W'' + n_e(phi_inf + W) - n_e(phi_inf) = rho, W(0) = W(1) = 0.

    Damped Newton on the strictly convex energy
    int lam^2/2 |W'|^2 + N_e(phi_inf + W) - (n_e(phi_inf) + rho) W.
    """
    x = rho.x
    h = x[1] - x[0]
    lam = eq.lam
    model = eq.model
    phi = _phi_on(eq, x)
    base = model.density(phi)
    r = rho.values
    psi = np.zeros_like(x) if initial is None else np.array(initial, dtype=float)
    psi[0] = psi[-1] = 0.0
    if not np.any(r[1:-1]) and initial is None:
        second = np.zeros_like(x)
        second[:] = -r / lam**2
        return PotentialField(x, psi, _derivatives(x, psi, second), second, 0, (0.0,))

    energy = _nonlinear_energy(model, phi, psi, r, lam, h)
    history = [energy]
    res = math.inf
    for it in range(max_iter + 1):
        inner = psi[1:-1]
        lap = (2.0 * inner - psi[:-2] - psi[2:]) / h**2
        resid = lam**2 * lap + model.density(phi[1:-1] + inner) - base[1:-1] - r[1:-1]
        res = math.sqrt(h * np.sum(resid**2))
        if res < tol:
            break
        if it == max_iter:
            raise NoConvergence("nonlinear Poisson Newton did not converge", it, res, history)
        jac = model.derivative(phi[1:-1] + inner)
        d = -_tridiag_solve(lam, h, jac, resid)
        grad_dot = h * float(np.dot(resid, d))
        step = 1.0
        floor = 1e-13 * (1.0 + abs(energy))
        for _ in range(60):
            trial = psi.copy()
            trial[1:-1] = inner + step * d
            e_trial = _nonlinear_energy(model, phi, trial, r, lam, h)
            if e_trial <= energy + ARMIJO * step * grad_dot:
                break
            if step == 1.0 and abs(e_trial - energy) <= floor:
                # energy differences are at roundoff level: plain Newton regime
                break
            step *= 0.5
        else:
            raise NoConvergence("nonlinear Poisson line search failed", it, res, history)
        psi, energy = trial, e_trial
        history.append(e_trial)
    second = (model.density(phi + psi) - base - r) / lam**2
    return PotentialField(x, psi, _derivatives(x, psi, second), second, it, tuple(history))


# --------------------------------------------------------------------------- estimates


@dataclass(frozen=True)
class EstimateCheck:
    name: str
    lhs: float
    rhs: float

    @property
    def margin(self) -> float:
        return self.rhs - self.lhs

    @property
    def passed(self) -> bool:
        return self.lhs <= self.rhs * (1.0 + ESTIMATE_SLACK) + 1e-14


@dataclass(frozen=True)
class EstimateReport:
    mode: str
    checks: tuple
    sup_curvature: float = float("nan")

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def by_name(self, name: str) -> EstimateCheck:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)


def _sup_slope(field: PotentialField) -> float:
    return float(max(np.max(np.abs(field.cell_slopes)), np.max(np.abs(field.first_derivative))))


def estimate_report(field: PotentialField, rho: SourceDensity, mode: str, eq: Equilibrium) -> EstimateReport:
    """Every a priori inequality of the matching Poisson problem, with left side, right side and margin."""
    x = field.x
    lam2 = eq.lam**2
    l1 = rho.l1_norm
    phi = _phi_on(eq, x)
    checks = []
    if mode == "linear":
        c = eq.model.derivative(phi)
        checks.append(EstimateCheck("dxxV_l1", trapezoid(np.abs(field.second_derivative), x), 2 * l1 / lam2))
        checks.append(EstimateCheck("dxV_linf", _sup_slope(field), 2 * l1 / lam2))
        checks.append(EstimateCheck("weighted_V_l1", trapezoid(np.abs(c * field.values), x), l1))
        return EstimateReport(mode, tuple(checks))
    if mode != "nonlinear":
        raise ValueError("mode must be 'linear' or 'nonlinear'")
    model = eq.model
    dn = model.density(phi + field.values) - model.density(phi)
    slopes = field.cell_slopes
    grad_l2 = math.sqrt(float(np.sum(slopes**2 * np.diff(x))))
    checks.append(EstimateCheck("dxW_l2", lam2 * grad_l2, l1))
    checks.append(EstimateCheck("density_gap_l1", trapezoid(np.abs(dn), x), l1))
    checks.append(EstimateCheck("dxxW_l1", lam2 * trapezoid(np.abs(field.second_derivative), x), 2 * l1))
    checks.append(EstimateCheck("dxW_linf", lam2 * _sup_slope(field), 2 * l1))
    sup = rho.sup_norm
    big_m = float("nan")
    if np.isfinite(sup):
        a = float(np.max(np.abs(phi))) + 2.0 * sup / lam2
        lo, hi = model.domain
        grid = np.linspace(max(-a, lo), min(a, hi), 2001)
        with np.errstate(over="ignore"):
            big_m = float(np.max(model.derivative(grid)))
        checks.append(EstimateCheck("density_gap_l1_by_sup", trapezoid(np.abs(dn), x), sup))
        checks.append(EstimateCheck("dxW_linf_by_sup", lam2 * _sup_slope(field), 2 * sup))
        checks.append(EstimateCheck("density_gap_linf", float(np.max(np.abs(dn))), 2 * big_m * sup / lam2))
        checks.append(EstimateCheck("dxxW_linf", lam2 * float(np.max(np.abs(field.second_derivative))),
                                    (2 * big_m / lam2 + 1) * sup))
    return EstimateReport(mode, tuple(checks), big_m)
