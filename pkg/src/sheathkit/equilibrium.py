"""Stationary sheath potential, the equilibrium density and phase-space regions."""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import simpson
from scipy.interpolate import PPoly, make_interp_spline
from scipy.linalg import solve_banded
from scipy.optimize import brentq

from .errors import ConstraintViolation, NoConvergence
from .profiles import WellPotential

SEPARATRIX_TOL = 1e-12
SHAPE_TOL = 1e-8
ARMIJO = 1e-4


def default_grid_size(lam: float) -> int:
    return max(256, math.ceil(32.0 / lam))


def sinh_ratio(a: float, x):
    """sinh(a x) / sinh(a) for x in [0, 1], stable for large a."""
    x = np.asarray(x, dtype=float)
    if a == 0:
        return x.copy()
    num = -np.expm1(-2.0 * a * x)
    den = -np.expm1(-2.0 * a)
    return np.exp(a * (x - 1.0)) * num / den


class Region(enum.IntEnum):
    DPLUS = 0
    DPLUS_MINUS = 1
    DMINUS = 2
    SEPARATRIX = 3


@dataclass(frozen=True)
class PhaseRegion:
    """Region of a phase-space point. For D+ points ``margin`` is r if the point lies in D+_r, else 0."""

    kind: Region
    margin: float = 0.0

    def in_dplus(self, r: float = 0.0) -> bool:
        return self.kind == Region.DPLUS and self.margin >= r


class PotentialCurve:
    """Quintic spline through the nodal potential, extended affinely outside [0, 1].

    The C^4 interpolant keeps high-order characteristic integrators at their design order.
    """

    def __init__(self, x, phi, degree: int = 5):
        x = np.asarray(x, dtype=float)
        phi = np.asarray(phi, dtype=float)
        spline = make_interp_spline(x, phi, k=degree)
        self.pp = PPoly.from_spline(spline)
        self.dpp = self.pp.derivative()
        self.ddpp = self.pp.derivative(2)
        self.breaks = self.pp.x
        self.h = float(x[1] - x[0])
        self.x = x
        self.left = (float(phi[0]), float(self.dpp(0.0)))
        self.right = (float(phi[-1]), float(self.dpp(1.0)))

    def value(self, x):
        x = np.asarray(x, dtype=float)
        out = self.pp(np.clip(x, 0.0, 1.0))
        out = np.where(x < 0.0, self.left[0] + self.left[1] * x, out)
        return np.where(x > 1.0, self.right[0] + self.right[1] * (x - 1.0), out)

    def slope(self, x):
        return self.dpp(np.clip(np.asarray(x, dtype=float), 0.0, 1.0))

    def curvature(self, x):
        x = np.asarray(x, dtype=float)
        inside = (x >= 0.0) & (x <= 1.0)
        return np.where(inside, self.ddpp(np.clip(x, 0.0, 1.0)), 0.0)

    def next_break(self, x0: float) -> float:
        """First spline breakpoint strictly to the right of x0 (1.0 at the end)."""
        k = int(np.searchsorted(self.breaks, x0, side="right"))
        return float(self.breaks[k]) if k < self.breaks.size else 1.0


@dataclass(frozen=True)
class Equilibrium:
    lam: float
    phi_b: float
    x: np.ndarray
    phi: np.ndarray
    dphi: np.ndarray
    well: WellPotential
    curve: PotentialCurve = field(repr=False)
    iterations: int = 0
    residual: float = 0.0
    energy: float = 0.0
    monotone_ok: bool = True
    concave_ok: bool = True

    @property
    def profile(self):
        return self.well.profile

    @property
    def model(self):
        return self.well.model

    # potential evaluators with the affine extension
    def phi_at(self, x):
        return self.curve.value(x)

    def dphi_at(self, x):
        return self.curve.slope(x)

    @property
    def edge_slope(self) -> float:
        """|d phi / dx| at the plasma-core boundary x = 0."""
        return abs(float(self.dphi[0]))

    def inverse(self, y: float) -> float:
        """The x in [0, 1] with phi(x) = y (phi is strictly decreasing)."""
        if y >= 0.0:
            return 0.0
        if y <= self.phi_b:
            return 1.0
        return brentq(lambda t: float(self.curve.value(t)) - y, 0.0, 1.0, xtol=1e-15, rtol=1e-15, maxiter=200)

    def charge_density(self, x=None):
        """Net charge ion - electron density, which equals -Q'(phi)."""
        phi = self.phi if x is None else self.phi_at(x)
        return -self.well.q_prime(phi)

    def energy_gap(self, x, v):
        return np.asarray(v, dtype=float) ** 2 + 2.0 * self.phi_at(x)

    def to_csv(self, path):
        rho = self.charge_density()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "phi_inf", "dphi_inf", "charge_density"])
            for row in zip(self.x, self.phi, self.dphi, rho):
                w.writerow([f"{val:.17g}" for val in row])


# --------------------------------------------------------------------------- solver


def _functional(well: WellPotential, psi, lam, h):
    grad_part = 0.5 * lam**2 * np.sum(np.diff(psi) ** 2) / h
    q = well.q(psi[1:-1]) if psi.size > 2 else np.empty(0)
    return grad_part + h * np.sum(q) + 0.5 * h * (well.q(psi[-1]) if psi[-1] != 0 else 0.0)


def _gradient(well, psi, lam, h):
    inner = psi[1:-1]
    lap = (2.0 * inner - psi[:-2] - psi[2:]) / h
    return lam**2 * lap + h * well.q_prime(inner)


def _newton_direction(diag, off, g, free):
    """Solve the tridiagonal Newton system restricted to the free variables."""
    n = g.size
    d = np.zeros(n)
    if not np.any(free):
        return d
    dg = np.where(free, diag, 1.0)
    up = off.copy()
    up[~(free[:-1] & free[1:])] = 0.0
    ab = np.zeros((3, n))
    ab[0, 1:] = up
    ab[1] = dg
    ab[2, :-1] = up
    rhs = np.where(free, -g, 0.0)
    return solve_banded((1, 1), ab, rhs)


def solve_equilibrium(well: WellPotential, lam: float, grid_size: int | None = None,
                      tol: float = 1e-10, max_iter: int = 60) -> Equilibrium:
    """Minimize the discrete sheath functional by projected damped Newton.

    The unknowns are the interior nodal values, boxed by phi_b <= psi <= 0;
    the boundary values are psi(0) = 0 and psi(1) = phi_b.
    """
    if not lam > 0:
        raise ValueError("lambda must be positive")
    n = grid_size or default_grid_size(lam)
    if n < 64:
        raise ValueError("grid_size must be at least 64")
    phi_b = well.phi_b
    x = np.linspace(0.0, 1.0, n)
    h = x[1] - x[0]

    if phi_b == 0:
        phi = np.zeros(n)
        curve = PotentialCurve(x, phi)
        return Equilibrium(lam, 0.0, x, phi, np.zeros(n), well, curve)

    rate = well.alpha
    if not (math.isfinite(rate) and rate > 0):
        # non-neutral well: any positive curvature gives a usable starting layer
        rate = max(float(well.q_second(0.5 * phi_b)), 1e-6)
    psi = phi_b * sinh_ratio(math.sqrt(rate) / lam, x)
    psi[0], psi[-1] = 0.0, phi_b
    lo, hi = phi_b, 0.0
    history = []
    energy = _functional(well, psi, lam, h)
    res = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        g = _gradient(well, psi, lam, h)
        inner = psi[1:-1]
        at_lo = (inner <= lo) & (g > 0)
        at_hi = (inner >= hi) & (g < 0)
        free = ~(at_lo | at_hi)
        res = math.sqrt(h * np.sum((np.where(free, g, 0.0) / h) ** 2))
        history.append(res)
        if res < tol:
            break
        curv = np.maximum(well.q_second(inner), 0.0)
        diag = 2.0 * lam**2 / h + h * curv
        off = np.full(inner.size - 1, -lam**2 / h)
        d = _newton_direction(diag, off, g, free)
        step = 1.0
        accepted = False
        for _ in range(60):
            trial_inner = np.clip(inner + step * d, lo, hi)
            trial = psi.copy()
            trial[1:-1] = trial_inner
            e_trial = _functional(well, trial, lam, h)
            if e_trial <= energy + ARMIJO * float(np.dot(g, trial_inner - inner)):
                accepted = True
                break
            step *= 0.5
        if not accepted:
            # projected gradient fallback
            step = h / (4.0 * lam**2 / h + h * float(curv.max() if curv.size else 0.0))
            trial_inner = np.clip(inner - step * g, lo, hi)
            trial = psi.copy()
            trial[1:-1] = trial_inner
            e_trial = _functional(well, trial, lam, h)
            if e_trial > energy:
                raise NoConvergence("projected Newton stalled", it, res, history)
        if e_trial >= energy and np.max(np.abs(trial - psi)) == 0.0:
            # no further progress at floating point resolution
            break
        psi, energy = trial, e_trial
    else:
        if res >= tol:
            raise NoConvergence("projected Newton did not reach tolerance", max_iter, res, history)

    if np.any(psi < phi_b - 1e-14) or np.any(psi > 1e-14) or not np.all(np.isfinite(psi)):
        raise ConstraintViolation("equilibrium left the admissible box [phi_b, 0]")

    curve = PotentialCurve(x, psi)
    dphi = curve.slope(x)
    scale = abs(phi_b)
    monotone_ok = bool(np.all(np.diff(psi) < 0) and np.all(dphi < 0))
    concave_ok = bool(np.all(psi[2:] - 2 * psi[1:-1] + psi[:-2] <= SHAPE_TOL * scale))
    return Equilibrium(lam, phi_b, x, psi, dphi, well, curve, it, res, energy, monotone_ok, concave_ok)


# --------------------------------------------------------------------------- density and regions


def eval_f_inf(eq: Equilibrium, x, v):
    """Equilibrium density: mu(sqrt(v^2 + 2 phi(x))) on D+, zero elsewhere."""
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    gap = v * v + 2.0 * eq.phi_at(x)
    inside = (v > 0) & (gap > 0)
    out = np.zeros(np.broadcast(x, v).shape)
    energy = np.sqrt(np.where(inside, gap, 0.0))
    out[inside] = eq.profile.value(energy[inside])
    return out if out.ndim else float(out)


def classify(eq: Equilibrium, x, v, tol: float = SEPARATRIX_TOL):
    """Vectorized region codes (values of ``Region``)."""
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    gap = v * v + 2.0 * eq.phi_at(x)
    out = np.full(np.broadcast(x, v).shape, int(Region.DPLUS_MINUS), dtype=np.int8)
    out[(gap >= tol) & (v > 0)] = Region.DPLUS
    out[(gap >= tol) & (v < 0)] = Region.DMINUS
    out[np.abs(gap) < tol] = Region.SEPARATRIX
    return out


def in_dplus_r(eq: Equilibrium, x, v, r: float):
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    return (v > 0) & (v * v + 2.0 * eq.phi_at(x) - r * r > 0)


def classify_point(eq: Equilibrium, x: float, v: float, r: float = 0.0) -> PhaseRegion:
    kind = Region(int(classify(eq, x, v)))
    if kind == Region.DPLUS:
        margin = r if bool(in_dplus_r(eq, x, v, r)) else 0.0
        return PhaseRegion(kind, margin)
    return PhaseRegion(kind)


# --------------------------------------------------------------------------- quantitative checks on the equilibrium


@dataclass
class BoundsReport:
    lower: np.ndarray
    upper: np.ndarray
    violations: list
    edge_slope: float
    edge_slope_bound: float
    edge_slope_ok: bool
    energy_integral: float
    energy_ratio: float
    max_violation: float

    @property
    def passed(self) -> bool:
        return not self.violations and self.edge_slope_ok


def verify_equilibrium_bounds(eq: Equilibrium, tol: float = 1e-6) -> BoundsReport:
    """Check the sinh sandwich at every node, the edge slope bound and the boundary-layer energy."""
    alpha, beta = eq.well.alpha, eq.well.beta
    depth = abs(eq.phi_b)
    lower = depth * sinh_ratio(math.sqrt(beta) / eq.lam, eq.x)
    upper = depth * sinh_ratio(math.sqrt(alpha) / eq.lam, eq.x)
    mag = np.abs(eq.phi)
    violations = []
    worst = 0.0
    for i in range(eq.x.size):
        excess = max(lower[i] - mag[i], mag[i] - upper[i])
        worst = max(worst, excess)
        if excess > tol:
            violations.append((i, float(eq.x[i]), float(lower[i]), float(mag[i]), float(upper[i]), float(excess)))

    a = math.sqrt(alpha) / eq.lam
    # a / sinh(a) without overflow
    slope_bound = depth * (2.0 * a * math.exp(-a) / -math.expm1(-2.0 * a)) if a > 0 else depth
    slope = float(eq.dphi[0])
    slope_ok = slope <= 0 and abs(slope) <= slope_bound * (1 + tol) + tol
    if eq.phi_b < 0:
        slope_ok = slope_ok and slope < 0

    fine = np.linspace(0.0, 1.0, 4 * (eq.x.size - 1) + 1)
    dens = 0.5 * eq.lam**2 * eq.dphi_at(fine) ** 2 + 0.5 * alpha * eq.phi_at(fine) ** 2
    energy = float(simpson(dens, x=fine))
    return BoundsReport(lower, upper, violations, abs(slope), slope_bound, slope_ok, energy, energy / eq.lam, worst)


def quasineutral_norm(eq: Equilibrium, p: float = 1.0) -> float:
    """L^p norm over (0, 1) of the net charge density -Q'(phi)."""
    fine = np.linspace(0.0, 1.0, 2 * (eq.x.size - 1) + 1)
    rho = eq.well.q_prime(eq.phi_at(fine))
    return float(simpson(np.abs(rho) ** p, x=fine) ** (1.0 / p))


@dataclass
class QuasineutralityRow:
    lam: float
    norm: float


def quasineutrality_scan(well: WellPotential, lambdas, p: float = 1.0, grid_size: int | None = None):
    """Solve at each lambda and tabulate the charge-density norm; also returns whether it decreases as lambda shrinks."""
    rows = []
    for lam in lambdas:
        eq = solve_equilibrium(well, lam, grid_size)
        rows.append(QuasineutralityRow(float(lam), quasineutral_norm(eq, p)))
    order = sorted(rows, key=lambda r: -r.lam)
    norms = [r.norm for r in order]
    decreasing = all(b < a for a, b in zip(norms, norms[1:])) or all(n == 0 for n in norms)
    return rows, decreasing
