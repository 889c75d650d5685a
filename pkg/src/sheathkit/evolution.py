"""Semi-Lagrangian evolution of the fluctuation h coupled to the potential U, linearized and perturbative."""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .characteristics import (DynamicField, PotentialHistory, StationaryField, default_h_ode, exit_time_bound,
                              step_flow)
from .elliptic import PotentialField, SourceDensity, solve_linear_poisson, solve_nonlinear_poisson
from .equilibrium import Equilibrium, Region, classify, in_dplus_r
from .errors import EdgeMass, NoConvergence, PicardDiverged, SheathError, UnresolvedSupport
from .profiles import bump_unit_mass

__all__ = [
    "BumpPerturbation", "PhaseGrid", "PerturbationState", "PotentialHistory", "SourceKernel",
    "LinearStepper", "NonlinearStepper", "EvolutionConfig", "RunTrace", "TraceRecord",
    "init_state", "step_linear", "step_nonlinear", "run", "default_v_max", "default_dt",
]

log = logging.getLogger(__name__)

SUPPORT_THRESHOLD = 1e-8
EDGE_MASS_TOL = 1e-6
EDGE_ROWS = 2
TRACE_SCHEME = "verlet"


def default_v_max(eq: Equilibrium) -> float:
    return eq.profile.r_hi + 3.0 * math.sqrt(2.0 * abs(eq.phi_b))


def default_dt(eq: Equilibrium, r: float, h_ode: float | None = None) -> float:
    h_ode = h_ode or default_h_ode(eq.lam)
    return min(10.0 * h_ode, exit_time_bound(eq, r) / 50.0)


def _trapezoid_weights(nodes):
    w = np.zeros_like(nodes)
    d = np.diff(nodes)
    w[:-1] += 0.5 * d
    w[1:] += 0.5 * d
    return w


@dataclass(frozen=True)
class PhaseGrid:
    x: np.ndarray
    v: np.ndarray

    @classmethod
    def build(cls, eq: Equilibrium, nv: int = 257, v_max: float | None = None) -> "PhaseGrid":
        v_max = default_v_max(eq) if v_max is None else float(v_max)
        return cls(np.asarray(eq.x, dtype=float), np.linspace(-v_max, v_max, int(nv)))

    @property
    def shape(self):
        return self.x.size, self.v.size

    @property
    def v_max(self) -> float:
        return float(self.v[-1])

    @property
    def dx(self) -> float:
        return float(self.x[1] - self.x[0])

    @property
    def dv(self) -> float:
        return float(self.v[1] - self.v[0])

    def mesh(self):
        return np.meshgrid(self.x, self.v, indexing="ij")

    def weights(self):
        return np.outer(_trapezoid_weights(self.x), _trapezoid_weights(self.v))

    def density(self, h):
        """rho = v-trapezoid of h."""
        return h @ _trapezoid_weights(self.v)

    def inflow_mask(self):
        """Nodes carrying the homogeneous incoming datum."""
        X, V = self.mesh()
        return ((X == self.x[0]) & (V > 0)) | ((X == self.x[-1]) & (V < 0))

    def bilinear(self, xf, vf):
        """Cell indices and weights of bilinear interpolation; feet outside the box get a zero mask."""
        nx, nv = self.shape
        inside = (xf >= self.x[0]) & (xf <= self.x[-1]) & (vf >= self.v[0]) & (vf <= self.v[-1])
        px = (xf - self.x[0]) / self.dx
        pv = (vf - self.v[0]) / self.dv
        i = np.clip(np.floor(px).astype(np.int64), 0, nx - 2)
        j = np.clip(np.floor(pv).astype(np.int64), 0, nv - 2)
        a = np.clip(px - i, 0.0, 1.0)
        b = np.clip(pv - j, 0.0, 1.0)
        return i, j, a, b, inside

    def interpolate(self, h, xf, vf):
        i, j, a, b, inside = self.bilinear(xf, vf)
        out = ((1 - a) * (1 - b) * h[i, j] + a * (1 - b) * h[i + 1, j]
               + (1 - a) * b * h[i, j + 1] + a * b * h[i + 1, j + 1])
        return np.where(inside, out, 0.0)


@dataclass(frozen=True)
class BumpPerturbation:
    """amplitude * b((x - xc)/wx) * b((v - vc)/wv) with b(z) = exp(-1/(1 - z^2)) on |z| < 1."""

    amplitude: float
    x_center: float
    x_half_width: float
    v_center: float
    v_half_width: float

    def __call__(self, x, v):
        return self.amplitude * _unit_bump((x - self.x_center) / self.x_half_width) * \
            _unit_bump((v - self.v_center) / self.v_half_width)

    @property
    def mass(self) -> float:
        return abs(self.amplitude) * self.x_half_width * self.v_half_width * bump_unit_mass() ** 2

    def support_box(self):
        return (self.x_center - self.x_half_width, self.x_center + self.x_half_width,
                self.v_center - self.v_half_width, self.v_center + self.v_half_width)

    def scaled(self, factor: float) -> "BumpPerturbation":
        return BumpPerturbation(self.amplitude * factor, self.x_center, self.x_half_width, self.v_center,
                                self.v_half_width)


def _unit_bump(z):
    z = np.asarray(z, dtype=float)
    inside = np.abs(z) < 1
    out = np.zeros_like(z)
    out[inside] = np.exp(-1.0 / (1.0 - z[inside] ** 2))
    return out


class SourceKernel:
    """G(x, v) = 1_{D+} mu'(e)/e with e = sqrt(v^2 + 2 phi_inf(x)); d_v f_inf = v G."""

    def __init__(self, eq: Equilibrium):
        self.eq = eq

    def G(self, x, v):
        x = np.asarray(x, dtype=float)
        v = np.asarray(v, dtype=float)
        gap = v * v + 2.0 * self.eq.phi_at(x)
        inside = (v > 0) & (gap > 0)
        e = np.sqrt(np.where(inside, gap, 1.0))
        return np.where(inside, self.eq.profile.derivative(e) / e, 0.0)

    def dv_f(self, x, v):
        return np.asarray(v, dtype=float) * self.G(x, v)

    def l1_on_grid(self, grid: PhaseGrid, r: float = 0.0) -> float:
        X, V = grid.mesh()
        vals = np.abs(self.dv_f(X, V)) * in_dplus_r(self.eq, X, V, r)
        return float(np.sum(grid.weights() * vals))


class InitialDataMap:
    """Backward characteristic map to t = 0, composed step by step.

    The initial-data term of the mild formula is h0 evaluated exactly at the traced foot, so its support is
    carried without the smearing of repeated interpolation. Nodes whose characteristic left Q are dead.
    """

    def __init__(self, h0, grid: PhaseGrid):
        self.h0 = h0
        self.grid = grid
        self.fx, self.fv = grid.mesh()
        self.alive = np.ones(grid.shape, dtype=bool)
        self.trivial = not np.any(self.values())

    def values(self):
        h = np.where(self.alive, np.asarray(self.h0(self.fx, self.fv), dtype=float), 0.0)
        h[self.grid.inflow_mask()] = 0.0
        return h

    def advanced(self, xf, vf, keep) -> "InitialDataMap":
        g = self.grid
        ok = keep & (xf >= g.x[0]) & (xf <= g.x[-1]) & (vf >= g.v[0]) & (vf <= g.v[-1])
        new = object.__new__(InitialDataMap)
        new.h0 = self.h0
        new.grid = g
        new.trivial = self.trivial
        new.fx = np.where(ok, g.interpolate(self.fx, xf, vf), xf)
        new.fv = np.where(ok, g.interpolate(self.fv, xf, vf), vf)
        new.alive = ok & (g.interpolate(self.alive.astype(float), xf, vf) > 0.5)
        return new


@dataclass
class PerturbationState:
    """h = h0 carried along the characteristic map + g, the part generated by the source."""

    t: float
    grid: PhaseGrid
    h: np.ndarray
    U: PotentialField
    rho: SourceDensity
    picard_iters: int = 0
    picard_ratio: float = 0.0
    g: np.ndarray | None = None
    initial_map: InitialDataMap | None = None

    def __post_init__(self):
        if self.g is None:
            self.g = self.h if self.initial_map is None else self.h - self.initial_map.values()

    @property
    def is_zero(self) -> bool:
        """Zero now and for all later times (exact fixed point)."""
        trivial = self.initial_map is None or self.initial_map.trivial
        return trivial and not np.any(self.h) and not np.any(self.U.values)


@dataclass(frozen=True)
class AdmissibilityReport:
    l1: float
    linf: float
    second_moment: float
    weighted_sup: float
    support_in_dplus_r: bool

    @property
    def finite(self) -> bool:
        return all(np.isfinite([self.l1, self.linf, self.second_moment, self.weighted_sup]))


def _solve_potential(eq, rho: SourceDensity, nonlinear: bool, initial=None) -> PotentialField:
    if nonlinear:
        return solve_nonlinear_poisson(eq, rho, initial=initial)
    return solve_linear_poisson(eq, rho)


def _support_mask(h):
    peak = np.max(np.abs(h)) if h.size else 0.0
    if peak == 0:
        return np.zeros(h.shape, dtype=bool)
    return np.abs(h) > SUPPORT_THRESHOLD * peak


def init_state(h0, eq: Equilibrium, grid: PhaseGrid, r: float = 0.0, nonlinear: bool = False):
    """Sample h0 on the grid, check the admissibility diagnostics and solve for U(0)."""
    X, V = grid.mesh()
    h = np.asarray(h0(X, V), dtype=float) * np.ones(grid.shape)
    h[grid.inflow_mask()] = 0.0
    support = np.abs(h) > 0
    if np.any(support):
        ii = np.flatnonzero(support.any(axis=1))
        jj = np.flatnonzero(support.any(axis=0))
        if ii[-1] - ii[0] + 2 < 4 or jj[-1] - jj[0] + 2 < 4:
            raise UnresolvedSupport(
                f"initial support spans {ii[-1] - ii[0] + 2} x-cells and {jj[-1] - jj[0] + 2} v-cells; need 4")
    w = grid.weights()
    in_r = in_dplus_r(eq, X, V, r)
    report = AdmissibilityReport(
        l1=float(np.sum(w * np.abs(h))),
        linf=float(np.max(np.abs(h))),
        second_moment=float(np.sum(w * V**2 * np.abs(h))),
        weighted_sup=float(np.max(V**2 * np.abs(h))),
        support_in_dplus_r=bool(np.all(in_r[support])),
    )
    if not report.support_in_dplus_r:
        log.warning("initial support is not contained in D+_r (r = %g)", r)
    rho = SourceDensity.from_values(grid.x, grid.density(h))
    U = _solve_potential(eq, rho, nonlinear)
    imap = InitialDataMap(h0, grid)
    return PerturbationState(0.0, grid, h, U, rho, g=h - imap.values(), initial_map=imap), report


def _l1(grid, h):
    return float(np.sum(grid.weights() * np.abs(h)))


def _sup_slope(U: PotentialField) -> float:
    return float(max(np.max(np.abs(np.diff(U.values) / np.diff(U.x))), np.max(np.abs(U.first_derivative))))


class _PicardMonitor:
    def __init__(self, picard_max):
        self.picard_max = picard_max
        self.increments = []
        self.bad = 0

    def update(self, inc):
        prev = self.increments[-1] if self.increments else None
        self.increments.append(inc)
        if prev is not None and prev > 0 and inc / prev > 1.0:
            self.bad += 1
            if self.bad >= 3:
                raise PicardDiverged("Picard increments grew for 3 consecutive iterations", list(self.increments))
        else:
            self.bad = 0

    def ratio(self):
        inc = [d for d in self.increments if d > 0]
        if len(inc) < 2:
            return 0.0
        return float(max(b / a for a, b in zip(inc[:-1], inc[1:])))


def _backward_trace(field, grid, t1, xs, vs, dt, n_sub, scheme):
    """Trace from t1 back to t1 - dt; returns feet, midpoint states per substep and a still-inside flag."""
    delta = dt / n_sub
    x = xs.copy()
    v = vs.copy()
    a = field.accel(t1, x)
    alive = np.ones(x.shape, dtype=bool)
    mids = []
    for k in range(n_sub):
        tk = t1 - k * delta
        x1, v1, a = step_flow(field, tk, x, v, a, -delta, scheme)
        xm = 0.5 * (x + x1)
        vm = 0.5 * (v + v1)
        mids.append((tk - 0.5 * delta, xm, vm, alive & (xm > 0.0) & (xm < 1.0)))
        alive &= (x1 > 0.0) & (x1 < 1.0)
        x, v = x1, v1
    return x, v, alive, mids


class LinearStepper:
    """Cached backward traces of the stationary flow over one step, as sparse operators.

    h(t + dt) = A h(t) + G * (B0 dU(t) + B1 dU(t + dt)), with dU the nodal slope of U.
    """

    def __init__(self, eq: Equilibrium, grid: PhaseGrid, dt: float, h_ode: float | None = None,
                 scheme: str = TRACE_SCHEME):
        self.eq = eq
        self.grid = grid
        self.dt = dt
        h_ode = h_ode or default_h_ode(eq.lam)
        self.n_sub = max(1, math.ceil(dt / h_ode - 1e-9))
        nx, nv = grid.shape
        X, V = grid.mesh()
        xs, vs = X.ravel(), V.ravel()
        field = StationaryField(eq)
        xf, vf, alive, mids = _backward_trace(field, grid, 0.0, xs, vs, dt, self.n_sub, scheme)
        keep = alive & ~grid.inflow_mask().ravel()
        self.feet = (xf.reshape(grid.shape), vf.reshape(grid.shape), keep.reshape(grid.shape))
        self.A = self._interp_matrix(xf, vf, keep)
        self.G = SourceKernel(eq).G(X, V)
        delta = dt / self.n_sub
        rows0, cols0, vals0, rows1, cols1, vals1 = [], [], [], [], [], []
        node = np.arange(xs.size)
        # a characteristic that entered during the step still collects source after its entry time
        emitting = ~grid.inflow_mask().ravel()
        for s, xm, vm, inside in mids:
            theta = 1.0 - (-s) / dt  # weight of the new time level
            i, w = self._x_weights(xm)
            ok = inside & emitting
            base = delta * vm * ok
            for col, ww in ((i, 1 - w), (i + 1, w)):
                rows0.append(node)
                cols0.append(col)
                vals0.append(base * ww * (1 - theta))
                rows1.append(node)
                cols1.append(col)
                vals1.append(base * ww * theta)
        shape = (xs.size, nx)
        self.B0 = sparse.csr_matrix((np.concatenate(vals0), (np.concatenate(rows0), np.concatenate(cols0))), shape)
        self.B1 = sparse.csr_matrix((np.concatenate(vals1), (np.concatenate(rows1), np.concatenate(cols1))), shape)
        self._Gflat = self.G.ravel()

    def _x_weights(self, xm):
        x = self.grid.x
        i = np.clip(np.searchsorted(x, xm, side="right") - 1, 0, x.size - 2)
        w = np.clip((xm - x[i]) / (x[i + 1] - x[i]), 0.0, 1.0)
        return i, w

    def _interp_matrix(self, xf, vf, keep):
        nx, nv = self.grid.shape
        i, j, a, b, inside = self.grid.bilinear(xf, vf)
        ok = keep & inside
        rows = np.flatnonzero(ok)
        i, j, a, b = i[ok], j[ok], a[ok], b[ok]
        cols = [i * nv + j, (i + 1) * nv + j, i * nv + j + 1, (i + 1) * nv + j + 1]
        vals = [(1 - a) * (1 - b), a * (1 - b), (1 - a) * b, a * b]
        n = nx * nv
        return sparse.csr_matrix((np.concatenate(vals), (np.tile(rows, 4), np.concatenate(cols))), (n, n))

    def transport(self, h):
        return (self.A @ h.ravel()).reshape(h.shape)

    def source(self, dU_now, dU_next):
        return (self._Gflat * (self.B0 @ dU_now + self.B1 @ dU_next)).reshape(self.grid.shape)


def step_linear(state: PerturbationState, history: PotentialHistory | None, dt: float, picard_tol: float = 1e-10,
                picard_max: int = 50, stepper: LinearStepper | None = None, eq: Equilibrium | None = None):
    """One step of the linearized system; U(t + dt) and h(t + dt) made consistent by Picard iteration."""
    if stepper is None:
        if eq is None:
            raise ValueError("need an equilibrium or a prepared stepper")
        stepper = LinearStepper(eq, state.grid, dt)
    eq = stepper.eq
    grid = state.grid
    if state.is_zero:
        return _advance_zero(state, dt, history)
    xf, vf, keep = stepper.feet
    imap = state.initial_map.advanced(xf, vf, keep) if state.initial_map is not None else None
    carried = stepper.transport(state.g)
    base = carried + (imap.values() if imap is not None else 0.0)
    dU_now = state.U.first_derivative
    dU_next = dU_now
    monitor = _PicardMonitor(picard_max)
    h_prev = None
    for it in range(1, picard_max + 1):
        g_new = carried + stepper.source(dU_now, dU_next)
        h_new = base + stepper.source(dU_now, dU_next)
        rho = SourceDensity.from_values(grid.x, grid.density(h_new))
        U = solve_linear_poisson(eq, rho)
        dU_next = U.first_derivative
        if h_prev is not None:
            inc = _l1(grid, h_new - h_prev)
            monitor.update(inc)
            if inc <= picard_tol * _l1(grid, h_new):
                break
        h_prev = h_new
    else:
        raise NoConvergence("Picard iteration did not converge", picard_max, monitor.increments[-1],
                            monitor.increments)
    new = PerturbationState(state.t + dt, grid, h_new, U, rho, it, monitor.ratio(), g_new, imap)
    if history is not None:
        history.append(U.values, U.first_derivative)
    return new


def _advance_zero(state, dt, history):
    new = PerturbationState(state.t + dt, state.grid, np.zeros_like(state.h), state.U, state.rho, 1, 0.0,
                            np.zeros_like(state.h), state.initial_map)
    if history is not None:
        history.append(state.U.values, state.U.first_derivative)
    return new


class NonlinearStepper:
    """Backward traces under phi_inf + U(t), recomputed at every Picard iterate."""

    def __init__(self, eq: Equilibrium, grid: PhaseGrid, dt: float, h_ode: float | None = None,
                 scheme: str = TRACE_SCHEME):
        self.eq = eq
        self.grid = grid
        self.dt = dt
        h_ode = h_ode or default_h_ode(eq.lam)
        self.n_sub = max(1, math.ceil(dt / h_ode - 1e-9))
        self.scheme = scheme
        self.kernel = SourceKernel(eq)
        X, V = grid.mesh()
        self.xs = X.ravel()
        self.vs = V.ravel()
        self.keep = ~grid.inflow_mask().ravel()

    def advance(self, state: PerturbationState, history: PotentialHistory, t1: float):
        """(h, g, initial map) at t1 under the field currently stored in ``history``."""
        field = DynamicField(self.eq, history)
        xf, vf, alive, mids = _backward_trace(field, self.grid, t1, self.xs, self.vs, self.dt, self.n_sub,
                                              self.scheme)
        ok = alive & self.keep
        shape = self.grid.shape
        carried = np.where(ok, self.grid.interpolate(state.g, xf.reshape(shape), vf.reshape(shape)).ravel(), 0.0)
        delta = self.dt / self.n_sub
        src = np.zeros_like(self.xs)
        for s, xm, vm, inside in mids:
            use = inside & self.keep
            src += np.where(use, delta * history.slope_at(s, xm) * self.kernel.dv_f(xm, vm), 0.0)
        g = (carried + src).reshape(shape)
        imap = None
        h = g
        if state.initial_map is not None:
            imap = state.initial_map.advanced(xf.reshape(shape), vf.reshape(shape), ok.reshape(shape))
            h = g + imap.values()
        return h, g, imap


def step_nonlinear(state: PerturbationState, history: PotentialHistory, dt: float, picard_tol: float = 1e-10,
                   picard_max: int = 50, stepper: NonlinearStepper | None = None, eq: Equilibrium | None = None):
    """One step of the perturbative nonlinear system (history stores U; the field is phi_inf + U)."""
    if stepper is None:
        if eq is None:
            raise ValueError("need an equilibrium or a prepared stepper")
        stepper = NonlinearStepper(eq, state.grid, dt)
    eq = stepper.eq
    grid = state.grid
    if state.is_zero:
        return _advance_zero(state, dt, history)
    t1 = state.t + dt
    history.append(state.U.values, state.U.first_derivative)  # guess for U(t + dt)
    monitor = _PicardMonitor(picard_max)
    h_prev = None
    U = state.U
    try:
        for it in range(1, picard_max + 1):
            h_new, g_new, imap = stepper.advance(state, history, t1)
            rho = SourceDensity.from_values(grid.x, grid.density(h_new))
            U = solve_nonlinear_poisson(eq, rho, initial=U.values)
            history.replace_last(U.values, U.first_derivative)
            if h_prev is not None:
                inc = _l1(grid, h_new - h_prev)
                monitor.update(inc)
                if inc <= picard_tol * _l1(grid, h_new):
                    break
            h_prev = h_new
        else:
            raise NoConvergence("Picard iteration did not converge", picard_max, monitor.increments[-1],
                                monitor.increments)
    except SheathError:
        history.values.pop()
        history.slopes.pop()
        raise
    return PerturbationState(t1, grid, h_new, U, rho, it, monitor.ratio(), g_new, imap)


# --------------------------------------------------------------------------- runs


@dataclass(frozen=True)
class EvolutionConfig:
    mode: str = "linear"
    r: float = 0.0
    horizon: float = 1.0
    dt: float | None = None
    h_ode: float | None = None
    nv: int = 257
    v_max: float | None = None
    picard_tol: float = 1e-10
    picard_max: int = 50
    snapshot_times: tuple = ()
    scheme: str = TRACE_SCHEME

    def resolved(self, eq: Equilibrium) -> "EvolutionConfig":
        h_ode = self.h_ode or default_h_ode(eq.lam)
        dt = self.dt or default_dt(eq, self.r, h_ode)
        v_max = self.v_max if self.v_max is not None else default_v_max(eq)
        return EvolutionConfig(self.mode, self.r, self.horizon, dt, h_ode, self.nv, v_max, self.picard_tol,
                               self.picard_max, tuple(self.snapshot_times), self.scheme)


@dataclass(frozen=True)
class TraceRecord:
    t: float
    l1_total: float
    l1_dplus_r: float
    l1_dplus_r2: float
    l1_complement: float
    linf_dxU: float
    picard_iters: int
    picard_ratio: float
    support_box: tuple
    support_in_dplus_r2: bool
    edge_mass: float

    def row(self):
        return [self.t, self.l1_total, self.l1_dplus_r, self.l1_dplus_r2, self.l1_complement, self.linf_dxU,
                self.picard_iters]


TRACE_COLUMNS = ["t", "l1_total", "l1_dplus_r", "l1_dplus_r2", "l1_complement", "linf_dxU", "picard_iters"]


@dataclass
class RunTrace:
    config: EvolutionConfig
    records: list = field(default_factory=list)
    snapshots: dict = field(default_factory=dict)
    growth_rate: float = 0.0
    contraction_bound: float = 0.0
    admissibility: AdmissibilityReport | None = None
    error: BaseException | None = None
    final_state: PerturbationState | None = None

    def column(self, name):
        return np.array([getattr(rec, name) for rec in self.records], dtype=float)

    @property
    def times(self):
        return self.column("t")

    def growth_check(self, rtol: float = 1e-9):
        """A priori bounds on ||h||_1 and ||d_x U||_inf from the initial mass; (ok_h, ok_u) per record."""
        t = self.times
        h0 = self.records[0].l1_total
        cap = h0 * np.exp(self.growth_rate * t) * (1 + rtol) + 1e-300
        lam2 = self._lam2
        ok_h = self.column("l1_total") <= cap
        ok_u = self.column("linf_dxU") <= 2.0 / lam2 * cap
        return ok_h, ok_u

    def raise_if_failed(self):
        if self.error is not None:
            raise self.error

    def write(self, out_dir):
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "trace.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TRACE_COLUMNS)
            for rec in self.records:
                w.writerow([_fmt(v) for v in rec.row()])
        with open(os.path.join(out_dir, "support.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "x_min", "x_max", "v_min", "v_max", "in_dplus_r2", "edge_mass", "picard_ratio"])
            for rec in self.records:
                w.writerow([_fmt(rec.t), *(_fmt(b) for b in rec.support_box), int(rec.support_in_dplus_r2),
                            _fmt(rec.edge_mass), _fmt(rec.picard_ratio)])
        if self.snapshots:
            snap_dir = os.path.join(out_dir, "snapshots")
            os.makedirs(snap_dir, exist_ok=True)
            for t, (grid, h, U) in sorted(self.snapshots.items()):
                tag = f"{t:.6f}"
                with open(os.path.join(snap_dir, f"h_{tag}.csv"), "w", newline="") as fh:
                    w = csv.writer(fh)
                    w.writerow(["x", "v", "h"])
                    for i, xv in enumerate(grid.x):
                        for j, vv in enumerate(grid.v):
                            w.writerow([_fmt(xv), _fmt(vv), _fmt(h[i, j])])
                with open(os.path.join(snap_dir, f"U_{tag}.csv"), "w", newline="") as fh:
                    w = csv.writer(fh)
                    w.writerow(["x", "U", "dxU"])
                    for row in zip(U.x, U.values, U.first_derivative):
                        w.writerow([_fmt(v) for v in row])


def _fmt(v):
    return f"{v:.17g}" if isinstance(v, (float, np.floating)) else str(v)


class _Recorder:
    def __init__(self, eq, grid, r):
        X, V = grid.mesh()
        self.grid = grid
        self.w = grid.weights()
        self.m_r = in_dplus_r(eq, X, V, r)
        self.m_r2 = in_dplus_r(eq, X, V, 0.5 * r)
        self.m_c = classify(eq, X, V) != Region.DPLUS
        self.edge = np.zeros(grid.shape, dtype=bool)
        self.edge[:, :EDGE_ROWS] = True
        self.edge[:, -EDGE_ROWS:] = True

    def record(self, state: PerturbationState) -> TraceRecord:
        a = self.w * np.abs(state.h)
        total = float(np.sum(a))
        supp = _support_mask(state.h)
        if np.any(supp):
            ii = np.flatnonzero(supp.any(axis=1))
            jj = np.flatnonzero(supp.any(axis=0))
            box = (self.grid.x[ii[0]], self.grid.x[ii[-1]], self.grid.v[jj[0]], self.grid.v[jj[-1]])
        else:
            box = (math.nan,) * 4
        edge = float(np.sum(a[self.edge]))
        return TraceRecord(
            t=state.t,
            l1_total=total,
            l1_dplus_r=float(np.sum(a[self.m_r])),
            l1_dplus_r2=float(np.sum(a[self.m_r2])),
            l1_complement=float(np.sum(a[self.m_c])),
            linf_dxU=_sup_slope(state.U),
            picard_iters=state.picard_iters,
            picard_ratio=state.picard_ratio,
            support_box=tuple(float(b) for b in box),
            support_in_dplus_r2=bool(np.all(self.m_r2[supp])),
            edge_mass=edge / total if total > 0 else 0.0,
        )


def run(eq: Equilibrium, config: EvolutionConfig, h0, out_dir=None) -> RunTrace:
    """Iterate steps to the horizon; on a step error the partial trace is kept and ``error`` is set."""
    cfg = config.resolved(eq)
    if cfg.mode not in ("linear", "nonlinear"):
        raise ValueError("mode must be 'linear' or 'nonlinear'")
    nonlinear = cfg.mode == "nonlinear"
    grid = PhaseGrid.build(eq, cfg.nv, cfg.v_max)
    state, report = init_state(h0, eq, grid, cfg.r, nonlinear)
    norm = eq.profile.derivative_l1(0.0)
    trace = RunTrace(cfg, growth_rate=2.0 * norm / eq.lam**2, admissibility=report)
    trace._lam2 = eq.lam**2
    gamma = 4.0 * norm / eq.lam**2
    trace.contraction_bound = 2.0 * norm / (eq.lam**2 * gamma) if gamma > 0 else 0.0
    recorder = _Recorder(eq, grid, cfg.r)
    trace.records.append(recorder.record(state))
    pending = sorted(float(s) for s in cfg.snapshot_times)
    _maybe_snapshot(trace, state, pending, cfg.dt)
    steps = int(math.floor(cfg.horizon / cfg.dt + 1e-9))
    history = PotentialHistory(grid.x, 0.0, cfg.dt)
    history.append(state.U.values, state.U.first_derivative)
    try:
        if nonlinear:
            stepper = NonlinearStepper(eq, grid, cfg.dt, cfg.h_ode, cfg.scheme)
        else:
            stepper = LinearStepper(eq, grid, cfg.dt, cfg.h_ode, cfg.scheme)
        for k in range(steps):
            if nonlinear:
                state = step_nonlinear(state, history, cfg.dt, cfg.picard_tol, cfg.picard_max, stepper)
            else:
                state = step_linear(state, history, cfg.dt, cfg.picard_tol, cfg.picard_max, stepper)
            state.t = (k + 1) * cfg.dt
            rec = recorder.record(state)
            trace.records.append(rec)
            _maybe_snapshot(trace, state, pending, cfg.dt)
            if rec.edge_mass > EDGE_MASS_TOL:
                raise EdgeMass(f"relative mass {rec.edge_mass:.3g} at the velocity truncation at t = {state.t:.6g}")
    except SheathError as exc:
        log.error("run aborted at t = %.6g: %s", state.t, exc)
        trace.error = exc
    trace.final_state = state
    if out_dir is not None:
        trace.write(out_dir)
    return trace


def _maybe_snapshot(trace, state, pending, dt):
    while pending and pending[0] <= state.t + 0.5 * dt:
        s = pending.pop(0)
        if abs(s - state.t) <= 0.5 * dt:
            trace.snapshots[state.t] = (state.grid, state.h.copy(), state.U)
