"""Characteristic curves x' = v, v' = -d phi/dx, their exit times and the exit geometric condition."""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.integrate import quad
from scipy.special import roots_jacobi
from scipy.stats import qmc

from .equilibrium import Equilibrium, PhaseRegion, Region, classify, classify_point
from .errors import ConditionViolated, HistoryGap, HorizonExceeded, SeparatrixPoint

EVENT_TOL = 1e-12
GRAZING_TOL = 1e-8
JACOBI_NODES = 64

# symmetric compositions of velocity-Verlet stages (orders 4 and 6)
_CBRT2 = 2.0 ** (1.0 / 3.0)
_Y1 = 1.0 / (2.0 - _CBRT2)
_Y0 = -_CBRT2 / (2.0 - _CBRT2)
_Y4 = (_Y1, _Y0, _Y1)
# sixth order: the same triple jump applied to the fourth-order step
_P5 = 2.0 ** (1.0 / 5.0)
_Z1 = 1.0 / (2.0 - _P5)
_Z0 = -_P5 / (2.0 - _P5)
_Y6 = tuple(c * z for z in (_Z1, _Z0, _Z1) for c in _Y4)
SCHEMES = {"verlet": (1.0,), "yoshida4": _Y4, "yoshida6": _Y6}
DEFAULT_SCHEME = "yoshida6"


def default_h_ode(lam: float) -> float:
    return min(1e-3, lam / 10.0)


def thread_count() -> int:
    try:
        return max(1, int(os.environ.get("SHEATHKIT_THREADS", "1")))
    except ValueError:
        return 1


def parallel_map(func, chunks):
    """Ordered map over chunks, threaded up to SHEATHKIT_THREADS workers."""
    workers = thread_count()
    if workers == 1 or len(chunks) <= 1:
        return [func(c) for c in chunks]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(func, chunks))


# --------------------------------------------------------------------------- fields


class StationaryField:
    """Force field of the equilibrium potential (affinely extended outside [0, 1])."""

    stationary = True

    def __init__(self, eq: Equilibrium):
        self.eq = eq
        self.t_min = -math.inf
        self.t_max = math.inf

    def accel(self, t, x):
        return -self.eq.dphi_at(x)

    def potential(self, t, x):
        return self.eq.phi_at(x)


class AnalyticField:
    """Stationary field from a user potential, mainly for closed-form checks."""

    stationary = True

    def __init__(self, phi, dphi):
        self._phi = phi
        self._dphi = dphi
        self.t_min = -math.inf
        self.t_max = math.inf

    def accel(self, t, x):
        return -np.asarray(self._dphi(np.asarray(x, dtype=float)), dtype=float) * np.ones_like(x, dtype=float)

    def potential(self, t, x):
        return np.asarray(self._phi(np.asarray(x, dtype=float)), dtype=float) * np.ones_like(x, dtype=float)


class PotentialHistory:
    """Uniformly spaced snapshots of the perturbation potential U and its slope on the equilibrium grid."""

    def __init__(self, x, t0: float = 0.0, step: float = 1.0):
        self.x = np.asarray(x, dtype=float)
        self.t0 = float(t0)
        self.step = float(step)
        self.values: list[np.ndarray] = []
        self.slopes: list[np.ndarray] = []

    def append(self, values, slopes):
        self.values.append(np.asarray(values, dtype=float))
        self.slopes.append(np.asarray(slopes, dtype=float))

    def replace_last(self, values, slopes):
        self.values[-1] = np.asarray(values, dtype=float)
        self.slopes[-1] = np.asarray(slopes, dtype=float)

    @property
    def times(self):
        return self.t0 + self.step * np.arange(len(self.slopes))

    @property
    def t_min(self) -> float:
        return self.t0

    @property
    def t_max(self) -> float:
        return self.t0 + self.step * (len(self.slopes) - 1)

    def _bracket(self, t):
        if not self.slopes:
            raise HistoryGap("empty potential history")
        slack = 1e-9 * max(1.0, abs(t))
        if t < self.t_min - slack or t > self.t_max + slack:
            raise HistoryGap(f"time {t:.6g} outside stored history [{self.t_min:.6g}, {self.t_max:.6g}]")
        if len(self.slopes) == 1:
            return 0, 0, 0.0
        pos = (t - self.t0) / self.step
        k = int(min(max(math.floor(pos), 0), len(self.slopes) - 2))
        theta = min(max(pos - k, 0.0), 1.0)
        return k, k + 1, theta

    def _space(self, arr, x):
        return np.interp(x, self.x, arr)

    def slope_at(self, t, x):
        """d U / dx at time t, linear in time and space, constant beyond [0, 1]."""
        a, b, th = self._bracket(t)
        if th == 0.0:
            return self._space(self.slopes[a], x)
        return (1.0 - th) * self._space(self.slopes[a], x) + th * self._space(self.slopes[b], x)

    def value_at(self, t, x):
        a, b, th = self._bracket(t)
        va = self._extend(self.values[a], self.slopes[a], x)
        if th == 0.0:
            return va
        return (1.0 - th) * va + th * self._extend(self.values[b], self.slopes[b], x)

    def _extend(self, vals, slopes, x):
        x = np.asarray(x, dtype=float)
        out = np.interp(x, self.x, vals)
        out = np.where(x < 0, vals[0] + slopes[0] * x, out)
        return np.where(x > 1, vals[-1] + slopes[-1] * (x - 1.0), out)


class DynamicField:
    """Force field of phi_inf + U(t) with U read from a ``PotentialHistory``."""

    stationary = False

    def __init__(self, eq: Equilibrium, history: PotentialHistory):
        self.eq = eq
        self.history = history

    @property
    def t_min(self):
        return self.history.t_min

    @property
    def t_max(self):
        return self.history.t_max

    def _clamp(self, t):
        # high-order splittings have negative sub-stages that overshoot the stored range by a
        # fraction of a step; the requested interval itself is checked by _check_span
        return min(max(t, self.t_min), self.t_max)

    def accel(self, t, x):
        return -(self.eq.dphi_at(x) + self.history.slope_at(self._clamp(t), x))

    def perturbation_slope(self, t, x):
        return self.history.slope_at(self._clamp(t), x)

    def potential(self, t, x):
        return self.eq.phi_at(x) + self.history.value_at(t, x)


def _check_span(field, t0, t1):
    lo, hi = min(t0, t1), max(t0, t1)
    slack = 1e-9 * max(1.0, abs(lo), abs(hi))
    if lo < field.t_min - slack or hi > field.t_max + slack:
        raise HistoryGap(f"interval [{lo:.6g}, {hi:.6g}] not covered by field history [{field.t_min:.6g}, {field.t_max:.6g}]")


# --------------------------------------------------------------------------- integration


def _stage(field, t, x, v, a, dt):
    v_half = v + 0.5 * dt * a
    x_new = x + dt * v_half
    a_new = field.accel(t + dt, x_new)
    return x_new, v_half + 0.5 * dt * a_new, a_new


def step_flow(field, t, x, v, a, dt, scheme=DEFAULT_SCHEME):
    """One step of size dt (either sign); returns (x, v, a) at t + dt."""
    tt = t
    for c in SCHEMES[scheme]:
        x, v, a = _stage(field, tt, x, v, a, c * dt)
        tt += c * dt
    return x, v, a


def integrate_flow(field, t: float, x, v, s: float, h: float | None = None, scheme: str = DEFAULT_SCHEME):
    """State at time s of the characteristics through (x, v) at time t."""
    x = np.array(x, dtype=float, copy=True)
    v = np.array(v, dtype=float, copy=True)
    if s == t:
        return x, v
    if not getattr(field, "stationary", True):
        _check_span(field, t, s)
    h = h or _field_h(field)
    n = max(1, math.ceil(abs(s - t) / h - 1e-12))
    dt = (s - t) / n
    a = field.accel(t, x)
    tt = t
    for k in range(n):
        x, v, a = step_flow(field, tt, x, v, a, dt, scheme)
        tt = t + (k + 1) * dt
    return x, v


def _field_h(field):
    eq = getattr(field, "eq", None)
    return default_h_ode(eq.lam) if eq is not None else 1e-3


def energy(eq: Equilibrium, x, v):
    return 0.5 * np.asarray(v) ** 2 + eq.phi_at(x)


# --------------------------------------------------------------------------- exit records


@dataclass
class ExitRecord:
    t: np.ndarray
    t_inc: np.ndarray
    t_out: np.ndarray
    x_inc: np.ndarray
    v_inc: np.ndarray
    x_out: np.ndarray
    v_out: np.ndarray
    grazing: np.ndarray
    clamped: np.ndarray

    def scalar(self):
        return ExitRecord(*(np.asarray(getattr(self, f)).reshape(-1)[0] for f in self.__dataclass_fields__))


def _hermite(x0, v0, x1, v1, h, tau):
    s = tau / h
    s2 = s * s
    s3 = s2 * s
    h00 = 2 * s3 - 3 * s2 + 1
    h10 = s3 - 2 * s2 + s
    h01 = -2 * s3 + 3 * s2
    h11 = s3 - s2
    pos = h00 * x0 + h10 * h * v0 + h01 * x1 + h11 * h * v1
    d00 = (6 * s2 - 6 * s) / h
    d10 = 3 * s2 - 4 * s + 1
    d01 = (-6 * s2 + 6 * s) / h
    d11 = 3 * s2 - 2 * s
    vel = d00 * x0 + d10 * v0 + d01 * x1 + d11 * v1
    return pos, vel


def _locate_crossing(x0, v0, x1, v1, dt, wall):
    """Bisection on the cubic Hermite interpolant for the first time it reaches ``wall``."""
    h = abs(dt)
    lo = np.zeros_like(x0)
    hi = np.full_like(x0, h)
    sign0 = np.sign(x0 - wall)
    iters = max(1, math.ceil(math.log2(max(h, 1e-300) / EVENT_TOL)) + 2)
    vs0 = v0 * np.sign(dt)
    vs1 = v1 * np.sign(dt)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        pos, _ = _hermite(x0, vs0, x1, vs1, h, mid)
        same = np.sign(pos - wall) == sign0
        lo = np.where(same, mid, lo)
        hi = np.where(same, hi, mid)
    tau = 0.5 * (lo + hi)
    _, vel = _hermite(x0, vs0, x1, vs1, h, tau)
    return tau, vel * np.sign(dt)


def _sweep(field, t, x, v, direction, limit, h, scheme):
    """Integrate in one time direction until every point leaves (0, 1) or time ``limit`` is reached.

    Returns crossing times, crossing states and a mask of points that hit ``limit``.
    """
    n = x.size
    t_hit = np.full(n, np.nan)
    x_hit = np.full(n, np.nan)
    v_hit = np.full(n, np.nan)
    stopped = np.zeros(n, dtype=bool)

    # points already sitting on the exit part of the boundary
    if direction > 0:
        done = ((x >= 1.0) & (v >= 0)) | ((x <= 0.0) & (v < 0))
    else:
        done = ((x <= 0.0) & (v > 0)) | ((x >= 1.0) & (v <= 0))
    t_hit[done] = t
    x_hit[done] = x[done]
    v_hit[done] = v[done]

    live = np.flatnonzero(~done)
    xs, vs = x[live].copy(), v[live].copy()
    tt = t
    dt = direction * h
    a = field.accel(tt, xs) if live.size else xs
    while live.size:
        remaining = (limit - tt) * direction
        if remaining <= EVENT_TOL:
            stopped[live] = True
            t_hit[live] = limit
            x_hit[live] = xs
            v_hit[live] = vs
            break
        step = direction * min(h, remaining)
        xn, vn, an = step_flow(field, tt, xs, vs, a, step, scheme)
        out_lo = xn <= 0.0
        out_hi = xn >= 1.0
        crossed = out_lo | out_hi
        if np.any(crossed):
            idx = np.flatnonzero(crossed)
            wall = np.where(out_hi[idx], 1.0, 0.0)
            tau, vel = _locate_crossing(xs[idx], vs[idx], xn[idx], vn[idx], step, wall)
            g = live[idx]
            t_hit[g] = tt + direction * tau
            x_hit[g] = wall
            v_hit[g] = vel
            keep = ~crossed
            live, xs, vs, a = live[keep], xn[keep], vn[keep], an[keep]
        else:
            xs, vs, a = xn, vn, an
        tt = tt + step
    return t_hit, x_hit, v_hit, stopped


def exit_records(field, t: float, x, v, horizon: float | None = None, h: float | None = None,
                 scheme: str = DEFAULT_SCHEME, t_floor: float | None = None) -> ExitRecord:
    """Vectorized incoming and outgoing exit data by event detection along integrated characteristics."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    v = np.atleast_1d(np.asarray(v, dtype=float))
    x, v = np.broadcast_arrays(x, v)
    x, v = x.copy(), v.copy()
    h = h or _field_h(field)
    stationary = getattr(field, "stationary", True)
    if horizon is None:
        horizon = _default_horizon(field) if stationary else field.t_max - t
    if t_floor is None:
        t_floor = -math.inf if stationary else max(0.0, field.t_min)
    t_end = t + horizon

    t_out, x_out, v_out, stuck = _sweep(field, t, x, v, +1, t_end, h, scheme)
    if np.any(stuck):
        raise HorizonExceeded(f"{int(stuck.sum())} characteristics did not exit before t = {t_end:.6g}")
    back_limit = t_floor if np.isfinite(t_floor) else t - horizon
    t_inc, x_inc, v_inc, clamped = _sweep(field, t, x, v, -1, back_limit, h, scheme)
    if np.any(clamped) and not np.isfinite(t_floor):
        raise HorizonExceeded(f"{int(clamped.sum())} characteristics did not enter within {horizon:.6g}")
    grazing = (np.abs(v_out) < GRAZING_TOL) | ((np.abs(v_inc) < GRAZING_TOL) & ~clamped)
    return ExitRecord(np.full(x.shape, float(t)), t_inc, t_out, x_inc, v_inc, x_out, v_out, grazing, clamped)


def exit_record(field, t: float, x: float, v: float, **kw) -> ExitRecord:
    return exit_records(field, t, [x], [v], **kw).scalar()


def _default_horizon(field) -> float:
    eq = getattr(field, "eq", None)
    if eq is None or eq.phi_b == 0:
        return 1e3
    return 4.0 * math.sqrt(-2.0 * eq.phi_b) / eq.edge_slope + 10.0


# --------------------------------------------------------------------------- explicit quadrature


def _jacobi_rule():
    nodes, weights = roots_jacobi(JACOBI_NODES, 0.0, -0.5)
    return nodes, weights


_JACOBI = _jacobi_rule()


def _quad(f, a, b):
    if b <= a:
        return 0.0
    val, err = quad(f, a, b, epsabs=1e-13, epsrel=1e-12, limit=400)
    return val


def transit_time(eq: Equilibrium, level: float, pivot: float, a: float, b: float) -> float:
    """int_a^b du / sqrt(2 (level - phi(u))) with phi(pivot) = level and pivot <= a.

    The substitution u = pivot + w^2 removes the inverse square-root behaviour near the pivot.
    """
    if b <= a:
        return 0.0

    def f(w):
        u = pivot + w * w
        gap = 2.0 * (level - eq.phi_at(u))
        return 2.0 * w / math.sqrt(gap) if gap > 0 else 0.0

    return _quad(f, math.sqrt(max(a - pivot, 0.0)), math.sqrt(b - pivot))


def turning_time(eq: Equilibrium, x0: float, b: float) -> float:
    """int_{x0}^b du / sqrt(2 (phi(x0) - phi(u))), singular at the turning point x0.

    Gauss-Jacobi with weight (u - x0)^(-1/2) on the first spline cell, where phi is a
    polynomial, then regular quadrature on the rest.
    """
    if b <= x0:
        return 0.0
    level = float(eq.phi_at(x0))
    cell = eq.curve.h
    knot = eq.curve.next_break(x0)
    if knot - x0 < 1e-3 * cell and knot < 1.0:
        knot = eq.curve.next_break(knot)
    split = min(knot, b)
    ell = split - x0
    sigma, weights = _JACOBI
    u = x0 + 0.5 * ell * (1.0 + sigma)
    gap = 2.0 * (level - eq.phi_at(u))
    # limit at the turning point when the cell is shorter than roundoff can resolve
    near = 1.0 / math.sqrt(2.0 * abs(float(eq.dphi_at(x0))))
    with np.errstate(invalid="ignore", divide="ignore"):
        smooth = np.where(gap > 0, np.sqrt(u - x0) / np.sqrt(np.where(gap > 0, gap, 1.0)), near)
    head = math.sqrt(0.5 * ell) * float(np.dot(weights, smooth))
    return head + transit_time(eq, level, x0, split, b)


def exit_time_quadrature(eq: Equilibrium, x: float, v: float) -> tuple[float, float]:
    """(t_inc, t_out) at time 0 from the explicit integral formulas of the stationary flow."""
    region = classify_point(eq, x, v).kind
    if region == Region.SEPARATRIX:
        raise SeparatrixPoint(f"({x}, {v}) lies on the separatrix")
    phi_x = float(eq.phi_at(x))
    level = 0.5 * v * v + phi_x
    if region in (Region.DPLUS, Region.DMINUS):
        # virtual pivot on the affine extension left of x = 0; only useful close to the separatrix
        pivot = level / float(eq.dphi[0]) if eq.dphi[0] != 0 else -math.inf
        if pivot < -1.0:
            left = _quad(lambda u: 1.0 / math.sqrt(2.0 * (level - float(eq.phi_at(u)))), 0.0, x)
            right = _quad(lambda u: 1.0 / math.sqrt(2.0 * (level - float(eq.phi_at(u)))), x, 1.0)
        else:
            left = transit_time(eq, level, pivot, 0.0, x)
            right = transit_time(eq, level, pivot, x, 1.0)
        if region == Region.DPLUS:
            return -left, right
        return -right, left
    x0 = eq.inverse(level)
    level0 = float(eq.phi_at(x0))
    to_wall = transit_time(eq, level0, x0, x, 1.0)
    loop = turning_time(eq, x0, x) + turning_time(eq, x0, 1.0)
    if v > 0:
        return -loop, to_wall
    if v < 0:
        return -to_wall, loop
    return -to_wall, to_wall


# --------------------------------------------------------------------------- region exit-time bounds


@dataclass(frozen=True)
class ExitBounds:
    t_minus: float
    t_plus: float
    region: PhaseRegion
    turning_point: float | None = None


def exit_bounds(eq: Equilibrium, x: float, v: float) -> ExitBounds:
    """Region-wise bounds on |t_inc| and |t_out| driven only by the equilibrium potential.

    They rely on |d phi_inf / dx| growing towards the wall, so a non-concave equilibrium is refused.
    """
    if not eq.concave_ok:
        raise ConditionViolated("exit-time bounds need a concave equilibrium potential")
    region = classify_point(eq, x, v)
    if region.kind == Region.SEPARATRIX:
        raise SeparatrixPoint(f"({x}, {v}) lies on the separatrix")
    phi_x = float(eq.phi_at(x))
    edge = eq.edge_slope
    depth = math.sqrt(-2.0 * eq.phi_b)
    near = math.sqrt(max(-2.0 * phi_x, 0.0))
    if region.kind == Region.DPLUS:
        return ExitBounds(near / edge, (depth - near) / edge, region)
    if region.kind == Region.DMINUS:
        return ExitBounds((depth - near) / edge, near / edge, region)
    x0 = eq.inverse(0.5 * v * v + phi_x)
    phi0 = float(eq.phi_at(x0))
    slope0 = abs(float(eq.dphi_at(x0)))
    loop = (math.sqrt(max(2.0 * (phi0 - phi_x), 0.0)) + math.sqrt(max(2.0 * (phi0 - eq.phi_b), 0.0))) / slope0
    direct = math.sqrt(max(2.0 * (phi_x - eq.phi_b), 0.0)) / abs(float(eq.dphi_at(x)))
    if v > 0:
        return ExitBounds(loop, direct, region, x0)
    if v < 0:
        return ExitBounds(direct, loop, region, x0)
    return ExitBounds(direct, direct, region, x0)


def uniform_dplus_bound(eq: Equilibrium) -> float:
    return math.sqrt(-2.0 * eq.phi_b) / eq.edge_slope


def exit_time_bound(eq: Equilibrium, r: float) -> float:
    """Residence-time bound T_r: 1/r on D+_r, the uniform D+ bound when r = 0."""
    return 1.0 / r if r > 0 else uniform_dplus_bound(eq)


def complement_extinction_bound(eq: Equilibrium, x, v) -> float:
    """Largest region bound on t_out over the given points of Q minus D+."""
    worst = 0.0
    for xi, vi in zip(np.ravel(x), np.ravel(v)):
        kind = classify_point(eq, xi, vi).kind
        if kind in (Region.DPLUS, Region.SEPARATRIX):
            continue
        worst = max(worst, exit_bounds(eq, xi, vi).t_plus)
    return worst


# --------------------------------------------------------------------------- exit geometric condition


@dataclass
class EgcReport:
    samples: int
    sup_exit: float
    worst_sample: tuple
    fraction_out: float
    window: float
    passed: bool
    hypothesis_lhs: float = float("nan")
    hypothesis_rhs: float = float("nan")
    hypothesis_ok: bool | None = None
    min_velocity: float = float("nan")
    velocity_ok: bool | None = None
    grazing: int = 0


def sample_dplus_r(eq: Equilibrium, r: float, J, count: int, seed: int = 0, v_span: float | None = None):
    """Low-discrepancy (s, x, v) samples of J x D+_r."""
    sampler = qmc.Halton(d=3, scramble=True, seed=seed)
    u = sampler.random(count)
    s = J[0] + (J[1] - J[0]) * u[:, 0]
    x = 1e-9 + (1.0 - 2e-9) * u[:, 1]
    floor = np.sqrt(r * r - 2.0 * eq.phi_at(x))
    span = v_span if v_span is not None else 2.0 * (r + math.sqrt(-2.0 * eq.phi_b))
    v = floor * (1.0 + 1e-12) + 1e-12 + span * u[:, 2]
    return s, x, v


def perturbation_energy(history: PotentialHistory, s: float, window: float, nodes: int = 64) -> float:
    """int_s^{s+window} ||dU/dx(t)||_inf^2 / 2 dt by the trapezoid rule on the stored snapshots."""
    ts = np.linspace(s, s + window, nodes)
    vals = np.array([np.max(np.abs(history.slope_at(t, history.x))) ** 2 / 2.0 for t in ts])
    return float(np.trapezoid(vals, ts)) if hasattr(np, "trapezoid") else float(np.trapz(vals, ts))


def verify_egc(field, r: float, J, T: float, samples: int = 1000, seed: int = 0, h: float | None = None,
               scheme: str = DEFAULT_SCHEME, v_span: float | None = None) -> EgcReport:
    """Sample J x D+_r and check every characteristic leaves through x = 1 within time T."""
    if not r > 0:
        raise ValueError("r must be positive")
    eq = field.eq
    s, x, v = sample_dplus_r(eq, r, J, samples, seed, v_span)
    order = np.argsort(s, kind="stable")

    def run(chunk):
        out = []
        for i in chunk:
            out.append(_egc_one(field, float(s[i]), float(x[i]), float(v[i]), T, h, scheme))
        return out

    if field.stationary:
        rec = exit_records(field, 0.0, x, v, h=h, scheme=scheme)
        elapsed = rec.t_out - rec.t
        out_ok = (rec.x_out == 1.0) & (rec.v_out > 0)
        min_v = np.full(samples, np.nan)
        grazing = rec.grazing
    else:
        workers = thread_count()
        chunks = [list(c) for c in np.array_split(order, max(1, workers * 4)) if len(c)]
        results = [item for part in parallel_map(run, chunks) for item in part]
        back = [None] * samples
        for i, res in zip([i for c in chunks for i in c], results):
            back[i] = res
        elapsed = np.array([b[0] for b in back])
        out_ok = np.array([b[1] for b in back])
        min_v = np.array([b[2] for b in back])
        grazing = np.zeros(samples, dtype=bool)

    use = ~grazing
    k = int(np.nanargmax(np.where(use, elapsed, -np.inf)))
    sup_exit = float(elapsed[k])
    frac = float(np.mean(out_ok[use])) if np.any(use) else 1.0
    passed = bool(sup_exit <= T * (1 + 1e-12) and frac == 1.0)
    report = EgcReport(samples, sup_exit, (float(s[k]), float(x[k]), float(v[k])), frac, T, passed,
                       grazing=int(grazing.sum()))
    if not field.stationary:
        window = 2.0 / r
        lhs = max(perturbation_energy(field.history, float(si), window) for si in np.linspace(J[0], J[1], 9))
        rhs = r * r * (math.exp(-window) - 0.25) - window * abs(eq.phi_b)
        report.hypothesis_lhs = lhs
        report.hypothesis_rhs = rhs
        report.hypothesis_ok = lhs < rhs
        report.min_velocity = float(np.nanmin(min_v))
        report.velocity_ok = bool(report.min_velocity > r / 2.0)
        if report.hypothesis_ok:
            report.passed = report.passed and report.velocity_ok
    return report


def _egc_one(field, s, x, v, T, h, scheme):
    """Integrate one characteristic of a dynamic field from time s until exit; track min velocity."""
    h = h or _field_h(field)
    t_end = min(field.t_max, s + T * (1 + 1e-9) + h)
    xs, vs = np.array([x]), np.array([v])
    a = field.accel(s, xs)
    tt = s
    vmin = v
    while tt < t_end - 1e-15:
        step = min(h, t_end - tt)
        xn, vn, an = step_flow(field, tt, xs, vs, a, step, scheme)
        if xn[0] <= 0.0 or xn[0] >= 1.0:
            wall = np.array([1.0 if xn[0] >= 1.0 else 0.0])
            tau, vel = _locate_crossing(xs, vs, xn, vn, step, wall)
            vmin = min(vmin, float(vel[0]))
            return tt + float(tau[0]) - s, bool(wall[0] == 1.0 and vel[0] > 0), vmin
        xs, vs, a = xn, vn, an
        vmin = min(vmin, float(vs[0]))
        tt += step
    return math.inf, False, vmin


# --------------------------------------------------------------------------- export


def phase_portrait(eq: Equilibrium, nx: int = 41, nv: int = 41, v_max: float | None = None):
    """Rows (x, v, region, t_inc, t_out) on a grid; exit times are NaN on the separatrix."""
    if v_max is None:
        v_max = eq.profile.r_hi + 3.0 * math.sqrt(2.0 * abs(eq.phi_b))
    xs = np.linspace(0.0, 1.0, nx + 2)[1:-1]
    vs = np.linspace(-v_max, v_max, nv)
    rows = []
    for xi in xs:
        for vi in vs:
            kind = classify_point(eq, xi, vi).kind
            if kind == Region.SEPARATRIX:
                rows.append((xi, vi, kind.name, math.nan, math.nan))
                continue
            ti, to = exit_time_quadrature(eq, xi, vi)
            rows.append((xi, vi, kind.name, ti, to))
    return rows


def write_phase_portrait(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "v", "region", "t_inc", "t_out"])
        for x, v, reg, ti, to in rows:
            w.writerow([f"{x:.17g}", f"{v:.17g}", reg, f"{ti:.17g}", f"{to:.17g}"])


__all__ = [
    "AnalyticField", "DynamicField", "EgcReport", "ExitBounds", "ExitRecord", "PotentialHistory",
    "StationaryField", "classify", "exit_bounds", "exit_record", "exit_records", "exit_time_quadrature",
    "integrate_flow", "verify_egc",
]
