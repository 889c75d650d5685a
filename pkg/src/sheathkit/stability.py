"""Constants of the stability theory, the delayed Gronwall inequality and decay-envelope fits."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.optimize import brentq

from .characteristics import exit_time_bound
from .equilibrium import Equilibrium
from .errors import ConditionViolated

NO_DELAY = math.inf


def solve_kappa(alpha: float, T: float) -> float:
    """Unique kappa > 0 with kappa = alpha (exp(kappa T) - 1), defined when alpha T < 1.

    Returns ``NO_DELAY`` (infinity) for alpha = 0.
    """
    if alpha < 0 or not T > 0:
        raise ValueError("need alpha >= 0 and T > 0")
    if alpha * T >= 1.0:
        raise ConditionViolated(f"alpha*T = {alpha * T:.6g} must be < 1")
    if alpha == 0:
        return NO_DELAY

    def gap(k):
        return alpha * math.expm1(k * T) - k

    hi = 1.0 / T
    while gap(hi) <= 0:
        hi *= 2.0
    lo = hi
    while gap(lo) >= 0 and lo > 1e-300:
        lo *= 0.5
    k = brentq(gap, lo, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=500)
    # one Newton polish step
    slope = alpha * T * math.exp(k * T) - 1.0
    if slope != 0:
        k_new = k - gap(k) / slope
        if lo <= k_new <= hi and abs(gap(k_new)) <= abs(gap(k)):
            k = k_new
    return k


def kappa_residual(kappa: float, alpha: float, T: float) -> float:
    return abs(kappa - alpha * math.expm1(kappa * T))


# --------------------------------------------------------------------------- delayed Gronwall


@dataclass
class GronwallSeries:
    t: np.ndarray
    z: np.ndarray
    envelope: np.ndarray
    kappa: float
    C: float
    bound_ok: bool
    slack: float


def delayed_gronwall_simulate(y0, alpha: float, T: float, horizon: float, dt: float,
                              slack_factor: float = 10.0) -> GronwallSeries:
    """Integrate the equality case z(t) = alpha int_{t-T}^t z for t > T from the segment y0 on [0, T].

    Trapezoid stepping; the result is compared with C exp(-kappa t), C = sup_[0,T] |z| exp(kappa t).
    """
    kappa = solve_kappa(alpha, T)
    m = max(1, round(T / dt))
    dt = T / m
    n = max(m, math.ceil(horizon / dt))
    t = dt * np.arange(n + 1)
    z = np.zeros(n + 1)
    z[: m + 1] = np.asarray([y0(tk) for tk in t[: m + 1]], dtype=float)
    inner = float(np.sum(z[1:m]))  # z_{k-m+1} .. z_{k-1} for k = m + 1
    denom = 1.0 - 0.5 * alpha * dt
    for k in range(m + 1, n + 1):
        if m > 1:
            inner += z[k - 1] - z[k - m]
        z[k] = alpha * dt * (0.5 * z[k - m] + inner) / denom
    if math.isinf(kappa):
        C = float(np.max(np.abs(z[: m + 1])))
        envelope = np.where(t <= T, C, 0.0)
    else:
        C = float(np.max(np.abs(z[: m + 1]) * np.exp(kappa * t[: m + 1])))
        envelope = C * np.exp(-kappa * t)
    slack = slack_factor * dt * (1.0 + (0.0 if math.isinf(kappa) else kappa))
    bound_ok = bool(np.all(np.abs(z) <= envelope * (1.0 + slack) + 1e-300))
    return GronwallSeries(t, z, envelope, kappa, C, bound_ok, slack)


# --------------------------------------------------------------------------- conditions


@dataclass(frozen=True)
class LinearCondition:
    margin: float
    passed: bool
    T_r: float
    dvf_norm: float
    alpha_rate: float


def linear_condition(eq: Equilibrium, r: float) -> LinearCondition:
    """Margin 1 - 2 ||d_v f||_{L1(D+_r)} T_r / lambda^2 of the linear stability condition."""
    if r < 0:
        raise ValueError("r must be nonnegative")
    norm = eq.profile.derivative_l1(r)
    T = exit_time_bound(eq, r)
    rate = 2.0 * norm / eq.lam**2
    margin = 1.0 - rate * T
    return LinearCondition(margin, margin > 0, T, norm, rate)


def delta_threshold(r: float, phi_b: float) -> float:
    """delta_r = r^2 (exp(-2/r) - 1/4) - (2/r) |phi_b|."""
    window = 2.0 / r
    return r * r * (math.exp(-window) - 0.25) - window * abs(phi_b)


def critical_margin(phi_b: float, tol: float = 1e-13) -> float:
    """The unique r > 0 where delta_r changes sign."""
    lo, hi = 1e-3, 1.0
    while delta_threshold(hi, phi_b) <= 0:
        hi *= 2.0
    while delta_threshold(lo, phi_b) >= 0 and lo > 1e-12:
        lo *= 0.5
    return brentq(lambda r: delta_threshold(r, phi_b), lo, hi, xtol=tol, rtol=1e-15)


@dataclass(frozen=True)
class NonlinearThresholds:
    r: float
    T_tilde: float
    dvf_norm: float
    delta_r: float
    r_star: float
    eps0: float
    eps0_quadratic_lambda: float
    mickey_lhs: float
    mickey_lhs_8: float
    window_loose: float
    window_gronwall: float
    kappa: float
    no_threshold: bool
    passed: bool

    def binding(self) -> str:
        """Name of the tightest smallness requirement."""
        cands = {"mickey": self.mickey_lhs, "window": self.window_gronwall}
        return max(cands, key=cands.get)


def nonlinear_thresholds(eq: Equilibrium, r: float) -> NonlinearThresholds:
    if not r > 0:
        raise ValueError("r must be positive")
    lam2 = eq.lam**2
    T = 2.0 / r
    norm = eq.profile.derivative_l1(r)
    delta = delta_threshold(r, eq.phi_b)
    r_star = critical_margin(eq.phi_b)
    a = norm * T / lam2
    with np.errstate(over="ignore"):
        mickey = 4.0 * a * math.expm1(min(12.0 * a, 700.0))
        mickey8 = 4.0 * a * math.expm1(min(8.0 * a, 700.0))
    window_loose = a / 2.0
    window_gronwall = 2.0 * a
    t_star = 2.0 * T
    growth = math.exp(min(4.0 * norm * (t_star + T) / lam2, 700.0))
    if delta > 0:
        eps0 = math.sqrt(delta * lam2 * lam2 / (2.0 * growth * T))
        eps0_q = math.sqrt(delta * lam2 / (2.0 * growth * T))
    else:
        eps0 = eps0_q = 0.0
    kappa = solve_kappa(2.0 * norm / lam2, T) if window_gronwall < 1 else float("nan")
    passed = bool(r > r_star and delta > 0 and mickey < 1 and window_gronwall < 1 and window_loose < 1)
    return NonlinearThresholds(r, T, norm, delta, r_star, eps0, eps0_q, mickey, mickey8, window_loose,
                               window_gronwall, kappa, delta <= 0, passed)


# --------------------------------------------------------------------------- decay fits


@dataclass(frozen=True)
class DecayFit:
    C: float
    fitted_rate: float
    envelope_ok: bool
    extinct: bool
    worst_ratio: float


def fit_decay(times, values, kappa: float, window_start: float, slack: float = 0.05) -> DecayFit:
    """Envelope C exp(-kappa t) with C fixed on [0, window_start]; tail rate by least squares."""
    t = np.asarray(times, dtype=float)
    y = np.abs(np.asarray(values, dtype=float))
    head = t <= window_start * (1 + 1e-12)
    zero_hit = np.flatnonzero(y == 0.0)
    extinct = bool(zero_hit.size and t[zero_hit[0]] <= window_start and np.all(y[zero_hit[0]:] == 0.0))
    if not np.any(y > 0):
        return DecayFit(0.0, float("nan"), True, True, 0.0)
    if math.isinf(kappa):
        C = float(np.max(y[head]))
        late = ~head
        ok = bool(np.all(y[late] == 0.0))
        return DecayFit(C, float("nan"), ok, extinct, 0.0 if ok else math.inf)
    C = float(np.max(y[head] * np.exp(kappa * t[head])))
    env = C * np.exp(-kappa * t)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(env > 0, y / env, np.where(y > 0, math.inf, 0.0))
    worst = float(np.max(ratio))
    ok = worst <= 1.0 + slack
    tail = (~head) & (y > 0)
    rate = float("nan")
    if np.count_nonzero(tail) >= 2:
        slope = np.polyfit(t[tail], np.log(y[tail]), 1)[0]
        rate = float(-slope)
    return DecayFit(C, rate, bool(ok), extinct, worst)


def closure_residuals(times, values, alpha_rate: float, window: float):
    """y(t) - alpha int_{t-window}^t y for t >= window, from a recorded trace (trapezoid)."""
    t = np.asarray(times, dtype=float)
    y = np.asarray(values, dtype=float)
    cum = np.concatenate([[0.0], np.cumsum(0.5 * np.diff(t) * (y[1:] + y[:-1]))])
    out_t, out_r = [], []
    for k in range(t.size):
        if t[k] < window - 1e-12:
            continue
        start = t[k] - window
        integral = cum[k] - np.interp(start, t, cum)
        out_t.append(t[k])
        out_r.append(y[k] - alpha_rate * integral)
    return np.array(out_t), np.array(out_r)


# --------------------------------------------------------------------------- report


@dataclass(frozen=True)
class StabilityReport:
    lam: float
    r: float
    T_r: float
    T_tilde_r: float
    alpha_rate: float
    kappa: float
    C: float
    delta_r: float
    r_star: float
    linear_condition_margin: float
    mickey_lhs: float
    mickey_lhs_8: float
    eps0_estimate: float
    window_loose: float
    window_gronwall: float
    linear_pass: bool
    nonlinear_pass: bool

    def row(self) -> dict:
        return asdict(self)


def stability_report(eq: Equilibrium, r: float, C: float = float("nan")) -> StabilityReport:
    lin = linear_condition(eq, r)
    kappa = solve_kappa(lin.alpha_rate, lin.T_r) if lin.passed else float("nan")
    if r > 0:
        nl = nonlinear_thresholds(eq, r)
        vals = (2.0 / r, nl.delta_r, nl.r_star, nl.mickey_lhs, nl.mickey_lhs_8, nl.eps0, nl.window_loose,
                nl.window_gronwall, nl.passed)
    else:
        nan = float("nan")
        vals = (2.0 * lin.T_r, nan, critical_margin(eq.phi_b), nan, nan, nan, nan, nan, False)
    T2, delta, r_star, mick, mick8, eps0, wp, wg, nl_pass = vals
    return StabilityReport(eq.lam, r, lin.T_r, T2, lin.alpha_rate, kappa, C, delta, r_star, lin.margin,
                           mick, mick8, eps0, wp, wg, lin.passed, nl_pass)


def write_stability_csv(reports, path):
    rows = [rep.row() for rep in reports]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0].keys()) if rows else ["lam", "r"])
        w.writeheader()
        for row in rows:
            w.writerow({k: (f"{v:.17g}" if isinstance(v, float) else v) for k, v in row.items()})
