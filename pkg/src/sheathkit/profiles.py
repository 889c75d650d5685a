"""Physical closures: electron density, ion injection profile and the well potential.

The well potential is

    Q'(s) = n_e(s) - int mu(w) w / sqrt(w^2 - 2 s) dw,   Q(0) = 0,

and its curvature constants alpha = inf Q'(s)/s, beta = sup Q'(s)/s on [phi_b, 0]
control the sheath profile from both sides.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.integrate import quad, quad_vec
from scipy.interpolate import PchipInterpolator
from scipy.optimize import minimize_scalar

from .errors import CurvatureDegenerate, NonPositiveDensity, QuadratureFailure, RangeExceeded

QUAD_TOL = 1e-10
NEUTRALITY_TOL = 1e-10
CONCAVITY_TOL = 1e-8


# --------------------------------------------------------------------------- electrons


@dataclass(frozen=True)
class ElectronModel:
    """Electron density n_e as a function of the electric potential.

    ``kind`` is ``"boltzmann"`` (n_e = n0 exp(s)) or ``"tabulated"`` (monotone
    cubic interpolation through ``knots``).
    """

    kind: str = "boltzmann"
    n0: float = 1.0
    knots: tuple = ()
    _interp: object = field(default=None, init=False, repr=False, compare=False)
    _anti: object = field(default=None, init=False, repr=False, compare=False)
    _slope: object = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.kind == "boltzmann":
            if not self.n0 > 0:
                raise NonPositiveDensity(f"Boltzmann n0 must be positive, got {self.n0}")
        elif self.kind == "tabulated":
            pts = np.asarray(self.knots, dtype=float)
            if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 3:
                raise ValueError("tabulated electron model needs at least 3 (psi, n_e) knots")
            if np.any(np.diff(pts[:, 0]) <= 0):
                raise ValueError("tabulated knots must be strictly increasing in psi")
            interp = PchipInterpolator(pts[:, 0], pts[:, 1], extrapolate=False)
            anti = interp.antiderivative()
            object.__setattr__(self, "_interp", interp)
            object.__setattr__(self, "_anti", anti)
            object.__setattr__(self, "_slope", interp.derivative())
        else:
            raise ValueError(f"unknown electron model kind {self.kind!r}")

    @classmethod
    def boltzmann(cls, n0: float = 1.0) -> "ElectronModel":
        return cls(kind="boltzmann", n0=float(n0))

    @classmethod
    def tabulated(cls, psi, ne) -> "ElectronModel":
        knots = tuple((float(a), float(b)) for a, b in zip(psi, ne))
        return cls(kind="tabulated", knots=knots)

    @classmethod
    def from_csv(cls, path) -> "ElectronModel":
        """Read a two-column (psi, n_e) table; a non-numeric first row is a header."""
        rows = []
        with open(path, newline="") as fh:
            for row in csv.reader(fh):
                if not row or row[0].strip().startswith("#"):
                    continue
                try:
                    rows.append((float(row[0]), float(row[1])))
                except ValueError:
                    if rows:
                        raise
        return cls.tabulated([r[0] for r in rows], [r[1] for r in rows])

    @property
    def domain(self) -> tuple[float, float]:
        if self.kind == "boltzmann":
            return (-np.inf, np.inf)
        return (self.knots[0][0], self.knots[-1][0])

    def _check_range(self, s):
        lo, hi = self.domain
        s = np.asarray(s, dtype=float)
        tol = 1e-12 * max(1.0, hi - lo) if np.isfinite(lo) else 0.0
        if np.any(s < lo - tol) or np.any(s > hi + tol):
            raise RangeExceeded(
                f"potential range [{s.min():.6g}, {s.max():.6g}] leaves the tabulated domain [{lo}, {hi}]"
            )
        return np.clip(s, lo, hi)

    @property
    def reference_density(self) -> float:
        return float(self.density(0.0))

    def density(self, s):
        if self.kind == "boltzmann":
            return self.n0 * np.exp(s)
        return self._interp(self._check_range(s))

    def derivative(self, s):
        if self.kind == "boltzmann":
            return self.n0 * np.exp(s)
        return self._slope(self._check_range(s))

    def antiderivative(self, s):
        """N_e(s) = int_0^s n_e, so that N_e(0) = 0."""
        if self.kind == "boltzmann":
            return self.n0 * np.expm1(s)
        s = self._check_range(s)
        return self._anti(s) - self._anti(0.0)

    def increment_slope(self, s):
        """(n_e(s) - n_e(0)) / s, with the derivative at s = 0."""
        s = np.asarray(s, dtype=float)
        if self.kind == "boltzmann":
            out = np.empty_like(s)
            small = np.abs(s) < 1e-300
            out[~small] = self.n0 * np.expm1(s[~small]) / s[~small]
            out[small] = self.n0
            return out
        small = np.abs(s) < 1e-7
        out = np.empty_like(s)
        out[~small] = (self.density(s[~small]) - self.density(0.0)) / s[~small]
        out[small] = self.derivative(s[small]) if np.any(small) else out[small]
        return out


# --------------------------------------------------------------------------- ions


@lru_cache(maxsize=1)
def bump_unit_mass() -> float:
    """Integral of exp(-1/(1-z^2)) over (-1, 1)."""
    val, err = quad(lambda z: np.exp(-1.0 / (1.0 - z * z)), -1.0, 1.0, epsabs=1e-15, epsrel=1e-13, points=[0.0])
    return val


def _bump(z):
    z = np.asarray(z, dtype=float)
    out = np.zeros_like(z)
    inside = np.abs(z) < 1.0
    zi = z[inside]
    out[inside] = np.exp(-1.0 / (1.0 - zi * zi))
    return out


def _bump_slope(z):
    z = np.asarray(z, dtype=float)
    out = np.zeros_like(z)
    inside = np.abs(z) < 1.0
    zi = z[inside]
    one = 1.0 - zi * zi
    out[inside] = np.exp(-1.0 / one) * (-2.0 * zi / (one * one))
    return out


@dataclass(frozen=True)
class InjectionProfile:
    """Smooth compactly supported injection density mu(v) on (center - width, center + width).

    mu(v) = c exp(-1/(1 - ((v - center)/width)^2)), with c chosen so that int mu = mass.
    ``mass = 0`` gives the zero profile.
    """

    center: float = 3.0
    half_width: float = 1.0
    mass: float = 1.0

    def __post_init__(self):
        if not self.half_width > 0:
            raise ValueError("half_width must be positive")
        if not self.center - self.half_width > 0:
            raise ValueError("profile support must lie in v > 0")
        if self.mass < 0:
            raise ValueError("mass must be nonnegative")

    @property
    def support(self) -> tuple[float, float]:
        return (self.center - self.half_width, self.center + self.half_width)

    @property
    def r_lo(self) -> float:
        return self.support[0]

    @property
    def r_hi(self) -> float:
        return self.support[1]

    @property
    def amplitude(self) -> float:
        return self.mass / (self.half_width * bump_unit_mass())

    def value(self, v):
        return self.amplitude * _bump((np.asarray(v, dtype=float) - self.center) / self.half_width)

    def derivative(self, v):
        z = (np.asarray(v, dtype=float) - self.center) / self.half_width
        return self.amplitude / self.half_width * _bump_slope(z)

    def peak(self) -> float:
        return self.amplitude * np.exp(-1.0)

    def derivative_l1(self, r: float = 0.0) -> float:
        """int_r^inf |mu'(v)| dv, exact for the unimodal bump."""
        lo, hi = self.support
        if r >= hi or self.mass == 0:
            return 0.0
        if r >= self.center:
            return float(self.value(r))
        return float(2.0 * self.peak() - self.value(max(r, lo)))

    def moment(self, func) -> float:
        """int mu(v) func(v) dv over the support by adaptive quadrature."""
        return integrate_on_support(lambda v: self.value(v) * func(v), self)

    def scaled(self, factor: float) -> "InjectionProfile":
        return InjectionProfile(self.center, self.half_width, self.mass * factor)


def integrate_on_support(func, profile: InjectionProfile, tol: float = QUAD_TOL) -> float:
    lo, hi = profile.support
    val, err = quad(func, lo, hi, epsabs=tol * 1e-3, epsrel=tol, limit=200, points=[profile.center])
    if not np.isfinite(val) or err > tol * max(1.0, abs(val)):
        raise QuadratureFailure(f"profile quadrature did not converge (estimate {val}, error {err})")
    return float(val)


# --------------------------------------------------------------------------- hypotheses


@dataclass(frozen=True)
class HypothesisReport:
    neutrality_residual: float
    neutrality_ok: bool
    bohm_margin: float
    bohm_ok: bool
    concavity_max_second_diff: float
    concavity_ok: bool
    monotone_ok: bool
    ion_mass: float
    reference_density: float

    @property
    def passed(self) -> bool:
        return self.neutrality_ok and self.bohm_ok and self.concavity_ok and self.monotone_ok

    def failures(self) -> list[str]:
        names = []
        if not self.neutrality_ok:
            names.append("neutrality")
        if not self.bohm_ok:
            names.append("bohm")
        if not self.concavity_ok:
            names.append("concavity")
        if not self.monotone_ok:
            names.append("monotone_density")
        return names


def check_hypotheses(model: ElectronModel, profile: InjectionProfile, phi_b: float, samples: int = 2001) -> HypothesisReport:
    if not phi_b < 0:
        raise ValueError("phi_b must be negative")
    s = np.linspace(phi_b, 0.0, samples)
    ne = model.density(s)
    if np.any(ne <= 0):
        k = int(np.argmin(ne))
        raise NonPositiveDensity(f"n_e({s[k]:.6g}) = {ne[k]:.6g} is not positive")
    dne = model.derivative(s)

    if profile.mass > 0:
        mass = integrate_on_support(profile.value, profile)
        inv_sq = integrate_on_support(lambda v: profile.value(v) / (v * v), profile)
    else:
        mass = inv_sq = 0.0
    n_ref = model.reference_density
    residual = abs(mass - n_ref)
    bohm = float(model.derivative(0.0)) - inv_sq

    g = np.exp(-s) * ne
    second = g[2:] - 2.0 * g[1:-1] + g[:-2]
    worst = float(second.max()) if second.size else 0.0
    scale = max(1.0, float(np.abs(g).max()))
    return HypothesisReport(
        neutrality_residual=residual,
        neutrality_ok=residual <= NEUTRALITY_TOL * max(1.0, n_ref),
        bohm_margin=bohm,
        bohm_ok=bohm > 0,
        concavity_max_second_diff=worst,
        concavity_ok=worst <= CONCAVITY_TOL * scale,
        monotone_ok=bool(np.all(dne > 0)),
        ion_mass=mass,
        reference_density=n_ref,
    )


# --------------------------------------------------------------------------- well potential


def _vec_quad(integrand, profile: InjectionProfile, s: np.ndarray) -> np.ndarray:
    lo, hi = profile.support
    if profile.mass == 0 or s.size == 0:
        return np.zeros_like(s)
    val, err = quad_vec(integrand, lo, hi, epsabs=1e-14, epsrel=1e-12, points=[profile.center], limit=400)
    if not np.all(np.isfinite(val)) or err > 1e-9 * max(1.0, float(np.abs(val).max())):
        raise QuadratureFailure(f"vector quadrature error estimate {err:.3e} too large")
    return val


def ion_density(profile: InjectionProfile, s) -> np.ndarray:
    """int mu(w) w / sqrt(w^2 - 2 s) dw, the ion charge density at potential s <= 0."""
    s = np.atleast_1d(np.asarray(s, dtype=float))
    return _vec_quad(lambda w: profile.value(w) * w / np.sqrt(w * w - 2.0 * s), profile, s)


@dataclass(frozen=True)
class WellPotential:
    model: ElectronModel
    profile: InjectionProfile
    phi_b: float
    alpha: float
    beta: float
    curvature_zero: float
    neutral: bool
    alpha_at: float
    beta_at: float
    sampling_resolution: float

    def q_prime(self, s):
        s = np.asarray(s, dtype=float)
        out = self.model.density(s) - ion_density(self.profile, s).reshape(s.shape)
        return out

    def slope(self, s):
        """Q'(s)/s written without cancellation; equals Q''(0) at s = 0 when neutral."""
        s = np.atleast_1d(np.asarray(s, dtype=float))
        ion_mass = self.profile.mass
        resid = self.model.reference_density - ion_mass

        def integrand(w):
            root = np.sqrt(w * w - 2.0 * s)
            return self.profile.value(w) / ((root + w) * root)

        tail = _vec_quad(integrand, self.profile, s)
        out = self.model.increment_slope(s) - 2.0 * tail
        nz = s != 0
        out[nz] += resid / s[nz]
        return out

    def q(self, s):
        """Q(s) = N_e(s) - 2 s int mu w / (sqrt(w^2 - 2s) + w) dw, the form free of cancellation."""
        s_arr = np.atleast_1d(np.asarray(s, dtype=float))

        def integrand(w):
            return self.profile.value(w) * w / (np.sqrt(w * w - 2.0 * s_arr) + w)

        ion = _vec_quad(integrand, self.profile, s_arr)
        out = self.model.antiderivative(s_arr) - 2.0 * s_arr * ion
        return out.reshape(np.shape(s)) if np.ndim(s) else float(out[0])

    def q_second(self, s):
        s_arr = np.atleast_1d(np.asarray(s, dtype=float))

        def integrand(w):
            root = np.sqrt(w * w - 2.0 * s_arr)
            return self.profile.value(w) * w / root**3

        out = self.model.derivative(s_arr) - _vec_quad(integrand, self.profile, s_arr)
        return out.reshape(np.shape(s)) if np.ndim(s) else float(out[0])


def curvature_samples(phi_b: float, count: int = 10_000) -> np.ndarray:
    """Half uniform, half log-refined towards s = 0, sorted, excluding 0."""
    half = count // 2
    uniform = np.linspace(phi_b, 0.0, half + 1)[:-1]
    logs = -np.abs(phi_b) * np.logspace(-8, 0, count - half)
    return np.unique(np.concatenate([uniform, logs]))


def build_well(model: ElectronModel, profile: InjectionProfile, phi_b: float, samples: int = 10_000, strict: bool = True) -> WellPotential:
    """Assemble Q and extract alpha, beta by dense sampling plus bounded local refinement."""
    if phi_b > 0:
        raise ValueError("phi_b must not be positive")
    q0 = float(model.reference_density - (integrate_on_support(profile.value, profile) if profile.mass > 0 else 0.0))
    neutral = abs(q0) <= NEUTRALITY_TOL * max(1.0, model.reference_density)
    proto = WellPotential(model, profile, phi_b, np.nan, np.nan, np.nan, neutral, np.nan, np.nan, np.nan)
    if not neutral:
        if strict:
            raise CurvatureDegenerate(f"Q'(0) = {q0:.3e} != 0: neutrality fails, curvature constants undefined")
        return proto

    curv0 = float(model.derivative(0.0)) - (
        integrate_on_support(lambda v: profile.value(v) / (v * v), profile) if profile.mass > 0 else 0.0
    )
    s = curvature_samples(phi_b, samples) if phi_b < 0 else np.empty(0)
    g = proto.slope(s) if s.size else s
    s_all = np.append(s, 0.0)
    g_all = np.append(g, curv0)

    def refine(sign):
        k = int(np.argmin(sign * g_all))
        best_s, best_g = s_all[k], g_all[k]
        lo = s_all[max(k - 1, 0)]
        hi = s_all[min(k + 1, s_all.size - 1)]
        if hi > lo:
            res = minimize_scalar(lambda t: sign * float(proto.slope(np.array([t]))[0]),
                                  bounds=(lo, hi), method="bounded", options={"xatol": 1e-12 * abs(phi_b)})
            if res.success and sign * res.fun < sign * best_g:
                best_s, best_g = float(res.x), float(sign * res.fun)
        return best_g, best_s, hi - lo

    alpha, alpha_at, da = refine(1.0)
    beta, beta_at, db = refine(-1.0)
    if not alpha > 0:
        raise CurvatureDegenerate(f"alpha = {alpha:.3e} <= 0 (Bohm condition numerically violated)")
    return WellPotential(model, profile, phi_b, alpha, beta, curv0, neutral, alpha_at, beta_at, max(da, db))
