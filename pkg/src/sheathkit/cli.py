"""Command line entry point: ``sheathkit run|check|plot``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys

import numpy as np

from . import __version__
from .characteristics import (StationaryField, exit_bounds, exit_records, exit_time_quadrature, phase_portrait,
                              write_phase_portrait)
from .config import RunConfig, load_config
from .equilibrium import classify_point, solve_equilibrium, verify_equilibrium_bounds
from .errors import SheathError
from .evolution import BumpPerturbation, EvolutionConfig, run
from .profiles import ElectronModel, InjectionProfile, build_well, check_hypotheses
from .stability import (delayed_gronwall_simulate, fit_decay, linear_condition, nonlinear_thresholds, solve_kappa,
                        stability_report, write_stability_csv)

log = logging.getLogger("sheathkit")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CHECK_FAILED = 2


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    return str(v)


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(f"not serializable: {type(obj).__name__}")


# --------------------------------------------------------------------------- building blocks


def build_model(cfg: RunConfig) -> ElectronModel:
    e = cfg.physics.electrons
    if e.kind == "boltzmann":
        return ElectronModel.boltzmann(e.n0)
    return ElectronModel.from_csv(e.table)


def build_profile(cfg: RunConfig, model: ElectronModel) -> InjectionProfile:
    inj = cfg.physics.injection
    mass = model.reference_density if inj.mass == "neutral" else float(inj.mass)
    return InjectionProfile(inj.center, inj.half_width, mass)


def build_equilibrium(cfg: RunConfig, lam: float | None = None):
    model = build_model(cfg)
    profile = build_profile(cfg, model)
    phi_b = cfg.physics.phi_b
    hyp = check_hypotheses(model, profile, phi_b)
    well = build_well(model, profile, phi_b)
    lam = cfg.physics.lam if lam is None else lam
    eq = solve_equilibrium(well, lam, cfg.numerics.grid_size, tol=cfg.numerics.newton_tol)
    return hyp, eq


def build_perturbation(cfg: RunConfig, eq) -> BumpPerturbation:
    p = cfg.perturbation
    vc = p.v_center if p.v_center is not None else 0.5 * (eq.profile.r_lo + eq.profile.r_hi)
    return BumpPerturbation(p.amplitude, p.x_center, p.x_half_width, vc, p.v_half_width)


class Run:
    """One configured execution writing into its run directory."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.out = cfg.io.output_dir
        self.resolved: dict = {}
        self.checks: list = []
        self.notes: list = []

    def path(self, name):
        return os.path.join(self.out, name)

    def check(self, name, passed, detail=""):
        self.checks.append({"name": name, "passed": bool(passed), "detail": detail})

    def prepare(self):
        parent = os.path.dirname(os.path.abspath(self.out))
        if not os.path.isdir(parent):
            raise FileNotFoundError(f"parent of output directory does not exist: {parent}")
        os.makedirs(self.out, exist_ok=True)

    def write_manifest(self, status):
        manifest = {
            "version": __version__,
            "config": self.cfg.to_dict(),
            "resolved": self.resolved,
            "checks": self.checks,
            "notes": self.notes,
            "status": status,
        }
        with open(self.path("manifest.json"), "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True, default=_json_default)
            fh.write("\n")

    # ------------------------------------------------------------------ modes

    def equilibrium(self):
        hyp, eq = build_equilibrium(self.cfg)
        self._record_equilibrium(hyp, eq)
        eq.to_csv(self.path("equilibrium.csv"))
        rep = verify_equilibrium_bounds(eq)
        _write_rows(self.path("bounds.csv"), ["x", "phi_inf", "lower", "upper"],
                    zip(eq.x, eq.phi, rep.lower, rep.upper))
        self.check("hypotheses", hyp.passed, "; ".join(hyp.failures()))
        self.check("sandwich", not rep.violations, f"violations={len(rep.violations)}")
        self.check("edge_slope", rep.edge_slope_ok, f"{rep.edge_slope:.6g} <= {rep.edge_slope_bound:.6g}")
        self.resolved["energy_ratio"] = rep.energy_ratio
        return eq

    def _record_equilibrium(self, hyp, eq):
        self.resolved.update({
            "grid_size": int(eq.x.size),
            "alpha": eq.well.alpha,
            "beta": eq.well.beta,
            "bohm_margin": hyp.bohm_margin,
            "neutrality_residual": hyp.neutrality_residual,
            "edge_slope": eq.edge_slope,
            "injection_mass": eq.profile.mass,
            "newton_iterations": eq.iterations,
        })

    def phase_portrait(self):
        hyp, eq = build_equilibrium(self.cfg)
        self._record_equilibrium(hyp, eq)
        eq.to_csv(self.path("equilibrium.csv"))
        n = self.cfg.numerics
        rows = phase_portrait(eq, n.portrait_nx, n.portrait_nv, n.v_max)
        write_phase_portrait(rows, self.path("phase_portrait.csv"))
        self._exit_sample_check(eq)
        return eq

    def _exit_sample_check(self, eq):
        """Seeded random points: ODE exit times against quadrature and the region bounds."""
        rng = np.random.default_rng(self.cfg.seed)
        n = self.cfg.numerics
        v_max = n.v_max or eq.profile.r_hi + 3.0 * math.sqrt(-2.0 * eq.phi_b)
        xs = rng.uniform(0.0, 1.0, n.samples)
        vs = rng.uniform(-v_max, v_max, n.samples)
        keep = np.abs(vs**2 + 2 * eq.phi_at(xs)) > 1e-3
        xs, vs = xs[keep], vs[keep]
        rec = exit_records(StationaryField(eq), 0.0, xs, vs, h=n.h_ode)
        rows = []
        worst = 0.0
        bounds_ok = True
        nan = math.nan
        if not eq.concave_ok:
            self.notes.append("equilibrium is not concave; exit-time bounds not applicable")
        for k, (x, v) in enumerate(zip(xs, vs)):
            ti, to = exit_time_quadrature(eq, x, v)
            err = max(abs(ti - rec.t_inc[k]), abs(to - rec.t_out[k]))
            worst = max(worst, err)
            region = classify_point(eq, x, v).kind.name
            if eq.concave_ok:
                b = exit_bounds(eq, x, v)
                ok = -ti <= b.t_minus * (1 + 1e-9) + 1e-12 and to <= b.t_plus * (1 + 1e-9) + 1e-12
                bounds_ok &= ok
                rows.append((x, v, region, rec.t_inc[k], rec.t_out[k], ti, to, b.t_minus, b.t_plus, ok))
            else:
                rows.append((x, v, region, rec.t_inc[k], rec.t_out[k], ti, to, nan, nan, ""))
        _write_rows(self.path("exit_check.csv"),
                    ["x", "v", "region", "t_inc_ode", "t_out_ode", "t_inc_quad", "t_out_quad", "bound_minus",
                     "bound_plus", "bound_ok"], rows)
        self.check("exit_oracle", worst <= 1e-6, f"max |ode - quadrature| = {worst:.3e}")
        if eq.concave_ok:
            self.check("exit_bounds", bounds_ok)

    def evolve(self, nonlinear: bool):
        hyp, eq = build_equilibrium(self.cfg)
        self._record_equilibrium(hyp, eq)
        n = self.cfg.numerics
        r = self.cfg.physics.r
        evo = EvolutionConfig(mode="nonlinear" if nonlinear else "linear", r=r, horizon=n.horizon, dt=n.dt,
                              h_ode=n.h_ode, nv=n.nv, v_max=n.v_max, picard_tol=n.picard_tol,
                              picard_max=n.picard_max, snapshot_times=tuple(self.cfg.io.snapshot_times))
        h0 = build_perturbation(self.cfg, eq)
        trace = run(eq, evo, h0, out_dir=self.out)
        res = trace.config
        self.resolved.update({"dt": res.dt, "h_ode": res.h_ode, "v_max": res.v_max, "nv": res.nv,
                              "v_center": h0.v_center, "h0_mass": h0.mass,
                              "contraction_bound": trace.contraction_bound})
        if trace.error is not None:
            self.notes.append(f"run aborted: {trace.error}")
            self.write_manifest("error")
            raise trace.error
        ok_h, ok_u = trace.growth_check()
        self.check("growth_l1", ok_h.all())
        self.check("growth_dxU", ok_u.all())
        t = trace.times
        support_ok = trace.admissibility.support_in_dplus_r
        if nonlinear:
            self._nonlinear_theory(eq, trace, h0, support_ok)
        else:
            self._linear_theory(eq, trace, support_ok)
        self.resolved["final_time"] = float(t[-1])
        return eq, trace

    def _envelope(self, trace, eq, column, kappa, window):
        t = trace.times
        y = trace.column(column)
        fit = fit_decay(t, y, kappa, window)
        u = trace.column("linf_dxU")
        env_u = 2.0 * fit.C / eq.lam**2 * np.exp(-kappa * t)
        u_ok = bool(np.all(u <= 1.05 * env_u + 1e-300))
        self.resolved.update({"kappa": kappa, "C": fit.C, "fitted_rate": fit.fitted_rate,
                              "envelope_worst_ratio": fit.worst_ratio})
        _write_rows(self.path("envelope.csv"), ["t", "norm", "envelope", "linf_dxU", "envelope_dxU"],
                    zip(t, y, fit.C * np.exp(-kappa * t), u, env_u))
        self.check("decay_envelope", fit.envelope_ok, f"worst ratio {fit.worst_ratio:.4g}")
        self.check("decay_envelope_dxU", u_ok)

    def _linear_theory(self, eq, trace, support_ok):
        r = self.cfg.physics.r
        lc = linear_condition(eq, r)
        self.resolved.update({"T_r": lc.T_r, "linear_condition_margin": lc.margin})
        if not (lc.passed and support_ok):
            msg = "stability hypotheses not met; envelope check not applicable"
            log.warning(msg)
            self.notes.append(msg)
            return
        self._envelope(trace, eq, "l1_dplus_r", solve_kappa(lc.alpha_rate, lc.T_r), lc.T_r)

    def _nonlinear_theory(self, eq, trace, h0, support_ok):
        r = self.cfg.physics.r
        if r <= 0:
            self.notes.append("nonlinear thresholds need r > 0; envelope check not applicable")
            return
        nl = nonlinear_thresholds(eq, r)
        self.resolved.update({"delta_r": nl.delta_r, "r_star": nl.r_star, "eps0": nl.eps0,
                              "mickey_lhs": nl.mickey_lhs, "window_gronwall": nl.window_gronwall})
        if not (nl.passed and support_ok and h0.mass < nl.eps0):
            msg = "nonlinear thresholds not met; envelope check not applicable"
            log.warning(msg)
            self.notes.append(msg)
            return
        self.check("support_in_dplus_r2", all(rec.support_in_dplus_r2 for rec in trace.records))
        self._envelope(trace, eq, "l1_dplus_r2", nl.kappa, nl.T_tilde)

    def stability(self):
        cfg = self.cfg
        lambdas = cfg.scan.lambdas or [cfg.physics.lam]
        radii = cfg.scan.radii or [cfg.physics.r]
        reports = []
        for lam in lambdas:
            hyp, eq = build_equilibrium(cfg, float(lam))
            for r in radii:
                reports.append(stability_report(eq, float(r)))
        self.resolved["lambdas"] = [float(v) for v in lambdas]
        self.resolved["radii"] = [float(v) for v in radii]
        write_stability_csv(reports, self.path("stability_report.csv"))
        return reports

    def gronwall(self):
        g = self.cfg.gronwall
        kappa = solve_kappa(g.alpha, g.window)
        if g.initial == "constant":
            y0 = lambda t: 1.0  # noqa: E731
        elif g.initial == "zero":
            y0 = lambda t: 0.0  # noqa: E731
        else:
            y0 = lambda t: math.exp(-kappa * t) if math.isfinite(kappa) else 0.0  # noqa: E731
        series = delayed_gronwall_simulate(y0, g.alpha, g.window, g.horizon, g.dt)
        _write_rows(self.path("gronwall.csv"), ["t", "z", "envelope"], zip(series.t, series.z, series.envelope))
        self.resolved.update({"kappa": kappa, "C": series.C, "slack": series.slack})
        self.check("gronwall_envelope", series.bound_ok)
        return series


def execute(cfg: RunConfig) -> int:
    runner = Run(cfg)
    try:
        runner.prepare()
    except OSError as exc:
        log.error("%s", exc)
        return EXIT_ERROR
    try:
        if cfg.mode == "equilibrium":
            runner.equilibrium()
        elif cfg.mode == "phase_portrait":
            runner.phase_portrait()
        elif cfg.mode == "linear_evolve":
            runner.evolve(nonlinear=False)
        elif cfg.mode == "nonlinear_evolve":
            runner.evolve(nonlinear=True)
        elif cfg.mode == "stability_report":
            runner.stability()
        elif cfg.mode == "gronwall_demo":
            runner.gronwall()
    except (SheathError, OSError, ValueError) as exc:
        log.error("%s failed: %s: %s", cfg.mode, type(exc).__name__, exc)
        runner.notes.append(f"{type(exc).__name__}: {exc}")
        runner.write_manifest("error")
        return EXIT_ERROR
    failed = [c["name"] for c in runner.checks if not c["passed"]]
    runner.write_manifest("failed" if failed else "ok")
    if cfg.io.plot:
        try:
            from .plots import plot_run
            plot_run(runner.out)
        except Exception as exc:  # plots never gate the exit status
            log.warning("plotting skipped: %s", exc)
    if failed:
        log.error("checks failed: %s", ", ".join(failed))
        return EXIT_CHECK_FAILED
    return EXIT_OK


def check(cfg: RunConfig) -> int:
    """Hypotheses and stability conditions only, printed as a table."""
    hyp, eq = build_equilibrium(cfg)
    r = cfg.physics.r
    lines = [("neutrality", hyp.neutrality_ok, f"{hyp.neutrality_residual:.3e}"),
             ("bohm", hyp.bohm_ok, f"margin {hyp.bohm_margin:.6g}"),
             ("concavity", hyp.concavity_ok, f"{hyp.concavity_max_second_diff:.3e}"),
             ("monotone_density", hyp.monotone_ok, "")]
    lc = linear_condition(eq, r)
    lines.append(("linear_condition", lc.passed, f"margin {lc.margin:.6g} (T_r = {lc.T_r:.6g})"))
    if r > 0:
        nl = nonlinear_thresholds(eq, r)
        lines.append(("nonlinear_thresholds", nl.passed,
                      f"delta_r {nl.delta_r:.6g}, r_star {nl.r_star:.6g}, mickey {nl.mickey_lhs:.4g}, "
                      f"window {nl.window_gronwall:.4g}, eps0 {nl.eps0:.4g}"))
    for name, ok, detail in lines:
        print(f"{'PASS' if ok else 'FAIL'}  {name:22s} {detail}")
    hyp_ok = all(ok for name, ok, _ in lines[:4])
    return EXIT_OK if hyp_ok else EXIT_CHECK_FAILED


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="sheathkit", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="execute a configured run")
    p_run.add_argument("config")
    p_chk = sub.add_parser("check", help="hypotheses and stability conditions only")
    p_chk.add_argument("config")
    p_plot = sub.add_parser("plot", help="render SVG plots for a run directory")
    p_plot.add_argument("run_dir")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "plot":
            from .plots import plot_run
            written = plot_run(args.run_dir)
            for path in written:
                print(path)
            return EXIT_OK
        cfg = load_config(args.config)
        if args.command == "check":
            return check(cfg)
        return execute(cfg)
    except (SheathError, OSError, ImportError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
