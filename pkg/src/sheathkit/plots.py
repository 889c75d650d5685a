"""Deterministic SVG figures for a run directory (needs matplotlib)."""

from __future__ import annotations

import json
import os

import numpy as np


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "sheathkit"
    matplotlib.rcParams["svg.fonttype"] = "none"
    return plt


def _read(path):
    return np.genfromtxt(path, delimiter=",", names=True, dtype=None, encoding="utf-8")


def _save(fig, path):
    fig.savefig(path, format="svg", metadata={"Date": None})
    return path


def plot_run(run_dir) -> list:
    """Write every figure the run directory has data for; returns the written paths."""
    if not os.path.isdir(run_dir):
        raise FileNotFoundError(f"no such run directory: {run_dir}")
    plt = _pyplot()
    written = []
    eq_csv = os.path.join(run_dir, "equilibrium.csv")
    if os.path.exists(eq_csv):
        d = _read(eq_csv)
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.plot(d["x"], d["phi_inf"], color="k")
        ax.set_xlabel("x")
        ax.set_ylabel("stationary potential")
        fig.tight_layout()
        written.append(_save(fig, os.path.join(run_dir, "potential.svg")))
        plt.close(fig)
    pp_csv = os.path.join(run_dir, "phase_portrait.csv")
    if os.path.exists(pp_csv) and os.path.exists(eq_csv):
        d = _read(pp_csv)
        e = _read(eq_csv)
        fig, ax = plt.subplots(figsize=(5, 4))
        colors = {"DPLUS": "tab:blue", "DPLUS_MINUS": "tab:orange", "DMINUS": "tab:green", "SEPARATRIX": "k"}
        for name, c in colors.items():
            sel = d["region"] == name
            if np.any(sel):
                ax.scatter(d["x"][sel], d["v"][sel], s=4, color=c, label=name)
        sep = np.sqrt(np.maximum(-2.0 * e["phi_inf"], 0.0))
        ax.plot(e["x"], sep, color="k", lw=1)
        ax.plot(e["x"], -sep, color="k", lw=1)
        ax.set_xlabel("x")
        ax.set_ylabel("v")
        ax.legend(loc="upper left", fontsize=7)
        fig.tight_layout()
        written.append(_save(fig, os.path.join(run_dir, "phase_portrait.svg")))
        plt.close(fig)
    trace_csv = os.path.join(run_dir, "trace.csv")
    if os.path.exists(trace_csv):
        d = _read(trace_csv)
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for col in ("l1_total", "l1_dplus_r", "l1_complement"):
            y = np.atleast_1d(d[col])
            pos = y > 0
            ax.semilogy(np.atleast_1d(d["t"])[pos], y[pos], label=col)
        env_csv = os.path.join(run_dir, "envelope.csv")
        if os.path.exists(env_csv):
            env = _read(env_csv)
            ax.semilogy(env["t"], env["envelope"], "k--", label="envelope")
        manifest = os.path.join(run_dir, "manifest.json")
        if os.path.exists(manifest):
            with open(manifest) as fh:
                ax.set_title(f"mode {json.load(fh)['config']['mode']}", fontsize=9)
        ax.set_xlabel("t")
        ax.set_ylabel("L1 norm")
        ax.legend(fontsize=7)
        fig.tight_layout()
        written.append(_save(fig, os.path.join(run_dir, "decay.svg")))
        plt.close(fig)
    gw_csv = os.path.join(run_dir, "gronwall.csv")
    if os.path.exists(gw_csv):
        d = _read(gw_csv)
        fig, ax = plt.subplots(figsize=(5, 3.5))
        pos = d["z"] > 0
        ax.semilogy(d["t"][pos], d["z"][pos], label="equality solution")
        pos = d["envelope"] > 0
        ax.semilogy(d["t"][pos], d["envelope"][pos], "k--", label="envelope")
        ax.set_xlabel("t")
        ax.legend(fontsize=7)
        fig.tight_layout()
        written.append(_save(fig, os.path.join(run_dir, "gronwall.svg")))
        plt.close(fig)
    return written
