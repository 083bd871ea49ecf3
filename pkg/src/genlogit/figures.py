"""Batch figure rendering for the CLI report paths.

Every renderer writes a PNG next to the delimited output it illustrates and
returns the path; nothing is shown interactively (Agg backend).
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_META = {"Software": "genlogit"}


def render_ray_scan(scan_rows, roots, path, c_interval=None):
    """Ray-scan curves: per-probe scaled objective against c, roots marked.

    scan_rows: iterable of (probe_index, c, value).
    """
    rows = np.asarray(list(scan_rows), dtype=float)
    fig, ax = plt.subplots(figsize=(7, 4.2))
    if len(rows):
        for pid in np.unique(rows[:, 0]):
            sel = rows[:, 0] == pid
            ax.plot(rows[sel, 1], rows[sel, 2], lw=0.9, alpha=0.7, label=f"probe {int(pid)}")
    for r in roots:
        ax.axvline(r, color="crimson", ls="--", lw=1.0)
    ax.axhline(0.0, color="black", lw=0.6)
    if c_interval is not None:
        ax.set_xlim(*c_interval)
    ax.set_xlabel("ray scaling c")
    ax.set_ylabel("scaled moment combination")
    ax.set_title("Ray scan: common zeros across probes")
    if len(rows) and len(np.unique(rows[:, 0])) <= 8:
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=130, metadata=_META)
    plt.close(fig)
    return path


def render_estimate(result_dict, path):
    """Local minima of the GMM objective: objective value against each coordinate."""
    minima = result_dict.get("local_minima", [])
    betas = np.array([m["beta"] for m in minima], dtype=float)
    objs = np.array([m["objective"] for m in minima], dtype=float)
    k = betas.shape[1] if betas.ndim == 2 and len(betas) else 1
    fig, axes = plt.subplots(1, k, figsize=(4.0 * k, 3.6), squeeze=False)
    for j in range(k):
        ax = axes[0, j]
        if len(betas):
            ax.scatter(betas[:, j], objs, c="steelblue", zorder=3)
            ax.scatter(
                [result_dict["beta_hat"][j]],
                [result_dict["objective"]],
                c="crimson",
                marker="*",
                s=140,
                zorder=4,
                label="selected",
            )
        ax.set_yscale("symlog", linthresh=1e-12)
        ax.set_xlabel(f"beta[{j}]")
        ax.set_ylabel("objective")
        ax.legend(fontsize=7)
    fig.suptitle("GMM local minima")
    fig.tight_layout()
    fig.savefig(path, dpi=130, metadata=_META)
    plt.close(fig)
    return path


def render_bound(report, path):
    """Per-support-point signal: R(x), Omega(x) and the information share."""
    rows = report.get("per_point", [])
    idx = np.arange(len(rows))
    omega = np.array([r["omega"] for r in rows])
    rnorm = np.array([np.linalg.norm(r["R"]) for r in rows])
    info = np.where(omega > 0, rnorm ** 2 / np.where(omega > 0, omega, 1.0), 0.0)
    fig, axes = plt.subplots(1, 3, figsize=(10.5, 3.4))
    axes[0].bar(idx, rnorm, color="steelblue")
    axes[0].set_title("|R(x)|")
    axes[1].bar(idx, omega, color="darkseagreen")
    axes[1].set_title("Omega(x)")
    axes[2].bar(idx, info, color="indianred")
    axes[2].set_title("R'R/Omega")
    for ax in axes:
        ax.set_xlabel("support point")
    fig.tight_layout()
    fig.savefig(path, dpi=130, metadata=_META)
    plt.close(fig)
    return path


def render_test_zero(report, path):
    """Per-cell standardized deviations from the fair-coin null."""
    cells = report.get("cells", [])
    dev = np.array([c["z"] for c in cells]) if cells else np.zeros(0)
    fig, ax = plt.subplots(figsize=(6.5, 3.6))
    ax.bar(np.arange(len(dev)), dev, color="steelblue")
    ax.axhline(0, color="black", lw=0.6)
    for y in (-1.96, 1.96):
        ax.axhline(y, color="crimson", ls=":", lw=0.8)
    ax.set_xlabel("cell")
    ax.set_ylabel("(S - N/2) / sqrt(N/4)")
    ax.set_title(
        f"Zero-slope test: chi2 = {report.get('statistic', float('nan')):.2f}, "
        f"p = {report.get('p_value', float('nan')):.3f}"
    )
    fig.tight_layout()
    fig.savefig(path, dpi=130, metadata=_META)
    plt.close(fig)
    return path
