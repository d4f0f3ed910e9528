"""Report figures. Everything renders off-screen to files next to the CSV output."""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 110,
    "savefig.bbox": "tight",
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "legend.frameon": False,
}

KIND_COLORS = {"plain": "#7f7f7f", "vanilla": "#d62728", "ms": "#1f77b4", "sr-b": "#2ca02c",
               "sr-c": "#9467bd", "ms-without-path-lif": "#ff7f0e"}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path


def training_curves(metrics: list, path) -> Path:
    with plt.rc_context(STYLE):
        fig, (ax_l, ax_a) = plt.subplots(1, 2, figsize=(8, 3))
        for split, style in (("train", "-"), ("test", "--")):
            rows = [m for m in metrics if m["split"] == split]
            if not rows:
                continue
            ep = [m["epoch"] for m in rows]
            ax_l.plot(ep, [m["loss"] for m in rows], style, label=split)
            ax_a.plot(ep, [100 * m["top1"] for m in rows], style, label=split)
        ax_l.set_xlabel("epoch")
        ax_l.set_ylabel("loss")
        ax_a.set_xlabel("epoch")
        ax_a.set_ylabel("top-1 (%)")
        ax_a.legend()
        return _save(fig, path)


def ssim_radar(rows: list, path, title: str = "") -> Path:
    """Polar plot of per-block SSIM (1 = the residual path changed nothing)."""
    vals = [float(r["ssim"]) for r in rows]
    n = max(len(vals), 1)
    theta = np.linspace(0, 2 * math.pi, n, endpoint=False)
    with plt.rc_context(STYLE):
        fig = plt.figure(figsize=(4, 4))
        ax = fig.add_subplot(projection="polar")
        if vals:
            ax.plot(np.append(theta, theta[0]), vals + vals[:1], "o-", ms=3)
            ax.fill(np.append(theta, theta[0]), vals + vals[:1], alpha=0.2)
        ax.set_xticks(theta)
        ax.set_xticklabels([str(r["block"]) for r in rows], fontsize=7)
        ax.set_ylim(min(0.0, min(vals, default=0.0)), 1.0)
        if title:
            ax.set_title(title)
        return _save(fig, path)


def firing_rates(stats, path) -> Path:
    """Per-stage mean firing rate for each LIF position."""
    table = stats.by_role()
    stages = sorted({s for s, _ in table})
    roles = sorted({r for _, r in table})
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3))
        width = 0.8 / max(len(roles), 1)
        for i, role in enumerate(roles):
            ys = [table.get((s, role), np.nan) for s in stages]
            ax.bar(np.arange(len(stages)) + i * width, ys, width, label=role)
        ax.set_xticks(np.arange(len(stages)) + 0.4 - width / 2)
        ax.set_xticklabels(stages)
        ax.set_ylabel("firing rate")
        ax.set_title(f"global r = {stats.global_rate:.4f}")
        ax.legend()
        return _save(fig, path)


def isometry(rows: list, path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6, 3))
        idx = np.arange(len(rows))
        ax.plot(idx, [r["phi"] for r in rows], "o-", label="measured")
        ax.plot(idx, [r["predicted"] for r in rows], "x--", label="predicted")
        ax.axhline(1.0, color="k", lw=0.6)
        ax.set_xlabel("block")
        ax.set_ylabel(r"$\phi(JJ^T)$")
        ax.legend()
        return _save(fig, path)


def landscape(grid, path) -> Path:
    z = np.array(grid.loss, dtype=float)
    finite = np.isfinite(z)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.2, 3.6))
        if finite.any():
            zc = np.where(finite, z, np.nanmax(np.where(finite, z, np.nan)))
            cs = ax.contourf(grid.betas, grid.alphas, zc, levels=20, cmap="viridis")
            fig.colorbar(cs, ax=ax, label="loss")
        ax.plot([0], [0], "r+")
        ax.set_xlabel(r"$\beta$")
        ax.set_ylabel(r"$\alpha$")
        return _save(fig, path)


def depth_sweep(rows: list, path, metric: str = "train_top1") -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3))
        for kind in sorted({r["kind"] for r in rows}):
            rs = sorted((r for r in rows if r["kind"] == kind), key=lambda r: r["depth"])
            ax.plot([r["depth"] for r in rs], [100 * r[metric] for r in rs], "o-", label=kind,
                    color=KIND_COLORS.get(kind))
        ax.set_xlabel("depth")
        ax.set_ylabel(metric.replace("_", " ") + " (%)")
        ax.legend()
        return _save(fig, path)


def energy(report, path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.5, 3))
        vals = [report.e_ann * 1e3, report.e_snn * 1e3]
        ax.bar(["ANN (MAC)", "SNN (AC)"], vals, color=["#999999", "#1f77b4"])
        ax.set_ylabel("energy (mJ)")
        r = report.ratio
        ax.set_title(f"ratio {r:.2f}" if math.isfinite(r) else "ratio inf")
        return _save(fig, path)
