"""Figure rendering for the report paths (headless backend, PNG output)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

__all__ = [
    "plot_distance_profile",
    "plot_uncertainty_bands",
    "plot_event_study",
    "plot_mc_summary",
]


def plot_distance_profile(rows: list[dict], path: str | Path) -> None:
    """Posterior mean with 68/95 bands by distance from the treatment border."""
    d = np.array([r["distance"] for r in rows])
    order = np.argsort(d)
    d = d[order]
    get = lambda k: np.array([rows[i][k] for i in order])
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.fill_between(d, get("lo95"), get("hi95"), color="C0", alpha=0.2, label="95% band")
    ax.fill_between(d, get("lo68"), get("hi68"), color="C0", alpha=0.4, label="68% band")
    ax.plot(d, get("mean"), color="C0", lw=2, label="posterior mean")
    ax.set_xlabel("distance from border (miles)")
    ax.set_ylabel("treatment effect")
    ax.legend(frameon=False)
    ax.grid(alpha=0.3, ls="--")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_uncertainty_bands(rows: list[dict], path: str | Path) -> None:
    """Stacked within-model / parameter variance shares per distance band."""
    labels = [f"{int(r['band_lo'])}-{int(r['band_hi'])} mi" for r in rows]
    within = np.array([r["within_pct"] for r in rows])
    param = np.array([r["parameter_pct"] for r in rows])
    x = np.arange(len(rows))
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.bar(x, within, label="within-model %", color="C0")
    ax.bar(x, param, bottom=within, label="parameter %", color="C1")
    ax.set_xticks(x, labels)
    ax.set_ylabel("share of total variance (%)")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_event_study(panel, path: str | Path, title: str = "") -> None:
    """Mean event-time coefficient paths against the true effect path."""
    fig, ax = plt.subplots(figsize=(8, 5))
    ax.plot(panel.horizons, panel.true_path, "k-", lw=2.5, label="true effect")
    markers = {"twfe": "o", "gps": "s", "restricted_pde": "^", "full_pde": "D"}
    for name, vals in panel.paths.items():
        ax.plot(panel.horizons, vals, marker=markers.get(name, "."), ms=4, label=name)
    ax.axvline(0, color="gray", ls="--", lw=1)
    ax.set_xlabel("periods relative to treatment")
    ax.set_ylabel("estimated treatment effect")
    if title:
        ax.set_title(title)
    ax.legend(frameon=False)
    ax.grid(alpha=0.3, ls="--")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_mc_summary(summary, path: str | Path) -> None:
    """Bias and coverage per estimator across the simulation configurations."""
    cells = sorted(summary.cells.values(), key=lambda c: (c.config, c.estimator))
    configs = sorted({c.config for c in cells})
    estimators = sorted({c.estimator for c in cells})
    fig, axes = plt.subplots(2, 1, figsize=(9, 7), sharex=True)
    width = 0.8 / max(len(estimators), 1)
    x = np.arange(len(configs))
    for row, target in enumerate(("direct", "total_border")):
        ax = axes[row]
        for j, est in enumerate(estimators):
            cov = [
                summary.cells.get((cfg, est, target)).coverage
                if (cfg, est, target) in summary.cells
                else np.nan
                for cfg in configs
            ]
            ax.bar(x + j * width, cov, width, label=est if row == 0 else None)
        ax.axhline(0.95, color="k", ls="--", lw=1)
        ax.set_ylabel(f"{target} coverage")
        ax.set_ylim(0, 1.05)
    axes[1].set_xticks(x + 0.4, configs, rotation=15)
    axes[0].legend(frameon=False, ncol=3, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
