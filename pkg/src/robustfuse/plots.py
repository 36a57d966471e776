"""Figure rendering for the CLI report paths.

Kept separate so the numeric modules never import matplotlib; figures are
written next to the delimited outputs they illustrate.
"""

from __future__ import annotations

import numpy as np

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be pinned first)


def save_fuse_figure(problem, pooled, fit, lower, upper, path) -> None:
    """Per-coordinate view: source estimates, pooled centre, fused estimate."""
    thetas = problem.thetas()
    K, d = thetas.shape
    coords = np.arange(1, d + 1)
    fig, ax = plt.subplots(figsize=(max(6.0, 1.2 * d), 4.0))
    jitter = np.linspace(-0.18, 0.18, K)
    selected = set(fit.selected or ())
    for k in range(K):
        color = "tab:green" if k in selected else "tab:gray"
        ax.scatter(coords + jitter[k], thetas[k], s=18, color=color, alpha=0.55, zorder=1)
    ax.scatter(coords, pooled, marker="D", s=46, color="tab:orange", label="pooled median", zorder=3)
    if lower is not None:
        yerr = np.vstack([fit.theta - lower, upper - fit.theta])
        ax.errorbar(
            coords, fit.theta, yerr=yerr, fmt="o", color="tab:blue",
            capsize=4, label="fused estimate", zorder=4,
        )
    else:
        ax.scatter(coords, fit.theta, marker="o", s=46, color="tab:blue", label="fused estimate", zorder=4)
    ax.scatter([], [], s=18, color="tab:green", label="pooled sources")
    ax.scatter([], [], s=18, color="tab:gray", label="down-weighted sources")
    ax.set_xticks(coords)
    ax.set_xlabel("coordinate")
    ax.set_ylabel("estimate")
    ax.legend(loc="best", fontsize=8)
    ax.set_title("Source estimates and fused result")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_metrics_figure(report, path) -> None:
    """Bar panels of NB and SSE per estimator for one simulation report."""
    names = [m.estimator for m in report.metrics]
    nb = [m.nb for m in report.metrics]
    sse = [m.sse for m in report.metrics]
    fig, axes = plt.subplots(1, 2, figsize=(9.0, 3.8))
    for ax, vals, title in zip(axes, (nb, sse), ("norm of mean error (NB)", "sum of std. errors (SSE)")):
        ax.bar(names, vals, color="tab:blue")
        ax.set_title(title, fontsize=10)
        ax.tick_params(axis="x", rotation=30)
        if max(vals) > 0 and max(vals) / max(min(v for v in vals if v > 0), 1e-12) > 50:
            ax.set_yscale("log")
    d = report.design
    fig.suptitle(f"{d.family}: d={d.d} K={d.K} n*={d.n_star} reps={report.replicates_used}", fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_counterexample_figure(result, path) -> None:
    """Histogram of pooled-median errors against the exceedance threshold."""
    fig, ax = plt.subplots(figsize=(6.5, 4.0))
    ax.hist(result.errors, bins=40, color="tab:blue", alpha=0.8)
    ax.axvline(result.threshold, color="tab:red", linestyle="--",
               label=f"threshold {result.threshold:.4f}")
    ax.set_xlabel("pooled median error")
    ax.set_ylabel("replicates")
    ax.set_title(
        f"K={result.K} n={result.n} tau={result.tau}: "
        f"exceedance {result.exceedance_rate:.3f}"
    )
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
