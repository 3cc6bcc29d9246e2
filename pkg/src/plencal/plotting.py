"""Optional figures written next to the JSON/CSV reports (Agg backend only)."""

from __future__ import annotations

import numpy as np


def _plt():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_trajectory(est_positions, gt_positions, path, title="trajectory"):
    """Top view (x-z) of aligned estimated and reference camera positions."""
    plt = _plt()
    est = np.asarray(est_positions, float).reshape(-1, 3)
    fig, ax = plt.subplots(figsize=(5, 4))
    if gt_positions is not None:
        gt = np.asarray(gt_positions, float).reshape(-1, 3)
        ax.plot(gt[:, 0], gt[:, 2], "-", color="0.5", label="reference")
    ax.plot(est[:, 0], est[:, 2], ".-", ms=3, label="estimated")
    ax.set_xlabel("x [mm]")
    ax.set_ylabel("z [mm]")
    ax.set_title(title)
    ax.axis("equal")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_residuals(residuals, path, bins=60):
    """Histogram of residual norms (px)."""
    plt = _plt()
    r = np.linalg.norm(np.asarray(residuals, float).reshape(-1, 2), axis=1)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    hi = np.percentile(r, 99) if len(r) else 1.0
    ax.hist(r[r <= hi], bins=bins)
    ax.set_xlabel("residual [px]")
    ax.set_ylabel("count")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_cost_history(report, path):
    plt = _plt()
    costs = [h.cost for h in report.history if h.accepted]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.semilogy(np.arange(len(costs)), np.maximum(costs, 1e-300), ".-")
    ax.set_xlabel("accepted step")
    ax.set_ylabel("cost")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_sweep(cells, param, path):
    """Heat map of the RMSE (%) of ``param`` over the point/view grid; failed
    cells stay blank."""
    plt = _plt()
    pts = sorted({c["num_points"] for c in cells})
    views = sorted({c["num_views"] for c in cells})
    M = np.full((len(pts), len(views)), np.nan)
    for c in cells:
        M[pts.index(c["num_points"]), views.index(c["num_views"])] = c[f"rmse_pct_{param}"]
    fig, ax = plt.subplots(figsize=(5, 4))
    im = ax.imshow(M, origin="lower", aspect="auto", cmap="viridis")
    ax.set_xticks(range(len(views)), [str(v) for v in views])
    ax.set_yticks(range(len(pts)), [str(p) for p in pts])
    ax.set_xlabel("views")
    ax.set_ylabel("points")
    ax.set_title(f"RMSE {param} [%]")
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
