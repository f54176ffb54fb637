"""Figure rendering for the report and demo paths.

Every plot function writes a PNG next to the delimited data it
visualizes and returns the output path.  The Agg backend is forced so
rendering works headless.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

plt.rcParams.update(
    {
        "figure.dpi": 120,
        "axes.grid": True,
        "grid.alpha": 0.3,
        "font.size": 9,
        "legend.fontsize": 8,
    }
)

OPTIMIZER_COLORS = {"sgd": "tab:red", "rsgd": "tab:blue", "rsgd_c": "tab:green"}
OPTIMIZER_LABELS = {"sgd": "SGD", "rsgd": "RSGD", "rsgd_c": "RSGD-C"}


def _finish(fig, out_path) -> Path:
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, bbox_inches="tight")
    plt.close(fig)
    return out_path


def plot_metric_map(
    grid_z1,
    grid_z2,
    sqrt_det,
    out_path,
    train_codes=None,
    trajectories=None,
    title="latent traversal cost",
):
    """Heatmap of the volume measure over a 2-D latent grid.

    Dark-to-red shading encodes sqrt(det M) on a log scale; optional
    training codes and latent trajectories are overlaid.
    """
    z1 = np.asarray(grid_z1)
    z2 = np.asarray(grid_z2)
    values = np.asarray(sqrt_det).reshape(z2.size, z1.size)
    fig, ax = plt.subplots(figsize=(5, 4))
    mesh = ax.pcolormesh(
        z1,
        z2,
        np.log10(values),
        cmap="RdGy_r",
        shading="auto",
    )
    fig.colorbar(mesh, ax=ax, label="log10 sqrt(det M)")
    if train_codes is not None:
        codes = np.asarray(train_codes)
        ax.plot(codes[:, 0], codes[:, 1], ".", ms=1, color="white", alpha=0.25)
    if trajectories:
        for name, path in trajectories.items():
            path = np.asarray(path)
            color = OPTIMIZER_COLORS.get(name, "tab:orange")
            ax.plot(path[:, 0], path[:, 1], "-", lw=1.2, color=color,
                    label=OPTIMIZER_LABELS.get(name, name))
            ax.plot(path[0, 0], path[0, 1], "o", ms=4, color=color)
        ax.legend(loc="upper right")
    ax.set_xlabel("z1")
    ax.set_ylabel("z2")
    ax.set_title(title)
    return _finish(fig, out_path)


def plot_latent_trajectories(train_codes, labels, paths_by_optimizer, out_path):
    """Latent scatter colored by class with CE paths per optimizer."""
    codes = np.asarray(train_codes)
    labels = np.asarray(labels)
    fig, ax = plt.subplots(figsize=(5, 4))
    for cls, color in ((0, "lightsteelblue"), (1, "navajowhite")):
        mask = labels == cls
        ax.plot(codes[mask, 0], codes[mask, 1], ".", ms=2, color=color,
                label=f"class {cls}", alpha=0.6)
    for name, paths in paths_by_optimizer.items():
        color = OPTIMIZER_COLORS.get(name, "tab:orange")
        for k, path in enumerate(paths):
            path = np.asarray(path)
            ax.plot(path[:, 0], path[:, 1], "-", lw=1.1, color=color,
                    label=OPTIMIZER_LABELS.get(name, name) if k == 0 else None)
    ax.legend(loc="best")
    ax.set_xlabel("z1")
    ax.set_ylabel("z2")
    ax.set_title("counterfactual paths in latent space")
    return _finish(fig, out_path)


def plot_ambient_trajectories(train_x, labels, paths_by_optimizer, out_path):
    """3-D view of the surface data with decoded CE paths."""
    x = np.asarray(train_x)
    labels = np.asarray(labels)
    fig = plt.figure(figsize=(5.5, 4.5))
    ax = fig.add_subplot(projection="3d")
    for cls, color in ((0, "lightsteelblue"), (1, "navajowhite")):
        mask = labels == cls
        ax.scatter(x[mask, 0], x[mask, 1], x[mask, 2], s=2, color=color, alpha=0.4)
    for name, paths in paths_by_optimizer.items():
        color = OPTIMIZER_COLORS.get(name, "tab:orange")
        for k, path in enumerate(paths):
            path = np.asarray(path)
            ax.plot(path[:, 0], path[:, 1], path[:, 2], "-", lw=1.4, color=color,
                    label=OPTIMIZER_LABELS.get(name, name) if k == 0 else None)
    ax.legend(loc="upper right")
    ax.set_title("decoded counterfactual paths")
    return _finish(fig, out_path)


def plot_ctr_curves(curves_by_optimizer, out_path):
    """Four panels against the confidence threshold: CTR, realism,
    closeness and required steps."""
    panels = [
        ("ctr", "CTR"),
        ("l_d", "mean L_D at first hit"),
        ("l2", "mean L2 at first hit"),
        ("iters", "mean steps to hit"),
    ]
    fig, axes = plt.subplots(1, 4, figsize=(14, 3))
    for ax, (key, label) in zip(axes, panels):
        for name, rows in curves_by_optimizer.items():
            taus = [r["threshold"] for r in rows]
            vals = [r[key] for r in rows]
            ax.plot(taus, vals, "o-", ms=3,
                    color=OPTIMIZER_COLORS.get(name, "tab:orange"),
                    label=OPTIMIZER_LABELS.get(name, name))
        ax.set_xlabel("confidence threshold")
        ax.set_ylabel(label)
    axes[0].legend(loc="best")
    fig.tight_layout()
    return _finish(fig, out_path)


def plot_ld_vs_steps(step_curves_by_optimizer, out_path, title="realism along the trajectory"):
    """Mean nearest-training distance as a function of the gradient step."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for name, curve in step_curves_by_optimizer.items():
        curve = np.asarray(curve)
        ax.plot(np.arange(curve.size), curve, "-",
                color=OPTIMIZER_COLORS.get(name, "tab:orange"),
                label=OPTIMIZER_LABELS.get(name, name))
    ax.set_xlabel("gradient step")
    ax.set_ylabel("mean L_D")
    ax.set_title(title)
    ax.legend(loc="best")
    return _finish(fig, out_path)
