"""Matplotlib figure rendering for the report paths.

Every figure is written to a file next to its delimited counterpart; nothing
here opens a window. The Agg backend is forced so the CLI works headless.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

plt.rcParams.update({
    "figure.dpi": 110,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "axes.titlesize": 10,
})


def save_training_curves(rows, path) -> str:
    """Reconstruction loss and codebook usage over training steps."""
    steps = [r.step for r in rows]
    fig, (ax_loss, ax_usage) = plt.subplots(1, 2, figsize=(9, 3.2))
    ax_loss.plot(steps, [r.loss_rec for r in rows], lw=1.2, label="reconstruction")
    ax_loss.plot(steps, [r.loss_total for r in rows], lw=0.9, alpha=0.7, label="total")
    ax_loss.set_xlabel("step")
    ax_loss.set_ylabel("loss")
    ax_loss.set_title("training loss")
    ax_loss.legend(frameon=False)
    ax_usage.plot(steps, [r.codebook_usage for r in rows], lw=1.2, color="tab:green")
    ax_usage.set_xlabel("step")
    ax_usage.set_ylabel("codebook usage")
    ax_usage.set_ylim(-0.02, 1.02)
    ax_usage.set_title("codebook usage")
    fig.tight_layout()
    fig.savefig(str(path))
    plt.close(fig)
    return str(path)


def save_compare_chart(rows, path) -> str:
    """One bar panel per quality metric, one bar per method."""
    metrics = ["sc", "pd", "cr", "gini", "usage"]
    methods = [r["method"] for r in rows]
    fig, axes = plt.subplots(1, len(metrics), figsize=(3.0 * len(metrics), 3.0))
    for ax, metric in zip(axes, metrics):
        values = [r[metric] if r[metric] is not None else np.nan for r in rows]
        ax.bar(range(len(methods)), values, color="tab:blue", alpha=0.8)
        ax.set_xticks(range(len(methods)))
        ax.set_xticklabels(methods, rotation=45, ha="right")
        ax.set_title(metric)
    fig.tight_layout()
    fig.savefig(str(path))
    plt.close(fig)
    return str(path)


def save_projection_figure(csv_rows, mode: str, path, title: str = "") -> str:
    """Scatter of an exported projection (3-D for pca3, colored ring for ring2)."""
    coords = np.array([[float(v) for v in row[1:]] for row in csv_rows])
    if mode == "pca3":
        fig = plt.figure(figsize=(4.5, 4.0))
        ax = fig.add_subplot(projection="3d")
        ax.scatter(coords[:, 0], coords[:, 1], coords[:, 2], s=4, alpha=0.5)
        ax.set_xlabel("pc1")
        ax.set_ylabel("pc2")
        ax.set_zlabel("pc3")
    else:
        fig, ax = plt.subplots(figsize=(4.2, 4.0))
        angles = coords[:, 2]
        ax.scatter(coords[:, 0], coords[:, 1], s=6, c=angles, cmap="hsv",
                   vmin=-np.pi, vmax=np.pi, alpha=0.7)
        ax.set_aspect("equal")
        ax.set_xlim(-1.2, 1.2)
        ax.set_ylim(-1.2, 1.2)
        ax.set_xlabel("x")
        ax.set_ylabel("y")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(str(path))
    plt.close(fig)
    return str(path)
