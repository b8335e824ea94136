"""Figure rendering for run outputs.

Every report-style command writes its delimited results and a PNG
rendering of the same numbers next to it. Rendering is headless
(Agg backend) and deterministic.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def training_figure(log: list, path) -> None:
    """Loss curve with validation SI-SDRi on a twin axis."""
    epochs = [row["epoch"] for row in log]
    losses = [row["train_loss"] for row in log]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(epochs, losses, color="tab:blue", label="train loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("train loss", color="tab:blue")
    val_pts = [(r["epoch"], r["val_si_sdri"]) for r in log if np.isfinite(r["val_si_sdri"])]
    if val_pts:
        ax2 = ax.twinx()
        ax2.plot(*zip(*val_pts), color="tab:orange", marker="o", label="val SI-SDRi")
        ax2.set_ylabel("val SI-SDRi (dB)", color="tab:orange")
    ax.set_title("training progress")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def evaluation_figure(si_sdri_values: list, mean_value: float, path) -> None:
    """Per-utterance SI-SDRi bars with the mean drawn through them."""
    fig, ax = plt.subplots(figsize=(8, 4))
    ax.bar(range(len(si_sdri_values)), si_sdri_values, color="tab:blue")
    ax.axhline(mean_value, color="tab:orange", linestyle="--",
               label=f"mean {mean_value:.2f} dB")
    ax.set_xlabel("utterance")
    ax.set_ylabel("SI-SDRi (dB)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def sweep_figure(l_values: list, means: list, path) -> None:
    """Mean SI-SDRi as a function of the unfolded iteration count."""
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(l_values, means, marker="o")
    ax.set_xlabel("unfolded iterations L")
    ax.set_ylabel("mean SI-SDRi (dB)")
    ax.set_title("iteration sweep")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def cluster_bench_figure(rows: list, path) -> None:
    """Centroid-to-attractor error of both metrics, per instance."""
    idx = [r["instance"] for r in rows]
    fig, axes = plt.subplots(1, 2, figsize=(10, 4), sharex=True)
    for ax, field, title in (
        (axes[0], "cosine", "cosine distance to ideal attractors"),
        (axes[1], "euclid", "Euclidean distance to ideal attractors"),
    ):
        ax.plot(idx, [r[f"euclidean_{field}"] for r in rows], ".",
                label="euclidean k-means", alpha=0.6)
        ax.plot(idx, [r[f"spherical_{field}"] for r in rows], ".",
                label="spherical k-means", alpha=0.6)
        ax.set_xlabel("instance")
        ax.set_title(title, fontsize=10)
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
