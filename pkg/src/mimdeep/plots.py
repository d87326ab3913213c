"""Figure rendering for analysis reports."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

__all__ = [
    "plot_cka_profile",
    "plot_cross_cka",
    "plot_head_similarity",
    "plot_val_loss",
]


def plot_cka_profile(profile: dict[int, float], path: str) -> None:
    layers = sorted(profile)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(layers, [profile[l] for l in layers], marker="o")
    ax.set_xlabel("block")
    ax.set_ylabel("CKA vs final block")
    ax.set_ylim(0.0, 1.05)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_cross_cka(scores: dict[tuple[int, int], float], path: str) -> None:
    las = sorted({la for la, _ in scores})
    lbs = sorted({lb for _, lb in scores})
    grid = np.zeros((len(las), len(lbs)))
    for (la, lb), s in scores.items():
        grid[las.index(la), lbs.index(lb)] = s
    fig, ax = plt.subplots(figsize=(5, 4))
    im = ax.imshow(grid, vmin=0.0, vmax=1.0, cmap="viridis", aspect="auto")
    ax.set_xticks(range(len(lbs)), lbs)
    ax.set_yticks(range(len(las)), las)
    ax.set_xlabel("model B block")
    ax.set_ylabel("model A block")
    fig.colorbar(im, ax=ax, label="CKA")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_head_similarity(head_sim: dict[int, dict], path: str) -> None:
    layers = sorted(head_sim)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for layer in layers:
        cosines = [c for _, _, c in head_sim[layer]["pairs"]]
        ax.scatter([layer] * len(cosines), cosines, s=8, alpha=0.4, color="tab:blue")
    ax.plot(layers, [head_sim[l]["mean"] for l in layers], marker="o", color="tab:red",
            label="layer mean")
    ax.set_xlabel("block")
    ax.set_ylabel("pairwise head cosine")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_val_loss(val_records, path: str) -> None:
    epochs = [e for e, _ in val_records]
    losses = [l for _, l in val_records]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(epochs, losses, marker=".")
    ax.set_xlabel("epoch")
    ax.set_ylabel("validation reconstruction loss")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
