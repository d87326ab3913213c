"""Representation diagnostics: CKA profiles, head diversity, val loss.

Features for similarity analysis are token-averaged per image, computed
on unmasked inputs against a frozen checkpoint. Layer features are raw
post-residual block outputs; at the final layer a profile is compared
against itself, so it is exactly 1. An attention head is represented by
its attention-probability map averaged over the probe images; head
diversity is the pairwise cosine between those flattened maps. That head
embedding is a modeling choice isolated here so it is easy to swap.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from .model import ModelConfig, Params, encoder_forward, patchify, pooled_layer_features
from .targets import TargetSpec
from .tensor import Tensor
from . import training

__all__ = [
    "FeatureMatrix",
    "AnalysisReport",
    "linear_cka",
    "cka_profile",
    "cross_cka",
    "head_similarity",
    "val_recon_loss",
]


@dataclass
class FeatureMatrix:
    """Per-image feature rows for one layer of one model."""

    data: np.ndarray  # [n_samples, dim]
    layer_index: int | str = 0
    model_tag: str = ""

    def __post_init__(self):
        if self.data.ndim != 2 or self.data.shape[0] < 2:
            raise ValueError("feature matrix needs >= 2 sample rows")
        if not np.isfinite(self.data).all():
            raise ValueError("feature matrix contains non-finite values")


def _as_matrix(x) -> np.ndarray:
    if isinstance(x, FeatureMatrix):
        x = x.data
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("CKA needs [n >= 2, d] matrices")
    return x


def linear_cka(x, y) -> float:
    """Linear centered kernel alignment between two feature matrices.

    Column-centers both arguments and returns
    ||Y^T X||_F^2 / (||X^T X||_F * ||Y^T Y||_F), a score in [0, 1]
    invariant to orthogonal transforms and isotropic scaling.
    """
    xm = _as_matrix(x)
    ym = _as_matrix(y)
    if xm.shape[0] != ym.shape[0]:
        raise ValueError("CKA arguments must share the sample dimension")
    xm = xm - xm.mean(axis=0, keepdims=True)
    ym = ym - ym.mean(axis=0, keepdims=True)
    xx = np.linalg.norm(xm.T @ xm)
    yy = np.linalg.norm(ym.T @ ym)
    if xx == 0.0 or yy == 0.0:
        raise ValueError("CKA is undefined for zero-variance input")
    num = np.linalg.norm(ym.T @ xm) ** 2
    return float(num / (xx * yy))


def cka_profile(
    params: Params,
    config: ModelConfig,
    probe_images: np.ndarray,
) -> dict[int, float]:
    """CKA of every block's features against the final block's features."""
    feats = pooled_layer_features(params, config, probe_images)
    ref = feats[config.depth]
    out: dict[int, float] = {}
    for layer in range(1, config.depth + 1):
        if layer == config.depth:
            out[layer] = 1.0
        else:
            out[layer] = linear_cka(feats[layer], ref)
    return out


def cross_cka(
    params_a: Params,
    config_a: ModelConfig,
    params_b: Params,
    config_b: ModelConfig,
    layer_a: int,
    probe_images: np.ndarray,
) -> dict[int, float]:
    """CKA of model A's layer_a features against every layer of model B."""
    if config_a.n_patches != config_b.n_patches or config_a.image_size != config_b.image_size:
        raise ValueError(
            f"patch grids differ: {config_a.image_size}/{config_a.n_patches} vs "
            f"{config_b.image_size}/{config_b.n_patches}"
        )
    if not 1 <= layer_a <= config_a.depth:
        raise ValueError(f"layer {layer_a} out of range for depth {config_a.depth}")
    fa = pooled_layer_features(params_a, config_a, probe_images)[layer_a]
    fb = pooled_layer_features(params_b, config_b, probe_images)
    return {layer: linear_cka(fa, fb[layer]) for layer in range(1, config_b.depth + 1)}


def head_similarity(
    params: Params,
    config: ModelConfig,
    probe_images: np.ndarray,
    batch_size: int = 64,
) -> dict[int, dict]:
    """Pairwise cosine similarity between attention heads, per layer.

    Returns {layer: {"pairs": [(i, j, cos)], "matrix": [H,H], "mean": float}}
    where the mean is over distinct head pairs.
    """
    if config.num_heads < 2:
        raise ValueError("head similarity needs at least 2 heads")
    n = probe_images.shape[0]
    all_idx = np.arange(config.n_patches)
    sums: list[np.ndarray] | None = None
    for start in range(0, n, batch_size):
        batch = patchify(probe_images[start:start + batch_size], config.patch_size)
        enc = encoder_forward(params, Tensor(batch), all_idx, config, analysis=True)
        if sums is None:
            sums = [p.sum(axis=0) for p in enc.attn_probs]
        else:
            for acc, p in zip(sums, enc.attn_probs):
                acc += p.sum(axis=0)
    out: dict[int, dict] = {}
    for layer, acc in enumerate(sums, start=1):
        maps = (acc / n).reshape(config.num_heads, -1)
        norms = np.linalg.norm(maps, axis=1, keepdims=True)
        unit = maps / norms
        mat = unit @ unit.T
        pairs = [
            (i, j, float(mat[i, j]))
            for i in range(config.num_heads)
            for j in range(i + 1, config.num_heads)
        ]
        out[layer] = {
            "pairs": pairs,
            "matrix": mat,
            "mean": float(np.mean([c for _, _, c in pairs])),
        }
    return out


def val_recon_loss(
    params: Params,
    config: ModelConfig,
    val_images: np.ndarray,
    fixed_mask_seed: int,
    final_spec: TargetSpec | None = None,
) -> float:
    """Final-decoder masked reconstruction MSE under fixed masks."""
    spec = final_spec or TargetSpec(kind="pixel", alpha=1.0, normalize_per_patch=config.pixel_norm)
    return training.validation_loss(params, config, val_images, spec, fixed_mask_seed)


@dataclass
class AnalysisReport:
    """Tabular analysis results, serialized to one CSV per table."""

    cka_profile: dict[int, float] = field(default_factory=dict)
    cross_cka: dict[tuple[int, int], float] = field(default_factory=dict)
    head_similarity: dict[int, dict] = field(default_factory=dict)
    val_loss: list[tuple[int, float]] = field(default_factory=list)

    def validate(self) -> None:
        for score in self.cka_profile.values():
            if not -1e-6 <= score <= 1.0 + 1e-6:
                raise ValueError(f"CKA score {score} outside [0,1]")
        for layer in self.head_similarity.values():
            for _, _, c in layer["pairs"]:
                if not -1.0 - 1e-6 <= c <= 1.0 + 1e-6:
                    raise ValueError(f"head cosine {c} outside [-1,1]")

    def write_csv(self, out_dir: str) -> list[str]:
        self.validate()
        written = []
        if self.cka_profile:
            path = os.path.join(out_dir, "cka_profile.csv")
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["layer", "score"])
                for layer in sorted(self.cka_profile):
                    w.writerow([layer, repr(self.cka_profile[layer])])
            written.append(path)
        if self.cross_cka:
            path = os.path.join(out_dir, "cross_cka.csv")
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["layer_a", "layer_b", "score"])
                for (la, lb) in sorted(self.cross_cka):
                    w.writerow([la, lb, repr(self.cross_cka[(la, lb)])])
            written.append(path)
        if self.head_similarity:
            path = os.path.join(out_dir, "head_sim.csv")
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["layer", "head_i", "head_j", "cosine"])
                for layer in sorted(self.head_similarity):
                    for i, j, c in self.head_similarity[layer]["pairs"]:
                        w.writerow([layer, i, j, repr(c)])
            written.append(path)
        if self.val_loss:
            path = os.path.join(out_dir, "val_loss.csv")
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["epoch", "loss"])
                for epoch, loss in self.val_loss:
                    w.writerow([epoch, repr(loss)])
            written.append(path)
        return written
