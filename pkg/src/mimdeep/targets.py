"""Reconstruction targets: pixels, HOG, stored features, hybrid blends.

A hybrid target is a convex blend of the raw image with the inpainting
of a frozen, previously pre-trained model ("generator"); the blend ratio
rises toward deeper decoders so shallow blocks face easier targets.
Blending happens in raw pixel space; per-patch normalization, when
enabled, is applied to the blended image afterwards.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .masking import MaskPlan
from .model import ModelConfig, decoder_ids, encoder_forward, decoder_forward, patchify, unpatchify
from .tensor import Tensor

__all__ = [
    "TargetSpec",
    "HybridGenerator",
    "default_alpha_schedule",
    "pixel_target",
    "hog_target",
    "HOG_DIM",
    "write_feature_file",
    "read_feature_file_header",
    "feature_file_target",
    "generate_reconstruction",
    "blend",
    "build_targets",
]

TARGET_KINDS = ("pixel", "hog", "feature_file")

# fixed HOG recipe: 9 unsigned orientation bins, 2x2 cells per patch,
# per-cell L2 normalization
HOG_BINS = 9
HOG_CELLS = 2
HOG_DIM = HOG_BINS * HOG_CELLS * HOG_CELLS

_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32)


@dataclass(frozen=True)
class TargetSpec:
    """Declarative description of one decoder's reconstruction target."""

    kind: str = "pixel"
    alpha: float = 1.0
    normalize_per_patch: bool = True
    generator_checkpoint: str | None = None
    feature_path: str | None = None

    def __post_init__(self):
        if self.kind not in TARGET_KINDS:
            raise ValueError(f"unknown target kind {self.kind!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0,1], got {self.alpha}")
        if self.kind != "pixel" and self.alpha < 1.0:
            raise ValueError("blending is defined only for pixel targets")
        if self.kind == "feature_file" and not self.feature_path:
            raise ValueError("feature_file target needs a feature_path")


def default_alpha_schedule(n_taps: int) -> tuple[float, ...]:
    """Progressive ratios (0, 1/M, ..., (M-1)/M, 1) for taps + final."""
    if n_taps == 0:
        return (1.0,)
    return tuple(i / n_taps for i in range(n_taps)) + (1.0,)


@dataclass
class HybridGenerator:
    """Frozen pre-trained model used for inference only."""

    params: dict[str, Tensor]
    config: ModelConfig


def pixel_target(image: np.ndarray, patch_size: int, normalize_per_patch: bool) -> np.ndarray:
    """Patchified pixels, optionally standardized per patch (eps 1e-6)."""
    patches = patchify(image, patch_size)
    if not normalize_per_patch:
        return patches
    mean = patches.mean(axis=-1, keepdims=True)
    var = patches.var(axis=-1, keepdims=True)
    return ((patches - mean) / np.sqrt(var + 1e-6)).astype(np.float32)


def _patch_gradients(gray_patch: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Centered differences inside the patch, replicated at the edges."""
    padded_x = np.pad(gray_patch, ((0, 0), (1, 1)), mode="edge")
    padded_y = np.pad(gray_patch, ((1, 1), (0, 0)), mode="edge")
    gx = 0.5 * (padded_x[:, 2:] - padded_x[:, :-2])
    gy = 0.5 * (padded_y[2:, :] - padded_y[:-2, :])
    return gx, gy


def hog_patch(gray_patch: np.ndarray) -> np.ndarray:
    """36-dim HOG descriptor of one grayscale patch."""
    p = gray_patch.shape[0]
    gx, gy = _patch_gradients(gray_patch)
    mag = np.sqrt(gx * gx + gy * gy)
    ang = np.mod(np.arctan2(gy, gx), np.pi)  # unsigned orientation
    bins = np.minimum((ang / (np.pi / HOG_BINS)).astype(np.int64), HOG_BINS - 1)
    half = p // 2
    out = np.zeros((HOG_CELLS, HOG_CELLS, HOG_BINS), dtype=np.float32)
    for cy in range(HOG_CELLS):
        for cx in range(HOG_CELLS):
            ys = slice(cy * half, (cy + 1) * half if cy < HOG_CELLS - 1 else p)
            xs = slice(cx * half, (cx + 1) * half if cx < HOG_CELLS - 1 else p)
            hist = np.bincount(
                bins[ys, xs].reshape(-1), weights=mag[ys, xs].reshape(-1),
                minlength=HOG_BINS,
            )
            norm = np.sqrt((hist * hist).sum())
            out[cy, cx] = hist / (norm + 1e-6)
    return out.reshape(-1)


def hog_target(image: np.ndarray, patch_size: int) -> np.ndarray:
    """Per-patch oriented-gradient histograms, [B, N, 36]."""
    b = image.shape[0]
    gray = np.tensordot(_LUMA, image, axes=([0], [1]))  # [B,H,W]
    p = patch_size
    gh, gw = gray.shape[1] // p, gray.shape[2] // p
    out = np.zeros((b, gh * gw, HOG_DIM), dtype=np.float32)
    for bi in range(b):
        for iy in range(gh):
            for ix in range(gw):
                patch = gray[bi, iy * p:(iy + 1) * p, ix * p:(ix + 1) * p]
                out[bi, iy * gw + ix] = hog_patch(patch)
    return out


_FEATURE_MAGIC = b"DMFT"
_FEATURE_VERSION = 1


def write_feature_file(path: str, features: np.ndarray) -> None:
    """Write [n_samples, N, feat_dim] float32 features in DMFT format."""
    arr = np.ascontiguousarray(features, dtype=np.float32)
    if arr.ndim != 3:
        raise ValueError("feature array must be [n_samples, N, feat_dim]")
    with open(path, "wb") as fh:
        fh.write(_FEATURE_MAGIC)
        fh.write(struct.pack("<IIII", _FEATURE_VERSION, *arr.shape))
        fh.write(arr.astype("<f4").tobytes())


def read_feature_file_header(path: str) -> tuple[int, int, int]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _FEATURE_MAGIC:
            raise IOError(f"{path}: bad magic {magic!r}, expected {_FEATURE_MAGIC!r}")
        version, n_samples, n, feat_dim = struct.unpack("<IIII", fh.read(16))
        if version != _FEATURE_VERSION:
            raise IOError(f"{path}: unsupported feature file version {version}")
    return n_samples, n, feat_dim


def feature_file_target(
    path: str, sample_indices: Sequence[int], n_patches: int
) -> np.ndarray:
    """Load stored features for a batch of dataset sample indices."""
    n_samples, n, feat_dim = read_feature_file_header(path)
    if n != n_patches:
        raise ValueError(
            f"{path}: feature grid N={n} does not match model patch count {n_patches}"
        )
    rec = n * feat_dim * 4
    out = np.empty((len(sample_indices), n, feat_dim), dtype=np.float32)
    with open(path, "rb") as fh:
        for row, idx in enumerate(sample_indices):
            if not 0 <= idx < n_samples:
                raise IOError(
                    f"{path}: sample index {idx} out of range (file holds {n_samples})"
                )
            fh.seek(20 + idx * rec)
            out[row] = np.frombuffer(fh.read(rec), dtype="<f4").reshape(n, feat_dim)
    return out


def generate_reconstruction(
    gen: HybridGenerator, image: np.ndarray, plan: MaskPlan
) -> np.ndarray:
    """Inpaint masked patches with the frozen generator's predictions.

    Visible pixels are copied from the original image. If the generator
    was trained on per-patch normalized pixels, its predictions are
    de-normalized with the original image's own patch statistics.
    """
    cfg = gen.config
    if plan.n_patches != cfg.n_patches or image.shape[-1] != cfg.image_size:
        raise ValueError(
            f"generator geometry {cfg.image_size}/{cfg.n_patches} does not match "
            f"image {image.shape} with plan grid {plan.n_patches}"
        )
    patches = patchify(image, cfg.patch_size)
    vis = np.asarray(plan.visible, dtype=np.int64)
    msk = np.asarray(plan.masked, dtype=np.int64)
    if vis.ndim == 1:
        visible = patches[:, vis]
    else:
        visible = patches[np.arange(patches.shape[0])[:, None], vis]
    enc = encoder_forward(gen.params, Tensor(visible), vis, cfg)
    pred = decoder_forward(gen.params, "final", enc.final_tokens, plan, cfg).data
    if cfg.pixel_norm:
        mean = patches.mean(axis=-1, keepdims=True)
        std = np.sqrt(patches.var(axis=-1, keepdims=True) + 1e-6)
        pred = pred * std + mean
    out = patches.copy()
    if msk.ndim == 1:
        out[:, msk] = pred[:, msk]
    else:
        rows = np.arange(patches.shape[0])[:, None]
        out[rows, msk] = pred[rows, msk]
    return unpatchify(out.astype(np.float32), cfg.patch_size, cfg.image_size)


def blend(x: np.ndarray, x_hat: np.ndarray, alpha: float) -> np.ndarray:
    """Convex combination alpha*x + (1-alpha)*x_hat, exact at endpoints."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0,1], got {alpha}")
    if x.shape != x_hat.shape:
        raise ValueError(f"blend shape mismatch: {x.shape} vs {x_hat.shape}")
    if alpha == 1.0:
        return x.copy()
    if alpha == 0.0:
        return x_hat.copy()
    return (np.float32(alpha) * x + np.float32(1.0 - alpha) * x_hat).astype(np.float32)


def build_targets(
    specs: dict[str, TargetSpec],
    image: np.ndarray,
    plan: MaskPlan,
    config: ModelConfig,
    generator: HybridGenerator | None = None,
    sample_indices: Sequence[int] | None = None,
) -> dict[str, np.ndarray]:
    """Produce the per-decoder target map for one batch.

    The generator runs at most once per call; its reconstruction is
    shared by every blended decoder. Decoders whose specs coincide share
    the identical target array object.
    """
    if set(specs) != set(decoder_ids(config)):
        raise ValueError("target specs must cover exactly the configured decoders")
    kinds = {s.kind for s in specs.values()}
    if len(kinds) != 1:
        raise ValueError(f"all decoders must share one target kind, got {kinds}")
    kind = kinds.pop()
    needs_blend = any(s.alpha < 1.0 for s in specs.values())
    x_hat = None
    if needs_blend:
        if generator is None:
            raise ValueError("hybrid targets (alpha < 1) require a generator")
        x_hat = generate_reconstruction(generator, image, plan)

    cache: dict[tuple, np.ndarray] = {}
    out: dict[str, np.ndarray] = {}
    for did, spec in specs.items():
        key = (spec.kind, spec.alpha, spec.normalize_per_patch)
        if key not in cache:
            if kind == "pixel":
                img = blend(image, x_hat, spec.alpha) if spec.alpha < 1.0 else image
                cache[key] = pixel_target(img, config.patch_size, spec.normalize_per_patch)
            elif kind == "hog":
                cache[key] = hog_target(image, config.patch_size)
            else:
                if sample_indices is None:
                    raise ValueError("feature_file targets need sample indices")
                cache[key] = feature_file_target(
                    spec.feature_path, sample_indices, config.n_patches
                )
        out[did] = cache[key]
    return out
