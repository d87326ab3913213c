"""Random patch masking and masked/visible row selection."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, gather_axis1

__all__ = [
    "MaskPlan",
    "BatchMask",
    "sample_mask",
    "stack_plans",
    "gather_visible",
    "extract_masked",
]


@dataclass(frozen=True)
class MaskPlan:
    """Per-sample partition of patch indices into visible and masked sets."""

    n_patches: int
    visible: tuple[int, ...]
    masked: tuple[int, ...]
    ratio: float

    def __post_init__(self):
        vis, msk = set(self.visible), set(self.masked)
        if not vis or not msk:
            raise ValueError("mask plan needs at least one visible and one masked patch")
        if vis & msk:
            raise ValueError("visible and masked sets overlap")
        if vis | msk != set(range(self.n_patches)):
            raise ValueError("visible and masked sets must partition the patch grid")
        if list(self.visible) != sorted(vis) or list(self.masked) != sorted(msk):
            raise ValueError("index sequences must be sorted")


@dataclass(frozen=True)
class BatchMask:
    """Per-sample mask plans stacked into rectangular index arrays.

    All plans must share the same grid and ratio so the visible/masked
    counts agree; rows follow the batch order.
    """

    n_patches: int
    visible: np.ndarray  # [B, n_visible] int64
    masked: np.ndarray   # [B, n_masked] int64
    ratio: float


def stack_plans(plans) -> BatchMask:
    plans = list(plans)
    if not plans:
        raise ValueError("cannot stack an empty plan list")
    n = plans[0].n_patches
    ratio = plans[0].ratio
    if any(p.n_patches != n or len(p.visible) != len(plans[0].visible) for p in plans):
        raise ValueError("plans in a batch must share grid size and mask counts")
    return BatchMask(
        n_patches=n,
        visible=np.array([p.visible for p in plans], dtype=np.int64),
        masked=np.array([p.masked for p in plans], dtype=np.int64),
        ratio=ratio,
    )


def sample_mask(n_patches: int, ratio: float, rng: np.random.Generator) -> MaskPlan:
    """Uniform random mask over `n_patches`; |masked| = round(ratio * n)."""
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"mask ratio must be in (0,1), got {ratio}")
    # round half away from zero (ratio > 0 here, so half rounds up)
    n_masked = int(math.floor(ratio * n_patches + 0.5))
    if n_masked < 1 or n_masked >= n_patches:
        raise ValueError(
            f"degenerate mask: {n_masked} of {n_patches} patches masked"
        )
    perm = rng.permutation(n_patches)
    masked = tuple(sorted(int(i) for i in perm[:n_masked]))
    visible = tuple(sorted(int(i) for i in perm[n_masked:]))
    return MaskPlan(n_patches=n_patches, visible=visible, masked=masked, ratio=ratio)


def gather_visible(tokens: Tensor, plan: MaskPlan) -> Tensor:
    """Select visible rows of a [B, N, D] tensor in ascending index order."""
    if tokens.shape[1] != plan.n_patches:
        raise ValueError(
            f"token grid {tokens.shape[1]} != plan grid {plan.n_patches}"
        )
    return gather_axis1(tokens, plan.visible)


def extract_masked(target: Tensor, plan: MaskPlan) -> Tensor:
    """Select masked rows of a [B, N, D] tensor in ascending index order."""
    if target.shape[1] != plan.n_patches:
        raise ValueError(
            f"token grid {target.shape[1]} != plan grid {plan.n_patches}"
        )
    return gather_axis1(target, plan.masked)
