"""Multi-seed comparison harness: deep supervision vs plain baseline.

Pre-trains paired depth-8 toy models (with and without tap decoders)
over several seeds on the synthetic set, then reports three tables:
final-decoder validation reconstruction loss, mean mid-layer CKA against
the final block, and linear-probe accuracy at the tap layers. Expected
directions (supervised run no worse on each metric) are soft checks: a
direction counts as a hard violation only when every seed violates it.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from .analysis import cka_profile
from .data import generate_synthetic
from .model import ModelConfig, decoder_ids
from .targets import TargetSpec
from .training import TrainConfig, linear_probe, pretrain, validation_loss

__all__ = ["TrendResult", "run_trend_suite"]

_MID_LAYERS = (3, 4, 5, 6)


@dataclass
class TrendResult:
    val_loss: dict[int, dict[str, float]] = field(default_factory=dict)
    mid_cka: dict[int, dict[str, float]] = field(default_factory=dict)
    probe_acc: dict[int, dict[str, dict[int, float]]] = field(default_factory=dict)
    # per metric: seeds whose direction check failed
    violations: dict[str, list[int]] = field(default_factory=dict)

    def hard_violations(self, n_seeds: int) -> list[str]:
        return [m for m, seeds in self.violations.items() if len(seeds) == n_seeds]


def _write_table(path: str, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow(row)


def run_trend_suite(
    out_dir: str,
    seeds: tuple[int, ...] = (0, 1, 2),
    steps: int = 2000,
    n_train: int = 256,
    n_val: int = 64,
    n_probe: int = 256,
    data_seed: int = 1234,
) -> TrendResult:
    os.makedirs(out_dir, exist_ok=True)
    train = generate_synthetic(n_train, 32, 4, seed=data_seed)
    val = generate_synthetic(n_val, 32, 4, seed=data_seed + 1)
    probe_set = generate_synthetic(n_probe, 32, 4, seed=data_seed + 2)

    batch = 32
    steps_per_epoch = n_train // batch
    epochs = steps // steps_per_epoch

    result = TrendResult()
    variants = {
        "deep": ModelConfig(image_size=32, patch_size=8, embed_dim=64, depth=8, num_heads=4),
        "baseline": ModelConfig(
            image_size=32, patch_size=8, embed_dim=64, depth=8, num_heads=4, tap_indices=()
        ),
    }
    tap_layers = variants["deep"].tap_indices

    for seed in seeds:
        for tag, cfg in variants.items():
            specs = {d: TargetSpec() for d in decoder_ids(cfg)}
            tc = TrainConfig(
                epochs=epochs,
                batch_size=batch,
                seed=seed,
                mode="deepmim" if tag == "deep" else "baseline_mae",
            )
            run = pretrain(cfg, tc, specs, train.images)
            vloss = validation_loss(
                run.params, cfg, val.images, specs["final"], seed=data_seed + 3
            )
            result.val_loss.setdefault(seed, {})[tag] = vloss
            profile = cka_profile(run.params, cfg, probe_set.images)
            result.mid_cka.setdefault(seed, {})[tag] = float(
                np.mean([profile[l] for l in _MID_LAYERS])
            )
            probe_tc = TrainConfig(epochs=100, batch_size=64, base_lr=1e-2, seed=seed)
            accs = {
                layer: linear_probe(
                    run.params, cfg, layer, probe_set.images, probe_set.labels, 4, probe_tc
                )
                for layer in tap_layers
            }
            result.probe_acc.setdefault(seed, {})[tag] = accs

    checks = {
        "val_loss": lambda s: result.val_loss[s]["deep"] <= result.val_loss[s]["baseline"],
        "mid_cka": lambda s: result.mid_cka[s]["deep"] >= result.mid_cka[s]["baseline"],
        "probe_acc": lambda s: (
            np.mean(list(result.probe_acc[s]["deep"].values()))
            >= np.mean(list(result.probe_acc[s]["baseline"].values()))
        ),
    }
    for metric, ok in checks.items():
        result.violations[metric] = [s for s in seeds if not ok(s)]

    _write_table(
        os.path.join(out_dir, "trend_val_loss.csv"),
        ["seed", "deep", "baseline"],
        [[s, repr(result.val_loss[s]["deep"]), repr(result.val_loss[s]["baseline"])] for s in seeds],
    )
    _write_table(
        os.path.join(out_dir, "trend_mid_cka.csv"),
        ["seed", "deep", "baseline"],
        [[s, repr(result.mid_cka[s]["deep"]), repr(result.mid_cka[s]["baseline"])] for s in seeds],
    )
    _write_table(
        os.path.join(out_dir, "trend_probe_acc.csv"),
        ["seed", "layer", "deep", "baseline"],
        [
            [s, layer, repr(result.probe_acc[s]["deep"][layer]), repr(result.probe_acc[s]["baseline"][layer])]
            for s in seeds
            for layer in tap_layers
        ],
    )
    _write_table(
        os.path.join(out_dir, "trend_violations.csv"),
        ["metric", "violating_seeds"],
        [[m, " ".join(str(s) for s in v)] for m, v in result.violations.items()],
    )
    return result
