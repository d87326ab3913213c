"""Command-line entry points.

Every command takes a `--config` file plus a few overrides, writes its
artifacts under the output directory, and exits 0 on success or 1 with
a single `error: ...` line on stderr.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import os
import sys

import numpy as np

from . import plots
from .analysis import AnalysisReport, cka_profile, cross_cka, head_similarity, val_recon_loss
from .checkpoint import load_checkpoint, save_checkpoint
from .config import (
    ConfigError,
    build_model_config,
    build_target_specs,
    build_train_config,
    parse_config,
)
from .data import generate_synthetic, load_dataset, save_dataset, write_ppm
from .masking import sample_mask
from .targets import HybridGenerator, generate_reconstruction, read_feature_file_header
from .training import finetune, linear_probe, pretrain, write_log_csv

__all__ = ["main"]


def _load_cfg(args) -> dict[str, str]:
    cfg = parse_config(args.config) if args.config else {}
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = str(args.seed)
    if getattr(args, "out", None) is not None:
        cfg["out_dir"] = args.out
    for flag, key in (
        ("taps", "tap_indices"),
        ("alpha_schedule", "alpha_schedule"),
        ("mask_ratio", "mask_ratio"),
        ("freeze_first_k", "freeze_first_k"),
        ("reinit_last_k", "reinit_last_k"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            cfg[key] = str(value)
    if getattr(args, "shared_decoder", False):
        cfg["shared_decoder"] = "true"
    return cfg


def _require(cfg: dict, key: str) -> str:
    if key not in cfg:
        raise ConfigError(f"missing required config key {key!r}")
    return cfg[key]


def _out_dir(cfg: dict) -> str:
    out = _require(cfg, "out_dir")
    os.makedirs(out, exist_ok=True)
    return out


def cmd_gen_data(args) -> None:
    cfg = _load_cfg(args)
    dataset = generate_synthetic(
        n_samples=int(cfg.get("n_samples", "512")),
        image_size=int(cfg.get("image_size", "32")),
        n_classes=int(cfg.get("n_classes", "4")),
        seed=int(cfg.get("seed", "0")),
    )
    out = _out_dir(cfg)
    save_dataset(dataset, out)
    print(f"wrote {len(dataset)} images to {out}")


def cmd_pretrain(args) -> None:
    cfg = _load_cfg(args)
    model_config = build_model_config(cfg)
    train_config = build_train_config(cfg)
    specs = build_target_specs(cfg, model_config)
    if cfg.get("target_kind") == "feature_file":
        path = _require(cfg, "feature_path")
        _, n, feat_dim = read_feature_file_header(path)
        if n != model_config.n_patches:
            raise ConfigError(
                f"feature file grid N={n} does not match model patch count "
                f"{model_config.n_patches}"
            )
        model_config = dataclasses.replace(model_config, target_dim=feat_dim)
    train = load_dataset(_require(cfg, "train_dir"))
    val = load_dataset(cfg["val_dir"]) if "val_dir" in cfg else None
    generator = None
    if any(s.alpha < 1.0 for s in specs.values()):
        gen_path = cfg.get("generator_checkpoint")
        if not gen_path:
            raise ConfigError("alpha_schedule below 1 requires generator_checkpoint")
        gen_ckpt = load_checkpoint(gen_path)
        generator = HybridGenerator(params=gen_ckpt.params, config=gen_ckpt.config)
    out = _out_dir(cfg)
    resume = None
    if args.resume:
        ckpt = load_checkpoint(args.resume)
        if ckpt.opt_state is None:
            raise ConfigError(f"{args.resume} has no optimizer state, cannot resume")
        resume = (ckpt.params, ckpt.opt_state, ckpt.step)
    result = pretrain(
        model_config,
        train_config,
        specs,
        train.images,
        val_images=val.images if val else None,
        generator=generator,
        resume=resume,
        out_dir=out,
    )
    next_step = result.records[-1].step + 1 if result.records else 0
    save_checkpoint(
        os.path.join(out, "checkpoint.dmim"),
        model_config, result.params, result.opt_state,
        seed=train_config.seed, step=next_step,
    )
    write_log_csv(result, os.path.join(out, "train_log.csv"))
    if result.val_records:
        plots.plot_val_loss(result.val_records, os.path.join(out, "val_loss.png"))
    print(f"pretrained {next_step} steps; artifacts in {out}")


def cmd_finetune(args) -> None:
    cfg = _load_cfg(args)
    ckpt = load_checkpoint(_require(cfg, "checkpoint"))
    train_config = build_train_config(cfg)
    data = load_dataset(_require(cfg, "data_dir"))
    if data.labels is None:
        raise ConfigError("finetune needs a labeled dataset (labels.tsv)")
    n_classes = int(data.labels.max()) + 1
    acc = finetune(ckpt.params, ckpt.config, data.images, data.labels, n_classes, train_config)
    out = _out_dir(cfg)
    with open(os.path.join(out, "finetune_result.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["freeze_first_k", "reinit_last_k", "seed", "accuracy"])
        w.writerow([
            train_config.freeze_first_k, train_config.reinit_last_k,
            train_config.seed, repr(acc),
        ])
    print(f"finetune accuracy: {acc:.4f}")


def cmd_probe(args) -> None:
    cfg = _load_cfg(args)
    ckpt = load_checkpoint(_require(cfg, "checkpoint"))
    train_config = build_train_config(cfg)
    data = load_dataset(_require(cfg, "data_dir"))
    if data.labels is None:
        raise ConfigError("probe needs a labeled dataset (labels.tsv)")
    tap = int(cfg.get("tap_index", str(ckpt.config.depth)))
    n_classes = int(data.labels.max()) + 1
    acc = linear_probe(ckpt.params, ckpt.config, tap, data.images, data.labels, n_classes, train_config)
    out = _out_dir(cfg)
    with open(os.path.join(out, "probe_result.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["tap_index", "seed", "accuracy"])
        w.writerow([tap, train_config.seed, repr(acc)])
    print(f"probe accuracy at block {tap}: {acc:.4f}")


def cmd_analyze(args) -> None:
    cfg = _load_cfg(args)
    ckpt = load_checkpoint(_require(cfg, "checkpoint"))
    data = load_dataset(_require(cfg, "data_dir"))
    seed = int(cfg.get("seed", "0"))
    report = AnalysisReport()
    report.cka_profile = cka_profile(ckpt.params, ckpt.config, data.images)
    report.head_similarity = head_similarity(ckpt.params, ckpt.config, data.images)
    report.val_loss = [(0, val_recon_loss(ckpt.params, ckpt.config, data.images, seed))]
    if "checkpoint_b" in cfg:
        other = load_checkpoint(cfg["checkpoint_b"])
        layer_a = int(cfg.get("layer_a", str(max(1, ckpt.config.depth * 2 // 3))))
        scores = cross_cka(
            ckpt.params, ckpt.config, other.params, other.config, layer_a, data.images
        )
        report.cross_cka = {(layer_a, lb): s for lb, s in scores.items()}
    out = _out_dir(cfg)
    report.write_csv(out)
    plots.plot_cka_profile(report.cka_profile, os.path.join(out, "cka_profile.png"))
    plots.plot_head_similarity(report.head_similarity, os.path.join(out, "head_sim.png"))
    if report.cross_cka:
        plots.plot_cross_cka(report.cross_cka, os.path.join(out, "cross_cka.png"))
    print(f"analysis written to {out}")


def cmd_reconstruct(args) -> None:
    cfg = _load_cfg(args)
    ckpt = load_checkpoint(_require(cfg, "checkpoint"))
    data = load_dataset(_require(cfg, "data_dir"))
    seed = int(cfg.get("seed", "0"))
    gen = HybridGenerator(params=ckpt.params, config=ckpt.config)
    out = _out_dir(cfg)
    rng = np.random.default_rng((seed, 71))
    for i in range(len(data)):
        plan = sample_mask(ckpt.config.n_patches, ckpt.config.mask_ratio, rng)
        recon = generate_reconstruction(gen, data.images[i:i + 1], plan)[0]
        write_ppm(recon, os.path.join(out, f"recon_{i:05d}.ppm"))
    print(f"wrote {len(data)} reconstructions to {out}")


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="run configuration file")
    sub.add_argument("--seed", type=int, help="override the config seed")
    sub.add_argument("--out", help="override the output directory")
    sub.add_argument("--taps", help="comma-separated tap block indices, 'auto' or 'none'")
    sub.add_argument("--alpha-schedule", dest="alpha_schedule",
                     help="comma-separated blend ratios, one per decoder")
    sub.add_argument("--mask-ratio", dest="mask_ratio", type=float)
    sub.add_argument("--freeze-first-k", dest="freeze_first_k", type=int)
    sub.add_argument("--reinit-last-k", dest="reinit_last_k", type=int)
    sub.add_argument("--shared-decoder", dest="shared_decoder", action="store_true")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="mimdeep",
        description="Deep-supervised masked image modeling at desk scale",
    )
    subs = parser.add_subparsers(dest="command", required=True)
    for name, fn in (
        ("gen-data", cmd_gen_data),
        ("pretrain", cmd_pretrain),
        ("finetune", cmd_finetune),
        ("probe", cmd_probe),
        ("analyze", cmd_analyze),
        ("reconstruct", cmd_reconstruct),
    ):
        sub = subs.add_parser(name)
        _add_common(sub)
        if name == "pretrain":
            sub.add_argument("--resume", help="checkpoint to resume from")
        sub.set_defaults(fn=fn)
    args = parser.parse_args(argv)
    try:
        args.fn(args)
    except (ConfigError, OSError, ValueError, RuntimeError, FloatingPointError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
