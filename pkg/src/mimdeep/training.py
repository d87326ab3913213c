"""Deep-supervised pre-training loop, optimizer, and evaluation protocols.

The pre-training objective is the unweighted sum of one masked-patch MSE
per decoder (auxiliary tap decoders plus the primary one). Runs are
deterministic given the seed: batch order, per-sample masks, and head
initialization are all derived from (seed, step/epoch, sample index), so
a run resumed from a checkpoint replays the remaining steps bitwise.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .checkpoint import save_checkpoint
from .masking import BatchMask, sample_mask, stack_plans
from .model import (
    ModelConfig,
    Params,
    decoder_forward,
    decoder_ids,
    encoder_forward,
    init_head,
    init_params,
    patchify,
    pooled_layer_features,
    reinit_last_k,
)
from .targets import HybridGenerator, TargetSpec, build_targets, hog_target, pixel_target
from .tensor import Tape, Tensor

__all__ = [
    "TrainConfig",
    "StepRecord",
    "PretrainResult",
    "total_loss",
    "adamw_step",
    "cosine_lr",
    "pretrain",
    "finetune",
    "linear_probe",
    "validation_loss",
    "write_log_csv",
]

MODES = ("deepmim", "deepmim_hybrid", "baseline_mae", "supervised")

# fixed stream tags so the seed derivations of independent random
# choices never collide
_TAG_ORDER, _TAG_MASK, _TAG_VAL, _TAG_SPLIT, _TAG_HEAD = 13, 29, 47, 61, 83


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    base_lr: float = 1.5e-4
    weight_decay: float = 0.05
    warmup_epochs: int | None = None  # None: 5% of total steps
    seed: int = 0
    mode: str = "deepmim"
    freeze_first_k: int | None = None
    reinit_last_k: int | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.warmup_epochs is not None and self.warmup_epochs >= self.epochs:
            raise ValueError("warmup_epochs must be smaller than epochs")
        if self.freeze_first_k is not None and self.reinit_last_k is not None:
            raise ValueError("freeze_first_k and reinit_last_k are mutually exclusive")

    @property
    def lr(self) -> float:
        # linear scaling rule: lr = base_lr * batch/256
        return self.base_lr * self.batch_size / 256.0


@dataclass
class StepRecord:
    step: int
    lr: float
    losses: dict[str, float]
    total: float


@dataclass
class PretrainResult:
    params: Params
    opt_state: dict
    records: list[StepRecord]
    val_records: list[tuple[int, float]]
    config: ModelConfig
    train_config: TrainConfig


def total_loss(preds: dict[str, Tensor], targets: dict, plan):
    """Sum of per-decoder masked MSEs, plus the per-decoder breakdown."""
    if set(preds) != set(targets):
        raise ValueError(
            f"prediction/target key mismatch: {sorted(preds)} vs {sorted(targets)}"
        )
    per: dict[str, Tensor] = {}
    tot = None
    for did in sorted(preds):
        tgt = targets[did]
        if not isinstance(tgt, Tensor):
            tgt = Tensor(tgt)
        loss = T.mse_masked(preds[did], tgt, plan)
        per[did] = loss
        tot = loss if tot is None else T.add(tot, loss)
    return tot, per


def _decay_exempt(name: str) -> bool:
    return name.endswith((".b", ".beta", ".gamma")) or "mask_token" in name


def new_opt_state() -> dict:
    return {"t": 0, "m": {}, "v": {}}


def adamw_step(
    params: Params,
    state: dict,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.95),
    eps: float = 1e-8,
    weight_decay: float = 0.05,
) -> None:
    """One decoupled-weight-decay Adam update, in place.

    LayerNorm scales/shifts, biases, and mask tokens are exempt from
    decay. A parameter with no gradient is treated as having a zero
    gradient (its moments still decay).
    """
    state["t"] += 1
    t = state["t"]
    b1, b2 = betas
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, p in params.items():
        if not p.requires_grad:
            continue
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        m = state["m"].get(name)
        v = state["v"].get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * np.square(g)
        state["m"][name] = m
        state["v"][name] = v
        new = p.data
        if weight_decay != 0.0 and not _decay_exempt(name):
            new = new * np.float32(1.0 - lr * weight_decay)
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        p.data = (new - np.float32(lr) * update).astype(np.float32)
        p.grad = None


def cosine_lr(step: int, total_steps: int, warmup_steps: int, base_lr: float) -> float:
    """Linear warmup to base_lr, then half-cosine decay to zero."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * step / warmup_steps
    span = max(1, total_steps - warmup_steps)
    progress = (step - warmup_steps) / span
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * progress))


def _zero_grads(params: Params) -> None:
    for p in params.values():
        p.grad = None


def _batch_plans(config: ModelConfig, seed: int, step: int, sample_ids) -> BatchMask:
    plans = [
        sample_mask(
            config.n_patches,
            config.mask_ratio,
            np.random.default_rng((seed, _TAG_MASK, step, int(sid))),
        )
        for sid in sample_ids
    ]
    return stack_plans(plans)


def _val_plans(config: ModelConfig, seed: int, n: int) -> BatchMask:
    plans = [
        sample_mask(
            config.n_patches,
            config.mask_ratio,
            np.random.default_rng((seed, _TAG_VAL, i)),
        )
        for i in range(n)
    ]
    return stack_plans(plans)


def _gather_patch_rows(arr: np.ndarray, idx: np.ndarray) -> np.ndarray:
    if idx.ndim == 1:
        return arr[:, idx]
    return arr[np.arange(arr.shape[0])[:, None], idx]


def _forward_all_decoders(
    params: Params, config: ModelConfig, patches: np.ndarray, mask: BatchMask
) -> dict[str, Tensor]:
    visible = _gather_patch_rows(patches, mask.visible)
    enc = encoder_forward(params, Tensor(visible), mask.visible, config)
    preds: dict[str, Tensor] = {}
    for tap in config.tap_indices:
        preds[f"tap{tap}"] = decoder_forward(params, f"tap{tap}", enc.tap_tokens[tap], mask, config)
    preds["final"] = decoder_forward(params, "final", enc.final_tokens, mask, config)
    return preds


def validation_loss(
    params: Params,
    config: ModelConfig,
    images: np.ndarray,
    final_spec: TargetSpec,
    seed: int,
    batch_size: int = 64,
) -> float:
    """Final-decoder masked MSE under fixed, seed-derived per-sample masks."""
    n = images.shape[0]
    mask_all = _val_plans(config, seed, n)
    if final_spec.kind == "pixel":
        target_all = pixel_target(images, config.patch_size, final_spec.normalize_per_patch)
    elif final_spec.kind == "hog":
        target_all = hog_target(images, config.patch_size)
    else:
        raise ValueError("validation loss supports pixel and hog targets")
    total, count = 0.0, 0
    for start in range(0, n, batch_size):
        sl = slice(start, min(start + batch_size, n))
        mask = BatchMask(
            n_patches=mask_all.n_patches,
            visible=mask_all.visible[sl],
            masked=mask_all.masked[sl],
            ratio=mask_all.ratio,
        )
        patches = patchify(images[sl], config.patch_size)
        visible = _gather_patch_rows(patches, mask.visible)
        enc = encoder_forward(params, Tensor(visible), mask.visible, config)
        pred = decoder_forward(params, "final", enc.final_tokens, mask, config)
        loss = T.mse_masked(pred, Tensor(target_all[sl]), mask)
        b = sl.stop - sl.start
        total += float(loss.data) * b
        count += b
    return total / count


def _static_targets(
    specs: dict[str, TargetSpec],
    images: np.ndarray,
    config: ModelConfig,
) -> dict[str, np.ndarray] | None:
    """Precompute mask-independent targets for the whole dataset, or None."""
    if any(s.alpha < 1.0 for s in specs.values()):
        return None
    if any(s.kind == "feature_file" for s in specs.values()):
        return None
    cache: dict[tuple, np.ndarray] = {}
    out = {}
    for did, s in specs.items():
        key = (s.kind, s.normalize_per_patch)
        if key not in cache:
            if s.kind == "pixel":
                cache[key] = pixel_target(images, config.patch_size, s.normalize_per_patch)
            else:
                cache[key] = hog_target(images, config.patch_size)
        out[did] = cache[key]
    return out


def pretrain(
    config: ModelConfig,
    train_config: TrainConfig,
    target_specs: dict[str, TargetSpec],
    train_images: np.ndarray,
    val_images: np.ndarray | None = None,
    generator: HybridGenerator | None = None,
    init: Params | None = None,
    resume: tuple[Params, dict, int] | None = None,
    out_dir: str | None = None,
    stop_after_steps: int | None = None,
) -> PretrainResult:
    """Run masked-reconstruction pre-training.

    `resume` is (params, optimizer state, next step index) from a
    checkpoint; the loop then skips already-completed steps, which is
    equivalent to the uninterrupted run because all randomness is
    derived from (seed, step, sample index) rather than a mutable RNG.
    On a non-finite loss the last good state is written to `out_dir`
    (if given) before aborting.
    """
    if set(target_specs) != set(decoder_ids(config)):
        raise ValueError("target specs must cover exactly the configured decoders")
    if train_config.mode == "baseline_mae" and config.tap_indices:
        raise ValueError("baseline_mae mode requires an empty tap set")
    if train_config.mode == "deepmim_hybrid" and any(
        s.alpha < 1.0 for s in target_specs.values()
    ) and generator is None:
        raise ValueError("hybrid mode with alpha < 1 requires a generator")
    n = train_images.shape[0]
    if n == 0:
        raise ValueError("empty training set")
    seed = train_config.seed
    if resume is not None:
        params, opt_state, start_step = resume
    else:
        params = init if init is not None else init_params(config, seed)
        opt_state = new_opt_state()
        start_step = 0

    bs = min(train_config.batch_size, n)
    steps_per_epoch = max(1, n // bs)
    total_steps = train_config.epochs * steps_per_epoch
    if train_config.warmup_epochs is not None:
        warmup_steps = train_config.warmup_epochs * steps_per_epoch
    else:
        warmup_steps = round(0.05 * total_steps)

    static = _static_targets(target_specs, train_images, config)
    final_spec = target_specs["final"]
    all_patches = patchify(train_images, config.patch_size)

    records: list[StepRecord] = []
    val_records: list[tuple[int, float]] = []
    step = 0
    for epoch in range(train_config.epochs):
        if stop_after_steps is not None and step >= stop_after_steps:
            break
        order = np.random.default_rng((seed, _TAG_ORDER, epoch)).permutation(n)
        for b in range(steps_per_epoch):
            if step < start_step:
                step += 1
                continue
            if stop_after_steps is not None and step >= stop_after_steps:
                break
            sample_ids = order[b * bs:(b + 1) * bs]
            lr = cosine_lr(step, total_steps, warmup_steps, train_config.lr)
            mask = _batch_plans(config, seed, step, sample_ids)
            if static is not None:
                targets = {did: arr[sample_ids] for did, arr in static.items()}
            else:
                targets = build_targets(
                    target_specs,
                    train_images[sample_ids],
                    mask,
                    config,
                    generator=generator,
                    sample_indices=sample_ids,
                )
            try:
                _zero_grads(params)
                with Tape() as tape:
                    preds = _forward_all_decoders(
                        params, config, all_patches[sample_ids], mask
                    )
                    tot, per = total_loss(preds, targets, mask)
                tape.backward(tot)
                adamw_step(
                    params,
                    opt_state,
                    lr,
                    weight_decay=train_config.weight_decay,
                )
            except FloatingPointError as err:
                if out_dir is not None:
                    save_checkpoint(
                        os.path.join(out_dir, "last_good.dmim"),
                        config, params, opt_state, seed=seed, step=step,
                    )
                raise RuntimeError(f"aborting at step {step}: {err}") from err
            records.append(
                StepRecord(
                    step=step,
                    lr=lr,
                    losses={did: float(l.data) for did, l in per.items()},
                    total=float(tot.data),
                )
            )
            step += 1
        if stop_after_steps is not None and step >= stop_after_steps:
            break  # stopped mid-epoch: skip the epoch-end validation pass
        if val_images is not None and step > start_step:
            vloss = validation_loss(params, config, val_images, final_spec, seed)
            val_records.append((epoch, vloss))
    return PretrainResult(
        params=params,
        opt_state=opt_state,
        records=records,
        val_records=val_records,
        config=config,
        train_config=train_config,
    )


def write_log_csv(result: PretrainResult, path: str) -> None:
    """StepRecord log: step,lr,loss_total,loss_dec_<id>...,val_loss."""
    ids = sorted(result.records[0].losses) if result.records else []
    val_by_epoch = dict(result.val_records)
    n = result.records
    with open(path, "w") as fh:
        cols = ["step", "lr", "loss_total"] + [f"loss_dec_{d}" for d in ids] + ["val_loss"]
        fh.write(",".join(cols) + "\n")
        for rec in n:
            row = [str(rec.step), repr(rec.lr), repr(rec.total)]
            row += [repr(rec.losses[d]) for d in ids]
            row.append("")
            fh.write(",".join(row) + "\n")
        for epoch, loss in result.val_records:
            row = [str(epoch), "", ""] + ["" for _ in ids] + [repr(loss)]
            fh.write(",".join(row) + "\n")


def _split(n: int, seed: int, holdout: float = 0.2):
    perm = np.random.default_rng((seed, _TAG_SPLIT)).permutation(n)
    k = max(1, int(round(holdout * n)))
    return perm[k:], perm[:k]  # train, held-out


def _train_head_on_features(
    feats: np.ndarray,
    labels: np.ndarray,
    n_classes: int,
    train_config: TrainConfig,
) -> tuple[float, Params]:
    """Train a linear classifier on frozen features; report held-out accuracy."""
    n, dim = feats.shape
    seed = train_config.seed
    tr, ho = _split(n, seed)
    head = init_head(
        dim, n_classes, int(np.random.default_rng((seed, _TAG_HEAD)).integers(0, 2 ** 31))
    )
    state = new_opt_state()
    bs = min(train_config.batch_size, len(tr))
    steps_per_epoch = max(1, len(tr) // bs)
    total_steps = train_config.epochs * steps_per_epoch
    warmup = (
        train_config.warmup_epochs * steps_per_epoch
        if train_config.warmup_epochs is not None
        else round(0.05 * total_steps)
    )
    step = 0
    for epoch in range(train_config.epochs):
        order = np.random.default_rng((seed, _TAG_ORDER, epoch)).permutation(len(tr))
        for b in range(steps_per_epoch):
            ids = tr[order[b * bs:(b + 1) * bs]]
            lr = cosine_lr(step, total_steps, warmup, train_config.lr)
            _zero_grads(head)
            with Tape() as tape:
                logits = T.add(T.matmul(Tensor(feats[ids]), head["head.w"]), head["head.b"])
                loss = T.cross_entropy(logits, labels[ids])
            tape.backward(loss)
            adamw_step(head, state, lr, weight_decay=train_config.weight_decay)
            step += 1
    logits = feats[ho] @ head["head.w"].data + head["head.b"].data
    acc = float((logits.argmax(axis=1) == labels[ho]).mean())
    return acc, head


def linear_probe(
    params: Params,
    config: ModelConfig,
    tap_index: int,
    images: np.ndarray,
    labels: np.ndarray,
    n_classes: int,
    train_config: TrainConfig,
) -> float:
    """Accuracy of a linear head on pooled block features of unmasked images.

    `tap_index == depth` probes the post-LayerNorm final tokens; smaller
    indices probe the raw block outputs.
    """
    if not 1 <= tap_index <= config.depth:
        raise ValueError(f"tap index {tap_index} out of range")
    feats = pooled_layer_features(params, config, images)
    key = "final" if tap_index == config.depth else tap_index
    acc, _ = _train_head_on_features(feats[key], labels, n_classes, train_config)
    return acc


def finetune(
    params: Params,
    config: ModelConfig,
    images: np.ndarray,
    labels: np.ndarray,
    n_classes: int,
    train_config: TrainConfig,
) -> float:
    """Supervised fine-tuning with an average-pool + linear head.

    `freeze_first_k` blocks (plus patch embedding and positions) receive
    no gradient; `freeze_first_k == depth` degenerates to a pure linear
    probe of the final features. `reinit_last_k` re-draws the last K
    encoder blocks before training.
    """
    seed = train_config.seed
    k = train_config.freeze_first_k
    if train_config.reinit_last_k is not None:
        params = reinit_last_k(params, train_config.reinit_last_k, seed, config)
    if k is not None and not 0 <= k <= config.depth:
        raise ValueError(f"freeze_first_k={k} out of range")
    if k == config.depth:
        return linear_probe(params, config, config.depth, images, labels, n_classes, train_config)

    # private copies so freezing does not leak into the caller's tensors
    work: Params = {
        name: Tensor(t.data.copy(), requires_grad=True)
        for name, t in params.items()
        if name.startswith("enc.")
    }
    frozen_prefixes: list[str] = []
    if k:
        frozen_prefixes += ["enc.patch_embed.", "enc.pos"]
        frozen_prefixes += [f"enc.block{i}." for i in range(1, k + 1)]
    for name, p in work.items():
        if any(name.startswith(pfx) for pfx in frozen_prefixes):
            p.requires_grad = False
    head = init_head(
        config.embed_dim, n_classes,
        int(np.random.default_rng((seed, _TAG_HEAD)).integers(0, 2 ** 31)),
    )
    trainable = {n: p for n, p in {**work, **head}.items() if p.requires_grad}

    tr, ho = _split(images.shape[0], seed)
    state = new_opt_state()
    bs = min(train_config.batch_size, len(tr))
    steps_per_epoch = max(1, len(tr) // bs)
    total_steps = train_config.epochs * steps_per_epoch
    warmup = (
        train_config.warmup_epochs * steps_per_epoch
        if train_config.warmup_epochs is not None
        else round(0.05 * total_steps)
    )
    all_idx = np.arange(config.n_patches)
    patches = patchify(images, config.patch_size)
    step = 0
    for epoch in range(train_config.epochs):
        order = np.random.default_rng((seed, _TAG_ORDER, epoch)).permutation(len(tr))
        for b in range(steps_per_epoch):
            ids = tr[order[b * bs:(b + 1) * bs]]
            lr = cosine_lr(step, total_steps, warmup, train_config.lr)
            _zero_grads(trainable)
            with Tape() as tape:
                enc = encoder_forward(work, Tensor(patches[ids]), all_idx, config)
                pooled = T.mean_axis1(enc.final_tokens)
                logits = T.add(T.matmul(pooled, head["head.w"]), head["head.b"])
                loss = T.cross_entropy(logits, labels[ids])
            tape.backward(loss)
            adamw_step(trainable, state, lr, weight_decay=train_config.weight_decay)
            step += 1
    correct = 0
    for start in range(0, len(ho), 64):
        ids = ho[start:start + 64]
        enc = encoder_forward(work, Tensor(patches[ids]), all_idx, config)
        logits = enc.final_tokens.data.mean(axis=1) @ head["head.w"].data + head["head.b"].data
        correct += int((logits.argmax(axis=1) == labels[ids]).sum())
    return correct / len(ho)
