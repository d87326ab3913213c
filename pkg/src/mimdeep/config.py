"""Line-based `key = value` run configuration files.

Order-independent; `#` starts a comment; unknown or duplicate keys are
rejected with the offending line number. Values stay strings until a
builder coerces them, so one file can feed several commands.
"""

from __future__ import annotations

from .model import ModelConfig, default_taps, decoder_ids
from .targets import TargetSpec, default_alpha_schedule
from .training import TrainConfig

__all__ = [
    "ConfigError",
    "parse_config",
    "build_model_config",
    "build_train_config",
    "build_target_specs",
]


class ConfigError(ValueError):
    pass


KNOWN_KEYS = {
    # model
    "image_size", "patch_size", "embed_dim", "depth", "num_heads", "mlp_ratio",
    "decoder_dim", "decoder_depth", "decoder_heads", "tap_indices", "mask_ratio",
    "shared_decoder",
    # targets
    "target_kind", "normalize_per_patch", "alpha_schedule",
    "generator_checkpoint", "feature_path",
    # training
    "epochs", "batch_size", "base_lr", "weight_decay", "warmup_epochs",
    "seed", "mode", "freeze_first_k", "reinit_last_k",
    # data / io
    "train_dir", "val_dir", "data_dir", "out_dir",
    "checkpoint", "checkpoint_b", "layer_a", "tap_index",
    "n_samples", "n_classes",
}


def parse_config(path: str) -> dict[str, str]:
    values: dict[str, str] = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw.rstrip()!r}")
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key not in KNOWN_KEYS:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            if key in values:
                raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
            values[key] = value
    return values


def _get_bool(cfg: dict, key: str, default: bool) -> bool:
    raw = cfg.get(key)
    if raw is None:
        return default
    if raw not in ("true", "false"):
        raise ConfigError(f"{key} must be 'true' or 'false', got {raw!r}")
    return raw == "true"


def _get_int(cfg: dict, key: str, default=None):
    raw = cfg.get(key)
    if raw is None:
        return default
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{key} must be an integer, got {raw!r}")


def _get_float(cfg: dict, key: str, default=None):
    raw = cfg.get(key)
    if raw is None:
        return default
    try:
        return float(raw)
    except ValueError:
        raise ConfigError(f"{key} must be a number, got {raw!r}")


def _parse_taps(raw: str | None, depth: int, mode: str):
    if mode == "baseline_mae":
        return ()
    if raw is None or raw == "auto":
        return default_taps(depth)
    if raw in ("none", ""):
        return ()
    try:
        return tuple(int(t) for t in raw.split(","))
    except ValueError:
        raise ConfigError(f"tap_indices must be comma-separated integers, got {raw!r}")


def build_model_config(cfg: dict[str, str], overrides: dict | None = None) -> ModelConfig:
    cfg = dict(cfg)
    if overrides:
        cfg.update({k: v for k, v in overrides.items() if v is not None})
    mode = cfg.get("mode", "deepmim")
    depth = _get_int(cfg, "depth", 8)
    taps = cfg.get("tap_indices")
    if taps is not None and not isinstance(taps, str):
        taps = ",".join(str(t) for t in taps)
    kind = cfg.get("target_kind", "pixel")
    if kind == "hog":
        target_dim = 36
    else:
        target_dim = None  # pixel default; feature dims come from the file header
    try:
        return ModelConfig(
            image_size=_get_int(cfg, "image_size", 32),
            patch_size=_get_int(cfg, "patch_size", 8),
            embed_dim=_get_int(cfg, "embed_dim", 64),
            depth=depth,
            num_heads=_get_int(cfg, "num_heads", 4),
            mlp_ratio=_get_float(cfg, "mlp_ratio", 4.0),
            decoder_dim=_get_int(cfg, "decoder_dim", None),
            decoder_depth=_get_int(cfg, "decoder_depth", 4),
            decoder_heads=_get_int(cfg, "decoder_heads", None),
            tap_indices=_parse_taps(taps, depth, mode),
            mask_ratio=_get_float(cfg, "mask_ratio", 0.75),
            shared_decoder=_get_bool(cfg, "shared_decoder", False),
            target_dim=target_dim,
            pixel_norm=_get_bool(cfg, "normalize_per_patch", True),
        )
    except ValueError as err:
        raise ConfigError(str(err))


def build_train_config(cfg: dict[str, str], overrides: dict | None = None) -> TrainConfig:
    cfg = dict(cfg)
    if overrides:
        cfg.update({k: str(v) for k, v in overrides.items() if v is not None})
    try:
        return TrainConfig(
            epochs=_get_int(cfg, "epochs", 10),
            batch_size=_get_int(cfg, "batch_size", 32),
            base_lr=_get_float(cfg, "base_lr", 1.5e-4),
            weight_decay=_get_float(cfg, "weight_decay", 0.05),
            warmup_epochs=_get_int(cfg, "warmup_epochs", None),
            seed=_get_int(cfg, "seed", 0),
            mode=cfg.get("mode", "deepmim"),
            freeze_first_k=_get_int(cfg, "freeze_first_k", None),
            reinit_last_k=_get_int(cfg, "reinit_last_k", None),
        )
    except ValueError as err:
        raise ConfigError(str(err))


def build_target_specs(
    cfg: dict[str, str], model_config: ModelConfig, alpha_override: str | None = None
) -> dict[str, TargetSpec]:
    kind = cfg.get("target_kind", "pixel")
    normalize = _get_bool(cfg, "normalize_per_patch", True)
    mode = cfg.get("mode", "deepmim")
    ids = decoder_ids(model_config)
    raw = alpha_override if alpha_override is not None else cfg.get("alpha_schedule")
    if raw is None or raw == "auto":
        if mode == "deepmim_hybrid":
            alphas = default_alpha_schedule(len(model_config.tap_indices))
        else:
            alphas = tuple(1.0 for _ in ids)
    else:
        try:
            alphas = tuple(float(a) for a in raw.split(","))
        except ValueError:
            raise ConfigError(f"alpha_schedule must be comma-separated floats, got {raw!r}")
    if len(alphas) != len(ids):
        raise ConfigError(
            f"alpha_schedule has {len(alphas)} entries for {len(ids)} decoders"
        )
    try:
        return {
            did: TargetSpec(
                kind=kind,
                alpha=alpha,
                normalize_per_patch=normalize,
                generator_checkpoint=cfg.get("generator_checkpoint"),
                feature_path=cfg.get("feature_path"),
            )
            for did, alpha in zip(ids, alphas)
        }
    except ValueError as err:
        raise ConfigError(str(err))
