"""Binary checkpoint persistence (magic DMIM, version 1).

Layout: magic, u32 version, length-prefixed model-config text blob,
parameter table (u32 count; per entry u32 name length + name bytes,
u8 rank, rank x u32 dims, little-endian f32 payload), optional optimizer
state (u8 flag; u64 t; m and v tables in the same entry format), u64
seed (the run's RNG root; all per-step randomness is derived from it),
and a u64 step counter. Round-trips are bitwise lossless.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, fields

import numpy as np

from .model import ModelConfig
from .tensor import Tensor

__all__ = ["CheckpointData", "save_checkpoint", "load_checkpoint"]

_MAGIC = b"DMIM"
_VERSION = 1

_CONFIG_FIELDS = [f.name for f in fields(ModelConfig)]


@dataclass
class CheckpointData:
    config: ModelConfig
    params: dict[str, Tensor]
    opt_state: dict | None
    seed: int
    step: int


def _config_to_text(config: ModelConfig) -> str:
    lines = []
    for name in _CONFIG_FIELDS:
        value = getattr(config, name)
        if name == "tap_indices":
            value = ",".join(str(i) for i in value)
        elif isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{name} = {value}")
    return "\n".join(lines) + "\n"


def _config_from_text(text: str) -> ModelConfig:
    kwargs = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, _, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if key not in _CONFIG_FIELDS:
            raise IOError(f"unknown config key {key!r} in checkpoint")
        if key == "tap_indices":
            kwargs[key] = tuple(int(t) for t in raw.split(",") if t)
        elif key in ("shared_decoder", "pixel_norm"):
            kwargs[key] = raw == "true"
        elif key in ("mlp_ratio", "mask_ratio"):
            kwargs[key] = float(raw)
        else:
            kwargs[key] = int(raw)
    return ModelConfig(**kwargs)


def _write_array_table(fh, table: dict[str, np.ndarray]) -> None:
    fh.write(struct.pack("<I", len(table)))
    for name, arr in table.items():
        nb = name.encode("utf-8")
        fh.write(struct.pack("<I", len(nb)))
        fh.write(nb)
        fh.write(struct.pack("<B", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_array_table(fh) -> dict[str, np.ndarray]:
    (count,) = struct.unpack("<I", fh.read(4))
    table: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", fh.read(4))
        name = fh.read(nlen).decode("utf-8")
        (rank,) = struct.unpack("<B", fh.read(1))
        dims = struct.unpack(f"<{rank}I", fh.read(4 * rank))
        n = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(fh.read(4 * n), dtype="<f4").reshape(dims)
        table[name] = arr.copy()
    return table


def save_checkpoint(
    path: str,
    config: ModelConfig,
    params: dict[str, Tensor],
    opt_state: dict | None = None,
    seed: int = 0,
    step: int = 0,
) -> None:
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        blob = _config_to_text(config).encode("utf-8")
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        _write_array_table(fh, {k: t.data for k, t in params.items()})
        if opt_state is None:
            fh.write(struct.pack("<B", 0))
        else:
            fh.write(struct.pack("<B", 1))
            fh.write(struct.pack("<Q", opt_state["t"]))
            _write_array_table(fh, opt_state["m"])
            _write_array_table(fh, opt_state["v"])
        fh.write(struct.pack("<Q", seed))
        fh.write(struct.pack("<Q", step))


def load_checkpoint(path: str) -> CheckpointData:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise IOError(f"{path}: bad magic {magic!r}, expected {_MAGIC!r}")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _VERSION:
            raise IOError(f"{path}: unsupported checkpoint version {version}")
        (blen,) = struct.unpack("<I", fh.read(4))
        config = _config_from_text(fh.read(blen).decode("utf-8"))
        raw = _read_array_table(fh)
        params = {k: Tensor(v, requires_grad=True) for k, v in raw.items()}
        (has_opt,) = struct.unpack("<B", fh.read(1))
        opt_state = None
        if has_opt:
            (t,) = struct.unpack("<Q", fh.read(8))
            m = _read_array_table(fh)
            v = _read_array_table(fh)
            opt_state = {"t": t, "m": m, "v": v}
        (seed,) = struct.unpack("<Q", fh.read(8))
        (step,) = struct.unpack("<Q", fh.read(8))
    return CheckpointData(config=config, params=params, opt_state=opt_state, seed=seed, step=step)
