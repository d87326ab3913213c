"""Dataset ingestion: P6 PPM images, labels.tsv, synthetic generation.

The synthetic set stands in for a real image corpus. Each class gets an
oriented grating plus a colored rectangle, both with per-sample jitter,
so pixel-level and gradient-level targets are learnable and a linear
classifier on good features beats chance.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Dataset",
    "read_ppm",
    "write_ppm",
    "generate_synthetic",
    "save_dataset",
    "load_dataset",
]


@dataclass
class Dataset:
    images: np.ndarray  # [n, 3, H, W] float32 in [0,1]
    labels: np.ndarray | None = None  # [n] int64
    names: list[str] | None = None

    def __len__(self) -> int:
        return self.images.shape[0]


def read_ppm(path: str) -> np.ndarray:
    """Decode a binary P6 PPM with maxval 255 into a [3,H,W] float image."""
    with open(path, "rb") as fh:
        raw = fh.read()

    pos = 0

    def token():
        nonlocal pos
        while pos < len(raw):
            if raw[pos:pos + 1].isspace():
                pos += 1
            elif raw[pos:pos + 1] == b"#":
                while pos < len(raw) and raw[pos] != 0x0A:
                    pos += 1
            else:
                break
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise IOError(f"{path}: truncated header at byte {start}")
        return raw[start:pos]

    magic = token()
    if magic != b"P6":
        raise IOError(f"{path}: not a P6 PPM (got {magic!r} at byte 0)")
    try:
        width = int(token())
        height = int(token())
        maxval = int(token())
    except ValueError:
        raise IOError(f"{path}: malformed header near byte {pos}")
    if maxval != 255:
        raise IOError(f"{path}: unsupported maxval {maxval} (only 255)")
    pos += 1  # single whitespace after maxval
    need = width * height * 3
    pixels = raw[pos:pos + need]
    if len(pixels) != need:
        raise IOError(
            f"{path}: expected {need} pixel bytes at offset {pos}, got {len(pixels)}"
        )
    arr = np.frombuffer(pixels, dtype=np.uint8).reshape(height, width, 3)
    return (arr.transpose(2, 0, 1).astype(np.float32) / 255.0)


def write_ppm(image: np.ndarray, path: str) -> None:
    """Encode a [3,H,W] float image: clamp to [0,1], round half up."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected [3,H,W] image, got {image.shape}")
    clipped = np.clip(image, 0.0, 1.0)
    body = np.floor(clipped * 255.0 + 0.5).astype(np.uint8).transpose(1, 2, 0)
    h, w = body.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(body.tobytes())


def _quantize(image: np.ndarray) -> np.ndarray:
    """Snap floats to the PPM byte grid so memory equals a disk round-trip."""
    return np.floor(np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.float32) / 255.0


_PALETTE = np.array(
    [
        [0.95, 0.35, 0.25],
        [0.25, 0.85, 0.40],
        [0.30, 0.45, 0.95],
        [0.90, 0.85, 0.25],
        [0.85, 0.30, 0.85],
        [0.30, 0.85, 0.85],
        [0.95, 0.60, 0.20],
        [0.60, 0.60, 0.60],
    ],
    dtype=np.float32,
)


def _render_sample(rng: np.random.Generator, size: int, cls: int, n_classes: int) -> np.ndarray:
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    theta = math.pi * cls / n_classes + rng.uniform(-0.08, 0.08)
    freq = rng.uniform(2.0, 4.0)
    phase = rng.uniform(0.0, 2 * math.pi)
    wave = (xx * math.cos(theta) + yy * math.sin(theta)) / size
    grating = 0.5 + 0.4 * np.sin(2 * math.pi * freq * wave + phase)
    color = _PALETTE[cls % len(_PALETTE)]
    img = grating[None, :, :] * color[:, None, None]
    # jittered class-colored rectangle
    side = max(2, size // 4 + int(rng.integers(-size // 16 - 1, size // 16 + 1)))
    y0 = int(rng.integers(0, size - side))
    x0 = int(rng.integers(0, size - side))
    block = _PALETTE[(cls + 3) % len(_PALETTE)]
    img[:, y0:y0 + side, x0:x0 + side] = 0.3 * img[:, y0:y0 + side, x0:x0 + side] + 0.7 * block[:, None, None]
    img = img + rng.normal(0.0, 0.02, img.shape)
    return _quantize(img.astype(np.float32))


def generate_synthetic(
    n_samples: int, image_size: int, n_classes: int, seed: int
) -> Dataset:
    """Deterministic class-structured images, balanced round-robin labels."""
    if n_classes < 2:
        raise ValueError("need at least 2 classes")
    images = np.zeros((n_samples, 3, image_size, image_size), dtype=np.float32)
    labels = np.zeros(n_samples, dtype=np.int64)
    for i in range(n_samples):
        cls = i % n_classes
        rng = np.random.default_rng((seed, 101, i))
        images[i] = _render_sample(rng, image_size, cls, n_classes)
        labels[i] = cls
    names = [f"sample_{i:05d}.ppm" for i in range(n_samples)]
    return Dataset(images=images, labels=labels, names=names)


def save_dataset(dataset: Dataset, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    names = dataset.names or [f"sample_{i:05d}.ppm" for i in range(len(dataset))]
    for name, img in zip(names, dataset.images):
        write_ppm(img, os.path.join(out_dir, name))
    if dataset.labels is not None:
        with open(os.path.join(out_dir, "labels.tsv"), "w") as fh:
            for name, label in zip(names, dataset.labels):
                fh.write(f"{name}\t{int(label)}\n")


def load_dataset(path: str) -> Dataset:
    """Read every .ppm in a directory (sorted), plus labels.tsv if present."""
    names = sorted(f for f in os.listdir(path) if f.endswith(".ppm"))
    if not names:
        raise IOError(f"{path}: no .ppm images found")
    loaded = [read_ppm(os.path.join(path, n)) for n in names]
    shapes = {img.shape for img in loaded}
    if len(shapes) != 1:
        raise IOError(f"{path}: images disagree on geometry: {sorted(shapes)}")
    images = np.stack(loaded)
    labels = None
    label_path = os.path.join(path, "labels.tsv")
    if os.path.exists(label_path):
        table = {}
        with open(label_path) as fh:
            for line in fh:
                if not line.strip():
                    continue
                name, _, cls = line.rstrip("\n").partition("\t")
                table[name] = int(cls)
        missing = [n for n in names if n not in table]
        if missing:
            raise IOError(f"{path}: labels.tsv missing entries for {missing[:3]}...")
        labels = np.array([table[n] for n in names], dtype=np.int64)
    return Dataset(images=images, labels=labels, names=names)
