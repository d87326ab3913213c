"""Tapped ViT encoder, per-tap reconstruction decoders, initialization.

The encoder is a plain pre-LN ViT operating on visible patches only.
Selected intermediate blocks ("taps") expose their output tokens so an
auxiliary decoder can be attached to each; the final block always feeds
the primary decoder through the encoder's closing LayerNorm. Tap
features are the raw post-residual block outputs (no extra norm).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

__all__ = [
    "ModelConfig",
    "EncoderOutput",
    "default_taps",
    "decoder_ids",
    "patchify",
    "unpatchify",
    "init_params",
    "reinit_last_k",
    "encoder_forward",
    "decoder_forward",
]

Params = dict[str, Tensor]


def default_taps(depth: int) -> tuple[int, ...]:
    """Three taps at depth * {1/2, 2/3, 5/6}, rounded to valid blocks.

    Reproduces {6, 8, 10} at depth 12 and degrades gracefully for
    shallower encoders (duplicates collapse).
    """
    taps = sorted({min(depth - 1, max(1, round(depth * f))) for f in (0.5, 2 / 3, 5 / 6)})
    return tuple(taps)


@dataclass
class ModelConfig:
    image_size: int = 32
    patch_size: int = 8
    embed_dim: int = 64
    depth: int = 8
    num_heads: int = 4
    mlp_ratio: float = 4.0
    decoder_dim: int | None = None
    decoder_depth: int = 4
    decoder_heads: int | None = None
    tap_indices: tuple[int, ...] | None = None
    mask_ratio: float = 0.75
    shared_decoder: bool = False
    # dimensionality of every decoder's output per patch (pixels by default)
    target_dim: int | None = None
    # whether pixel targets were per-patch normalized during pre-training;
    # recorded so a hybrid generator knows to de-normalize its predictions
    pixel_norm: bool = True

    def __post_init__(self):
        if self.tap_indices is None:
            self.tap_indices = default_taps(self.depth)
        self.tap_indices = tuple(int(i) for i in self.tap_indices)
        if self.decoder_heads is None:
            self.decoder_heads = self.num_heads
        if self.decoder_dim is None:
            half = self.embed_dim // 2
            rem = half % self.decoder_heads
            self.decoder_dim = half + (self.decoder_heads - rem if rem else 0)
        if self.target_dim is None:
            self.target_dim = 3 * self.patch_size ** 2
        self.validate()

    def validate(self) -> None:
        if self.image_size % self.patch_size != 0:
            raise ValueError("image_size must be divisible by patch_size")
        if self.embed_dim % self.num_heads != 0:
            raise ValueError("embed_dim must be divisible by num_heads")
        if self.decoder_dim % self.decoder_heads != 0:
            raise ValueError("decoder_dim must be divisible by decoder_heads")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ValueError("mask_ratio must be in (0,1)")
        taps = self.tap_indices
        if any(t < 1 or t >= self.depth for t in taps):
            raise ValueError(f"tap indices {taps} out of range for depth {self.depth}")
        if list(taps) != sorted(set(taps)):
            raise ValueError("tap indices must be strictly increasing")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return 3 * self.patch_size ** 2

    @property
    def mlp_hidden(self) -> int:
        return int(self.embed_dim * self.mlp_ratio)


def decoder_ids(config: ModelConfig) -> list[str]:
    return [f"tap{i}" for i in config.tap_indices] + ["final"]


def _dec_prefix(config: ModelConfig, decoder_id: str) -> str:
    if decoder_id not in decoder_ids(config):
        raise ValueError(f"unknown decoder id {decoder_id!r}")
    return "dec.shared." if config.shared_decoder else f"dec.{decoder_id}."


@dataclass
class EncoderOutput:
    final_tokens: Tensor
    tap_tokens: dict[int, Tensor]
    attn_probs: list[np.ndarray] | None = None
    block_tokens: list[Tensor] | None = None


def patchify(image: np.ndarray, patch_size: int) -> np.ndarray:
    """[B,3,H,W] -> [B,N,3*p*p], raster patch order, channel-major inside."""
    b, c, h, w = image.shape
    p = patch_size
    if h % p or w % p:
        raise ValueError(f"image {h}x{w} not divisible by patch size {p}")
    gh, gw = h // p, w // p
    x = image.reshape(b, c, gh, p, gw, p)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return np.ascontiguousarray(x.reshape(b, gh * gw, c * p * p))


def unpatchify(patches: np.ndarray, patch_size: int, image_size: int) -> np.ndarray:
    """Exact inverse of `patchify` for square images."""
    b, n, d = patches.shape
    p = patch_size
    g = image_size // p
    if n != g * g or d != 3 * p * p:
        raise ValueError(f"patch grid {patches.shape} inconsistent with image size")
    x = patches.reshape(b, g, g, 3, p, p)
    x = x.transpose(0, 3, 1, 4, 2, 5)
    return np.ascontiguousarray(x.reshape(b, 3, g * p, g * p))


def _trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) truncated at 2 std, by resampling."""
    z = rng.standard_normal(shape)
    bad = np.abs(z) > 2.0
    while bad.any():
        z[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(z) > 2.0
    return (z * std).astype(np.float32)


def _param(params: Params, name: str, data: np.ndarray) -> None:
    params[name] = Tensor(data.astype(np.float32), requires_grad=True)


def _init_block(params: Params, rng, prefix: str, dim: int, hidden: int) -> None:
    _param(params, prefix + "norm1.gamma", np.ones(dim))
    _param(params, prefix + "norm1.beta", np.zeros(dim))
    for proj in ("q", "k", "v", "out"):
        _param(params, f"{prefix}attn.{proj}.w", _trunc_normal(rng, (dim, dim)))
        _param(params, f"{prefix}attn.{proj}.b", np.zeros(dim))
    _param(params, prefix + "norm2.gamma", np.ones(dim))
    _param(params, prefix + "norm2.beta", np.zeros(dim))
    _param(params, prefix + "mlp.fc1.w", _trunc_normal(rng, (dim, hidden)))
    _param(params, prefix + "mlp.fc1.b", np.zeros(hidden))
    _param(params, prefix + "mlp.fc2.w", _trunc_normal(rng, (hidden, dim)))
    _param(params, prefix + "mlp.fc2.b", np.zeros(dim))


def _init_decoder(params: Params, rng, prefix: str, config: ModelConfig) -> None:
    d, dd = config.embed_dim, config.decoder_dim
    _param(params, prefix + "embed.w", _trunc_normal(rng, (d, dd)))
    _param(params, prefix + "embed.b", np.zeros(dd))
    _param(params, prefix + "mask_token", rng.normal(0.0, 0.02, dd))
    _param(params, prefix + "pos", _trunc_normal(rng, (config.n_patches, dd)))
    hidden = int(dd * config.mlp_ratio)
    for j in range(1, config.decoder_depth + 1):
        _init_block(params, rng, f"{prefix}block{j}.", dd, hidden)
    _param(params, prefix + "norm.gamma", np.ones(dd))
    _param(params, prefix + "norm.beta", np.zeros(dd))
    _param(params, prefix + "unembed.w", _trunc_normal(rng, (dd, config.target_dim)))
    _param(params, prefix + "unembed.b", np.zeros(config.target_dim))


def init_params(config: ModelConfig, seed: int) -> Params:
    """Deterministic initialization of encoder and all decoders."""
    rng = np.random.default_rng(seed)
    params: Params = {}
    _param(params, "enc.patch_embed.w", _trunc_normal(rng, (config.patch_dim, config.embed_dim)))
    _param(params, "enc.patch_embed.b", np.zeros(config.embed_dim))
    _param(params, "enc.pos", _trunc_normal(rng, (config.n_patches, config.embed_dim)))
    for i in range(1, config.depth + 1):
        _init_block(params, rng, f"enc.block{i}.", config.embed_dim, config.mlp_hidden)
    _param(params, "enc.norm.gamma", np.ones(config.embed_dim))
    _param(params, "enc.norm.beta", np.zeros(config.embed_dim))
    if config.shared_decoder:
        _init_decoder(params, rng, "dec.shared.", config)
    else:
        for did in decoder_ids(config):
            _init_decoder(params, rng, f"dec.{did}.", config)
    return params


def init_head(feat_dim: int, n_classes: int, seed: int) -> Params:
    """Classification head used by fine-tuning and probing."""
    rng = np.random.default_rng(seed)
    head: Params = {}
    _param(head, "head.w", _trunc_normal(rng, (feat_dim, n_classes)))
    _param(head, "head.b", np.zeros(n_classes))
    return head


def reinit_last_k(params: Params, k: int, seed: int, config: ModelConfig) -> Params:
    """Re-draw the last k encoder blocks; everything else is preserved."""
    if not 0 <= k <= config.depth:
        raise ValueError(f"k={k} out of range for depth {config.depth}")
    out: Params = {
        name: Tensor(t.data.copy(), requires_grad=t.requires_grad)
        for name, t in params.items()
    }
    rng = np.random.default_rng(seed)
    for i in range(config.depth - k + 1, config.depth + 1):
        fresh: Params = {}
        _init_block(fresh, rng, f"enc.block{i}.", config.embed_dim, config.mlp_hidden)
        out.update(fresh)
    return out


def _linear(x: Tensor, params: Params, prefix: str) -> Tensor:
    return T.add(T.matmul(x, params[prefix + ".w"]), params[prefix + ".b"])


def _attention(x: Tensor, params: Params, prefix: str, heads: int):
    b, n, d = x.shape
    dh = d // heads

    def split(t: Tensor) -> Tensor:
        return T.transpose(T.reshape(t, (b, n, heads, dh)), (0, 2, 1, 3))

    q = split(_linear(x, params, prefix + "attn.q"))
    k = split(_linear(x, params, prefix + "attn.k"))
    v = split(_linear(x, params, prefix + "attn.v"))
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    probs = T.softmax_rows(scores)
    out = T.matmul(probs, v)
    out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (b, n, d))
    return _linear(out, params, prefix + "attn.out"), probs.data


def _block_forward(x: Tensor, params: Params, prefix: str, heads: int):
    h = T.layer_norm(x, params[prefix + "norm1.gamma"], params[prefix + "norm1.beta"])
    h, probs = _attention(h, params, prefix, heads)
    x = T.add(x, h)
    h = T.layer_norm(x, params[prefix + "norm2.gamma"], params[prefix + "norm2.beta"])
    h = _linear(h, params, prefix + "mlp.fc1")
    h = T.gelu(h)
    h = _linear(h, params, prefix + "mlp.fc2")
    return T.add(x, h), probs


def encoder_forward(
    params: Params,
    visible_patches: Tensor,
    visible_indices: Sequence[int],
    config: ModelConfig,
    analysis: bool = False,
) -> EncoderOutput:
    """Run the encoder on visible patches; collect tap-block outputs.

    With `analysis=True` also retains every block's output tokens and
    the attention probabilities of every block.
    """
    if not isinstance(visible_patches, Tensor):
        visible_patches = Tensor(visible_patches)
    x = T.add(T.matmul(visible_patches, params["enc.patch_embed.w"]), params["enc.patch_embed.b"])
    x = T.add(x, T.take_rows(params["enc.pos"], visible_indices))
    taps: dict[int, Tensor] = {}
    attn: list[np.ndarray] | None = [] if analysis else None
    blocks: list[Tensor] | None = [] if analysis else None
    for i in range(1, config.depth + 1):
        x, probs = _block_forward(x, params, f"enc.block{i}.", config.num_heads)
        if i in config.tap_indices:
            taps[i] = x
        if analysis:
            attn.append(probs)
            blocks.append(x)
    final = T.layer_norm(x, params["enc.norm.gamma"], params["enc.norm.beta"])
    return EncoderOutput(final_tokens=final, tap_tokens=taps, attn_probs=attn, block_tokens=blocks)


def decoder_forward(
    params: Params,
    decoder_id: str,
    tokens: Tensor,
    plan,
    config: ModelConfig,
) -> Tensor:
    """Decode encoder tokens plus mask tokens into per-patch predictions.

    Visible positions carry projected encoder tokens, masked positions
    the decoder's learned mask token; both get the decoder positional
    embedding. Output covers all N positions at `config.target_dim`.
    """
    pfx = _dec_prefix(config, decoder_id)
    if plan.n_patches != config.n_patches:
        raise ValueError(
            f"plan grid {plan.n_patches} != model grid {config.n_patches}"
        )
    z = T.add(T.matmul(tokens, params[pfx + "embed.w"]), params[pfx + "embed.b"])
    full = T.scatter_axis1(z, plan.visible, config.n_patches)
    masked = np.asarray(plan.masked, dtype=np.int64)
    if masked.ndim == 1:
        indicator = np.zeros((config.n_patches, 1), dtype=np.float32)
        indicator[masked] = 1.0
    else:
        b = masked.shape[0]
        indicator = np.zeros((b, config.n_patches, 1), dtype=np.float32)
        indicator[np.arange(b)[:, None], masked] = 1.0
    full = T.add(full, T.mul(Tensor(indicator), params[pfx + "mask_token"]))
    full = T.add(full, params[pfx + "pos"])
    for j in range(1, config.decoder_depth + 1):
        full, _ = _block_forward(full, params, f"{pfx}block{j}.", config.decoder_heads)
    full = T.layer_norm(full, params[pfx + "norm.gamma"], params[pfx + "norm.beta"])
    return T.add(T.matmul(full, params[pfx + "unembed.w"]), params[pfx + "unembed.b"])


def pooled_layer_features(
    params: Params,
    config: ModelConfig,
    images: np.ndarray,
    batch_size: int = 64,
) -> dict:
    """Token-averaged per-image features from every block, unmasked input.

    Returns a dict mapping block index (1-based) to an [n_images, dim]
    array of raw block outputs, plus key "final" for the post-LayerNorm
    final tokens.
    """
    n = images.shape[0]
    all_idx = np.arange(config.n_patches)
    feats: dict = {i: [] for i in range(1, config.depth + 1)}
    feats["final"] = []
    for start in range(0, n, batch_size):
        batch = patchify(images[start:start + batch_size], config.patch_size)
        enc = encoder_forward(params, Tensor(batch), all_idx, config, analysis=True)
        for i, tok in enumerate(enc.block_tokens, start=1):
            feats[i].append(tok.data.mean(axis=1))
        feats["final"].append(enc.final_tokens.data.mean(axis=1))
    return {k: np.concatenate(v, axis=0) for k, v in feats.items()}
