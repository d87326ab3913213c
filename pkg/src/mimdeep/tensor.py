"""Dense float32 tensors with reverse-mode automatic differentiation.

A `Tape` records every differentiable operation executed while it is
active; `Tape.backward` replays the records in reverse and accumulates
gradients into every leaf tensor that has `requires_grad` set. Tensors
are treated as immutable values once constructed (the optimizer is the
single writer that swaps `.data` between steps).

Arrays default to float32. `grad_check` promotes its parameters to
float64 so the central-difference oracle is not drowned by single
precision rounding; everything else runs in float32.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "transpose",
    "reshape",
    "take_rows",
    "gather_axis1",
    "scatter_axis1",
    "mean_axis1",
    "concat",
    "sum_all",
    "mean_all",
    "softmax_rows",
    "layer_norm",
    "gelu",
    "mse_masked",
    "cross_entropy",
    "grad_check",
]


def _as_array(data) -> np.ndarray:
    # float64 arrays (and numpy scalars, which ops can produce for 0-d
    # results) pass through so grad_check can run the whole pipeline in
    # double precision; everything else becomes float32
    if isinstance(data, (np.ndarray, np.floating)) and data.dtype == np.float64:
        return np.asarray(data)
    return np.asarray(data).astype(np.float32, copy=False)


class Tensor:
    """N-dimensional dense array, optionally participating in a tape."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = _as_array(data)
        if not np.isfinite(arr).all():
            raise FloatingPointError("non-finite value in tensor")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__


_ACTIVE_TAPES: list["Tape"] = []


class Tape:
    """Ordered log of operations for one forward pass.

    Use as a context manager around the forward computation, then call
    `backward(loss)`. The tape is single-use and confined to one step.
    """

    def __init__(self):
        self._records: list[Callable[[], None]] = []

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPES.pop()

    def _record(self, fn: Callable[[], None]) -> None:
        self._records.append(fn)

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ValueError("backward requires a scalar loss")
        loss.grad = np.ones_like(loss.data)
        for fn in reversed(self._records):
            fn()


def _active_tape() -> Tape | None:
    return _ACTIVE_TAPES[-1] if _ACTIVE_TAPES else None


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    g = g.astype(t.data.dtype, copy=False)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad = t.grad + g


def _make(out_data: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    """Wrap an op result; register the backward rule if a tape is live."""
    tape = _active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=track)
    if track:
        def fn():
            if out.grad is not None:
                backward(out.grad)
        tape._record(fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward pass."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out = a.data + b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, b.data.shape))

    return _make(out, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out = a.data - b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _make(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out = a.data * b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    out = a.data * np.asarray(s, dtype=a.data.dtype)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g * s)

    return _make(out, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; supports [..,m,k] @ [k,n] and same-rank batched."""
    if a.data.shape[-1] != b.data.shape[-2 if b.data.ndim > 1 else 0]:
        raise ValueError(
            f"matmul inner dimensions disagree: {a.data.shape} @ {b.data.shape}"
        )
    if b.data.ndim not in (2, a.data.ndim):
        raise ValueError(
            f"matmul rank mismatch: {a.data.shape} @ {b.data.shape}"
        )
    out = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, np.matmul(g, np.swapaxes(b.data, -1, -2)))
        if b.requires_grad:
            if b.data.ndim == 2 and a.data.ndim > 2:
                k = a.data.shape[-1]
                n = g.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            _accumulate(b, gb)

    return _make(out, (a, b), backward)


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    out = np.transpose(a.data, axes)
    inv = np.argsort(axes)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, np.transpose(g, inv))

    return _make(out, (a,), backward)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = a.data.reshape(shape)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g.reshape(a.data.shape))

    return _make(out, (a,), backward)


def take_rows(a: Tensor, indices) -> Tensor:
    """Select rows along axis 0 (positional-embedding lookup).

    `indices` may be [k] or [B, k]; the output gains the index shape.
    """
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[0]):
        raise ValueError("take_rows index out of range")
    out = a.data[idx]

    def backward(g):
        if a.requires_grad:
            ga = np.zeros_like(a.data)
            np.add.at(ga, idx, g)
            _accumulate(a, ga)

    return _make(out, (a,), backward)


def _check_axis1_indices(idx: np.ndarray, a: Tensor) -> None:
    if idx.ndim not in (1, 2):
        raise ValueError("index array must be [k] or [B, k]")
    if idx.ndim == 2 and idx.shape[0] != a.data.shape[0]:
        raise ValueError("per-sample index rows must match the batch size")
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[1]):
        raise ValueError("gather index out of range")


def gather_axis1(a: Tensor, indices) -> Tensor:
    """Select rows along axis 1 of a [B, N, D] tensor.

    `indices` is either a shared [k] list or per-sample [B, k] rows.
    """
    idx = np.asarray(indices, dtype=np.int64)
    _check_axis1_indices(idx, a)
    if idx.ndim == 1:
        out = a.data[:, idx]
        where = (slice(None), idx)
    else:
        b = a.data.shape[0]
        out = a.data[np.arange(b)[:, None], idx]
        where = (np.arange(b)[:, None], idx)

    def backward(g):
        if a.requires_grad:
            ga = np.zeros_like(a.data)
            np.add.at(ga, where, g)
            _accumulate(a, ga)

    return _make(out, (a,), backward)


def scatter_axis1(values: Tensor, indices, n: int) -> Tensor:
    """Place [B, k, D] rows at `indices` of a zero [B, n, D] tensor."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.shape[-1] != values.data.shape[1]:
        raise ValueError("scatter index count != value rows")
    b, _, d = values.data.shape
    if idx.ndim == 2 and idx.shape[0] != b:
        raise ValueError("per-sample index rows must match the batch size")
    out = np.zeros((b, n, d), dtype=values.data.dtype)
    if idx.ndim == 1:
        out[:, idx] = values.data
        where = (slice(None), idx)
    else:
        out[np.arange(b)[:, None], idx] = values.data
        where = (np.arange(b)[:, None], idx)

    def backward(g):
        if values.requires_grad:
            _accumulate(values, g[where])

    return _make(out, (values,), backward)


def mean_axis1(a: Tensor) -> Tensor:
    """Token pooling: [B, N, D] -> [B, D] mean over axis 1."""
    n = a.data.shape[1]
    out = a.data.mean(axis=1)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, np.broadcast_to(g[:, None, :] / n, a.data.shape))

    return _make(out, (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        pieces = np.split(g, splits, axis=axis)
        for t, p in zip(tensors, pieces):
            if t.requires_grad:
                _accumulate(t, p)

    return _make(out, tuple(tensors), backward)


def sum_all(a: Tensor) -> Tensor:
    out = a.data.sum(dtype=a.data.dtype).reshape(())

    def backward(g):
        if a.requires_grad:
            _accumulate(a, np.broadcast_to(g, a.data.shape))

    return _make(out, (a,), backward)


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    out = (a.data.sum(dtype=np.float64) / n).astype(a.data.dtype).reshape(())

    def backward(g):
        if a.requires_grad:
            _accumulate(a, np.broadcast_to(g / n, a.data.shape))

    return _make(out, (a,), backward)


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax over the last axis, stabilized by row-max subtraction."""
    if a.data.shape[-1] < 1:
        raise ValueError("softmax needs a non-empty last axis")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        if a.requires_grad:
            dot = (g * out).sum(axis=-1, keepdims=True)
            _accumulate(a, (g - dot) * out)

    return _make(out, (a,), backward)


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    mu = a.data.mean(axis=-1, keepdims=True)
    var = a.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a.data - mu) * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        if gamma.requires_grad:
            _accumulate(gamma, (g * xhat).reshape(-1, g.shape[-1]).sum(axis=0))
        if beta.requires_grad:
            _accumulate(beta, g.reshape(-1, g.shape[-1]).sum(axis=0))
        if a.requires_grad:
            dxhat = g * gamma.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            _accumulate(a, (dxhat - m1 - xhat * m2) * inv)

    return _make(out, (a, gamma, beta), backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximation GELU."""
    x = a.data
    u = _GELU_C * (x + 0.044715 * x ** 3)
    th = np.tanh(u)
    out = 0.5 * x * (1.0 + th)

    def backward(g):
        if a.requires_grad:
            du = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
            d = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th ** 2) * du
            _accumulate(a, g * d)

    return _make(out, (a,), backward)


def mse_masked(pred: Tensor, target: Tensor, mask) -> Tensor:
    """Mean squared error over masked patch positions only.

    `mask` is a MaskPlan-like object with a `masked` index sequence, or a
    bare index sequence. Averaged over batch, masked count, and channels.
    """
    idx = np.asarray(getattr(mask, "masked", mask), dtype=np.int64)
    if idx.size == 0:
        raise ValueError("mse_masked: empty masked set, loss undefined")
    if pred.data.shape != target.data.shape:
        raise ValueError(
            f"mse_masked shape mismatch: {pred.data.shape} vs {target.data.shape}"
        )
    _check_axis1_indices(idx, pred)
    if idx.ndim == 1:
        where = (slice(None), idx)
    else:
        where = (np.arange(pred.data.shape[0])[:, None], idx)
    diff = pred.data[where] - target.data[where]
    count = diff.size
    out = (np.square(diff, dtype=np.float64).sum() / count).astype(
        pred.data.dtype
    ).reshape(())

    def backward(g):
        coef = 2.0 * g / count
        if pred.requires_grad:
            gp = np.zeros_like(pred.data)
            np.add.at(gp, where, coef * diff)
            _accumulate(pred, gp)
        if target.requires_grad:
            gt = np.zeros_like(target.data)
            np.add.at(gt, where, -coef * diff)
            _accumulate(target, gt)

    return _make(out, (pred, target), backward)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy; labels is an int class-index array."""
    y = np.asarray(labels, dtype=np.int64)
    b, c = logits.data.shape
    if y.shape != (b,):
        raise ValueError("cross_entropy label shape mismatch")
    if y.min() < 0 or y.max() >= c:
        raise ValueError("cross_entropy label out of range")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    nll = -(z[np.arange(b), y] - np.log(e.sum(axis=-1)))
    out = (nll.sum(dtype=np.float64) / b).astype(logits.data.dtype).reshape(())

    def backward(g):
        if logits.requires_grad:
            gl = p.copy()
            gl[np.arange(b), y] -= 1.0
            _accumulate(logits, gl * (g / b))

    return _make(out, (logits,), backward)


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-3,
    max_coords_per_param: int = 8,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare tape gradients of `f()` against central finite differences.

    Parameters are promoted to float64 for the duration of the check so
    the difference quotient is not dominated by float32 rounding; the
    original arrays are restored afterwards. Returns the maximum relative
    error over the sampled coordinates.
    """
    rng = rng or np.random.default_rng(0)
    originals = [p.data for p in params]
    try:
        for p in params:
            p.data = p.data.astype(np.float64)
            p.grad = None
        with Tape() as tape:
            loss = f()
        tape.backward(loss)
        analytic = [
            p.grad if p.grad is not None else np.zeros_like(p.data)
            for p in params
        ]
        worst = 0.0
        for p, an in zip(params, analytic):
            flat = p.data.reshape(-1)
            n = flat.size
            k = min(max_coords_per_param, n)
            coords = rng.choice(n, size=k, replace=False) if k < n else np.arange(n)
            for c in coords:
                orig = flat[c]
                flat[c] = orig + h
                fp = float(f().data)
                flat[c] = orig - h
                fm = float(f().data)
                flat[c] = orig
                fd = (fp - fm) / (2 * h)
                an_c = float(an.reshape(-1)[c])
                denom = max(abs(fd), abs(an_c), 1e-3)
                worst = max(worst, abs(fd - an_c) / denom)
        return worst
    finally:
        for p, d in zip(params, originals):
            p.data = d
            p.grad = None
