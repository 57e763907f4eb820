"""Differentiable operations over :class:`~feddet.tensor.Tensor`.

Each operation computes its forward value eagerly with numpy and, when a tape
is active and some input requires gradients, records an adjoint closure.
Shapes are checked strictly; the only implicit broadcasting is the bias add
along a channel/feature axis.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .errors import ContractError, ShapeError
from .tensor import Tensor, active_tape

__all__ = [
    "matmul", "bmm", "conv2d", "bias_add",
    "add", "sub", "mul", "div", "neg", "add_scalar", "mul_scalar",
    "relu", "sigmoid", "softmax", "layer_norm", "batch_norm", "RunningStats",
    "dropout", "cross_entropy_with_logits", "l1_loss",
    "reshape", "transpose", "concat", "slice_axis", "take_rows", "tile_batch",
    "sum_all", "mean_all", "minimum", "maximum",
]


def _record(inputs: tuple, out_data: np.ndarray, backward_fn) -> Tensor:
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=requires)
    tape = active_tape()
    if tape is not None and requires:
        tape.record(inputs, out, backward_fn)
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of a 2-D ``[m,k]`` by ``[k,n]``."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims of {a.shape} and {b.shape} disagree")
    ad, bd = a.data, b.data

    def bwd(g):
        return g @ bd.T, ad.T @ g

    return _record((a, b), ad @ bd, bwd)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product of ``[B,m,k]`` by ``[B,k,n]``."""
    if a.ndim != 3 or b.ndim != 3:
        raise ShapeError(f"bmm needs 3-D operands, got {a.shape} and {b.shape}")
    if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError(f"bmm: shapes {a.shape} and {b.shape} disagree")
    ad, bd = a.data, b.data

    def bwd(g):
        return g @ bd.transpose(0, 2, 1), ad.transpose(0, 2, 1) @ g

    return _record((a, b), ad @ bd, bwd)


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D convolution of ``[B,C,H,W]`` with ``[F,C,k,k]`` (zero padding)."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d needs 4-D operands, got {x.shape} and {w.shape}")
    if stride < 1:
        raise ContractError(f"conv2d: stride must be >= 1, got {stride}")
    B, C, H, W = x.shape
    F, Cw, kh, kw = w.shape
    if Cw != C:
        raise ShapeError(f"conv2d: input channels {C} != kernel channels {Cw}")
    if kh != kw:
        raise ShapeError(f"conv2d: kernel must be square, got {kh}x{kw}")
    k = kh
    Hp, Wp = H + 2 * pad, W + 2 * pad
    if k > Hp or k > Wp:
        raise ShapeError(
            f"conv2d: kernel {k}x{k} larger than padded input {Hp}x{Wp}"
        )
    Ho = (Hp - k) // stride + 1
    Wo = (Wp - k) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    # Gather k*k shifted views, then contract with a single matmul.
    patches = np.empty((B, C, k, k, Ho, Wo))
    for i in range(k):
        for j in range(k):
            patches[:, :, i, j] = xp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride]
    cols = patches.reshape(B, C * k * k, Ho * Wo)
    w2 = w.data.reshape(F, C * k * k)
    out = np.matmul(w2, cols).reshape(B, F, Ho, Wo)

    def bwd(g):
        g2 = g.reshape(B, F, Ho * Wo)
        dw = np.einsum("bfl,bml->fm", g2, cols).reshape(w.shape)
        dcols = np.matmul(w2.T, g2).reshape(B, C, k, k, Ho, Wo)
        dxp = np.zeros((B, C, Hp, Wp))
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += dcols[:, :, i, j]
        dx = dxp[:, :, pad:pad + H, pad:pad + W] if pad else dxp
        return dx, dw

    return _record((x, w), out, bwd)


def bias_add(x: Tensor, b: Tensor, axis: int) -> Tensor:
    """Add a 1-D bias along ``axis`` (the one permitted broadcast)."""
    if b.ndim != 1:
        raise ShapeError(f"bias_add: bias must be 1-D, got {b.shape}")
    axis = axis % x.ndim
    if x.shape[axis] != b.shape[0]:
        raise ShapeError(f"bias_add: axis {axis} of {x.shape} != bias {b.shape}")
    view = [1] * x.ndim
    view[axis] = b.shape[0]
    sum_axes = tuple(i for i in range(x.ndim) if i != axis)

    def bwd(g):
        return g, g.sum(axis=sum_axes)

    return _record((x, b), x.data + b.data.reshape(view), bwd)


# ---------------------------------------------------------------------------
# elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _record((a, b), a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _record((a, b), a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _record((a, b), ad * bd, lambda g: (g * bd, g * ad))


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "div")
    ad, bd = a.data, b.data
    return _record((a, b), ad / bd, lambda g: (g / bd, -g * ad / (bd * bd)))


def neg(x: Tensor) -> Tensor:
    return _record((x,), -x.data, lambda g: (-g,))


def add_scalar(x: Tensor, c: float) -> Tensor:
    return _record((x,), x.data + c, lambda g: (g,))


def mul_scalar(x: Tensor, c: float) -> Tensor:
    return _record((x,), x.data * c, lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _record((x,), np.where(mask, x.data, 0.0), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    s = np.where(xd >= 0, 1.0 / (1.0 + np.exp(-np.abs(xd))),
                 np.exp(-np.abs(xd)) / (1.0 + np.exp(-np.abs(xd))))
    return _record((x,), s, lambda g: (g * s * (1.0 - s),))


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise min; ties route a zero subgradient to both sides."""
    _same_shape(a, b, "minimum")
    ad, bd = a.data, b.data

    def bwd(g):
        return g * (ad < bd), g * (bd < ad)

    return _record((a, b), np.minimum(ad, bd), bwd)


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; ties route a zero subgradient to both sides."""
    _same_shape(a, b, "maximum")
    ad, bd = a.data, b.data

    def bwd(g):
        return g * (ad > bd), g * (bd > ad)

    return _record((a, b), np.maximum(ad, bd), bwd)


# ---------------------------------------------------------------------------
# normalization and regularization

def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, computed with max subtraction."""
    if x.shape[-1] < 1:
        raise ShapeError("softmax needs a nonempty last axis")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        inner = (g * s).sum(axis=-1, keepdims=True)
        return ((g - inner) * s,)

    return _record((x,), s, bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias must be ({d},)")
    mean = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    ivar = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * ivar
    out = gamma.data * xhat + beta.data
    lead = tuple(range(x.ndim - 1))

    def bwd(g):
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        ga = g * gamma.data
        dx = ivar * (ga - ga.mean(axis=-1, keepdims=True)
                     - xhat * (ga * xhat).mean(axis=-1, keepdims=True))
        return dx, dgamma, dbeta

    return _record((x, gamma, beta), out, bwd)


class RunningStats:
    """Per-channel running mean/variance for one batch-norm layer."""

    __slots__ = ("mean", "var")

    def __init__(self, channels: int):
        self.mean = np.zeros(channels)
        self.var = np.ones(channels)

    def clone(self) -> "RunningStats":
        s = RunningStats(self.mean.shape[0])
        s.mean = self.mean.copy()
        s.var = self.var.copy()
        return s


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: RunningStats,
               mode: str, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Batch normalization over ``[B,C,H,W]`` with running-state updates.

    Train mode normalizes by batch statistics and folds them into ``state``
    (the variance update uses the unbiased estimate); eval mode normalizes by
    the running state and leaves it untouched.
    """
    if x.ndim != 4:
        raise ShapeError(f"batch_norm needs a 4-D input, got {x.shape}")
    B, C, H, W = x.shape
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"batch_norm: gain/bias must be ({C},)")
    gshape = (1, C, 1, 1)
    if mode == "train":
        n = B * H * W
        if n < 2:
            raise ContractError(
                f"batch_norm train mode needs B*H*W >= 2, got {n}"
            )
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        state.mean = (1.0 - momentum) * state.mean + momentum * mean
        state.var = (1.0 - momentum) * state.var + momentum * var * n / (n - 1)
        ivar = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mean.reshape(gshape)) * ivar.reshape(gshape)
        out = gamma.data.reshape(gshape) * xhat + beta.data.reshape(gshape)

        def bwd(g):
            dgamma = (g * xhat).sum(axis=(0, 2, 3))
            dbeta = g.sum(axis=(0, 2, 3))
            ga = g * gamma.data.reshape(gshape)
            m1 = ga.mean(axis=(0, 2, 3)).reshape(gshape)
            m2 = (ga * xhat).mean(axis=(0, 2, 3)).reshape(gshape)
            dx = ivar.reshape(gshape) * (ga - m1 - xhat * m2)
            return dx, dgamma, dbeta

        return _record((x, gamma, beta), out, bwd)
    if mode == "eval":
        ivar = 1.0 / np.sqrt(state.var + eps)
        xhat = (x.data - state.mean.reshape(gshape)) * ivar.reshape(gshape)
        out = gamma.data.reshape(gshape) * xhat + beta.data.reshape(gshape)

        def bwd(g):
            dgamma = (g * xhat).sum(axis=(0, 2, 3))
            dbeta = g.sum(axis=(0, 2, 3))
            dx = g * (gamma.data * ivar).reshape(gshape)
            return dx, dgamma, dbeta

        return _record((x, gamma, beta), out, bwd)
    raise ContractError(f"batch_norm: mode must be 'train' or 'eval', got {mode!r}")


def dropout(x: Tensor, p: float, rng: Optional[np.random.Generator],
            train: bool) -> Tensor:
    """Inverted dropout; in eval mode this is the identity, bit-exact."""
    if not train or p <= 0.0:
        return x
    if not 0.0 < p < 1.0:
        raise ContractError(f"dropout: p must be in [0,1), got {p}")
    if rng is None:
        raise ContractError("dropout in train mode needs an RNG stream")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return _record((x,), x.data * keep, lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# losses

def cross_entropy_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Per-row cross entropy of ``[M,C]`` logits against integer targets."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be 2-D, got {logits.shape}")
    targets = np.asarray(targets)
    M, C = logits.shape
    if targets.shape != (M,):
        raise ShapeError(f"cross_entropy: targets must be ({M},), got {targets.shape}")
    if targets.min(initial=0) < 0 or targets.max(initial=0) >= C:
        raise ContractError("cross_entropy: target class out of range")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(M)
    losses = lse - z[rows, targets]
    probs = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)

    def bwd(g):
        dl = probs * g[:, None]
        dl[rows, targets] -= g
        return (dl,)

    return _record((logits,), losses, bwd)


def l1_loss(a: Tensor, b: Tensor, reduction: str = "sum") -> Tensor:
    """Sum or mean of absolute differences; ties get a zero subgradient."""
    _same_shape(a, b, "l1_loss")
    diff = a.data - b.data
    sgn = np.sign(diff)
    scale = 1.0 if reduction == "sum" else 1.0 / max(diff.size, 1)
    if reduction not in ("sum", "mean"):
        raise ContractError(f"l1_loss: unknown reduction {reduction!r}")
    val = np.abs(diff).sum() * scale

    def bwd(g):
        gs = g.reshape(()) * scale
        return gs * sgn, -gs * sgn

    return _record((a, b), val, bwd)


# ---------------------------------------------------------------------------
# shape manipulation

def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    n = 1
    for s in shape:
        n *= s
    if n != x.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    old = x.shape
    return _record((x,), x.data.reshape(shape), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: {axes} is not a permutation of {x.ndim} axes")
    inv = [0] * len(axes)
    for i, a in enumerate(axes):
        inv[a] = i
    inv = tuple(inv)
    return _record((x,), np.transpose(x.data, axes),
                   lambda g: (np.transpose(g, inv),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _record(tuple(tensors),
                   np.concatenate([t.data for t in tensors], axis=axis), bwd)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    axis = axis % x.ndim
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    shape = x.shape

    def bwd(g):
        gx = np.zeros(shape)
        gx[idx] = g
        return (gx,)

    return _record((x,), x.data[idx].copy(), bwd)


def take_rows(x: Tensor, indices) -> Tensor:
    """Gather rows of a 2-D tensor; the adjoint scatter-adds them back."""
    if x.ndim != 2:
        raise ShapeError(f"take_rows needs a 2-D tensor, got {x.shape}")
    idx = np.asarray(indices, dtype=np.intp)
    shape = x.shape

    def bwd(g):
        gx = np.zeros(shape)
        np.add.at(gx, idx, g)
        return (gx,)

    return _record((x,), x.data[idx].copy(), bwd)


def tile_batch(x: Tensor, n: int) -> Tensor:
    """Stack ``n`` copies along a new leading axis."""
    if n < 1:
        raise ShapeError(f"tile_batch: n must be >= 1, got {n}")
    out = np.broadcast_to(x.data, (n,) + x.shape).copy()
    return _record((x,), out, lambda g: (g.sum(axis=0),))


# ---------------------------------------------------------------------------
# reductions

def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _record((x,), np.asarray(x.data.sum()),
                   lambda g: (np.full(shape, g.reshape(())),))


def mean_all(x: Tensor) -> Tensor:
    shape, size = x.shape, max(x.size, 1)
    return _record((x,), np.asarray(x.data.mean()),
                   lambda g: (np.full(shape, g.reshape(()) / size),))
