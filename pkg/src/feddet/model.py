"""Miniature detection transformer.

A strided CNN backbone turns the grayscale key frame into a coarse feature
map; tokens from that map, plus a fixed sinusoidal position code, pass
through a transformer encoder; a decoder attends from learned object-query
embeddings; shared feed-forward heads emit class logits and sigmoid-bounded
cxcywh boxes, one prediction per query slot.

Parameters live in a :class:`~feddet.params.ParamTree`. Backbone entries use
the ``backbone.`` path prefix (convolutions tagged BACKBONE, batch-norm
gains/biases tagged NORMALIZATION); everything else, including transformer
layer norms and queries, lives under ``head.`` with the HEAD tag.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np

from . import ops
from .errors import ConfigError, ShapeError
from .params import ParamTree, Partition, partition_params  # noqa: F401
from .tensor import Tensor

__all__ = ["ModelConfig", "Predictions", "init_params", "init_bn_state",
           "positional_encoding", "forward", "partition_params",
           "bn_layer_paths", "reduced_config"]


@dataclass(frozen=True)
class ModelConfig:
    """Architecture constants; defaults are the desk-scale configuration."""

    image_size: int = 64
    in_channels: int = 1
    backbone_widths: tuple = (8, 16, 32, 64)
    embed_dim: int = 64
    num_heads: int = 4
    enc_layers: int = 2
    dec_layers: int = 2
    ffn_dim: int = 128
    num_queries: int = 8
    num_classes: int = 2
    dropout_p: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "backbone_widths", tuple(self.backbone_widths))
        if self.embed_dim % self.num_heads:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by "
                f"num_heads {self.num_heads}")
        if self.embed_dim % 4:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by 4 "
                "(needed by the 2-D sinusoidal position code)")
        stride_total = 2 ** len(self.backbone_widths)
        if self.image_size % stride_total or self.image_size < stride_total:
            raise ConfigError(
                f"image_size {self.image_size} incompatible with "
                f"{len(self.backbone_widths)} stride-2 blocks")
        if self.num_queries < 1 or self.num_classes < 1:
            raise ConfigError("num_queries and num_classes must be positive")

    @property
    def feature_size(self) -> int:
        return self.image_size // 2 ** len(self.backbone_widths)

    @property
    def num_tokens(self) -> int:
        return self.feature_size ** 2


def paper_parity_config(image_size: int = 512) -> ModelConfig:
    """Full-scale transformer constants (not an acceptance target)."""
    return ModelConfig(image_size=image_size, backbone_widths=(64, 128, 256, 512, 1024),
                       embed_dim=256, num_heads=8, enc_layers=6, dec_layers=6,
                       ffn_dim=2048, num_queries=20, dropout_p=0.1)


def reduced_config() -> ModelConfig:
    """Tiny configuration used by whole-model gradient checks."""
    return ModelConfig(image_size=8, backbone_widths=(4, 8), embed_dim=8,
                       num_heads=2, enc_layers=1, dec_layers=1, ffn_dim=16,
                       num_queries=3)


@dataclass
class Predictions:
    """Fixed-size prediction set: ``[B,N,C+1]`` logits, ``[B,N,4]`` boxes."""

    class_logits: Tensor
    boxes: Tensor


# ---------------------------------------------------------------------------
# parameter layout

def _attn_specs(prefix: str, d: int):
    for name in ("wq", "wk", "wv", "wo"):
        yield f"{prefix}.{name}", (d, d), Partition.HEAD, "weight"
    for name in ("bq", "bk", "bv", "bo"):
        yield f"{prefix}.{name}", (d,), Partition.HEAD, "zeros"


def _ln_specs(prefix: str, d: int):
    yield f"{prefix}.gamma", (d,), Partition.HEAD, "ones"
    yield f"{prefix}.beta", (d,), Partition.HEAD, "zeros"


def _ffn_specs(prefix: str, d: int, f: int):
    yield f"{prefix}.w1", (d, f), Partition.HEAD, "weight"
    yield f"{prefix}.b1", (f,), Partition.HEAD, "zeros"
    yield f"{prefix}.w2", (f, d), Partition.HEAD, "weight"
    yield f"{prefix}.b2", (d,), Partition.HEAD, "zeros"


def parameter_specs(cfg: ModelConfig):
    """(path, shape, partition, init kind) for every parameter, in a fixed order."""
    specs = []
    c_in = cfg.in_channels
    for i, width in enumerate(cfg.backbone_widths):
        base = f"backbone.block{i}"
        specs.append((f"{base}.conv.w", (width, c_in, 3, 3), Partition.BACKBONE, "weight"))
        specs.append((f"{base}.conv.b", (width,), Partition.BACKBONE, "zeros"))
        specs.append((f"{base}.bn.gamma", (width,), Partition.NORMALIZATION, "ones"))
        specs.append((f"{base}.bn.beta", (width,), Partition.NORMALIZATION, "zeros"))
        c_in = width
    d, f = cfg.embed_dim, cfg.ffn_dim
    specs.append(("head.proj.w", (cfg.backbone_widths[-1], d), Partition.HEAD, "weight"))
    specs.append(("head.proj.b", (d,), Partition.HEAD, "zeros"))
    for l in range(cfg.enc_layers):
        specs.extend(_attn_specs(f"head.enc{l}.attn", d))
        specs.extend(_ln_specs(f"head.enc{l}.ln1", d))
        specs.extend(_ffn_specs(f"head.enc{l}.ffn", d, f))
        specs.extend(_ln_specs(f"head.enc{l}.ln2", d))
    specs.append(("head.queries", (cfg.num_queries, d), Partition.HEAD, "weight"))
    for l in range(cfg.dec_layers):
        specs.extend(_attn_specs(f"head.dec{l}.self_attn", d))
        specs.extend(_ln_specs(f"head.dec{l}.ln1", d))
        specs.extend(_attn_specs(f"head.dec{l}.cross_attn", d))
        specs.extend(_ln_specs(f"head.dec{l}.ln2", d))
        specs.extend(_ffn_specs(f"head.dec{l}.ffn", d, f))
        specs.extend(_ln_specs(f"head.dec{l}.ln3", d))
    specs.append(("head.class.w", (d, cfg.num_classes + 1), Partition.HEAD, "weight"))
    specs.append(("head.class.b", (cfg.num_classes + 1,), Partition.HEAD, "zeros"))
    specs.append(("head.bbox.w1", (d, d), Partition.HEAD, "weight"))
    specs.append(("head.bbox.b1", (d,), Partition.HEAD, "zeros"))
    specs.append(("head.bbox.w2", (d, d), Partition.HEAD, "weight"))
    specs.append(("head.bbox.b2", (d,), Partition.HEAD, "zeros"))
    specs.append(("head.bbox.w3", (d, 4), Partition.HEAD, "weight"))
    specs.append(("head.bbox.b3", (4,), Partition.HEAD, "zeros"))
    return specs


def bn_layer_paths(cfg: ModelConfig) -> list[str]:
    return [f"backbone.block{i}.bn" for i in range(len(cfg.backbone_widths))]


def init_params(cfg: ModelConfig, seed: int) -> ParamTree:
    """Deterministic initialization; same (config, seed) is bit-identical."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    tree = ParamTree()
    for path, shape, partition, kind in parameter_specs(cfg):
        if kind == "weight":
            # conv kernels are [F,C,k,k]; linears are [in,out]; the query
            # table fans in from the embedding it feeds.
            if len(shape) == 4:
                fan_in = shape[1] * shape[2] * shape[3]
            elif path == "head.queries":
                fan_in = cfg.embed_dim
            else:
                fan_in = shape[0]
            bound = 1.0 / np.sqrt(fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        elif kind == "ones":
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        tree.add(path, Tensor(data, requires_grad=True), partition)
    return tree


def init_bn_state(cfg: ModelConfig) -> dict:
    return {path: ops.RunningStats(width)
            for path, width in zip(bn_layer_paths(cfg), cfg.backbone_widths)}


# ---------------------------------------------------------------------------
# position code

def positional_encoding(h: int, w: int, d: int) -> np.ndarray:
    """Fixed 2-D sinusoidal code, ``[h*w, d]``, rows in token (row-major) order.

    The first half of each row encodes the grid row index, the second half
    the column index; within each half sine and cosine interleave across
    ``d/4`` geometrically spaced frequencies.
    """
    if d % 4:
        raise ConfigError(f"position code needs embed dim divisible by 4, got {d}")
    quarter = d // 4
    freqs = 1.0 / (10000.0 ** (np.arange(quarter) / max(quarter, 1)))
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    out = np.empty((h * w, d))
    for half, coord in enumerate((ys.reshape(-1), xs.reshape(-1))):
        angle = coord[:, None] * freqs[None, :]
        base = half * 2 * quarter
        out[:, base + 0:base + 2 * quarter:2] = np.sin(angle)
        out[:, base + 1:base + 2 * quarter:2] = np.cos(angle)
    return out


# ---------------------------------------------------------------------------
# forward pass

@lru_cache(maxsize=8)
def _cached_pe(h: int, w: int, d: int) -> Tensor:
    return Tensor(positional_encoding(h, w, d))


def _linear(params: ParamTree, prefix: str, x2d: Tensor, w: str, b: str) -> Tensor:
    return ops.bias_add(ops.matmul(x2d, params.tensor(f"{prefix}.{w}")),
                        params.tensor(f"{prefix}.{b}"), axis=1)


def _tokens_linear(params, prefix, x, w, b):
    batch, s, d_in = x.shape
    flat = ops.reshape(x, (batch * s, d_in))
    out = _linear(params, prefix, flat, w, b)
    return ops.reshape(out, (batch, s, out.shape[1]))


def _mha(params: ParamTree, prefix: str, q_in: Tensor, kv_in: Tensor,
         heads: int, attn_sink: Optional[list]) -> Tensor:
    batch, sq, d = q_in.shape
    sk = kv_in.shape[1]
    dh = d // heads

    def split(x, s):
        x = ops.reshape(x, (batch, s, heads, dh))
        x = ops.transpose(x, (0, 2, 1, 3))
        return ops.reshape(x, (batch * heads, s, dh))

    q = split(_tokens_linear(params, prefix, q_in, "wq", "bq"), sq)
    k = split(_tokens_linear(params, prefix, kv_in, "wk", "bk"), sk)
    v = split(_tokens_linear(params, prefix, kv_in, "wv", "bv"), sk)
    scores = ops.mul_scalar(ops.bmm(q, ops.transpose(k, (0, 2, 1))),
                            1.0 / np.sqrt(dh))
    probs = ops.softmax(scores)
    if attn_sink is not None:
        attn_sink.append(probs.data.copy())
    ctx = ops.bmm(probs, v)
    ctx = ops.reshape(ctx, (batch, heads, sq, dh))
    ctx = ops.transpose(ctx, (0, 2, 1, 3))
    ctx = ops.reshape(ctx, (batch * sq, d))
    out = _linear(params, prefix, ctx, "wo", "bo")
    return ops.reshape(out, (batch, sq, d))


def _sublayer(params, ln_prefix, x, delta, cfg, train, rng):
    delta = ops.dropout(delta, cfg.dropout_p, rng, train)
    return ops.layer_norm(ops.add(x, delta),
                          params.tensor(f"{ln_prefix}.gamma"),
                          params.tensor(f"{ln_prefix}.beta"))


def _ffn(params, prefix, x):
    batch, s, d = x.shape
    flat = ops.reshape(x, (batch * s, d))
    hidden = ops.relu(_linear(params, prefix, flat, "w1", "b1"))
    out = _linear(params, prefix, hidden, "w2", "b2")
    return ops.reshape(out, (batch, s, d))


def forward(cfg: ModelConfig, params: ParamTree, bn_state: dict,
            images: Tensor, mode: str = "eval",
            rng: Optional[np.random.Generator] = None,
            attn_sink: Optional[list] = None) -> Predictions:
    """Run the detector; eval mode is a pure function of (params, images)."""
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    train = mode == "train"
    expected = (cfg.in_channels, cfg.image_size, cfg.image_size)
    if images.ndim != 4 or images.shape[1:] != expected:
        raise ShapeError(
            f"images must be [B,{expected[0]},{expected[1]},{expected[2]}], "
            f"got {images.shape}")
    batch = images.shape[0]

    x = images
    for i in range(len(cfg.backbone_widths)):
        base = f"backbone.block{i}"
        x = ops.conv2d(x, params.tensor(f"{base}.conv.w"), stride=2, pad=1)
        x = ops.bias_add(x, params.tensor(f"{base}.conv.b"), axis=1)
        x = ops.batch_norm(x, params.tensor(f"{base}.bn.gamma"),
                           params.tensor(f"{base}.bn.beta"),
                           bn_state[f"{base}.bn"], mode)
        x = ops.relu(x)

    s = cfg.feature_size
    tokens = ops.reshape(x, (batch, cfg.backbone_widths[-1], s * s))
    tokens = ops.transpose(tokens, (0, 2, 1))
    tokens = _tokens_linear(params, "head.proj", tokens, "w", "b")
    pe = ops.tile_batch(_cached_pe(s, s, cfg.embed_dim), batch)
    memory = ops.add(tokens, pe)

    for l in range(cfg.enc_layers):
        base = f"head.enc{l}"
        attn = _mha(params, f"{base}.attn", memory, memory, cfg.num_heads, attn_sink)
        memory = _sublayer(params, f"{base}.ln1", memory, attn, cfg, train, rng)
        ff = _ffn(params, f"{base}.ffn", memory)
        memory = _sublayer(params, f"{base}.ln2", memory, ff, cfg, train, rng)

    tgt = ops.tile_batch(params.tensor("head.queries"), batch)
    for l in range(cfg.dec_layers):
        base = f"head.dec{l}"
        attn = _mha(params, f"{base}.self_attn", tgt, tgt, cfg.num_heads, attn_sink)
        tgt = _sublayer(params, f"{base}.ln1", tgt, attn, cfg, train, rng)
        attn = _mha(params, f"{base}.cross_attn", tgt, memory, cfg.num_heads, attn_sink)
        tgt = _sublayer(params, f"{base}.ln2", tgt, attn, cfg, train, rng)
        ff = _ffn(params, f"{base}.ffn", tgt)
        tgt = _sublayer(params, f"{base}.ln3", tgt, ff, cfg, train, rng)

    n = cfg.num_queries
    flat = ops.reshape(tgt, (batch * n, cfg.embed_dim))
    logits = ops.reshape(_linear(params, "head.class", flat, "w", "b"),
                         (batch, n, cfg.num_classes + 1))
    h1 = ops.relu(_linear(params, "head.bbox", flat, "w1", "b1"))
    h2 = ops.relu(_linear(params, "head.bbox", h1, "w2", "b2"))
    raw = _linear(params, "head.bbox", h2, "w3", "b3")
    boxes = ops.reshape(ops.sigmoid(raw), (batch, n, 4))
    return Predictions(class_logits=logits, boxes=boxes)
