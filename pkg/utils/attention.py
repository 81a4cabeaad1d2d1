"""Decoder layer math: query/key attention with residual, FFN, row-column interaction, grouping and pooling."""

import contextvars
import logging
import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from utils.config import AttentionConfig
from utils.errors import ConfigError, ShapeError
from utils.flattening import (
    FlattenedSequence,
    group_bounds,
    group_sequence,
    pool_sequence,
    query_groups,
)
from utils.numerics import (
    ParameterStore,
    Tensor,
    add,
    concat,
    layer_norm,
    relu,
    select,
    softmax_rows,
)

logger = logging.getLogger("dflat_attention")


class ScoreRecorder:
    """Counts every evaluated (query, key) score, by kind, while active.

    Labels look like "row/l0/h1" or "interactive/l0"; the kind is the part
    before the first slash. With keep=True the softmax matrices are kept too.
    """

    def __init__(self, keep: bool = False):
        self.keep = keep
        self.counts: Counter[str] = Counter()
        self.maps: list[tuple[str, np.ndarray]] = []
        self._token = None

    def __enter__(self) -> "ScoreRecorder":
        self._token = _recorder.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _recorder.reset(self._token)
        self._token = None

    def observe(self, label: str | None, probs: Tensor) -> None:
        kind = (label or "unlabeled").split("/", 1)[0]
        self.counts[kind] += probs.data.size
        if self.keep:
            self.maps.append((label or "unlabeled", probs.data.copy()))


_recorder: contextvars.ContextVar[ScoreRecorder | None] = contextvars.ContextVar(
    "dflat_score_recorder", default=None
)


def _observe(label: str | None, probs: Tensor) -> None:
    recorder = _recorder.get()
    if recorder is not None:
        recorder.observe(label, probs)


@dataclass
class HeadWeights:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor

    @property
    def d_m(self) -> int:
        return self.w_q.dims[1]


@dataclass
class LayerWeights:
    heads: list[HeadWeights]
    w_o: Tensor
    ffn_w1: Tensor
    ffn_b1: Tensor
    ffn_w2: Tensor
    ffn_b2: Tensor
    norm1_gain: Tensor
    norm1_bias: Tensor
    norm2_gain: Tensor
    norm2_bias: Tensor

    @classmethod
    def from_store(cls, store: ParameterStore, prefix: str, n_heads: int) -> "LayerWeights":
        heads = [
            HeadWeights(
                w_q=store.param(f"{prefix}.head{i}.w_q"),
                w_k=store.param(f"{prefix}.head{i}.w_k"),
                w_v=store.param(f"{prefix}.head{i}.w_v"),
            )
            for i in range(n_heads)
        ]
        return cls(
            heads=heads,
            w_o=store.param(f"{prefix}.w_o"),
            ffn_w1=store.param(f"{prefix}.ffn.w1"),
            ffn_b1=store.param(f"{prefix}.ffn.b1"),
            ffn_w2=store.param(f"{prefix}.ffn.w2"),
            ffn_b2=store.param(f"{prefix}.ffn.b2"),
            norm1_gain=store.param(f"{prefix}.norm1.gain"),
            norm1_bias=store.param(f"{prefix}.norm1.bias"),
            norm2_gain=store.param(f"{prefix}.norm2.gain"),
            norm2_bias=store.param(f"{prefix}.norm2.bias"),
        )


def register_layer(store: ParameterStore, prefix: str, config: AttentionConfig) -> None:
    d, d_m = config.d, config.d_m
    for i in range(config.n_heads):
        for proj in ("w_q", "w_k", "w_v"):
            store.register(f"{prefix}.head{i}.{proj}", (d, d_m))
    store.register(f"{prefix}.w_o", (config.n_heads * d_m, d))
    store.register(f"{prefix}.ffn.w1", (d, config.hidden))
    store.register(f"{prefix}.ffn.b1", (config.hidden,), init="zeros")
    store.register(f"{prefix}.ffn.w2", (config.hidden, d))
    store.register(f"{prefix}.ffn.b2", (d,), init="zeros")
    for norm in ("norm1", "norm2"):
        store.register(f"{prefix}.{norm}.gain", (d,), init="ones")
        store.register(f"{prefix}.{norm}.bias", (d,), init="zeros")


@dataclass
class LayerState:
    z_r: Tensor
    z_c: Tensor
    o_r: Tensor | None = None
    o_c: Tensor | None = None


def _check_inputs(z_prev: Tensor, seq: FlattenedSequence, z_q: Tensor, head: HeadWeights) -> None:
    if z_prev.dims != z_q.dims:
        raise ShapeError(f"Z_prev {z_prev.dims} and Z_q {z_q.dims} disagree")
    if seq.tokens.dims[1] != head.w_k.dims[0]:
        raise ShapeError(
            f"token channels {seq.tokens.dims[1]} do not match W_k rows {head.w_k.dims[0]}"
        )
    if head.d_m <= 0:
        raise ShapeError("per-head channels must be positive")


def head_increment(
    z_prev: Tensor,
    seq: FlattenedSequence,
    z_q: Tensor,
    head: HeadWeights,
    label: str | None = None,
) -> Tensor:
    """SoftMax(((Z+Z_q)W_q)((R+t)W_k)^T / sqrt(d_m)) R W_v, an n_q x d_m tensor."""
    _check_inputs(z_prev, seq, z_q, head)
    queries = (z_prev + z_q) @ head.w_q
    keys = (seq.tokens + seq.pos) @ head.w_k
    values = seq.tokens @ head.w_v
    probs = softmax_rows((queries @ keys.T) / math.sqrt(head.d_m))
    _observe(label, probs)
    return probs @ values


def _head_channels(head_index: int, d_m: int) -> tuple[slice, slice]:
    return (slice(None), slice(head_index * d_m, (head_index + 1) * d_m))


def single_head_attn(
    z_prev: Tensor,
    seq: FlattenedSequence,
    z_q: Tensor,
    head: HeadWeights,
    head_index: int = 0,
    label: str | None = None,
) -> Tensor:
    """One head of the attention with its residual.

    The residual is the head's own d_m-wide channel slice of Z_prev, so that
    concatenating all heads restores Z_prev exactly. With one head of width d
    the residual is Z_prev itself.
    """
    increment = head_increment(z_prev, seq, z_q, head, label)
    if head.d_m == z_prev.dims[1]:
        return z_prev + increment
    return select(z_prev, _head_channels(head_index, head.d_m)) + increment


def multi_head_attn(
    z_prev: Tensor,
    seq: FlattenedSequence,
    z_q: Tensor,
    weights: LayerWeights,
    label: str | None = None,
) -> Tensor:
    heads = [
        single_head_attn(z_prev, seq, z_q, head, i, f"{label}/h{i}" if label else None)
        for i, head in enumerate(weights.heads)
    ]
    return concat(heads, axis=1) @ weights.w_o


def attention_increment(
    z_prev: Tensor,
    seq: FlattenedSequence,
    z_q: Tensor,
    weights: LayerWeights,
    label: str | None = None,
) -> Tensor:
    """Concatenated residual-free head increments (n_q x d), before W^O."""
    return concat(
        [
            head_increment(z_prev, seq, z_q, head, f"{label}/h{i}" if label else None)
            for i, head in enumerate(weights.heads)
        ],
        axis=1,
    )


def grouped_attn(
    z_prev: Tensor,
    seq: FlattenedSequence,
    z_q: Tensor,
    weights: LayerWeights,
    n_groups: int,
    label: str | None = None,
) -> Tensor:
    """Residual-free increment where query group g only sees the g-th band of source lines."""
    group_bounds(seq.lines, n_groups)
    n_queries = z_prev.dims[0]
    groups = [group_sequence(seq, n_groups, g) for g in range(n_groups)]
    parts = []
    for g, (start, stop) in enumerate(query_groups(n_queries, n_groups)):
        if stop == start:
            continue
        rows = slice(start, stop)
        parts.append(
            attention_increment(
                select(z_prev, rows),
                groups[g],
                select(z_q, rows),
                weights,
                f"{label}/g{g}" if label else None,
            )
        )
    return concat(parts, axis=0)


def pooled_attn(
    z_prev: Tensor,
    seq: FlattenedSequence,
    z_q: Tensor,
    weights: LayerWeights,
    pool_window: int,
    label: str | None = None,
) -> Tensor:
    """Residual-free increment over the line-wise average-pooled sequence."""
    return attention_increment(
        z_prev, pool_sequence(seq, pool_window), z_q, weights, f"{label}/pool" if label else None
    )


def group_pool_attn(
    z_prev: Tensor,
    seq: FlattenedSequence,
    z_q: Tensor,
    weights: LayerWeights,
    n_groups: int,
    pool_window: int,
    label: str | None = None,
) -> Tensor:
    """(Z_prev + grouped increment + pooled increment) W^O; the residual is counted once."""
    grouped = grouped_attn(z_prev, seq, z_q, weights, n_groups, label)
    pooled = pooled_attn(z_prev, seq, z_q, weights, pool_window, label)
    return (z_prev + grouped + pooled) @ weights.w_o


def ffn_block(x: Tensor, weights: LayerWeights) -> Tensor:
    """LayerNorm(x + W2 relu(W1 x + b1) + b2)."""
    hidden = relu(x @ weights.ffn_w1 + weights.ffn_b1)
    return layer_norm(
        x + (hidden @ weights.ffn_w2 + weights.ffn_b2), weights.norm2_gain, weights.norm2_bias
    )


def interactive_attn(o_r: Tensor, o_c: Tensor, label: str | None = None) -> tuple[Tensor, Tensor]:
    """Each row aggregates all columns it crosses and vice versa; no projections.

    The H x W logits are evaluated once; the column side softmaxes their transpose.
    """
    if o_r.dims[1] != o_c.dims[1]:
        raise ShapeError(f"row channels {o_r.dims[1]} and column channels {o_c.dims[1]} differ")
    logits = (o_r @ o_c.T) / math.sqrt(o_r.dims[1])
    row_probs = softmax_rows(logits)
    _observe(label or "interactive", row_probs)
    col_probs = softmax_rows(logits.T)
    return add(row_probs @ o_c, o_r), add(col_probs @ o_r, o_c)


def decoder_layer(
    z_prev: Tensor,
    seq: FlattenedSequence,
    z_q: Tensor,
    weights: LayerWeights,
    config: AttentionConfig,
    label: str | None = None,
) -> Tensor:
    """Attention (full or group+pool), post-norm, then the FFN block: O_l for one transformer."""
    if config.use_group_pool:
        attended = group_pool_attn(
            z_prev, seq, z_q, weights, config.n_groups, config.pool_window, label
        )
    else:
        attended = multi_head_attn(z_prev, seq, z_q, weights, label)
    return ffn_block(layer_norm(attended, weights.norm1_gain, weights.norm1_bias), weights)


def check_grouping(config: AttentionConfig, h: int, w: int) -> None:
    if config.use_group_pool and (h % config.n_groups or w % config.n_groups):
        raise ConfigError(f"n_groups={config.n_groups} must divide h={h} and w={w}")
