"""Patch encoder, the dual-flattening decoder, the two baselines, and the pixel classifier."""

import logging
from dataclasses import dataclass

import numpy as np

from utils.attention import (
    LayerState,
    LayerWeights,
    check_grouping,
    decoder_layer,
    interactive_attn,
    register_layer,
)
from utils.config import NAIVE_MAX_QUERIES, ModelConfig
from utils.errors import ConfigError, ResourceError, ShapeError
from utils.flattening import (
    FeatureMap,
    FlattenedSequence,
    Orientation,
    flatten,
    interpolate_codes,
    interpolation_matrix,
    sinusoid_base,
)
from utils.numerics import ParameterStore, Tensor, as_tensor, matmul, relu

logger = logging.getLogger("dflat_model")


@dataclass
class DenseOutput:
    S: Tensor
    logits: Tensor
    # final row/column embeddings; None for the baselines
    z_r: Tensor | None = None
    z_c: Tensor | None = None


def register_parameters(store: ParameterStore, config: ModelConfig) -> ParameterStore:
    """Register every parameter of `config.variant`, always in the same order."""
    d, att = config.d, config.attention
    store.register("encoder.weight", (config.patch * config.patch * config.c_in, d))
    store.register("encoder.bias", (d,), init="zeros")
    if config.variant == "dflat":
        check_grouping(att, config.h, config.w)
        row_codes = interpolate_codes(sinusoid_base(config.h, d), config.H)
        col_codes = interpolate_codes(sinusoid_base(config.w, d), config.W)
        store.register("row.query", (config.H, d), offset=row_codes)
        store.register("col.query", (config.W, d), offset=col_codes)
        for l in range(att.n_layers):
            register_layer(store, f"row.layer{l}", att)
            register_layer(store, f"col.layer{l}", att)
    elif config.variant == "naive":
        _check_naive_size(config.H, config.W)
        codes = _pixel_codes(config.H, config.W, config.h, config.w, d)
        store.register("pixel.query", (config.H * config.W, d), offset=codes)
        for l in range(att.n_layers):
            register_layer(store, f"pixel.layer{l}", att)
    head_in = d
    if config.head_hidden:
        store.register("head.hidden.weight", (d, config.head_hidden))
        store.register("head.hidden.bias", (config.head_hidden,), init="zeros")
        head_in = config.head_hidden
    store.register("head.weight", (head_in, config.n_classes))
    store.register("head.bias", (config.n_classes,), init="zeros")
    return store


def encode(image, store: ParameterStore, config: ModelConfig) -> FeatureMap:
    """Project non-overlapping patch x patch blocks of an H x W x c_in image to d channels."""
    pixels = np.asarray(image.data if isinstance(image, Tensor) else image, dtype=np.float64)
    if pixels.ndim != 3 or pixels.shape[2] != config.c_in:
        raise ShapeError(f"image must be H x W x {config.c_in}, got {pixels.shape}")
    H, W, c = pixels.shape
    p = config.patch
    if H % p or W % p:
        raise ConfigError(f"image {H}x{W} is not divisible by patch {p}")
    h, w = H // p, W // p
    patches = pixels.reshape(h, p, w, p, c).transpose(0, 2, 1, 3, 4).reshape(h * w, p * p * c)
    tokens = matmul(as_tensor(patches), store.param("encoder.weight")) + store.param("encoder.bias")
    return FeatureMap(tokens.reshape(h, w, config.d))


def classify(S: Tensor, store: ParameterStore) -> Tensor:
    """Shared pixel head: an affine map to n_classes, after a relu layer when one is registered.

    S_ij = Z_r[i] + Z_c[j] makes affine logits additive in i and j, so labels
    that combine row and column parity (the checker task) need the relu layer.
    """
    H, W, d = S.dims
    pixels = S.reshape(H * W, d)
    if "head.hidden.weight" in store:
        pixels = relu(pixels @ store.param("head.hidden.weight") + store.param("head.hidden.bias"))
    weight, bias = store.param("head.weight"), store.param("head.bias")
    logits = pixels @ weight + bias
    return logits.reshape(H, W, weight.dims[1])


def compose(z_r: Tensor, z_c: Tensor) -> Tensor:
    """S_ij = Z_r[i] + Z_c[j]."""
    H, d = z_r.dims
    W = z_c.dims[0]
    return z_r.reshape(H, 1, d) + z_c.reshape(1, W, d)


def dflat_forward(S_o: FeatureMap, store: ParameterStore, config: ModelConfig) -> DenseOutput:
    """Row and column transformers over the dual-flattened map, composed into an H x W x d map."""
    att = config.attention
    check_grouping(att, S_o.height, S_o.width)
    rows = flatten(S_o, Orientation.ROW)
    cols = flatten(S_o, Orientation.COLUMN)
    zq_r, zq_c = store.param("row.query"), store.param("col.query")
    state = LayerState(
        z_r=Tensor(np.zeros(zq_r.dims)),
        z_c=Tensor(np.zeros(zq_c.dims)),
    )
    for l in range(att.n_layers):
        row_weights = LayerWeights.from_store(store, f"row.layer{l}", att.n_heads)
        col_weights = LayerWeights.from_store(store, f"col.layer{l}", att.n_heads)
        o_r = decoder_layer(state.z_r, rows, zq_r, row_weights, att, f"row/l{l}")
        o_c = decoder_layer(state.z_c, cols, zq_c, col_weights, att, f"column/l{l}")
        if config.interactive:
            z_r, z_c = interactive_attn(o_r, o_c, f"interactive/l{l}")
        else:
            z_r, z_c = o_r, o_c
        state = LayerState(z_r=z_r, z_c=z_c, o_r=o_r, o_c=o_c)
    S = compose(state.z_r, state.z_c)
    return DenseOutput(S=S, logits=classify(S, store), z_r=state.z_r, z_c=state.z_c)


def _check_naive_size(H: int, W: int) -> None:
    if H * W > NAIVE_MAX_QUERIES:
        raise ResourceError(
            f"naive dense transformer needs {H * W} queries, above the desk-scale guard of {NAIVE_MAX_QUERIES}"
        )


def _pixel_codes(H: int, W: int, h: int, w: int, d: int) -> np.ndarray:
    rows = interpolate_codes(sinusoid_base(h, d), H)
    cols = interpolate_codes(sinusoid_base(w, d), W)
    return (rows[:, None, :] + cols[None, :, :]).reshape(H * W, d)


def naive_dense_forward(S_o: FeatureMap, store: ParameterStore, config: ModelConfig) -> DenseOutput:
    """One query per output pixel attending to all h*w tokens; no interactive attention."""
    H, W, d = config.H, config.W, config.d
    _check_naive_size(H, W)
    att = config.attention
    h, w = S_o.height, S_o.width
    row_major = flatten(S_o, Orientation.ROW)
    # 2-D key codes: the row code of the token's row plus the column code of its column
    col_codes = sinusoid_base(w, d)
    pos = row_major.pos + np.tile(col_codes, (h, 1))
    seq = FlattenedSequence(Orientation.ROW, row_major.tokens, pos, height=h, width=w)
    z_q = store.param("pixel.query")
    z = Tensor(np.zeros(z_q.dims))
    # grouping/pooling only apply to the decomposed decoder
    full = att.model_copy(update={"use_group_pool": False})
    for l in range(att.n_layers):
        weights = LayerWeights.from_store(store, f"pixel.layer{l}", att.n_heads)
        z = decoder_layer(z, seq, z_q, weights, full, f"pixel/l{l}")
    S = z.reshape(H, W, d)
    return DenseOutput(S=S, logits=classify(S, store))


def bilinear_upsample(S_o: FeatureMap, H: int, W: int) -> Tensor:
    """Endpoint-aligned bilinear interpolation of every channel to H x W."""
    h, w, d = S_o.values.dims
    rows = as_tensor(interpolation_matrix(h, H))
    cols = as_tensor(interpolation_matrix(w, W))
    tall = matmul(rows, S_o.values.reshape(h, w * d)).reshape(H, w, d)
    wide = matmul(cols, tall.transpose((1, 0, 2)).reshape(w, H * d))
    return wide.reshape(W, H, d).transpose((1, 0, 2))


class Segmenter:
    """Patch encoder + decoder variant + classifier over one ParameterStore."""

    def __init__(self, config: ModelConfig, store: ParameterStore | None = None):
        self.config = config
        if store is None:
            store = register_parameters(ParameterStore(config.seed), config)
        self.store = store
        logger.debug(
            "Built %s segmenter with %d parameters", config.variant, store.num_parameters()
        )

    def decode(self, S_o: FeatureMap) -> DenseOutput:
        if self.config.variant == "dflat":
            return dflat_forward(S_o, self.store, self.config)
        if self.config.variant == "naive":
            return naive_dense_forward(S_o, self.store, self.config)
        S = bilinear_upsample(S_o, self.config.H, self.config.W)
        return DenseOutput(S=S, logits=classify(S, self.store))

    def forward(self, image) -> DenseOutput:
        return self.decode(encode(image, self.store, self.config))

    def predict(self, image) -> np.ndarray:
        return self.forward(image).logits.data.argmax(axis=-1)
