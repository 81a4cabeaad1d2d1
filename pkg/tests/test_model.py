import numpy as np
import pytest

from oracles import dflat_loop, encode_loop, layer_loop
from utils.attention import LayerWeights, decoder_layer
from utils.config import AttentionConfig, ModelConfig
from utils.errors import ConfigError, ResourceError, ShapeError
from utils.flattening import (
    FeatureMap,
    FlattenedSequence,
    Orientation,
    flatten,
    interpolate_codes,
    sinusoid_base,
)
from utils.harness import cross_entropy, generate
from utils.model import (
    Segmenter,
    bilinear_upsample,
    classify,
    compose,
    encode,
    naive_dense_forward,
    register_parameters,
)
from utils.numerics import ParameterStore, Tape, Tensor, gradcheck


def make_config(H=4, W=6, h=2, w=3, d=4, n_heads=1, n_layers=1, n_classes=3, **kwargs):
    attention = {
        key: kwargs.pop(key)
        for key in ("n_groups", "pool_window", "use_group_pool", "ffn_hidden")
        if key in kwargs
    }
    return ModelConfig(
        H=H,
        W=W,
        h=h,
        w=w,
        n_classes=n_classes,
        attention=AttentionConfig(d=d, n_heads=n_heads, n_layers=n_layers, **attention),
        **kwargs,
    )


def make_segmenter(config, scale=0.4, seed=1):
    """Segmenter whose weights are rescaled so every path contributes visibly."""
    segmenter = Segmenter(config)
    rng = np.random.default_rng(seed)
    for name, value in segmenter.store.values.items():
        if name.endswith("query"):
            value += rng.normal(scale=scale, size=value.shape)
        else:
            value[...] = rng.normal(scale=scale, size=value.shape)
    return segmenter


def random_image(config, seed=0):
    return np.random.default_rng(seed).uniform(size=(config.H, config.W, config.c_in))


class TestEncode:
    def test_patch_one_is_per_pixel(self):
        config = make_config(H=3, W=3, h=3, w=3)
        segmenter = make_segmenter(config)
        image = random_image(config)
        fmap = encode(image, segmenter.store, config)
        assert (fmap.height, fmap.width) == (3, 3)
        weight = segmenter.store.values["encoder.weight"]
        bias = segmenter.store.values["encoder.bias"]
        assert np.allclose(fmap.values.data, image @ weight + bias, rtol=0, atol=1e-14)

    def test_constant_image_gives_identical_tokens(self):
        config = make_config()
        segmenter = make_segmenter(config)
        segmenter.store.values["encoder.bias"].fill(0.0)
        fmap = encode(np.full((4, 6, 3), 0.7), segmenter.store, config)
        tokens = fmap.values.data.reshape(-1, 4)
        assert np.allclose(tokens, tokens[0], rtol=0, atol=1e-15)

    def test_shape_contract(self):
        config = make_config(H=8, W=8, h=2, w=2)
        fmap = encode(random_image(config), Segmenter(config).store, config)
        assert fmap.values.dims == (2, 2, 4)

    def test_matches_loop(self):
        config = make_config()
        segmenter = make_segmenter(config)
        image = random_image(config)
        fmap = encode(image, segmenter.store, config)
        expected = encode_loop(segmenter.store.values, image, 2, 4)
        assert np.max(np.abs(fmap.values.data - expected)) <= 1e-12

    def test_indivisible_image(self):
        config = make_config()
        with pytest.raises(ConfigError):
            encode(np.zeros((5, 6, 3)), Segmenter(config).store, config)

    def test_wrong_channels(self):
        config = make_config()
        with pytest.raises(ShapeError):
            encode(np.zeros((4, 6, 1)), Segmenter(config).store, config)

    def test_config_rejects_unequal_patches(self):
        with pytest.raises(ValueError):
            make_config(H=4, W=9, h=2, w=3)


class TestDflatForward:
    @pytest.mark.parametrize(
        "n_layers,n_heads,interactive,head_hidden",
        [(1, 1, True, 0), (2, 2, True, 0), (2, 2, False, 0), (1, 2, True, 5)],
    )
    def test_matches_end_to_end_loop(self, n_layers, n_heads, interactive, head_hidden):
        config = make_config(
            d=4, n_heads=n_heads, n_layers=n_layers, interactive=interactive, head_hidden=head_hidden
        )
        segmenter = make_segmenter(config)
        image = random_image(config)
        out = segmenter.forward(image)
        S, logits = dflat_loop(
            segmenter.store.values, image, 2, 4, n_layers, n_heads, interactive
        )
        assert np.max(np.abs(out.S.data - S)) <= 1e-9
        assert np.max(np.abs(out.logits.data - logits)) <= 1e-9

    @pytest.mark.parametrize("seed", range(4))
    def test_composition_is_exact(self, seed):
        config = make_config(H=6, W=9, h=2, w=3, n_heads=2, n_layers=2, seed=seed)
        out = make_segmenter(config, seed=seed).forward(random_image(config, seed))
        expected = out.z_r.data[:, None, :] + out.z_c.data[None, :, :]
        assert np.max(np.abs(out.S.data - expected)) == 0.0

    def test_zero_rows_give_constant_columns(self):
        rng = np.random.default_rng(0)
        z_c = rng.normal(size=(5, 4))
        S = compose(Tensor(np.zeros((3, 4))), Tensor(z_c))
        for i in range(3):
            assert np.array_equal(S.data[i], z_c)

    @pytest.mark.parametrize("dims", [(1, 1, 1, 1), (2, 2, 8, 8), (3, 1, 6, 2), (2, 4, 2, 4)])
    def test_output_extent(self, dims):
        h, w, H, W = dims
        config = make_config(H=H, W=W, h=h, w=w)
        out = Segmenter(config).forward(random_image(config))
        assert out.S.dims == (H, W, 4)
        assert out.logits.dims == (H, W, 3)

    def test_group_pool_forward_shapes(self):
        config = make_config(H=8, W=8, h=4, w=4, use_group_pool=True, n_groups=2, pool_window=3)
        out = make_segmenter(config).forward(random_image(config))
        assert out.logits.dims == (8, 8, 3)
        assert np.all(np.isfinite(out.logits.data))

    def test_grouping_checked_at_construction(self):
        with pytest.raises(ValueError):
            make_config(H=6, W=6, h=3, w=3, use_group_pool=True, n_groups=2)

    def test_column_path_permutation_consistency(self):
        config = make_config(H=4, W=6, h=2, w=3, n_layers=1, interactive=False)
        segmenter = make_segmenter(config)
        store, att = segmenter.store, config.attention
        fmap = encode(random_image(config), store, config)
        weights = LayerWeights.from_store(store, "col.layer0", 1)
        zq_c = store.values["col.query"]
        cols = flatten(fmap, Orientation.COLUMN)
        base = decoder_layer(Tensor(np.zeros(zq_c.shape)), cols, Tensor(zq_c), weights, att).data

        # swap feature columns 0 and 2, their key codes, and output columns 1 and 4
        swapped = fmap.values.data[:, [2, 1, 0], :]
        token_order = np.concatenate([np.arange(4, 6), np.arange(2, 4), np.arange(0, 2)])
        moved = flatten(FeatureMap(Tensor(swapped)), Orientation.COLUMN)
        moved = FlattenedSequence(
            Orientation.COLUMN, moved.tokens, cols.pos[token_order], height=2, width=3
        )
        query_order = [0, 4, 2, 3, 1, 5]
        out = decoder_layer(
            Tensor(np.zeros(zq_c.shape)), moved, Tensor(zq_c[query_order]), weights, att
        ).data
        assert np.max(np.abs(out - base[query_order])) <= 1e-12


class TestNaive:
    def test_matches_loop(self):
        config = make_config(H=4, W=4, h=2, w=2, d=4, variant="naive")
        segmenter = make_segmenter(config)
        values = segmenter.store.values
        image = random_image(config)
        out = segmenter.forward(image)

        S_o = encode_loop(values, image, 2, 4)
        tokens = [S_o[t // 2, t % 2] for t in range(4)]
        base = sinusoid_base(2, 4)
        pos = [base[t // 2] + base[t % 2] for t in range(4)]
        z_q = values["pixel.query"]
        expected = layer_loop(values, "pixel.layer0", np.zeros(z_q.shape), tokens, pos, z_q, 1)
        assert np.max(np.abs(out.S.data.reshape(16, 4) - expected)) <= 1e-10

    def test_query_codes_are_two_dimensional(self):
        config = make_config(H=4, W=6, h=2, w=3, variant="naive")
        store = register_parameters(ParameterStore(0), config)
        fresh = ParameterStore(0)
        fresh.register("encoder.weight", (12, 4))
        noise = fresh._rng.normal(0.0, 0.02, size=(24, 4))
        rows = interpolate_codes(sinusoid_base(2, 4), 4)
        cols = interpolate_codes(sinusoid_base(3, 4), 6)
        codes = (rows[:, None, :] + cols[None, :, :]).reshape(24, 4)
        assert np.allclose(store.values["pixel.query"], noise + codes, rtol=0, atol=1e-15)

    def test_score_extent(self):
        from utils.attention import ScoreRecorder

        config = make_config(H=4, W=6, h=2, w=3, n_layers=2, variant="naive")
        with ScoreRecorder() as recorder:
            Segmenter(config).forward(random_image(config))
        assert recorder.counts["pixel"] == 2 * 24 * 6
        assert recorder.counts["interactive"] == 0

    def test_singleton_key(self):
        config = make_config(H=3, W=3, h=1, w=1, variant="naive")
        segmenter = make_segmenter(config)
        out = segmenter.forward(random_image(config))
        assert out.S.dims == (3, 3, 4)
        flat = out.S.data.reshape(9, 4)
        assert len({tuple(row) for row in flat}) == 9

    def test_size_guard(self):
        config = make_config(H=512, W=512, h=2, w=2, variant="naive")
        with pytest.raises(ResourceError):
            Segmenter(config)
        fmap = FeatureMap(Tensor(np.zeros((2, 2, 4))))
        with pytest.raises(ResourceError):
            naive_dense_forward(fmap, ParameterStore(), config)


class TestBilinear:
    def test_single_source(self):
        fmap = FeatureMap(Tensor(np.array([[[1.5, -2.0]]])))
        out = bilinear_upsample(fmap, 3, 4)
        assert np.array_equal(out.data, np.broadcast_to([1.5, -2.0], (3, 4, 2)))

    def test_midpoint(self):
        values = np.zeros((2, 2, 2))
        values[:, :, 0] = [[0.0, 1.0], [1.0, 2.0]]
        out = bilinear_upsample(FeatureMap(Tensor(values)), 3, 3)
        assert out.data[1, 1, 0] == 1.0
        assert out.data[0, 1, 0] == 0.5

    def test_identity_extent(self):
        values = np.random.default_rng(0).normal(size=(3, 5, 4))
        out = bilinear_upsample(FeatureMap(Tensor(values)), 3, 5)
        assert np.array_equal(out.data, values)

    def test_variant_has_only_encoder_and_head(self):
        config = make_config(variant="bilinear")
        store = Segmenter(config).store
        assert store.names() == ["encoder.weight", "encoder.bias", "head.weight", "head.bias"]


class TestClassify:
    def test_constant_head(self):
        store = ParameterStore()
        store.register("head.weight", (4, 3), init="zeros")
        bias = store.register("head.bias", (3,))
        logits = classify(Tensor(np.random.default_rng(0).normal(size=(2, 5, 4))), store)
        assert logits.dims == (2, 5, 3)
        assert np.array_equal(logits.data, np.broadcast_to(bias.data, (2, 5, 3)))

    def test_constant_relu_head(self):
        store = ParameterStore()
        store.register("head.hidden.weight", (4, 6))
        store.register("head.hidden.bias", (6,))
        store.register("head.weight", (6, 3), init="zeros")
        bias = store.register("head.bias", (3,))
        logits = classify(Tensor(np.random.default_rng(0).normal(size=(2, 5, 4))), store)
        assert np.array_equal(logits.data, np.broadcast_to(bias.data, (2, 5, 3)))

    def test_affine_head_is_additive_over_rows_and_columns(self):
        rng = np.random.default_rng(2)
        S = compose(Tensor(rng.normal(size=(4, 3))), Tensor(rng.normal(size=(5, 3))))
        store = ParameterStore(seed=3)
        store.register("head.weight", (3, 2))
        store.register("head.bias", (2,))
        logits = classify(S, store).data
        mixed = logits - logits[:, :1] - logits[:1, :] + logits[:1, :1]
        # no affine head can separate (i + j) % 2 when this vanishes
        assert np.max(np.abs(mixed)) < 1e-12

    def test_relu_head_separates_parity(self):
        H, W = 4, 6
        z_r = np.zeros((H, 2))
        z_r[:, 0] = np.arange(H) % 2
        z_c = np.zeros((W, 2))
        z_c[:, 0] = np.arange(W) % 2
        store = ParameterStore()
        store.register("head.hidden.weight", (2, 2), init="zeros")
        store.register("head.hidden.bias", (2,), init="zeros")
        store.register("head.weight", (2, 2), init="zeros")
        store.register("head.bias", (2,), init="zeros")
        store.values["head.hidden.weight"][0] = [1.0, 1.0]
        store.values["head.hidden.bias"][...] = [0.0, -1.0]
        store.values["head.weight"][...] = [[0.0, 1.0], [0.0, -2.0]]
        store.values["head.bias"][...] = [0.5, 0.0]
        logits = classify(compose(Tensor(z_r), Tensor(z_c)), store)
        assert np.array_equal(logits.data.argmax(axis=-1), np.add.outer(np.arange(H), np.arange(W)) % 2)

    def test_argmax_shift_invariance(self):
        config = make_config()
        segmenter = make_segmenter(config)
        image = random_image(config)
        before = segmenter.predict(image)
        segmenter.store.values["head.bias"] += 3.25
        assert np.array_equal(segmenter.predict(image), before)


class TestGradients:
    """Every parameter of small models against central differences."""

    @staticmethod
    def check(config):
        segmenter = Segmenter(config)
        sample = generate("stripes", 1, config.H, config.W, config.n_classes, seed=0)[0]

        def loss_fn():
            return cross_entropy(segmenter.forward(sample.image).logits, sample.mask)

        report = gradcheck(loss_fn, segmenter.store)
        assert set(report) == set(segmenter.store.names())
        worst = max(report, key=report.get)
        assert report[worst] <= 1e-3, (worst, report[worst])

    def test_tiny_dflat(self):
        self.check(make_config(H=6, W=6, h=3, w=3, d=8, n_heads=2, n_layers=2))

    def test_group_pool(self):
        self.check(
            make_config(
                H=6, W=6, h=3, w=3, d=8, n_heads=2, n_layers=2,
                use_group_pool=True, n_groups=3, pool_window=2,
            )
        )

    def test_without_interaction(self):
        self.check(make_config(H=6, W=6, h=3, w=3, d=8, n_heads=2, n_layers=2, interactive=False))

    def test_group_pool_without_interaction(self):
        self.check(
            make_config(
                H=6, W=6, h=3, w=3, d=8, n_heads=2, n_layers=2, interactive=False,
                use_group_pool=True, n_groups=3, pool_window=2,
            )
        )

    def test_relu_head(self):
        self.check(make_config(H=6, W=6, h=3, w=3, d=8, n_heads=2, n_layers=2, head_hidden=8))

    def test_naive(self):
        self.check(make_config(H=4, W=4, h=2, w=2, d=4, variant="naive"))

    def test_bilinear(self):
        self.check(make_config(H=6, W=6, h=3, w=3, d=4, variant="bilinear"))

    @pytest.mark.parametrize("variant", ["dflat", "naive", "bilinear"])
    def test_no_dead_gradients(self, variant):
        config = make_config(d=4, n_heads=2, n_layers=2, variant=variant)
        segmenter = Segmenter(config)
        image = random_image(config)
        mask = np.random.default_rng(1).integers(0, 3, size=(config.H, config.W))
        with Tape() as tape:
            loss = cross_entropy(segmenter.forward(image).logits, mask)
        grads = tape.gradients(loss)
        for name in segmenter.store.names():
            assert name in grads, name
            assert np.any(grads[name] != 0.0), name
