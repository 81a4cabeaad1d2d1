import math

import numpy as np
import pytest

from oracles import sinusoid_loop
from utils.errors import ConfigError, ShapeError
from utils.flattening import (
    FeatureMap,
    Orientation,
    flatten,
    group_bounds,
    group_sequence,
    interpolate_codes,
    pool_sequence,
    pooling_matrix,
    positional_codes,
    query_groups,
    replicate_codes,
    sinusoid_base,
    unflatten,
)
from utils.numerics import Tensor


def labelled_map(h, w, d=2):
    """Channel 0 holds the row index, channel 1 the column index."""
    values = np.zeros((h, w, d))
    values[:, :, 0] = np.arange(h)[:, None]
    values[:, :, 1] = np.arange(w)[None, :]
    return FeatureMap(Tensor(values))


def cells(seq):
    return [(int(i), int(j)) for i, j in seq.tokens.data[:, :2]]


class TestFlatten:
    def test_row_scan(self):
        seq = flatten(labelled_map(2, 3), Orientation.ROW)
        assert cells(seq) == [(0, 0), (0, 1), (0, 2), (1, 0), (1, 1), (1, 2)]

    def test_column_scan(self):
        seq = flatten(labelled_map(2, 3), Orientation.COLUMN)
        assert cells(seq) == [(0, 0), (1, 0), (0, 1), (1, 1), (0, 2), (1, 2)]

    @pytest.mark.parametrize("orientation", list(Orientation))
    @pytest.mark.parametrize("h,w", [(1, 1), (1, 5), (4, 1), (3, 7)])
    def test_token_positions(self, orientation, h, w):
        seq = flatten(labelled_map(h, w), orientation)
        for t, cell in enumerate(cells(seq)):
            expected = (t // w, t % w) if orientation is Orientation.ROW else (t % h, t // h)
            assert cell == expected

    @pytest.mark.parametrize("orientation", ["row", "column"])
    def test_unflatten_restores_map(self, orientation):
        fmap = FeatureMap(Tensor(np.random.default_rng(0).normal(size=(3, 5, 4))))
        restored = unflatten(flatten(fmap, orientation))
        assert np.array_equal(restored.data, fmap.values.data)

    def test_sequence_extents(self):
        row = flatten(labelled_map(2, 3), "row")
        col = flatten(labelled_map(2, 3), "column")
        assert (row.lines, row.line_length, len(row)) == (2, 3, 6)
        assert (col.lines, col.line_length, len(col)) == (3, 2, 6)

    def test_odd_channels_rejected(self):
        with pytest.raises(ConfigError):
            FeatureMap(Tensor(np.zeros((2, 2, 3))))

    def test_rank_checked(self):
        with pytest.raises(ShapeError):
            FeatureMap(Tensor(np.zeros((2, 2))))


class TestSinusoid:
    def test_position_zero(self):
        assert np.array_equal(sinusoid_base(1, 6)[0], [0, 1, 0, 1, 0, 1])

    def test_direct_values(self):
        row = sinusoid_base(2, 4)[1]
        expected = [math.sin(1), math.cos(1), math.sin(1e-2), math.cos(1e-2)]
        assert np.allclose(row, expected, rtol=0, atol=1e-15)

    def test_matches_loop(self):
        assert np.allclose(sinusoid_base(7, 8), sinusoid_loop(7, 8), rtol=0, atol=1e-14)

    def test_odd_d_rejected(self):
        with pytest.raises(ConfigError):
            sinusoid_base(3, 5)


class TestInterpolation:
    def test_midpoint(self):
        a, b = np.array([1.0, 2.0]), np.array([3.0, 6.0])
        out = interpolate_codes(np.stack([a, b]), 3)
        assert np.array_equal(out, [a, (a + b) / 2, b])

    def test_identity(self):
        base = sinusoid_base(5, 4)
        assert np.array_equal(interpolate_codes(base, 5), base)

    def test_single_row_copied(self):
        base = sinusoid_base(1, 4)
        assert np.array_equal(interpolate_codes(base, 4), np.repeat(base, 4, axis=0))

    def test_endpoints_exact(self):
        base = sinusoid_base(3, 4)
        out = interpolate_codes(base, 11)
        assert np.array_equal(out[0], base[0])
        assert np.array_equal(out[-1], base[-1])
        # i * 2 / 10 == 1 at i == 5
        assert np.array_equal(out[5], base[1])

    @pytest.mark.parametrize("n_src,n_dst,d", [(3, 11, 8), (4, 32, 16), (8, 32, 32)])
    def test_monotone_channels_stay_monotone(self, n_src, n_dst, d):
        base = sinusoid_base(n_src, d)
        out = interpolate_codes(base, n_dst)
        steps = np.diff(base, axis=0)
        rising = np.flatnonzero(np.all(steps >= 0, axis=0))
        falling = np.flatnonzero(np.all(steps <= 0, axis=0))
        assert len(rising) and len(falling)
        assert np.all(np.diff(out[:, rising], axis=0) >= 0)
        assert np.all(np.diff(out[:, falling], axis=0) <= 0)

    def test_downsampling_rejected(self):
        with pytest.raises(ConfigError):
            interpolate_codes(sinusoid_base(4, 4), 3)


class TestReplication:
    def test_row(self):
        base = np.array([[1.0, 0.0], [2.0, 0.0]])
        out = replicate_codes(base, 3, Orientation.ROW)
        assert out[:, 0].tolist() == [1, 1, 1, 2, 2, 2]

    def test_column(self):
        base = np.array([[1.0, 0.0], [2.0, 0.0], [3.0, 0.0]])
        out = replicate_codes(base, 2, Orientation.COLUMN)
        assert out[:, 0].tolist() == [1, 1, 2, 2, 3, 3]

    @pytest.mark.parametrize("orientation", list(Orientation))
    def test_scan_of_replicated_map(self, orientation):
        h, w, d = 3, 4, 6
        if orientation is Orientation.ROW:
            base, repeat = sinusoid_base(h, d), w
            grid = np.repeat(base[:, None, :], w, axis=1)
        else:
            base, repeat = sinusoid_base(w, d), h
            grid = np.repeat(base[None, :, :], h, axis=0)
        seq = flatten(FeatureMap(Tensor(grid)), orientation)
        assert np.array_equal(replicate_codes(base, repeat, orientation), seq.tokens.data)

    def test_flatten_attaches_key_codes(self):
        seq = flatten(labelled_map(2, 3, d=4), Orientation.COLUMN)
        codes = positional_codes(3, 6, 2, 4, Orientation.COLUMN)
        assert np.array_equal(seq.pos, codes.key_codes)
        assert codes.query_codes.shape == (6, 4)


class TestGrouping:
    def test_query_group_assignment(self):
        ranges = query_groups(8, 4)
        assert ranges == [(0, 2), (2, 4), (4, 6), (6, 8)]
        assert [g for g, (a, b) in enumerate(ranges) if a <= 5 < b] == [2]

    def test_uneven_query_groups_cover_everything(self):
        ranges = query_groups(7, 3)
        assert ranges[0][0] == 0 and ranges[-1][1] == 7
        assert all(ranges[k][1] == ranges[k + 1][0] for k in range(2))

    def test_bounds_reject_non_divisor(self):
        with pytest.raises(ConfigError):
            group_bounds(5, 2)

    def test_group_is_band_of_lines(self):
        seq = flatten(labelled_map(4, 3), Orientation.ROW)
        band = group_sequence(seq, 2, 1)
        assert {i for i, _ in cells(band)} == {2, 3}
        col = flatten(labelled_map(4, 6), Orientation.COLUMN)
        band = group_sequence(col, 3, 0)
        assert {j for _, j in cells(band)} == {0, 1}
        assert np.array_equal(band.pos, col.pos[: len(band)])


class TestPooling:
    def pooled_channel(self, values, window):
        fmap = np.zeros((1, len(values), 2))
        fmap[0, :, 0] = values
        seq = pool_sequence(flatten(FeatureMap(Tensor(fmap)), Orientation.ROW), window)
        return seq.tokens.data[:, 0].tolist()

    def test_window_averages(self):
        assert self.pooled_channel([1, 2, 3, 4], 2) == [1.5, 3.5]

    def test_trailing_partial_window(self):
        assert self.pooled_channel([1, 2, 3, 4, 5], 2) == [1.5, 3.5, 5.0]

    def test_window_one_is_identity(self):
        seq = flatten(labelled_map(3, 4), Orientation.COLUMN)
        assert pool_sequence(seq, 1) is seq

    def test_zero_window_rejected(self):
        with pytest.raises(ConfigError):
            pool_sequence(flatten(labelled_map(2, 4), Orientation.ROW), 0)

    def test_matrix_rows_sum_to_one(self):
        weights = pooling_matrix(3, 5, 2)
        assert weights.shape == (9, 15)
        assert np.allclose(weights.sum(axis=1), 1.0)

    def test_windows_stay_inside_lines(self):
        seq = flatten(labelled_map(3, 4), Orientation.COLUMN)
        pooled = pool_sequence(seq, 2)
        assert len(pooled) == 4 * 2
        # every pooled token averages cells of a single column
        assert np.array_equal(pooled.tokens.data[:, 1], np.repeat(np.arange(4), 2))
        assert np.array_equal(pooled.pos, np.repeat(sinusoid_base(4, 2), 2, axis=0))
