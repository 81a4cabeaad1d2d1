"""Row-wise and column-wise flattening of an h x w x d map, plus the matching positional codes.

Row orientation scans rows top-to-bottom, each row left-to-right, so token t is
cell (t // w, t % w). Column orientation scans columns left-to-right, each
column top-to-bottom, so token t is cell (t % h, t // h).
"""

from dataclasses import dataclass
from enum import Enum

import numpy as np

from utils.errors import ConfigError, ShapeError
from utils.numerics import DTYPE, Tensor, as_tensor, matmul, select


class Orientation(str, Enum):
    ROW = "row"
    COLUMN = "column"


@dataclass(frozen=True)
class FeatureMap:
    values: Tensor

    def __post_init__(self):
        if self.values.ndim != 3:
            raise ShapeError(f"feature map must be h x w x d, got {self.values.dims}")
        h, w, d = self.values.dims
        if h < 1 or w < 1:
            raise ShapeError(f"feature map extents must be positive, got {h}x{w}")
        if d < 2 or d % 2:
            raise ConfigError(f"feature map channels must be even and >= 2, got {d}")

    @property
    def height(self) -> int:
        return self.values.dims[0]

    @property
    def width(self) -> int:
        return self.values.dims[1]

    @property
    def channels(self) -> int:
        return self.values.dims[2]


@dataclass(frozen=True)
class FlattenedSequence:
    orientation: Orientation
    tokens: Tensor
    pos: np.ndarray
    # source extents of the map the tokens came from
    height: int
    width: int

    def __post_init__(self):
        if self.tokens.dims != self.pos.shape:
            raise ShapeError(f"tokens {self.tokens.dims} and pos {self.pos.shape} disagree")

    @property
    def lines(self) -> int:
        """Number of source rows (row orientation) or columns (column orientation)."""
        return self.height if self.orientation is Orientation.ROW else self.width

    @property
    def line_length(self) -> int:
        return self.width if self.orientation is Orientation.ROW else self.height

    def __len__(self) -> int:
        return self.tokens.dims[0]


@dataclass(frozen=True)
class PositionalCodes:
    base: np.ndarray
    query_codes: np.ndarray
    key_codes: np.ndarray


def sinusoid_base(n: int, d: int) -> np.ndarray:
    """n x d codes: (p, 2k) = sin(p / 10000^(2k/d)), (p, 2k+1) = cos(same)."""
    if d < 2 or d % 2:
        raise ConfigError(f"sinusoid codes need an even channel count, got d={d}")
    positions = np.arange(n, dtype=DTYPE)[:, None]
    freqs = 10000.0 ** (np.arange(0, d, 2, dtype=DTYPE) / d)
    angles = positions / freqs
    codes = np.empty((n, d), dtype=DTYPE)
    codes[:, 0::2] = np.sin(angles)
    codes[:, 1::2] = np.cos(angles)
    return codes


def interpolation_matrix(n_src: int, n_dst: int) -> np.ndarray:
    """n_dst x n_src weights of endpoint-aligned linear interpolation.

    Output row i samples source coordinate i * (n_src - 1) / (n_dst - 1); a
    single source row is copied to every output row.
    """
    if n_src < 1:
        raise ConfigError(f"cannot interpolate from {n_src} rows")
    if n_dst < n_src:
        raise ConfigError(f"interpolation target {n_dst} is shorter than source {n_src}")
    weights = np.zeros((n_dst, n_src), dtype=DTYPE)
    if n_src == 1:
        weights[:, 0] = 1.0
        return weights
    for i in range(n_dst):
        x = i * (n_src - 1) / (n_dst - 1)
        lo = min(int(np.floor(x)), n_src - 1)
        frac = x - lo
        weights[i, lo] += 1.0 - frac
        if frac > 0.0:
            weights[i, lo + 1] += frac
    return weights


def interpolate_codes(base: np.ndarray, target_len: int) -> np.ndarray:
    base = np.asarray(base, dtype=DTYPE)
    weights = interpolation_matrix(base.shape[0], target_len)
    out = np.empty((target_len, base.shape[1]), dtype=DTYPE)
    for i, row in enumerate(weights):
        # sum only the nonzero taps so endpoints and identity copies stay exact
        taps = np.flatnonzero(row)
        out[i] = sum(row[j] * base[j] for j in taps) if len(taps) > 1 else base[taps[0]]
    return out


def replicate_codes(base: np.ndarray, repeat: int, orientation: Orientation) -> np.ndarray:
    """Key codes for a flattened sequence, scanned from a map of replicated codes.

    Row orientation: base is h x d and is copied across w columns, so token t
    gets base row t // w. Column orientation: base is w x d and is copied down
    h rows, so token t gets base row t // h. Both scans reduce to repeating
    each base row `repeat` times.
    """
    orientation = Orientation(orientation)
    base = np.asarray(base, dtype=DTYPE)
    n, d = base.shape
    if orientation is Orientation.ROW:
        grid = np.broadcast_to(base[:, None, :], (n, repeat, d))
    else:
        grid = np.broadcast_to(base[None, :, :], (repeat, n, d)).transpose(1, 0, 2)
    return np.ascontiguousarray(grid).reshape(n * repeat, d)


def positional_codes(
    n_src: int, n_dst: int, repeat: int, d: int, orientation: Orientation
) -> PositionalCodes:
    base = sinusoid_base(n_src, d)
    return PositionalCodes(
        base=base,
        query_codes=interpolate_codes(base, n_dst),
        key_codes=replicate_codes(base, repeat, orientation),
    )


def flatten(fmap: FeatureMap, orientation: Orientation) -> FlattenedSequence:
    orientation = Orientation(orientation)
    h, w, d = fmap.values.dims
    if orientation is Orientation.ROW:
        tokens = fmap.values.reshape(h * w, d)
        pos = replicate_codes(sinusoid_base(h, d), w, orientation)
    else:
        tokens = fmap.values.transpose((1, 0, 2)).reshape(w * h, d)
        pos = replicate_codes(sinusoid_base(w, d), h, orientation)
    return FlattenedSequence(orientation, tokens, pos, height=h, width=w)


def unflatten(seq: FlattenedSequence) -> Tensor:
    h, w = seq.height, seq.width
    d = seq.tokens.dims[1]
    if seq.orientation is Orientation.ROW:
        return seq.tokens.reshape(h, w, d)
    return seq.tokens.reshape(w, h, d).transpose((1, 0, 2))


def group_bounds(extent: int, n_groups: int) -> list[tuple[int, int]]:
    """Contiguous [start, stop) blocks of `extent` split into `n_groups` equal parts."""
    if extent % n_groups:
        raise ConfigError(f"{n_groups} groups do not divide extent {extent}")
    size = extent // n_groups
    return [(g * size, (g + 1) * size) for g in range(n_groups)]


def query_groups(n_queries: int, n_groups: int) -> list[tuple[int, int]]:
    """[start, stop) query ranges; query i belongs to group floor(i * n_groups / n_queries)."""
    assignment = (np.arange(n_queries) * n_groups) // n_queries
    ranges = []
    for g in range(n_groups):
        members = np.flatnonzero(assignment == g)
        if len(members):
            ranges.append((int(members[0]), int(members[-1]) + 1))
        else:
            ranges.append((0, 0))
    return ranges


def group_sequence(seq: FlattenedSequence, n_groups: int, group: int) -> FlattenedSequence:
    """Tokens of the `group`-th band of consecutive source lines."""
    start, stop = group_bounds(seq.lines, n_groups)[group]
    per_line = seq.line_length
    rows = slice(start * per_line, stop * per_line)
    if seq.orientation is Orientation.ROW:
        height, width = stop - start, seq.width
    else:
        height, width = seq.height, stop - start
    return FlattenedSequence(
        seq.orientation,
        select(seq.tokens, rows),
        seq.pos[rows],
        height=height,
        width=width,
    )


def pooling_matrix(lines: int, line_length: int, window: int) -> np.ndarray:
    """Average each line in non-overlapping windows; a trailing partial window averages its members."""
    if window < 1:
        raise ConfigError(f"pool window must be >= 1, got {window}")
    per_line = -(-line_length // window)
    weights = np.zeros((lines * per_line, lines * line_length), dtype=DTYPE)
    for line in range(lines):
        for k in range(per_line):
            start = k * window
            stop = min(start + window, line_length)
            cols = line * line_length + np.arange(start, stop)
            weights[line * per_line + k, cols] = 1.0 / (stop - start)
    return weights


def pool_sequence(seq: FlattenedSequence, window: int) -> FlattenedSequence:
    """Average-pool every source line of `seq` with non-overlapping windows of `window` tokens.

    Codes are constant along a line, so the pooled codes are taken from each
    window's first member rather than averaged.
    """
    if window < 1:
        raise ConfigError(f"pool window must be >= 1, got {window}")
    if window == 1:
        return seq
    weights = pooling_matrix(seq.lines, seq.line_length, window)
    per_line = -(-seq.line_length // window)
    first = np.array(
        [line * seq.line_length + k * window for line in range(seq.lines) for k in range(per_line)]
    )
    tokens = matmul(as_tensor(weights), seq.tokens)
    # pooled extents are kept along the pooled axis so lines/line_length stay consistent
    if seq.orientation is Orientation.ROW:
        height, width = seq.height, per_line
    else:
        height, width = per_line, seq.width
    return FlattenedSequence(seq.orientation, tokens, seq.pos[first], height=height, width=width)
