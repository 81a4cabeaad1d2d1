"""Closed-form and instrumented counts of attention score evaluations.

Counts are per layer per head. Interactive attention's H*W scores per layer
are reported separately and left out of the headline figure.
"""

import logging
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Literal

import numpy as np

from utils.attention import ScoreRecorder
from utils.config import ENUMERATE_MAX_EXTENT, AttentionConfig, ModelConfig
from utils.errors import ConfigError, ResourceError
from utils.flattening import FeatureMap
from utils.model import dflat_forward, naive_dense_forward, register_parameters
from utils.numerics import ParameterStore, Tensor

logger = logging.getLogger("dflat_complexity")

CostVariant = Literal["naive", "full_dflat", "group_pool_dflat"]
VARIANTS: tuple[CostVariant, ...] = ("naive", "full_dflat", "group_pool_dflat")


@dataclass(frozen=True)
class CostParams:
    h: int
    w: int
    H: int
    W: int
    d: int = 4
    n_heads: int = 1
    n_layers: int = 1
    n_groups: int = 1
    pool_window: int = 1

    @property
    def d_m(self) -> int:
        return self.d // self.n_heads


@dataclass(frozen=True)
class CostReport:
    variant: CostVariant
    params: CostParams
    scores_per_layer: int
    interactive_per_layer: int
    mac_count: int
    beta_g: Fraction = field(default=Fraction(1))
    beta_p: Fraction = field(default=Fraction(1))

    def to_record(self) -> dict:
        record = {"variant": self.variant, **asdict(self.params)}
        record.update(
            scores_per_layer=self.scores_per_layer,
            interactive_per_layer=self.interactive_per_layer,
            mac_count=self.mac_count,
            beta_g=str(self.beta_g),
            beta_p=str(self.beta_p),
        )
        return record


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def _check_params(variant: str, p: CostParams) -> None:
    if variant not in VARIANTS:
        raise ConfigError(f"unknown cost variant {variant!r}")
    if min(p.h, p.w, p.H, p.W, p.n_groups, p.pool_window, p.n_heads, p.n_layers) < 1:
        raise ConfigError(f"all extents and counts must be positive: {p}")
    if p.H < p.h or p.W < p.w:
        raise ConfigError(f"output {p.H}x{p.W} is smaller than input {p.h}x{p.w}")
    if variant == "group_pool_dflat" and (p.h % p.n_groups or p.w % p.n_groups):
        raise ConfigError(f"n_groups={p.n_groups} must divide h={p.h} and w={p.w}")


def count_scores(variant: CostVariant, p: CostParams) -> CostReport:
    _check_params(variant, p)
    hw = p.h * p.w
    interactive = 0
    if variant == "naive":
        scores = p.H * p.W * hw
    elif variant == "full_dflat":
        scores = hw * (p.H + p.W)
        interactive = p.H * p.W
    else:
        grouped = (p.H + p.W) * hw // p.n_groups
        pooled = p.H * p.h * _ceil_div(p.w, p.pool_window) + p.W * p.w * _ceil_div(
            p.h, p.pool_window
        )
        scores = grouped + pooled
        interactive = p.H * p.W
    # QK^T dot products and the weighted sum of values, each d_m wide
    macs = p.n_layers * (p.n_heads * 2 * scores * p.d_m + 2 * interactive * p.d)
    return CostReport(
        variant=variant,
        params=p,
        scores_per_layer=scores,
        interactive_per_layer=interactive,
        mac_count=macs,
        beta_g=Fraction(1, p.n_groups),
        beta_p=Fraction(1, p.pool_window),
    )


def _model_config(variant: CostVariant, p: CostParams) -> ModelConfig:
    # the decoder is driven directly, so H/h and W/w need not share a patch size
    return ModelConfig.model_construct(
        H=p.H,
        W=p.W,
        h=p.h,
        w=p.w,
        c_in=1,
        n_classes=2,
        interactive=variant != "naive",
        variant="naive" if variant == "naive" else "dflat",
        seed=0,
        attention=AttentionConfig(
            d=p.d,
            n_heads=p.n_heads,
            n_layers=p.n_layers,
            n_groups=p.n_groups,
            pool_window=p.pool_window,
            use_group_pool=variant == "group_pool_dflat",
        ),
    )


def enumerate_scores(variant: CostVariant, p: CostParams) -> CostReport:
    """Run the real decoder under a ScoreRecorder and count every evaluated score."""
    _check_params(variant, p)
    extent = p.h * p.w * p.H * p.W
    if extent > ENUMERATE_MAX_EXTENT:
        raise ResourceError(f"h*w*H*W={extent} exceeds the enumeration guard {ENUMERATE_MAX_EXTENT}")
    config = _model_config(variant, p)
    store = register_parameters(ParameterStore(seed=0), config)
    rng = np.random.default_rng(0)
    fmap = FeatureMap(Tensor(rng.normal(size=(p.h, p.w, p.d))))
    with ScoreRecorder() as recorder:
        if variant == "naive":
            naive_dense_forward(fmap, store, config)
        else:
            dflat_forward(fmap, store, config)
    per_layer_head = p.n_layers * p.n_heads
    decoder_scores = recorder.counts["row"] + recorder.counts["column"] + recorder.counts["pixel"]
    report = count_scores(variant, p)
    return CostReport(
        variant=variant,
        params=p,
        scores_per_layer=decoder_scores // per_layer_head,
        interactive_per_layer=recorder.counts["interactive"] // p.n_layers,
        mac_count=report.mac_count,
        beta_g=report.beta_g,
        beta_p=report.beta_p,
    )


def random_sweep(points: int, seed: int = 0, max_feat: int = 8, max_out: int = 32) -> list[CostParams]:
    """Random valid parameter points: h, w in [1, max_feat], H, W in [h, max_out]."""
    rng = np.random.default_rng(seed)
    sweep = []
    for _ in range(points):
        h, w = (int(v) for v in rng.integers(1, max_feat + 1, size=2))
        H = int(rng.integers(h, max_out + 1))
        W = int(rng.integers(w, max_out + 1))
        divisors = [g for g in range(1, min(h, w) + 1) if h % g == 0 and w % g == 0]
        n_groups = int(rng.choice(divisors))
        pool_window = int(rng.integers(1, max(h, w) + 1))
        sweep.append(CostParams(h=h, w=w, H=H, W=W, n_groups=n_groups, pool_window=pool_window))
    return sweep
