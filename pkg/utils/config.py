import os
from pathlib import Path
from typing import Literal

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, model_validator

from utils.errors import CheckpointError, ConfigError

load_dotenv()


DETERMINISTIC = os.getenv("DFLAT_DETERMINISTIC") == "1"
if DETERMINISTIC:
    # only effective when set before numpy loads its BLAS
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, "1")

LOG_LEVEL = os.getenv("DFLAT_LOG_LEVEL") or "INFO"
OUT_DIR = os.getenv("DFLAT_OUT_DIR") or "runs"
MAX_WORKERS = 1 if DETERMINISTIC else int(os.getenv("DFLAT_MAX_WORKERS") or "4")

INIT_STD = 0.02
LAYER_NORM_EPS = 1e-5
GRADCHECK_STEP = 1e-4
GRADCHECK_TOLERANCE = 1e-3
GRADCHECK_MAX_PARAMS = 5000
NAIVE_MAX_QUERIES = 2**16
ENUMERATE_MAX_EXTENT = 10**7

# gradient-check model: 3x3 -> 6x6, d=8, two heads, two layers
TINY_OVERRIDES = {
    "H": "6",
    "W": "6",
    "h": "3",
    "w": "3",
    "d": "8",
    "n_heads": "2",
    "n_layers": "2",
    "n_classes": "3",
}

Variant = Literal["dflat", "naive", "bilinear"]
Task = Literal["stripes", "rects", "checker"]


class AttentionConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    d: int = Field(ge=2)
    n_heads: int = Field(ge=1)
    n_layers: int = Field(ge=1)
    n_groups: int = Field(default=1, ge=1)
    pool_window: int = Field(default=1, ge=1)
    use_group_pool: bool = False
    ffn_hidden: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def _check_heads(self):
        if self.d % self.n_heads:
            raise ValueError(f"d={self.d} is not divisible by n_heads={self.n_heads}")
        return self

    @property
    def d_m(self) -> int:
        return self.d // self.n_heads

    @property
    def hidden(self) -> int:
        # 0 selects the default width 2d
        return self.ffn_hidden or 2 * self.d


class ModelConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    H: int = Field(ge=1)
    W: int = Field(ge=1)
    h: int = Field(ge=1)
    w: int = Field(ge=1)
    c_in: int = Field(default=3, ge=1)
    n_classes: int = Field(ge=2)
    attention: AttentionConfig
    interactive: bool = True
    variant: Variant = "dflat"
    # 0 keeps the affine pixel head; otherwise a relu layer of this width precedes it
    head_hidden: int = Field(default=0, ge=0)
    seed: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def _check_extents(self):
        if self.H % self.h or self.W % self.w:
            raise ValueError(
                f"output {self.H}x{self.W} is not an integer multiple of encoder {self.h}x{self.w}"
            )
        if self.H // self.h != self.W // self.w:
            raise ValueError(
                f"patch sizes differ: H/h={self.H // self.h}, W/w={self.W // self.w}"
            )
        if self.attention.d % 2:
            raise ValueError(f"d={self.attention.d} must be even for sinusoid pairing")
        att = self.attention
        if att.use_group_pool and (self.h % att.n_groups or self.w % att.n_groups):
            raise ValueError(
                f"n_groups={att.n_groups} must divide h={self.h} and w={self.w}"
            )
        return self

    @property
    def patch(self) -> int:
        return self.H // self.h

    @property
    def d(self) -> int:
        return self.attention.d


class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    steps: int = Field(ge=1)
    batch_size: int = Field(ge=1)
    # zero is accepted so a frozen run can be replayed
    learning_rate: float = Field(ge=0.0)
    optimizer: Literal["sgd", "adam"] = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = Field(default=0, ge=0)
    task: Task = "stripes"
    eval_every: int = Field(default=50, ge=1)
    n_train: int = Field(default=64, ge=1)
    n_eval: int = Field(default=16, ge=1)
    noise: float = Field(default=0.05, ge=0.0)
    # weight of a top-to-bottom ramp blended into the blue channel; labels are unaffected
    shading: float = Field(default=0.0, ge=0.0, le=1.0)


class RunConfig(BaseModel):
    """Flat view of every setting, one field per key of the config file."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    variant: Variant = "dflat"
    H: int = 32
    W: int = 32
    h: int = 8
    w: int = 8
    c_in: int = 3
    d: int = 32
    n_heads: int = 4
    n_layers: int = 2
    n_groups: int = 1
    pool_window: int = 1
    use_group_pool: bool = False
    ffn_hidden: int = 0
    interactive: bool = True
    head_hidden: int = 0
    n_classes: int = 3
    seed: int = 0
    steps: int = 500
    batch_size: int = 4
    learning_rate: float = 1e-3
    optimizer: Literal["sgd", "adam"] = "adam"
    task: Task = "stripes"
    eval_every: int = 50
    n_train: int = 64
    n_eval: int = 16
    noise: float = 0.05
    shading: float = 0.0
    # flops sweep
    flops_points: int = Field(default=24, ge=0)
    flops_max_feat: int = Field(default=8, ge=1)
    flops_max_out: int = Field(default=32, ge=1)

    def to_model_config(self) -> ModelConfig:
        return ModelConfig(
            H=self.H,
            W=self.W,
            h=self.h,
            w=self.w,
            c_in=self.c_in,
            n_classes=self.n_classes,
            interactive=self.interactive,
            variant=self.variant,
            head_hidden=self.head_hidden,
            seed=self.seed,
            attention=AttentionConfig(
                d=self.d,
                n_heads=self.n_heads,
                n_layers=self.n_layers,
                n_groups=self.n_groups,
                pool_window=self.pool_window,
                use_group_pool=self.use_group_pool,
                ffn_hidden=self.ffn_hidden,
            ),
        )

    def to_train_config(self) -> TrainConfig:
        return TrainConfig(
            steps=self.steps,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            optimizer=self.optimizer,
            seed=self.seed,
            task=self.task,
            eval_every=self.eval_every,
            n_train=self.n_train,
            n_eval=self.n_eval,
            noise=self.noise,
            shading=self.shading,
        )

    def to_lines(self) -> list[str]:
        lines = []
        for key, value in self.model_dump().items():
            if isinstance(value, bool):
                value = str(value).lower()
            lines.append(f"{key}={value}")
        return lines


def parse_key_values(text: str, source: str = "<text>") -> dict[str, str]:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        values[key.strip()] = value.strip()
    return values


def load_run_config(
    path: str | Path | None = None,
    overrides: list[str] | None = None,
    seed: int | None = None,
    defaults: dict[str, str] | None = None,
) -> RunConfig:
    """Build a RunConfig from `defaults`, an optional file, then --set overrides, then --seed."""
    values: dict[str, str] = dict(defaults or {})
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as e:
            raise CheckpointError(f"cannot read config file {path}: {e}") from e
        values.update(parse_key_values(text, source=str(path)))
    if overrides:
        values.update(parse_key_values("\n".join(overrides), source="--set"))
    if seed is not None:
        values["seed"] = str(seed)
    return RunConfig(**values)
