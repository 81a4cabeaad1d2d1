import functools
import json
import logging
import math
import traceback
from pathlib import Path
from typing import Annotated, Optional

# utils.config must load before numpy so DFLAT_DETERMINISTIC can pin BLAS threads
from utils.config import (
    GRADCHECK_MAX_PARAMS,
    GRADCHECK_TOLERANCE,
    LOG_LEVEL,
    OUT_DIR,
    TINY_OVERRIDES,
    RunConfig,
    load_run_config,
)

import typer
from pydantic import ValidationError

from trainer import baseline_key, evaluate, held_out_set, train
from trainer import record_baseline as save_baseline
from utils.attention import ScoreRecorder
from utils.complexity import VARIANTS, CostParams, count_scores, enumerate_scores, random_sweep
from utils.errors import (
    CheckpointError,
    ConfigError,
    DivergenceError,
    ResourceError,
    ShapeError,
)
from utils.harness import cross_entropy, generate
from utils.model import Segmenter, register_parameters
from utils.numerics import ParameterStore, gradcheck
from utils.render import save_image_ppm, save_mask_ppm
from utils.tensor_io import dump_tensor, load_checkpoint

# Configure logging with timestamps and level
logging.basicConfig(
    level=LOG_LEVEL,
    format="%(asctime)s %(levelname)s [%(name)s] %(message)s",
    datefmt="%Y-%m-%d %H:%M:%S",
)
logger = logging.getLogger("dflat_cli")

EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_IO = 3

RESOLVED_NAME = "resolved.conf"

app = typer.Typer(help="Dual-flattening transformer decoder: checks, audits, training and inspection.")

ConfigOpt = Annotated[Optional[Path], typer.Option("--config", help="key=value config file")]
SeedOpt = Annotated[Optional[int], typer.Option("--seed", help="overrides the config seed")]
SetOpt = Annotated[
    Optional[list[str]], typer.Option("--set", help="key=value override, repeatable")
]
OutOpt = Annotated[Optional[Path], typer.Option("--out", help="output directory")]


def exit_codes(command):
    """Map package errors to the documented exit codes."""

    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except typer.Exit:
            raise
        except (ConfigError, ValidationError, ShapeError, ResourceError) as e:
            logger.error("Configuration error: %s", e)
            typer.echo(f"config error: {e}", err=True)
            raise typer.Exit(EXIT_CONFIG)
        except (CheckpointError, OSError) as e:
            logger.error("I/O error: %s", e)
            typer.echo(f"i/o error: {e}", err=True)
            raise typer.Exit(EXIT_IO)
        except DivergenceError as e:
            logger.error("Training diverged: %s", e)
            typer.echo(f"diverged: {e}", err=True)
            raise typer.Exit(EXIT_CHECK_FAILED)

    return wrapper


def resolve(
    command: str,
    config: Path | None,
    seed: int | None,
    overrides: list[str] | None,
    out: Path | None,
    defaults: dict[str, str] | None = None,
) -> tuple[RunConfig, Path]:
    run_config = load_run_config(config, overrides, seed, defaults)
    out_dir = out or Path(OUT_DIR) / command
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = run_config.to_lines()
    logger.info("Resolved config for %s:\n%s", command, "\n".join(lines))
    (out_dir / RESOLVED_NAME).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return run_config, out_dir


def _load_segmenter(run_config: RunConfig, checkpoint: Path | None) -> Segmenter:
    model_config = run_config.to_model_config()
    store = register_parameters(ParameterStore(model_config.seed), model_config)
    if checkpoint is not None:
        load_checkpoint(store, checkpoint)
    return Segmenter(model_config, store)


@app.command("gradcheck")
@exit_codes
def cmd_gradcheck(
    config: ConfigOpt = None,
    seed: SeedOpt = None,
    overrides: SetOpt = None,
    out: OutOpt = None,
    corrupt_backward: Annotated[bool, typer.Option("--corrupt-backward", hidden=True)] = False,
):
    """Compare every parameter's analytic gradient with central differences."""
    run_config, _ = resolve("gradcheck", config, seed, overrides, out, TINY_OVERRIDES)
    segmenter = Segmenter(run_config.to_model_config())
    n_params = segmenter.store.num_parameters()
    if n_params > GRADCHECK_MAX_PARAMS:
        raise ConfigError(
            f"model has {n_params} parameters; gradcheck is limited to {GRADCHECK_MAX_PARAMS}. "
            "Use configs/tiny.conf or shrink d, n_layers or the extents."
        )
    sample = generate(
        run_config.task, 1, run_config.H, run_config.W, run_config.n_classes, run_config.seed
    )[0]

    def loss_fn():
        return cross_entropy(segmenter.forward(sample.image).logits, sample.mask)

    transform = (lambda g: g * 1.5) if corrupt_backward else None
    report = gradcheck(loss_fn, segmenter.store, grad_transform=transform)

    width = max(len(name) for name in report)
    failed = 0
    for name, error in report.items():
        ok = error <= GRADCHECK_TOLERANCE
        failed += not ok
        typer.echo(f"{name:<{width}}  {error:.3e}  {'ok' if ok else 'FAIL'}")
    typer.echo(f"{len(report)} parameter groups, {failed} above {GRADCHECK_TOLERANCE:g}")
    if failed:
        raise typer.Exit(EXIT_CHECK_FAILED)


@app.command("flops")
@exit_codes
def cmd_flops(
    config: ConfigOpt = None,
    seed: SeedOpt = None,
    overrides: SetOpt = None,
    out: OutOpt = None,
):
    """Closed-form vs instrumented score counts for the naive, full and group+pool decoders.

    The sweep covers fixed reference points, the configured model, and
    `flops_points` random points bounded by `flops_max_feat` and `flops_max_out`.
    """
    run_config, out_dir = resolve("flops", config, seed, overrides, out)
    model_config = run_config.to_model_config()
    if run_config.flops_max_out < run_config.flops_max_feat:
        raise ConfigError(
            f"flops_max_out={run_config.flops_max_out} is below flops_max_feat={run_config.flops_max_feat}"
        )
    att = model_config.attention
    configured = CostParams(
        h=model_config.h,
        w=model_config.w,
        H=model_config.H,
        W=model_config.W,
        d=att.d,
        n_heads=att.n_heads,
        n_layers=att.n_layers,
        n_groups=att.n_groups,
        pool_window=att.pool_window,
    )
    anchors = [
        CostParams(h=4, w=4, H=16, W=16),
        CostParams(h=4, w=4, H=16, W=16, n_groups=4, pool_window=4),
        CostParams(h=2, w=2, H=4, W=4),
        CostParams(h=4, w=5, H=8, W=10, n_groups=1, pool_window=2),
        configured,
    ]
    sweep = anchors + random_sweep(
        run_config.flops_points,
        run_config.seed,
        run_config.flops_max_feat,
        run_config.flops_max_out,
    )

    result = {"records": [], "mismatches": 0, "errors": []}
    for params in sweep:
        for variant in VARIANTS:
            try:
                closed = count_scores(variant, params)
                counted = enumerate_scores(variant, params)
            except Exception as e:
                tb = traceback.format_exc()
                logger.exception("Failed to count %s at %s: %s", variant, params, e)
                result["errors"].append(f"{variant} {params}: {e}\n{tb}")
                continue
            record = closed.to_record()
            record["enumerated"] = counted.scores_per_layer
            record["enumerated_interactive"] = counted.interactive_per_layer
            record["match"] = (
                closed.scores_per_layer == counted.scores_per_layer
                and closed.interactive_per_layer == counted.interactive_per_layer
            )
            if not record["match"]:
                result["mismatches"] += 1
                logger.warning("Count mismatch for %s at %s", variant, params)
            result["records"].append(record)

    with open(out_dir / "flops.jsonl", "w", encoding="utf-8") as stream:
        for record in result["records"]:
            stream.write(json.dumps(record) + "\n")

    header = (
        f"{'variant':<17} {'h':>2} {'w':>2} {'H':>3} {'W':>3} {'n_p':>3} {'n_w':>3} "
        f"{'scores':>8} {'counted':>8} {'inter':>6} {'beta_g':>6} {'beta_p':>6}  match"
    )
    typer.echo(header)
    typer.echo("-" * len(header))
    for r in result["records"]:
        typer.echo(
            f"{r['variant']:<17} {r['h']:>2} {r['w']:>2} {r['H']:>3} {r['W']:>3} "
            f"{r['n_groups']:>3} {r['pool_window']:>3} {r['scores_per_layer']:>8} "
            f"{r['enumerated']:>8} {r['interactive_per_layer']:>6} {r['beta_g']:>6} "
            f"{r['beta_p']:>6}  {'yes' if r['match'] else 'NO'}"
        )
    typer.echo(
        "note: the decomposed variants count h*w*(H+W) per layer and head, "
        "so a 1x1 -> 1x1 map counts 2 (one row and one column score) against 1 for naive"
    )
    typer.echo(
        f"{len(result['records'])} reports, {result['mismatches']} mismatches, "
        f"{len(result['errors'])} errors"
    )
    if result["mismatches"] or result["errors"]:
        raise typer.Exit(EXIT_CHECK_FAILED)


@app.command("train")
@exit_codes
def cmd_train(
    config: ConfigOpt = None,
    seed: SeedOpt = None,
    overrides: SetOpt = None,
    out: OutOpt = None,
    record_baseline: Annotated[
        Optional[Path], typer.Option(help="JSON file to record the final held-out mIoU in")
    ] = None,
):
    """Train on a synthetic task; writes metrics.jsonl, the checkpoint and resolved.conf."""
    run_config, out_dir = resolve("train", config, seed, overrides, out)
    history = train(run_config.to_model_config(), run_config.to_train_config(), out_dir)
    typer.echo(f"final held-out mIoU {history['final_miou']:.6f}")
    if record_baseline is not None:
        key = baseline_key(run_config.to_model_config(), run_config.to_train_config())
        save_baseline(record_baseline, key, history["final_miou"])


@app.command("eval")
@exit_codes
def cmd_eval(
    config: ConfigOpt = None,
    seed: SeedOpt = None,
    overrides: SetOpt = None,
    out: OutOpt = None,
    checkpoint: Annotated[
        Optional[Path], typer.Option(help="checkpoint dir or manifest (default: --out)")
    ] = None,
):
    """Held-out mIoU and loss of a checkpoint; writes predicted masks as PPM images."""
    run_config, out_dir = resolve("eval", config, seed, overrides, out)
    segmenter = _load_segmenter(run_config, checkpoint or out_dir)
    samples = held_out_set(segmenter.config, run_config.to_train_config())
    result = evaluate(segmenter, samples)
    for i, prediction in enumerate(result["predictions"]):
        save_mask_ppm(prediction, out_dir / "eval" / f"pred_{i:03d}.ppm")
    per_class = ", ".join(
        "n/a" if math.isnan(value) else f"{value:.4f}" for value in result["per_class"]
    )
    typer.echo(f"held-out mIoU {result['miou']:.6f}  loss {result['loss']:.6f}")
    typer.echo(f"per-class IoU [{per_class}]")


@app.command("dump-attn")
@exit_codes
def cmd_dump_attn(
    config: ConfigOpt = None,
    seed: SeedOpt = None,
    overrides: SetOpt = None,
    out: OutOpt = None,
    checkpoint: Annotated[Optional[Path], typer.Option(help="checkpoint dir or manifest")] = None,
):
    """Write every attention score matrix of one held-out forward pass as DFLT tensors."""
    run_config, out_dir = resolve("dump-attn", config, seed, overrides, out)
    segmenter = _load_segmenter(run_config, checkpoint)
    sample = held_out_set(segmenter.config, run_config.to_train_config())[0]
    with ScoreRecorder(keep=True) as recorder:
        segmenter.forward(sample.image)
    for label, probs in recorder.maps:
        dump_tensor(out_dir / "attn" / f"{label.replace('/', '_')}.dflt", probs)
    typer.echo(f"wrote {len(recorder.maps)} score maps to {out_dir / 'attn'}")


@app.command("render")
@exit_codes
def cmd_render(
    config: ConfigOpt = None,
    seed: SeedOpt = None,
    overrides: SetOpt = None,
    out: OutOpt = None,
    count: Annotated[int, typer.Option(help="samples to render")] = 4,
):
    """Render generated images and ground-truth masks of a task as PPM files."""
    run_config, out_dir = resolve("render", config, seed, overrides, out)
    samples = generate(
        run_config.task,
        count,
        run_config.H,
        run_config.W,
        run_config.n_classes,
        run_config.seed,
        run_config.noise,
        run_config.shading,
    )
    for i, sample in enumerate(samples):
        save_image_ppm(sample.image, out_dir / "render" / f"image_{i:03d}.ppm")
        save_mask_ppm(sample.mask, out_dir / "render" / f"mask_{i:03d}.ppm")
    typer.echo(f"rendered {len(samples)} samples to {out_dir / 'render'}")


if __name__ == "__main__":
    app()
