# trainer.py
import gc
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any

import numpy as np
import psutil

from metrics_worker import (
    join_metrics_worker,
    metrics_queue,
    start_metrics_worker,
    stop_metrics_worker,
)
from utils.config import MAX_WORKERS, ModelConfig, TrainConfig
from utils.errors import DivergenceError
from utils.harness import SyntheticSample, cross_entropy, generate, make_optimizer, miou
from utils.model import Segmenter
from utils.numerics import Tape
from utils.tensor_io import save_checkpoint

logger = logging.getLogger("dflat_trainer")

METRICS_NAME = "metrics.jsonl"


def training_set(model_config: ModelConfig, train_config: TrainConfig) -> list[SyntheticSample]:
    return generate(
        train_config.task,
        train_config.n_train,
        model_config.H,
        model_config.W,
        model_config.n_classes,
        train_config.seed,
        train_config.noise,
        train_config.shading,
    )


def held_out_set(model_config: ModelConfig, train_config: TrainConfig) -> list[SyntheticSample]:
    # a different seed keeps the held-out samples disjoint from training draws
    return generate(
        train_config.task,
        train_config.n_eval,
        model_config.H,
        model_config.W,
        model_config.n_classes,
        train_config.seed + 1,
        train_config.noise,
        train_config.shading,
    )


def sample_pass(segmenter: Segmenter, sample: SyntheticSample) -> tuple[float, dict[str, np.ndarray]]:
    with Tape() as tape:
        out = segmenter.forward(sample.image)
        loss = cross_entropy(out.logits, sample.mask)
    return loss.item(), tape.gradients(loss)


def batch_gradients(
    segmenter: Segmenter,
    batch: list[SyntheticSample],
    pool: ThreadPoolExecutor | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean loss and gradients over `batch`, summed in sample order whatever the schedule."""
    if pool is None:
        results = [sample_pass(segmenter, sample) for sample in batch]
    else:
        results = list(pool.map(lambda s: sample_pass(segmenter, s), batch))

    total = 0.0
    grads: dict[str, np.ndarray] = {}
    for loss, sample_grads in results:
        total += loss
        for name, grad in sample_grads.items():
            grads[name] = grads[name] + grad if name in grads else grad.copy()
    scale = 1.0 / len(batch)
    return total * scale, {name: grad * scale for name, grad in grads.items()}


def evaluate(segmenter: Segmenter, samples: list[SyntheticSample]) -> dict[str, Any]:
    """mIoU over all pixels of `samples`, mean loss, and the predicted masks."""
    predictions, losses = [], []
    for sample in samples:
        out = segmenter.forward(sample.image)
        losses.append(cross_entropy(out.logits, sample.mask).item())
        predictions.append(out.logits.data.argmax(axis=-1))
    score, per_class = miou(
        np.stack(predictions),
        np.stack([s.mask for s in samples]),
        segmenter.config.n_classes,
    )
    return {
        "miou": score,
        "per_class": per_class,
        "loss": float(np.mean(losses)),
        "predictions": predictions,
    }


def train(
    model_config: ModelConfig,
    train_config: TrainConfig,
    out_dir: str | Path,
) -> dict[str, Any]:
    """Forward/backward/update for `steps`; loss every step, held-out mIoU every `eval_every`.

    Writes metrics.jsonl and the final checkpoint into `out_dir`.
    """
    out_dir = Path(out_dir)
    segmenter = Segmenter(model_config)
    store = segmenter.store
    train_samples = training_set(model_config, train_config)
    held_out = held_out_set(model_config, train_config)
    optimizer = make_optimizer(train_config, store)
    rng = np.random.default_rng(train_config.seed)

    history: dict[str, Any] = {
        "variant": model_config.variant,
        "task": train_config.task,
        "loss": [],
        "miou": [],
        "final_miou": None,
        "checkpoint": None,
    }
    logger.info(
        "Training %s on %s: %d parameters, %d steps, batch %d",
        model_config.variant,
        train_config.task,
        store.num_parameters(),
        train_config.steps,
        train_config.batch_size,
    )

    thread = start_metrics_worker(out_dir / METRICS_NAME)
    pool = ThreadPoolExecutor(max_workers=MAX_WORKERS) if MAX_WORKERS > 1 else None
    order: list[int] = []
    last_finite = None
    try:
        for step in range(1, train_config.steps + 1):
            while len(order) < train_config.batch_size:
                order.extend(rng.permutation(len(train_samples)).tolist())
            indices, order = order[: train_config.batch_size], order[train_config.batch_size :]

            loss, grads = batch_gradients(segmenter, [train_samples[i] for i in indices], pool)
            if not math.isfinite(loss):
                logger.error("Loss diverged at step %d (last finite loss %s)", step, last_finite)
                raise DivergenceError(
                    f"loss became {loss} at step {step}; last finite loss {last_finite}, "
                    f"learning_rate={train_config.learning_rate}, optimizer={train_config.optimizer}"
                )
            last_finite = loss

            store.zero_grad()
            store.accumulate(grads)
            optimizer.step()

            record: dict[str, Any] = {"step": step, "loss": loss}
            history["loss"].append(loss)

            if step % train_config.eval_every == 0 or step == train_config.steps:
                result = evaluate(segmenter, held_out)
                record["miou"] = result["miou"]
                history["miou"].append((step, result["miou"]))
                rss_mb = psutil.Process().memory_info().rss / 2**20
                logger.info(
                    "step=%d loss=%.6f miou=%.4f rss=%.1fMB",
                    step,
                    loss,
                    result["miou"],
                    rss_mb,
                )
                # release the evaluation graphs
                gc.collect()
            else:
                logger.debug("step=%d loss=%.6f", step, loss)

            metrics_queue.put(record)

        history["final_miou"] = history["miou"][-1][1]
        history["checkpoint"] = str(save_checkpoint(store, out_dir))
    finally:
        if pool is not None:
            pool.shutdown()
        stop_metrics_worker()
        join_metrics_worker(thread)

    logger.info("Finished training: final held-out mIoU %.4f", history["final_miou"])
    return history


def baseline_key(model_config: ModelConfig, train_config: TrainConfig) -> str:
    key = f"{model_config.variant}/{train_config.task}/seed{train_config.seed}"
    if model_config.variant == "dflat" and not model_config.interactive:
        key += "/noninteractive"
    return key


def record_baseline(path: str | Path, key: str, value: float) -> dict[str, Any]:
    """Store `value` under achieved[key] in the JSON baseline file, keeping other entries."""
    path = Path(path)
    baselines: dict[str, Any] = {}
    if path.exists():
        baselines = json.loads(path.read_text(encoding="utf-8"))
    baselines.setdefault("achieved", {})[key] = value
    path.write_text(json.dumps(baselines, indent=2) + "\n", encoding="utf-8")
    logger.info("Recorded %s=%.6f in %s", key, value, path)
    return baselines
