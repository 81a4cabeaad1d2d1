"""Synthetic segmentation tasks, pixel-wise cross-entropy, mIoU and optimizers."""

import logging
from dataclasses import dataclass

import numpy as np

from utils.config import TrainConfig
from utils.errors import ConfigError, ShapeError
from utils.numerics import ParameterStore, Tensor
from utils.numerics import cross_entropy as _cross_entropy
from utils.render import class_colors

logger = logging.getLogger("dflat_harness")

TASKS = ("stripes", "rects", "checker")


@dataclass(frozen=True)
class SyntheticSample:
    image: np.ndarray  # H x W x 3 in [0, 1]
    mask: np.ndarray  # H x W ints in [0, n_classes)


def _stripes_mask(H: int, W: int, n_classes: int) -> np.ndarray:
    diag = np.add.outer(np.arange(H), np.arange(W))
    return (diag * n_classes) // (H + W - 1)


def _paint_rects(mask: np.ndarray, classes: list[int], rng: np.random.Generator) -> None:
    """One rectangle per class, each inside its own vertical strip so none hides another."""
    H, W = mask.shape
    order = rng.permutation(len(classes))
    edges = np.linspace(0, W, len(classes) + 1).astype(int)
    for strip, k in enumerate(order):
        x0, x1 = edges[strip], edges[strip + 1]
        width = int(rng.integers(1, x1 - x0 + 1))
        height = int(rng.integers(1, max(H // 2, 1) + 1))
        left = int(rng.integers(x0, x1 - width + 1))
        top = int(rng.integers(0, H - height + 1))
        mask[top : top + height, left : left + width] = classes[k]


def generate(
    task: str,
    n: int,
    H: int,
    W: int,
    n_classes: int,
    seed: int,
    noise: float = 0.05,
    shading: float = 0.0,
) -> list[SyntheticSample]:
    """Generate `n` samples of one task; identical arguments give bit-identical sets.

    stripes: diagonal bands, label = (i + j) * n_classes // (H + W - 1).
    rects:   background 0 with one rectangle per class 1..n_classes-1.
    checker: period-2 checkerboard of classes 0/1 in black/white, plus one
             rectangle per class >= 2.

    `shading` blends a top-to-bottom ramp into the blue channel; labels are
    unchanged. A bare checkerboard gives every patch identical content.
    """
    if n < 1:
        raise ConfigError(f"need at least one sample, got n={n}")
    if not 0.0 <= shading <= 1.0:
        raise ConfigError(f"shading must lie in [0, 1], got {shading}")
    if task not in TASKS:
        raise ConfigError(f"unknown task {task!r}, expected one of {TASKS}")
    if task == "stripes" and n_classes > H + W - 1:
        raise ConfigError(f"{n_classes} classes exceed the {H + W - 1} diagonal bands of {H}x{W}")
    extra = n_classes - 1 if task == "rects" else max(n_classes - 2, 0)
    if extra > W:
        raise ConfigError(f"{extra} rectangle classes do not fit into width {W}")

    rng = np.random.default_rng(seed)
    colors = class_colors(n_classes)
    samples = []
    for _ in range(n):
        if task == "stripes":
            mask = _stripes_mask(H, W, n_classes)
            image = colors[mask]
        elif task == "rects":
            mask = np.zeros((H, W), dtype=np.int64)
            _paint_rects(mask, list(range(1, n_classes)), rng)
            image = colors[mask]
        else:
            mask = np.add.outer(np.arange(H), np.arange(W)) % 2
            if extra:
                _paint_rects(mask, list(range(2, n_classes)), rng)
            image = colors[mask]
            checker = mask < 2
            image[checker] = mask[checker, None].astype(np.float64)
        if shading > 0:
            ramp = np.linspace(0.0, 1.0, H)[:, None]
            image[..., 2] = (1.0 - shading) * image[..., 2] + shading * ramp
        if noise > 0:
            image = image + rng.normal(0.0, noise, size=image.shape)
        samples.append(
            SyntheticSample(image=np.clip(image, 0.0, 1.0), mask=mask.astype(np.int64))
        )
    return samples


def cross_entropy(logits: Tensor, mask: np.ndarray) -> Tensor:
    """Mean over pixels of -log softmax(logits)[true class]."""
    H, W, C = logits.dims
    mask = np.asarray(mask)
    if mask.shape != (H, W):
        raise ShapeError(f"mask {mask.shape} does not match logits {H}x{W}")
    return _cross_entropy(logits.reshape(H * W, C), mask.reshape(-1))


def miou(pred: np.ndarray, true: np.ndarray, n_classes: int) -> tuple[float, np.ndarray]:
    """Mean IoU over classes present in prediction or truth; absent classes are NaN in the vector."""
    pred, true = np.asarray(pred).ravel(), np.asarray(true).ravel()
    if pred.shape != true.shape:
        raise ShapeError(f"prediction {pred.shape} and truth {true.shape} differ")
    confusion = np.bincount(
        true * n_classes + pred, minlength=n_classes * n_classes
    ).reshape(n_classes, n_classes)
    intersection = np.diag(confusion).astype(np.float64)
    union = confusion.sum(axis=0) + confusion.sum(axis=1) - np.diag(confusion)
    per_class = np.full(n_classes, np.nan)
    present = union > 0
    per_class[present] = intersection[present] / union[present]
    if not present.any():
        return 1.0, per_class
    return float(per_class[present].mean()), per_class


class SGD:
    def __init__(self, store: ParameterStore, lr: float):
        self.store = store
        self.lr = lr

    def step(self) -> None:
        for name, value in self.store.values.items():
            value -= self.lr * self.store.grads[name]


class Adam:
    def __init__(
        self,
        store: ParameterStore,
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.store = store
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {name: np.zeros_like(v) for name, v in store.values.items()}
        self.v = {name: np.zeros_like(v) for name, v in store.values.items()}
        self.t = 0

    def step(self) -> None:
        self.t += 1
        for name, value in self.store.values.items():
            grad = self.store.grads[name]
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * grad
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * grad**2
            m_hat = self.m[name] / (1 - self.beta1**self.t)
            v_hat = self.v[name] / (1 - self.beta2**self.t)
            value -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(config: TrainConfig, store: ParameterStore) -> SGD | Adam:
    if config.optimizer == "sgd":
        return SGD(store, config.learning_rate)
    return Adam(store, config.learning_rate, config.beta1, config.beta2, config.eps)
