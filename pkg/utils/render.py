from pathlib import Path

import numpy as np
from PIL import Image

# fixed class palette, cycled when there are more classes than colors
PALETTE = np.array(
    [
        [0, 0, 0],
        [230, 25, 75],
        [60, 180, 75],
        [0, 130, 200],
        [255, 225, 25],
        [145, 30, 180],
        [70, 240, 240],
        [245, 130, 48],
        [240, 50, 230],
        [255, 255, 255],
    ],
    dtype=np.uint8,
)


def class_colors(n_classes: int) -> np.ndarray:
    """n_classes x 3 RGB colors in [0, 1]."""
    return PALETTE[np.arange(n_classes) % len(PALETTE)].astype(np.float64) / 255.0


def mask_to_rgb(mask: np.ndarray) -> np.ndarray:
    return PALETTE[np.asarray(mask) % len(PALETTE)]


def save_mask_ppm(mask: np.ndarray, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(mask_to_rgb(mask)).save(path, format="PPM")
    return path


def save_image_ppm(image: np.ndarray, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pixels = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(pixels).save(path, format="PPM")
    return path
