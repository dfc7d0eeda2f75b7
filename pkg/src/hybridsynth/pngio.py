"""PNG I/O and image-range conversions.

Images travel as float32 arrays of shape (3, H, W) in [-1, 1] and are
stored on disk as 8-bit RGB PNGs; label maps are stored as 8-bit
single-channel PNGs holding class indices.
"""

from __future__ import annotations

import numpy as np
from PIL import Image

from .errors import DataError


def float_to_uint8(img: np.ndarray) -> np.ndarray:
    """(3,H,W) in [-1,1] -> (H,W,3) uint8."""
    arr = np.clip((img.astype(np.float64) + 1.0) * 127.5, 0.0, 255.0)
    return np.round(arr).astype(np.uint8).transpose(1, 2, 0)


def uint8_to_float(arr: np.ndarray) -> np.ndarray:
    """(H,W,3) uint8 -> (3,H,W) float32 in [-1,1]."""
    return (arr.astype(np.float32) / 127.5 - 1.0).transpose(2, 0, 1)


def save_image(path, img: np.ndarray):
    Image.fromarray(float_to_uint8(img), mode="RGB").save(path)


def load_image(path, resolution: int | None = None) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("RGB")
        if resolution is not None and im.size != (resolution, resolution):
            im = im.resize((resolution, resolution), Image.BILINEAR)
        return uint8_to_float(np.asarray(im))


def save_labels(path, labels: np.ndarray):
    if labels.max(initial=0) > 255 or labels.min(initial=0) < 0:
        raise DataError("label indices must fit in uint8")
    Image.fromarray(labels.astype(np.uint8), mode="L").save(path)


def load_labels(path, resolution: int | None = None) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("L")
        if resolution is not None and im.size != (resolution, resolution):
            # nearest keeps indices pure; any interpolation would invent classes
            im = im.resize((resolution, resolution), Image.NEAREST)
        return np.asarray(im).astype(np.int64)


def labels_to_rgb(labels: np.ndarray, palette: np.ndarray) -> np.ndarray:
    """Render a label map with a (C,3) palette in [-1,1] -> (3,H,W) float."""
    if labels.max(initial=0) >= palette.shape[0]:
        raise DataError(
            f"label {int(labels.max())} outside palette of size {palette.shape[0]}"
        )
    return palette[labels].transpose(2, 0, 1).astype(np.float32)


def image_grid(images, cols: int | None = None, pad: int = 2,
               pad_value: float = 1.0) -> np.ndarray:
    """Tile (3,H,W) images row-major into one (3,Hg,Wg) image.

    Separators are `pad` pixels wide (default 2) and drawn between tiles
    only, not around the border.
    """
    images = list(images)
    if not images:
        raise DataError("cannot build a grid from zero images")
    n = len(images)
    if cols is None:
        cols = int(np.ceil(np.sqrt(n)))
    rows = (n + cols - 1) // cols
    c, h, w = images[0].shape
    grid = np.full(
        (c, rows * h + (rows - 1) * pad, cols * w + (cols - 1) * pad),
        pad_value, dtype=np.float32,
    )
    for i, img in enumerate(images):
        if img.shape != (c, h, w):
            raise DataError("grid images must share one shape")
        r, q = divmod(i, cols)
        y, x = r * (h + pad), q * (w + pad)
        grid[:, y:y + h, x:x + w] = img
    return grid
