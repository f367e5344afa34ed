"""
Sample image dumps as binary PPM (P6, maxval 255).
"""

import os

import numpy as np
import torch

from utils.errors import ImageRangeError
from utils.tensor_core import Tensor

RANGE_TOL = 1e-6


def to_bytes(image: Tensor) -> np.ndarray:
    """ch x H x W in [-1, 1] to H x W x 3 uint8, pixel = round((v + 1) * 127.5) half-up."""
    if image.dim() != 3 or image.shape[0] not in (1, 3):
        raise ImageRangeError(f"write_ppm needs a 1 or 3 channel ch x H x W image, got shape {tuple(image.shape)}")
    values = image.detach().to(torch.float64).numpy()
    if not np.isfinite(values).all() or values.min() < -1.0 - RANGE_TOL or values.max() > 1.0 + RANGE_TOL:
        raise ImageRangeError(
            f"image values must lie in [-1, 1], got [{np.nanmin(values):.4f}, {np.nanmax(values):.4f}]"
        )
    pixels = np.clip(np.floor((values + 1.0) * 127.5 + 0.5), 0, 255).astype(np.uint8)
    if pixels.shape[0] == 1:
        pixels = np.repeat(pixels, 3, axis=0)
    return np.ascontiguousarray(pixels.transpose(1, 2, 0))


def write_ppm(image: Tensor) -> bytes:
    pixels = to_bytes(image)
    height, width = pixels.shape[:2]
    return f"P6\n{width} {height}\n255\n".encode("ascii") + pixels.tobytes()


def tile(images: Tensor, columns: int = 8, padding: int = 1) -> Tensor:
    """Lay N images out on a grid separated by -1 (black) padding."""
    if images.dim() != 4 or images.shape[0] == 0:
        raise ImageRangeError(f"tile needs a non-empty N x ch x H x W batch, got shape {tuple(images.shape)}")
    n, ch, h, w = images.shape
    columns = min(columns, n)
    rows = (n + columns - 1) // columns
    grid = torch.full((ch, rows * (h + padding) + padding, columns * (w + padding) + padding), -1.0)
    for k in range(n):
        r, c = divmod(k, columns)
        top, left = padding + r * (h + padding), padding + c * (w + padding)
        grid[:, top:top + h, left:left + w] = images[k].detach()
    return grid


def save_sample_grid(images: Tensor, path: str, columns: int = 8) -> str:
    data = write_ppm(tile(images.clamp(-1.0, 1.0), columns))
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "wb") as f:
        f.write(data)
    return path
