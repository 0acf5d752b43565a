"""8-bit PNG / PGM / PPM images as float arrays in ``[0, 1]`` with layout ``[c, h, w]``."""
from __future__ import annotations

import io
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DatasetError, DimensionError
from .storage import PathLike, atomic_write

SUFFIXES = {".png": "PNG", ".pgm": "PPM", ".ppm": "PPM"}


def is_image_file(path: PathLike) -> bool:
    return Path(path).suffix.lower() in SUFFIXES


def read_image(path: PathLike) -> np.ndarray:
    path = Path(path)
    if not is_image_file(path):
        raise DatasetError(f"unsupported image format: {path} (PNG, PGM and PPM only)")
    try:
        with Image.open(path) as img:
            if img.format not in ("PNG", "PPM"):
                raise DatasetError(f"{path}: decoded as {img.format}, expected PNG/PGM/PPM")
            if img.mode not in ("L", "RGB"):
                raise DatasetError(f"{path}: mode {img.mode} is not 8-bit grayscale or RGB")
            arr = np.asarray(img, dtype=np.uint8)
    except OSError as exc:
        raise DatasetError(f"cannot read {path}: {exc}") from None
    arr = arr.astype(np.float64) / 255.0
    return arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1).copy()


def quantize(arr: np.ndarray) -> np.ndarray:
    """``[0, 1]`` floats to uint8, rounding half to even."""
    return np.rint(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)


def encode_image(arr: np.ndarray, fmt: str = "PNG") -> bytes:
    arr = np.asarray(arr)
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim == 3:
        if arr.shape[0] != 3:
            raise DimensionError(f"expected 1 or 3 channels, got shape {arr.shape}")
        img = Image.fromarray(quantize(arr.transpose(1, 2, 0)), mode="RGB")
    elif arr.ndim == 2:
        img = Image.fromarray(quantize(arr), mode="L")
    else:
        raise DimensionError(f"cannot encode image of shape {arr.shape}")
    buf = io.BytesIO()
    img.save(buf, format=fmt)
    return buf.getvalue()


def write_image(path: PathLike, arr: np.ndarray) -> Path:
    path = Path(path)
    fmt = SUFFIXES.get(path.suffix.lower())
    if fmt is None:
        raise DatasetError(f"unsupported output format: {path}")
    return atomic_write(path, encode_image(arr, fmt))


def to_rgb(arr: np.ndarray) -> np.ndarray:
    if arr.shape[0] == 3:
        return arr
    if arr.shape[0] == 1:
        return np.repeat(arr, 3, axis=0)
    raise DimensionError(f"expected 1 or 3 channels, got shape {arr.shape}")


def resize_bilinear(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of ``[c, h, w]`` with half-pixel centers and edge clamping."""
    c, h, w = arr.shape
    if (h, w) == (out_h, out_w):
        return arr.copy()

    def axis_weights(n_in, n_out):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0.0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, fy = axis_weights(h, out_h)
    x0, x1, fx = axis_weights(w, out_w)
    rows = arr[:, y0, :] * (1 - fy)[None, :, None] + arr[:, y1, :] * fy[None, :, None]
    return rows[:, :, x0] * (1 - fx)[None, None, :] + rows[:, :, x1] * fx[None, None, :]
