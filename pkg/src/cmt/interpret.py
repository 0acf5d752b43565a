"""Gradient-weighted class activation maps over the extractor's final feature map."""
from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .errors import DimensionError, ParameterError
from .imageio import encode_image
from .model import CmtConfig, Params, cife_forward, features_to_logits
from .storage import PathLike, atomic_write
from .tensor import Tape, Tensor

GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114])


@dataclass
class CamMap:
    heat: np.ndarray      # [h', w'] in [0, 1]
    overlay: np.ndarray   # heat nearest-upsampled to the input size
    class_k: int
    raw_min: float
    raw_max: float


def class_score_gradient(fmap, score_fn: Callable[[Tensor], Tensor], class_k: int) -> np.ndarray:
    """Gradient of ``score_fn(fmap)[class_k]`` with respect to the ``[c, h, w]`` map."""
    fmap = T.as_tensor(fmap)
    with Tape() as tape:
        tape.watch(fmap)
        scores = score_fn(fmap)
        if not 0 <= class_k < scores.shape[-1]:
            raise ParameterError(f"class {class_k} outside [0, {scores.shape[-1]})")
        picked = T.sum_(T.mul(scores, np.eye(scores.shape[-1])[class_k]))
    return tape.backward(picked)[fmap]


def normalize(raw: np.ndarray) -> np.ndarray:
    """Min-max scale to ``[0, 1]``; a constant map becomes ones if positive, else zeros."""
    lo, hi = float(raw.min()), float(raw.max())
    if hi > lo:
        return (raw - lo) / (hi - lo)
    return np.ones_like(raw) if hi > 0 else np.zeros_like(raw)


def cam_from_gradient(fmap: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """``relu(sum_c mean(grad_c) * fmap_c)`` before normalization."""
    weights = grad.mean(axis=(-2, -1))
    return np.maximum(np.tensordot(weights, fmap, axes=(0, 0)), 0.0)


def grad_cam_features(fmap, score_fn: Callable[[Tensor], Tensor], class_k: int, out_hw=None) -> CamMap:
    fmap = T.as_tensor(fmap)
    if fmap.ndim != 3:
        raise DimensionError(f"feature map must be [c, h, w], got {fmap.shape}")
    grad = class_score_gradient(fmap, score_fn, class_k)
    raw = cam_from_gradient(fmap.data, grad)
    heat = normalize(raw)
    h, w = heat.shape
    oh, ow = out_hw or (h, w)
    if oh % h or ow % w:
        raise DimensionError(f"cannot nearest-upsample {h}x{w} to {oh}x{ow}")
    overlay = np.repeat(np.repeat(heat, oh // h, axis=0), ow // w, axis=1)
    return CamMap(heat, overlay, class_k, float(raw.min()), float(raw.max()))


def grad_cam(image, params: Params, cfg: CmtConfig, class_k: int) -> CamMap:
    """CAM for the pre-sigmoid logit of ``class_k`` on a single ``[3, h, w]`` image."""
    if not 0 <= class_k < cfg.classes:
        raise ParameterError(f"class {class_k} outside [0, {cfg.classes})")
    image = T.as_tensor(image)
    if image.ndim != 3:
        raise DimensionError(f"grad_cam takes one [c, h, w] image, got {image.shape}")
    fmap = cife_forward(image, params, cfg.cife)
    return grad_cam_features(fmap, lambda f: features_to_logits(f, params, cfg), class_k, image.shape[-2:])


# ---------------------------------------------------------------- rendering


@lru_cache(maxsize=1)
def colormap() -> np.ndarray:
    """The shipped 256 x 3 uint8 table; entry 0 is black."""
    text = resources.files("cmt").joinpath("data/colormap.txt").read_text(encoding="ascii")
    table = np.array([[int(v) for v in line.split()] for line in text.splitlines()
                      if line.strip() and not line.startswith("#")], dtype=np.uint8)
    if table.shape != (256, 3):
        raise ValueError(f"colormap table has shape {table.shape}")
    table.setflags(write=False)
    return table


def grayscale(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.shape[0] == 1:
        return image[0]
    if image.shape[0] == 3:
        return np.tensordot(GRAY_WEIGHTS, image, axes=(0, 0))
    raise DimensionError(f"expected 1 or 3 channels, got {image.shape[0]}")


def render_overlay(cam: CamMap, image) -> np.ndarray:
    """``0.5 * gray + 0.5 * colormap(heat)`` as a ``[3, h, w]`` float image."""
    gray = grayscale(image)
    if gray.shape != cam.overlay.shape:
        raise DimensionError(f"image {gray.shape} and heat map {cam.overlay.shape} differ")
    idx = np.rint(np.clip(cam.overlay, 0.0, 1.0) * 255).astype(np.intp)
    colour = colormap()[idx].astype(np.float64).transpose(2, 0, 1) / 255.0
    return 0.5 * gray[None] + 0.5 * colour


def write_overlay(path: PathLike, cam: CamMap, image, input_name: Optional[str] = None) -> Path:
    """Write the overlay PNG and a ``.json`` sidecar with the raw map range."""
    path = Path(path)
    atomic_write(path, encode_image(render_overlay(cam, image), "PNG"))
    side = {"input": input_name, "class": cam.class_k, "min": cam.raw_min, "max": cam.raw_max}
    atomic_write(path.with_suffix(".json"), (json.dumps(side, sort_keys=True) + "\n").encode())
    return path
