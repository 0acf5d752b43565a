"""Feature fusion augmentation: blend two same-class images through Beta-sampled weights.

The weight matrix ``m`` holds one fixed Beta draw everywhere except inside a
single cell of a ``p x p`` partition of the image, where every pixel gets its
own draw. The complementary matrix is ``1 - m`` and the fused image is
``i1 * m + i2 * (1 - m)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError, DatasetError, DimensionError, ParameterError
from .imageio import is_image_file, read_image, write_image
from .storage import PathLike, write_jsonl


@dataclass(frozen=True)
class BetaParams:
    a: float
    b: float

    def __post_init__(self):
        if not (self.a > 0 and self.b > 0):
            raise ParameterError(f"Beta parameters must be positive, got a={self.a}, b={self.b}")


@dataclass(frozen=True)
class WeightMask:
    m: np.ndarray
    m_d: np.ndarray


@dataclass(frozen=True)
class FfaConfig:
    """Patch count ``p`` per side, Beta shape ``alpha`` and the fused cell ``(m, n)``.

    ``m``/``n`` left as ``None`` are drawn uniformly from ``[0, p)`` for every
    mask. ``region="strict"`` keeps the open-interval cell bounds (the cell's
    first row and column keep the fixed weight); ``"halfopen"`` uses ``[lo, hi)``.
    """

    p: int = 2
    alpha: float = 0.4
    m: Optional[int] = None
    n: Optional[int] = None
    region: str = "strict"

    def __post_init__(self):
        if not isinstance(self.p, (int, np.integer)) or self.p < 1:
            raise ConfigError(f"patch size p must be a positive integer, got {self.p!r}")
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError(f"alpha must lie in (0, 1), got {self.alpha}")
        for name in ("m", "n"):
            v = getattr(self, name)
            if v is not None and not 0 <= v < self.p:
                raise ConfigError(f"position {name}={v} outside [0, {self.p})")
        if self.region not in ("strict", "halfopen"):
            raise ConfigError(f"region must be 'strict' or 'halfopen', got {self.region!r}")


def sample_beta(params: BetaParams, rng, size=None):
    """Draw from Beta(a, b) using the generator's gamma-ratio sampler."""
    return rng.beta(params.a, params.b, size=size)


def region_mask(h: int, w: int, p: int, m: int, n: int, region: str = "strict") -> np.ndarray:
    """Boolean ``[h, w]`` map of the pixels that receive individual weights."""
    ch, cw = h // p, w // p
    i = np.arange(h)
    j = np.arange(w)
    if region == "strict":
        rows = (m * ch < i) & (i < (m + 1) * ch)
        cols = (n * cw < j) & (j < (n + 1) * cw)
    else:
        rows = (m * ch <= i) & (i < (m + 1) * ch)
        cols = (n * cw <= j) & (j < (n + 1) * cw)
    return rows[:, None] & cols[None, :]


def build_masks(h: int, w: int, cfg: FfaConfig, rng) -> WeightMask:
    """Build the complementary weight matrices for one fused image.

    Draw order: cell position (only when not fixed by ``cfg``), the shared
    weight, then one weight per region pixel in row-major order.
    """
    if h % cfg.p or w % cfg.p:
        raise ConfigError(f"patch count p={cfg.p} must divide image size {h}x{w}")
    m = cfg.m if cfg.m is not None else int(rng.integers(0, cfg.p))
    n = cfg.n if cfg.n is not None else int(rng.integers(0, cfg.p))
    beta = BetaParams(cfg.alpha, cfg.alpha)
    fixed = float(sample_beta(beta, rng))
    weights = np.full((h, w), fixed)
    inside = region_mask(h, w, cfg.p, m, n, cfg.region)
    count = int(inside.sum())
    if count:
        weights[inside] = sample_beta(beta, rng, size=count)
    return WeightMask(weights, 1.0 - weights)


def fuse(i1: np.ndarray, i2: np.ndarray, mask: WeightMask) -> np.ndarray:
    """Hadamard blend; ``[c, h, w]`` images share the spatial mask across channels."""
    i1 = np.asarray(i1, dtype=np.float64)
    i2 = np.asarray(i2, dtype=np.float64)
    if i1.shape != i2.shape:
        raise DimensionError(f"fuse: image shapes differ: {i1.shape} vs {i2.shape}")
    if i1.shape[-2:] != mask.m.shape:
        raise DimensionError(f"fuse: mask {mask.m.shape} does not match images {i1.shape}")
    return i1 * mask.m + i2 * mask.m_d


def _class_images(class_dir: Path) -> list:
    files = sorted(p for p in class_dir.iterdir() if p.is_file() and is_image_file(p))
    if len(files) < 2:
        raise DatasetError(f"{class_dir}: need at least 2 images, found {len(files)}")
    return files


def augment_dataset(class_dir: PathLike, count: int, cfg: FfaConfig, seed: int,
                    out_dir: PathLike) -> list:
    """Write ``count`` fused images of one class plus ``manifest.jsonl`` to ``out_dir``.

    Output ``k`` uses its own generator seeded with ``seed + k``, so outputs
    are independent of each other and of generation order.
    """
    class_dir, out_dir = Path(class_dir), Path(out_dir)
    if count < 0:
        raise ConfigError(f"count must be non-negative, got {count}")
    files = _class_images(class_dir)
    images = [read_image(f) for f in files]
    shapes = {im.shape for im in images}
    if len(shapes) > 1:
        raise DimensionError(f"{class_dir}: images have mixed shapes {sorted(shapes)}")
    _, h, w = images[0].shape
    if h % cfg.p or w % cfg.p:
        raise ConfigError(f"patch count p={cfg.p} must divide image size {h}x{w}")

    records = []
    for k in range(count):
        img_seed = seed + k
        rng = np.random.default_rng(img_seed)
        a, b = (int(i) for i in rng.choice(len(images), size=2, replace=False))
        m = cfg.m if cfg.m is not None else int(rng.integers(0, cfg.p))
        n = cfg.n if cfg.n is not None else int(rng.integers(0, cfg.p))
        mask = build_masks(h, w, FfaConfig(cfg.p, cfg.alpha, m, n, cfg.region), rng)
        name = f"ffa_{k:05d}.png"
        write_image(out_dir / name, fuse(images[a], images[b], mask))
        records.append({"output": name, "source_a": files[a].name, "source_b": files[b].name,
                        "seed": img_seed, "p": cfg.p, "alpha": cfg.alpha, "m": m, "n": n})
    write_jsonl(out_dir / "manifest.jsonl", records)
    return records
