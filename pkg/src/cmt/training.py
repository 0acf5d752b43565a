"""BCE loss, Adam, warmup + cosine schedule and the mini-batch training loop."""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .errors import ConfigError, DatasetError, DimensionError, ScheduleError
from .ffa import FfaConfig, build_masks, fuse
from .metrics import MetricsReport, evaluate
from .model import CmtConfig, Params, cmt_forward, save_checkpoint
from .storage import PathLike, atomic_write, write_jsonl
from .tensor import Tape, Tensor

BCE_EPS = 1e-12

# independent random streams per (seed, epoch)
STREAM_ORDER, STREAM_DROPOUT, STREAM_FFA = 0, 1, 2


# ---------------------------------------------------------------- data


@dataclass(frozen=True)
class Dataset:
    """Images ``[n, c, h, w]`` in ``[0, 1]`` with binary targets ``[n, K]``."""

    images: np.ndarray
    labels: np.ndarray
    class_names: tuple = ()

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.float64)
        if images.ndim != 4 or labels.ndim != 2 or len(images) != len(labels):
            raise DimensionError(f"dataset needs images [n,c,h,w] and labels [n,K], got {images.shape}, {labels.shape}")
        if not np.isin(labels, (0.0, 1.0)).all():
            raise DatasetError("labels must be binary")
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)
        names = tuple(self.class_names) or tuple(str(k) for k in range(labels.shape[1]))
        if len(names) != labels.shape[1]:
            raise DimensionError(f"{len(names)} class names for {labels.shape[1]} label columns")
        object.__setattr__(self, "class_names", names)

    def __len__(self) -> int:
        return len(self.images)

    @property
    def classes(self) -> int:
        return self.labels.shape[1]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.class_names)


def make_toy_dataset(per_class: int = 16, size: int = 32, seed: int = 0, noise: float = 0.08) -> Dataset:
    """Four separable synthetic classes.

    Classes 0-2 raise colour channel ``k``; class 3 is grey with a 4-pixel
    checkerboard. Every image gets Gaussian pixel noise.
    """
    rng = np.random.default_rng(seed)
    ii, jj = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    checker = np.where((ii // 4 + jj // 4) % 2 == 0, 0.2, -0.2)
    images, labels = [], []
    for k in range(4):
        for _ in range(per_class):
            if k < 3:
                img = np.full((3, size, size), 0.3)
                img[k] += 0.4
            else:
                img = 0.5 + np.broadcast_to(checker, (3, size, size))
            images.append(np.clip(img + rng.normal(0.0, noise, size=img.shape), 0.0, 1.0))
            labels.append(np.eye(4)[k])
    return Dataset(np.stack(images), np.stack(labels), ("red", "green", "blue", "checker"))


# ---------------------------------------------------------------- loss


def bce_loss(o, t) -> Tensor:
    """Mean binary cross-entropy over every element, with ``o`` clamped to ``[1e-12, 1 - 1e-12]``."""
    o = T.as_tensor(o)
    t = np.asarray(t, dtype=np.float64)
    if o.shape != t.shape:
        raise DimensionError(f"bce_loss: outputs {o.shape} and targets {t.shape} differ")
    oc = T.clip(o, BCE_EPS, 1.0 - BCE_EPS)
    terms = T.add(T.mul(T.log(oc), t), T.mul(T.log(T.sub(1.0, oc)), 1.0 - t))
    return T.scale(T.mean(terms), -1.0)


# ---------------------------------------------------------------- schedule


@dataclass(frozen=True)
class TrainConfig:
    """Optimiser and schedule settings.

    ``total_steps`` defaults to ``epochs * ceil(n / batch)`` and
    ``warmup_steps`` to 5% of that; :meth:`resolve` fills both in.
    """

    lr_max: float = 1e-5
    lr_min: float = 0.0
    warmup_steps: Optional[int] = None
    total_steps: Optional[int] = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch: int = 16
    epochs: int = 20
    ffa_ratio: float = 1.0
    warmup_fraction: float = 0.05

    def __post_init__(self):
        if not 0 <= self.lr_min <= self.lr_max:
            raise ConfigError(f"need 0 <= lr_min <= lr_max, got {self.lr_min}, {self.lr_max}")
        if self.batch < 1 or self.epochs < 1:
            raise ConfigError("batch and epochs must be >= 1")
        if self.ffa_ratio < 0:
            raise ConfigError("ffa_ratio must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ConfigError("Adam betas must lie in [0, 1) and eps must be positive")
        if self.warmup_steps is not None and self.warmup_steps < 0:
            raise ScheduleError("warmup_steps must be >= 0")
        if self.total_steps is not None:
            if self.total_steps < 1:
                raise ScheduleError("total_steps must be >= 1")
            if self.warmup_steps is not None and self.warmup_steps >= self.total_steps:
                raise ScheduleError(f"warmup_steps {self.warmup_steps} must be < total_steps {self.total_steps}")

    def steps_per_epoch(self, n: int) -> int:
        return math.ceil(n / self.batch)

    def resolve(self, n: int) -> "TrainConfig":
        total = self.total_steps if self.total_steps is not None else self.epochs * self.steps_per_epoch(n)
        warm = self.warmup_steps if self.warmup_steps is not None else int(round(self.warmup_fraction * total))
        return replace(self, total_steps=total, warmup_steps=min(warm, total - 1))


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0 to ``lr_max``, then cosine annealing down to ``lr_min``."""
    if cfg.total_steps is None or cfg.warmup_steps is None:
        raise ScheduleError("schedule is unresolved; call TrainConfig.resolve first")
    if step < 0 or step > cfg.total_steps:
        raise ScheduleError(f"step {step} outside [0, {cfg.total_steps}]")
    if step < cfg.warmup_steps:
        return cfg.lr_max * step / cfg.warmup_steps
    t_cur = step - cfg.warmup_steps
    t_max = cfg.total_steps - cfg.warmup_steps
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + math.cos(math.pi * t_cur / t_max))


# ---------------------------------------------------------------- Adam


@dataclass
class AdamState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    step: int = 0


def init_adam(params: Params) -> AdamState:
    return AdamState({k: np.zeros(p.shape) for k, p in params.items()},
                     {k: np.zeros(p.shape) for k, p in params.items()})


def adam_step(params: Params, grads, state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> Tuple[Params, AdamState]:
    """One bias-corrected Adam update. Inputs are left untouched."""
    t = state.step + 1
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = beta1 * state.m[name] + (1 - beta1) * g
        v = beta2 * state.v[name] + (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        new_params[name] = Tensor(p.data - lr * m_hat / (np.sqrt(v_hat) + eps))
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(new_m, new_v, t)


# ---------------------------------------------------------------- batches


def stream(seed: int, epoch: int, kind: int) -> np.random.Generator:
    """Counter-based generator keyed by ``(seed, epoch, stream kind)``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, epoch, kind])))


def _fused_sample(data: Dataset, anchor: int, ffa: FfaConfig, rng: np.random.Generator):
    same = np.flatnonzero((data.labels == data.labels[anchor]).all(axis=1))
    partners = same[same != anchor]
    partner = int(rng.choice(partners)) if len(partners) else anchor
    h, w = data.images.shape[-2:]
    return fuse(data.images[anchor], data.images[partner], build_masks(h, w, ffa, rng))


def iter_batches(data: Dataset, cfg: TrainConfig, seed: int, epoch: int,
                 ffa: Optional[FfaConfig] = None) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """Shuffled mini-batches; with ``ffa`` each batch is extended by ``ffa_ratio * len(batch)`` fused images.

    Fused images blend a batch member with another training image of the
    same label vector, and carry that label.
    """
    order = stream(seed, epoch, STREAM_ORDER).permutation(len(data))
    frng = stream(seed, epoch, STREAM_FFA)
    for start in range(0, len(data), cfg.batch):
        idx = order[start:start + cfg.batch]
        x, y = data.images[idx], data.labels[idx]
        extra = int(round(cfg.ffa_ratio * len(idx))) if ffa is not None else 0
        if extra:
            anchors = [int(idx[j % len(idx)]) for j in range(extra)]
            x = np.concatenate([x, np.stack([_fused_sample(data, a, ffa, frng) for a in anchors])])
            y = np.concatenate([y, data.labels[anchors]])
        yield x, y


# ---------------------------------------------------------------- loop


def predict(images, params: Params, cfg: CmtConfig, batch: int = 64) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    out = [cmt_forward(images[i:i + batch], params, cfg, "eval").data for i in range(0, len(images), batch)]
    return np.concatenate(out)


def evaluate_dataset(data: Dataset, params: Params, cfg: CmtConfig, threshold: float = 0.5) -> MetricsReport:
    return evaluate(predict(data.images, params, cfg), data.labels, threshold)


def train_step(params: Params, state: AdamState, x, y, model_cfg: CmtConfig, cfg: TrainConfig,
               lr: float, rng: np.random.Generator):
    with Tape() as tape:
        tape.watch(*params.values())
        loss = bce_loss(cmt_forward(x, params, model_cfg, "train", rng), y)
    grads = tape.backward(loss)
    new_params, state = adam_step(params, {k: grads[p] for k, p in params.items()}, state, lr,
                                  cfg.beta1, cfg.beta2, cfg.eps)
    return new_params, state, loss.item()


@dataclass
class TrainResult:
    params: Params
    state: AdamState
    log: List[dict] = field(default_factory=list)
    checkpoint: Optional[Path] = None


def train_loop(data: Dataset, params: Params, model_cfg: CmtConfig, cfg: TrainConfig,
               ffa: Optional[FfaConfig] = None, seed: int = 0, out_dir: Optional[PathLike] = None,
               on_epoch: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Train for ``cfg.epochs`` epochs; with ``out_dir`` write ``model.cmt``, ``train_log.jsonl`` and ``config.json``."""
    if len(data) == 0:
        raise DatasetError("training set is empty")
    if data.classes != model_cfg.classes:
        raise DimensionError(f"dataset has {data.classes} classes, model expects {model_cfg.classes}")
    cfg = cfg.resolve(len(data))
    state = init_adam(params)
    log = []
    step = 0
    for epoch in range(cfg.epochs):
        start = time.perf_counter_ns()
        drop = stream(seed, epoch, STREAM_DROPOUT)
        losses, lr = [], 0.0
        for x, y in iter_batches(data, cfg, seed, epoch, ffa):
            if step >= cfg.total_steps:
                break
            lr = lr_at(step, cfg)
            params, state, loss = train_step(params, state, x, y, model_cfg, cfg, lr, drop)
            losses.append(loss)
            step += 1
        snapshot = evaluate_dataset(data, params, model_cfg)
        record = {"epoch": epoch, "mean_loss": float(np.mean(losses)) if losses else float("nan"), "lr": lr,
                  "of1": snapshot.of1, "cf1": snapshot.cf1,
                  "wall_ms": (time.perf_counter_ns() - start) / 1e6}
        log.append(record)
        if on_epoch is not None:
            on_epoch(record)
    result = TrainResult(params, state, log)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        result.checkpoint = save_checkpoint(out / "model.cmt", params, model_cfg)
        write_jsonl(out / "train_log.jsonl", log)
        run = {"model": model_cfg.to_dict(), "train": asdict(cfg), "seed": seed,
               "ffa": asdict(ffa) if ffa is not None else None}
        atomic_write(out / "config.json", (json.dumps(run, sort_keys=True, indent=2) + "\n").encode())
    return result


def toy_train_config(**overrides) -> TrainConfig:
    """Schedule for the synthetic set: default shape, larger peak rate so 20 epochs suffice."""
    return TrainConfig(**{"lr_max": 1e-2, **overrides})
