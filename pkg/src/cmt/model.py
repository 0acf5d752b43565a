"""CNN feature extractor + attention encoders + sigmoid multi-label head.

Parameters live in a flat ``dict[str, Tensor]`` with dotted names
(``cife.stage0.block0.conv1``, ``enc0.attn.wq1``, ``head.w1`` ...). Every
forward function takes that dict plus the frozen config, so a training step
is "compute gradients, build a new dict".
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from . import tensor as T
from .attention import (
    MHSA_KEYS,
    MMSA_KEYS,
    AttentionConfig,
    from_tokens,
    mhsa_forward,
    mmsa_forward,
    project,
    to_tokens,
)
from .errors import ConfigError, DatasetError
from .storage import PathLike, atomic_write
from .tensor import Tensor

Params = Dict[str, Tensor]

MAX_REPEATS = (3, 4, 23)
MAGIC = b"CMT1"


@dataclass(frozen=True)
class CifeConfig:
    """Reduced ResNet-style extractor: stride-2 stem conv, 2x2 max pool, bottleneck stages."""

    in_channels: int = 3
    stem_channels: int = 16
    stem_kernel: int = 7
    stage_channels: tuple = (32, 64, 64)
    repeats: tuple = (1, 1, 1)
    strides: tuple = (1, 2, 2)
    expansion: int = 4
    zero_init_residual: bool = False

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(self.stage_channels))
        object.__setattr__(self, "repeats", tuple(self.repeats))
        object.__setattr__(self, "strides", tuple(self.strides))
        if not (len(self.stage_channels) == len(self.repeats) == len(self.strides) >= 1):
            raise ConfigError("stage_channels, repeats and strides must have the same non-zero length")
        if any(r < 1 for r in self.repeats) or any(s < 1 for s in self.strides):
            raise ConfigError("repeats and strides must be positive")
        if len(self.repeats) == len(MAX_REPEATS) and any(r > m for r, m in zip(self.repeats, MAX_REPEATS)):
            raise ConfigError(f"repeats {self.repeats} exceed the maximum {MAX_REPEATS}")
        if self.stem_kernel < 1 or self.stem_kernel % 2 == 0:
            raise ConfigError("stem_kernel must be odd")

    @property
    def out_channels(self) -> int:
        return self.stage_channels[-1]

    @property
    def total_stride(self) -> int:
        return 4 * math.prod(self.strides)


@dataclass(frozen=True)
class CmtConfig:
    cife: CifeConfig = field(default_factory=CifeConfig)
    attention: AttentionConfig = field(default_factory=lambda: AttentionConfig(channels=64, heads=4))
    attention_kind: str = "mmsa"
    encoders: int = 4
    ffn_hidden: int = 128
    ffn_repeats: int = 1
    head_hidden: int = 64
    dropout: float = 0.2
    classes: int = 4

    def __post_init__(self):
        if self.encoders < 1 or self.classes < 1 or self.ffn_repeats < 1:
            raise ConfigError("encoders, classes and ffn_repeats must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.attention.channels != self.cife.out_channels:
            raise ConfigError(f"attention channels {self.attention.channels} != "
                              f"extractor output channels {self.cife.out_channels}")
        if self.attention_kind not in ("mmsa", "mhsa"):
            raise ConfigError(f"attention_kind must be 'mmsa' or 'mhsa', got {self.attention_kind!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CmtConfig":
        d = dict(d)
        d["cife"] = CifeConfig(**d["cife"])
        d["attention"] = AttentionConfig(**d["attention"])
        return cls(**d)

    def digest(self) -> bytes:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).digest()


def toy_config(attention_kind: str = "mmsa", dropout: float = 0.2) -> CmtConfig:
    """Desk-scale model: 32x32 RGB input -> 8 x 8 x 8 features, one encoder, 4 classes."""
    cife = CifeConfig(stem_channels=8, stem_kernel=3, stage_channels=(8, 8, 8), strides=(1, 1, 1), expansion=2)
    att = AttentionConfig(channels=8, heads=2, g=2, g_prime=2)
    return CmtConfig(cife=cife, attention=att, attention_kind=attention_kind, encoders=1,
                     ffn_hidden=16, head_hidden=16, dropout=dropout, classes=4)


# ---------------------------------------------------------------- shapes


def cife_stage_shapes(cfg: CifeConfig, h: int, w: int) -> list:
    """Output shape of the stem, the pool and every stage, validated against the strides."""
    shapes = []

    def down(name, c, h, w, s):
        if h % s or w % s:
            raise ConfigError(f"{name}: stride {s} does not divide spatial size {h}x{w}")
        shapes.append((name, (c, h // s, w // s)))
        return h // s, w // s

    h, w = down("stem", cfg.stem_channels, h, w, 2)
    h, w = down("pool", cfg.stem_channels, h, w, 2)
    for i, (c, s) in enumerate(zip(cfg.stage_channels, cfg.strides)):
        h, w = down(f"stage{i}", c, h, w, s)
    return shapes


def cife_output_shape(cfg: CifeConfig, h: int, w: int) -> tuple:
    return cife_stage_shapes(cfg, h, w)[-1][1]


def check_input_size(cfg: CmtConfig, h: int, w: int) -> tuple:
    c, hf, wf = cife_output_shape(cfg.cife, h, w)
    att = cfg.attention
    if cfg.attention_kind == "mmsa":
        att.check_map(c, hf, wf)
    return c, hf, wf


# ---------------------------------------------------------------- parameters


def _uniform(rng, shape, fan_in):
    bound = math.sqrt(1.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape))


def _block_names(cfg: CifeConfig):
    cin = cfg.stem_channels
    for i, (cout, reps, stride) in enumerate(zip(cfg.stage_channels, cfg.repeats, cfg.strides)):
        for b in range(reps):
            s = stride if b == 0 else 1
            yield f"cife.stage{i}.block{b}", cin, cout, s
            cin = cout


def init_params(cfg: CmtConfig, seed: int) -> Params:
    rng = np.random.default_rng(seed)
    p: Params = {}
    cc = cfg.cife
    k = cc.stem_kernel
    p["cife.stem"] = _uniform(rng, (cc.stem_channels, cc.in_channels, k, k), cc.in_channels * k * k)
    for name, cin, cout, s in _block_names(cc):
        mid = max(1, cout // cc.expansion)
        p[f"{name}.conv1"] = _uniform(rng, (mid, cin, 1, 1), cin)
        p[f"{name}.conv2"] = _uniform(rng, (mid, mid, 3, 3), mid * 9)
        p[f"{name}.conv3"] = _uniform(rng, (cout, mid, 1, 1), mid)
        p[f"{name}.scale"] = Tensor(np.zeros(cout) if cc.zero_init_residual else np.ones(cout))
        if cin != cout or s != 1:
            p[f"{name}.proj"] = _uniform(rng, (cout, cin, 1, 1), cin)

    c = cfg.attention.channels
    keys = MMSA_KEYS if cfg.attention_kind == "mmsa" else MHSA_KEYS
    for e in range(cfg.encoders):
        pre = f"enc{e}"
        for key in keys:
            p[f"{pre}.attn.{key}"] = _uniform(rng, (c, c), c)
        p[f"{pre}.ln1.gamma"] = Tensor(np.ones(c))
        p[f"{pre}.ln1.beta"] = Tensor(np.zeros(c))
        for r in range(cfg.ffn_repeats):
            p[f"{pre}.ffn{r}.w1"] = _uniform(rng, (c, cfg.ffn_hidden), c)
            p[f"{pre}.ffn{r}.b1"] = _uniform(rng, (cfg.ffn_hidden,), c)
            p[f"{pre}.ffn{r}.w2"] = _uniform(rng, (cfg.ffn_hidden, c), cfg.ffn_hidden)
            p[f"{pre}.ffn{r}.b2"] = _uniform(rng, (c,), cfg.ffn_hidden)
            p[f"{pre}.ln2_{r}.gamma"] = Tensor(np.ones(c))
            p[f"{pre}.ln2_{r}.beta"] = Tensor(np.zeros(c))
    p["head.w1"] = _uniform(rng, (c, cfg.head_hidden), c)
    p["head.w2"] = _uniform(rng, (cfg.head_hidden, cfg.classes), cfg.head_hidden)
    p["head.b"] = _uniform(rng, (cfg.classes,), cfg.head_hidden)
    return p


# ---------------------------------------------------------------- forward


def _batched(x):
    x = T.as_tensor(x)
    if x.ndim == 3:
        return T.reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise ConfigError(f"expected [c, h, w] or [n, c, h, w], got {x.shape}")
    return x, False


def bottleneck(x: Tensor, params: Params, name: str, stride: int) -> Tensor:
    y = T.relu(T.conv2d(x, params[f"{name}.conv1"]))
    y = T.relu(T.conv2d(y, params[f"{name}.conv2"], stride=stride, padding=1))
    y = T.conv2d(y, params[f"{name}.conv3"])
    scale = params[f"{name}.scale"]
    y = T.mul(y, T.reshape(scale, (scale.shape[0], 1, 1)))
    shortcut = T.conv2d(x, params[f"{name}.proj"], stride=stride) if f"{name}.proj" in params else x
    return T.relu(T.add(y, shortcut))


def cife_forward(image, params: Params, cfg: CifeConfig) -> Tensor:
    x, single = _batched(image)
    if x.shape[1] != cfg.in_channels:
        raise ConfigError(f"extractor expects {cfg.in_channels} channels, got {x.shape[1]}")
    cife_stage_shapes(cfg, *x.shape[-2:])
    y = T.relu(T.conv2d(x, params["cife.stem"], stride=2, padding=cfg.stem_kernel // 2))
    y = T.pool2d(y, 2, 2, "max")
    for name, _, _, s in _block_names(cfg):
        y = bottleneck(y, params, name, s)
    return T.reshape(y, y.shape[1:]) if single else y


def to_embedding(fmap) -> Tensor:
    """``[c, h, w]`` -> ``[c, h*w]`` (batched maps keep their leading axis)."""
    fmap = T.as_tensor(fmap)
    return T.reshape(fmap, fmap.shape[:-2] + (fmap.shape[-2] * fmap.shape[-1],))


def from_embedding(emb, h: int, w: int) -> Tensor:
    emb = T.as_tensor(emb)
    return T.reshape(emb, emb.shape[:-1] + (h, w))


def encoder_forward(x, params: Params, cfg: CmtConfig, index: int, mode: str = "eval",
                    rng: Optional[np.random.Generator] = None) -> Tensor:
    """``y = LN(attn(x))`` where attention carries its own residual, then ``z = LN(y + FFN(y))``."""
    x4, single = _batched(x)
    _, _, h, w = x4.shape
    pre = f"enc{index}"
    keys = MMSA_KEYS if cfg.attention_kind == "mmsa" else MHSA_KEYS
    weights = {k: params[f"{pre}.attn.{k}"] for k in keys}
    attend = mmsa_forward if cfg.attention_kind == "mmsa" else mhsa_forward
    a = attend(x4, weights, cfg.attention)
    y = T.layer_norm(to_tokens(a), params[f"{pre}.ln1.gamma"], params[f"{pre}.ln1.beta"])
    training = mode == "train"
    for r in range(cfg.ffn_repeats):
        f = T.relu(T.add(project(y, params[f"{pre}.ffn{r}.w1"]), params[f"{pre}.ffn{r}.b1"]))
        f = T.dropout(f, cfg.dropout, rng, training=training)
        f = T.add(project(f, params[f"{pre}.ffn{r}.w2"]), params[f"{pre}.ffn{r}.b2"])
        y = T.layer_norm(T.add(y, f), params[f"{pre}.ln2_{r}.gamma"], params[f"{pre}.ln2_{r}.beta"])
    out = from_tokens(y, h, w)
    return T.reshape(out, out.shape[1:]) if single else out


def head_logits(x, params: Params) -> Tensor:
    """Global average pool, then ``@ W1 @ W2 + b`` (no interleaved nonlinearity)."""
    x4, single = _batched(x)
    pooled = T.global_avg_pool(x4)
    z = T.add(T.matmul(T.matmul(pooled, params["head.w1"]), params["head.w2"]), params["head.b"])
    return T.reshape(z, z.shape[1:]) if single else z


def head_forward(x, params: Params) -> Tensor:
    return T.sigmoid(head_logits(x, params))


def features_to_logits(fmap, params: Params, cfg: CmtConfig, mode: str = "eval",
                       rng: Optional[np.random.Generator] = None) -> Tensor:
    y = fmap
    for e in range(cfg.encoders):
        y = encoder_forward(y, params, cfg, e, mode, rng)
    return head_logits(y, params)


def cmt_logits(image, params: Params, cfg: CmtConfig, mode: str = "eval",
               rng: Optional[np.random.Generator] = None) -> Tensor:
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = T.as_tensor(image)
    check_input_size(cfg, *x.shape[-2:])
    return features_to_logits(cife_forward(x, params, cfg.cife), params, cfg, mode, rng)


def cmt_forward(image, params: Params, cfg: CmtConfig, mode: str = "eval",
                rng: Optional[np.random.Generator] = None) -> Tensor:
    """Per-class probabilities ``[K]`` (or ``[n, K]`` for a batch)."""
    return T.sigmoid(cmt_logits(image, params, cfg, mode, rng))


def with_params(params: Params, **updates) -> Params:
    out = dict(params)
    out.update({k: T.as_tensor(v) for k, v in updates.items()})
    return out


# ---------------------------------------------------------------- checkpoints


def encode_checkpoint(params: Params, cfg: CmtConfig) -> bytes:
    parts = [MAGIC, cfg.digest()]
    for name, t in params.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack(f"<I{t.ndim}I", t.ndim, *t.shape))
        parts.append(t.data.astype("<f8").tobytes())
    return b"".join(parts)


def save_checkpoint(path: PathLike, params: Params, cfg: CmtConfig) -> Path:
    return atomic_write(path, encode_checkpoint(params, cfg))


def load_checkpoint(path: PathLike, cfg: Optional[CmtConfig] = None):
    """Return ``(params, digest)``; with ``cfg`` the stored digest must match it."""
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC or len(blob) < 36:
        raise DatasetError(f"{path}: not a CMT1 checkpoint")
    digest = blob[4:36]
    if cfg is not None and cfg.digest() != digest:
        raise ConfigError(f"{path}: checkpoint was written for a different model config")
    params: Params = {}
    pos = 36
    try:
        while pos < len(blob):
            (n,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            count = math.prod(dims)
            values = np.frombuffer(blob, dtype="<f8", count=count, offset=pos)
            pos += 8 * count
            params[name] = Tensor(values.reshape(dims))
    except (struct.error, ValueError) as exc:
        raise DatasetError(f"{path}: truncated checkpoint ({exc})") from None
    return params, digest


def replace_config(cfg: CmtConfig, **kw) -> CmtConfig:
    return replace(cfg, **kw)
