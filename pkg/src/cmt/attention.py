"""Global multi-head self-attention and the two-level windowed/pooled variant.

Feature maps are ``[c, h, w]`` or batched ``[n, c, h, w]``. Tokens are spatial
positions with ``c`` channels, so projections are right-multiplications of
``[tokens, c]`` by ``c x c`` weights. Heads split the channels evenly and each
head scales its logits by ``1/sqrt(c / heads)``.

MMSA, for a map ``x``:

* level 1: attention inside non-overlapping ``g x g`` windows, plus ``x``;
* level 2: ``half * (alpha * maxpool + beta * avgpool)`` with window/stride
  ``g'``, global attention over the pooled tokens, nearest upsample by ``g'``;
* output: ``(level1 + level2) @ W_m @ W_n + x``.
"""
from __future__ import annotations

import math
import statistics
import time
from dataclasses import asdict, dataclass
from typing import Mapping, Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .tensor import MacCounter, Tape, Tensor

Weights = Mapping[str, Tensor]

MHSA_KEYS = ("wq", "wk", "wv", "wp")
MMSA_KEYS = ("wq1", "wk1", "wv1", "wq2", "wk2", "wv2", "wm", "wn")


@dataclass(frozen=True)
class AttentionConfig:
    channels: int
    heads: int = 1
    g: int = 2
    g_prime: int = 2
    alpha: float = 0.3
    beta: float = 0.7
    pool_half: bool = True

    def __post_init__(self):
        if self.channels < 1 or self.heads < 1 or self.channels % self.heads:
            raise ConfigError(f"heads={self.heads} must divide channels={self.channels}")
        if self.g < 1 or self.g_prime < 1:
            raise ConfigError(f"grid sizes must be positive, got g={self.g}, g'={self.g_prime}")
        if not (self.alpha > 0 and self.beta > 0 and math.isclose(self.alpha + self.beta, 1.0, abs_tol=1e-12)):
            raise ConfigError(f"pool mix needs alpha, beta > 0 with alpha + beta = 1, got {self.alpha}, {self.beta}")

    @property
    def head_dim(self) -> int:
        return self.channels // self.heads

    def check_map(self, c: int, h: int, w: int, kind: str = "mmsa") -> None:
        if c != self.channels:
            raise ConfigError(f"feature map has {c} channels, attention expects {self.channels}")
        if kind == "mmsa":
            for name, s in (("g", self.g), ("g'", self.g_prime)):
                if h % s or w % s:
                    raise ConfigError(f"{name}={s} must divide the feature map size {h}x{w}")


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = math.sqrt(1.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape))


def init_mhsa_weights(c: int, rng: np.random.Generator) -> dict:
    return {k: _uniform(rng, (c, c), c) for k in MHSA_KEYS}


def init_mmsa_weights(c: int, rng: np.random.Generator) -> dict:
    return {k: _uniform(rng, (c, c), c) for k in MMSA_KEYS}


# ---------------------------------------------------------------- layout helpers


def _batched(x: Tensor):
    x = T.as_tensor(x)
    if x.ndim == 3:
        return T.reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise ConfigError(f"expected a [c, h, w] or [n, c, h, w] map, got {x.shape}")
    return x, False


def _unbatched(x: Tensor, single: bool) -> Tensor:
    return T.reshape(x, x.shape[1:]) if single else x


def to_tokens(x: Tensor) -> Tensor:
    """``[n, c, h, w]`` -> ``[n, h*w, c]``."""
    n, c, h, w = x.shape
    return T.permute(T.reshape(x, (n, c, h * w)), (0, 2, 1))


def from_tokens(t: Tensor, h: int, w: int) -> Tensor:
    """``[n, h*w, c]`` -> ``[n, c, h, w]``."""
    n, _, c = t.shape
    return T.reshape(T.permute(t, (0, 2, 1)), (n, c, h, w))


def project(tokens: Tensor, weight: Tensor) -> Tensor:
    """Apply a ``c_in x c_out`` map to every token of ``[b, t, c_in]``."""
    b, t, c = tokens.shape
    flat = T.matmul(T.reshape(tokens, (b * t, c)), weight)
    return T.reshape(flat, (b, t, weight.shape[1]))


def window_partition(x: Tensor, g: int) -> Tensor:
    """``[n, c, h, w]`` -> ``[n * (h/g) * (w/g), g*g, c]`` window token groups."""
    n, c, h, w = x.shape
    t = T.reshape(x, (n, c, h // g, g, w // g, g))
    t = T.permute(t, (0, 2, 4, 3, 5, 1))
    return T.reshape(t, (n * (h // g) * (w // g), g * g, c))


def window_merge(t: Tensor, n: int, h: int, w: int, g: int) -> Tensor:
    c = t.shape[-1]
    t = T.reshape(t, (n, h // g, w // g, g, g, c))
    t = T.permute(t, (0, 5, 1, 3, 2, 4))
    return T.reshape(t, (n, c, h, w))


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, heads: int, trace: Optional[list] = None) -> Tensor:
    """Scaled dot-product attention of ``[b, t, c]`` tensors with channel-split heads."""
    b, t, c = q.shape
    d = c // heads

    def split(z):
        return T.reshape(T.permute(T.reshape(z, (b, t, heads, d)), (0, 2, 1, 3)), (b * heads, t, d))

    qh, kh, vh = split(q), split(k), split(v)
    logits = T.scale(T.matmul(qh, T.permute(kh, (0, 2, 1))), 1.0 / math.sqrt(d))
    probs = T.softmax(logits, axis=-1)
    if trace is not None:
        trace.append(probs)
    out = T.matmul(probs, vh)
    return T.reshape(T.permute(T.reshape(out, (b, heads, t, d)), (0, 2, 1, 3)), (b, t, c))


def _self_attend(tokens: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, heads: int, trace) -> Tensor:
    return multi_head_attention(project(tokens, wq), project(tokens, wk), project(tokens, wv), heads, trace)


# ---------------------------------------------------------------- MHSA


def mhsa_forward(x, weights: Weights, cfg: AttentionConfig, trace: Optional[list] = None) -> Tensor:
    """Global attention over all ``h*w`` positions, output projection and residual."""
    x4, single = _batched(x)
    n, c, h, w = x4.shape
    cfg.check_map(c, h, w, kind="mhsa")
    tokens = to_tokens(x4)
    a = _self_attend(tokens, weights["wq"], weights["wk"], weights["wv"], cfg.heads, trace)
    out = T.add(from_tokens(project(a, weights["wp"]), h, w), x4)
    return _unbatched(out, single)


def mhsa_analytic_cost(c: int, h: int, w: int) -> int:
    """``2 c h^2 w^2 + 3 h w c^2`` multiply-accumulates."""
    return 2 * c * h * h * w * w + 3 * h * w * c * c


# ---------------------------------------------------------------- MMSA


def mmsa_level1(x, weights: Weights, cfg: AttentionConfig, trace: Optional[list] = None) -> Tensor:
    """Windowed attention in ``g x g`` cells plus the input."""
    x4, single = _batched(x)
    n, c, h, w = x4.shape
    cfg.check_map(c, h, w)
    win = window_partition(x4, cfg.g)
    a = _self_attend(win, weights["wq1"], weights["wk1"], weights["wv1"], cfg.heads, trace)
    return _unbatched(T.add(window_merge(a, n, h, w, cfg.g), x4), single)


def pool_mix(att1: Tensor, cfg: AttentionConfig) -> Tensor:
    gp = cfg.g_prime
    mixed = T.add(T.scale(T.pool2d(att1, gp, gp, "max"), cfg.alpha),
                  T.scale(T.pool2d(att1, gp, gp, "average"), cfg.beta))
    return T.scale(mixed, 0.5) if cfg.pool_half else mixed


def mmsa_level2(att1, weights: Weights, cfg: AttentionConfig, trace: Optional[list] = None,
                upsample: bool = True) -> Tensor:
    """Global attention over the ``g'``-pooled map, upsampled back to full resolution."""
    a4, single = _batched(att1)
    n, c, h, w = a4.shape
    cfg.check_map(c, h, w)
    pooled = pool_mix(a4, cfg)
    hp, wp = pooled.shape[-2:]
    a = _self_attend(to_tokens(pooled), weights["wq2"], weights["wk2"], weights["wv2"], cfg.heads, trace)
    out = from_tokens(a, hp, wp)
    if upsample:
        out = T.nearest_upsample(out, cfg.g_prime)
    return _unbatched(out, single)


def mmsa_forward(x, weights: Weights, cfg: AttentionConfig, trace: Optional[list] = None) -> Tensor:
    x4, single = _batched(x)
    n, c, h, w = x4.shape
    att1 = mmsa_level1(x4, weights, cfg, trace)
    att2 = mmsa_level2(att1, weights, cfg, trace)
    fused = project(project(to_tokens(T.add(att1, att2)), weights["wm"]), weights["wn"])
    return _unbatched(T.add(from_tokens(fused, h, w), x4), single)


def mmsa_analytic_cost(c: int, h: int, w: int, g: int, g_prime: int, form: str = "printed") -> int:
    """``c h w (2 s^2 + 4 c) + (2 c h w / g'^2)(c + h w)`` in exact integers.

    ``form="printed"`` uses ``s = g'`` in the first term; ``form="window"``
    uses the level-1 window size ``s = g``.
    """
    if form not in ("printed", "window"):
        raise ConfigError(f"unknown cost form {form!r}")
    s = g_prime if form == "printed" else g
    hw = h * w
    second, rem = divmod(2 * c * hw * (c + hw), g_prime * g_prime)
    if rem:
        raise ConfigError(f"g'={g_prime} must divide the map so that the cost is integral")
    return c * hw * (2 * s * s + 4 * c) + second


# ---------------------------------------------------------------- measured cost


@dataclass
class CostReport:
    kind: str
    c: int
    h: int
    w: int
    g: int
    g_prime: int
    heads: int
    analytic_macs: int
    measured_macs: int
    wall_ns_median: int
    trials: int
    backward: bool = False

    def to_record(self) -> dict:
        rec = asdict(self)
        rec.pop("backward")
        return rec


def measure_cost(kind: str, c: int, h: int, w: int, cfg: AttentionConfig, trials: int = 5,
                 backward: bool = False, seed: int = 0) -> CostReport:
    """Time ``trials`` forward passes (optionally with backward) and count their MACs."""
    if trials < 1:
        raise ConfigError("trials must be >= 1")
    if kind not in ("mhsa", "mmsa"):
        raise ConfigError(f"kind must be 'mhsa' or 'mmsa', got {kind!r}")
    rng = np.random.default_rng(seed)
    if kind == "mhsa":
        weights, forward = init_mhsa_weights(c, rng), mhsa_forward
        analytic = mhsa_analytic_cost(c, h, w)
    else:
        weights, forward = init_mmsa_weights(c, rng), mmsa_forward
        analytic = mmsa_analytic_cost(c, h, w, cfg.g, cfg.g_prime)
    x = Tensor(rng.normal(size=(c, h, w)))

    macs, times = set(), []
    for _ in range(trials):
        with MacCounter() as counter:
            start = time.perf_counter_ns()
            if backward:
                with Tape() as tape:
                    tape.watch(x, *weights.values())
                    out = T.sum_(forward(x, weights, cfg))
                tape.backward(out)
            else:
                forward(x, weights, cfg)
            times.append(time.perf_counter_ns() - start)
        macs.add(counter.macs)
    if len(macs) != 1:
        raise ContractError(f"MAC counts differ across trials: {sorted(macs)}")
    return CostReport(kind, c, h, w, cfg.g, cfg.g_prime, cfg.heads, analytic, macs.pop(),
                      int(statistics.median(times)), trials, backward)
