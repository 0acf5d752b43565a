"""Central finite-difference checks for tape gradients."""
from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tape, Tensor


def numerical_gradient(f: Callable[[Sequence[np.ndarray]], float], arrays: Sequence[np.ndarray],
                       which: int, indices=None, eps: float = 1e-5) -> np.ndarray:
    """Central differences of the scalar ``f`` w.r.t. ``arrays[which]``.

    Only the flat ``indices`` are perturbed (all of them when ``None``); the
    returned array is zero elsewhere.
    """
    base = [np.array(a, dtype=np.float64, order="C") for a in arrays]
    target = base[which]
    grad = np.zeros(target.size)
    flat = target.reshape(-1)
    idx = range(target.size) if indices is None else indices
    for i in idx:
        old = flat[i]
        flat[i] = old + eps
        fp = f(base)
        flat[i] = old - eps
        fm = f(base)
        flat[i] = old
        grad[i] = (fp - fm) / (2 * eps)
    return grad.reshape(target.shape)


def analytic_gradients(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray]) -> list:
    tensors = [Tensor(a) for a in arrays]
    with Tape() as tape:
        tape.watch(*tensors)
        out = fn(*tensors)
    grads = tape.backward(out)
    return [grads[t] for t in tensors]


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """``|a - b| / max(|a|, |b|, floor)`` in the 2-norm."""
    num = float(np.linalg.norm(a - b))
    den = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)), floor)
    return num / den


def gradcheck(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], eps: float = 1e-5,
              max_entries: Optional[int] = None, rng: Optional[np.random.Generator] = None) -> list:
    """Relative error between tape and finite-difference gradients, one per input.

    ``fn`` maps tensors to a scalar tensor. With ``max_entries`` only a random
    subset of each input's entries is compared.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    analytic = analytic_gradients(fn, arrays)

    def f(vals):
        return fn(*[Tensor(v) for v in vals]).item()

    errors = []
    for k, arr in enumerate(arrays):
        if max_entries is not None and arr.size > max_entries:
            rng = rng or np.random.default_rng(0)
            idx = np.sort(rng.choice(arr.size, size=max_entries, replace=False))
        else:
            idx = np.arange(arr.size)
        num = numerical_gradient(f, arrays, k, idx, eps)
        errors.append(relative_error(analytic[k].reshape(-1)[idx], num.reshape(-1)[idx]))
    return errors


def gradcheck_named(fn: Callable[[dict], Tensor], named: dict, eps: float = 1e-5,
                    max_entries: Optional[int] = None, rng: Optional[np.random.Generator] = None) -> dict:
    """:func:`gradcheck` over a ``name -> array`` mapping; returns ``name -> relative error``."""
    names = list(named)
    arrays = [named[k].data if isinstance(named[k], Tensor) else np.asarray(named[k]) for k in names]
    errors = gradcheck(lambda *ts: fn(dict(zip(names, ts))), arrays, eps=eps, max_entries=max_entries, rng=rng)
    return dict(zip(names, errors))
