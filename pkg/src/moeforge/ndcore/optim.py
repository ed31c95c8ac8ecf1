"""Adam optimizer and the warmup + inverse-sqrt learning-rate schedule."""

from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor

__all__ = ["AdamState", "adam_step", "lr_schedule"]


class AdamState:
    """First/second moment buffers plus the shared step counter.

    Moments are stored in flat backing arrays (one numpy update per step
    instead of one per parameter); `state.m[name]` / `state.v[name]` expose
    per-parameter views into them.
    """

    def __init__(self, params: dict[str, Tensor]):
        self.step = 0
        self._names = list(params)
        self._slices: dict[str, tuple[slice, tuple[int, ...]]] = {}
        offset = 0
        for name, p in params.items():
            self._slices[name] = (slice(offset, offset + p.size), p.shape)
            offset += p.size
        self._total = offset
        self.m_flat = np.zeros(offset)
        self.v_flat = np.zeros(offset)
        self.m = {
            name: self.m_flat[sl].reshape(shape)
            for name, (sl, shape) in self._slices.items()
        }
        self.v = {
            name: self.v_flat[sl].reshape(shape)
            for name, (sl, shape) in self._slices.items()
        }
        self._grad_buf = np.zeros(offset)


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray | None],
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.98),
    eps: float = 1e-6,
) -> None:
    """One bias-corrected Adam update, in place on `params`.

    A missing or None gradient is treated as zero, which leaves the
    corresponding parameter unchanged (the moments stay at zero too until
    a real gradient arrives, so zero gradient is the identity).
    """
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    b1, b2 = betas
    state.step += 1
    t = state.step
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t

    g_flat = state._grad_buf
    for name in state._names:
        sl, _ = state._slices[name]
        g = grads.get(name)
        if g is None:
            g_flat[sl] = 0.0
        else:
            g_flat[sl] = np.asarray(g).reshape(-1)

    m, v = state.m_flat, state.v_flat
    m *= b1
    m += (1.0 - b1) * g_flat
    v *= b2
    v += (1.0 - b2) * np.square(g_flat)
    update = (lr / bc1) * m / (np.sqrt(v / bc2) + eps)
    for name, p in params.items():
        sl, shape = state._slices[name]
        p.data -= update[sl].reshape(shape)


def lr_schedule(step: int, warmup_updates: int, peak_lr: float) -> float:
    """Linear ramp to `peak_lr` over warmup, then peak * sqrt(warmup/step).

    Continuous at the warmup boundary; `step` counts updates from 1.
    """
    if step < 0:
        raise ValueError(f"step must be non-negative, got {step}")
    if warmup_updates < 1:
        raise ValueError(f"warmup_updates must be >= 1, got {warmup_updates}")
    if step <= warmup_updates:
        return peak_lr * step / warmup_updates
    return peak_lr * math.sqrt(warmup_updates / step)
