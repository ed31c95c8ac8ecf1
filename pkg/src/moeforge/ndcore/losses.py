"""Sequence losses built on the tensor engine."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, _record

__all__ = ["label_smoothed_cross_entropy"]


def label_smoothed_cross_entropy(
    logits: Tensor, targets: np.ndarray, epsilon: float = 0.1
) -> Tensor:
    """Mean per-token cross entropy against a smoothed target distribution.

    The smoothed target puts 1 - epsilon on the gold token and
    epsilon / (V - 1) on every other vocabulary entry, so epsilon = 0
    recovers standard cross entropy. Returns a scalar tensor (mean over
    tokens) with an analytic backward rule.
    """
    if not 0.0 <= epsilon < 1.0:
        raise ValueError(f"epsilon must lie in [0, 1), got {epsilon}")
    if logits.ndim != 2:
        raise ValueError(f"logits must be [T, V], got shape {logits.shape}")
    targets = np.asarray(targets, dtype=np.intp).reshape(-1)
    t, v = logits.shape
    if targets.shape[0] != t:
        raise ValueError(
            f"targets length {targets.shape[0]} does not match {t} logit rows"
        )
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise IndexError(
            f"target id out of range [0, {v}): min={targets.min()}, max={targets.max()}"
        )

    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    log_probs = shifted - logz

    # q[v] = (1 - eps) at the gold token, eps / (V - 1) elsewhere
    off = epsilon / (v - 1) if v > 1 else 0.0
    rows = np.arange(t)
    gold_lp = log_probs[rows, targets]
    loss = -((1.0 - epsilon - off) * gold_lp + off * log_probs.sum(axis=-1)).mean()
    out = Tensor(loss)

    def backward_fn(g):
        probs = np.exp(log_probs)
        q = np.full((t, v), off)
        q[rows, targets] = 1.0 - epsilon
        return (g * (probs - q) / t,)

    return _record(out, (logits,), backward_fn)
