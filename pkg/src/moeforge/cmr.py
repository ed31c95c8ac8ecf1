"""Conditional MoE Routing: a learned gate blending a shared FFN with MoE.

Per token, g = sigmoid(x . W_cmr) weights the MoE branch and (1 - g) the
shared dense branch. Training may force a fraction p_cmr of gates to exactly
zero, sending those tokens down the shared path only; the budget loss
|g - b| is computed on the pre-forcing gate values (the forcing regularizes
the computation path, not the budget target). Set
``CmrConfig.budget_on_forced_gates`` to compute it on post-forcing values
instead.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .ndcore import (
    Tensor,
    absolute,
    add,
    add_scalar,
    masked_zero,
    matmul,
    mean_all,
    mul_scalar,
    reshape,
    scale_rows,
    sigmoid,
)

__all__ = ["CmrConfig", "CmrGateState", "cmr_forward", "cmr_budget_loss", "total_loss"]


@dataclass
class CmrConfig:
    """Budget and gate-dropout settings for CMR sublayers."""

    budget: float = 0.6
    lambda_cmr: float = 0.1
    p_cmr: float = 0.0
    k: int = 1
    budget_on_forced_gates: bool = False

    def __post_init__(self):
        if not 0.0 <= self.budget <= 1.0:
            raise ValueError(f"budget must lie in [0, 1], got {self.budget}")
        if not 0.0 <= self.p_cmr < 1.0:
            raise ValueError(f"p_cmr must lie in [0, 1), got {self.p_cmr}")
        if self.k not in (1, 2):
            raise ValueError(f"CMR top-k must be 1 or 2, got {self.k}")


@dataclass
class CmrGateState:
    """Gate values for one batch: pre-forcing (budget) and effective (blend)."""

    gates: Tensor  # [T], pre-forcing sigmoid values
    effective_gates: Tensor  # [T], zero where forced
    forced: np.ndarray  # [T] bool


def cmr_forward(
    x: Tensor,
    w_cmr: Tensor,
    shared_ffn: Callable[[Tensor], Tensor],
    moe_branch: Callable[[Tensor], Tensor],
    p_cmr: float,
    rng: np.random.Generator | None,
    training: bool = True,
) -> tuple[Tensor, CmrGateState]:
    """Blend the two branches: out_t = (1 - g_t) shared(x_t) + g_t MoE(x_t).

    While training, a fraction p_cmr of tokens (drawn independently) have
    their gate forced to exactly zero, so they take only the shared path and
    propagate no gradient into the MoE branch.
    """
    if not 0.0 <= p_cmr < 1.0:
        raise ValueError(f"p_cmr must lie in [0, 1), got {p_cmr}")
    t = x.shape[0]
    gates = reshape(sigmoid(matmul(x, w_cmr)), (t,))
    if training and p_cmr > 0.0:
        if rng is None:
            raise ValueError("p_cmr > 0 requires an RNG")
        forced = rng.random(t) < p_cmr
    else:
        forced = np.zeros(t, dtype=bool)
    effective = masked_zero(gates, forced) if forced.any() else gates
    shared_out = shared_ffn(x)
    moe_out = moe_branch(x)
    one_minus = add_scalar(mul_scalar(effective, -1.0), 1.0)
    blended = add(scale_rows(shared_out, one_minus), scale_rows(moe_out, effective))
    return blended, CmrGateState(gates=gates, effective_gates=effective, forced=forced)


def cmr_budget_loss(gates: Tensor, budget: float) -> Tensor:
    """Mean absolute deviation of gate values from the budget b.

    Non-negative, zero iff every gate equals b; subgradient 0 at g = b.
    """
    if gates.ndim != 1:
        raise ValueError(f"gates must be a vector, got shape {gates.shape}")
    return mean_all(absolute(add_scalar(gates, -budget)))


def total_loss(
    l_mt: Tensor,
    l_moe: Tensor | None = None,
    l_cmr: Tensor | None = None,
    lambda_moe: float = 0.01,
    lambda_cmr: float = 0.1,
) -> Tensor:
    """Weighted objective: L_MT + lambda_moe L_MoE [+ lambda_cmr L_CMR]."""
    loss = l_mt
    if l_moe is not None:
        loss = add(loss, mul_scalar(l_moe, lambda_moe))
    if l_cmr is not None:
        loss = add(loss, mul_scalar(l_cmr, lambda_cmr))
    return loss
