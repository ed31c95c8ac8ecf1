"""The sparse MoE sublayer: gating, top-k dispatch, capacity, regularizers.

Pipeline for one batch of T tokens:

    probs    = gate_forward(x, W_g)                  # softmax over E experts
    probs    = gating_dropout(probs, ...)            # optional, training only
    decision = top_k_select(probs, k)
    decision = apply_capacity(decision, T, E, cf, training)
    decision = eom_mask(decision, p_eom, rng)        # optional, training only
    y        = moe_forward(x, decision, experts)
    y        = fom_mask(y, p_fom, rng)               # optional, training only
    aux      = load_balance_loss(probs, decision)

Gate weights are the raw softmax probabilities of the selected experts;
there is no renormalization after top-k and no inverse scaling of surviving
contributions after masking. The balance loss reads the full softmax rows
and the pre-mask, pre-capacity top-1 assignments, so expert-output masking
and capacity drops never perturb it.

All masking/drop functions are pure: they take an explicit RNG and return
new objects, and the same seed always yields the same masks and drops.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .ndcore import (
    Tensor,
    add,
    gather_elements,
    gather_rows,
    gelu,
    masked_zero,
    matmul,
    mean_axis,
    mul,
    mul_scalar,
    normalize_rows,
    scale_rows,
    scatter_rows,
    softmax,
    sum_all,
    zeros,
)

__all__ = [
    "GateConfig",
    "RoutingDecision",
    "FeedForward",
    "ExpertBank",
    "gate_forward",
    "top_k_select",
    "random_select",
    "apply_capacity",
    "moe_forward",
    "load_balance_loss",
    "eom_mask",
    "fom_mask",
    "gating_dropout",
    "make_virtual_partitions",
    "decision_to_jsonl",
]


@dataclass
class GateConfig:
    """Configuration of one MoE sublayer's gate and regularizers.

    The regularizers are alternatives, not layers to stack: at most one of
    p_eom / p_fom / p_gd may be nonzero in a run configuration.
    """

    num_experts: int
    k: int = 2
    capacity_factor: float = 2.0
    lambda_moe: float = 0.01
    p_eom: float = 0.0
    p_fom: float = 0.0
    p_gd: float = 0.0
    num_virtual_devices: int = 1

    def __post_init__(self):
        if self.num_experts < 1:
            raise ValueError(f"num_experts must be positive, got {self.num_experts}")
        if not 1 <= self.k <= self.num_experts:
            raise ValueError(f"k={self.k} must satisfy 1 <= k <= E={self.num_experts}")
        if self.capacity_factor <= 0:
            raise ValueError(f"capacity_factor must be positive, got {self.capacity_factor}")
        for name in ("p_eom", "p_fom", "p_gd"):
            p = getattr(self, name)
            if not 0.0 <= p < 1.0:
                raise ValueError(f"{name} must lie in [0, 1), got {p}")
        if sum(p > 0 for p in (self.p_eom, self.p_fom, self.p_gd)) > 1:
            raise ValueError("at most one of p_eom, p_fom, p_gd may be nonzero")
        if self.num_experts % self.num_virtual_devices != 0:
            raise ValueError(
                f"num_virtual_devices={self.num_virtual_devices} must divide "
                f"E={self.num_experts}"
            )


@dataclass
class RoutingDecision:
    """Per-token routing for one MoE layer pass.

    Selections are ordered by descending gate probability, so column 0 of
    `expert_index` is each token's top-1 expert as assigned before any
    masking or capacity enforcement. `gate_weight` snapshots the raw softmax
    probabilities of the selected experts; `probs` retains the full
    (differentiable) softmax rows for the balance loss.
    """

    expert_index: np.ndarray  # [T, k] int
    gate_weight: np.ndarray  # [T, k] float, raw softmax values
    dropped_by_capacity: np.ndarray  # [T, k] bool
    masked_by_eom: np.ndarray  # [T, k] bool
    probs: Tensor = field(repr=False)  # [T, E]

    @property
    def num_tokens(self) -> int:
        return self.expert_index.shape[0]

    @property
    def k(self) -> int:
        return self.expert_index.shape[1]

    @property
    def top1_expert(self) -> np.ndarray:
        return self.expert_index[:, 0]

    def surviving(self) -> np.ndarray:
        """[T, k] bool: selections that still contribute to the output."""
        return ~(self.dropped_by_capacity | self.masked_by_eom)


class FeedForward:
    """Two-layer position-wise FFN: gelu(x W1 + b1) W2 + b2."""

    def __init__(self, d_model: int, ffn_dim: int, rng: np.random.Generator,
                 init_std: float = 0.02):
        self.w1 = Tensor(rng.normal(0.0, init_std, (d_model, ffn_dim)), requires_grad=True)
        self.b1 = Tensor(np.zeros(ffn_dim), requires_grad=True)
        self.w2 = Tensor(rng.normal(0.0, init_std, (ffn_dim, d_model)), requires_grad=True)
        self.b2 = Tensor(np.zeros(d_model), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        hidden = gelu(add(matmul(x, self.w1), self.b1))
        return add(matmul(hidden, self.w2), self.b2)

    def named_params(self, prefix: str) -> dict[str, Tensor]:
        return {
            f"{prefix}.w1": self.w1,
            f"{prefix}.b1": self.b1,
            f"{prefix}.w2": self.w2,
            f"{prefix}.b2": self.b2,
        }


class ExpertBank:
    """E independently initialized FFN experts of identical shape."""

    def __init__(self, num_experts: int, d_model: int, ffn_dim: int,
                 rng: np.random.Generator, init_std: float = 0.02):
        self.num_experts = num_experts
        self.experts = [
            FeedForward(d_model, ffn_dim, rng, init_std) for _ in range(num_experts)
        ]

    def apply(self, e: int, x: Tensor) -> Tensor:
        return self.experts[e](x)

    def named_params(self, prefix: str) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for e, expert in enumerate(self.experts):
            out.update(expert.named_params(f"{prefix}.expert{e}"))
        return out


def gate_forward(x: Tensor, w_g: Tensor) -> Tensor:
    """Softmax gate probabilities [T, E] for tokens x [T, d]."""
    return softmax(matmul(x, w_g))


def top_k_select(probs: Tensor, k: int) -> RoutingDecision:
    """Keep each token's k largest gate probabilities at their raw values.

    Ties break toward the lowest expert index (stable argsort on the
    negated row).
    """
    t, e = probs.shape
    if k > e:
        raise ValueError(f"k={k} exceeds number of experts {e}")
    order = np.argsort(-probs.data, axis=-1, kind="stable")
    expert_index = order[:, :k]
    gate_weight = np.take_along_axis(probs.data, expert_index, axis=-1)
    flags = np.zeros((t, k), dtype=bool)
    return RoutingDecision(
        expert_index=expert_index,
        gate_weight=gate_weight,
        dropped_by_capacity=flags,
        masked_by_eom=flags.copy(),
        probs=probs,
    )


def random_select(
    probs: Tensor, k: int, rng: np.random.Generator
) -> RoutingDecision:
    """Choose k experts uniformly without replacement (specialization probe).

    Combination weights are the raw softmax probabilities of the randomly
    chosen experts, mirroring top_k_select's no-renormalization rule. With
    k = E every expert is selected and the result matches standard routing.
    """
    t, e = probs.shape
    if k > e:
        raise ValueError(f"k={k} exceeds number of experts {e}")
    expert_index = np.argsort(rng.random((t, e)), axis=-1)[:, :k]
    gate_weight = np.take_along_axis(probs.data, expert_index, axis=-1)
    flags = np.zeros((t, k), dtype=bool)
    return RoutingDecision(
        expert_index=expert_index,
        gate_weight=gate_weight,
        dropped_by_capacity=flags,
        masked_by_eom=flags.copy(),
        probs=probs,
    )


def apply_capacity(
    decision: RoutingDecision,
    capacity_factor: float,
    training: bool = True,
) -> RoutingDecision:
    """Flag selections beyond each expert's capacity as dropped.

    Scanning tokens in batch order (selection slots in rank order within a
    token), each expert accepts at most ceil(capacity_factor * T / E)
    selections while training. In eval mode the capacity is T, so nothing
    is ever dropped. Overflow tokens keep their residual path; only the
    expert contribution is zeroed.
    """
    t = decision.num_tokens
    e = decision.probs.shape[1]
    cap = t if not training else math.ceil(capacity_factor * t / e)
    dropped = decision.dropped_by_capacity.copy()
    flat_experts = decision.expert_index.reshape(-1)
    flat_dropped = dropped.reshape(-1)
    for expert in range(e):
        positions = np.flatnonzero(flat_experts == expert)
        if positions.size > cap:
            flat_dropped[positions[cap:]] = True
    return dataclasses.replace(decision, dropped_by_capacity=dropped)


def moe_forward(x: Tensor, decision: RoutingDecision, experts: ExpertBank) -> Tensor:
    """Combine surviving expert outputs: out_t = sum_e G_te * FFN_e(x_t).

    Only surviving selections are dispatched, so neither expert weights nor
    the gate receive gradient from masked or capacity-dropped selections.
    A token whose selections all died yields a zero row (the enclosing
    residual block preserves the token).
    """
    t, d = x.shape
    out = zeros((t, d))
    surviving = decision.surviving()
    for e in range(experts.num_experts):
        sel = (decision.expert_index == e) & surviving
        token_idx = np.flatnonzero(sel.any(axis=1))
        if token_idx.size == 0:
            continue
        expert_out = experts.apply(e, gather_rows(x, token_idx))
        weight = gather_elements(decision.probs, token_idx, e)
        out = add(out, scatter_rows(scale_rows(expert_out, weight), token_idx, t))
    return out


def load_balance_loss(probs: Tensor, decision: RoutingDecision) -> Tensor:
    """GShard-style differentiable balance surrogate: E * sum_e f_e * pbar_e.

    f_e is the fraction of tokens whose top-1 expert is e, taken before any
    masking or capacity drops (a constant); pbar_e is the mean gate
    probability of expert e, through which the loss is differentiable. The
    minimum value 1.0 is attained at perfectly uniform routing.
    """
    t, e = probs.shape
    fractions = np.bincount(decision.top1_expert, minlength=e) / t
    pbar = mean_axis(probs, 0)
    return mul_scalar(sum_all(mul(pbar, Tensor(fractions))), float(e))


def eom_mask(
    decision: RoutingDecision, p_eom: float, rng: np.random.Generator
) -> RoutingDecision:
    """Independently mask each (token, selected-expert) pair with prob p_eom.

    Masked pairs contribute zero to the layer output; surviving weights are
    not rescaled and the softmax rows feeding the balance loss are untouched.
    """
    if not 0.0 <= p_eom < 1.0:
        raise ValueError(f"p_eom must lie in [0, 1), got {p_eom}")
    if p_eom == 0.0:
        return decision
    masked = rng.random(decision.expert_index.shape) < p_eom
    return dataclasses.replace(
        decision, masked_by_eom=decision.masked_by_eom | masked
    )


def fom_mask(moe_output: Tensor, p_fom: float, rng: np.random.Generator) -> Tensor:
    """Zero each token's combined MoE output row with probability p_fom.

    No rescaling of surviving rows; the residual path is unaffected.
    p_fom = 1 (every row masked) is allowed for boundary testing.
    """
    if not 0.0 <= p_fom <= 1.0:
        raise ValueError(f"p_fom must lie in [0, 1], got {p_fom}")
    if p_fom == 0.0:
        return moe_output
    rows = rng.random(moe_output.shape[0]) < p_fom
    return masked_zero(moe_output, rows)


def make_virtual_partitions(
    num_tokens: int, num_experts: int, num_devices: int
) -> tuple[np.ndarray, np.ndarray]:
    """Contiguous token/expert assignment to virtual devices.

    Tokens are split into num_devices blocks by batch position; experts
    into equal contiguous groups (E must divide evenly).
    """
    if num_experts % num_devices != 0:
        raise ValueError(
            f"num_experts={num_experts} not divisible by num_devices={num_devices}"
        )
    token_partition = (np.arange(num_tokens) * num_devices) // max(num_tokens, 1)
    expert_partition = np.repeat(np.arange(num_devices), num_experts // num_devices)
    return token_partition, expert_partition


def gating_dropout(
    probs: Tensor,
    p_gd: float,
    token_partition: np.ndarray,
    expert_partition: np.ndarray,
    rng: np.random.Generator,
) -> Tensor:
    """Restrict a fraction p_gd of tokens to their local expert group.

    For an affected token, probabilities of non-local experts are zeroed
    and the row renormalized over the local group before top-k selection.
    """
    if not 0.0 <= p_gd < 1.0:
        raise ValueError(f"p_gd must lie in [0, 1), got {p_gd}")
    t, e = probs.shape
    expert_partition = np.asarray(expert_partition)
    token_partition = np.asarray(token_partition)
    if expert_partition.shape != (e,):
        raise ValueError(
            f"expert_partition shape {expert_partition.shape} does not match E={e}"
        )
    if token_partition.shape != (t,):
        raise ValueError(
            f"token_partition shape {token_partition.shape} does not match T={t}"
        )
    counts = np.bincount(expert_partition)
    if counts.size and not (counts == counts[0]).all():
        raise ValueError("experts must be evenly divided across virtual devices")
    if p_gd == 0.0 or np.unique(expert_partition).size <= 1:
        return probs
    dropped = rng.random(t) < p_gd
    if not dropped.any():
        return probs
    local = expert_partition[None, :] == token_partition[:, None]
    mask = np.where(dropped[:, None], local, True).astype(np.float64)
    return normalize_rows(mul(probs, Tensor(mask)))


def decision_to_jsonl(decision: RoutingDecision) -> list[str]:
    """One JSON line per token: indices, weights, and flags (debug dump)."""
    lines = []
    for t in range(decision.num_tokens):
        lines.append(
            json.dumps(
                {
                    "token": t,
                    "experts": decision.expert_index[t].tolist(),
                    "weights": decision.gate_weight[t].tolist(),
                    "dropped_by_capacity": decision.dropped_by_capacity[t].tolist(),
                    "masked_by_eom": decision.masked_by_eom[t].tolist(),
                },
                sort_keys=True,
            )
        )
    return lines
