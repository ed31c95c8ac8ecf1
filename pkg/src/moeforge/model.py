"""Toy Transformer encoder-decoder with MoE / CMR feed-forward sublayers.

Every residual block is Pre-LN (normalize, transform, add). Attention
sublayers are always dense; the FFN sublayer of every other layer (the 2nd,
4th, ... in 1-based order) is replaced by an MoE or CMR sublayer according
to `ModelConfig.moe_mode`. Source sequences carry a source-language prefix
token and target sequences a target-language prefix token, which doubles as
the decoder's begin-of-sequence symbol under teacher forcing.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import ndcore as nd
from .ndcore import Tensor, label_smoothed_cross_entropy
from .cmr import CmrConfig, CmrGateState, cmr_budget_loss, cmr_forward
from .routing import (
    ExpertBank,
    FeedForward,
    GateConfig,
    RoutingDecision,
    apply_capacity,
    eom_mask,
    fom_mask,
    gate_forward,
    gating_dropout,
    load_balance_loss,
    make_virtual_partitions,
    moe_forward,
    random_select,
    top_k_select,
)

__all__ = [
    "MOE_MODES",
    "ModelConfig",
    "Batch",
    "ForwardContext",
    "Seq2SeqModel",
    "build_model",
    "forward_teacher_forced",
    "step_loss",
]

MOE_MODES = ("dense", "moe", "moe+eom", "moe+fom", "moe+gd", "cmr_top1", "cmr_top2")


@dataclass
class ModelConfig:
    """Architecture and regularization settings for the toy transformer.

    Desk-scale defaults keep the paper-scale ratios (ffn = 4 * d_model)
    while shrinking every dimension to CPU-friendly sizes.
    """

    vocab_size: int
    d_model: int = 64
    ffn_dim: int = 256
    heads: int = 4
    encoder_layers: int = 4
    decoder_layers: int = 4
    moe_mode: str = "moe"
    gate: GateConfig = field(default_factory=lambda: GateConfig(num_experts=8))
    cmr: CmrConfig | None = None
    dropout: float = 0.0
    label_smoothing: float = 0.1
    max_seq_len: int = 64
    init_std: float = 0.02

    def __post_init__(self):
        if self.moe_mode not in MOE_MODES:
            raise ValueError(f"unknown moe_mode {self.moe_mode!r}; expected one of {MOE_MODES}")
        if self.d_model % self.heads != 0:
            raise ValueError(
                f"heads={self.heads} must divide d_model={self.d_model}"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")
        mode = self.moe_mode
        if mode == "moe+eom" and (self.gate.p_fom or self.gate.p_gd):
            raise ValueError("moe+eom mode admits only p_eom")
        if mode == "moe+fom" and (self.gate.p_eom or self.gate.p_gd):
            raise ValueError("moe+fom mode admits only p_fom")
        if mode == "moe+gd" and (self.gate.p_eom or self.gate.p_fom):
            raise ValueError("moe+gd mode admits only p_gd")
        if mode == "moe" and (self.gate.p_eom or self.gate.p_fom or self.gate.p_gd):
            raise ValueError("vanilla moe mode admits no routing regularizer")
        if mode.startswith("cmr"):
            if self.cmr is None:
                raise ValueError(f"{mode} requires a CmrConfig")
            want_k = 1 if mode == "cmr_top1" else 2
            if self.cmr.k != want_k:
                raise ValueError(f"{mode} requires cmr.k == {want_k}, got {self.cmr.k}")
            if self.gate.p_eom or self.gate.p_fom or self.gate.p_gd:
                raise ValueError("cmr modes admit no routing regularizer")

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        data = dict(data)
        if isinstance(data.get("gate"), dict):
            data["gate"] = GateConfig(**data["gate"])
        if isinstance(data.get("cmr"), dict):
            data["cmr"] = CmrConfig(**data["cmr"])
        return cls(**data)


@dataclass
class Batch:
    """One training batch: prefixed source/target id arrays plus task ids."""

    src: np.ndarray  # [B, Ls], src[:, 0] is the source-language token
    tgt: np.ndarray  # [B, Lt], tgt[:, 0] is the target-language token
    task_ids: np.ndarray  # [B]

    @property
    def num_sequences(self) -> int:
        return self.src.shape[0]


@dataclass
class ForwardContext:
    """Side channel populated during a forward pass.

    Collects per-MoE-layer routing decisions (keyed by layer name such as
    "encoder.2"), auxiliary losses, and CMR gate states for loss assembly
    and post-hoc analysis.
    """

    training: bool = False
    rng: np.random.Generator | None = None
    routing: str = "topk"  # "topk" | "random"
    routing_rng: np.random.Generator | None = None
    decisions: list[tuple[str, RoutingDecision]] = field(default_factory=list)
    balance_losses: list[Tensor] = field(default_factory=list)
    budget_losses: list[Tensor] = field(default_factory=list)
    gate_states: list[tuple[str, CmrGateState]] = field(default_factory=list)


class LayerNorm:
    def __init__(self, d: int):
        self.gain = Tensor(np.ones(d), requires_grad=True)
        self.bias = Tensor(np.zeros(d), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return nd.layer_norm(x, self.gain, self.bias)

    def named_params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.gain": self.gain, f"{prefix}.bias": self.bias}


class MultiHeadAttention:
    def __init__(self, d_model: int, heads: int, rng: np.random.Generator, init_std: float):
        self.heads = heads
        self.head_dim = d_model // heads
        self.scale = 1.0 / np.sqrt(self.head_dim)

        def proj():
            return (
                Tensor(rng.normal(0.0, init_std, (d_model, d_model)), requires_grad=True),
                Tensor(np.zeros(d_model), requires_grad=True),
            )

        self.wq, self.bq = proj()
        self.wk, self.bk = proj()
        self.wv, self.bv = proj()
        self.wo, self.bo = proj()

    def _split(self, x: Tensor, batch: int, length: int) -> Tensor:
        return nd.swapaxes(nd.reshape(x, (batch, length, self.heads, self.head_dim)), 1, 2)

    def __call__(self, query_src: Tensor, kv_src: Tensor, additive_mask: Tensor | None) -> Tensor:
        b, lq, d = query_src.shape
        lk = kv_src.shape[1]
        q = self._split(nd.add(nd.matmul(query_src, self.wq), self.bq), b, lq)
        k = self._split(nd.add(nd.matmul(kv_src, self.wk), self.bk), b, lk)
        v = self._split(nd.add(nd.matmul(kv_src, self.wv), self.bv), b, lk)
        scores = nd.mul_scalar(nd.matmul(q, nd.swapaxes(k, 2, 3)), self.scale)
        if additive_mask is not None:
            scores = nd.add(scores, additive_mask)
        attn = nd.softmax(scores)
        context = nd.reshape(nd.swapaxes(nd.matmul(attn, v), 1, 2), (b, lq, d))
        return nd.add(nd.matmul(context, self.wo), self.bo)

    def named_params(self, prefix: str) -> dict[str, Tensor]:
        return {
            f"{prefix}.wq": self.wq, f"{prefix}.bq": self.bq,
            f"{prefix}.wk": self.wk, f"{prefix}.bk": self.bk,
            f"{prefix}.wv": self.wv, f"{prefix}.bv": self.bv,
            f"{prefix}.wo": self.wo, f"{prefix}.bo": self.bo,
        }


class DenseFFNSublayer:
    kind = "dense"

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.ffn = FeedForward(config.d_model, config.ffn_dim, rng, config.init_std)

    def __call__(self, x: Tensor, name: str, ctx: ForwardContext) -> Tensor:
        return self.ffn(x)

    def named_params(self, prefix: str) -> dict[str, Tensor]:
        return self.ffn.named_params(f"{prefix}.ffn")


class MoESublayer:
    """Gate + expert bank running the full routing pipeline on [T, d] tokens."""

    kind = "moe"

    def __init__(self, config: ModelConfig, rng: np.random.Generator,
                 gate: GateConfig | None = None):
        self.gate_config = gate or config.gate
        d = config.d_model
        self.w_g = Tensor(
            rng.normal(0.0, config.init_std, (d, self.gate_config.num_experts)),
            requires_grad=True,
        )
        self.experts = ExpertBank(
            self.gate_config.num_experts, d, config.ffn_dim, rng, config.init_std
        )

    def __call__(self, x: Tensor, name: str, ctx: ForwardContext) -> Tensor:
        cfg = self.gate_config
        t = x.shape[0]
        probs = gate_forward(x, self.w_g)
        if ctx.training and cfg.p_gd > 0.0:
            tok_part, exp_part = make_virtual_partitions(
                t, cfg.num_experts, cfg.num_virtual_devices
            )
            probs = gating_dropout(probs, cfg.p_gd, tok_part, exp_part, ctx.rng)
        if ctx.routing == "random":
            decision = random_select(probs, cfg.k, ctx.routing_rng)
        else:
            decision = top_k_select(probs, cfg.k)
        decision = apply_capacity(decision, cfg.capacity_factor, training=ctx.training)
        if ctx.training and cfg.p_eom > 0.0:
            decision = eom_mask(decision, cfg.p_eom, ctx.rng)
        out = moe_forward(x, decision, self.experts)
        if ctx.training and cfg.p_fom > 0.0:
            out = fom_mask(out, cfg.p_fom, ctx.rng)
        ctx.decisions.append((name, decision))
        if ctx.training:
            ctx.balance_losses.append(load_balance_loss(probs, decision))
        return out

    def named_params(self, prefix: str) -> dict[str, Tensor]:
        out = {f"{prefix}.moe.w_g": self.w_g}
        out.update(self.experts.named_params(f"{prefix}.moe"))
        return out


class CmrSublayer:
    """MoE branch plus a shared dense FFN behind a learned sigmoid gate."""

    kind = "cmr"

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        cmr = config.cmr
        gate = dataclasses.replace(config.gate, k=cmr.k)
        self.cmr_config = cmr
        self.moe = MoESublayer(config, rng, gate=gate)
        self.shared_ffn = FeedForward(config.d_model, config.ffn_dim, rng, config.init_std)
        self.w_cmr = Tensor(
            rng.normal(0.0, config.init_std, (config.d_model, 1)), requires_grad=True
        )

    def __call__(self, x: Tensor, name: str, ctx: ForwardContext) -> Tensor:
        p_cmr = self.cmr_config.p_cmr if ctx.training else 0.0
        out, state = cmr_forward(
            x,
            self.w_cmr,
            self.shared_ffn,
            lambda tokens: self.moe(tokens, name, ctx),
            p_cmr,
            ctx.rng,
            training=ctx.training,
        )
        ctx.gate_states.append((name, state))
        if ctx.training:
            gates = state.effective_gates if self.cmr_config.budget_on_forced_gates else state.gates
            ctx.budget_losses.append(cmr_budget_loss(gates, self.cmr_config.budget))
        return out

    def named_params(self, prefix: str) -> dict[str, Tensor]:
        out = {f"{prefix}.cmr.w_cmr": self.w_cmr}
        out.update(self.shared_ffn.named_params(f"{prefix}.cmr.shared"))
        out.update(self.moe.named_params(f"{prefix}.cmr"))
        return out


def _make_ffn_sublayer(config: ModelConfig, layer_index_1b: int, rng) -> object:
    """Dense FFN at odd layers, MoE/CMR at every other (2nd, 4th, ...)."""
    if config.moe_mode == "dense" or layer_index_1b % 2 == 1:
        return DenseFFNSublayer(config, rng)
    if config.moe_mode.startswith("cmr"):
        return CmrSublayer(config, rng)
    return MoESublayer(config, rng)


class EncoderLayer:
    def __init__(self, config: ModelConfig, layer_index_1b: int, rng):
        self.ln_attn = LayerNorm(config.d_model)
        self.attn = MultiHeadAttention(config.d_model, config.heads, rng, config.init_std)
        self.ln_ffn = LayerNorm(config.d_model)
        self.ffn = _make_ffn_sublayer(config, layer_index_1b, rng)

    def named_params(self, prefix: str) -> dict[str, Tensor]:
        out = self.ln_attn.named_params(f"{prefix}.ln_attn")
        out.update(self.attn.named_params(f"{prefix}.attn"))
        out.update(self.ln_ffn.named_params(f"{prefix}.ln_ffn"))
        out.update(self.ffn.named_params(f"{prefix}"))
        return out


class DecoderLayer:
    def __init__(self, config: ModelConfig, layer_index_1b: int, rng):
        self.ln_self = LayerNorm(config.d_model)
        self.self_attn = MultiHeadAttention(config.d_model, config.heads, rng, config.init_std)
        self.ln_cross = LayerNorm(config.d_model)
        self.cross_attn = MultiHeadAttention(config.d_model, config.heads, rng, config.init_std)
        self.ln_ffn = LayerNorm(config.d_model)
        self.ffn = _make_ffn_sublayer(config, layer_index_1b, rng)

    def named_params(self, prefix: str) -> dict[str, Tensor]:
        out = self.ln_self.named_params(f"{prefix}.ln_self")
        out.update(self.self_attn.named_params(f"{prefix}.self_attn"))
        out.update(self.ln_cross.named_params(f"{prefix}.ln_cross"))
        out.update(self.cross_attn.named_params(f"{prefix}.cross_attn"))
        out.update(self.ln_ffn.named_params(f"{prefix}.ln_ffn"))
        out.update(self.ffn.named_params(f"{prefix}"))
        return out


def _causal_mask(length: int) -> Tensor:
    mask = np.triu(np.full((length, length), -1e9), k=1)
    return Tensor(mask)


class Seq2SeqModel:
    """Frozen-architecture transformer; parameters live in named Tensors."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.config = config
        d = config.d_model
        self.tok_embedding = Tensor(
            rng.normal(0.0, config.init_std, (config.vocab_size, d)), requires_grad=True
        )
        self.pos_embedding = Tensor(
            rng.normal(0.0, config.init_std, (config.max_seq_len, d)), requires_grad=True
        )
        self.encoder = [
            EncoderLayer(config, i + 1, rng) for i in range(config.encoder_layers)
        ]
        self.decoder = [
            DecoderLayer(config, i + 1, rng) for i in range(config.decoder_layers)
        ]
        self.ln_enc_out = LayerNorm(d)
        self.ln_dec_out = LayerNorm(d)
        self.w_out = Tensor(
            rng.normal(0.0, config.init_std, (d, config.vocab_size)), requires_grad=True
        )
        self.b_out = Tensor(np.zeros(config.vocab_size), requires_grad=True)

    # -- parameters ---------------------------------------------------------

    def named_params(self) -> dict[str, Tensor]:
        out = {
            "tok_embedding": self.tok_embedding,
            "pos_embedding": self.pos_embedding,
            "w_out": self.w_out,
            "b_out": self.b_out,
        }
        out.update(self.ln_enc_out.named_params("ln_enc_out"))
        out.update(self.ln_dec_out.named_params("ln_dec_out"))
        for i, layer in enumerate(self.encoder):
            out.update(layer.named_params(f"encoder.{i + 1}"))
        for i, layer in enumerate(self.decoder):
            out.update(layer.named_params(f"decoder.{i + 1}"))
        return out

    def load_state(self, params: dict[str, Tensor]) -> None:
        own = self.named_params()
        missing = set(own) - set(params)
        extra = set(params) - set(own)
        if missing or extra:
            raise ValueError(
                f"parameter name mismatch: missing={sorted(missing)[:4]}, "
                f"unexpected={sorted(extra)[:4]}"
            )
        for name, tensor in own.items():
            if tensor.shape != params[name].shape:
                raise ValueError(
                    f"shape mismatch for {name}: {tensor.shape} vs {params[name].shape}"
                )
            tensor.data[...] = params[name].data

    def moe_layer_names(self) -> list[str]:
        names = []
        for i, layer in enumerate(self.encoder):
            if layer.ffn.kind != "dense":
                names.append(f"encoder.{i + 1}")
        for i, layer in enumerate(self.decoder):
            if layer.ffn.kind != "dense":
                names.append(f"decoder.{i + 1}")
        return names

    # -- forward ------------------------------------------------------------

    def _embed(self, ids: np.ndarray) -> Tensor:
        length = ids.shape[1]
        if length > self.config.max_seq_len:
            raise ValueError(
                f"sequence length {length} exceeds max_seq_len {self.config.max_seq_len}"
            )
        tok = nd.embedding_lookup(self.tok_embedding, ids)
        pos = nd.embedding_lookup(self.pos_embedding, np.arange(length))
        return nd.add(tok, pos)

    def _dropout(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        p = self.config.dropout
        if not ctx.training or p == 0.0:
            return x
        keep = (ctx.rng.random(x.shape) >= p) / (1.0 - p)
        return nd.mul(x, Tensor(keep))

    def _ffn_block(self, x: Tensor, layer, name: str, ctx: ForwardContext) -> Tensor:
        b, length, d = x.shape
        h = nd.reshape(layer.ln_ffn(x), (b * length, d))
        y = nd.reshape(layer.ffn(h, name, ctx), (b, length, d))
        return nd.add(x, self._dropout(y, ctx))

    def encode(self, src: np.ndarray, ctx: ForwardContext) -> Tensor:
        x = self._dropout(self._embed(src), ctx)
        for i, layer in enumerate(self.encoder):
            attn_out = layer.attn(layer.ln_attn(x), layer.ln_attn(x), None)
            x = nd.add(x, self._dropout(attn_out, ctx))
            x = self._ffn_block(x, layer, f"encoder.{i + 1}", ctx)
        return self.ln_enc_out(x)

    def decode(self, tgt_in: np.ndarray, memory: Tensor, ctx: ForwardContext) -> Tensor:
        x = self._dropout(self._embed(tgt_in), ctx)
        mask = _causal_mask(tgt_in.shape[1])
        for i, layer in enumerate(self.decoder):
            normed = layer.ln_self(x)
            x = nd.add(x, self._dropout(layer.self_attn(normed, normed, mask), ctx))
            cross = layer.cross_attn(layer.ln_cross(x), memory, None)
            x = nd.add(x, self._dropout(cross, ctx))
            x = self._ffn_block(x, layer, f"decoder.{i + 1}", ctx)
        return self.ln_dec_out(x)

    def forward_teacher_forced(
        self,
        batch: Batch,
        training: bool = False,
        rng: np.random.Generator | None = None,
        routing: str = "topk",
        routing_rng: np.random.Generator | None = None,
    ) -> tuple[Tensor, ForwardContext]:
        """Logits [B, Lt-1, V] for next-token prediction, plus the context.

        The decoder consumes the true target prefix (causally masked) and
        predicts the next target token at every position.
        """
        v = self.config.vocab_size
        for name, ids in (("src", batch.src), ("tgt", batch.tgt)):
            if ids.min() < 0 or ids.max() >= v:
                raise ValueError(
                    f"{name} token id out of range [0, {v}): max={ids.max()}"
                )
        ctx = ForwardContext(
            training=training, rng=rng, routing=routing, routing_rng=routing_rng
        )
        memory = self.encode(batch.src, ctx)
        dec_out = self.decode(batch.tgt[:, :-1], memory, ctx)
        logits = nd.add(nd.matmul(dec_out, self.w_out), self.b_out)
        return logits, ctx


def build_model(config: ModelConfig, seed_or_rng) -> Seq2SeqModel:
    """Construct and initialize a model from a config and a seed or RNG."""
    rng = (
        seed_or_rng
        if isinstance(seed_or_rng, np.random.Generator)
        else np.random.default_rng(seed_or_rng)
    )
    return Seq2SeqModel(config, rng)


def forward_teacher_forced(
    model: Seq2SeqModel, batch: Batch, **kwargs
) -> tuple[Tensor, list[tuple[str, RoutingDecision]]]:
    """Spec-level wrapper returning logits plus per-layer routing decisions."""
    logits, ctx = model.forward_teacher_forced(batch, **kwargs)
    return logits, ctx.decisions


def _mean_losses(losses: list[Tensor]) -> Tensor | None:
    if not losses:
        return None
    total = losses[0]
    for term in losses[1:]:
        total = nd.add(total, term)
    return nd.mul_scalar(total, 1.0 / len(losses))


def step_loss(
    model: Seq2SeqModel,
    batch: Batch,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, dict]:
    """Assemble the training loss: L_MT + lambda_moe * L_MoE [+ lambda_cmr * L_CMR].

    Auxiliary terms are averaged across MoE sublayers (and CMR gates) so the
    weighting is invariant to layer count. Returns the scalar loss and a
    dict of float diagnostics.
    """
    from .cmr import total_loss

    config = model.config
    logits, ctx = model.forward_teacher_forced(batch, training=True, rng=rng)
    b, l_out, v = logits.shape
    labels = batch.tgt[:, 1:].reshape(-1)
    l_mt = label_smoothed_cross_entropy(
        nd.reshape(logits, (b * l_out, v)), labels, config.label_smoothing
    )
    l_moe = _mean_losses(ctx.balance_losses)
    l_cmr = _mean_losses(ctx.budget_losses)
    lambda_cmr = config.cmr.lambda_cmr if config.cmr is not None else 0.0
    loss = total_loss(l_mt, l_moe, l_cmr, config.gate.lambda_moe, lambda_cmr)
    parts = {
        "l_mt": l_mt.item(),
        "l_moe": l_moe.item() if l_moe is not None else None,
        "l_cmr": l_cmr.item() if l_cmr is not None else None,
        "mean_gate": (
            float(np.mean([s.gates.data.mean() for _, s in ctx.gate_states]))
            if ctx.gate_states
            else None
        ),
    }
    return loss, parts
