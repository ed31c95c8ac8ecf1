"""MoE regularizers side by side: EOM, FOM, gating dropout, and CMR.

Repeats the overfitting setup of demo 01 with each regularization strategy
applied to the same MoE backbone, then compares the low-resource
validation-minus-train perplexity gap and the high-resource validation
perplexity. Expect the masking strategies to shrink the gap at little or
no cost to the data-rich tasks. Budget: several minutes on CPU.
"""

import numpy as np

from moeforge.cmr import CmrConfig
from moeforge.corpus import generate_corpus
from moeforge.model import ModelConfig
from moeforge.routing import GateConfig
from moeforge.trainer import TrainConfig, train

UPDATES = 3000

corpus = generate_corpus(
    num_tasks=4,
    size_profile=[20_000, 20_000, 250, 250],
    vocab_size=96,
    seed=0,
    val_size=128,
    seq_len=8,
)

VARIANTS = {
    "moe": (GateConfig(num_experts=8), None),
    "moe+eom": (GateConfig(num_experts=8, p_eom=0.2), None),
    "moe+fom": (GateConfig(num_experts=8, p_fom=0.2), None),
    "moe+gd": (GateConfig(num_experts=8, p_gd=0.2, num_virtual_devices=4), None),
    "cmr_top1": (GateConfig(num_experts=8), CmrConfig(budget=0.6, p_cmr=0.1, k=1)),
}


def run(mode, gate, cmr):
    config = TrainConfig(
        model=ModelConfig(
            vocab_size=corpus.vocab_size,
            d_model=32,
            ffn_dim=128,
            heads=2,
            encoder_layers=2,
            decoder_layers=2,
            moe_mode=mode,
            gate=gate,
            cmr=cmr,
            max_seq_len=16,
        ),
        total_updates=UPDATES,
        batch_tokens=504,
        warmup_updates=300,
        peak_lr=0.003,
        validation_interval=UPDATES // 2,
        seed=0,
        sampling_temperature=4.0,
        eval_examples=128,
    )
    print(f"training {mode} ...")
    _, log = train(config, corpus)
    return log


big = ["task0", "task1"]
tiny = ["task2", "task3"]

print(f"{'variant':<10}{'tiny gap':>10}{'tiny val':>10}{'big val':>10}")
baseline_gap = None
for mode, (gate, cmr) in VARIANTS.items():
    log = run(mode, gate, cmr)
    tiny_gap = float(np.mean([log.final_gap(t) for t in tiny]))
    tiny_val = float(np.mean([log.final_ppl(t) for t in tiny]))
    big_val = float(np.mean([log.final_ppl(t) for t in big]))
    marker = ""
    if mode == "moe":
        baseline_gap = tiny_gap
    elif baseline_gap:
        marker = f"  ({(tiny_gap / baseline_gap - 1) * 100:+.0f}% gap vs vanilla)"
    print(f"{mode:<10}{tiny_gap:>10.3f}{tiny_val:>10.3f}{big_val:>10.3f}{marker}")
