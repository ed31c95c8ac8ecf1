"""Routing analyses on a trained MoE: usage, E50%, co-location, the probe.

Trains a small MoE with one MoE sublayer per stack, then inspects what the
router learned: per-task expert-usage histograms, how many experts cover
half of each task's tokens (E50%), cosine similarity between tasks' usage
profiles, and the perplexity cost of replacing learned routing with random
expert choices (a specialization probe). Budget: a couple of minutes.
"""

from moeforge.analysis import (
    collect_usage,
    colocation,
    e50,
    random_routing_eval,
    similarity_matrix,
)
from moeforge.corpus import generate_corpus
from moeforge.model import ModelConfig
from moeforge.routing import GateConfig
from moeforge.trainer import TrainConfig, train

corpus = generate_corpus(
    num_tasks=4,
    size_profile=[8_000, 8_000, 8_000, 8_000],
    vocab_size=64,
    seed=1,
    val_size=128,
    seq_len=8,
)

config = TrainConfig(
    model=ModelConfig(
        vocab_size=corpus.vocab_size,
        d_model=32,
        ffn_dim=128,
        heads=2,
        encoder_layers=4,
        decoder_layers=4,
        moe_mode="moe",
        gate=GateConfig(num_experts=8),
        max_seq_len=16,
    ),
    total_updates=2000,
    batch_tokens=504,
    warmup_updates=200,
    peak_lr=0.003,
    validation_interval=1000,
    seed=1,
    eval_examples=128,
)
print("training a 4+4-layer MoE (two MoE sublayers per stack) ...")
model, log = train(config, corpus)
print("final val ppl:", {t: round(log.final_ppl(t), 2) for t in corpus.task_ids})

report = collect_usage(model, corpus, corpus.task_ids)

print("\nexpert usage fractions (top-1) per task:")
for u in report.usages:
    frac = ", ".join(f"{f:.2f}" for f in u.fractions)
    print(f"  {u.layer:<10} {u.group}: [{frac}]  E50%={e50(u)}")

print("\nco-location of consecutive MoE layers (max token-level correlation):")
for a, b in report.consecutive_same_side_pairs():
    print(f"  c({a}, {b}) = {colocation(report.matrices[a], report.matrices[b]):.3f}")

for layer in report.layer_names:
    by_group = {u.group: u.fractions for u in report.usages if u.layer == layer}
    labels, sim = similarity_matrix(by_group)
    print(f"\ncosine similarity between tasks at {layer}:")
    for row_label, row in zip(labels, sim):
        print(f"  {row_label}: " + "  ".join(f"{v:.2f}" for v in row))

print("\nrandom-routing probe (2 seeds, averaged):")
for task, row in random_routing_eval(model, corpus, corpus.task_ids).items():
    print(
        f"  {task}: top-k ppl {row['standard_ppl']:.3f} -> random "
        f"{row['random_ppl']:.3f} ({row['relative_change'] * 100:+.1f}%)"
    )
