"""Step-based curriculum learning derived from a baseline run's own log.

Pipeline mirror of the two-stage recipe: (1) train a vanilla MoE and log
per-task validation perplexity; (2) find each task's best-validation step,
partition tasks into bins spaced between the extremes, merge the early
bins; (3) retrain with low-resource bins introduced late, and compare final
low-resource validation perplexity. Budget: several minutes on CPU.
"""

import numpy as np

from moeforge.corpus import generate_corpus
from moeforge.curriculum import detect_s_best, merge_bins, partition_step_based
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


def run(plan=None, seed=0):
    config = TrainConfig(
        model=ModelConfig(
            vocab_size=corpus.vocab_size,
            d_model=32,
            ffn_dim=128,
            heads=2,
            encoder_layers=2,
            decoder_layers=2,
            moe_mode="moe",
            gate=GateConfig(num_experts=8),
            max_seq_len=16,
        ),
        total_updates=UPDATES,
        batch_tokens=504,
        warmup_updates=300,
        peak_lr=0.003,
        validation_interval=UPDATES // 10,
        seed=seed,
        sampling_temperature=4.0,
        eval_examples=128,
        plan=plan,
    )
    return train(config, corpus)


print("stage 1: baseline MoE (no curriculum) ...")
_, baseline_log = run()

s_best = {}
for task in corpus.task_ids:
    from moeforge.curriculum import ValidationHistory

    history = ValidationHistory(baseline_log.series(task, "valid"))
    s_best[task] = detect_s_best(history)
print("best-validation steps:", s_best)

plan = partition_step_based(corpus.task_ids, s_best, n=4, total_updates=UPDATES)
plan = merge_bins(plan, [1, 2])
print("plan bins:", plan.bins, "at characteristic steps", plan.steps)

print("stage 2: retraining with the curriculum ...")
_, cl_log = run(plan=plan)

tiny = [t for t in corpus.task_ids if corpus.tasks[t].train_size <= 250]
base = np.mean([baseline_log.final_ppl(t) for t in tiny])
curr = np.mean([cl_log.final_ppl(t) for t in tiny])
print(f"\nlow-resource final val ppl: baseline {base:.3f} vs curriculum {curr:.3f}")
print("curriculum helps" if curr < base else "no win at this tiny scale")
