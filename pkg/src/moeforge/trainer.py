"""Training loop: curriculum-aware batching, optimization, logging, eval.

Evaluation is always teacher-forced with every stochastic path disabled:
no dropout, no EOM/FOM/gating-dropout masks, no CMR gate forcing, and
unbounded expert capacity, so repeated evaluation of a frozen model is
bitwise reproducible. Perplexity is exp(mean token NLL) without label
smoothing, making values comparable across model configurations.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ndcore as nd
from .ndcore import (
    AdamState,
    adam_step,
    backward,
    label_smoothed_cross_entropy,
    lr_schedule,
    no_grad,
    save_checkpoint,
)
from .corpus import Corpus, batch_for_examples, sample_batch
from .curriculum import CurriculumPlan, active_tasks
from .model import ModelConfig, Seq2SeqModel, build_model, step_loss

__all__ = [
    "TrainConfig",
    "TrainLog",
    "LogRow",
    "NumericalAbort",
    "train",
    "evaluate",
    "evaluate_split",
    "config_hash",
]

GATE_HIST_BINS = 20


class NumericalAbort(RuntimeError):
    """Raised when the training loss stops being finite."""

    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass
class TrainConfig:
    """Run settings around a ModelConfig.

    `batch_tokens` counts source plus target tokens per update. Desk-scale
    defaults are 20k updates at 4096 tokens per batch.
    """

    model: ModelConfig
    total_updates: int = 20_000
    batch_tokens: int = 4096
    warmup_updates: int = 400
    peak_lr: float = 0.004
    validation_interval: int = 1000
    seed: int = 0
    sampling_temperature: float = 1.0
    eval_examples: int = 256
    plan: CurriculumPlan | None = None
    out_dir: str | None = None

    def __post_init__(self):
        if self.total_updates < 0:
            raise ValueError("total_updates must be non-negative")
        if self.validation_interval < 1:
            raise ValueError("validation_interval must be positive")
        if self.total_updates % self.validation_interval != 0:
            raise ValueError(
                f"validation_interval {self.validation_interval} must divide "
                f"total_updates {self.total_updates}"
            )

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out.pop("out_dir")
        out["plan"] = (
            None
            if self.plan is None
            else json.loads(self.plan.to_json())
        )
        return out


def config_hash(config: TrainConfig) -> str:
    payload = json.dumps(config.to_dict(), sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


@dataclass
class LogRow:
    step: int
    task: str
    split: str  # "train" | "valid"
    ppl: float
    l_mt: float
    l_moe: float | None
    l_cmr: float | None
    mean_gate: float | None
    lr: float


CSV_HEADER = "step,task,split,ppl,l_mt,l_moe,l_cmr,mean_gate,lr"


def _fmt(value) -> str:
    return "" if value is None else repr(value)


@dataclass
class TrainLog:
    """Append-only validation log, one row per (step, task, split)."""

    rows: list[LogRow] = field(default_factory=list)
    gate_hist_rows: list[tuple[int, int, float, float, int]] = field(
        default_factory=list
    )

    def add(self, row: LogRow) -> None:
        self.rows.append(row)

    def series(self, task: str, split: str) -> list[tuple[int, float]]:
        return [(r.step, r.ppl) for r in self.rows if r.task == task and r.split == split]

    def final_ppl(self, task: str, split: str = "valid") -> float:
        series = self.series(task, split)
        if not series:
            raise KeyError(f"no {split} rows for task {task}")
        return series[-1][1]

    def final_gap(self, task: str) -> float:
        """Overfitting gap at the last validation point: val - train ppl."""
        return self.final_ppl(task, "valid") - self.final_ppl(task, "train")

    def to_csv(self, path) -> None:
        lines = [CSV_HEADER]
        for r in self.rows:
            lines.append(
                ",".join(
                    [
                        str(r.step),
                        r.task,
                        r.split,
                        _fmt(r.ppl),
                        _fmt(r.l_mt),
                        _fmt(r.l_moe),
                        _fmt(r.l_cmr),
                        _fmt(r.mean_gate),
                        _fmt(r.lr),
                    ]
                )
            )
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def from_csv(cls, path) -> "TrainLog":
        import csv

        log = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                log.add(
                    LogRow(
                        step=int(row["step"]),
                        task=row["task"],
                        split=row["split"],
                        ppl=float(row["ppl"]),
                        l_mt=float(row["l_mt"]) if row["l_mt"] else 0.0,
                        l_moe=float(row["l_moe"]) if row["l_moe"] else None,
                        l_cmr=float(row["l_cmr"]) if row["l_cmr"] else None,
                        mean_gate=float(row["mean_gate"]) if row["mean_gate"] else None,
                        lr=float(row["lr"]),
                    )
                )
        return log

    def gate_hist_csv(self) -> str:
        lines = ["step,bin,lo,hi,count"]
        for step, b, lo, hi, count in self.gate_hist_rows:
            lines.append(f"{step},{b},{_fmt(lo)},{_fmt(hi)},{count}")
        return "\n".join(lines) + "\n"


def _eval_threads() -> int:
    return max(1, int(os.environ.get("MOEFORGE_THREADS", "1")))


def _task_nll(
    model: Seq2SeqModel,
    corpus: Corpus,
    task_id: str,
    split: str,
    max_examples: int | None = None,
    gate_values: list | None = None,
    chunk: int = 512,
    routing: str = "topk",
    routing_rng: np.random.Generator | None = None,
    on_context=None,
) -> tuple[float, int]:
    """Total token NLL (no smoothing) and token count for one task split."""
    td = corpus.data[task_id]
    src, tgt = (
        (td.train_src, td.train_tgt) if split == "train" else (td.val_src, td.val_tgt)
    )
    if max_examples is not None:
        src, tgt = src[:max_examples], tgt[:max_examples]
    total, count = 0.0, 0
    with no_grad():
        for start in range(0, src.shape[0], chunk):
            batch = batch_for_examples(
                corpus, task_id, src[start : start + chunk], tgt[start : start + chunk]
            )
            logits, ctx = model.forward_teacher_forced(
                batch, training=False, routing=routing, routing_rng=routing_rng
            )
            b, l_out, v = logits.shape
            labels = batch.tgt[:, 1:].reshape(-1)
            nll = label_smoothed_cross_entropy(
                nd.reshape(logits, (b * l_out, v)), labels, 0.0
            )
            total += nll.item() * labels.size
            count += labels.size
            if gate_values is not None:
                for _, state in ctx.gate_states:
                    gate_values.append(state.gates.data.copy())
            if on_context is not None:
                on_context(batch, ctx)
    return total, count


def evaluate_split(
    model: Seq2SeqModel,
    corpus: Corpus,
    tasks,
    split: str,
    max_examples: int | None = None,
) -> dict[str, float]:
    """Per-task perplexity exp(mean token NLL) on the given split."""
    tasks = list(tasks)
    unknown = [t for t in tasks if t not in corpus.tasks]
    if unknown:
        raise ValueError(f"unknown tasks: {unknown}")
    threads = _eval_threads()

    def one(task_id):
        total, count = _task_nll(model, corpus, task_id, split, max_examples)
        return task_id, float(np.exp(total / count))

    if threads > 1 and len(tasks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = dict(pool.map(one, tasks))
    else:
        results = dict(one(t) for t in tasks)
    return {t: results[t] for t in tasks}


def evaluate(model: Seq2SeqModel, corpus: Corpus, tasks) -> dict[str, float]:
    """Validation perplexity per task (teacher-forced, unsmoothed)."""
    return evaluate_split(model, corpus, tasks, "valid")


def _gate_histogram(step: int, gate_values: list[np.ndarray]) -> list[tuple]:
    if not gate_values:
        return []
    values = np.concatenate(gate_values)
    counts, edges = np.histogram(values, bins=GATE_HIST_BINS, range=(0.0, 1.0))
    return [
        (step, i, float(edges[i]), float(edges[i + 1]), int(counts[i]))
        for i in range(GATE_HIST_BINS)
    ]


def train(config: TrainConfig, corpus: Corpus) -> tuple[Seq2SeqModel, TrainLog]:
    """Run the full training loop; deterministic given `config.seed`.

    The curriculum plan (when present) is consulted at every step; batches
    are audited so no gradient step ever includes an inactive task. The
    model is validated (train and valid perplexity for every corpus task)
    every `validation_interval` updates, with a checkpoint written when
    `out_dir` is set. A non-finite loss aborts with a diagnostic snapshot.
    """
    plan = config.plan
    if plan is not None:
        missing = plan.all_tasks - set(corpus.task_ids)
        if missing:
            raise ValueError(f"plan references tasks missing from corpus: {sorted(missing)}")
        if plan.total_updates != config.total_updates:
            raise ValueError(
                f"plan covers {plan.total_updates} updates but config trains "
                f"{config.total_updates}"
            )
        if not active_tasks(plan, 0):
            raise ValueError("curriculum plan leaves no tasks active at step 0")
    if config.model.vocab_size != corpus.vocab_size:
        raise ValueError(
            f"model vocab {config.model.vocab_size} != corpus vocab {corpus.vocab_size}"
        )

    seeds = np.random.SeedSequence(config.seed).spawn(3)
    rng_init = np.random.default_rng(seeds[0])
    rng_sampler = np.random.default_rng(seeds[1])
    rng_masks = np.random.default_rng(seeds[2])

    model = build_model(config.model, rng_init)
    params = model.named_params()
    state = AdamState(params)
    log = TrainLog()
    chash = config_hash(config)

    out_dir = Path(config.out_dir) if config.out_dir else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "model_config.json").write_text(
            json.dumps(config.model.to_dict(), sort_keys=True, indent=2) + "\n"
        )

    all_tasks = list(corpus.task_ids)
    is_cmr = config.model.moe_mode.startswith("cmr")
    parts = {"l_mt": float("nan"), "l_moe": None, "l_cmr": None, "mean_gate": None}
    lr = 0.0

    for step in range(config.total_updates):
        if plan is not None:
            active = sorted(active_tasks(plan, step))
        else:
            active = all_tasks
        batch = sample_batch(
            corpus, active, config.batch_tokens, config.sampling_temperature, rng_sampler
        )
        batch_task_names = {corpus.task_ids[i] for i in np.unique(batch.task_ids)}
        assert batch_task_names <= set(active), (
            f"batch contains inactive tasks at step {step}: "
            f"{batch_task_names - set(active)}"
        )

        loss, parts = step_loss(model, batch, rng=rng_masks)
        if not np.isfinite(loss.item()):
            diagnostics = {
                "step": step,
                "loss": loss.item(),
                "parts": parts,
                "lr": lr,
                "batch_tasks": sorted(batch_task_names),
            }
            if out_dir is not None:
                (out_dir / "abort_diagnostics.json").write_text(
                    json.dumps(diagnostics, sort_keys=True, indent=2) + "\n"
                )
                save_checkpoint(
                    out_dir / "checkpoint_abort.bin", params, step, chash
                )
            raise NumericalAbort(f"non-finite loss at step {step}", diagnostics)

        backward(loss)
        lr = lr_schedule(step + 1, config.warmup_updates, config.peak_lr)
        adam_step(params, {name: p.grad for name, p in params.items()}, state, lr)
        for p in params.values():
            p.grad = None

        if (step + 1) % config.validation_interval == 0:
            gate_values: list | None = [] if is_cmr else None
            for task_id in all_tasks:
                t_total, t_count = _task_nll(
                    model, corpus, task_id, "train", config.eval_examples
                )
                v_total, v_count = _task_nll(
                    model, corpus, task_id, "valid", None, gate_values
                )
                common = dict(
                    l_mt=parts["l_mt"],
                    l_moe=parts["l_moe"],
                    l_cmr=parts["l_cmr"],
                    mean_gate=parts["mean_gate"],
                    lr=lr,
                )
                log.add(LogRow(step + 1, task_id, "train",
                               float(np.exp(t_total / t_count)), **common))
                log.add(LogRow(step + 1, task_id, "valid",
                               float(np.exp(v_total / v_count)), **common))
            if is_cmr:
                log.gate_hist_rows.extend(_gate_histogram(step + 1, gate_values))
            if out_dir is not None:
                save_checkpoint(
                    out_dir / f"checkpoint_{step + 1:06d}.bin", params, step + 1, chash
                )

    if out_dir is not None:
        log.to_csv(out_dir / "trainlog.csv")
        if is_cmr:
            (out_dir / "gate_histogram.csv").write_text(log.gate_hist_csv())
    return model, log
