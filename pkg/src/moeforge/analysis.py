"""Post-hoc routing analyses over a frozen model.

All statistics come from teacher-forced passes in evaluation mode (no
masking, unbounded capacity): per-layer expert-usage histograms, the E50%
coverage statistic, cross-layer co-location correlation, cosine similarity
of usage profiles between task groups, and a random-routing probe that
measures expert specialization by the perplexity cost of ignoring the
learned gate.

Encoder layers count source-side tokens; decoder layers count target-side
tokens. Histograms always use top-1 assignments; usage matrices default to
binary top-1 indicators with "topk" (binary membership) and "gate"
(probability-weighted) variants available.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .corpus import Corpus
from .model import Seq2SeqModel
from .trainer import _task_nll, evaluate

__all__ = [
    "ExpertUsage",
    "UsageReport",
    "collect_usage",
    "aggregate_usage",
    "e50",
    "colocation",
    "similarity_matrix",
    "random_routing_eval",
]

USAGE_MODES = ("top1", "topk", "gate")


@dataclass
class ExpertUsage:
    """Top-1 token counts over experts for one (layer, group)."""

    layer: str
    group: str
    counts: np.ndarray  # [E] ints
    total_tokens: int

    @property
    def fractions(self) -> np.ndarray:
        return self.counts / self.total_tokens

    def __post_init__(self):
        if self.counts.sum() != self.total_tokens:
            raise ValueError(
                f"histogram sums to {self.counts.sum()}, expected {self.total_tokens}"
            )


@dataclass
class UsageReport:
    """Usage statistics for every MoE layer across the requested tasks."""

    usages: list[ExpertUsage] = field(default_factory=list)
    # layer -> [T, E] usage-indicator matrix; token order is task order then
    # example order, so matrices of same-side layers are row-aligned.
    matrices: dict[str, np.ndarray] = field(default_factory=dict)
    layer_names: list[str] = field(default_factory=list)
    notice: str | None = None

    @property
    def empty(self) -> bool:
        return not self.usages

    def usage_for(self, layer: str, group: str) -> ExpertUsage:
        for u in self.usages:
            if u.layer == layer and u.group == group:
                return u
        raise KeyError(f"no usage for layer={layer!r} group={group!r}")

    def consecutive_same_side_pairs(self) -> list[tuple[str, str]]:
        pairs = []
        for side in ("encoder", "decoder"):
            layers = [n for n in self.layer_names if n.startswith(side)]
            pairs.extend(zip(layers, layers[1:]))
        return pairs


def _usage_rows(decision, mode: str) -> np.ndarray:
    t = decision.num_tokens
    e = decision.probs.shape[1]
    out = np.zeros((t, e))
    if mode == "top1":
        out[np.arange(t), decision.top1_expert] = 1.0
    elif mode == "topk":
        np.put_along_axis(out, decision.expert_index, 1.0, axis=1)
    elif mode == "gate":
        np.put_along_axis(out, decision.expert_index, decision.gate_weight, axis=1)
    else:
        raise ValueError(f"unknown usage mode {mode!r}; expected one of {USAGE_MODES}")
    return out


def collect_usage(
    model: Seq2SeqModel,
    corpus: Corpus,
    tasks,
    mode: str = "top1",
) -> UsageReport:
    """Teacher-forced usage statistics on the validation split.

    Returns an empty report with a notice for dense models. Histogram
    totals reconcile exactly with the number of source (encoder) or target
    (decoder) tokens in the validation slice.
    """
    if mode not in USAGE_MODES:
        raise ValueError(f"unknown usage mode {mode!r}; expected one of {USAGE_MODES}")
    tasks = list(tasks)
    layer_names = model.moe_layer_names()
    if not layer_names:
        return UsageReport(notice="dense model: no MoE layers to analyze")
    num_experts = model.config.gate.num_experts

    per_task_counts: dict[tuple[str, str], np.ndarray] = {
        (layer, task): np.zeros(num_experts, dtype=np.int64)
        for layer in layer_names
        for task in tasks
    }
    rows_by_layer: dict[str, list[np.ndarray]] = {layer: [] for layer in layer_names}

    for task in tasks:
        def on_context(batch, ctx, task=task):
            for layer, decision in ctx.decisions:
                per_task_counts[(layer, task)] += np.bincount(
                    decision.top1_expert, minlength=num_experts
                )
                rows_by_layer[layer].append(_usage_rows(decision, mode))

        _task_nll(model, corpus, task, "valid", on_context=on_context)

    usages = [
        ExpertUsage(
            layer=layer,
            group=task,
            counts=per_task_counts[(layer, task)],
            total_tokens=int(per_task_counts[(layer, task)].sum()),
        )
        for layer in layer_names
        for task in tasks
    ]
    matrices = {
        layer: np.concatenate(rows, axis=0) for layer, rows in rows_by_layer.items()
    }
    return UsageReport(usages=usages, matrices=matrices, layer_names=layer_names)


def aggregate_usage(report: UsageReport, task_to_group: dict[str, str]) -> UsageReport:
    """Sum per-task histograms into coarser groups (e.g. resource classes)."""
    grouped: dict[tuple[str, str], np.ndarray] = {}
    for u in report.usages:
        key = (u.layer, task_to_group[u.group])
        grouped[key] = grouped.get(key, 0) + u.counts
    usages = [
        ExpertUsage(layer=layer, group=group, counts=counts,
                    total_tokens=int(counts.sum()))
        for (layer, group), counts in grouped.items()
    ]
    return UsageReport(
        usages=usages, matrices=report.matrices, layer_names=report.layer_names
    )


def e50(usage) -> int:
    """Smallest number of experts covering at least half the tokens.

    Accepts an ExpertUsage or a raw histogram/fraction vector.
    """
    values = usage.fractions if isinstance(usage, ExpertUsage) else np.asarray(usage, dtype=float)
    if values.size == 0 or values.sum() <= 0:
        raise ValueError("empty usage histogram")
    fractions = values / values.sum()
    ordered = np.sort(fractions)[::-1]
    covered = np.cumsum(ordered)
    return int(np.searchsorted(covered, 0.5 - 1e-12) + 1)


def colocation(u_layer: np.ndarray, u_next: np.ndarray) -> float:
    """max_{i,j} Pearson correlation over tokens of expert-usage columns.

    Columns with zero variance (never- or always-used experts) are skipped;
    returns NaN if no valid pair remains.
    """
    if u_layer.shape[0] != u_next.shape[0]:
        raise ValueError(
            f"token counts differ: {u_layer.shape[0]} vs {u_next.shape[0]}"
        )
    t = u_layer.shape[0]
    if t < 2:
        raise ValueError(f"need at least 2 tokens, got {t}")

    def standardize(m):
        centered = m - m.mean(axis=0, keepdims=True)
        std = m.std(axis=0, keepdims=True)
        valid = std[0] > 0
        z = np.zeros_like(centered)
        z[:, valid] = centered[:, valid] / std[:, valid]
        return z, valid

    za, va = standardize(np.asarray(u_layer, dtype=float))
    zb, vb = standardize(np.asarray(u_next, dtype=float))
    if not va.any() or not vb.any():
        return float("nan")
    corr = (za.T @ zb) / t
    return float(corr[np.ix_(va, vb)].max())


def similarity_matrix(
    usage_by_group: dict[str, np.ndarray]
) -> tuple[list[str], np.ndarray]:
    """Cosine similarity between usage-fraction vectors of >= 2 groups.

    Pairs involving an all-zero vector are undefined and reported as NaN;
    the diagonal is exactly 1 for nonzero groups.
    """
    labels = list(usage_by_group)
    if len(labels) < 2:
        raise ValueError("need at least two groups")
    vectors = [np.asarray(usage_by_group[g], dtype=float) for g in labels]
    n = len(labels)
    out = np.ones((n, n))
    for i in range(n):
        for j in range(i, n):
            ni, nj = np.linalg.norm(vectors[i]), np.linalg.norm(vectors[j])
            if ni == 0.0 or nj == 0.0:
                value = float("nan")
            elif i == j:
                value = 1.0
            else:
                value = float(vectors[i] @ vectors[j] / (ni * nj))
            out[i, j] = out[j, i] = value
    return labels, out


def random_routing_eval(
    model: Seq2SeqModel,
    corpus: Corpus,
    tasks,
    num_seeds: int = 2,
    base_seed: int = 0,
) -> dict[str, dict[str, float]]:
    """Per-task perplexity with k experts chosen uniformly at random.

    Combination weights are the gate probabilities of the randomly chosen
    experts. Each model is evaluated `num_seeds` times with different seeds
    and the perplexities averaged; degradation is reported as the relative
    change against standard top-k evaluation.
    """
    tasks = list(tasks)
    if not model.moe_layer_names():
        raise ValueError("random routing probe requires an MoE model")
    standard = evaluate(model, corpus, tasks)
    out: dict[str, dict[str, float]] = {}
    for task in tasks:
        ppls = []
        for s in range(num_seeds):
            rng = np.random.default_rng(base_seed + s)
            total, count = _task_nll(
                model, corpus, task, "valid", routing="random", routing_rng=rng
            )
            ppls.append(float(np.exp(total / count)))
        random_ppl = float(np.mean(ppls))
        out[task] = {
            "standard_ppl": standard[task],
            "random_ppl": random_ppl,
            "relative_change": (random_ppl - standard[task]) / standard[task],
        }
    return out


# -- CSV renderers (plot-ready, consumed by the CLI) -------------------------


def usage_csv(report: UsageReport) -> str:
    lines = ["layer,group,expert,count"]
    for u in report.usages:
        for expert, count in enumerate(u.counts):
            lines.append(f"{u.layer},{u.group},{expert},{int(count)}")
    return "\n".join(lines) + "\n"


def e50_csv(report: UsageReport) -> str:
    lines = ["layer,group,e50"]
    for u in report.usages:
        lines.append(f"{u.layer},{u.group},{e50(u)}")
    return "\n".join(lines) + "\n"


def colocation_csv(report: UsageReport) -> str:
    lines = ["layer_a,layer_b,value"]
    for a, b in report.consecutive_same_side_pairs():
        value = colocation(report.matrices[a], report.matrices[b])
        lines.append(f"{a},{b},{value!r}")
    return "\n".join(lines) + "\n"


def similarity_csv(report: UsageReport, layer: str | None = None) -> str:
    lines = ["layer,group_a,group_b,value"]
    for layer_name in report.layer_names if layer is None else [layer]:
        by_group = {
            u.group: u.fractions for u in report.usages if u.layer == layer_name
        }
        if len(by_group) < 2:
            continue
        labels, matrix = similarity_matrix(by_group)
        for i, a in enumerate(labels):
            for j, b in enumerate(labels):
                lines.append(f"{layer_name},{a},{b},{matrix[i, j]!r}")
    return "\n".join(lines) + "\n"


def random_routing_csv(results: dict[str, dict[str, float]]) -> str:
    lines = ["task,standard_ppl,random_ppl,relative_change"]
    for task, row in results.items():
        lines.append(
            f"{task},{row['standard_ppl']!r},{row['random_ppl']!r},"
            f"{row['relative_change']!r}"
        )
    return "\n".join(lines) + "\n"
