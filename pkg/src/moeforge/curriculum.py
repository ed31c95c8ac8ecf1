"""Curriculum planning for imbalanced multitask training.

A plan partitions tasks into bins b_1..b_n with characteristic steps
k_1..k_n; bin b_i joins training at update U - k_i (inclusive), so k_1 = U
means b_1 trains from step 0. Two partitioning strategies are provided:

- count-based: thresholds on per-task training example counts;
- step-based: bins spaced evenly between the latest and earliest per-task
  best-validation steps, each task joining the bin whose characteristic
  step is closest to its own best step.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "TaskSpec",
    "ValidationHistory",
    "CurriculumPlan",
    "classify_resource",
    "detect_s_best",
    "partition_step_based",
    "partition_count_based",
    "merge_bins",
    "active_tasks",
    "histories_from_trainlog_csv",
]

# Resource-level thresholds on training example counts (bitext samples).
LOW_RESOURCE_THRESHOLD = 1_000_000
VERY_LOW_RESOURCE_THRESHOLD = 100_000

# Default count-based bin boundaries and characteristic steps.
COUNT_THRESHOLDS = (5e6, 8e5)
COUNT_STEPS = (100_000, 40_000, 20_000)


def classify_resource(
    train_count: int,
    low_threshold: int = LOW_RESOURCE_THRESHOLD,
    very_low_threshold: int = VERY_LOW_RESOURCE_THRESHOLD,
) -> str:
    if train_count < very_low_threshold:
        return "very_low"
    if train_count < low_threshold:
        return "low"
    return "high"


@dataclass(frozen=True)
class TaskSpec:
    """A task's identity and size class for curriculum purposes."""

    task_id: str
    direction: str
    train_count: int
    resource_class: str = ""

    def __post_init__(self):
        if not self.resource_class:
            object.__setattr__(
                self, "resource_class", classify_resource(self.train_count)
            )


class ValidationHistory:
    """Ordered (step, validation perplexity) samples for one task."""

    def __init__(self, samples=()):
        self.samples: list[tuple[int, float]] = []
        for step, ppl in samples:
            self.add(step, ppl)

    def add(self, step: int, ppl: float) -> None:
        if self.samples and step <= self.samples[-1][0]:
            raise ValueError(
                f"steps must be strictly increasing: {step} after {self.samples[-1][0]}"
            )
        self.samples.append((int(step), float(ppl)))

    def __len__(self) -> int:
        return len(self.samples)


@dataclass
class CurriculumPlan:
    """Disjoint task bins with characteristic steps over U total updates."""

    bins: list[list[str]]
    steps: list[int]  # k_i; bin i activates at U - k_i
    total_updates: int

    def __post_init__(self):
        if len(self.bins) != len(self.steps):
            raise ValueError("bins and steps must have equal length")
        flat = [t for b in self.bins for t in b]
        if len(flat) != len(set(flat)):
            raise ValueError("bins must be disjoint")
        for k in self.steps:
            if not 0 <= k <= self.total_updates:
                raise ValueError(
                    f"characteristic step {k} outside [0, U={self.total_updates}]"
                )

    @property
    def all_tasks(self) -> set[str]:
        return {t for b in self.bins for t in b}

    def introduction_step(self, bin_index: int) -> int:
        return self.total_updates - self.steps[bin_index]

    def to_json(self) -> str:
        payload = {
            "total_updates": self.total_updates,
            "bins": [
                {"k": int(k), "tasks": sorted(tasks)}
                for k, tasks in zip(self.steps, self.bins)
            ],
        }
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def from_json(cls, text: str) -> "CurriculumPlan":
        payload = json.loads(text)
        return cls(
            bins=[list(b["tasks"]) for b in payload["bins"]],
            steps=[int(b["k"]) for b in payload["bins"]],
            total_updates=int(payload["total_updates"]),
        )

    @classmethod
    def load(cls, path) -> "CurriculumPlan":
        return cls.from_json(Path(path).read_text())


def detect_s_best(history: ValidationHistory) -> int:
    """Step of the minimal validation perplexity; ties resolve to the latest."""
    if len(history) == 0:
        raise ValueError("validation history is empty")
    best_step, best_ppl = history.samples[0]
    for step, ppl in history.samples[1:]:
        if ppl <= best_ppl:
            best_step, best_ppl = step, ppl
    return best_step


def partition_step_based(
    tasks: list[str],
    s_best: dict[str, int],
    n: int,
    total_updates: int,
) -> CurriculumPlan:
    """Evenly spaced bins between the extreme best-validation steps.

    k_i = s_max - (i - 1) * (s_max - s_min) / (n - 1); each task joins the
    bin minimizing |s_best(t) - k_i|, ties resolving to the lower index.
    """
    if n < 2:
        raise ValueError(f"step-based partitioning needs n >= 2 bins, got {n}")
    missing = [t for t in tasks if t not in s_best]
    if missing:
        raise ValueError(f"missing s_best for tasks: {missing}")
    values = [s_best[t] for t in tasks]
    s_max, s_min = max(values), min(values)
    if s_max == s_min:
        raise ValueError(
            "all tasks share the same best step; use a single always-active bin "
            "instead of a step-based partition"
        )
    delta = (s_max - s_min) / (n - 1)
    ks = [s_max - i * delta for i in range(n)]
    bins: list[list[str]] = [[] for _ in range(n)]
    for t in tasks:
        distances = [abs(s_best[t] - k) for k in ks]
        bins[int(np.argmin(distances))].append(t)
    return CurriculumPlan(
        bins=bins, steps=[int(round(k)) for k in ks], total_updates=total_updates
    )


def partition_count_based(
    tasks: dict[str, int],
    thresholds=COUNT_THRESHOLDS,
    steps=COUNT_STEPS,
    total_updates: int | None = None,
) -> CurriculumPlan:
    """Bin tasks by training example count against descending thresholds.

    With the defaults, bin 1 takes counts >= 5e6, bin 2 counts in
    [8e5, 5e6), bin 3 the rest, at characteristic steps (100k, 40k, 20k).
    """
    thresholds = list(thresholds)
    if any(a <= b for a, b in zip(thresholds, thresholds[1:])):
        raise ValueError(f"thresholds must be strictly decreasing: {thresholds}")
    if len(steps) != len(thresholds) + 1:
        raise ValueError(
            f"{len(thresholds)} thresholds require {len(thresholds) + 1} steps, "
            f"got {len(steps)}"
        )
    bins: list[list[str]] = [[] for _ in steps]
    for task_id, count in tasks.items():
        for i, bound in enumerate(thresholds):
            if count >= bound:
                bins[i].append(task_id)
                break
        else:
            bins[-1].append(task_id)
    return CurriculumPlan(
        bins=bins,
        steps=[int(k) for k in steps],
        total_updates=int(total_updates if total_updates is not None else steps[0]),
    )


def merge_bins(plan: CurriculumPlan, indices) -> CurriculumPlan:
    """Merge a prefix of bins (1-based indices, contiguous from 1).

    The merged bin keeps the characteristic step of its earliest
    constituent, i.e. the largest k.
    """
    indices = sorted(indices)
    if indices != list(range(1, len(indices) + 1)):
        raise ValueError(
            f"merge indices must be contiguous from 1, got {indices}"
        )
    m = len(indices)
    if m <= 1:
        return CurriculumPlan(
            bins=[list(b) for b in plan.bins],
            steps=list(plan.steps),
            total_updates=plan.total_updates,
        )
    merged = [t for b in plan.bins[:m] for t in b]
    return CurriculumPlan(
        bins=[merged] + [list(b) for b in plan.bins[m:]],
        steps=[plan.steps[0]] + list(plan.steps[m:]),
        total_updates=plan.total_updates,
    )


def active_tasks(plan: CurriculumPlan, step: int) -> set[str]:
    """Union of bins already introduced at `step` (introduction inclusive)."""
    if not 0 <= step <= plan.total_updates:
        raise ValueError(f"step {step} outside [0, U={plan.total_updates}]")
    out: set[str] = set()
    for tasks, k in zip(plan.bins, plan.steps):
        if plan.total_updates - k <= step:
            out.update(tasks)
    return out


def histories_from_trainlog_csv(path) -> dict[str, ValidationHistory]:
    """Parse a trainer CSV log into per-task validation histories."""
    import csv

    histories: dict[str, ValidationHistory] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            if row["split"] != "valid":
                continue
            histories.setdefault(row["task"], ValidationHistory()).add(
                int(row["step"]), float(row["ppl"])
            )
    return histories
