"""Synthetic imbalanced multitask corpus of translation-like sequence tasks.

Each task applies its own token-substitution permutation (optionally with
sequence reversal) to random source sequences over a shared content
alphabet, so tasks share structure but require task-specific mappings --
the desk-scale stand-in for multilingual transfer versus interference.

Vocabulary layout: ids [0, 2N) are reserved language-prefix tokens (task i
uses 2i for its source side and 2i+1 for its target side); content symbols
occupy [2N, 2N + content_vocab_size). Stored example ids are global, so an
identity permutation without reversal is literally a copy task.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import Batch

__all__ = ["SyntheticTaskDef", "TaskData", "Corpus", "generate_corpus", "sample_batch"]


@dataclass
class SyntheticTaskDef:
    """Definition of one synthetic task (its mapping, not its examples).

    `source_range` bounds the content symbols the task's sources are drawn
    from (default: the whole alphabet). Slice-structured ranges let tasks
    mimic languages: related tasks share a source slice while their
    permutations send it to different target regions.
    """

    task_id: str
    permutation: np.ndarray  # bijection over the content alphabet
    reversal: bool
    train_size: int
    val_size: int
    src_prefix: int
    tgt_prefix: int
    source_range: tuple[int, int] = (0, 0)  # (lo, hi], local alphabet ids

    @property
    def direction(self) -> str:
        return self.task_id


@dataclass
class TaskData:
    train_src: np.ndarray  # [N, L] global content ids
    train_tgt: np.ndarray
    val_src: np.ndarray
    val_tgt: np.ndarray


@dataclass
class Corpus:
    """Immutable after generation; reproducible from its seed."""

    tasks: dict[str, SyntheticTaskDef]
    data: dict[str, TaskData]
    content_vocab_size: int
    seq_len: int
    seed: int
    generator_version: int = 1
    _order: list[str] = field(default_factory=list)

    @property
    def num_tasks(self) -> int:
        return len(self.tasks)

    @property
    def vocab_size(self) -> int:
        """Total model vocabulary: prefix tokens plus content alphabet."""
        return 2 * self.num_tasks + self.content_vocab_size

    @property
    def task_ids(self) -> list[str]:
        return list(self._order)

    def train_sizes(self) -> dict[str, int]:
        return {tid: self.tasks[tid].train_size for tid in self._order}

    # -- JSON-lines export/import ------------------------------------------

    def save_jsonl(self, path) -> None:
        path = Path(path)
        with open(path, "w") as fh:
            meta = {
                "kind": "meta",
                "generator_version": self.generator_version,
                "content_vocab_size": self.content_vocab_size,
                "seq_len": self.seq_len,
                "seed": self.seed,
                "tasks": [
                    {
                        "id": tid,
                        "permutation": self.tasks[tid].permutation.tolist(),
                        "reversal": self.tasks[tid].reversal,
                        "train_size": self.tasks[tid].train_size,
                        "val_size": self.tasks[tid].val_size,
                        "src_prefix": self.tasks[tid].src_prefix,
                        "tgt_prefix": self.tasks[tid].tgt_prefix,
                        "source_range": list(self.tasks[tid].source_range),
                    }
                    for tid in self._order
                ],
            }
            fh.write(json.dumps(meta, sort_keys=True) + "\n")
            for tid in self._order:
                td = self.data[tid]
                for split, src, tgt in (
                    ("train", td.train_src, td.train_tgt),
                    ("valid", td.val_src, td.val_tgt),
                ):
                    for s, t in zip(src, tgt):
                        fh.write(
                            json.dumps(
                                {
                                    "task": tid,
                                    "split": split,
                                    "source": s.tolist(),
                                    "target": t.tolist(),
                                },
                                sort_keys=True,
                            )
                            + "\n"
                        )

    @classmethod
    def load_jsonl(cls, path) -> "Corpus":
        path = Path(path)
        with open(path) as fh:
            meta = json.loads(fh.readline())
            if meta.get("kind") != "meta":
                raise ValueError(f"{path}: first line must be the corpus meta record")
            tasks: dict[str, SyntheticTaskDef] = {}
            order: list[str] = []
            for spec in meta["tasks"]:
                tid = spec["id"]
                order.append(tid)
                tasks[tid] = SyntheticTaskDef(
                    task_id=tid,
                    permutation=np.asarray(spec["permutation"], dtype=np.int64),
                    reversal=spec["reversal"],
                    train_size=spec["train_size"],
                    val_size=spec["val_size"],
                    src_prefix=spec["src_prefix"],
                    tgt_prefix=spec["tgt_prefix"],
                    source_range=tuple(
                        spec.get("source_range", [0, meta["content_vocab_size"]])
                    ),
                )
            rows: dict[str, dict[str, list]] = {
                tid: {"train": [], "valid": []} for tid in order
            }
            for line in fh:
                row = json.loads(line)
                rows[row["task"]][row["split"]].append((row["source"], row["target"]))
        data = {}
        for tid in order:
            train = rows[tid]["train"]
            valid = rows[tid]["valid"]
            data[tid] = TaskData(
                train_src=np.asarray([s for s, _ in train], dtype=np.int64),
                train_tgt=np.asarray([t for _, t in train], dtype=np.int64),
                val_src=np.asarray([s for s, _ in valid], dtype=np.int64),
                val_tgt=np.asarray([t for _, t in valid], dtype=np.int64),
            )
        return cls(
            tasks=tasks,
            data=data,
            content_vocab_size=meta["content_vocab_size"],
            seq_len=meta["seq_len"],
            seed=meta["seed"],
            generator_version=meta.get("generator_version", 1),
            _order=order,
        )


def _apply_task(defn: SyntheticTaskDef, local_src: np.ndarray, offset: int) -> np.ndarray:
    tgt = defn.permutation[local_src]
    if defn.reversal:
        tgt = tgt[:, ::-1]
    return tgt + offset


def generate_corpus(
    num_tasks: int,
    size_profile: list[int],
    vocab_size: int,
    seed: int,
    *,
    val_size: int = 256,
    seq_len: int = 8,
    reversal: list[bool] | None = None,
    permutations: list[np.ndarray] | None = None,
    task_ids: list[str] | None = None,
    source_ranges: list[tuple[int, int]] | None = None,
) -> Corpus:
    """Generate a deterministic multitask corpus.

    `size_profile` lists per-task training example counts; `vocab_size` is
    the content alphabet size (>= 16). Task i defaults to a random
    permutation with reversal on odd i and sources drawn over the whole
    alphabet; `source_ranges` restricts each task's sources to a slice.
    Validation sources are re-drawn until disjoint from the task's
    training sources.
    """
    if vocab_size < 16:
        raise ValueError(f"vocab_size must be >= 16, got {vocab_size}")
    if len(size_profile) != num_tasks:
        raise ValueError(
            f"size_profile has {len(size_profile)} entries for {num_tasks} tasks"
        )
    task_ids = task_ids or [f"task{i}" for i in range(num_tasks)]
    if len(set(task_ids)) != len(task_ids):
        dupes = sorted({t for t in task_ids if task_ids.count(t) > 1})
        raise ValueError(f"duplicate task ids: {dupes}")
    if reversal is None:
        reversal = [i % 2 == 1 for i in range(num_tasks)]

    rng = np.random.default_rng(seed)
    offset = 2 * num_tasks
    tasks: dict[str, SyntheticTaskDef] = {}
    data: dict[str, TaskData] = {}
    for i, tid in enumerate(task_ids):
        if permutations is not None:
            perm = np.asarray(permutations[i], dtype=np.int64)
            if sorted(perm.tolist()) != list(range(vocab_size)):
                raise ValueError(f"permutation for {tid} is not a bijection")
        else:
            perm = rng.permutation(vocab_size)
        if source_ranges is not None:
            lo, hi = source_ranges[i]
            if not 0 <= lo < hi <= vocab_size:
                raise ValueError(
                    f"source range ({lo}, {hi}) for {tid} outside [0, {vocab_size})"
                )
        else:
            lo, hi = 0, vocab_size
        defn = SyntheticTaskDef(
            task_id=tid,
            permutation=perm,
            reversal=reversal[i],
            train_size=int(size_profile[i]),
            val_size=val_size,
            src_prefix=2 * i,
            tgt_prefix=2 * i + 1,
            source_range=(lo, hi),
        )
        train_local = rng.integers(lo, hi, size=(defn.train_size, seq_len))
        seen = {row.tobytes() for row in train_local}
        val_rows = []
        while len(val_rows) < val_size:
            candidate = rng.integers(lo, hi, size=seq_len)
            if candidate.tobytes() not in seen:
                val_rows.append(candidate)
                seen.add(candidate.tobytes())
        val_local = np.asarray(val_rows)
        tasks[tid] = defn
        data[tid] = TaskData(
            train_src=train_local + offset,
            train_tgt=_apply_task(defn, train_local, offset),
            val_src=val_local + offset,
            val_tgt=_apply_task(defn, val_local, offset),
        )
    return Corpus(
        tasks=tasks,
        data=data,
        content_vocab_size=vocab_size,
        seq_len=seq_len,
        seed=seed,
        _order=list(task_ids),
    )


def sample_batch(
    corpus: Corpus,
    active_tasks,
    batch_tokens: int,
    temperature: float,
    rng: np.random.Generator,
) -> Batch:
    """Draw a mixed batch over the active tasks.

    Tasks are chosen with probability proportional to |D_t|^(1/temperature)
    restricted to the active set (temperature -> inf gives uniform);
    examples are drawn uniformly within a task. `batch_tokens` counts source
    plus target tokens including the two prefix tokens.
    """
    active = sorted(set(active_tasks))
    if not active:
        raise ValueError("active task set is empty")
    unknown = [t for t in active if t not in corpus.tasks]
    if unknown:
        raise ValueError(f"unknown tasks in active set: {unknown}")
    tokens_per_example = 2 * (corpus.seq_len + 1)
    n = max(1, batch_tokens // tokens_per_example)
    sizes = np.array([corpus.tasks[t].train_size for t in active], dtype=np.float64)
    weights = sizes ** (1.0 / temperature) if temperature != np.inf else np.ones_like(sizes)
    probs = weights / weights.sum()
    choice = rng.choice(len(active), size=n, p=probs)
    src = np.empty((n, corpus.seq_len + 1), dtype=np.int64)
    tgt = np.empty((n, corpus.seq_len + 1), dtype=np.int64)
    task_index = {tid: i for i, tid in enumerate(corpus.task_ids)}
    task_ids = np.empty(n, dtype=np.int64)
    for row, task_pos in enumerate(choice):
        tid = active[task_pos]
        defn = corpus.tasks[tid]
        td = corpus.data[tid]
        j = rng.integers(defn.train_size)
        src[row, 0] = defn.src_prefix
        src[row, 1:] = td.train_src[j]
        tgt[row, 0] = defn.tgt_prefix
        tgt[row, 1:] = td.train_tgt[j]
        task_ids[row] = task_index[tid]
    return Batch(src=src, tgt=tgt, task_ids=task_ids)


def batch_for_examples(
    corpus: Corpus, task_id: str, src: np.ndarray, tgt: np.ndarray
) -> Batch:
    """Wrap stored examples of one task as a prefixed Batch (for evaluation)."""
    defn = corpus.tasks[task_id]
    n = src.shape[0]
    psrc = np.concatenate(
        [np.full((n, 1), defn.src_prefix, dtype=np.int64), src], axis=1
    )
    ptgt = np.concatenate(
        [np.full((n, 1), defn.tgt_prefix, dtype=np.int64), tgt], axis=1
    )
    index = {tid: i for i, tid in enumerate(corpus.task_ids)}
    return Batch(
        src=psrc, tgt=ptgt, task_ids=np.full(n, index[task_id], dtype=np.int64)
    )
