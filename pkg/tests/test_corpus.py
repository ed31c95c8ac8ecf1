"""Synthetic corpus generation, sampling distribution, serialization."""

import numpy as np
import pytest

from moeforge.corpus import Corpus, batch_for_examples, generate_corpus, sample_batch


def _small_corpus(seed=0, **kw):
    defaults = dict(
        num_tasks=3,
        size_profile=[50, 30, 20],
        vocab_size=16,
        seed=seed,
        val_size=10,
        seq_len=5,
    )
    defaults.update(kw)
    return generate_corpus(**defaults)


class TestGeneration:
    def test_identity_permutation_is_copy_task(self):
        corpus = generate_corpus(
            1, [20], 16, seed=1, val_size=5, seq_len=4,
            permutations=[np.arange(16)], reversal=[False],
        )
        td = corpus.data["task0"]
        np.testing.assert_array_equal(td.train_src, td.train_tgt)

    def test_reversal_applies_permutation_then_reverses(self):
        perm = np.roll(np.arange(16), 3)
        corpus = generate_corpus(
            1, [10], 16, seed=2, val_size=4, seq_len=6,
            permutations=[perm], reversal=[True],
        )
        td = corpus.data["task0"]
        offset = 2
        local_src = td.train_src - offset
        expected = perm[local_src][:, ::-1] + offset
        np.testing.assert_array_equal(td.train_tgt, expected)

    def test_same_seed_bitwise_identical(self):
        a, b = _small_corpus(seed=5), _small_corpus(seed=5)
        for tid in a.task_ids:
            np.testing.assert_array_equal(a.data[tid].train_src, b.data[tid].train_src)
            np.testing.assert_array_equal(a.data[tid].val_tgt, b.data[tid].val_tgt)
            np.testing.assert_array_equal(
                a.tasks[tid].permutation, b.tasks[tid].permutation
            )

    def test_different_seed_differs(self):
        a, b = _small_corpus(seed=5), _small_corpus(seed=6)
        assert not np.array_equal(a.data["task0"].train_src, b.data["task0"].train_src)

    def test_train_val_disjoint(self):
        corpus = _small_corpus(vocab_size=16, seq_len=3, seed=9)
        for tid in corpus.task_ids:
            td = corpus.data[tid]
            train = {row.tobytes() for row in td.train_src}
            val = {row.tobytes() for row in td.val_src}
            assert not (train & val)

    def test_vocab_layout(self):
        corpus = _small_corpus()
        assert corpus.vocab_size == 2 * 3 + 16
        for i, tid in enumerate(corpus.task_ids):
            assert corpus.tasks[tid].src_prefix == 2 * i
            assert corpus.tasks[tid].tgt_prefix == 2 * i + 1
        assert corpus.data["task0"].train_src.min() >= 6

    def test_rejects_duplicate_ids(self):
        with pytest.raises(ValueError, match="duplicate"):
            generate_corpus(2, [5, 5], 16, 0, task_ids=["a", "a"])

    def test_rejects_small_vocab(self):
        with pytest.raises(ValueError, match="vocab_size"):
            generate_corpus(1, [5], 8, 0)

    def test_rejects_non_bijection(self):
        with pytest.raises(ValueError, match="bijection"):
            generate_corpus(1, [5], 16, 0, permutations=[np.zeros(16, dtype=int)])

    def test_source_ranges_restrict_sources(self):
        corpus = generate_corpus(
            2, [30, 30], 32, seed=7, val_size=8, seq_len=4,
            source_ranges=[(0, 16), (16, 32)],
        )
        offset = 4
        for tid, (lo, hi) in zip(corpus.task_ids, [(0, 16), (16, 32)]):
            src = corpus.data[tid].train_src - offset
            assert src.min() >= lo and src.max() < hi
            vsrc = corpus.data[tid].val_src - offset
            assert vsrc.min() >= lo and vsrc.max() < hi

    def test_source_range_survives_roundtrip(self, tmp_path):
        corpus = generate_corpus(
            1, [10], 32, seed=2, val_size=4, seq_len=4, source_ranges=[(8, 24)],
        )
        path = tmp_path / "sliced.jsonl"
        corpus.save_jsonl(path)
        loaded = Corpus.load_jsonl(path)
        assert loaded.tasks["task0"].source_range == (8, 24)

    def test_rejects_bad_source_range(self):
        with pytest.raises(ValueError, match="source range"):
            generate_corpus(1, [5], 16, 0, source_ranges=[(8, 20)])


class TestSampling:
    def test_single_active_task(self, rng):
        corpus = _small_corpus()
        batch = sample_batch(corpus, ["task1"], 200, 1.0, rng)
        assert (batch.task_ids == 1).all()
        assert (batch.src[:, 0] == 2).all()
        assert (batch.tgt[:, 0] == 3).all()

    def test_batch_token_budget(self, rng):
        corpus = _small_corpus(seq_len=5)
        batch = sample_batch(corpus, corpus.task_ids, 240, 1.0, rng)
        # 240 tokens / (2 * 6 per example) = 20 sequences
        assert batch.num_sequences == 20

    def test_proportional_sampling_fractions(self):
        corpus = generate_corpus(
            2, [9000, 1000], 16, seed=3, val_size=4, seq_len=4
        )
        rng = np.random.default_rng(17)
        draws = 0
        hits = 0
        for _ in range(200):
            batch = sample_batch(corpus, corpus.task_ids, 5000, 1.0, rng)
            draws += batch.num_sequences
            hits += (batch.task_ids == 0).sum()
        frac = hits / draws
        sigma = np.sqrt(0.9 * 0.1 / draws)
        assert abs(frac - 0.9) < 3 * sigma

    def test_infinite_temperature_uniform(self):
        corpus = generate_corpus(
            2, [9000, 1000], 16, seed=3, val_size=4, seq_len=4
        )
        rng = np.random.default_rng(23)
        draws = hits = 0
        for _ in range(200):
            batch = sample_batch(corpus, corpus.task_ids, 5000, np.inf, rng)
            draws += batch.num_sequences
            hits += (batch.task_ids == 0).sum()
        frac = hits / draws
        sigma = np.sqrt(0.25 / draws)
        assert abs(frac - 0.5) < 3 * sigma

    def test_rejects_empty_active_set(self, rng):
        with pytest.raises(ValueError, match="empty"):
            sample_batch(_small_corpus(), [], 100, 1.0, rng)

    def test_rejects_unknown_task(self, rng):
        with pytest.raises(ValueError, match="unknown"):
            sample_batch(_small_corpus(), ["nope"], 100, 1.0, rng)

    def test_examples_come_from_task_training_data(self, rng):
        corpus = _small_corpus()
        batch = sample_batch(corpus, ["task2"], 400, 1.0, rng)
        train = {row.tobytes() for row in corpus.data["task2"].train_src}
        for row in batch.src[:, 1:]:
            assert row.tobytes() in train


class TestSerialization:
    def test_jsonl_roundtrip(self, tmp_path):
        corpus = _small_corpus(seed=11)
        path = tmp_path / "corpus.jsonl"
        corpus.save_jsonl(path)
        loaded = Corpus.load_jsonl(path)
        assert loaded.task_ids == corpus.task_ids
        assert loaded.vocab_size == corpus.vocab_size
        for tid in corpus.task_ids:
            np.testing.assert_array_equal(
                loaded.data[tid].train_src, corpus.data[tid].train_src
            )
            np.testing.assert_array_equal(
                loaded.data[tid].val_tgt, corpus.data[tid].val_tgt
            )
            np.testing.assert_array_equal(
                loaded.tasks[tid].permutation, corpus.tasks[tid].permutation
            )

    def test_export_byte_identical(self, tmp_path):
        corpus = _small_corpus(seed=11)
        p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        corpus.save_jsonl(p1)
        corpus.save_jsonl(p2)
        assert p1.read_bytes() == p2.read_bytes()


class TestEvalBatches:
    def test_batch_for_examples_prefixes(self):
        corpus = _small_corpus()
        td = corpus.data["task1"]
        batch = batch_for_examples(corpus, "task1", td.val_src, td.val_tgt)
        assert (batch.src[:, 0] == 2).all()
        assert (batch.tgt[:, 0] == 3).all()
        np.testing.assert_array_equal(batch.src[:, 1:], td.val_src)
