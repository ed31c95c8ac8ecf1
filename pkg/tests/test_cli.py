"""End-to-end CLI: gen -> train -> curriculum -> analyze, exit codes."""

import json
from pathlib import Path

import pytest

from moeforge.cli import main
from moeforge.curriculum import CurriculumPlan


def _write(path: Path, payload: dict) -> str:
    path.write_text(json.dumps(payload, indent=2))
    return str(path)


@pytest.fixture
def gen_config(tmp_path):
    return _write(
        tmp_path / "corpus.json",
        {
            "train_sizes": [40, 20],
            "vocab_size": 16,
            "seq_len": 5,
            "val_size": 8,
            "seed": 3,
        },
    )


@pytest.fixture
def train_config(tmp_path):
    return _write(
        tmp_path / "train.json",
        {
            "model": {
                "d_model": 16,
                "ffn_dim": 32,
                "heads": 2,
                "encoder_layers": 2,
                "decoder_layers": 2,
                "moe_mode": "moe",
                "gate": {"num_experts": 4},
                "max_seq_len": 12,
            },
            "train": {
                "total_updates": 10,
                "batch_tokens": 120,
                "warmup_updates": 5,
                "peak_lr": 0.002,
                "validation_interval": 5,
                "seed": 1,
            },
        },
    )


def _gen(tmp_path, gen_config, name="corpus"):
    out = tmp_path / name
    assert main(["gen", "--config", gen_config, "--out", str(out)]) == 0
    return out / "corpus.jsonl"


class TestGen:
    def test_minimal_config_succeeds(self, tmp_path, gen_config):
        out = tmp_path / "c"
        assert main(["gen", "--config", gen_config, "--out", str(out)]) == 0
        assert (out / "corpus.jsonl").exists()
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["mode"] == "gen"
        assert manifest["outputs"] == ["corpus.jsonl"]

    def test_missing_vocab_size_exits_2(self, tmp_path, capsys):
        cfg = _write(tmp_path / "bad.json", {"train_sizes": [10]})
        assert main(["gen", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
        assert "vocab_size" in capsys.readouterr().err

    def test_byte_identical_reruns(self, tmp_path, gen_config):
        a = _gen(tmp_path, gen_config, "a")
        b = _gen(tmp_path, gen_config, "b")
        assert a.read_bytes() == b.read_bytes()
        assert (a.parent / "manifest.json").read_bytes() == (
            b.parent / "manifest.json"
        ).read_bytes()

    def test_seed_flag_overrides(self, tmp_path, gen_config):
        a = tmp_path / "a2"
        b = tmp_path / "b2"
        main(["gen", "--config", gen_config, "--out", str(a)])
        main(["gen", "--config", gen_config, "--seed", "99", "--out", str(b)])
        assert (a / "corpus.jsonl").read_bytes() != (b / "corpus.jsonl").read_bytes()


class TestTrain:
    def test_smoke_run_writes_log(self, tmp_path, gen_config, train_config):
        corpus = _gen(tmp_path, gen_config)
        out = tmp_path / "run"
        code = main([
            "train", "--config", train_config,
            "--corpus", str(corpus), "--out", str(out),
        ])
        assert code == 0
        log = (out / "trainlog.csv").read_text().splitlines()
        assert log[0] == "step,task,split,ppl,l_mt,l_moe,l_cmr,mean_gate,lr"
        # 2 validation points x 2 tasks x 2 splits
        assert len(log) == 1 + 8
        assert (out / "checkpoint_000010.bin").exists()
        assert (out / "manifest.json").exists()

    def test_dense_vs_moe_logs_differ_in_l_moe(self, tmp_path, gen_config, train_config):
        corpus = _gen(tmp_path, gen_config)
        dense_cfg = json.loads(Path(train_config).read_text())
        dense_cfg["model"]["moe_mode"] = "dense"
        dense_path = _write(tmp_path / "dense.json", dense_cfg)
        out_moe, out_dense = tmp_path / "moe", tmp_path / "dense_run"
        assert main(["train", "--config", train_config, "--corpus", str(corpus),
                     "--out", str(out_moe)]) == 0
        assert main(["train", "--config", dense_path, "--corpus", str(corpus),
                     "--out", str(out_dense)]) == 0
        import csv

        def l_moe_values(path):
            with open(path, newline="") as fh:
                return [row["l_moe"] for row in csv.DictReader(fh)]

        assert all(v == "" for v in l_moe_values(out_dense / "trainlog.csv"))
        assert all(v != "" for v in l_moe_values(out_moe / "trainlog.csv"))

    def test_train_byte_identical_reruns(self, tmp_path, gen_config, train_config):
        corpus = _gen(tmp_path, gen_config)
        outs = []
        for name in ("r1", "r2"):
            out = tmp_path / name
            assert main(["train", "--config", train_config, "--corpus",
                         str(corpus), "--out", str(out)]) == 0
            outs.append(out)
        for fname in ("trainlog.csv", "checkpoint_000010.bin", "manifest.json"):
            assert (outs[0] / fname).read_bytes() == (outs[1] / fname).read_bytes()

    def test_plan_with_unknown_task_exits_2(self, tmp_path, gen_config, train_config, capsys):
        corpus = _gen(tmp_path, gen_config)
        cfg = json.loads(Path(train_config).read_text())
        cfg["curriculum_plan"] = {
            "total_updates": 10,
            "bins": [{"k": 10, "tasks": ["task0", "ghost"]}],
        }
        path = _write(tmp_path / "plan_cfg.json", cfg)
        code = main(["train", "--config", path, "--corpus", str(corpus),
                     "--out", str(tmp_path / "x")])
        assert code == 2
        assert "ghost" in capsys.readouterr().err


class TestCurriculum:
    def _log(self, tmp_path):
        path = tmp_path / "log.csv"
        rows = ["step,task,split,ppl,l_mt,l_moe,l_cmr,mean_gate,lr"]
        best = {"A": 10_000, "B": 7_800, "C": 5_500, "D": 4_200, "E": 1_800}
        for task, s_best in best.items():
            for step in range(100, 10_001, 100):
                ppl = 2.0 + abs(step - s_best) / 10_000
                rows.append(f"{step},{task},valid,{ppl},1.0,,,,0.001")
                rows.append(f"{step},{task},train,{ppl - 0.1},1.0,,,,0.001")
        path.write_text("\n".join(rows) + "\n")
        return str(path)

    def test_step_mode_reproduces_worked_example(self, tmp_path):
        out = tmp_path / "plan"
        code = main([
            "curriculum", "--log", self._log(tmp_path), "--mode", "step",
            "--bins", "5", "--total-updates", "10000", "--out", str(out),
        ])
        assert code == 0
        plan = CurriculumPlan.load(out / "plan.json")
        assert plan.steps == [10_000, 7_950, 5_900, 3_850, 1_800]
        assert plan.bins == [["A"], ["B"], ["C"], ["D"], ["E"]]

    def test_count_mode_with_paper_thresholds(self, tmp_path):
        cfg = _write(
            tmp_path / "c.json",
            {"train_sizes": [6_000_000, 1_000_000, 50_000], "vocab_size": 16,
             "val_size": 4, "seq_len": 4},
        )
        # Corpus generation at these sizes is too slow; use explicit sizes via
        # a tiny corpus plus threshold/step overrides scaled down instead.
        small = _write(
            tmp_path / "small.json",
            {"train_sizes": [600, 100, 5], "vocab_size": 16,
             "val_size": 4, "seq_len": 4},
        )
        corpus_path = tmp_path / "cc"
        assert main(["gen", "--config", small, "--out", str(corpus_path)]) == 0
        out = tmp_path / "plan2"
        code = main([
            "curriculum", "--mode", "count", "--total-updates", "1000",
            "--corpus", str(corpus_path / "corpus.jsonl"),
            "--thresholds", "500,50", "--steps", "1000,400,200",
            "--out", str(out),
        ])
        assert code == 0
        plan = CurriculumPlan.load(out / "plan.json")
        assert plan.bins == [["task0"], ["task1"], ["task2"]]
        assert plan.steps == [1000, 400, 200]

    def test_count_mode_without_corpus_exits_2(self, tmp_path, capsys):
        code = main([
            "curriculum", "--mode", "count", "--total-updates", "100",
            "--out", str(tmp_path / "p"),
        ])
        assert code == 2
        assert "--corpus" in capsys.readouterr().err

    def test_merge_flag(self, tmp_path):
        out = tmp_path / "merged"
        code = main([
            "curriculum", "--log", self._log(tmp_path), "--mode", "step",
            "--bins", "5", "--total-updates", "10000", "--merge", "1,2,3",
            "--out", str(out),
        ])
        assert code == 0
        plan = CurriculumPlan.load(out / "plan.json")
        assert plan.steps == [10_000, 3_850, 1_800]
        assert sorted(plan.bins[0]) == ["A", "B", "C"]


class TestAnalyze:
    def _train(self, tmp_path, gen_config, train_config, mode=None):
        corpus = _gen(tmp_path, gen_config)
        cfg_path = train_config
        if mode is not None:
            cfg = json.loads(Path(train_config).read_text())
            cfg["model"]["moe_mode"] = mode
            cfg_path = _write(tmp_path / f"{mode}.json", cfg)
        out = tmp_path / f"run_{mode or 'moe'}"
        assert main(["train", "--config", cfg_path, "--corpus", str(corpus),
                     "--out", str(out)]) == 0
        return corpus, out / "checkpoint_000010.bin"

    def test_all_analyses_present(self, tmp_path, gen_config, train_config):
        corpus, ckpt = self._train(tmp_path, gen_config, train_config)
        out = tmp_path / "analysis"
        code = main(["analyze", "--checkpoint", str(ckpt), "--corpus",
                     str(corpus), "--out", str(out)])
        assert code == 0
        for name in ("usage.csv", "e50.csv", "colocation.csv",
                     "similarity.csv", "random_routing.csv"):
            assert (out / name).exists(), name

    def test_usage_on_dense_checkpoint_is_empty_notice(
        self, tmp_path, gen_config, train_config, capsys
    ):
        corpus, ckpt = self._train(tmp_path, gen_config, train_config, mode="dense")
        out = tmp_path / "analysis_dense"
        code = main(["analyze", "--checkpoint", str(ckpt), "--corpus",
                     str(corpus), "--which", "usage", "--out", str(out)])
        assert code == 0
        assert "dense" in capsys.readouterr().out
        assert (out / "usage.csv").read_text() == "layer,group,expert,count\n"

    def test_e50_matches_direct_analysis(self, tmp_path, gen_config, train_config):
        corpus, ckpt = self._train(tmp_path, gen_config, train_config)
        out1, out2 = tmp_path / "a1", tmp_path / "a2"
        for out in (out1, out2):
            assert main(["analyze", "--checkpoint", str(ckpt), "--corpus",
                         str(corpus), "--which", "e50", "--out", str(out)]) == 0
        assert (out1 / "e50.csv").read_bytes() == (out2 / "e50.csv").read_bytes()

    def test_dump_routing_jsonl(self, tmp_path, gen_config, train_config):
        corpus, ckpt = self._train(tmp_path, gen_config, train_config)
        dump = tmp_path / "routing.jsonl"
        out = tmp_path / "a3"
        assert main(["analyze", "--checkpoint", str(ckpt), "--corpus",
                     str(corpus), "--which", "usage", "--dump-routing",
                     str(dump), "--out", str(out)]) == 0
        lines = dump.read_text().splitlines()
        row = json.loads(lines[0])
        assert set(row) == {
            "task", "layer", "token", "experts", "weights",
            "dropped_by_capacity", "masked_by_eom",
        }

    def test_unknown_analysis_exits_2(self, tmp_path, gen_config, train_config, capsys):
        corpus, ckpt = self._train(tmp_path, gen_config, train_config)
        code = main(["analyze", "--checkpoint", str(ckpt), "--corpus",
                     str(corpus), "--which", "entropy", "--out",
                     str(tmp_path / "x")])
        assert code == 2
        assert "entropy" in capsys.readouterr().err

    def test_missing_checkpoint_exits_2(self, tmp_path, gen_config):
        corpus = _gen(tmp_path, gen_config)
        code = main(["analyze", "--checkpoint", str(tmp_path / "nope.bin"),
                     "--corpus", str(corpus), "--out", str(tmp_path / "x")])
        assert code == 2
