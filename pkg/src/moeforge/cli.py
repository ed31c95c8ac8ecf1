"""Command-line entry point: `moeforge gen | train | curriculum | analyze`.

Every command takes a JSON config and/or input artifacts, writes its
outputs plus a run manifest into `--out`, and is byte-for-byte idempotent
given identical inputs and seed (manifests embed relative paths and no
timestamps). Exit codes: 0 success, 2 config/usage error, 3 numerical
abort. The env var MOEFORGE_THREADS caps evaluation parallelism.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

from .analysis import (
    collect_usage,
    colocation_csv,
    e50_csv,
    random_routing_csv,
    random_routing_eval,
    similarity_csv,
    usage_csv,
)
from .corpus import Corpus, generate_corpus
from .curriculum import (
    CurriculumPlan,
    detect_s_best,
    histories_from_trainlog_csv,
    merge_bins,
    partition_count_based,
    partition_step_based,
)
from .model import ModelConfig, build_model
from .ndcore import load_checkpoint
from .trainer import NumericalAbort, TrainConfig, train

__all__ = ["main"]


class ConfigError(ValueError):
    """Malformed or incomplete configuration."""


def _load_json(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}")


def _require(config: dict, name: str, source: str):
    if name not in config:
        raise ConfigError(f"{source}: missing required field '{name}'")
    return config[name]


def _config_hash(payload: dict) -> str:
    return hashlib.sha256(
        json.dumps(payload, sort_keys=True).encode()
    ).hexdigest()[:16]


def _write_manifest(out_dir: Path, mode: str, seed: int, config: dict,
                    outputs: list[str]) -> None:
    chash = _config_hash(config)
    manifest = {
        "run_id": hashlib.sha256(f"{mode}:{chash}:{seed}".encode()).hexdigest()[:12],
        "mode": mode,
        "seed": seed,
        "config_hash": chash,
        "config": config,
        "outputs": sorted(outputs),
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n"
    )


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- gen ----------------------------------------------------------------------


def cmd_gen(args) -> int:
    config = _load_json(args.config)
    source = str(args.config)
    train_sizes = _require(config, "train_sizes", source)
    vocab_size = _require(config, "vocab_size", source)
    num_tasks = config.get("num_tasks", len(train_sizes))
    if num_tasks != len(train_sizes):
        raise ConfigError(
            f"{source}: num_tasks={num_tasks} but train_sizes has "
            f"{len(train_sizes)} entries"
        )
    seed = args.seed if args.seed is not None else config.get("seed", 0)
    source_ranges = config.get("source_ranges")
    corpus = generate_corpus(
        num_tasks,
        list(train_sizes),
        vocab_size,
        seed,
        val_size=config.get("val_size", 256),
        seq_len=config.get("seq_len", 8),
        reversal=config.get("reversal"),
        task_ids=config.get("task_ids"),
        source_ranges=(
            [tuple(r) for r in source_ranges] if source_ranges else None
        ),
    )
    out = _out_dir(args)
    corpus.save_jsonl(out / "corpus.jsonl")
    echoed = dict(
        config,
        seed=seed,
        num_tasks=num_tasks,
        val_size=config.get("val_size", 256),
        seq_len=config.get("seq_len", 8),
    )
    _write_manifest(out, "gen", seed, echoed, ["corpus.jsonl"])
    print(f"wrote corpus with {num_tasks} tasks to {out / 'corpus.jsonl'}")
    return 0


# -- train --------------------------------------------------------------------


def _train_config_from_json(config: dict, source: str, corpus: Corpus,
                            seed_override: int | None) -> TrainConfig:
    model_cfg = dict(_require(config, "model", source))
    model_cfg.setdefault("vocab_size", corpus.vocab_size)
    if model_cfg["vocab_size"] != corpus.vocab_size:
        raise ConfigError(
            f"{source}: model.vocab_size={model_cfg['vocab_size']} does not "
            f"match corpus vocabulary {corpus.vocab_size}"
        )
    try:
        model = ModelConfig.from_dict(model_cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{source}: invalid model config: {exc}")

    train_cfg = dict(config.get("train", {}))
    plan = None
    plan_spec = config.get("curriculum_plan")
    if plan_spec is not None:
        if isinstance(plan_spec, str):
            plan = CurriculumPlan.load(plan_spec)
        else:
            plan = CurriculumPlan.from_json(json.dumps(plan_spec))
        unknown = plan.all_tasks - set(corpus.task_ids)
        if unknown:
            raise ConfigError(
                f"{source}: curriculum plan references unknown tasks: "
                f"{sorted(unknown)}"
            )
    if seed_override is not None:
        train_cfg["seed"] = seed_override
    try:
        return TrainConfig(model=model, plan=plan, **train_cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{source}: invalid train config: {exc}")


def cmd_train(args) -> int:
    config = _load_json(args.config)
    corpus = Corpus.load_jsonl(args.corpus)
    out = _out_dir(args)
    tc = _train_config_from_json(config, str(args.config), corpus, args.seed)
    tc.out_dir = str(out)
    model, log = train(tc, corpus)
    outputs = sorted(p.name for p in out.iterdir() if p.name != "manifest.json")
    _write_manifest(out, "train", tc.seed, tc.to_dict(), outputs)
    print(f"trained {tc.total_updates} updates; log at {out / 'trainlog.csv'}")
    return 0


# -- curriculum ---------------------------------------------------------------


def cmd_curriculum(args) -> int:
    out = _out_dir(args)
    if args.mode == "step":
        histories = histories_from_trainlog_csv(args.log)
        if not histories:
            raise ConfigError(f"{args.log}: no validation rows found")
        s_best = {task: detect_s_best(h) for task, h in histories.items()}
        plan = partition_step_based(
            sorted(s_best), s_best, args.bins, args.total_updates
        )
    else:
        if args.corpus is None:
            raise ConfigError("count mode requires --corpus for task sizes")
        corpus = Corpus.load_jsonl(args.corpus)
        thresholds = (
            [float(x) for x in args.thresholds.split(",")]
            if args.thresholds
            else None
        )
        steps = (
            [int(x) for x in args.steps.split(",")] if args.steps else None
        )
        kwargs = {}
        if thresholds is not None:
            kwargs["thresholds"] = thresholds
        if steps is not None:
            kwargs["steps"] = steps
        plan = partition_count_based(
            corpus.train_sizes(), total_updates=args.total_updates, **kwargs
        )
    if args.merge:
        plan = merge_bins(plan, [int(i) for i in args.merge.split(",")])
    plan.save(out / "plan.json")
    config = {
        "mode": args.mode,
        "bins": args.bins,
        "total_updates": args.total_updates,
        "merge": args.merge,
    }
    _write_manifest(out, "curriculum", 0, config, ["plan.json"])
    print(f"wrote {len(plan.bins)}-bin plan to {out / 'plan.json'}")
    return 0


# -- analyze ------------------------------------------------------------------

ANALYSES = ("usage", "e50", "coloc", "sim", "random")


def _load_model(checkpoint_path: Path):
    config_path = checkpoint_path.parent / "model_config.json"
    if not config_path.exists():
        raise ConfigError(
            f"model config not found next to checkpoint: {config_path}"
        )
    config = ModelConfig.from_dict(json.loads(config_path.read_text()))
    params, meta = load_checkpoint(checkpoint_path)
    model = build_model(config, 0)
    model.load_state(params)
    return model, meta


def cmd_analyze(args) -> int:
    which = (
        list(ANALYSES)
        if args.which in (None, "all")
        else [w.strip() for w in args.which.split(",")]
    )
    unknown = [w for w in which if w not in ANALYSES]
    if unknown:
        raise ConfigError(
            f"unknown analyses {unknown}; available: {', '.join(ANALYSES)} or 'all'"
        )
    checkpoint = Path(args.checkpoint)
    if not checkpoint.exists():
        raise ConfigError(f"checkpoint not found: {checkpoint}")
    model, meta = _load_model(checkpoint)
    corpus = Corpus.load_jsonl(args.corpus)
    out = _out_dir(args)
    tasks = corpus.task_ids
    outputs: list[str] = []

    needs_usage = any(w in which for w in ("usage", "e50", "coloc", "sim"))
    report = None
    if needs_usage:
        report = collect_usage(model, corpus, tasks, mode=args.usage_mode)
        if report.empty:
            print(f"notice: {report.notice}")

    def emit(name: str, text: str) -> None:
        (out / name).write_text(text)
        outputs.append(name)

    if "usage" in which:
        emit("usage.csv", usage_csv(report))
    if "e50" in which:
        emit("e50.csv", e50_csv(report))
    if "coloc" in which:
        emit("colocation.csv", colocation_csv(report))
    if "sim" in which:
        emit("similarity.csv", similarity_csv(report))
    if "random" in which:
        if not model.moe_layer_names():
            print("notice: dense model: skipping random-routing probe")
            emit("random_routing.csv", "task,standard_ppl,random_ppl,relative_change\n")
        else:
            results = random_routing_eval(
                model, corpus, tasks, num_seeds=args.random_seeds,
                base_seed=args.seed or 0,
            )
            emit("random_routing.csv", random_routing_csv(results))

    if args.dump_routing:
        lines = []
        if report is not None and not report.empty:
            from .trainer import _task_nll

            for task in tasks:
                def on_context(batch, ctx, task=task):
                    for layer, decision in ctx.decisions:
                        for t in range(decision.num_tokens):
                            lines.append(json.dumps({
                                "task": task,
                                "layer": layer,
                                "token": t,
                                "experts": decision.expert_index[t].tolist(),
                                "weights": decision.gate_weight[t].tolist(),
                                "dropped_by_capacity":
                                    decision.dropped_by_capacity[t].tolist(),
                                "masked_by_eom": decision.masked_by_eom[t].tolist(),
                            }, sort_keys=True))

                _task_nll(model, corpus, task, "valid", on_context=on_context)
        Path(args.dump_routing).write_text("\n".join(lines) + "\n")

    config = {
        "checkpoint": checkpoint.name,
        "which": which,
        "usage_mode": args.usage_mode,
        "random_seeds": args.random_seeds,
        "checkpoint_config_hash": meta.get("config_hash"),
    }
    _write_manifest(out, "analyze", args.seed or 0, config, outputs)
    print(f"wrote {len(outputs)} analysis files to {out}")
    return 0


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="moeforge",
        description=__doc__,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("gen", help="generate a synthetic multitask corpus")
    p_gen.add_argument("--config", required=True, help="corpus config JSON")
    p_gen.add_argument("--seed", type=int, default=None, help="override config seed")
    p_gen.add_argument("--out", required=True, help="output directory")
    p_gen.set_defaults(func=cmd_gen)

    p_train = sub.add_parser("train", help="train a model on a corpus")
    p_train.add_argument("--config", required=True, help="train config JSON")
    p_train.add_argument("--corpus", required=True, help="corpus JSON-lines file")
    p_train.add_argument("--seed", type=int, default=None, help="override config seed")
    p_train.add_argument("--out", required=True, help="output directory")
    p_train.set_defaults(func=cmd_train)

    p_cur = sub.add_parser("curriculum", help="derive a curriculum plan")
    p_cur.add_argument("--log", help="trainlog.csv from a baseline run (step mode)")
    p_cur.add_argument("--mode", choices=("count", "step"), required=True)
    p_cur.add_argument("--bins", type=int, default=3, help="number of bins (step mode)")
    p_cur.add_argument("--total-updates", type=int, required=True, dest="total_updates")
    p_cur.add_argument("--corpus", help="corpus JSON-lines (count mode sizes)")
    p_cur.add_argument("--thresholds", help="comma-separated count thresholds")
    p_cur.add_argument("--steps", help="comma-separated characteristic steps")
    p_cur.add_argument("--merge", help="comma-separated 1-based bins to merge")
    p_cur.add_argument("--out", required=True, help="output directory")
    p_cur.set_defaults(func=cmd_curriculum)

    p_an = sub.add_parser("analyze", help="routing analyses on a checkpoint")
    p_an.add_argument("--checkpoint", required=True, help="checkpoint .bin file")
    p_an.add_argument("--corpus", required=True, help="corpus JSON-lines file")
    p_an.add_argument(
        "--which", default="all",
        help=f"comma-separated subset of {','.join(ANALYSES)} (default all)",
    )
    p_an.add_argument("--usage-mode", default="top1", choices=("top1", "topk", "gate"))
    p_an.add_argument("--random-seeds", type=int, default=2)
    p_an.add_argument("--seed", type=int, default=None)
    p_an.add_argument("--dump-routing", help="write routing decisions JSONL here")
    p_an.add_argument("--out", required=True, help="output directory")
    p_an.set_defaults(func=cmd_analyze)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 3
    except (ConfigError, ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
