"""Command-line entry point.

Subcommands: datagen, train, infer, evaluate, ablate, report. Exit codes:
0 success, 1 usage error, 2 data error, 3 divergence abort.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import torch

from . import datagen as dg
from . import grammar, harness, training
from .decoder import ModelConfig, ToyDecoder, load_checkpoint, save_checkpoint
from .generation import build_session, generate
from .imaging import load_png
from .memory import MemoryConfig


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> _Parser:
    p = _Parser(prog="mmreason", description=__doc__)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None,
                   help="JSON file of option defaults (explicit flags win)")
    p.add_argument("--threads", type=int, default=1,
                   help="torch CPU threads (1 keeps runs reproducible)")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("datagen", help="generate the synthetic chain corpus")
    d.add_argument("--out", required=True)
    d.add_argument("--total", type=int, default=None,
                   help="total size split by the reference task mix")
    for task in dg.TASKS:
        d.add_argument(f"--{task}", type=int, default=0)
    d.add_argument("--general", type=int, default=0,
                   help="also write a text-only general corpus of this size")
    d.add_argument("--client", choices=["mock"], default="mock")
    d.add_argument("--wrong-answer-rate", type=float, default=0.0)
    d.add_argument("--detect-miss-rate", type=float, default=0.0)
    d.add_argument("--multi-detect-rate", type=float, default=0.0)
    d.add_argument("--failure-rate", type=float, default=0.0)

    t = sub.add_parser("train", help="two-stage supervised training")
    t.add_argument("--corpus", required=True)
    t.add_argument("--general", default=None)
    t.add_argument("--plan", required=True, help="JSON stage plan file")
    t.add_argument("--out", required=True)
    t.add_argument("--layers", type=int, default=4)
    t.add_argument("--heads", type=int, default=4)
    t.add_argument("--dim", type=int, default=64)
    t.add_argument("--batch-size", type=int, default=16)
    t.add_argument("--memory-group", type=int, default=3,
                   help="layer group refined during training (0 disables)")
    t.add_argument("--log-every", type=int, default=100)

    i = sub.add_parser("infer", help="grounded chain-of-thought generation")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--image", action="append", default=[], help="PNG path (repeatable)")
    i.add_argument("--question", required=True)
    i.add_argument("--memory-group", type=int, default=3)
    i.add_argument("--budget", type=int, default=512)
    i.add_argument("--out", default=None, help="JSON transcript path")

    e = sub.add_parser("evaluate", help="toy task accuracy")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--family", choices=harness.EVAL_FAMILIES, required=True)
    e.add_argument("--count", type=int, default=32)
    e.add_argument("--memory-group", type=int, default=3)
    e.add_argument("--budget", type=int, default=192)
    e.add_argument("--out", default=None)

    a = sub.add_parser("ablate", help="layer-placement ablation")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--groups", default="1,2,3,4,5")
    a.add_argument("--repeats", type=int, default=5)
    a.add_argument("--family", choices=harness.EVAL_FAMILIES, default="cross_image_match")
    a.add_argument("--count", type=int, default=8)
    a.add_argument("--budget", type=int, default=192)
    a.add_argument("--warmup", type=int, default=None,
                   help="tokens excluded from timing (default min(32, budget // 4))")
    a.add_argument("--out", required=True)

    r = sub.add_parser("report", help="merge and print report CSVs")
    r.add_argument("--inputs", nargs="+", required=True)
    r.add_argument("--out", default=None)
    return p


def cmd_datagen(args) -> int:
    sizes = {task: getattr(args, task) for task in dg.TASKS}
    if args.total is not None:
        sizes = dg.scaled_mix(args.total)
    client = dg.MockAnnotator(
        seed=args.seed,
        wrong_answer_rate=args.wrong_answer_rate,
        detect_miss_rate=args.detect_miss_rate,
        multi_detect_rate=args.multi_detect_rate,
        failure_rate=args.failure_rate,
    )
    report = dg.assemble_corpus(sizes, args.seed, client, args.out)
    print(f"wrote {sum(report.sizes.values())} instances to {args.out} "
          f"(rejected {report.rejected}, unprocessed {report.unprocessed})")
    if args.general:
        gen_dir = Path(args.out) / "general"
        dg.assemble_general_corpus(args.general, args.seed + 1, gen_dir)
        print(f"wrote {args.general} general instances to {gen_dir}")
    return 0


def cmd_train(args) -> int:
    instances, vocab, cfg = dg.load_corpus(args.corpus)
    general = []
    if args.general:
        general, _, _ = dg.load_corpus(args.general)
    plan_doc = json.loads(Path(args.plan).read_text(encoding="utf-8"))
    plans = [training.StagePlan.from_dict(d) for d in plan_doc["stages"]]
    config = ModelConfig(
        vocab_size=len(vocab), layers=args.layers, heads=args.heads,
        dim=args.dim, patch=cfg.patch,
        memory_layers=tuple(sorted(
            MemoryConfig.for_group(args.memory_group, args.layers).layer_set)),
    )
    model = ToyDecoder(config).init_weights(args.seed)
    memory = MemoryConfig(frozenset(config.memory_layers),
                          enabled=bool(config.memory_layers))
    chain_samples = training.tensorize_corpus(instances, vocab, cfg, cfg.patch)
    general_samples = training.tensorize_corpus(general, vocab, cfg, cfg.patch)
    opt_config = training.OptimizerConfig(batch_size=args.batch_size)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for plan in plans:
        result = training.train_stage(
            model, plan, opt_config, chain_samples, general_samples,
            memory=memory, seed=args.seed, pad_id=vocab.pad_id,
            log_every=args.log_every)
        training.write_trace(result.trace, out_dir / f"trace_stage{plan.stage_id}.csv")
        print(f"stage {plan.stage_id}: {len(result.trace)} steps, "
              f"final loss {result.final_loss:.4f} "
              f"({result.wall_seconds:.1f}s)")
    save_checkpoint(model, out_dir / "model.ckpt",
                    extra={"vocab_words": vocab.words(), "corpus_config": cfg.to_dict()})
    print(f"checkpoint written to {out_dir / 'model.ckpt'}")
    return 0


def _load_model(path):
    model, extra = load_checkpoint(path)
    vocab = grammar.Vocabulary(extra.get("vocab_words", []))
    cfg = dg.CorpusConfig.from_dict(extra.get("corpus_config", dg.CorpusConfig().to_dict()))
    return model, vocab, cfg


def cmd_infer(args) -> int:
    model, vocab, cfg = _load_model(args.checkpoint)
    if not args.image:
        raise UsageError("at least one --image is required")
    images = [load_png(p) for p in args.image]
    memory = MemoryConfig.for_group(args.memory_group, model.config.layers)
    session = build_session(model, vocab, images, args.question, memory=memory,
                            budget=args.budget, min_crop_side=cfg.min_crop_side)
    result = generate(session)
    transcript = {
        "question": args.question,
        "chain": grammar.render_sequence(result.generated, vocab),
        "answer": result.answer,
        "truncated": result.truncated,
        "diagnostics": result.diagnostics,
        "trigger_events": [
            {"step": e.step, "image": e.image_id, "box": list(e.box),
             "crop_tokens": e.crop_tokens, "skipped": e.skipped}
            for e in result.trigger_events
        ],
        "step_times_ms": [1000.0 * t for t in result.step_times],
        "crop_extractions": result.crop_extractions,
        "refinement_calls": result.refinement_calls,
    }
    print(transcript["chain"])
    print(f"answer: {result.answer}")
    if args.out:
        Path(args.out).write_text(
            json.dumps(transcript, indent=2, sort_keys=True), encoding="utf-8")
    return 0


def cmd_evaluate(args) -> int:
    model, vocab, cfg = _load_model(args.checkpoint)
    task = harness.EvalTask(args.family, args.count, args.seed)
    instances = harness.build_eval_instances(task, cfg)
    memory = MemoryConfig.for_group(args.memory_group, model.config.layers)
    result = harness.evaluate(model, vocab, instances, memory, budget=args.budget,
                              min_crop_side=cfg.min_crop_side)
    print(f"{args.family}: accuracy {result.accuracy:.3f} over {args.count} instances "
          f"(memory group {args.memory_group})")
    if args.out:
        rows = [harness.AblationRow(args.memory_group, len(memory.layer_set),
                                    0.0, result.accuracy, args.seed)]
        harness.emit_reports(rows, args.out, name=f"eval_{args.family}")
    return 0


def cmd_ablate(args) -> int:
    model, vocab, cfg = _load_model(args.checkpoint)
    groups = [int(g) for g in args.groups.split(",") if g != ""]
    task = harness.EvalTask(args.family, args.count, args.seed)
    instances = harness.build_eval_instances(task, cfg)
    warmup = args.warmup
    if warmup is None:
        warmup = min(harness.DEFAULT_WARMUP_TOKENS, args.budget // 4)
    rows = harness.run_ablation(
        model, vocab, instances, groups=groups, repeats=args.repeats,
        warmup_tokens=warmup, budget=args.budget, seed=args.seed,
        min_crop_side=cfg.min_crop_side)
    path = harness.emit_reports(rows, args.out)
    for r in rows:
        print(f"group {r.group}: layers {r.active_layers:3d} "
              f"latency {r.latency_ms:8.3f} ms/token accuracy {r.accuracy:.3f}")
    print(f"report written to {path}")
    return 0


def cmd_report(args) -> int:
    rows = []
    for path in args.inputs:
        rows.extend(harness.read_report(path))
    if not rows:
        raise ValueError("no report rows found")
    print(f"{'group':>5} {'layers':>6} {'latency_ms':>12} {'accuracy':>9} {'seed':>5}")
    for r in rows:
        print(f"{r.group:>5} {r.active_layers:>6} {r.latency_ms:>12.3f} "
              f"{r.accuracy:>9.3f} {r.seed:>5}")
    if args.out:
        harness.emit_reports(rows, args.out, name="combined")
    return 0


_COMMANDS = {
    "datagen": cmd_datagen,
    "train": cmd_train,
    "infer": cmd_infer,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


def _all_defaults(parser) -> dict:
    defaults = {}
    stack = [parser]
    while stack:
        p = stack.pop()
        for action in p._actions:
            if isinstance(action, argparse._SubParsersAction):
                stack.extend(action.choices.values())
            elif action.dest != "help":
                defaults.setdefault(action.dest, action.default)
    return defaults


def _apply_config(parser, args) -> None:
    """Config-file values fill any option left at its parser default."""
    doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
    defaults = _all_defaults(parser)
    for key, value in doc.items():
        dest = key.replace("-", "_")
        if not hasattr(args, dest):
            raise UsageError(f"unknown config key {key!r}")
        if getattr(args, dest) == defaults.get(dest):
            setattr(args, dest, value)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.config:
            _apply_config(parser, args)
        torch.set_num_threads(max(1, args.threads))
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except training.DivergenceError as exc:
        print(f"divergence abort: {exc}", file=sys.stderr)
        return 3
    except (OSError, ValueError, KeyError, json.JSONDecodeError, RuntimeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
