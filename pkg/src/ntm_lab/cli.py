"""``ntm-lab`` command line: train, eval and gen subcommands."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, read_checkpoint, load_checkpoint
from .experiment import SPEC_FIELDS, SpecError, build_spec, parse_config_text, run_experiment
from .tasks import TASKS, generate, write_jsonl
from .training import evaluate

log = logging.getLogger("ntm_lab")

# flags forwarded into ExperimentSpec when given
SPEC_FLAGS = [
    ("N", int), ("W", int), ("read_heads", int), ("write_heads", int), ("shift_range", int),
    ("controller_units", int), ("controller_layers", int), ("clip_bound", float), ("clip_target", str),
    ("lstm_units", int), ("lstm_layers", int), ("bits", int), ("len_min", int), ("len_max", int),
    ("repeat_min", int), ("repeat_max", int), ("items_min", int), ("items_max", int),
    ("learning_rate", float), ("max_grad_norm", float), ("batch_size", int), ("total_steps", int),
    ("eval_every", int), ("eval_examples", int), ("stop_below", float), ("checkpoint_every", int),
]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ntm-lab", description="Neural Turing Machine experiments")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one or more seeds and write learning curves")
    t.add_argument("--config", type=Path, help="key=value settings file; flags override it")
    t.add_argument("--task", choices=TASKS)
    t.add_argument("--model", choices=("ntm", "lstm"))
    t.add_argument("--init", dest="init_scheme", choices=("constant", "learned", "random"))
    t.add_argument("--runs", dest="num_runs", type=int)
    t.add_argument("--seed", dest="base_seed", type=int)
    t.add_argument("--preset", choices=("paper", "desk"))
    for name, typ in SPEC_FLAGS:
        t.add_argument("--" + name.replace("_", "-"), dest=name, type=typ)
    t.add_argument("--out", type=Path, required=True)
    t.add_argument("--jobs", type=int, default=1, help="parallel runs (capped by NTM_LAB_THREADS)")
    t.add_argument("--resume", action="store_true", help="continue runs from checkpoints in --out")

    e = sub.add_parser("eval", help="evaluate a checkpoint on fresh episodes")
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--task", choices=TASKS)
    e.add_argument("--examples", type=int, default=640)
    e.add_argument("--seed", type=int, default=0)

    g = sub.add_parser("gen", help="dump episodes as JSON lines")
    g.add_argument("--task", choices=TASKS, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--count", type=int, default=10)
    g.add_argument("--preset", choices=("paper", "desk"), default="paper")
    g.add_argument("--out", type=Path, required=True)
    return p


def cmd_train(args) -> int:
    settings = parse_config_text(args.config.read_text()) if args.config else {}
    flags = {k: v for k, v in vars(args).items() if k in SPEC_FIELDS and v is not None}
    spec = build_spec(settings, flags)
    outcomes = run_experiment(spec, args.out, jobs=args.jobs, resume=args.resume)
    failed = [o for o in outcomes if not o.ok]
    for o in outcomes:
        last = o.curve[-1] if o.curve else None
        status = "ok" if o.ok else "FAILED"
        tail = f" val_bits_per_seq={last.val_bits_per_seq:.4f}" if last else ""
        print(f"run {o.run_id} seed={o.seed} steps={o.steps} {status}{tail}")
    print(f"aggregate: {Path(args.out) / 'aggregate.csv'}")
    return 1 if failed else 0


def cmd_eval(args) -> int:
    state = read_checkpoint(args.checkpoint)
    cfg = state["config"]
    if args.task is not None and args.task != cfg.task.name:
        print(f"error: checkpoint was trained on {cfg.task.name!r}, not {args.task!r}", file=sys.stderr)
        return 2
    trainer = load_checkpoint(args.checkpoint)
    val_loss, bits = evaluate(trainer.model, cfg.task, args.examples, seed=args.seed)
    print("step,task,examples,val_loss,val_bits_per_seq")
    print(f"{trainer.step},{cfg.task.name},{args.examples},{val_loss!r},{bits!r}")
    return 0


def cmd_gen(args) -> int:
    spec = build_spec(overrides={"task": args.task, "preset": args.preset, "num_runs": 1})
    cfg = spec.task_config(seed=args.seed)
    rng = np.random.default_rng(args.seed)
    episodes = []
    for i in range(args.count):
        ep = generate(cfg, rng)
        ep.meta.update(seed=args.seed, index=i)
        episodes.append(ep)
    n = write_jsonl(episodes, args.out)
    print(f"wrote {n} episodes to {args.out}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * args.verbose, format="%(levelname)s %(name)s: %(message)s")
    try:
        return {"train": cmd_train, "eval": cmd_eval, "gen": cmd_gen}[args.command](args)
    except SpecError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
