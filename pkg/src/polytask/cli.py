"""Command-line entry points.

Exit codes: 0 success, 1 usage or validation error, 2 training divergence,
3 I/O error. All commands are non-interactive.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import List, Optional

from . import config as config_mod
from . import data as data_mod
from .config import ConfigError
from .curves import emit_learning_curves
from .evaluation import evaluate
from .gradcheck import run_all
from .training import Trainer, TrainingDiverged, load_checkpoint

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DIVERGED = 2
EXIT_IO = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad flags; route through our exit codes
    def error(self, message):
        raise UsageError(message)


def build_parser() -> _Parser:
    p = _Parser(prog="polytask", description="Unified multitask transformer toolkit")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, output_required=False):
        sp.add_argument("--config", help="YAML config file; omitted keys use desk-scale defaults")
        sp.add_argument("--output-dir", required=output_required, help="directory for run outputs")
        sp.add_argument("--seed", type=int, help="override run.seed")
        sp.add_argument("--tasks", help="comma-separated task subset")
        sp.add_argument("--iterations", type=int, help="override run.iterations")

    common(sub.add_parser("train", help="train a model and log metrics"), output_required=True)
    sp = sub.add_parser("eval", help="evaluate a checkpoint on validation data")
    common(sp)
    sp.add_argument("--checkpoint", required=True, help="checkpoint file to evaluate")
    sp = sub.add_parser("generate-data", help="export synthetic datasets to disk")
    common(sp, output_required=True)
    sp = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--iterations", type=int, default=20, help="instances per case")
    sp = sub.add_parser("plot-curves", help="render learning curves from a metrics log")
    sp.add_argument("log", help="metrics log file (one record per line)")
    sp.add_argument("--output-dir", help="directory for the SVG (default: next to the log)")
    return p


def _task_list(arg: Optional[str]) -> Optional[List[str]]:
    if arg is None:
        return None
    tasks = [t.strip() for t in arg.split(",") if t.strip()]
    if not tasks:
        raise ConfigError("empty task list")
    return tasks


def _load_cfg(args) -> dict:
    cfg = config_mod.load_config(args.config)
    return config_mod.apply_overrides(
        cfg,
        seed=getattr(args, "seed", None),
        iterations=getattr(args, "iterations", None),
        tasks=_task_list(getattr(args, "tasks", None)),
    )


def _prepare_output_dir(out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    probe = out_dir / ".write_probe"
    probe.write_text("")
    probe.unlink()


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    out_dir = Path(args.output_dir)
    _prepare_output_dir(out_dir)
    config_mod.dump_config(cfg, out_dir / "config.yaml")
    vocab = data_mod.build_vocabulary()
    vocab.save(out_dir / "vocab.txt")
    model = config_mod.build_model_from_config(cfg, vocab)
    print(f"model parameters: {model.num_parameters()}")
    print(f"decoder stack parameters: {model.decoder.stack_parameter_count()}")
    trainer = Trainer(model, config_mod.to_train_config(cfg), out_dir=out_dir, vocab=vocab)
    records = trainer.run()
    for r in records:
        if r["split"] == "val" and r["iteration"] == cfg["run"]["iterations"]:
            print(f'{r["task"]} {r["metric_name"]} {r["value"]:.6f}')
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    vocab = data_mod.build_vocabulary()
    model = config_mod.build_model_from_config(cfg, vocab)
    report = load_checkpoint(args.checkpoint, model)
    iteration = int(report["meta"].get("iteration", 0))
    trainer = Trainer(model, config_mod.to_train_config(cfg), out_dir=None, vocab=vocab)
    model.eval()
    lines = []
    records = []
    for task in trainer.active_tasks:
        metrics = evaluate(model, task, trainer.val_sets[task], batch_size=cfg["training"]["batch_size"])
        for metric_name, value in metrics.items():
            lines.append(f"{task} {metric_name} {value:.6f}")
            records.append(
                {
                    "iteration": iteration,
                    "task": task,
                    "split": "val",
                    "metric_name": metric_name,
                    "value": value,
                    "learning_rate": 0.0,
                }
            )
    for line in lines:
        print(line)
    if args.output_dir:
        out_dir = Path(args.output_dir)
        _prepare_output_dir(out_dir)
        with open(out_dir / "eval_metrics.jsonl", "w") as f:
            for r in records:
                f.write(json.dumps(r, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_generate_data(args) -> int:
    cfg = _load_cfg(args)
    out_dir = Path(args.output_dir)
    _prepare_output_dir(out_dir)
    vocab = data_mod.build_vocabulary()
    vocab.save(out_dir / "vocab.txt")
    seed = cfg["run"]["seed"]
    names = cfg["tasks"]["names"]
    wanted = [t for t, p in zip(names, cfg["tasks"]["probs"]) if p > 0]
    train_count = args.iterations if args.iterations else cfg["training"]["train_pool"]
    for task in wanted:
        spec = data_mod.DEFAULT_TASKS[task]
        val_count = (
            cfg["training"]["val_detection"]
            if spec.head == "detection"
            else cfg["training"]["val_classification"]
        )
        for split, count in (("train", train_count), ("val", val_count)):
            ds = data_mod.SyntheticDataset(task, split, seed, count, vocab)
            data_mod.export_dataset(ds, out_dir / f"{task}_{split}")
            print(f"wrote {task} {split}: {count} samples")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_all(seed=args.seed, instances=args.iterations)
    failed = 0
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{r.name}: max_rel_err={r.max_rel_err:.3e} tol={r.tolerance:.0e} {status}")
        failed += 0 if r.passed else 1
    print(f"{len(results) - failed}/{len(results)} gradient cases passed")
    return EXIT_OK if failed == 0 else EXIT_USAGE


def cmd_plot_curves(args) -> int:
    log = Path(args.log)
    out_dir = Path(args.output_dir) if args.output_dir else log.parent
    _prepare_output_dir(out_dir)
    out = out_dir / "curves.svg"
    emit_learning_curves(log, out)
    print(f"wrote {out}")
    return EXIT_OK


_COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "generate-data": cmd_generate_data,
    "gradcheck": cmd_gradcheck,
    "plot-curves": cmd_plot_curves,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return _COMMANDS[args.command](args)
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
