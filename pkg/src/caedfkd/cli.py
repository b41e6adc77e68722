"""Command-line entry point: ``caedfkd <subcommand> [flags]``.

Subcommands: init-embeddings, pretrain-teacher, distill, eval, ablate and
report. Every stage reads its settings from one validated config file plus
the global flags ``--config``, ``--seed``, ``--out-dir`` and ``--force``.
The only environment variable consulted is ``CAE_OUT_ROOT``, which roots
relative output paths.

Errors print one JSON line on stderr and exit with a status taken from
``EXIT_CODES``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import yaml

from .config import RunConfig, config_from_dict, load_config, save_config
from .diagnostics import evaluate_accuracy
from .embedding_space import ingest_embedding_file, make_categories, write_embedding_file
from .errors import CAEError, ConfigError, FormatError, OutputError, TrainingError
from .harness import AblationPlan, Lab, emit_report, read_metrics, run_ablation, summarize_cells
from .nets import load_network, pretrain_teacher, save_checkpoint
from .toydata import class_names, load_cifar_directory, make_toy_dataset
from .trainer import build_space, distill

OUT_ROOT_ENV = "CAE_OUT_ROOT"

# stable exit statuses; argparse usage errors exit with 2
EXIT_CODES = {
    "ok": 0,
    "CAEError": 1,
    "usage": 2,
    "ConfigError": 3,
    "FormatError": 4,
    "TrainingError": 5,
    "OutputError": 6,
    "internal": 70,
}

log = logging.getLogger("caedfkd")


def _resolve_out(path: str | Path) -> Path:
    path = Path(path)
    root = os.environ.get(OUT_ROOT_ENV)
    if root and not path.is_absolute():
        path = Path(root) / path
    return path


def _run_dir(args, cfg: RunConfig, command: str) -> Path:
    """Pick the run directory and refuse to reuse a non-empty one without ``--force``."""
    if args.out_dir:
        path = _resolve_out(args.out_dir)
    elif cfg.output_dir:
        path = _resolve_out(cfg.output_dir)
    else:
        path = _resolve_out(Path("runs") / f"{command}-{cfg.digest()}")
    if path.exists() and (not path.is_dir() or any(path.iterdir())) and not args.force:
        raise OutputError(f"run directory {path} already exists (pass --force to overwrite)")
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OutputError(f"cannot create run directory {path}: {exc.strerror or exc}") from None
    return path


def _guard_file(path: Path, force: bool) -> Path:
    if path.exists() and not force:
        raise OutputError(f"{path} already exists (pass --force to overwrite)")
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else config_from_dict({})
    if args.seed is not None:
        cfg = cfg.replace({"seed": args.seed})
    return cfg


def _emit(obj: dict) -> None:
    print(json.dumps(obj, sort_keys=True))


# --------------------------------------------------------------------------
# subcommands


def cmd_init_embeddings(args) -> int:
    cfg = _config(args)
    space = build_space(cfg, class_names(cfg.data.recipe, cfg.data.K))
    if args.out:
        target = _guard_file(_resolve_out(args.out), args.force)
    else:
        run = _run_dir(args, cfg, "init-embeddings")
        save_config(cfg, run / "config.yaml")
        target = run / "embeddings.caee"
    write_embedding_file(space, target)
    _emit({"embeddings": str(target), "K": space.num_categories, "D": space.dim, "provider": space.provider_id})
    return 0


def cmd_pretrain_teacher(args) -> int:
    cfg = _config(args)
    train, test = make_toy_dataset(cfg.data.recipe, cfg.data.K, cfg.data.per_class, cfg.seed, cfg.data.test_fraction)
    if args.out:
        target = _guard_file(_resolve_out(args.out), args.force)
    else:
        run = _run_dir(args, cfg, "pretrain-teacher")
        save_config(cfg, run / "config.yaml")
        target = run / "teacher.ckpt"
    t = cfg.teacher
    _, ckpt, acc = pretrain_teacher(train, test, epochs=t.epochs, lr=t.lr, batch_size=t.batch_size, seed=cfg.seed,
                                    accuracy_floor=t.accuracy_floor, num_classes=cfg.data.K)
    save_checkpoint(ckpt, target)
    _emit({"checkpoint": str(target), "teacher_acc": acc})
    return 0


def cmd_distill(args) -> int:
    cfg = _config(args)
    teacher = load_network(args.teacher, role="teacher")
    if teacher.num_classes != cfg.data.K:
        raise ConfigError(f"teacher has {teacher.num_classes} classes but data.K is {cfg.data.K}")
    train, test = make_toy_dataset(cfg.data.recipe, cfg.data.K, cfg.data.per_class, cfg.seed, cfg.data.test_fraction)
    run = _run_dir(args, cfg, "distill")
    save_config(cfg, run / "config.yaml")
    space = None
    if cfg.embeddings.strategy == "cend":
        if args.embeddings:
            categories = make_categories(train.class_names[: cfg.data.K])
            space = ingest_embedding_file(args.embeddings, categories, cfg.embeddings.prompt_mode)
        else:
            space = build_space(cfg, train.class_names)
        write_embedding_file(space, run / "embeddings.caee")
    result = distill(cfg, teacher, test, space, run_dir=run)
    emit_report(result.records, run)
    save_checkpoint(result.student, run / "student.ckpt")
    save_checkpoint(result.generator, run / "generator.ckpt")
    teacher_acc = evaluate_accuracy(teacher, test)
    _emit({
        "run_dir": str(run),
        "student_acc": result.records[-1].student_acc,
        "teacher_acc": teacher_acc,
        "config_digest": cfg.digest(),
    })
    return 0


def _eval_split(args, cfg: RunConfig):
    data = args.data
    if data and Path(data).is_dir():
        train, test = load_cifar_directory(data, cfg.data.K)
    else:
        recipe = data or cfg.data.recipe
        train, test = make_toy_dataset(recipe, cfg.data.K, cfg.data.per_class, cfg.seed, cfg.data.test_fraction)
    return train if args.split == "train" else test


def cmd_eval(args) -> int:
    cfg = _config(args)
    net = load_network(args.ckpt)
    if net.role not in ("teacher", "student"):
        raise ConfigError(f"cannot evaluate a {net.role} checkpoint; pass a teacher or student")
    split = _eval_split(args, cfg)
    _emit({"checkpoint": str(args.ckpt), "role": net.role, "split": split.split, "accuracy": evaluate_accuracy(net, split)})
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    plan_path = Path(args.plan)
    if not plan_path.exists():
        raise ConfigError(f"plan file {plan_path} does not exist")
    try:
        raw = yaml.safe_load(plan_path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {plan_path}: {exc}") from None
    plan = AblationPlan.from_dict(raw or {}, cfg)
    run = _run_dir(args, cfg, "ablate")
    save_config(plan.base, run / "config.yaml")
    (run / "plan.yaml").write_text(yaml.safe_dump(raw, sort_keys=True))
    rows = run_ablation(plan, run, Lab())
    failed = sum(r["status"] != "ok" for r in rows)
    _emit({"run_dir": str(run), "cells": len(rows), "failed": failed, "mean_final_acc": summarize_cells(rows)})
    return 0


def cmd_report(args) -> int:
    run = Path(args.run_dir)
    records = read_metrics(run)
    if not records:
        raise ConfigError(f"metrics stream in {run} is empty")
    files = emit_report(records, Path(args.out_dir) if args.out_dir else run)
    _emit({"files": [str(f) for f in files], "epochs": len(records), "final_acc": records[-1].student_acc})
    return 0


# --------------------------------------------------------------------------
# parser and dispatch


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run config (needs data and seed sections)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out-dir", help=f"run directory (relative paths go under ${OUT_ROOT_ENV} when set)")
    common.add_argument("--force", action="store_true", help="allow overwriting an existing run directory")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="caedfkd", description="Category-aware embedding data-free distillation lab")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("init-embeddings", parents=[common], help="build the category embedding file")
    p.add_argument("--out", help="embedding file to write instead of <run-dir>/embeddings.caee")
    p.set_defaults(func=cmd_init_embeddings)

    p = sub.add_parser("pretrain-teacher", parents=[common], help="train and save the teacher")
    p.add_argument("--out", help="checkpoint path instead of <run-dir>/teacher.ckpt")
    p.set_defaults(func=cmd_pretrain_teacher)

    p = sub.add_parser("distill", parents=[common], help="run data-free distillation")
    p.add_argument("--teacher", required=True, help="teacher checkpoint")
    p.add_argument("--embeddings", help="precomputed embedding file (default: build from config)")
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("eval", parents=[common], help="held-out accuracy of a checkpoint")
    p.add_argument("--ckpt", required=True, help="teacher or student checkpoint")
    p.add_argument("--data", help="toy recipe id or a CIFAR-format directory (default: config recipe)")
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", parents=[common], help="run an ablation plan")
    p.add_argument("--plan", required=True, help="YAML plan: axis, values, repetitions, overrides")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", parents=[common], help="re-emit summary and plots for a run")
    p.add_argument("--run-dir", required=True, help="directory holding metrics.jsonl")
    p.set_defaults(func=cmd_report)
    return parser


def _fail(exc: BaseException, code: int) -> int:
    kind = type(exc).__name__
    print(json.dumps({"error": kind, "message": str(exc), "exit": code}), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FormatError, TrainingError, OutputError) as exc:
        return _fail(exc, EXIT_CODES[type(exc).__name__])
    except CAEError as exc:
        return _fail(exc, EXIT_CODES["CAEError"])
    except FileNotFoundError as exc:
        return _fail(ConfigError(f"no such file: {exc.filename}"), EXIT_CODES["ConfigError"])
    except Exception as exc:  # anything unexpected still yields one JSON line
        log.debug("unhandled error", exc_info=True)
        return _fail(exc, EXIT_CODES["internal"])


if __name__ == "__main__":
    sys.exit(main())
