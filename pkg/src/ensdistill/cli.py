"""Command-line surface.

Commands:
    train      run one training run (ensemble or baseline per config)
    eval       evaluate a checkpoint on the configured dataset
    extract    write one student out of an ensemble checkpoint
    gradcheck  run the finite-difference oracle suite
    synth      generate a synthetic DSB1 dataset file
    compare    paired multi-seed ensemble-vs-baseline comparison

Exit codes: 0 ok, 1 validation error, 2 runtime error, 3 oracle failure.
"""

from __future__ import annotations

import argparse
import sys

from . import experiment, oracle
from .checkpoint import CheckpointError
from .config import ConfigError, default_config, parse_config_file
from .data import DatasetError, save_dataset, synth_dataset
from .ensemble import EnsembleModel, StudentModel, extract_student
from .evaluate import metrics_from_accuracies
from .layers import SpecError
from .train import TrainingDiverged, evaluate_ensemble, evaluate_single


def _load_config(args):
    if getattr(args, "config", None):
        return parse_config_file(args.config)
    return default_config()


def _seed(args, cfg):
    return args.seed if args.seed is not None else cfg.seeds[0]


def cmd_train(args) -> int:
    cfg = _load_config(args)
    summary = experiment.run_train(cfg, args.out, seed=_seed(args, cfg), resume=args.resume)
    accs = ", ".join(f"s{i + 1}={a:.2f}" for i, a in enumerate(summary.best_student_acc))
    print(f"run complete: best accuracies {accs}" +
          (f", teacher={summary.best_teacher_acc:.2f}" if summary.best_teacher_acc is not None else ""))
    print(f"metrics: {args.out}/metrics.csv  checkpoints: {args.out}/last.ckpt, {args.out}/best.ckpt")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    model = experiment.load_any_checkpoint(args.ckpt, cfg, _seed(args, cfg))
    data = experiment.load_run_dataset(cfg)
    if isinstance(model, EnsembleModel):
        correct, teacher_correct, total = evaluate_ensemble(model, data)
        accs = [100.0 * c / total for c in correct]
        metrics = metrics_from_accuracies(accs, 100.0 * teacher_correct / total)
        for i, acc in enumerate(metrics.per_student_top1, start=1):
            print(f"student {i}: {acc:.4f}")
        print(f"teacher:   {metrics.teacher_top1:.4f}")
        print(f"weighted average: {metrics.weighted_average:.4f}")
        print(f"mean accuracy:    {metrics.mean_accuracy:.4f}")
    elif isinstance(model, StudentModel):
        correct, total = evaluate_single(model, data)
        print(f"student {model.student_index}: {100.0 * correct / total:.4f}")
    else:
        for student in model:
            correct, total = evaluate_single(student, data)
            print(f"student {student.student_index}: {100.0 * correct / total:.4f}")
    return 0


def cmd_extract(args) -> int:
    cfg = _load_config(args)
    seed = _seed(args, cfg)
    model = experiment.load_any_checkpoint(args.ckpt, cfg, seed)
    if not isinstance(model, EnsembleModel):
        print("error: extract needs an ensemble checkpoint", file=sys.stderr)
        return 1
    student = extract_student(model, args.student)
    experiment.write_student_checkpoint(args.out, student, cfg.config_hash(seed))
    n_params = sum(p.data.size for p in student.parameters().values())
    print(f"wrote student {args.student} (ratio {student.ratio:.3f}, {n_params} parameters) to {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    entries = oracle.run_suite(step=args.step, tolerance=args.tolerance)
    failed = 0
    for entry in entries:
        status = "ok" if entry.passed else "FAIL"
        print(f"{status:>4}  {entry.name:<24} max rel err {entry.report.max_rel_error:.3e} "
              f"(tolerance {entry.report.tolerance:.0e}, {entry.report.checked} coordinates)")
        if not entry.passed:
            failed += 1
    if failed:
        print(f"{failed} gradient check(s) failed", file=sys.stderr)
        return 3
    print("all gradient checks passed")
    return 0


def cmd_synth(args) -> int:
    bundle = synth_dataset(classes=args.classes, per_class=args.per_class,
                           height=args.size, width=args.size, seed=args.seed,
                           test_per_class=args.test_per_class, noise=args.noise)
    save_dataset(bundle, args.out)
    print(f"wrote {bundle.train_images.shape[0]} train / {bundle.test_images.shape[0]} test "
          f"samples ({args.classes} classes, {args.size}x{args.size}) to {args.out}")
    return 0


def cmd_compare(args) -> int:
    cfg = _load_config(args)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    report = experiment.run_compare(cfg, args.out, seeds=seeds)
    print(experiment.format_compare_table(report))
    print(f"details: {args.out}/compare.csv")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ensdistill",
                                     description="Online ensemble knowledge-distillation trainer")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train an ensemble (or baseline) run")
    p.add_argument("--config", help="config file (defaults apply when omitted)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="override the first configured seed")
    p.add_argument("--resume", default=None, help="continue from a last.ckpt")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--config", help="config file")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("extract", help="extract one student from an ensemble checkpoint")
    p.add_argument("--config", help="config file")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--student", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("gradcheck", help="run the finite-difference oracle suite")
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", help="generate a synthetic dataset file")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--per-class", type=int, default=400, dest="per_class")
    p.add_argument("--test-per-class", type=int, default=None, dest="test_per_class")
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--noise", type=float, default=0.12)
    p.add_argument("--seed", type=int, default=1234)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("compare", help="paired ensemble-vs-baseline comparison over seeds")
    p.add_argument("--config", help="config file")
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", default=None, help="comma-separated seed list (overrides config)")
    p.set_defaults(func=cmd_compare)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    # CheckpointError subclasses ValueError, so runtime failures go first
    except (CheckpointError, TrainingDiverged, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except (ConfigError, SpecError, DatasetError, ValueError, IndexError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
