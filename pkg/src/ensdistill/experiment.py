"""Run orchestration: single training runs with metrics CSV + checkpoints,
and the multi-seed paired ensemble-vs-baseline comparison protocol.

Every run is reproducible from (config file, seed) alone. The comparison
uses matched initialization per (student, arm): each baseline student is a
bit-identical copy of the corresponding freshly initialized ensemble branch,
so accuracy differences are attributable to the training method.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .checkpoint import assign_parameters, load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import DatasetBundle, load_dataset, synth_dataset
from .ensemble import EnsembleModel, StudentModel, build_ensemble, extract_student
from .evaluate import mean_student_accuracy, weighted_student_average
from .train import (
    EpochRecord,
    TrainingState,
    load_training_checkpoint,
    save_training_checkpoint,
    train,
)

METRICS_SCHEMA = "# ensdistill-metrics-v1"


def load_run_dataset(cfg: RunConfig) -> DatasetBundle:
    if cfg.data_path:
        return load_dataset(cfg.data_path)
    synth = cfg.synth
    return synth_dataset(
        classes=int(synth["classes"]), per_class=int(synth["per_class"]),
        height=int(synth["size"]), width=int(synth["size"]),
        seed=int(synth["seed"]), test_per_class=int(synth["test_per_class"]),
        channels=int(synth["channels"]), noise=float(synth["noise"]))


def metrics_header(student_count: int) -> str:
    columns = ["epoch", "lr", "loss_normal", "loss_intermediate", "loss_kd", "loss_combined"]
    columns += [f"acc_student_{i}" for i in range(1, student_count + 1)]
    columns.append("acc_teacher")
    return ",".join(columns)


def format_metrics_row(record: EpochRecord) -> str:
    cells = [str(record.epoch), f"{record.lr:.6g}",
             f"{record.loss_normal:.8f}", f"{record.loss_intermediate:.8f}",
             f"{record.loss_kd:.8f}", f"{record.loss_combined:.8f}"]
    cells += [f"{acc:.4f}" for acc in record.student_acc]
    cells.append("" if record.teacher_acc is None else f"{record.teacher_acc:.4f}")
    return ",".join(cells)


def _run_score(state: TrainingState, mode: str) -> float:
    """Checkpoint selection score: teacher accuracy for ensemble runs, mean
    student accuracy for baseline runs."""
    if mode == "ensemble":
        return state.best_teacher_accuracy()
    return mean_student_accuracy(state.best_accuracies())


@dataclass
class RunSummary:
    seed: int
    mode: str
    best_student_acc: list[float]
    best_teacher_acc: float | None
    history: list[EpochRecord]


def _collect_params(model_or_students):
    if isinstance(model_or_students, EnsembleModel):
        return model_or_students.parameters()
    registry = {}
    for k, student in enumerate(model_or_students, start=1):
        for name, p in student.parameters().items():
            registry[f"m{k}.{name}"] = p
    return registry


def run_train(cfg: RunConfig, out_dir, seed: int | None = None, mode: str | None = None,
              resume=None, stop_after_epoch: int | None = None,
              dataset: DatasetBundle | None = None) -> RunSummary:
    """Train one run, writing metrics.csv, last.ckpt and best.ckpt under
    ``out_dir``. ``resume`` continues from a last.ckpt written by an earlier
    (interrupted) invocation of the same config and seed."""
    seed = cfg.seeds[0] if seed is None else seed
    mode = cfg.mode if mode is None else mode
    train_config = cfg.train_config(seed, mode)
    data = load_run_dataset(cfg) if dataset is None else dataset
    os.makedirs(out_dir, exist_ok=True)
    metrics_path = os.path.join(out_dir, "metrics.csv")
    config_hash = cfg.config_hash(seed)

    model = build_ensemble(cfg.arch, cfg.students, seed, teacher_weights=cfg.teacher_weights)
    state = None
    students = None

    if resume is not None:
        if mode == "ensemble":
            registry = model.parameters()
        else:
            students = [extract_student(model, i) for i in range(1, cfg.students + 1)]
            registry = _collect_params(students)
        state = load_training_checkpoint(resume, registry, config_hash)
    else:
        with open(metrics_path, "w", encoding="utf-8") as fh:
            fh.write(METRICS_SCHEMA + "\n")
            fh.write(metrics_header(cfg.students) + "\n")

    best_score = _run_score(state, mode) if state is not None else -1.0

    def on_epoch(record, trained, epoch_state):
        nonlocal best_score
        registry = _collect_params(trained)
        with open(metrics_path, "a", encoding="utf-8") as fh:
            fh.write(format_metrics_row(record) + "\n")
        save_training_checkpoint(os.path.join(out_dir, "last.ckpt"), registry, epoch_state, config_hash)
        score = _run_score(epoch_state, mode)
        if score > best_score:
            best_score = score
            save_training_checkpoint(os.path.join(out_dir, "best.ckpt"), registry, epoch_state, config_hash)

    state, history = train(model, data, train_config, state=state,
                           stop_after_epoch=stop_after_epoch, on_epoch=on_epoch, students=students)
    return RunSummary(
        seed=seed, mode=mode,
        best_student_acc=state.best_accuracies(),
        best_teacher_acc=state.best_teacher_accuracy() if mode == "ensemble" else None,
        history=history)


@dataclass
class CompareReport:
    """Aggregated paired comparison over seeds. Accuracies are means over
    runs of the best per-student test accuracy within each run."""

    seeds: list[int]
    baseline_mean: list[float]  # per student
    ensemble_mean: list[float]
    teacher_mean: float
    baseline_runs: list[list[float]]  # [run][student]
    ensemble_runs: list[list[float]]
    teacher_runs: list[float]

    @property
    def baseline_weighted_average(self) -> float:
        return weighted_student_average(self.baseline_mean)

    @property
    def ensemble_weighted_average(self) -> float:
        return weighted_student_average(self.ensemble_mean)

    @property
    def baseline_mean_accuracy(self) -> float:
        return mean_student_accuracy(self.baseline_mean)

    @property
    def ensemble_mean_accuracy(self) -> float:
        return mean_student_accuracy(self.ensemble_mean)


def run_compare(cfg: RunConfig, out_dir, seeds: list[int] | None = None) -> CompareReport:
    """Paired ensemble-vs-baseline arms over the configured seeds."""
    seeds = list(cfg.seeds) if seeds is None else list(seeds)
    os.makedirs(out_dir, exist_ok=True)
    dataset = load_run_dataset(cfg)
    ensemble_runs, baseline_runs, teacher_runs = [], [], []
    for seed in seeds:
        ens = run_train(cfg, os.path.join(out_dir, f"seed{seed}", "ensemble"),
                        seed=seed, mode="ensemble", dataset=dataset)
        base = run_train(cfg, os.path.join(out_dir, f"seed{seed}", "baseline"),
                         seed=seed, mode="baseline", dataset=dataset)
        ensemble_runs.append(ens.best_student_acc)
        baseline_runs.append(base.best_student_acc)
        teacher_runs.append(ens.best_teacher_acc)
    ensemble_mean = [float(np.mean([run[i] for run in ensemble_runs])) for i in range(cfg.students)]
    baseline_mean = [float(np.mean([run[i] for run in baseline_runs])) for i in range(cfg.students)]
    report = CompareReport(
        seeds=seeds, baseline_mean=baseline_mean, ensemble_mean=ensemble_mean,
        teacher_mean=float(np.mean(teacher_runs)),
        baseline_runs=baseline_runs, ensemble_runs=ensemble_runs, teacher_runs=teacher_runs)
    _write_compare_csv(os.path.join(out_dir, "compare.csv"), report)
    return report


def _write_compare_csv(path, report: CompareReport) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# ensdistill-compare-v1\n")
        fh.write("student,baseline_acc,ensemble_acc,delta\n")
        for i, (b, e) in enumerate(zip(report.baseline_mean, report.ensemble_mean), start=1):
            fh.write(f"{i},{b:.4f},{e:.4f},{e - b:+.4f}\n")
        fh.write(f"teacher,,{report.teacher_mean:.4f},\n")
        fh.write(f"weighted_average,{report.baseline_weighted_average:.4f},"
                 f"{report.ensemble_weighted_average:.4f},"
                 f"{report.ensemble_weighted_average - report.baseline_weighted_average:+.4f}\n")
        fh.write(f"mean_accuracy,{report.baseline_mean_accuracy:.4f},"
                 f"{report.ensemble_mean_accuracy:.4f},"
                 f"{report.ensemble_mean_accuracy - report.baseline_mean_accuracy:+.4f}\n")


def format_compare_table(report: CompareReport) -> str:
    lines = ["student  baseline  ensemble   delta"]
    for i, (b, e) in enumerate(zip(report.baseline_mean, report.ensemble_mean), start=1):
        lines.append(f"{i:>7}  {b:8.2f}  {e:8.2f}  {e - b:+6.2f}")
    lines.append(f"teacher  {'':8}  {report.teacher_mean:8.2f}")
    lines.append(f"weighted average: baseline {report.baseline_weighted_average:.2f}, "
                 f"ensemble {report.ensemble_weighted_average:.2f}")
    lines.append(f"mean accuracy:    baseline {report.baseline_mean_accuracy:.2f}, "
                 f"ensemble {report.ensemble_mean_accuracy:.2f}")
    return "\n".join(lines)


def write_student_checkpoint(path, student: StudentModel, config_hash: bytes) -> None:
    """Persist an extracted standalone student (no optimizer state)."""
    params = {name: p.data for name, p in student.parameters().items()}
    meta = {"meta.student_index": np.array([student.student_index], dtype=np.float32)}
    save_checkpoint(path, params, meta, config_hash)


def load_any_checkpoint(path, cfg: RunConfig, seed: int):
    """Rebuild the model a checkpoint belongs to: a full ensemble, a baseline
    student set, or an extracted standalone student (meta.student_index)."""
    payload, table, stored_hash = load_checkpoint(path)
    if stored_hash != cfg.config_hash(seed):
        raise ValueError(f"{path}: checkpoint does not match this configuration and seed")
    model = build_ensemble(cfg.arch, cfg.students, seed, teacher_weights=cfg.teacher_weights)
    if "meta.student_index" in table:
        index = int(table["meta.student_index"][0])
        student = extract_student(model, index)
        assign_parameters(student.parameters(), payload, path)
        return student
    if any(name.startswith("m1.") for name in payload):
        students = [extract_student(model, i) for i in range(1, cfg.students + 1)]
        assign_parameters(_collect_params(students), payload, path)
        return students
    assign_parameters(model.parameters(), payload, path)
    return model
