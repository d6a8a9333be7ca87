"""Joint optimization loop: SGD with Nesterov momentum, the step learning-rate
schedule, per-batch loss assembly and checkpointable training state.

Ensemble mode trains the whole shared-base ensemble on the combined loss.
Baseline mode trains S separately built single-student models (extracted from
the freshly initialized ensemble, so initialization is matched pairwise) on
cross-entropy only; it is the individual-training comparison arm.

Training is a pure function of (architecture, config, dataset, seed): the
per-epoch shuffle stream is derived from (seed, epoch), so restoring a
checkpoint at an epoch boundary continues bit-identically.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import checkpoint as ckpt
from .autograd import Tensor, backward, no_grad
from .data import DatasetBundle, batches, epoch_seed
from .ensemble import EnsembleModel, extract_student, forward_ensemble
from .losses import LossWeights, cross_entropy_all, ensemble_losses

DEFAULT_LR_DROPS = ((0.5, 0.1), (0.75, 0.01))


class TrainingDiverged(RuntimeError):
    """Combined loss or a parameter update became non-finite."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_size: int = 64
    base_lr: float = 0.1
    momentum: float = 0.9
    nesterov: bool = True
    lr_drops: tuple[tuple[float, float], ...] = DEFAULT_LR_DROPS
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    mode: str = "ensemble"
    kd_teacher_grad: bool = False
    kd_t2_scale: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.mode not in ("ensemble", "baseline"):
            raise ValueError(f"mode must be 'ensemble' or 'baseline', got {self.mode!r}")
        prev_fraction = 0.0
        prev_multiplier = 1.0
        for fraction, multiplier in self.lr_drops:
            if not 0.0 < fraction < 1.0:
                raise ValueError(f"lr drop fraction {fraction} must be in (0, 1)")
            if fraction <= prev_fraction:
                raise ValueError("lr drop fractions must be strictly increasing")
            if not 0.0 < multiplier <= prev_multiplier:
                raise ValueError("lr multipliers must be positive and non-increasing")
            prev_fraction = fraction
            prev_multiplier = multiplier


def lr_at(config: TrainConfig, epoch: int) -> float:
    """Piecewise-constant schedule: base_lr until the first drop point, then
    base_lr times the multiplier of the last crossed point."""
    if not 0 <= epoch < config.epochs:
        raise ValueError(f"epoch {epoch} out of range 0..{config.epochs - 1}")
    lr = config.base_lr
    for fraction, multiplier in config.lr_drops:
        if epoch >= fraction * config.epochs:
            lr = config.base_lr * multiplier
    return lr


@dataclass
class TrainingState:
    """Optimizer buffers and schedule position; round-trips through KDC1.

    Best accuracies are tracked as correct-prediction counts so the
    checkpoint payload (32-bit reals) stores them exactly.
    """

    step: int = 0
    epoch: int = 0
    velocities: dict[str, np.ndarray] = field(default_factory=dict)
    best_correct: list[int] = field(default_factory=list)
    best_teacher_correct: int = 0
    test_size: int = 0

    def best_accuracies(self) -> list[float]:
        if not self.test_size:
            return [0.0 for _ in self.best_correct]
        return [100.0 * c / self.test_size for c in self.best_correct]

    def best_teacher_accuracy(self) -> float:
        return 100.0 * self.best_teacher_correct / self.test_size if self.test_size else 0.0

    def to_table(self) -> dict[str, np.ndarray]:
        table = {f"velocity.{name}": buf for name, buf in self.velocities.items()}
        table["meta.progress"] = np.array([self.step, self.epoch], dtype=np.float32)
        table["meta.best_correct"] = np.array(self.best_correct, dtype=np.float32)
        table["meta.best_teacher_correct"] = np.array([self.best_teacher_correct], dtype=np.float32)
        table["meta.test_size"] = np.array([self.test_size], dtype=np.float32)
        return table

    @classmethod
    def from_table(cls, table: dict[str, np.ndarray]) -> "TrainingState":
        progress = table["meta.progress"]
        state = cls(step=int(progress[0]), epoch=int(progress[1]))
        state.best_correct = [int(v) for v in table["meta.best_correct"]]
        state.best_teacher_correct = int(table["meta.best_teacher_correct"][0])
        state.test_size = int(table["meta.test_size"][0])
        state.velocities = {name[len("velocity."):]: arr for name, arr in table.items()
                            if name.startswith("velocity.")}
        return state


def sgd_step(params: dict[str, Tensor], state: TrainingState, lr: float,
             momentum: float, nesterov: bool) -> None:
    """v <- mu*v + g; update = g + mu*v (Nesterov) or v; p <- p - lr*update.

    Missing gradients count as zero (parameters then decay only through
    momentum history). All gradients are cleared afterwards.
    """
    for name, p in params.items():
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.data.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} does not match parameter {p.data.shape}")
        v = state.velocities.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        elif v.shape != p.data.shape:
            raise ValueError(f"{name}: velocity shape {v.shape} does not match parameter {p.data.shape}")
        v = momentum * v + g
        update = g + momentum * v if nesterov else v
        if not np.all(np.isfinite(update)):
            raise TrainingDiverged(f"non-finite update for parameter {name}")
        state.velocities[name] = v
        p.data -= (lr * update).astype(p.data.dtype)
        p.grad = None
    state.step += 1


def clear_grads(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    loss_normal: float
    loss_intermediate: float
    loss_kd: float
    loss_combined: float
    student_acc: list[float]
    teacher_acc: float | None


def _count_correct(logits: np.ndarray, labels: np.ndarray) -> int:
    return int((logits.argmax(axis=1) == labels).sum())


def evaluate_ensemble(model: EnsembleModel, bundle: DatasetBundle,
                      batch_size: int = 256) -> tuple[list[int], int, int]:
    """Correct-prediction counts per student plus the teacher, on the test split."""
    correct = [0] * model.student_count
    teacher_correct = 0
    total = 0
    with no_grad():
        for x, labels in batches(bundle, batch_size, shuffle=False, split="test"):
            out = forward_ensemble(model, x)
            for i, logits in enumerate(out.logits):
                correct[i] += _count_correct(logits.data, labels)
            teacher_correct += _count_correct(out.teacher_logits.data, labels)
            total += labels.shape[0]
    return correct, teacher_correct, total


def evaluate_single(model, bundle: DatasetBundle, batch_size: int = 256) -> tuple[int, int]:
    correct = 0
    total = 0
    with no_grad():
        for x, labels in batches(bundle, batch_size, shuffle=False, split="test"):
            logits = model.forward(x)
            correct += _count_correct(logits.data, labels)
            total += labels.shape[0]
    return correct, total


def _check_finite(bundle_values, epoch: int, step: int) -> None:
    normal, inter, kd, combined = bundle_values
    if not np.isfinite(combined):
        raise TrainingDiverged(
            f"combined loss is non-finite at epoch {epoch}, step {step} "
            f"(normal={normal:.6g}, intermediate={inter:.6g}, kd={kd:.6g})")


def train(model: EnsembleModel, data: DatasetBundle, config: TrainConfig,
          state: TrainingState | None = None, stop_after_epoch: int | None = None,
          on_epoch=None, students=None) -> tuple[TrainingState, list[EpochRecord]]:
    """Run (or continue) training; returns final state and per-epoch records.

    ``state`` resumes from a checkpointed position. ``stop_after_epoch``
    halts early at an epoch boundary without changing the schedule, which is
    how mid-training checkpoints are exercised. ``on_epoch`` is called with
    each EpochRecord as it is produced (CSV writing, checkpoint cadence).
    ``students`` lets baseline mode continue restored standalone models
    instead of extracting fresh ones.
    """
    if data.num_classes != model.spec.num_classes:
        raise ValueError(f"dataset has {data.num_classes} classes, model expects {model.spec.num_classes}")
    if config.mode == "baseline":
        return _train_baseline(model, data, config, state, stop_after_epoch, on_epoch, students)
    return _train_ensemble(model, data, config, state, stop_after_epoch, on_epoch)


def _train_ensemble(model, data, config, state, stop_after_epoch, on_epoch):
    params = model.parameters()
    if state is None:
        state = TrainingState(best_correct=[0] * model.student_count)
    history: list[EpochRecord] = []
    last_epoch = config.epochs if stop_after_epoch is None else min(stop_after_epoch, config.epochs)
    for epoch in range(state.epoch, last_epoch):
        lr = lr_at(config, epoch)
        sums = np.zeros(4)
        nbatches = 0
        for x, labels in batches(data, config.batch_size, seed=epoch_seed(config.seed, epoch)):
            out = forward_ensemble(model, x)
            bundle = ensemble_losses(out, labels, model.adaptation, config.weights,
                                     kd_teacher_grad=config.kd_teacher_grad,
                                     kd_t2_scale=config.kd_t2_scale)
            values = bundle.values()
            _check_finite(values, epoch, state.step)
            backward(bundle.combined)
            sgd_step(params, state, lr, config.momentum, config.nesterov)
            sums += values
            nbatches += 1
        correct, teacher_correct, total = evaluate_ensemble(model, data, config.batch_size * 4)
        state.test_size = total
        state.best_correct = [max(b, c) for b, c in zip(state.best_correct, correct)]
        state.best_teacher_correct = max(state.best_teacher_correct, teacher_correct)
        state.epoch = epoch + 1
        record = EpochRecord(
            epoch=epoch, lr=lr,
            loss_normal=sums[0] / nbatches, loss_intermediate=sums[1] / nbatches,
            loss_kd=sums[2] / nbatches, loss_combined=sums[3] / nbatches,
            student_acc=[100.0 * c / total for c in correct],
            teacher_acc=100.0 * teacher_correct / total)
        history.append(record)
        if on_epoch is not None:
            on_epoch(record, model, state)
    return state, history


def baseline_models(model: EnsembleModel):
    """S standalone single-student models with initialization matched to the
    ensemble's branches (bit-identical copies of the freshly built ensemble)."""
    return [extract_student(model, i) for i in range(1, model.student_count + 1)]


def _train_baseline(model, data, config, state, stop_after_epoch, on_epoch, students=None):
    if students is None:
        students = baseline_models(model)
    # independent per-model optimizer state, disambiguated by a model prefix
    registries = [{f"m{i + 1}.{name}": p for name, p in m.parameters().items()}
                  for i, m in enumerate(students)]
    if state is None:
        state = TrainingState(best_correct=[0] * model.student_count)
    history: list[EpochRecord] = []
    last_epoch = config.epochs if stop_after_epoch is None else min(stop_after_epoch, config.epochs)
    for epoch in range(state.epoch, last_epoch):
        lr = lr_at(config, epoch)
        normal_sum = 0.0
        nbatches = 0
        for x, labels in batches(data, config.batch_size, seed=epoch_seed(config.seed, epoch)):
            for registry, student in zip(registries, students):
                logits = student.forward(x)
                ce, _ = cross_entropy_all([logits], labels)
                value = ce.item()
                if not np.isfinite(value):
                    raise TrainingDiverged(
                        f"student {student.student_index} cross-entropy non-finite at epoch {epoch}")
                backward(ce)
                sgd_step(registry, state, lr, config.momentum, config.nesterov)
                normal_sum += value
            nbatches += 1
        correct = []
        total = 0
        for student in students:
            c, total = evaluate_single(student, data, config.batch_size * 4)
            correct.append(c)
        state.test_size = total
        state.best_correct = [max(b, c) for b, c in zip(state.best_correct, correct)]
        state.epoch = epoch + 1
        record = EpochRecord(
            epoch=epoch, lr=lr,
            loss_normal=normal_sum / nbatches, loss_intermediate=0.0,
            loss_kd=0.0, loss_combined=normal_sum / nbatches,
            student_acc=[100.0 * c / total for c in correct],
            teacher_acc=None)
        history.append(record)
        if on_epoch is not None:
            on_epoch(record, students, state)
    return state, history


def save_training_checkpoint(path, params: dict[str, Tensor], state: TrainingState,
                             config_hash: bytes) -> None:
    ckpt.save_checkpoint(path, {name: p.data for name, p in params.items()},
                         state.to_table(), config_hash)


def load_training_checkpoint(path, params: dict[str, Tensor],
                             config_hash: bytes | None = None) -> TrainingState:
    """Restore parameters in place and return the training state.

    When ``config_hash`` is given it must match the stored hash, guarding
    against resuming under a drifted configuration.
    """
    payload, table, stored_hash = ckpt.load_checkpoint(path)
    if config_hash is not None and stored_hash != config_hash:
        raise ckpt.CheckpointError(f"{path}: checkpoint was written under a different configuration")
    ckpt.assign_parameters(params, payload, path)
    state = TrainingState.from_table(table)
    for name, buf in state.velocities.items():
        if name not in params:
            raise ckpt.CheckpointError(f"{path}: velocity buffer {name} has no matching parameter")
        if buf.shape != params[name].data.shape:
            raise ckpt.CheckpointError(f"{path}: velocity {name} shape {buf.shape} does not match parameter")
    return state
