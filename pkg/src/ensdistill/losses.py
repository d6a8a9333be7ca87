"""The three-part ensemble training loss and its weighted combination.

* combined cross-entropy: every student trains on the labels; the loss is a
  sum over students of per-student batch-mean cross-entropy.
* intermediate loss: per compressed student and tap location, the MSE between
  the channel-adapted student feature map and the detached pseudo-teacher
  map, averaged over batch and elements, summed over students and locations.
  Only the student branches and their adaptation layers receive gradient.
* knowledge-distillation loss: KL divergence from each student's
  temperature-softened distribution to the (detached) softened ensemble
  teacher distribution, batch-mean per student, summed over students.

Combined: L = alpha * normal + beta * intermediate + gamma * kd with
defaults alpha=0.7, beta=0.15, gamma=0.15 and temperature 2.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autograd import (
    ShapeMismatch,
    Tensor,
    add,
    exp,
    gather_rows,
    log_softmax,
    mul,
    stop_gradient,
    sub,
    tensor_mean,
    tensor_sum,
)
from .ensemble import TAP_COUNT, EnsembleOutput
from .layers import AdaptationLayer


@dataclass(frozen=True)
class LossWeights:
    """Contribution ratios for the combined loss plus the softening temperature."""

    alpha: float = 0.7
    beta: float = 0.15
    gamma: float = 0.15
    temperature: float = 2.0

    def __post_init__(self):
        total = self.alpha + self.beta + self.gamma
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"loss weights must sum to 1, got {total:.6g} "
                             f"(alpha={self.alpha}, beta={self.beta}, gamma={self.gamma})")
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.temperature < 1.0:
            raise ValueError(f"temperature must be >= 1, got {self.temperature}")


BASELINE_WEIGHTS = LossWeights(alpha=1.0, beta=0.0, gamma=0.0, temperature=1.0)


@dataclass
class LossBundle:
    """The three loss terms and their weighted combination for one batch."""

    normal: Tensor
    intermediate: Tensor
    kd: Tensor
    combined: Tensor
    per_student_ce: list[float] = field(default_factory=list)

    def values(self) -> tuple[float, float, float, float]:
        return (self.normal.item(), self.intermediate.item(), self.kd.item(), self.combined.item())


def _softened_log_softmax(logits: Tensor, temperature: float) -> Tensor:
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if temperature == 1.0:
        return log_softmax(logits)
    return log_softmax(mul(logits, 1.0 / temperature))


def softened_softmax(logits: Tensor, temperature: float) -> Tensor:
    """Row-wise softmax of logits/T via the overflow-safe log-space path."""
    return exp(_softened_log_softmax(logits, temperature))


def cross_entropy_all(logits: list[Tensor], labels: np.ndarray) -> tuple[Tensor, list[float]]:
    """Sum over students of batch-mean cross-entropy against hard labels.

    Returns the total plus the per-student values for diagnostics.
    """
    labels = np.asarray(labels)
    total = None
    per_student = []
    for student_logits in logits:
        logp = log_softmax(student_logits)
        ce = mul(tensor_mean(gather_rows(logp, labels)), -1.0)
        per_student.append(ce.item())
        total = ce if total is None else add(total, ce)
    return total, per_student


def intermediate_loss(taps: list[list[Tensor]],
                      adaptation: dict[tuple[int, int], AdaptationLayer]) -> Tensor:
    """Feature-map hint loss between each compressed student and the pseudo
    teacher, through the student's adaptation layers.

    ``taps[0]`` holds the pseudo-teacher maps; the teacher side is detached so
    its branch receives exactly zero gradient from this loss.
    """
    student_count = len(taps)
    if student_count < 2:
        raise ValueError("intermediate loss needs at least two students")
    teacher_taps = taps[0]
    total = None
    for i in range(2, student_count + 1):
        student_taps = taps[i - 1]
        if len(student_taps) != TAP_COUNT or len(teacher_taps) != TAP_COUNT:
            raise ValueError(f"expected {TAP_COUNT} tap locations per student")
        for loc in range(1, TAP_COUNT + 1):
            layer = adaptation.get((i, loc))
            if layer is None:
                raise KeyError(f"missing adaptation layer for student {i}, tap {loc}")
            adapted = layer.forward(student_taps[loc - 1])
            target = stop_gradient(teacher_taps[loc - 1])
            if adapted.shape != target.shape:
                raise ShapeMismatch(
                    f"student {i} tap {loc}: adapted map {adapted.shape} does not match "
                    f"teacher map {target.shape}")
            term = tensor_mean(sub(adapted, target).square())
            total = term if total is None else add(total, term)
    return total


def kd_loss(student_logits: list[Tensor], teacher_logits: Tensor, temperature: float,
            detach_teacher: bool = True, t2_scale: bool = False) -> Tensor:
    """KL divergence from each softened student distribution to the softened
    ensemble-teacher distribution, batch-mean per student, summed over all
    students (the pseudo teacher included).

    The teacher distribution is detached by default so distillation is purely
    teacher-to-student; ``detach_teacher=False`` re-enables flow through the
    ensemble average. ``t2_scale`` applies the classical T^2 gradient
    compensation, off by default.
    """
    teacher_logp_t = _softened_log_softmax(teacher_logits, temperature)
    if detach_teacher:
        teacher_logp_t = stop_gradient(teacher_logp_t)
    teacher_p = exp(teacher_logp_t)
    batch = teacher_logits.shape[0]
    total = None
    for logits in student_logits:
        if logits.shape != teacher_logits.shape:
            raise ShapeMismatch(f"student logits {logits.shape} do not match teacher {teacher_logits.shape}")
        student_logp = _softened_log_softmax(logits, temperature)
        # sum_k p_T * (log p_T - log p_S), then mean over the batch
        kl = mul(tensor_sum(mul(teacher_p, sub(teacher_logp_t, student_logp))), 1.0 / batch)
        total = kl if total is None else add(total, kl)
    if t2_scale:
        total = mul(total, temperature * temperature)
    return total


def combine(normal: Tensor, intermediate: Tensor, kd: Tensor, weights: LossWeights,
            per_student_ce: list[float] | None = None) -> LossBundle:
    """Weighted combination L = alpha*normal + beta*intermediate + gamma*kd."""
    combined = add(add(mul(normal, weights.alpha), mul(intermediate, weights.beta)),
                   mul(kd, weights.gamma))
    return LossBundle(normal=normal, intermediate=intermediate, kd=kd, combined=combined,
                      per_student_ce=per_student_ce or [])


def ensemble_losses(output: EnsembleOutput, labels: np.ndarray,
                    adaptation: dict[tuple[int, int], AdaptationLayer],
                    weights: LossWeights,
                    kd_teacher_grad: bool = False,
                    kd_t2_scale: bool = False) -> LossBundle:
    """Assemble the full LossBundle for one batch of ensemble outputs.

    When beta or gamma is zero the corresponding term is skipped entirely
    (a zero constant stands in), which keeps pure-cross-entropy baseline
    training free of distillation graph work.
    """
    normal, per_student = cross_entropy_all(output.logits, labels)
    if weights.beta != 0.0:
        inter = intermediate_loss(output.taps, adaptation)
    else:
        inter = Tensor(np.zeros((), dtype=normal.dtype))
    if weights.gamma != 0.0:
        kd = kd_loss(output.logits, output.teacher_logits, weights.temperature,
                     detach_teacher=not kd_teacher_grad, t2_scale=kd_t2_scale)
    else:
        kd = Tensor(np.zeros((), dtype=normal.dtype))
    return combine(normal, inter, kd, weights, per_student)
