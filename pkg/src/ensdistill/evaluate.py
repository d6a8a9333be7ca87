"""Metrics and analysis: top-1 accuracy, the compression-weighted student
average, parameter-size accounting, Grad-CAM heat maps and the
finite-difference gradient oracle used throughout the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import Tensor, backward, gather_rows, no_grad, tensor_sum
from .ensemble import EnsembleModel, StudentModel


@dataclass
class Metrics:
    per_student_top1: list[float]
    teacher_top1: float | None
    weighted_average: float
    mean_accuracy: float


@dataclass
class SizeReport:
    """Per-student deployable parameter counts (base + branch + classifier;
    adaptation layers are training-only scaffolding and excluded) and sizes
    relative to student 1 in percent."""

    parameter_counts: list[int]
    relative_pct: list[float]


def top1_accuracy(logits, labels) -> float:
    """Percentage of rows whose argmax matches the label; argmax ties break
    to the lowest class index."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    labels = np.asarray(labels)
    if data.ndim != 2 or data.shape[0] != labels.shape[0]:
        raise ValueError(f"logits {data.shape} do not match labels {labels.shape}")
    return 100.0 * float((data.argmax(axis=1) == labels).mean())


def weighted_student_average(accuracies) -> float:
    """Sum of i/S-weighted student accuracies: the most-compressed student
    carries weight 1, the pseudo teacher 1/S. Intentionally unnormalized (the
    weights sum to (S+1)/2)."""
    accuracies = list(accuracies)
    s = len(accuracies)
    if s == 0:
        raise ValueError("need at least one accuracy")
    return float(sum((i / s) * acc for i, acc in enumerate(accuracies, start=1)))


def mean_student_accuracy(accuracies) -> float:
    accuracies = list(accuracies)
    return float(sum(accuracies) / len(accuracies))


def metrics_from_accuracies(per_student: list[float], teacher: float | None) -> Metrics:
    return Metrics(
        per_student_top1=list(per_student),
        teacher_top1=teacher,
        weighted_average=weighted_student_average(per_student),
        mean_accuracy=mean_student_accuracy(per_student),
    )


def count_parameters(params: dict[str, Tensor]) -> int:
    return int(sum(p.data.size for p in params.values()))


def size_report(model: EnsembleModel) -> SizeReport:
    base_count = count_parameters(model.base.params())
    counts = [base_count + count_parameters(branch.params()) for branch in model.students]
    reference = counts[0]
    return SizeReport(
        parameter_counts=counts,
        relative_pct=[100.0 * c / reference for c in counts],
    )


def grad_cam(model: StudentModel, image: Tensor, class_index: int) -> np.ndarray:
    """Gradient-weighted class activation map over the last block's output.

    Channel weights are the spatial means of the class logit's gradient on
    the last-block feature map; the map is relu of the weighted channel sum,
    max-normalized into [0, 1] (an all-zero map stays zero).
    """
    if image.ndim != 4 or image.shape[0] != 1:
        raise ValueError(f"grad_cam expects a single [1,ch,H,W] input, got {image.shape}")
    if not 0 <= class_index < model.spec.num_classes:
        raise ValueError(f"class index {class_index} out of range 0..{model.spec.num_classes - 1}")
    logits, taps = model.forward(image, return_taps=True)
    feature_map = taps[-1]
    backward(tensor_sum(gather_rows(logits, np.array([class_index]))))
    grads = feature_map.grad
    if grads is None:
        raise RuntimeError("no gradient reached the last block's feature map")
    channel_weights = grads[0].mean(axis=(1, 2))
    cam = np.maximum((channel_weights[:, None, None] * feature_map.data[0]).sum(axis=0), 0.0)
    peak = cam.max()
    if peak > 0:
        cam = cam / peak
    return cam


def save_pgm(heat_map: np.ndarray, path) -> None:
    """Write a [0,1] heat map as an 8-bit binary portable graymap (P5)."""
    if heat_map.ndim != 2:
        raise ValueError(f"heat map must be 2-D, got shape {heat_map.shape}")
    pixels = np.clip(np.rint(heat_map * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{pixels.shape[1]} {pixels.shape[0]}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


@dataclass
class GradientCheckEntry:
    name: str
    coordinate: int
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class GradientCheckReport:
    max_rel_error: float
    tolerance: float
    worst: GradientCheckEntry | None
    checked: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def finite_difference_check(f, params: dict[str, Tensor], step: float = 1e-5,
                            tolerance: float = 1e-4, max_coords_per_param: int | None = None,
                            rng: np.random.Generator | None = None) -> GradientCheckReport:
    """Compare analytic gradients of the scalar ``f()`` against central finite
    differences, coordinate by coordinate.

    Relative error uses max(|analytic|, |numeric|, 1e-8) as denominator.
    Requires float64 parameters; differences at float32 resolution are noise.
    """
    for name, p in params.items():
        if p.data.dtype != np.float64:
            raise ValueError(f"gradient check requires float64 parameters ({name} is {p.data.dtype})")
    for p in params.values():
        p.grad = None
    value = f()
    backward(value)
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for name, p in params.items()}

    worst = None
    max_rel = 0.0
    checked = 0
    if rng is None:
        rng = np.random.default_rng(0)
    with no_grad():
        for name, p in params.items():
            flat = p.data.reshape(-1)
            n = flat.size
            if max_coords_per_param is not None and n > max_coords_per_param:
                coords = rng.choice(n, size=max_coords_per_param, replace=False)
            else:
                coords = range(n)
            for c in coords:
                original = flat[c]
                flat[c] = original + step
                up = f().item()
                flat[c] = original - step
                down = f().item()
                flat[c] = original
                numeric = (up - down) / (2.0 * step)
                a = float(analytic[name].reshape(-1)[c])
                rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                checked += 1
                if rel > max_rel:
                    max_rel = rel
                    worst = GradientCheckEntry(name, int(c), a, numeric, rel)
    return GradientCheckReport(max_rel_error=max_rel, tolerance=tolerance, worst=worst, checked=checked)
