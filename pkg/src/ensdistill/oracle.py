"""The finite-difference gradient-check suite.

Builds small float64 instances of every differentiable layer type plus a
complete small ensemble with the full combined loss, and compares analytic
gradients against central finite differences. Used by the ``gradcheck`` CLI
command and by the acceptance tests; exit criterion is max relative error
below 1e-4 at step 1e-5.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import (
    Tensor,
    backward,
    conv2d,
    gather_rows,
    global_avg_pool2d,
    log_softmax,
    matmul,
    max_pool2d,
    no_grad,
    precision,
    relu,
    tensor_mean,
    tensor_sum,
)
from .ensemble import ArchitectureSpec, build_ensemble, forward_ensemble
from .evaluate import GradientCheckReport, finite_difference_check
from .layers import BlockSpec, LayerSpec, ResidualStack
from .losses import (
    LossWeights,
    combine,
    cross_entropy_all,
    ensemble_losses,
    intermediate_loss,
    kd_loss,
)


@dataclass
class SuiteEntry:
    name: str
    report: GradientCheckReport

    @property
    def passed(self) -> bool:
        return self.report.passed


def _param(rng, *shape) -> Tensor:
    return Tensor(rng.normal(0.0, 1.0, size=shape), requires_grad=True)


def small_ensemble_spec() -> ArchitectureSpec:
    """A tiny 4-block residual architecture, well under 2k parameters at S=3."""
    blocks = (
        BlockSpec((LayerSpec("conv", 1, 2, kernel=3),), 1),
        BlockSpec((LayerSpec("residual-block", 2, 3, stride=2),), 2),
        BlockSpec((LayerSpec("residual-block", 3, 4, stride=1),), 3),
        BlockSpec((LayerSpec("residual-block", 4, 4, stride=2),), 4),
    )
    return ArchitectureSpec(blocks, num_classes=3, input_shape=(1, 8, 8))


def run_suite(step: float = 1e-5, tolerance: float = 1e-4) -> list[SuiteEntry]:
    entries = []
    with precision("float64"):
        rng = np.random.default_rng(7)

        a = _param(rng, 3, 4)
        b = _param(rng, 4, 2)
        entries.append(SuiteEntry("matmul", finite_difference_check(
            lambda: tensor_sum(matmul(a, b).square()), {"a": a, "b": b}, step, tolerance)))

        x = _param(rng, 2, 3, 8, 8)
        k = _param(rng, 4, 3, 3, 3)
        bias = _param(rng, 4)
        entries.append(SuiteEntry("conv2d", finite_difference_check(
            lambda: tensor_sum(conv2d(x, k, bias, stride=2, padding=1).square()),
            {"input": x, "kernel": k, "bias": bias}, step, tolerance)))

        xp = _param(rng, 2, 3, 6, 6)
        entries.append(SuiteEntry("max_pool2d", finite_difference_check(
            lambda: tensor_sum(max_pool2d(xp, 2, 2).square()), {"input": xp}, step, tolerance)))

        xg = _param(rng, 2, 3, 5, 5)
        entries.append(SuiteEntry("global_avg_pool2d", finite_difference_check(
            lambda: tensor_sum(global_avg_pool2d(xg).square()), {"input": xg}, step, tolerance)))

        xr = _param(rng, 4, 5)
        entries.append(SuiteEntry("relu", finite_difference_check(
            lambda: tensor_sum(relu(xr).square()), {"input": xr}, step, tolerance)))

        xs = _param(rng, 4, 6)
        labels = np.array([0, 3, 5, 1])
        entries.append(SuiteEntry("log_softmax+gather", finite_difference_check(
            lambda: tensor_mean(gather_rows(log_softmax(xs), labels)) * -1.0,
            {"logits": xs}, step, tolerance)))

        xe = _param(rng, 3, 4)
        entries.append(SuiteEntry("elementwise", finite_difference_check(
            lambda: tensor_sum((xe * xe + xe.abs() - 0.5 * xe).square()),
            {"input": xe}, step, tolerance)))

        stack = ResidualStack("unit", 3, 4, stride=2, repeat=2, rng=rng)
        xu = _param(rng, 2, 3, 6, 6)
        unit_params = dict(stack.params())
        unit_params["input"] = xu
        entries.append(SuiteEntry("residual-block", finite_difference_check(
            lambda: tensor_sum(stack.forward(xu).square()), unit_params, step, tolerance)))

        entries.append(SuiteEntry("ensemble combined loss", full_model_check(step, tolerance)))
    return entries


def full_model_check(step: float = 1e-5, tolerance: float = 1e-4,
                     max_coords_per_param: int | None = None) -> GradientCheckReport:
    """Gradient-check the complete combined loss on a 3-student ensemble.

    The intermediate and KD terms detach the teacher side, so the function
    finite differences can probe is the surrogate backprop differentiates:
    the teacher taps and teacher logits are frozen at the linearization
    point. That the production loss (detaching live tensors) yields
    bit-identical gradients to the frozen surrogate is asserted here too.
    """
    with precision("float64"):
        model = build_ensemble(small_ensemble_spec(), 3, rng=11)
        params = model.parameters()
        rng = np.random.default_rng(3)
        # zero-initialized biases put border pre-activations exactly on the
        # relu kink, where central differences and the subgradient disagree;
        # check at a generic point instead
        for name, p in params.items():
            if name.endswith(".bias"):
                p.data[...] = rng.uniform(-0.3, 0.3, size=p.data.shape)
        batch = Tensor(rng.normal(0.0, 1.0, size=(2, 1, 8, 8)))
        labels = np.array([0, 2])
        weights = LossWeights()

        with no_grad():
            reference = forward_ensemble(model, batch)
        frozen_taps = [Tensor(t.data.copy()) for t in reference.taps[0]]
        frozen_teacher_logits = Tensor(reference.teacher_logits.data.copy())

        def surrogate():
            out = forward_ensemble(model, batch)
            normal, per_student = cross_entropy_all(out.logits, labels)
            inter = intermediate_loss([frozen_taps] + out.taps[1:], model.adaptation)
            kd = kd_loss(out.logits, frozen_teacher_logits, weights.temperature)
            return combine(normal, inter, kd, weights, per_student).combined

        # the live loss must agree with the frozen surrogate exactly
        for p in params.values():
            p.grad = None
        live = ensemble_losses(forward_ensemble(model, batch), labels, model.adaptation, weights)
        backward(live.combined)
        live_grads = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                      for name, p in params.items()}
        for p in params.values():
            p.grad = None
        backward(surrogate())
        for name, p in params.items():
            got = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.array_equal(got, live_grads[name]):
                raise AssertionError(
                    f"live loss and frozen-teacher surrogate disagree on gradient of {name}")
        for p in params.values():
            p.grad = None

        return finite_difference_check(surrogate, params, step, tolerance,
                                       max_coords_per_param=max_coords_per_param)
