"""Expand one architecture into a shared-base, multi-branch student ensemble.

The first block of the architecture becomes a common base; blocks 2-4 plus
the classifier are replicated into S parallel branches. Branch i has every
layer's channel count scaled by the ratio (S-i+1)/S, so student 1 (the
pseudo teacher) keeps the original widths and later students are
progressively thinner. Channel-adaptation layers (one per compressed student
per tap location) map student feature maps back onto the teacher's channel
counts for the intermediate distillation loss.

The ensemble-teacher logits are the uniform average of all student logits by
default; a hook is provided for custom positive weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .autograd import ShapeMismatch, Tensor, add, global_avg_pool2d, mul, reshape
from .layers import (
    AdaptationLayer,
    Block,
    BlockSpec,
    LayerSpec,
    LinearLayer,
    SpecError,
    build_block,
)

TAP_COUNT = 3  # one tap per branch block (blocks 2, 3 and 4)


@dataclass(frozen=True)
class ArchitectureSpec:
    """Declarative description of the base model.

    Exactly four blocks; block 1 is the shared base. The classifier is a
    linear layer whose input width equals the block-4 output channels, so it
    is derived rather than specified.
    """

    blocks: tuple[BlockSpec, BlockSpec, BlockSpec, BlockSpec]
    num_classes: int
    input_shape: tuple[int, int, int]  # (channels, height, width)

    def __post_init__(self):
        if len(self.blocks) != 4:
            raise SpecError(f"architecture must have exactly 4 blocks, got {len(self.blocks)}")
        if self.num_classes < 2:
            raise SpecError(f"need at least 2 classes, got {self.num_classes}")
        if len(self.input_shape) != 3 or any(v < 1 for v in self.input_shape):
            raise SpecError(f"input_shape must be (channels, H, W) >= 1, got {self.input_shape}")
        if self.blocks[0].in_channels != self.input_shape[0]:
            raise SpecError(
                f"block 1 expects {self.blocks[0].in_channels} channels but input has {self.input_shape[0]}")
        cur = self.blocks[0].out_channels
        for bs in self.blocks[1:]:
            if bs.in_channels != cur:
                raise SpecError(
                    f"block {bs.block_index} expects {bs.in_channels} input channels, chain carries {cur}")
            cur = bs.out_channels

    @property
    def classifier(self) -> LayerSpec:
        return LayerSpec("linear", in_channels=self.blocks[3].out_channels,
                         out_channels=self.num_classes, kernel=1)


def assign_channels(m: int, s: int, i: int) -> int:
    """Channel count for student i given the teacher's count ``m``.

    Ratio (s-i+1)/s, rounded half away from zero, floored at 1 channel.
    """
    if m < 1:
        raise ValueError(f"channel count must be >= 1, got {m}")
    if not 1 <= i <= s:
        raise ValueError(f"student index {i} out of range 1..{s}")
    scaled = m * (s - i + 1) / s
    return max(1, int(math.floor(scaled + 0.5)))


def _scale_branch_blocks(spec: ArchitectureSpec, s: int, i: int) -> tuple[BlockSpec, ...]:
    """Rebuild blocks 2-4 for student i, scaling every parameterized layer's
    output width while keeping the chain consistent. The branch entry width
    stays at the (unscaled) base output."""
    cur = spec.blocks[0].out_channels
    scaled_blocks = []
    for bs in spec.blocks[1:]:
        layers = []
        for ls in bs.layers:
            if ls.kind in ("conv", "residual-block", "linear"):
                out = assign_channels(ls.out_channels, s, i)
                layers.append(replace(ls, in_channels=cur, out_channels=out))
                cur = out
            else:
                layers.append(replace(ls, in_channels=cur, out_channels=cur))
        scaled_blocks.append(BlockSpec(tuple(layers), bs.block_index))
    return tuple(scaled_blocks)


class Branch:
    """Blocks 2-4 plus classifier for one student, run on top of the base."""

    def __init__(self, index: int, blocks: list[Block], classifier: LinearLayer):
        self.index = index
        self.blocks = blocks
        self.classifier = classifier

    def params(self) -> dict[str, Tensor]:
        out = {}
        for block in self.blocks:
            out.update(block.params())
        out.update(self.classifier.params())
        return out

    def forward(self, base_out: Tensor) -> tuple[Tensor, list[Tensor]]:
        taps = []
        h = base_out
        for block in self.blocks:
            h = block.forward(h)
            taps.append(h)
        pooled = global_avg_pool2d(h)
        flat = reshape(pooled, (pooled.shape[0], pooled.shape[1]))
        return self.classifier.forward(flat), taps

    def copy(self) -> "Branch":
        return Branch(self.index, [b.copy() for b in self.blocks], self.classifier.copy())


@dataclass
class EnsembleOutput:
    """Per-student logits, the averaged teacher logits, and the three
    feature-map taps per student (pseudo-teacher taps at index 0)."""

    logits: list[Tensor]
    teacher_logits: Tensor
    taps: list[list[Tensor]]


class EnsembleModel:
    """The materialized ensemble: shared base, S branches, adaptation layers."""

    def __init__(self, spec, student_count, base, students, adaptation, teacher_weights=None):
        self.spec = spec
        self.student_count = student_count
        self.base = base
        self.students = students
        self.adaptation = adaptation  # {(student_index, tap_location): AdaptationLayer}
        self.teacher_weights = teacher_weights
        self.ratios = [(student_count - i + 1) / student_count for i in range(1, student_count + 1)]

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        out.update(self.base.params())
        for branch in self.students:
            out.update(branch.params())
        for key in sorted(self.adaptation):
            out.update(self.adaptation[key].params())
        return out

    def forward(self, batch: Tensor) -> EnsembleOutput:
        return forward_ensemble(self, batch)


def build_ensemble(spec: ArchitectureSpec, student_count: int, rng,
                   teacher_weights=None) -> EnsembleModel:
    """Materialize the ensemble. ``rng`` is a seed or a numpy Generator;
    identical seeds give bit-identical parameters."""
    if student_count < 2:
        raise SpecError(f"ensemble needs at least 2 students, got {student_count}")
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))
    if teacher_weights is not None:
        teacher_weights = [float(w) for w in teacher_weights]
        if len(teacher_weights) != student_count:
            raise SpecError(f"need {student_count} teacher weights, got {len(teacher_weights)}")
        if any(w < 0 for w in teacher_weights) or abs(sum(teacher_weights) - 1.0) > 1e-9:
            raise SpecError("teacher weights must be non-negative and sum to 1")

    base = build_block(spec.blocks[0], "base", rng)
    students = []
    for i in range(1, student_count + 1):
        branch_specs = _scale_branch_blocks(spec, student_count, i)
        blocks = [build_block(bs, f"student{i}.b{bs.block_index}", rng) for bs in branch_specs]
        classifier = LinearLayer(f"student{i}.fc", blocks[-1].out_channels, spec.num_classes, rng=rng)
        students.append(Branch(i, blocks, classifier))

    teacher = students[0]
    adaptation = {}
    for i in range(2, student_count + 1):
        for loc in range(1, TAP_COUNT + 1):
            student_ch = students[i - 1].blocks[loc - 1].out_channels
            teacher_ch = teacher.blocks[loc - 1].out_channels
            adaptation[(i, loc)] = AdaptationLayer(f"adapt{i}.{loc}", student_ch, teacher_ch, rng=rng)

    return EnsembleModel(spec, student_count, base, students, adaptation, teacher_weights)


def forward_ensemble(model: EnsembleModel, batch: Tensor) -> EnsembleOutput:
    """Run the shared base once, then every branch; average the logits.

    The teacher average keeps gradient flow into every student; detaching for
    the distillation loss happens downstream, in the loss itself.
    """
    expected = model.spec.input_shape
    if batch.ndim != 4 or batch.shape[1:] != expected:
        raise ShapeMismatch(f"batch shape {batch.shape} does not match input shape {expected}")
    base_out = model.base.forward(batch)
    logits, taps = [], []
    for branch in model.students:
        branch_logits, branch_taps = branch.forward(base_out)
        logits.append(branch_logits)
        taps.append(branch_taps)
    if model.teacher_weights is None:
        total = logits[0]
        for lg in logits[1:]:
            total = add(total, lg)
        teacher = mul(total, 1.0 / model.student_count)
    else:
        teacher = mul(logits[0], model.teacher_weights[0])
        for w, lg in zip(model.teacher_weights[1:], logits[1:]):
            teacher = add(teacher, mul(lg, w))
    return EnsembleOutput(logits=logits, teacher_logits=teacher, taps=taps)


class StudentModel:
    """A self-contained student: copied base + branch i, no adaptation layers.

    Forward output is bit-identical to the ensemble's branch-i logits on any
    input because it runs the exact same operation sequence on copies of the
    same parameters.
    """

    def __init__(self, spec, student_index: int, ratio: float, base: Block, branch: Branch):
        self.spec = spec
        self.student_index = student_index
        self.ratio = ratio
        self.base = base
        self.branch = branch

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        out.update(self.base.params())
        out.update(self.branch.params())
        return out

    def forward(self, batch: Tensor, return_taps: bool = False):
        expected = self.spec.input_shape
        if batch.ndim != 4 or batch.shape[1:] != expected:
            raise ShapeMismatch(f"batch shape {batch.shape} does not match input shape {expected}")
        base_out = self.base.forward(batch)
        logits, taps = self.branch.forward(base_out)
        if return_taps:
            return logits, taps
        return logits


def extract_student(model: EnsembleModel, i: int) -> StudentModel:
    """Copy student i (base + branch) out of the ensemble as a standalone model."""
    if not 1 <= i <= model.student_count:
        raise IndexError(f"student index {i} out of range 1..{model.student_count}")
    return StudentModel(
        spec=model.spec,
        student_index=i,
        ratio=model.ratios[i - 1],
        base=model.base.copy(),
        branch=model.students[i - 1].copy(),
    )
