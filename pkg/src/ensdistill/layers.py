"""Neural layer abstractions: convolutions, plain residual blocks, pooling,
the linear classifier head and the 1x1 channel-adaptation layer used for
intermediate feature distillation.

Blocks are described declaratively by ``LayerSpec``/``BlockSpec`` and
materialized by ``build_block``. Every built layer registers its parameters
under stable hierarchical names so checkpoints and optimizers can address
them; two builds from the same seed are bit-identical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autograd import (
    ShapeMismatch,
    Tensor,
    add,
    conv2d,
    default_dtype,
    global_avg_pool2d,
    matmul,
    max_pool2d,
    relu,
)

LAYER_KINDS = ("conv", "residual-block", "maxpool", "global-average-pool", "linear")
_PARAM_KINDS = ("conv", "residual-block", "linear")


class SpecError(ValueError):
    """A layer or block description violates its invariants."""


@dataclass(frozen=True)
class LayerSpec:
    """One structural element of a block.

    ``repeat`` stacks residual units; pooling kinds carry channels through
    unchanged (``in_channels == out_channels``).
    """

    kind: str
    in_channels: int = 1
    out_channels: int = 1
    kernel: int = 3
    stride: int = 1
    repeat: int = 1

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise SpecError(f"unknown layer kind {self.kind!r}, expected one of {LAYER_KINDS}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise SpecError(f"{self.kind}: channel counts must be >= 1, got {self.in_channels}->{self.out_channels}")
        if self.stride not in (1, 2):
            raise SpecError(f"{self.kind}: stride must be 1 or 2, got {self.stride}")
        if self.repeat < 1:
            raise SpecError(f"{self.kind}: repeat must be >= 1, got {self.repeat}")
        if self.kernel < 1:
            raise SpecError(f"{self.kind}: kernel must be >= 1, got {self.kernel}")
        if self.kind in ("maxpool", "global-average-pool") and self.in_channels != self.out_channels:
            raise SpecError(f"{self.kind}: pooling cannot change channels ({self.in_channels}->{self.out_channels})")


@dataclass(frozen=True)
class BlockSpec:
    """An ordered list of layers forming one of the model's four blocks."""

    layers: tuple[LayerSpec, ...]
    block_index: int = 1

    def __post_init__(self):
        if not self.layers:
            raise SpecError(f"block {self.block_index}: must contain at least one layer")
        if not 1 <= self.block_index <= 4:
            raise SpecError(f"block index must be in 1..4, got {self.block_index}")
        cur = self.layers[0].in_channels
        for ls in self.layers:
            if ls.in_channels != cur:
                raise SpecError(
                    f"block {self.block_index}: layer {ls.kind} expects {ls.in_channels} input "
                    f"channels but the chain carries {cur}"
                )
            cur = ls.out_channels

    @property
    def in_channels(self) -> int:
        return self.layers[0].in_channels

    @property
    def out_channels(self) -> int:
        return self.layers[-1].out_channels


def he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
    """He-style fan-in initialization: uniform in +-sqrt(6/fan_in)."""
    bound = math.sqrt(6.0 / fan_in)
    data = rng.uniform(-bound, bound, size=shape).astype(default_dtype())
    return Tensor(data, requires_grad=True)


def zeros_param(shape: tuple[int, ...]) -> Tensor:
    return Tensor(np.zeros(shape, dtype=default_dtype()), requires_grad=True)


class Conv2dLayer:
    """Convolution with bias. Padding defaults to kernel//2 so spatial size
    changes only through the stride."""

    def __init__(self, name, in_channels, out_channels, kernel=3, stride=1, padding=None,
                 rng=None, kernel_param=None, bias_param=None):
        self.name = name
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding
        self.calls = 0
        if kernel_param is not None:
            self.kernel = kernel_param
            self.bias = bias_param
        else:
            fan_in = in_channels * kernel * kernel
            self.kernel = he_uniform(rng, (out_channels, in_channels, kernel, kernel), fan_in)
            self.bias = zeros_param((out_channels,))

    def params(self) -> dict[str, Tensor]:
        return {f"{self.name}.kernel": self.kernel, f"{self.name}.bias": self.bias}

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.in_channels:
            raise ShapeMismatch(f"{self.name}: expected {self.in_channels} input channels, got {x.shape[1]}")
        self.calls += 1
        return conv2d(x, self.kernel, self.bias, stride=self.stride, padding=self.padding)

    def copy(self) -> "Conv2dLayer":
        return Conv2dLayer(
            self.name, self.in_channels, self.out_channels, self.kernel_size, self.stride,
            padding=self.padding,
            kernel_param=Tensor(self.kernel.data.copy(), requires_grad=True),
            bias_param=Tensor(self.bias.data.copy(), requires_grad=True),
        )


class LinearLayer:
    """Fully connected layer: y = x @ W + b with W of shape [in, out]."""

    def __init__(self, name, in_features, out_features, rng=None, weight=None, bias=None):
        self.name = name
        self.in_features = in_features
        self.out_features = out_features
        self.calls = 0
        if weight is not None:
            self.weight = weight
            self.bias = bias
        else:
            self.weight = he_uniform(rng, (in_features, out_features), in_features)
            self.bias = zeros_param((out_features,))

    def params(self) -> dict[str, Tensor]:
        return {f"{self.name}.weight": self.weight, f"{self.name}.bias": self.bias}

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeMismatch(f"{self.name}: expected [N, {self.in_features}], got {x.shape}")
        self.calls += 1
        return add(matmul(x, self.weight), self.bias)

    def copy(self) -> "LinearLayer":
        return LinearLayer(
            self.name, self.in_features, self.out_features,
            weight=Tensor(self.weight.data.copy(), requires_grad=True),
            bias=Tensor(self.bias.data.copy(), requires_grad=True),
        )


class MaxPoolLayer:
    def __init__(self, name, channels, window=2, stride=2):
        self.name = name
        self.in_channels = channels
        self.out_channels = channels
        self.window = window
        self.stride = stride
        self.calls = 0

    def params(self) -> dict[str, Tensor]:
        return {}

    def forward(self, x: Tensor) -> Tensor:
        self.calls += 1
        return max_pool2d(x, self.window, self.stride)

    def copy(self) -> "MaxPoolLayer":
        return MaxPoolLayer(self.name, self.in_channels, self.window, self.stride)


class GlobalAvgPoolLayer:
    def __init__(self, name, channels):
        self.name = name
        self.in_channels = channels
        self.out_channels = channels
        self.calls = 0

    def params(self) -> dict[str, Tensor]:
        return {}

    def forward(self, x: Tensor) -> Tensor:
        self.calls += 1
        return global_avg_pool2d(x)

    def copy(self) -> "GlobalAvgPoolLayer":
        return GlobalAvgPoolLayer(self.name, self.in_channels)


class ResidualUnit:
    """conv-relu-conv plus skip connection, relu on the sum.

    On a channel or stride change the skip path becomes a strided 1x1
    projection convolution. No batch normalization: plain biased convolutions
    keep the unit stateless and deterministic.
    """

    def __init__(self, name, in_channels, out_channels, stride=1, rng=None, layers=None):
        self.name = name
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.stride = stride
        if layers is not None:
            self.conv1, self.conv2, self.projection = layers
        else:
            self.conv1 = Conv2dLayer(f"{name}.conv1", in_channels, out_channels, 3, stride, rng=rng)
            self.conv2 = Conv2dLayer(f"{name}.conv2", out_channels, out_channels, 3, 1, rng=rng)
            if in_channels != out_channels or stride != 1:
                self.projection = Conv2dLayer(f"{name}.proj", in_channels, out_channels, 1, stride,
                                              padding=0, rng=rng)
            else:
                self.projection = None

    def params(self) -> dict[str, Tensor]:
        out = {}
        out.update(self.conv1.params())
        out.update(self.conv2.params())
        if self.projection is not None:
            out.update(self.projection.params())
        return out

    def forward(self, x: Tensor) -> Tensor:
        h = self.conv2.forward(relu(self.conv1.forward(x)))
        skip = x if self.projection is None else self.projection.forward(x)
        return relu(add(h, skip))

    def copy(self) -> "ResidualUnit":
        layers = (self.conv1.copy(), self.conv2.copy(),
                  None if self.projection is None else self.projection.copy())
        return ResidualUnit(self.name, self.in_channels, self.out_channels, self.stride, layers=layers)


class ResidualStack:
    """``repeat`` residual units; only the first one changes channels/stride."""

    def __init__(self, name, in_channels, out_channels, stride=1, repeat=1, rng=None, units=None):
        self.name = name
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.calls = 0
        if units is not None:
            self.units = units
        else:
            self.units = [ResidualUnit(f"{name}.u0", in_channels, out_channels, stride, rng=rng)]
            for k in range(1, repeat):
                self.units.append(ResidualUnit(f"{name}.u{k}", out_channels, out_channels, 1, rng=rng))

    def params(self) -> dict[str, Tensor]:
        out = {}
        for unit in self.units:
            out.update(unit.params())
        return out

    def forward(self, x: Tensor) -> Tensor:
        self.calls += 1
        for unit in self.units:
            x = unit.forward(x)
        return x

    def copy(self) -> "ResidualStack":
        return ResidualStack(self.name, self.in_channels, self.out_channels,
                             units=[u.copy() for u in self.units])


def build_layer(spec: LayerSpec, name: str, rng: np.random.Generator):
    """Materialize one LayerSpec with He-initialized parameters."""
    if spec.kind == "conv":
        return Conv2dLayer(name, spec.in_channels, spec.out_channels, spec.kernel, spec.stride, rng=rng)
    if spec.kind == "residual-block":
        return ResidualStack(name, spec.in_channels, spec.out_channels, spec.stride, spec.repeat, rng=rng)
    if spec.kind == "maxpool":
        return MaxPoolLayer(name, spec.in_channels, spec.kernel, spec.stride)
    if spec.kind == "global-average-pool":
        return GlobalAvgPoolLayer(name, spec.in_channels)
    if spec.kind == "linear":
        return LinearLayer(name, spec.in_channels, spec.out_channels, rng=rng)
    raise SpecError(f"unknown layer kind {spec.kind!r}")


class Block:
    """A built BlockSpec: an ordered list of materialized layers."""

    def __init__(self, name, spec: BlockSpec, layers):
        self.name = name
        self.spec = spec
        self.layers = layers

    @property
    def in_channels(self) -> int:
        return self.spec.in_channels

    @property
    def out_channels(self) -> int:
        return self.spec.out_channels

    def params(self) -> dict[str, Tensor]:
        out = {}
        for layer in self.layers:
            out.update(layer.params())
        return out

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.in_channels:
            raise ShapeMismatch(f"{self.name}: expected {self.in_channels} input channels, got {x.shape[1]}")
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def copy(self) -> "Block":
        return Block(self.name, self.spec, [layer.copy() for layer in self.layers])


def build_block(spec: BlockSpec, name: str, rng: np.random.Generator) -> Block:
    layers = [build_layer(ls, f"{name}.l{k}", rng) for k, ls in enumerate(spec.layers)]
    return Block(name, spec, layers)


class AdaptationLayer:
    """Pointwise (1x1) convolution mapping a compressed student's feature-map
    channels onto the pseudo teacher's channel count, so the intermediate MSE
    is well defined. Spatial extents are always preserved. Bias starts at
    zero.
    """

    def __init__(self, name, student_channels, teacher_channels, rng=None, conv=None):
        self.name = name
        self.student_channels = student_channels
        self.teacher_channels = teacher_channels
        self.conv = conv if conv is not None else Conv2dLayer(
            name, student_channels, teacher_channels, 1, 1, padding=0, rng=rng)

    def params(self) -> dict[str, Tensor]:
        return self.conv.params()

    def forward(self, student_map: Tensor) -> Tensor:
        if student_map.shape[1] != self.student_channels:
            raise ShapeMismatch(
                f"{self.name}: expected {self.student_channels} student channels, got {student_map.shape[1]}")
        return self.conv.forward(student_map)

    def copy(self) -> "AdaptationLayer":
        return AdaptationLayer(self.name, self.student_channels, self.teacher_channels, conv=self.conv.copy())


def adapt_channels(layer: AdaptationLayer, student_map: Tensor) -> Tensor:
    """Map [N,Cs,H,W] student features to the teacher's [N,Ct,H,W]."""
    return layer.forward(student_map)
