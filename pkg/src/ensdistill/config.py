"""Run configuration: flat ``key = value`` files with dotted keys.

Lines starting with ``#`` are comments. Unknown keys are errors (typos must
not silently fall back to defaults), and every embedded invariant (loss
weights summing to 1, channel chains, schedule shape) is validated with the
offending line number where one exists.

An empty file is a valid configuration: every key has a documented default.

Architecture blocks are comma-separated layer tokens:

    conv:OUT[:kK][:sS]      convolution, kernel K (default 3), stride S
    res:OUT[:sS][:rR]       stack of R residual units, first with stride S
    maxpool[:kK][:sS]       max pooling (default 2/2)
    gap                     global average pooling

Input channels are inferred by chaining; the classifier is always a linear
layer from the block-4 output width to ``arch.classes``.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

from .ensemble import ArchitectureSpec
from .layers import BlockSpec, LayerSpec, SpecError
from .losses import LossWeights
from .train import DEFAULT_LR_DROPS, TrainConfig

DEFAULTS: dict[str, str] = {
    "arch.input": "1x32x32",
    "arch.classes": "4",
    "arch.block1": "conv:8,maxpool",
    "arch.block2": "res:16:s2",
    "arch.block3": "res:24:s2",
    "arch.block4": "res:32:s2",
    "students": "5",
    "teacher_weights": "uniform",
    "loss.alpha": "0.7",
    "loss.beta": "0.15",
    "loss.gamma": "0.15",
    "loss.temperature": "2",
    "loss.kd_teacher_grad": "false",
    "loss.kd_t2_scale": "false",
    "train.epochs": "30",
    "train.batch": "64",
    "train.lr": "0.1",
    "train.momentum": "0.9",
    "train.nesterov": "true",
    "train.schedule": "0.5:0.1,0.75:0.01",
    "train.mode": "ensemble",
    "data.path": "",
    "data.synth.classes": "4",
    "data.synth.per_class": "400",
    "data.synth.test_per_class": "200",
    "data.synth.size": "32",
    "data.synth.channels": "1",
    "data.synth.noise": "0.12",
    "data.synth.seed": "1234",
    "seeds": "1,2,3,4,5",
}


class ConfigError(ValueError):
    """Invalid configuration; carries the source line when one applies."""

    def __init__(self, message, source="<config>", line=None):
        self.source = source
        self.line = line
        where = f"{source}:{line}: " if line is not None else f"{source}: "
        super().__init__(where + message)


@dataclass
class RunConfig:
    arch: ArchitectureSpec
    students: int
    teacher_weights: list[float] | None
    weights: LossWeights
    kd_teacher_grad: bool
    kd_t2_scale: bool
    epochs: int
    batch_size: int
    base_lr: float
    momentum: float
    nesterov: bool
    lr_drops: tuple[tuple[float, float], ...]
    mode: str
    data_path: str
    synth: dict[str, float]
    seeds: list[int]
    raw: dict[str, str] = field(default_factory=dict)

    def train_config(self, seed: int, mode: str | None = None) -> TrainConfig:
        """Per-run trainer settings. Baseline mode trains on cross-entropy
        only, so the distillation weights collapse to (1, 0, 0)."""
        mode = self.mode if mode is None else mode
        weights = self.weights
        if mode == "baseline":
            weights = LossWeights(alpha=1.0, beta=0.0, gamma=0.0, temperature=1.0)
        return TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, base_lr=self.base_lr,
            momentum=self.momentum, nesterov=self.nesterov, lr_drops=self.lr_drops,
            weights=weights, seed=seed, mode=mode,
            kd_teacher_grad=self.kd_teacher_grad, kd_t2_scale=self.kd_t2_scale)

    def canonical(self) -> str:
        """Deterministic dump of every effective key, for drift detection."""
        return "\n".join(f"{key} = {self.raw[key]}" for key in sorted(self.raw))

    def config_hash(self, seed: int) -> bytes:
        return hashlib.sha256(f"{self.canonical()}\nactive_seed = {seed}\n".encode()).digest()


def _parse_layer_token(token: str, cur_channels: int, where) -> LayerSpec:
    parts = token.strip().split(":")
    kind = parts[0]
    args = parts[1:]

    def opts(allowed):
        out_channels = None
        flags = {}
        for arg in args:
            if arg[:1] in allowed and arg[1:].isdigit():
                flags[arg[0]] = int(arg[1:])
            elif arg.isdigit() and out_channels is None:
                out_channels = int(arg)
            else:
                raise ConfigError(f"bad layer argument {arg!r} in {token!r}", *where)
        return out_channels, flags

    try:
        if kind == "conv":
            out, flags = opts("ks")
            if out is None:
                raise ConfigError(f"conv layer {token!r} needs an output channel count", *where)
            return LayerSpec("conv", cur_channels, out, kernel=flags.get("k", 3), stride=flags.get("s", 1))
        if kind == "res":
            out, flags = opts("sr")
            if out is None:
                raise ConfigError(f"res layer {token!r} needs an output channel count", *where)
            return LayerSpec("residual-block", cur_channels, out,
                             stride=flags.get("s", 1), repeat=flags.get("r", 1))
        if kind == "maxpool":
            out, flags = opts("ks")
            if out is not None:
                raise ConfigError("maxpool takes no channel count", *where)
            return LayerSpec("maxpool", cur_channels, cur_channels,
                             kernel=flags.get("k", 2), stride=flags.get("s", 2))
        if kind == "gap":
            if args:
                raise ConfigError("gap takes no arguments", *where)
            return LayerSpec("global-average-pool", cur_channels, cur_channels, kernel=1)
    except SpecError as err:
        raise ConfigError(str(err), *where) from None
    raise ConfigError(f"unknown layer kind {kind!r} in {token!r}", *where)


def _parse_block(text: str, index: int, cur_channels: int, where) -> BlockSpec:
    layers = []
    for token in text.split(","):
        spec = _parse_layer_token(token, cur_channels, where)
        layers.append(spec)
        cur_channels = spec.out_channels
    try:
        return BlockSpec(tuple(layers), index)
    except SpecError as err:
        raise ConfigError(str(err), *where) from None


def _as_int(value: str, key: str, where) -> int:
    try:
        return int(value)
    except ValueError:
        raise ConfigError(f"{key}: expected an integer, got {value!r}", *where) from None


def _as_float(value: str, key: str, where) -> float:
    try:
        return float(value)
    except ValueError:
        raise ConfigError(f"{key}: expected a number, got {value!r}", *where) from None


def _as_bool(value: str, key: str, where) -> bool:
    low = value.lower()
    if low in ("true", "yes", "1"):
        return True
    if low in ("false", "no", "0"):
        return False
    raise ConfigError(f"{key}: expected true/false, got {value!r}", *where)


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    values = dict(DEFAULTS)
    lines: dict[str, int] = {}
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {line!r}", source, lineno)
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in DEFAULTS:
            raise ConfigError(f"unknown configuration key {key!r}", source, lineno)
        values[key] = value
        lines[key] = lineno

    def where(key):
        return (source, lines.get(key))

    # architecture
    input_text = values["arch.input"]
    dims = input_text.lower().split("x")
    if len(dims) != 3 or not all(d.isdigit() for d in dims):
        raise ConfigError(f"arch.input: expected CHxHxW like 1x32x32, got {input_text!r}", *where("arch.input"))
    input_shape = tuple(int(d) for d in dims)
    num_classes = _as_int(values["arch.classes"], "arch.classes", where("arch.classes"))
    blocks = []
    cur = input_shape[0]
    for index in range(1, 5):
        key = f"arch.block{index}"
        block = _parse_block(values[key], index, cur, where(key))
        cur = block.out_channels
        blocks.append(block)
    try:
        arch = ArchitectureSpec(tuple(blocks), num_classes, input_shape)
    except SpecError as err:
        raise ConfigError(str(err), source) from None

    students = _as_int(values["students"], "students", where("students"))
    if students < 2:
        raise ConfigError(f"students must be >= 2, got {students}", *where("students"))

    tw_text = values["teacher_weights"]
    if tw_text in ("", "uniform"):
        teacher_weights = None
    else:
        teacher_weights = [_as_float(v, "teacher_weights", where("teacher_weights"))
                           for v in tw_text.split(",")]
        if len(teacher_weights) != students:
            raise ConfigError(f"teacher_weights: expected {students} values, got {len(teacher_weights)}",
                              *where("teacher_weights"))
        if any(w < 0 for w in teacher_weights) or abs(sum(teacher_weights) - 1.0) > 1e-9:
            raise ConfigError("teacher_weights must be non-negative and sum to 1", *where("teacher_weights"))

    try:
        weights = LossWeights(
            alpha=_as_float(values["loss.alpha"], "loss.alpha", where("loss.alpha")),
            beta=_as_float(values["loss.beta"], "loss.beta", where("loss.beta")),
            gamma=_as_float(values["loss.gamma"], "loss.gamma", where("loss.gamma")),
            temperature=_as_float(values["loss.temperature"], "loss.temperature", where("loss.temperature")),
        )
    except ValueError as err:
        set_keys = [k for k in ("loss.alpha", "loss.beta", "loss.gamma", "loss.temperature") if k in lines]
        if set_keys:
            raise ConfigError(str(err), *where(set_keys[0])) from None
        raise ConfigError(str(err), source) from None

    schedule_text = values["train.schedule"]
    drops = []
    if schedule_text:
        for token in schedule_text.split(","):
            fraction, sep, multiplier = token.partition(":")
            if not sep:
                raise ConfigError(f"train.schedule: expected FRACTION:MULTIPLIER, got {token!r}",
                                  *where("train.schedule"))
            drops.append((_as_float(fraction, "train.schedule", where("train.schedule")),
                          _as_float(multiplier, "train.schedule", where("train.schedule"))))
    lr_drops = tuple(drops) if schedule_text else DEFAULT_LR_DROPS

    mode = values["train.mode"]
    if mode not in ("ensemble", "baseline"):
        raise ConfigError(f"train.mode must be 'ensemble' or 'baseline', got {mode!r}", *where("train.mode"))

    seeds_text = values["seeds"]
    seeds = [_as_int(v, "seeds", where("seeds")) for v in seeds_text.split(",") if v.strip() != ""]
    if not seeds:
        raise ConfigError("seeds must list at least one integer", *where("seeds"))

    synth = {
        "classes": _as_int(values["data.synth.classes"], "data.synth.classes", where("data.synth.classes")),
        "per_class": _as_int(values["data.synth.per_class"], "data.synth.per_class", where("data.synth.per_class")),
        "test_per_class": _as_int(values["data.synth.test_per_class"], "data.synth.test_per_class",
                                  where("data.synth.test_per_class")),
        "size": _as_int(values["data.synth.size"], "data.synth.size", where("data.synth.size")),
        "channels": _as_int(values["data.synth.channels"], "data.synth.channels", where("data.synth.channels")),
        "noise": _as_float(values["data.synth.noise"], "data.synth.noise", where("data.synth.noise")),
        "seed": _as_int(values["data.synth.seed"], "data.synth.seed", where("data.synth.seed")),
    }

    cfg = RunConfig(
        arch=arch,
        students=students,
        teacher_weights=teacher_weights,
        weights=weights,
        kd_teacher_grad=_as_bool(values["loss.kd_teacher_grad"], "loss.kd_teacher_grad",
                                 where("loss.kd_teacher_grad")),
        kd_t2_scale=_as_bool(values["loss.kd_t2_scale"], "loss.kd_t2_scale", where("loss.kd_t2_scale")),
        epochs=_as_int(values["train.epochs"], "train.epochs", where("train.epochs")),
        batch_size=_as_int(values["train.batch"], "train.batch", where("train.batch")),
        base_lr=_as_float(values["train.lr"], "train.lr", where("train.lr")),
        momentum=_as_float(values["train.momentum"], "train.momentum", where("train.momentum")),
        nesterov=_as_bool(values["train.nesterov"], "train.nesterov", where("train.nesterov")),
        lr_drops=lr_drops,
        mode=mode,
        data_path=values["data.path"],
        synth=synth,
        seeds=seeds,
        raw=values,
    )
    try:
        cfg.train_config(seed=seeds[0])
    except ValueError as err:
        raise ConfigError(str(err), source) from None
    return cfg


def parse_config_file(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read(), source=str(path))


def default_config() -> RunConfig:
    return parse_config("")
