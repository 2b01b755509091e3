"""Teacher (flow) and student (RGB with bypass branches) 3-D ResNeXt networks.

Both share one backbone topology: a 3x7x7 stem with spatial stride 2 followed
by four stages of grouped bottleneck blocks.  Stage widths are
``base_width * (1, 2, 4, 8)`` and stages 2-4 halve T, H and W.

The student taps the backbone three times.  Branch 1 reads the penultimate
stage output through a small residual unit, branch 2 reads the final feature
map through a second residual unit and branch 3 pools the final feature map
directly.  The three pooled vectors are concatenated and fed to one affine
classifier.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterator

import numpy as np

from . import instrument
from .errors import ConfigurationError, DimensionError
from .tensor import (
    RunningStats,
    Tensor,
    add,
    batch_norm,
    concat,
    conv3d,
    fully_connected,
    global_avg_pool,
    relu,
)

TAP2_CHOICES = ("final", "pre_relu")


@dataclass(frozen=True)
class BackboneConfig:
    stage_blocks: tuple[int, ...] = (1, 1, 1, 1)
    base_width: int = 8
    cardinality: int = 4
    in_channels: int = 3
    clip_shape: tuple[int, int, int] = (8, 32, 32)
    num_classes: int = 8
    tap2: str = "final"

    def __post_init__(self):
        object.__setattr__(self, "stage_blocks", tuple(int(b) for b in self.stage_blocks))
        object.__setattr__(self, "clip_shape", tuple(int(s) for s in self.clip_shape))
        if len(self.stage_blocks) != 4 or min(self.stage_blocks) < 1:
            raise ConfigurationError(f"need 4 stages of >= 1 block, got {self.stage_blocks}")
        if self.base_width < 1 or self.cardinality < 1:
            raise ConfigurationError("base_width and cardinality must be positive")
        if self.base_width % self.cardinality:
            raise ConfigurationError(
                f"base_width {self.base_width} is not divisible by cardinality {self.cardinality}"
            )
        if self.in_channels < 1 or self.num_classes < 1:
            raise ConfigurationError("need in_channels >= 1 and num_classes >= 1")
        if len(self.clip_shape) != 3 or self.clip_shape[0] < 2 or min(self.clip_shape[1:]) < 1:
            raise ConfigurationError(f"clip_shape must be (T>=2, H, W), got {self.clip_shape}")
        if self.tap2 not in TAP2_CHOICES:
            raise ConfigurationError(f"tap2 must be one of {TAP2_CHOICES}, got {self.tap2!r}")
        s, t = feature_shape(self, self.clip_shape[0]), feature_shape(self, self.clip_shape[0] - 1)
        if s != t:
            raise ConfigurationError(
                f"student feature map {s} and teacher feature map {t} differ for clip length "
                f"{self.clip_shape[0]}; the distillation distance would be ill-typed"
            )

    @property
    def widths(self) -> tuple[int, int, int, int]:
        return tuple(self.base_width * m for m in (1, 2, 4, 8))

    def for_teacher(self) -> "BackboneConfig":
        return replace(self, in_channels=2)

    def for_student(self) -> "BackboneConfig":
        return replace(self, in_channels=3)


def _conv_out(size: int, k: int, s: int, p: int) -> int:
    return (size + 2 * p - k) // s + 1


def stage_shapes(config: BackboneConfig, frames: int) -> list[tuple[int, int, int, int]]:
    """(C, T, H, W) after each of the four stages for a ``frames``-long input."""
    _, h, w = config.clip_shape
    t = frames
    t, h, w = _conv_out(t, 3, 1, 1), _conv_out(h, 7, 2, 3), _conv_out(w, 7, 2, 3)
    if min(t, h, w) < 1:
        raise ConfigurationError(f"input {frames}x{config.clip_shape[1:]} is too small for the stem")
    shapes = []
    for i, width in enumerate(config.widths):
        if i > 0:
            t, h, w = (_conv_out(d, 3, 2, 1) for d in (t, h, w))
        shapes.append((width, t, h, w))
    return shapes


def feature_shape(config: BackboneConfig, frames: int) -> tuple[int, int, int, int]:
    return stage_shapes(config, frames)[-1]


# --------------------------------------------------------------------- layers


class _Store:
    """Named parameters and running statistics, initialised in creation order."""

    def __init__(self, seed: int):
        self.rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}
        self.stats: dict[str, RunningStats] = {}

    def normal(self, name: str, shape, std: float) -> Tensor:
        t = Tensor(self.rng.standard_normal(shape) * std, requires_grad=True)
        self.params[name] = t
        return t

    def const(self, name: str, shape, value: float) -> Tensor:
        t = Tensor(np.full(shape, value), requires_grad=True)
        self.params[name] = t
        return t


class Conv:
    def __init__(self, store, name, cin, cout, kernel, stride=1, padding=0, groups=1, bias=False):
        fan_in = (cin // groups) * int(np.prod(kernel))
        self.weight = store.normal(f"{name}.weight", (cout, cin // groups, *kernel), np.sqrt(2.0 / fan_in))
        self.bias = store.const(f"{name}.bias", (cout,), 0.0) if bias else None
        self.stride, self.padding, self.groups = stride, padding, groups

    def __call__(self, x: Tensor) -> Tensor:
        return conv3d(x, self.weight, self.bias, self.stride, self.padding, self.groups)


class BatchNorm:
    def __init__(self, store, name, channels):
        self.scale = store.const(f"{name}.scale", (channels,), 1.0)
        self.shift = store.const(f"{name}.shift", (channels,), 0.0)
        self.stats = store.stats[name] = RunningStats(channels)

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        return batch_norm(x, self.scale, self.shift, self.stats, train)


class Bottleneck:
    """Grouped 1x1x1 / 3x3x3 / 1x1x1 residual block with optional projection."""

    def __init__(self, store, name, cin, width, stride, cardinality):
        self.conv1 = Conv(store, f"{name}.conv1", cin, width, (1, 1, 1))
        self.bn1 = BatchNorm(store, f"{name}.bn1", width)
        self.conv2 = Conv(store, f"{name}.conv2", width, width, (3, 3, 3), stride, 1, cardinality)
        self.bn2 = BatchNorm(store, f"{name}.bn2", width)
        self.conv3 = Conv(store, f"{name}.conv3", width, width, (1, 1, 1))
        self.bn3 = BatchNorm(store, f"{name}.bn3", width)
        self.proj = None
        if stride != 1 or cin != width:
            self.proj = Conv(store, f"{name}.proj", cin, width, (1, 1, 1), stride)
            self.proj_bn = BatchNorm(store, f"{name}.proj_bn", width)

    def __call__(self, x: Tensor, train: bool) -> tuple[Tensor, Tensor]:
        y = relu(self.bn1(self.conv1(x), train))
        y = relu(self.bn2(self.conv2(y), train))
        y = self.bn3(self.conv3(y), train)
        skip = x if self.proj is None else self.proj_bn(self.proj(x), train)
        pre = add(y, skip)
        return relu(pre), pre


class ResidualUnit:
    """Channel-preserving bypass branch: two grouped 3x3x3 convs and an identity skip."""

    def __init__(self, store, name, channels, cardinality):
        self.conv_a = Conv(store, f"{name}.conv_a", channels, channels, (3, 3, 3), 1, 1, cardinality)
        self.bn_a = BatchNorm(store, f"{name}.bn_a", channels)
        self.conv_b = Conv(store, f"{name}.conv_b", channels, channels, (3, 3, 3), 1, 1, cardinality)
        self.bn_b = BatchNorm(store, f"{name}.bn_b", channels)

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        y = relu(self.bn_a(self.conv_a(x), train))
        y = self.bn_b(self.conv_b(y), train)
        return relu(add(y, x))


class Backbone:
    def __init__(self, store, config: BackboneConfig, in_channels: int):
        base = config.base_width
        self.stem = Conv(store, "backbone.stem.conv", in_channels, base, (3, 7, 7), (1, 2, 2), (1, 3, 3))
        self.stem_bn = BatchNorm(store, "backbone.stem.bn", base)
        self.stages: list[list[Bottleneck]] = []
        cin = base
        for s, (width, blocks) in enumerate(zip(config.widths, config.stage_blocks)):
            stage = []
            for b in range(blocks):
                stride = 2 if (s > 0 and b == 0) else 1
                stage.append(Bottleneck(store, f"backbone.stage{s + 1}.{b}", cin, width, stride, config.cardinality))
                cin = width
            self.stages.append(stage)

    def __call__(self, x: Tensor, train: bool) -> tuple[list[Tensor], Tensor]:
        """Return every stage output and the pre-ReLU sum of the last block."""
        y = relu(self.stem_bn(self.stem(x), train))
        outs, pre = [], y
        for stage in self.stages:
            for block in stage:
                y, pre = block(y, train)
            outs.append(y)
        return outs, pre


# ------------------------------------------------------------------- networks


@dataclass
class TrainMeta:
    epoch: int = 0
    lam: float = 0.0
    seed: int = 0


@dataclass
class StudentForward:
    logits: Tensor
    feature2: Tensor
    pooled1: Tensor
    pooled2: Tensor
    pooled3: Tensor


class _Net:
    kind = ""

    def __init__(self, config: BackboneConfig, seed: int):
        self.config = config
        self.seed = seed
        self.meta = TrainMeta(seed=seed)
        self._store = _Store(seed)

    @property
    def params(self) -> dict[str, Tensor]:
        return self._store.params

    @property
    def stats(self) -> dict[str, RunningStats]:
        return self._store.stats

    def state(self) -> Iterator[tuple[str, np.ndarray]]:
        """Parameters then running statistics, in a fixed order."""
        for name, p in self.params.items():
            yield name, p.data
        for name, st in self.stats.items():
            yield f"{name}.running_mean", st.mean
            yield f"{name}.running_var", st.var

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        expected = dict(self.state())
        if set(state) != set(expected):
            missing = sorted(set(expected) - set(state))[:3]
            extra = sorted(set(state) - set(expected))[:3]
            raise ConfigurationError(f"state does not match network: missing {missing}, unexpected {extra}")
        for name, arr in state.items():
            if arr.shape != expected[name].shape:
                raise ConfigurationError(f"{name}: shape {arr.shape} != expected {expected[name].shape}")
        for name, p in self.params.items():
            p.data = np.array(state[name], dtype=np.float64)
        for name, st in self.stats.items():
            st.mean = np.array(state[f"{name}.running_mean"], dtype=np.float64)
            st.var = np.array(state[f"{name}.running_var"], dtype=np.float64)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def _check_input(self, x: Tensor, channels: int, frames: int) -> None:
        _, h, w = self.config.clip_shape
        want = (channels, frames, h, w)
        if x.ndim != 5 or tuple(x.shape[1:]) != want:
            raise DimensionError(f"{self.kind} expects input [N,{','.join(map(str, want))}], got {x.shape}")


class StudentNet(_Net):
    kind = "student"

    def __init__(self, config: BackboneConfig, seed: int = 0):
        super().__init__(config, seed)
        store = self._store
        widths = config.widths
        self.backbone = Backbone(store, config, 3)
        self.bypass1 = ResidualUnit(store, "bypass1", widths[2], config.cardinality)
        self.bypass2 = ResidualUnit(store, "bypass2", widths[3], config.cardinality)
        fused = widths[2] + 2 * widths[3]
        self.head_weight = store.normal("head.weight", (config.num_classes, fused), np.sqrt(1.0 / fused))
        self.head_bias = store.const("head.bias", (config.num_classes,), 0.0)

    @property
    def fusion_dims(self) -> tuple[int, int, int]:
        w = self.config.widths
        return (w[2], w[3], w[3])

    def forward(self, x: Tensor, train: bool = False) -> StudentForward:
        self._check_input(x, 3, self.config.clip_shape[0])
        instrument.bump(instrument.STUDENT_FORWARDS, x.shape[0])
        outs, pre = self.backbone(x, train)
        feature2 = outs[-1]
        b1 = self.bypass1(outs[-2], train)
        b2 = self.bypass2(feature2 if self.config.tap2 == "final" else pre, train)
        p1, p2, p3 = global_avg_pool(b1), global_avg_pool(b2), global_avg_pool(feature2)
        logits = fully_connected(concat([p1, p2, p3], axis=1), self.head_weight, self.head_bias)
        return StudentForward(logits, feature2, p1, p2, p3)

    __call__ = forward


class TeacherNet(_Net):
    kind = "teacher"

    def __init__(self, config: BackboneConfig, seed: int = 0):
        super().__init__(config, seed)
        instrument.bump(instrument.TEACHER_BUILDS)
        store = self._store
        self.backbone = Backbone(store, config, 2)
        top = config.widths[3]
        self.head_weight = store.normal("head.weight", (config.num_classes, top), np.sqrt(1.0 / top))
        self.head_bias = store.const("head.bias", (config.num_classes,), 0.0)

    def forward(self, flow: Tensor, train: bool = False) -> tuple[Tensor, Tensor]:
        """Return ``(logits, feature1)`` for a ``[N, 2, T-1, H, W]`` flow batch."""
        self._check_input(flow, 2, self.config.clip_shape[0] - 1)
        instrument.bump(instrument.TEACHER_FORWARDS, flow.shape[0])
        outs, _ = self.backbone(flow, train)
        feature1 = outs[-1]
        logits = fully_connected(global_avg_pool(feature1), self.head_weight, self.head_bias)
        return logits, feature1

    __call__ = forward


def build_student(config: BackboneConfig, seed: int = 0) -> StudentNet:
    return StudentNet(config.for_student(), seed)


def build_teacher(config: BackboneConfig, seed: int = 0) -> TeacherNet:
    return TeacherNet(config.for_teacher(), seed)


def forward_student(net: StudentNet, clips: Tensor, train: bool = False) -> StudentForward:
    return net.forward(clips, train)


def forward_teacher(net: TeacherNet, flows: Tensor, train: bool = False) -> tuple[Tensor, Tensor]:
    return net.forward(flows, train)
