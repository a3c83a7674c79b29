"""Stems, heads, reference networks and candidate replacement blocks."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .layers import (
    Activation,
    BatchNorm2d,
    Conv2d,
    Flatten,
    GlobalAvgPool,
    Module,
    Sequential,
    SqueezeExcite,
)
from .tensor import Tensor, no_grad

__all__ = [
    "BlockChoice",
    "BlockSlot",
    "Preset",
    "PRESETS",
    "InvertedResidual",
    "Block",
    "Network",
    "round_channels",
    "group_count",
    "build_block",
    "build_network",
    "build_reference",
    "forward_block_io",
    "count_macs",
    "count_params",
]

GROUP_WIDTH = 8
SE_REDUCTION = 4
MIN_CHANNELS = 8


@dataclass(frozen=True)
class BlockChoice:
    kernel: int
    expand: int
    depth: int
    attention: str = "none"  # none | se
    act: str = "relu"  # relu | swish
    layer_type: str = "depthwise"  # depthwise | grouped
    channel_scale: float = 1.0

    def __post_init__(self):
        if self.kernel % 2 == 0 or self.kernel < 1:
            raise ValueError(f"kernel must be odd, got {self.kernel}")
        if self.expand < 1 or self.depth < 1:
            raise ValueError("expand and depth must be >= 1")
        if self.attention not in ("none", "se"):
            raise ValueError(f"unknown attention {self.attention!r}")
        if self.act not in ("relu", "swish"):
            raise ValueError(f"unknown activation {self.act!r}")
        if (self.attention == "se") != (self.act == "swish"):
            raise ValueError("squeeze-excite is always paired with swish (and none with relu)")
        if self.layer_type not in ("depthwise", "grouped"):
            raise ValueError(f"unknown layer type {self.layer_type!r}")
        if self.channel_scale <= 0:
            raise ValueError("channel_scale must be positive")

    def describe(self) -> str:
        return (
            f"k{self.kernel}-e{self.expand}-d{self.depth}-{self.attention}/{self.act}"
            f"-{self.layer_type}-s{self.channel_scale:g}"
        )

    def to_dict(self) -> dict:
        return {
            "kernel": self.kernel,
            "expand": self.expand,
            "depth": self.depth,
            "attention": self.attention,
            "act": self.act,
            "layer_type": self.layer_type,
            "channel_scale": self.channel_scale,
        }


@dataclass(frozen=True)
class BlockSlot:
    position: int
    in_channels: int
    out_channels: int
    stride: int
    reference: BlockChoice
    in_size: int = 0  # input spatial size, 0 if unbound

    def __post_init__(self):
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channels must be positive")


def round_channels(value: float, minimum: int = MIN_CHANNELS) -> int:
    """Round half up, floored at ``minimum``."""
    if value <= 0:
        raise ValueError(f"channel count rounds to nothing ({value})")
    return max(minimum, int(np.floor(value + 0.5)))


def group_count(width: int) -> int:
    g = max(1, width // GROUP_WIDTH)
    while width % g:
        g -= 1
    return g


class InvertedResidual(Module):
    """1x1 expand -> BN -> act -> kxk spatial -> BN -> act -> [SE] -> 1x1 project -> BN (+ skip)."""

    def __init__(
        self,
        cin: int,
        cout: int,
        mid: int,
        stride: int,
        kernel: int,
        act: str,
        se: bool,
        layer_type: str,
        rng: np.random.Generator,
    ):
        self.expand = Conv2d(cin, mid, 1, rng=rng)
        self.bn1 = BatchNorm2d(mid)
        self.act1 = Activation(act)
        groups = mid if layer_type == "depthwise" else group_count(mid)
        self.spatial = Conv2d(mid, mid, kernel, stride, groups, rng=rng)
        self.bn2 = BatchNorm2d(mid)
        self.act2 = Activation(act)
        self.se = SqueezeExcite(mid, round_channels(mid / SE_REDUCTION), act, rng=rng) if se else None
        self.project = Conv2d(mid, cout, 1, rng=rng)
        self.bn3 = BatchNorm2d(cout)
        self.residual = stride == 1 and cin == cout

    def forward(self, x):
        y = self.act1(self.bn1(self.expand(x)))
        y = self.act2(self.bn2(self.spatial(y)))
        if self.se is not None:
            y = self.se(y)
        y = self.bn3(self.project(y))
        return y + x if self.residual else y

    def macs(self, shape):
        total = 0
        for layer in (self.expand, self.spatial, self.se, self.project):
            if layer is not None:
                m, shape = layer.macs(shape)
                total += m
        return total, shape


class Block(Module):
    """``depth`` inverted-residual units; only the first one strides."""

    def __init__(self, choice: BlockChoice, slot: BlockSlot, rng: np.random.Generator):
        self.choice = choice
        self.slot = slot
        out = slot.out_channels
        mid = round_channels(out * choice.channel_scale * choice.expand)
        interior = round_channels(out * choice.channel_scale)
        se = choice.attention == "se"
        units = []
        cin = slot.in_channels
        for i in range(choice.depth):
            cout = out if i == choice.depth - 1 else interior
            stride = slot.stride if i == 0 else 1
            units.append(InvertedResidual(cin, cout, mid, stride, choice.kernel, choice.act, se, choice.layer_type, rng))
            cin = cout
        self.units = units

    def forward(self, x):
        for u in self.units:
            x = u(x)
        return x

    def macs(self, shape):
        total = 0
        for u in self.units:
            m, shape = u.macs(shape)
            total += m
        return total, shape


@dataclass(frozen=True)
class Preset:
    name: str
    slots: tuple[tuple[int, int, int], ...]  # (in, out, stride)
    reference: BlockChoice
    in_channels: int = 3
    image_size: int = 16
    stem_channels: int = 16
    stem_kernel: int = 3
    stem_stride: int = 2
    stem_act: str = "swish"
    head_channels: int = 64
    head_act: str = "swish"
    num_classes: int = 8
    slot_references: tuple[BlockChoice, ...] = field(default=())

    def block_slots(self) -> list[BlockSlot]:
        size = (self.image_size + 2 * (self.stem_kernel // 2) - self.stem_kernel) // self.stem_stride + 1
        out = []
        for n, (cin, cout, stride) in enumerate(self.slots):
            ref = self.slot_references[n] if self.slot_references else self.reference
            out.append(BlockSlot(n, cin, cout, stride, ref, size))
            size = (size + 2 * (ref.kernel // 2) - ref.kernel) // stride + 1
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "Preset":
        ref = BlockChoice(**d["reference"])
        kw = {k: v for k, v in d.items() if k not in ("reference", "slots", "slot_references")}
        slot_refs = tuple(BlockChoice(**r) for r in d.get("slot_references", ()))
        return cls(slots=tuple(tuple(s) for s in d["slots"]), reference=ref, slot_references=slot_refs, **kw)


PRESETS: dict[str, Preset] = {
    "desk-ref-3": Preset(
        name="desk-ref-3",
        slots=((16, 24, 1), (24, 32, 2), (32, 48, 2)),
        reference=BlockChoice(5, 4, 3, "se", "swish", "depthwise", 1.0),
    ),
    # five-position analog used only to size the full-scale grid
    "paper-grid-5": Preset(
        name="paper-grid-5",
        slots=((16, 24, 2), (24, 40, 2), (40, 80, 2), (80, 96, 1), (96, 192, 2)),
        reference=BlockChoice(5, 4, 3, "se", "swish", "depthwise", 1.0),
        image_size=64,
        head_channels=256,
    ),
}


def get_preset(preset: str | Preset) -> Preset:
    if isinstance(preset, Preset):
        return preset
    try:
        return PRESETS[preset]
    except KeyError:
        raise ValueError(f"unknown preset {preset!r}; known: {sorted(PRESETS)}") from None


class Network(Module):
    """stem -> N blocks -> head (1x1 conv, BN, act, pool, classifier)."""

    def __init__(self, preset: Preset, choices: Sequence[BlockChoice], rng: np.random.Generator):
        slots = preset.block_slots()
        if len(choices) != len(slots):
            raise ValueError(f"{preset.name} has {len(slots)} positions, got {len(choices)} choices")
        self.preset = preset
        self.slots = slots
        self.choices = tuple(choices)
        self.stem = Sequential(
            Conv2d(preset.in_channels, preset.stem_channels, preset.stem_kernel, preset.stem_stride, rng=rng),
            BatchNorm2d(preset.stem_channels),
            Activation(preset.stem_act),
        )
        self.blocks = [Block(c, s, rng) for c, s in zip(choices, slots)]
        last = slots[-1].out_channels
        self.head = Sequential(
            Conv2d(last, preset.head_channels, 1, rng=rng),
            BatchNorm2d(preset.head_channels),
            Activation(preset.head_act),
            GlobalAvgPool(),
            Conv2d(preset.head_channels, preset.num_classes, 1, bias=True, rng=rng),
            Flatten(),
        )

    def forward(self, x):
        x = self.stem(x)
        for b in self.blocks:
            x = b(x)
        return self.head(x)

    def features(self, x, upto: int):
        """Return the list [stem out, block 0 out, ..., block ``upto`` out]."""
        maps = [self.stem(x)]
        for b in self.blocks[: upto + 1]:
            maps.append(b(maps[-1]))
        return maps

    def macs(self, shape):
        total, shape = self.stem.macs(shape)
        for b in self.blocks:
            m, shape = b.macs(shape)
            total += m
        m, shape = self.head.macs(shape)
        return total + m, shape


def build_block(choice: BlockChoice, slot: BlockSlot, seed: int = 0) -> Block:
    return Block(choice, slot, np.random.default_rng(seed))


def build_network(preset: str | Preset, choices: Sequence[BlockChoice], seed: int = 0) -> Network:
    return Network(get_preset(preset), choices, np.random.default_rng(seed))


def build_reference(preset: str | Preset = "desk-ref-3", seed: int = 0) -> Network:
    """Untrained reference network; Kaiming-uniform init drawn from ``seed``."""
    p = get_preset(preset)
    return build_network(p, [s.reference for s in p.block_slots()], seed)


def forward_block_io(model: Network, batch, position: int) -> tuple[np.ndarray, np.ndarray]:
    """Teacher input and output maps at ``position`` (eval mode, no graph)."""
    if not 0 <= position < len(model.blocks):
        raise ValueError(f"position {position} outside 0..{len(model.blocks) - 1}")
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            maps = model.features(batch if isinstance(batch, Tensor) else Tensor(batch), position)
    finally:
        model.train(was_training)
    return maps[-2].data, maps[-1].data


def count_macs(module: Module, input_shape: Sequence[int]) -> int:
    """Analytic multiply-accumulates of conv/dense layers for ``input_shape``.

    A 3-tuple shape is taken as a single image.
    """
    shape = tuple(input_shape)
    if len(shape) == 3:
        shape = (1,) + shape
    if not hasattr(module, "macs"):
        raise TypeError(f"{type(module).__name__} has no MAC rule")
    return int(module.macs(shape)[0])


def count_params(module: Module) -> int:
    return int(sum(p.size for p in module.parameters()))


def with_reference(preset: Preset, reference: BlockChoice) -> Preset:
    return replace(preset, reference=reference, slot_references=())
