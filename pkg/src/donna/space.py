"""Search spaces: per-position choice grids, genomes, constraints."""
from __future__ import annotations

import hashlib
import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import yaml

from .blocks import (
    BlockChoice,
    BlockSlot,
    Network,
    Preset,
    build_block,
    count_macs,
    get_preset,
)

__all__ = [
    "Genome",
    "SearchSpace",
    "grid_choices",
    "cardinality",
    "sample_uniform",
    "encode",
    "decode",
    "apply_constraints",
    "compression_space",
    "load_space",
    "builtin_space",
    "enumerate_genomes",
]

Genome = tuple[int, ...]

FIELDS = ("kernel", "expand", "depth", "attention", "act", "layer_type", "channel_scale")
ACT_FOR = {"none": "relu", "se": "swish"}


def grid_choices(grid: Mapping[str, Sequence]) -> list[BlockChoice]:
    """Cartesian product of a field grid; attention fixes the activation."""
    out = []
    for k, e, d, att, lt, sc in itertools.product(
        grid["kernel"],
        grid["expand"],
        grid["depth"],
        grid.get("attention", ["none"]),
        grid.get("layer_type", ["depthwise"]),
        grid.get("channel_scale", [1.0]),
    ):
        out.append(BlockChoice(int(k), int(e), int(d), att, ACT_FOR[att], lt, float(sc)))
    return out


def _hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:12]


def _preset_dict(p: Preset) -> dict:
    return {
        "name": p.name,
        "slots": [list(s) for s in p.slots],
        "reference": p.reference.to_dict(),
        "slot_references": [r.to_dict() for r in p.slot_references],
        "in_channels": p.in_channels,
        "image_size": p.image_size,
        "stem_channels": p.stem_channels,
        "stem_kernel": p.stem_kernel,
        "stem_stride": p.stem_stride,
        "stem_act": p.stem_act,
        "head_channels": p.head_channels,
        "head_act": p.head_act,
        "num_classes": p.num_classes,
    }


@dataclass(frozen=True)
class SearchSpace:
    """Ordered per-position choice lists bound to a network preset.

    ``root_index[n][m]`` maps local choice ``m`` to its index in the root
    space whose block library it shares; ``library_hash`` names that root.
    """

    name: str
    preset: Preset
    choices: tuple[tuple[BlockChoice, ...], ...]
    root_index: tuple[tuple[int, ...], ...] = ()
    library_hash: str = ""
    constraints: Mapping[str, dict] = field(default_factory=dict, compare=False, hash=False)

    def __post_init__(self):
        if len(self.choices) != len(self.preset.slots):
            raise ValueError(f"space {self.name}: {len(self.choices)} positions vs {len(self.preset.slots)} slots")
        for n, cs in enumerate(self.choices):
            if not cs:
                raise ValueError(f"space {self.name}: position {n} has no choices")
        if not self.root_index:
            object.__setattr__(self, "root_index", tuple(tuple(range(len(c))) for c in self.choices))
        if not self.library_hash:
            object.__setattr__(self, "library_hash", self.space_hash)

    @property
    def space_hash(self) -> str:
        return _hash(
            {"preset": _preset_dict(self.preset), "choices": [[c.to_dict() for c in cs] for cs in self.choices]}
        )

    @property
    def positions(self) -> int:
        return len(self.choices)

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(len(c) for c in self.choices)

    @property
    def slots(self) -> list[BlockSlot]:
        return self.preset.block_slots()

    def is_root(self) -> bool:
        return self.library_hash == self.space_hash

    def validate(self, genome: Sequence[int]) -> Genome:
        g = tuple(int(i) for i in genome)
        if len(g) != self.positions:
            raise ValueError(f"genome has {len(g)} genes, space {self.name} has {self.positions} positions")
        for n, (i, m) in enumerate(zip(g, self.sizes)):
            if not 0 <= i < m:
                raise ValueError(f"gene {i} at position {n} out of range 0..{m - 1}")
        return g

    def block_choices(self, genome: Sequence[int]) -> list[BlockChoice]:
        g = self.validate(genome)
        return [self.choices[n][i] for n, i in enumerate(g)]

    def to_root(self, genome: Sequence[int]) -> Genome:
        g = self.validate(genome)
        return tuple(self.root_index[n][i] for n, i in enumerate(g))

    def from_root(self, root_genome: Sequence[int]) -> Genome:
        out = []
        for n, r in enumerate(root_genome):
            try:
                out.append(self.root_index[n].index(int(r)))
            except ValueError:
                raise ValueError(f"root choice {r} at position {n} is not in space {self.name}") from None
        return tuple(out)

    def reference_genome(self) -> Genome:
        out = []
        for n, slot in enumerate(self.slots):
            if slot.reference not in self.choices[n]:
                raise ValueError(f"reference choice not in space at position {n}")
            out.append(self.choices[n].index(slot.reference))
        return tuple(out)

    def reference_in_space(self) -> list[bool]:
        return [s.reference in cs for s, cs in zip(self.slots, self.choices)]

    def describe(self) -> dict:
        return {
            "name": self.name,
            "hash": self.space_hash,
            "library_hash": self.library_hash,
            "sizes": list(self.sizes),
            "cardinality": cardinality(self),
        }


def cardinality(space: SearchSpace) -> int:
    return math.prod(space.sizes)


def enumerate_genomes(space: SearchSpace) -> Iterable[Genome]:
    return itertools.product(*(range(m) for m in space.sizes))


def sample_uniform(space: SearchSpace, count: int, seed: int) -> list[Genome]:
    """``count`` i.i.d. genomes, each gene uniform over its position's choices."""
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    genes = rng.integers(0, np.array(space.sizes), size=(count, space.positions))
    return [tuple(int(v) for v in row) for row in genes]


def encode(genome: Sequence[int]) -> str:
    return "v1:" + "-".join(str(int(i)) for i in genome)


def decode(text: str, space: SearchSpace) -> Genome:
    text = text.strip()
    if not text.startswith("v1:"):
        raise ValueError(f"malformed genome {text!r}: expected 'v1:' prefix")
    body = text[3:]
    try:
        genes = tuple(int(p) for p in body.split("-"))
    except ValueError:
        raise ValueError(f"malformed genome {text!r}") from None
    if any(p != str(g) for p, g in zip(body.split("-"), genes)):
        raise ValueError(f"malformed genome {text!r}: non-canonical integer")
    return space.validate(genes)


def _matches(choice: BlockChoice, rules: Mapping[str, Sequence]) -> bool:
    for key, allowed in rules.items():
        if key not in FIELDS:
            raise ValueError(f"unknown constraint field {key!r}")
        value = getattr(choice, key)
        if key == "channel_scale":
            if not any(math.isclose(value, float(a)) for a in allowed):
                return False
        elif value not in allowed:
            return False
    return True


def apply_constraints(space: SearchSpace, spec: Mapping | str, name: str | None = None) -> SearchSpace:
    """Filter choice lists by field rules.

    ``spec`` maps field names to allowed values, plus an optional
    ``positions`` mapping (position -> field rules) applied on top. A
    string names one of the space's stored constraint specs.
    """
    label = name
    if isinstance(spec, str):
        label = label or spec
        try:
            spec = space.constraints[spec]
        except KeyError:
            raise ValueError(f"space {space.name} has no constraint named {spec!r}") from None
    spec = dict(spec)
    per_pos = {int(k): v for k, v in (spec.pop("positions", None) or {}).items()}
    choices, roots = [], []
    for n, cs in enumerate(space.choices):
        keep = [
            m for m, c in enumerate(cs) if _matches(c, spec) and _matches(c, per_pos.get(n, {}))
        ]
        if not keep:
            raise ValueError(f"constraint leaves position {n} of space {space.name} empty")
        choices.append(tuple(cs[m] for m in keep))
        roots.append(tuple(space.root_index[n][m] for m in keep))
    return SearchSpace(
        name=f"{space.name}/{label or 'constrained'}",
        preset=space.preset,
        choices=tuple(choices),
        root_index=tuple(roots),
        library_hash=space.library_hash,
        constraints=space.constraints,
    )


def block_macs(choice: BlockChoice, slot: BlockSlot) -> int:
    block = build_block(choice, slot, 0)
    return count_macs(block, (1, slot.in_channels, slot.in_size, slot.in_size))


def compression_space(space: SearchSpace, reference: Network | Preset | None = None) -> SearchSpace:
    """Keep, per position, the choices whose block MACs do not exceed the reference block's."""
    preset = reference.preset if isinstance(reference, Network) else (reference or space.preset)
    if preset.slots != space.preset.slots:
        raise ValueError("reference is not bound to this space")
    choices, roots = [], []
    for n, slot in enumerate(preset.block_slots()):
        limit = block_macs(slot.reference, slot)
        keep = [m for m, c in enumerate(space.choices[n]) if block_macs(c, slot) <= limit]
        if not keep:
            raise ValueError(f"no choice at position {n} is at most the reference block's MACs")
        choices.append(tuple(space.choices[n][m] for m in keep))
        roots.append(tuple(space.root_index[n][m] for m in keep))
    return SearchSpace(
        name=f"{space.name}/compress",
        preset=space.preset,
        choices=tuple(choices),
        root_index=tuple(roots),
        library_hash=space.library_hash,
        constraints=space.constraints,
    )


# --------------------------------------------------------------------------
# definitions
# --------------------------------------------------------------------------

DESK_GRID = {
    "kernel": [3, 5],
    "expand": [2, 4],
    "depth": [1, 2, 3],
    "attention": ["none", "se"],
    "layer_type": ["depthwise", "grouped"],
    "channel_scale": [0.5, 1.0],
}

PAPER_GRID = {
    "kernel": [3, 5, 7],
    "expand": [2, 3, 4, 6],
    "depth": [1, 2, 3, 4],
    "attention": ["none", "se"],
    "layer_type": ["depthwise", "grouped"],
    "channel_scale": [0.5, 1.0],
}

DESK_CONSTRAINTS = {
    "k5": {"kernel": [5]},
    "se-everywhere": {"attention": ["se"]},
    "no-se": {"attention": ["none"]},
    "variant-a": {"attention": ["se"], "kernel": [5]},
    "depthwise": {"layer_type": ["depthwise"]},
}

def space_from_dict(d: Mapping) -> SearchSpace:
    preset = d.get("preset", "desk-ref-3")
    preset = Preset.from_dict(preset) if isinstance(preset, Mapping) else get_preset(preset)
    grid = d.get("grid", DESK_GRID)
    overrides = {int(k): v for k, v in (d.get("positions") or {}).items()}
    choices = []
    for n in range(len(preset.slots)):
        g = dict(grid)
        g.update(overrides.get(n, {}))
        choices.append(tuple(grid_choices(g)))
    return SearchSpace(
        name=d.get("name", "space"),
        preset=preset,
        choices=tuple(choices),
        constraints=dict(d.get("constraints") or {}),
    )


BUILTIN_SPACES = {
    "desk": {"name": "desk", "preset": "desk-ref-3", "grid": DESK_GRID, "constraints": DESK_CONSTRAINTS},
    "paper-grid": {"name": "paper-grid", "preset": "paper-grid-5", "grid": PAPER_GRID},
}


def builtin_space(name: str) -> SearchSpace:
    try:
        return space_from_dict(BUILTIN_SPACES[name])
    except KeyError:
        raise ValueError(f"unknown builtin space {name!r}; known: {sorted(BUILTIN_SPACES)}") from None


def load_space(ref: str | Path) -> SearchSpace:
    """Load a space from a YAML file, or a builtin by name."""
    if isinstance(ref, str) and ref in BUILTIN_SPACES:
        return builtin_space(ref)
    path = Path(ref)
    return space_from_dict(yaml.safe_load(path.read_text()))
