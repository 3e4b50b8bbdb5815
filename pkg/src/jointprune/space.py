"""Pruning vectors, architecture spaces, and the mapping between them.

A pruning vector holds one normalized entry per layer (output channels),
followed by one for the input resolution and one for the depth::

    v = (c_1/c_1max, ..., c_L/c_Lmax, s/s_max, d/d_max)

``round_to_config`` turns any real vector into a concrete integer
architecture; ``normalize`` goes the other way.  Both are pure.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

LAYER_KINDS = ("conv", "depthwise_conv", "dense")


@dataclass(frozen=True)
class LayerSpec:
    """One layer of the maximal network.

    ``block_id`` groups layers into blocks; blocks listed in
    ``ArchitectureSpace.droppable_blocks`` may be skipped.  The input of a
    layer is the output of the nearest preceding *active* layer, or the
    network input for the first one.
    """

    kind: str
    max_out_channels: int
    min_out_channels: Optional[int] = None
    kernel: int = 3
    stride: int = 1
    has_relu: bool = True
    block_id: int = 0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.max_out_channels < 1:
            raise ValueError("max_out_channels must be positive")
        if self.min_out_channels is None:
            default = max(1, math.ceil(0.1 * self.max_out_channels))
            object.__setattr__(self, "min_out_channels", default)
        if not 1 <= self.min_out_channels <= self.max_out_channels:
            raise ValueError(
                f"min_out_channels={self.min_out_channels} outside "
                f"[1, {self.max_out_channels}]"
            )
        if self.kernel < 1 or self.stride < 1:
            raise ValueError("kernel and stride must be >= 1")
        if self.kind != "dense" and self.kernel % 2 == 0:
            raise ValueError("same-padding convolutions need an odd kernel")


@dataclass(frozen=True)
class ArchitectureSpace:
    layers: tuple[LayerSpec, ...]
    input_channels: int
    spatial_max: int
    spatial_min: Optional[int] = None
    tie_groups: tuple[tuple[int, ...], ...] = ()
    droppable_blocks: tuple[int, ...] = ()
    min_depth: Optional[int] = None
    even_spatial: Optional[bool] = None

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(
            self, "tie_groups", tuple(tuple(sorted(g)) for g in self.tie_groups)
        )
        object.__setattr__(self, "droppable_blocks", tuple(self.droppable_blocks))
        if not self.layers:
            raise ValueError("space needs at least one layer")
        if self.spatial_max < 1 or self.input_channels < 1:
            raise ValueError("spatial_max and input_channels must be positive")
        if self.even_spatial is None:
            object.__setattr__(
                self, "even_spatial", any(l.stride > 1 for l in self.layers)
            )
        if self.spatial_min is None:
            object.__setattr__(self, "spatial_min", math.ceil(0.25 * self.spatial_max))
        if not 1 <= self.spatial_min <= self.spatial_max:
            raise ValueError("need 1 <= spatial_min <= spatial_max")
        if self.even_spatial and _even_floor(self.spatial_max) < _even_ceil(self.spatial_min):
            raise ValueError("no even resolution inside the spatial bounds")
        if self.max_depth < 1:
            raise ValueError("at least one droppable block is required")
        if self.min_depth is None:
            object.__setattr__(self, "min_depth", 1)
        if not 0 <= self.min_depth <= self.max_depth:
            raise ValueError("need 0 <= min_depth <= max_depth")
        block_ids = {l.block_id for l in self.layers}
        if len(set(self.droppable_blocks)) != len(self.droppable_blocks):
            raise ValueError("droppable_blocks has duplicates")
        for b in self.droppable_blocks:
            if b not in block_ids:
                raise ValueError(f"droppable block {b} has no layers")
        seen: set[int] = set()
        for group in self.tie_groups:
            for i in group:
                if not 0 <= i < self.num_layers:
                    raise ValueError(f"tie group index {i} out of range")
                if i in seen:
                    raise ValueError(f"layer {i} appears in two tie groups")
                seen.add(i)
            bounds = {(self.layers[i].max_out_channels, self.layers[i].min_out_channels) for i in group}
            if len(bounds) > 1:
                raise ValueError(f"tied layers {group} must share channel bounds")

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def dim(self) -> int:
        return self.num_layers + 2

    @property
    def max_depth(self) -> int:
        return len(self.droppable_blocks)

    @property
    def entry_max(self) -> np.ndarray:
        maxima = [l.max_out_channels for l in self.layers]
        return np.array(maxima + [self.spatial_max, self.max_depth], dtype=float)

    @property
    def entry_min(self) -> np.ndarray:
        minima = [l.min_out_channels for l in self.layers]
        s_min = _even_ceil(self.spatial_min) if self.even_spatial else self.spatial_min
        return np.array(minima + [s_min, self.min_depth], dtype=float)

    @property
    def lower_bound(self) -> np.ndarray:
        """Per-entry lower bound of a valid pruning vector."""
        return self.entry_min / self.entry_max

    def entry_names(self) -> list[str]:
        return [f"c{i + 1}" for i in range(self.num_layers)] + ["spatial", "depth"]

    def maximal_config(self) -> "ArchitectureConfig":
        return ArchitectureConfig(
            out_channels=tuple(l.max_out_channels for l in self.layers),
            spatial=_even_floor(self.spatial_max) if self.even_spatial else self.spatial_max,
            depth=self.max_depth,
        )

    def block_of_layer(self, i: int) -> int:
        return self.layers[i].block_id


@dataclass(frozen=True)
class ArchitectureConfig:
    out_channels: tuple[int, ...]
    spatial: int
    depth: int

    def __post_init__(self):
        object.__setattr__(self, "out_channels", tuple(int(c) for c in self.out_channels))
        object.__setattr__(self, "spatial", int(self.spatial))
        object.__setattr__(self, "depth", int(self.depth))

    def as_dict(self) -> dict:
        return {"out_channels": list(self.out_channels), "spatial": self.spatial, "depth": self.depth}

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureConfig":
        return cls(tuple(d["out_channels"]), d["spatial"], d["depth"])


def check_config(config: ArchitectureConfig, space: ArchitectureSpace) -> None:
    """Raise ``ValueError`` unless ``config`` is a valid point of ``space``."""
    if len(config.out_channels) != space.num_layers:
        raise ValueError(
            f"config has {len(config.out_channels)} layers, space has {space.num_layers}"
        )
    for i, (c, layer) in enumerate(zip(config.out_channels, space.layers)):
        if not layer.min_out_channels <= c <= layer.max_out_channels:
            raise ValueError(f"layer {i}: {c} channels outside bounds")
    for group in space.tie_groups:
        if len({config.out_channels[i] for i in group}) > 1:
            raise ValueError(f"tie group {group} has unequal channels")
    lo, hi = space.entry_min[-2], space.entry_max[-2]
    if not lo <= config.spatial <= hi:
        raise ValueError(f"spatial {config.spatial} outside [{lo:g}, {hi:g}]")
    if space.even_spatial and config.spatial % 2:
        raise ValueError("spatial must be even for a network with strided layers")
    if not space.min_depth <= config.depth <= space.max_depth:
        raise ValueError(f"depth {config.depth} outside [{space.min_depth}, {space.max_depth}]")


def round_half_away(x):
    """Round to the nearest integer, ties away from zero."""
    x = np.asarray(x, dtype=float)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _even_ceil(n: int) -> int:
    return n + (n % 2)


def _even_floor(n: int) -> int:
    return n - (n % 2)


def _tie_average(v: np.ndarray, space: ArchitectureSpace) -> np.ndarray:
    for group in space.tie_groups:
        idx = list(group)
        v[idx] = v[idx].mean()
    return v


def as_vector(v: Sequence[float], space: ArchitectureSpace) -> np.ndarray:
    arr = np.array(v, dtype=float)
    if arr.shape != (space.dim,):
        raise ValueError(f"pruning vector must have length {space.dim}, got shape {arr.shape}")
    return arr


def normalize(config: ArchitectureConfig, space: ArchitectureSpace) -> np.ndarray:
    check_config(config, space)
    raw = np.array(list(config.out_channels) + [config.spatial, config.depth], dtype=float)
    return raw / space.entry_max


def clamp(v: Sequence[float], space: ArchitectureSpace) -> np.ndarray:
    """Clip every entry to ``[lower_bound, 1]`` and equalize tied entries."""
    out = np.clip(as_vector(v, space), space.lower_bound, 1.0)
    return _tie_average(out, space)


def round_to_config(v: Sequence[float], space: ArchitectureSpace) -> ArchitectureConfig:
    v = _tie_average(as_vector(v, space), space)
    scaled = v * space.entry_max
    ints = round_half_away(scaled)
    if space.even_spatial:
        ints[-2] = 2 * round_half_away(scaled[-2] / 2)
    ints = np.clip(ints, space.entry_min, space.entry_max)
    if space.even_spatial:
        ints[-2] = _even_floor(int(ints[-2]))
    channels = tuple(int(c) for c in ints[:-2])
    return ArchitectureConfig(channels, int(ints[-2]), int(ints[-1]))


def active_layers(config: ArchitectureConfig, space: ArchitectureSpace) -> list[int]:
    kept = set(space.droppable_blocks[: config.depth])
    droppable = set(space.droppable_blocks)
    return [
        i
        for i, layer in enumerate(space.layers)
        if layer.block_id not in droppable or layer.block_id in kept
    ]


def layer_inputs(config: ArchitectureConfig, space: ArchitectureSpace) -> dict[int, Optional[int]]:
    """Map each active layer to the active layer feeding it (None = network input)."""
    prev: Optional[int] = None
    sources = {}
    for i in active_layers(config, space):
        sources[i] = prev
        prev = i
    return sources


def enumerate_configs(space: ArchitectureSpace):
    """Yield every valid configuration of ``space`` (small spaces only)."""
    tied = {i: g for g in space.tie_groups for i in g}
    free: list[tuple[int, ...]] = []
    for i in range(space.num_layers):
        g = tied.get(i, (i,))
        if g[0] == i:
            free.append(g)
    ranges = [
        range(space.layers[g[0]].min_out_channels, space.layers[g[0]].max_out_channels + 1)
        for g in free
    ]
    s_lo, s_hi = int(space.entry_min[-2]), int(space.entry_max[-2])
    spatials = [s for s in range(s_lo, s_hi + 1) if not (space.even_spatial and s % 2)]
    for combo in itertools.product(*ranges):
        channels = [0] * space.num_layers
        for g, c in zip(free, combo):
            for i in g:
                channels[i] = c
        for s in spatials:
            for d in range(space.min_depth, space.max_depth + 1):
                yield ArchitectureConfig(tuple(channels), s, d)

