"""Run configuration files.

A run file is INI-style text with the sections ``[meta]``, ``[space]``,
``[constraint]``, ``[optimizer]``, ``[data]`` and ``[output]``.  Unknown
sections or keys are errors.  Example::

    [meta]
    schema_version = 1

    [space]
    preset = desk            ; or give `layers` explicitly
    spatial_max = 16

    [constraint]
    metric = flops
    target_fraction = 0.5
    rho = auto

    [optimizer]
    outer_iterations = 40

    [data]
    classes = 10

    [output]
    dir = runs/desk

Layers are written ``kind=conv out=24 k=3 stride=2 block=0`` and separated
by ``;``.  Tie groups are index lists separated by ``;``.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field
from typing import Optional

from .cost import PENALTY_FORMS
from .space import ArchitectureSpace, LayerSpec

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Invalid run file; ``key`` names the offending ``section.key``."""

    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")


@dataclass
class SpaceSection:
    preset: Optional[str] = "desk"
    layers: Optional[str] = None
    input_channels: int = 3
    spatial_max: int = 16
    spatial_min: Optional[int] = None
    tie_groups: Optional[str] = None
    droppable: Optional[str] = None
    min_depth: Optional[int] = None
    widths: str = "24,24,24,24"


@dataclass
class ConstraintSection:
    metric: str = "flops"
    target: Optional[float] = None
    target_fraction: Optional[float] = None
    rho: str = "auto"
    rho_magnitude: float = 10.0
    unit: Optional[float] = None
    form: str = "squared_error"
    lut: Optional[str] = None


@dataclass
class OptimizerSection:
    outer_iterations: int = 100
    weight_iterations: int = 200
    samples: int = 100
    vector_updates_per_outer: int = 20
    sigma_initial: float = 0.0125
    sigma_final: float = 0.0025
    sigma_units: str = "normalized"
    alpha_initial: float = 0.05
    alpha_final: float = 0.0
    baseline: bool = True
    seed: int = 0
    eval_subset: int = 512
    batch_size: int = 32
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-5
    workers: int = 1


@dataclass
class DataSection:
    classes: int = 10
    samples_per_class: int = 100
    s_max: Optional[int] = None
    noise: float = 1.0
    val_fraction: float = 0.2
    seed: int = 0


@dataclass
class OutputSection:
    dir: str = "run"


@dataclass
class RunConfig:
    space: SpaceSection = field(default_factory=SpaceSection)
    constraint: ConstraintSection = field(default_factory=ConstraintSection)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    data: DataSection = field(default_factory=DataSection)
    output: OutputSection = field(default_factory=OutputSection)

    @property
    def trace_path(self) -> str:
        return os.path.join(self.output.dir, "trace.jsonl")

    @property
    def architecture_path(self) -> str:
        return os.path.join(self.output.dir, "architecture.json")

    @property
    def checkpoint_dir(self) -> str:
        return os.path.join(self.output.dir, "checkpoint")

    def to_ini(self) -> str:
        lines = ["[meta]", f"schema_version = {SCHEMA_VERSION}", ""]
        for name in SECTIONS:
            lines.append(f"[{name}]")
            for key, value in vars(getattr(self, name)).items():
                if value is not None:
                    lines.append(f"{key} = {str(value).lower() if isinstance(value, bool) else value}")
            lines.append("")
        return "\n".join(lines)


SECTIONS = {
    "space": SpaceSection,
    "constraint": ConstraintSection,
    "optimizer": OptimizerSection,
    "data": DataSection,
    "output": OutputSection,
}
REQUIRED = ("space", "constraint", "optimizer", "output")

_RANGES = {
    "optimizer.outer_iterations": (1, None),
    "optimizer.weight_iterations": (0, None),
    "optimizer.samples": (1, None),
    "optimizer.vector_updates_per_outer": (1, None),
    "optimizer.sigma_initial": (0, None),
    "optimizer.sigma_final": (0, None),
    "optimizer.alpha_initial": (0, None),
    "optimizer.alpha_final": (0, None),
    "optimizer.eval_subset": (1, None),
    "optimizer.batch_size": (1, None),
    "optimizer.lr": (0, None),
    "optimizer.momentum": (0, 1),
    "optimizer.weight_decay": (0, None),
    "optimizer.workers": (1, None),
    "constraint.target": (0, None),
    "constraint.target_fraction": (0, None),
    "constraint.rho_magnitude": (0, None),
    "constraint.unit": (0, None),
    "data.classes": (2, None),
    "data.samples_per_class": (1, None),
    "data.noise": (0, None),
    "data.val_fraction": (0, 1),
    "space.input_channels": (1, None),
    "space.spatial_max": (1, None),
    "space.spatial_min": (1, None),
    "space.min_depth": (0, None),
}
_STRICT = {"optimizer.sigma_initial", "optimizer.sigma_final", "constraint.target",
           "constraint.target_fraction", "constraint.unit", "constraint.rho_magnitude"}
_CHOICES = {
    "constraint.metric": ("flops", "latency"),
    "constraint.form": PENALTY_FORMS,
    "optimizer.sigma_units": ("normalized", "absolute"),
    "space.preset": ("desk", "none"),
}


def _convert(key: str, raw: str, default):
    kind = type(default)
    if default is None:
        kind = _OPTIONAL_TYPES.get(key, str)
    try:
        if kind is bool:
            low = raw.strip().lower()
            if low not in ("true", "false", "yes", "no", "1", "0"):
                raise ValueError(f"not a boolean: {raw!r}")
            return low in ("true", "yes", "1")
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw.strip()
    except ValueError as exc:
        raise ConfigError(key, str(exc)) from None


_OPTIONAL_TYPES = {
    "space.spatial_min": int,
    "space.min_depth": int,
    "constraint.target": float,
    "constraint.target_fraction": float,
    "constraint.unit": float,
    "data.s_max": int,
}


def loads(text: str, base_dir: str = ".") -> RunConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"), interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError("file", str(exc)) from None
    if not parser.has_section("meta") or "schema_version" not in parser["meta"]:
        raise ConfigError("meta.schema_version", "missing")
    for key in parser["meta"]:
        if key != "schema_version":
            raise ConfigError(f"meta.{key}", "unknown key")
    if parser["meta"]["schema_version"].strip() != str(SCHEMA_VERSION):
        raise ConfigError("meta.schema_version", f"unsupported version, expected {SCHEMA_VERSION}")
    for name in parser.sections():
        if name != "meta" and name not in SECTIONS:
            raise ConfigError(name, "unknown section")
    for name in REQUIRED:
        if not parser.has_section(name):
            raise ConfigError(name, "missing section")

    cfg = RunConfig()
    for name, cls in SECTIONS.items():
        section = getattr(cfg, name)
        if not parser.has_section(name):
            continue
        for key, raw in parser[name].items():
            full = f"{name}.{key}"
            if not hasattr(section, key):
                raise ConfigError(full, "unknown key")
            value = _convert(full, raw, getattr(cls(), key))
            _check_value(full, value)
            setattr(section, key, value)

    c = cfg.constraint
    if (c.target is None) == (c.target_fraction is None):
        raise ConfigError("constraint.target", "give exactly one of target or target_fraction")
    if c.rho != "auto":
        try:
            if float(c.rho) < 0:
                raise ValueError
        except ValueError:
            raise ConfigError("constraint.rho", "must be 'auto' or a non-negative number") from None
    if c.metric == "latency":
        if not c.lut:
            raise ConfigError("constraint.lut", "latency metric needs a lookup table path")
        c.lut = os.path.join(base_dir, c.lut)
    cfg.output.dir = os.path.join(base_dir, cfg.output.dir)
    if cfg.space.preset == "none" and not cfg.space.layers:
        raise ConfigError("space.layers", "required when preset = none")
    build_space(cfg)  # validates the space section
    return cfg


def load(path: str) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return loads(fh.read(), os.path.dirname(os.path.abspath(path)))


def _check_value(key: str, value) -> None:
    if key in _CHOICES and value not in _CHOICES[key]:
        raise ConfigError(key, f"must be one of {', '.join(_CHOICES[key])}")
    if key in _RANGES and value is not None:
        lo, hi = _RANGES[key]
        if (key in _STRICT and value <= lo) or value < lo or (hi is not None and value > hi):
            bound = f"> {lo}" if key in _STRICT else f">= {lo}"
            raise ConfigError(key, f"value {value} out of range ({bound}" + (f", <= {hi})" if hi is not None else ")"))


def _parse_layers(text: str) -> list[LayerSpec]:
    layers = []
    for n, chunk in enumerate(p for p in text.split(";") if p.strip()):
        fields = {}
        for tok in chunk.split():
            if "=" not in tok:
                raise ConfigError("space.layers", f"layer {n}: expected key=value, got {tok!r}")
            k, v = tok.split("=", 1)
            fields[k] = v
        unknown = set(fields) - {"kind", "out", "min", "k", "stride", "block", "relu"}
        if unknown:
            raise ConfigError("space.layers", f"layer {n}: unknown field {sorted(unknown)[0]!r}")
        try:
            layers.append(LayerSpec(
                kind=fields.get("kind", "conv"),
                max_out_channels=int(fields["out"]),
                min_out_channels=int(fields["min"]) if "min" in fields else None,
                kernel=int(fields.get("k", 3)),
                stride=int(fields.get("stride", 1)),
                has_relu=fields.get("relu", "yes").lower() in ("yes", "true", "1"),
                block_id=int(fields.get("block", n)),
            ))
        except (KeyError, ValueError) as exc:
            raise ConfigError("space.layers", f"layer {n}: {exc}") from None
    return layers


def _int_list(key: str, text: str) -> list[int]:
    try:
        return [int(t) for t in text.replace(",", " ").split()]
    except ValueError as exc:
        raise ConfigError(key, str(exc)) from None


def build_space(cfg: RunConfig) -> ArchitectureSpace:
    from .net import desk_space

    s = cfg.space
    try:
        if s.preset == "desk" and not s.layers:
            widths = _int_list("space.widths", s.widths)
            space = desk_space(cfg.data.classes, widths, s.spatial_max, s.input_channels)
            if s.spatial_min is not None or s.min_depth is not None:
                space = ArchitectureSpace(space.layers, space.input_channels, space.spatial_max,
                                          s.spatial_min, space.tie_groups, space.droppable_blocks, s.min_depth)
            return space
        if not s.layers:
            raise ConfigError("space.layers", "missing")
        ties = [] if not s.tie_groups else [
            _int_list("space.tie_groups", g) for g in s.tie_groups.split(";") if g.strip()
        ]
        droppable = _int_list("space.droppable", s.droppable or "")
        return ArchitectureSpace(
            layers=tuple(_parse_layers(s.layers)),
            input_channels=s.input_channels,
            spatial_max=s.spatial_max,
            spatial_min=s.spatial_min,
            tie_groups=tuple(tuple(g) for g in ties),
            droppable_blocks=tuple(droppable),
            min_depth=s.min_depth,
        )
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError("space", str(exc)) from None
