"""Resource costs of a configuration and the constraint penalty.

FLOPs here are multiply-accumulate counts (one MAC = one FLOP), not 2x MACs.
Latency comes from a per-layer lookup table keyed by
``(layer_id, in_channels, out_channels, spatial_in)``; the network latency is
the sum over active layers.
"""

from __future__ import annotations

import csv
import io
import itertools
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Union

import numpy as np

from .space import ArchitectureConfig, ArchitectureSpace, check_config, layer_inputs

LUT_HEADER = ("layer_id", "in_channels", "out_channels", "spatial_in", "latency_us")
PENALTY_FORMS = ("squared_error", "scaled_square")


class ExtrapolationError(ValueError):
    """A latency query falls outside the measured range of a layer."""


class LutFormatError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class ConstraintSpec:
    """Resource target and penalty weight.

    ``unit`` divides costs before they enter the penalty (1e9 turns FLOPs into
    GFLOPs).  ``form`` picks where ``rho`` enters the square:

    * ``"squared_error"``: ``rho * ((cost - target) / unit) ** 2``
    * ``"scaled_square"``: ``(rho * (cost - target) / unit) ** 2``
    """

    metric: str
    target: float
    rho: float
    unit: Optional[float] = None
    form: str = "squared_error"

    def __post_init__(self):
        if self.metric not in ("flops", "latency"):
            raise ValueError(f"unknown metric {self.metric!r}")
        if not self.target > 0:
            raise ValueError("target must be positive")
        if not self.rho >= 0:
            raise ValueError("rho must be non-negative")
        if self.form not in PENALTY_FORMS:
            raise ValueError(f"unknown penalty form {self.form!r}")
        if self.unit is None:
            object.__setattr__(self, "unit", 1e9 if self.metric == "flops" else 1.0)
        if not self.unit > 0:
            raise ValueError("unit must be positive")


def penalty(cost: float, constraint: ConstraintSpec) -> float:
    diff = (cost - constraint.target) / constraint.unit
    if constraint.form == "scaled_square":
        return (constraint.rho * diff) ** 2
    return constraint.rho * diff**2


def penalized_error(loss: float, cost: float, constraint: ConstraintSpec) -> float:
    return loss + penalty(cost, constraint)


def rho_for_magnitude(initial_cost: float, constraint: ConstraintSpec, magnitude: float = 10.0) -> float:
    """Return the ``rho`` whose penalty at ``initial_cost`` equals ``magnitude``.

    Used to put the constraint term on the same scale as the classification
    loss at the start of a run.
    """
    diff = abs(initial_cost - constraint.target) / constraint.unit
    if diff == 0:
        raise ValueError("initial cost already equals the target")
    if constraint.form == "scaled_square":
        return math.sqrt(magnitude) / diff
    return magnitude / diff**2


# --- FLOPs -----------------------------------------------------------------


def conv_out_size(size: int, kernel: int, stride: int) -> int:
    pad = (kernel - 1) // 2
    return (size + 2 * pad - kernel) // stride + 1


def layer_shapes(config: ArchitectureConfig, space: ArchitectureSpace) -> dict[int, tuple[int, int, int, int]]:
    """Per active layer: ``(c_in, c_out, spatial_in, spatial_out)``.

    Dense layers see globally pooled features, so their spatial sizes are 1.
    """
    shapes = {}
    sources = layer_inputs(config, space)
    for i, src in sources.items():
        layer = space.layers[i]
        if src is None:
            c_in, s_in = space.input_channels, config.spatial
        else:
            c_in, s_in = config.out_channels[src], shapes[src][3]
        c_out = config.out_channels[i]
        if layer.kind == "dense":
            shapes[i] = (c_in, c_out, 1, 1)
        else:
            if layer.kind == "depthwise_conv" and c_in != c_out:
                raise ValueError(f"depthwise layer {i} needs in == out channels ({c_in} != {c_out})")
            shapes[i] = (c_in, c_out, s_in, conv_out_size(s_in, layer.kernel, layer.stride))
    return shapes


def layer_flops(kind: str, kernel: int, c_in: int, c_out: int, s_out: int) -> int:
    if kind == "conv":
        return kernel * kernel * c_in * c_out * s_out * s_out
    if kind == "depthwise_conv":
        return kernel * kernel * c_out * s_out * s_out
    if kind == "dense":
        return c_in * c_out
    raise ValueError(f"unknown layer kind {kind!r}")


def flops(config: ArchitectureConfig, space: ArchitectureSpace) -> int:
    check_config(config, space)
    total = 0
    for i, (c_in, c_out, _, s_out) in layer_shapes(config, space).items():
        layer = space.layers[i]
        total += layer_flops(layer.kind, layer.kernel, c_in, c_out, s_out)
    return total


# --- latency lookup tables -------------------------------------------------

Key = tuple[int, int, int]  # (in_channels, out_channels, spatial_in)


@dataclass
class LatencyTable:
    rows: dict[int, dict[Key, float]] = field(default_factory=dict)
    hardware: str = ""
    batch_size: int = 1

    def add(self, layer_id: int, in_channels: int, out_channels: int, spatial_in: int, latency_us: float):
        if not latency_us > 0:
            raise ValueError(f"latency must be positive, got {latency_us}")
        key = (int(in_channels), int(out_channels), int(spatial_in))
        layer = self.rows.setdefault(int(layer_id), {})
        if key in layer:
            raise ValueError(f"duplicate key {(layer_id,) + key}")
        layer[key] = float(latency_us)

    def __len__(self) -> int:
        return sum(len(r) for r in self.rows.values())

    def iter_rows(self):
        for layer_id in sorted(self.rows):
            for key in sorted(self.rows[layer_id]):
                yield (layer_id, *key, self.rows[layer_id][key])

    def axes(self, layer_id: int) -> list[list[int]]:
        keys = self.rows[layer_id].keys()
        return [sorted({k[a] for k in keys}) for a in range(3)]

    def gaps(self) -> list[tuple[int, int, int, int]]:
        """Grid cells missing from each layer's observed axis product."""
        missing = []
        for layer_id in sorted(self.rows):
            known = self.rows[layer_id]
            for key in itertools.product(*self.axes(layer_id)):
                if key not in known:
                    missing.append((layer_id, *key))
        return missing

    def lookup(self, layer_id: int, in_channels: int, out_channels: int, spatial_in: int) -> float:
        """Exact row, or multilinear interpolation between bracketing grid rows."""
        if layer_id not in self.rows:
            raise ExtrapolationError(f"layer {layer_id} has no latency rows")
        known = self.rows[layer_id]
        query = (in_channels, out_channels, spatial_in)
        if query in known:
            return known[query]
        brackets = []
        for axis, q in zip(self.axes(layer_id), query):
            if q < axis[0] or q > axis[-1]:
                raise ExtrapolationError(
                    f"layer {layer_id}: key {query} outside measured range {axis[0]}..{axis[-1]}"
                )
            hi = int(np.searchsorted(axis, q))
            if axis[hi] == q:
                brackets.append(((q, 1.0),))
            else:
                lo_v, hi_v = axis[hi - 1], axis[hi]
                t = (q - lo_v) / (hi_v - lo_v)
                brackets.append(((lo_v, 1.0 - t), (hi_v, t)))
        total = 0.0
        for corner in itertools.product(*brackets):
            key = tuple(c[0] for c in corner)
            if key not in known:
                raise ExtrapolationError(f"layer {layer_id}: corner {key} missing for query {query}")
            total += math.prod(c[1] for c in corner) * known[key]
        return total


def latency(config: ArchitectureConfig, space: ArchitectureSpace, table: LatencyTable) -> float:
    check_config(config, space)
    return sum(
        table.lookup(i, c_in, c_out, s_in)
        for i, (c_in, c_out, s_in, _) in layer_shapes(config, space).items()
    )


def cost(config: ArchitectureConfig, space: ArchitectureSpace, metric: str,
         table: Optional[LatencyTable] = None) -> float:
    if metric == "flops":
        return float(flops(config, space))
    if metric == "latency":
        if table is None:
            raise ValueError("latency metric needs a lookup table")
        return latency(config, space, table)
    raise ValueError(f"unknown metric {metric!r}")


def _line_fill(values: list[Optional[float]], coords: list[int], extrapolate: bool) -> dict[int, float]:
    """Linear fill of missing positions along one grid line."""
    known = [i for i, v in enumerate(values) if v is not None]
    if len(known) < 2:
        return {}
    filled = {}
    for i, v in enumerate(values):
        if v is not None:
            continue
        left = [k for k in known if k < i]
        right = [k for k in known if k > i]
        if left and right:
            a, b = left[-1], right[0]
        elif extrapolate:
            a, b = (left[-2], left[-1]) if len(left) >= 2 else (right[0], right[1])
        else:
            continue
        t = (coords[i] - coords[a]) / (coords[b] - coords[a])
        filled[i] = values[a] + t * (values[b] - values[a])
    return filled


def fill_missing(table: LatencyTable) -> LatencyTable:
    """Complete each layer's grid by axis-wise linear interpolation.

    Bracketed cells are filled first; cells on the edge of every line through
    them are then filled from the two nearest measured cells on one line.
    Affine latency models are reproduced exactly.  Existing rows are kept.
    """
    out = LatencyTable(hardware=table.hardware, batch_size=table.batch_size)
    for layer_id in sorted(table.rows):
        axes = table.axes(layer_id)
        grid: dict[Key, float] = dict(table.rows[layer_id])
        cells = list(itertools.product(*axes))
        while len(grid) < len(cells):
            new = _fill_pass(grid, axes, False) or _fill_pass(grid, axes, True)
            if not new:
                missing = next(c for c in cells if c not in grid)
                raise ValueError(
                    f"layer {layer_id}: cannot fill {missing}, fewer than 2 rows on every axis through it"
                )
            grid.update(new)
        for key in cells:
            out.add(layer_id, *key, grid[key])
    return out


def _fill_pass(grid: dict[Key, float], axes: list[list[int]], extrapolate: bool) -> dict[Key, float]:
    new: dict[Key, float] = {}
    for axis in range(3):
        others = [axes[a] for a in range(3) if a != axis]
        for fixed in itertools.product(*others):
            keys = []
            for v in axes[axis]:
                k = list(fixed)
                k.insert(axis, v)
                keys.append(tuple(k))
            values = [grid.get(k) for k in keys]
            if all(v is not None for v in values):
                continue
            for i, v in _line_fill(values, axes[axis], extrapolate).items():
                new.setdefault(keys[i], v)
        if new:
            return new
    return new


def read_lut(source: Union[str, io.TextIOBase]) -> LatencyTable:
    """Parse a latency CSV.  Errors carry the 1-based line number."""
    if isinstance(source, str):
        with open(source, newline="", encoding="utf-8") as fh:
            return read_lut(fh)
    reader = csv.reader(source)
    try:
        header = next(reader)
    except StopIteration:
        raise LutFormatError("empty file", 1) from None
    if tuple(h.strip() for h in header) != LUT_HEADER:
        raise LutFormatError(f"expected header {','.join(LUT_HEADER)}", 1)
    table = LatencyTable()
    for row in reader:
        line = reader.line_num
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(LUT_HEADER):
            raise LutFormatError(f"expected {len(LUT_HEADER)} fields, got {len(row)}", line)
        try:
            ints = [int(c) for c in row[:4]]
            lat = float(row[4])
        except ValueError as exc:
            raise LutFormatError(str(exc), line) from None
        try:
            table.add(*ints, lat)
        except ValueError as exc:
            raise LutFormatError(str(exc), line) from None
    return table


def write_lut(table: LatencyTable, path_or_fh) -> None:
    if isinstance(path_or_fh, str):
        with open(path_or_fh, "w", newline="", encoding="utf-8") as fh:
            return write_lut(table, fh)
    writer = csv.writer(path_or_fh, lineterminator="\n")
    writer.writerow(LUT_HEADER)
    for layer_id, c_in, c_out, s_in, lat in table.iter_rows():
        writer.writerow([layer_id, c_in, c_out, s_in, repr(lat)])


def lut_rows_for(rows: Iterable[tuple]) -> LatencyTable:
    table = LatencyTable()
    for r in rows:
        table.add(*r)
    return table
