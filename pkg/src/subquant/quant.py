"""Symmetric uniform quantization and the grouped sub-matrix forward pass.

A weight matrix [OC, J] is tiled into contiguous groups of at most
rows_per_group x cols_per_group entries; every group carries its own scale.
One scale covers all inputs of a layer.
"""

import math
from dataclasses import dataclass

import numpy as np

from .tensor import apply_activation

GRANULARITY_MODES = ("layerwise", "channelwise", "method1", "method2")

# Integer products are accumulated in float64, which is exact as long as
# every partial sum stays below 2**53.
_EXACT_ACC_LIMIT = 2 ** 53


@dataclass(frozen=True)
class QuantSpec:
    """Bit width and scale of one symmetric uniform quantizer."""

    bits: int
    scale: float

    def __post_init__(self):
        if not 2 <= self.bits <= 16:
            raise ValueError(f"bits must be in [2, 16], got {self.bits}")
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")

    @property
    def qmin(self):
        return -(2 ** (self.bits - 1))

    @property
    def qmax(self):
        return 2 ** (self.bits - 1) - 1


def quantize_values(x, scale, bits):
    """Map reals to integer codes: clamp(round(x / scale)).

    Rounds halves away from zero. Returns float64 values that are exact
    integers, so BLAS matmuls on them behave as integer arithmetic.
    """
    y = np.asarray(x, dtype=np.float64) / scale
    q = np.copysign(np.floor(np.abs(y) + 0.5), y)
    return np.clip(q, -(2 ** (bits - 1)), 2 ** (bits - 1) - 1)


def quantize(x, spec):
    """Integer code(s) for x under spec; scalar in, int out."""
    q = quantize_values(x, spec.scale, spec.bits)
    if np.isscalar(x) or np.ndim(x) == 0:
        return int(q)
    return q.astype(np.int64)


def dequantize(q, spec):
    """Approximate the original value by rescaling the code."""
    if np.isscalar(q) or np.ndim(q) == 0:
        return float(spec.scale * q)
    return spec.scale * np.asarray(q, dtype=np.float64)


def init_scale(values, bits):
    """Initial scale covering the largest magnitude; 1.0 for all-zero groups."""
    m = float(np.max(np.abs(values))) if np.size(values) else 0.0
    if m == 0.0:
        return 1.0
    return m / float(2 ** (bits - 1))


@dataclass(frozen=True)
class GranularityConfig:
    """How weights share scales: whole layer, per channel, or tile grids.

    method1 fixes the tile shape (rows_per_group x cols_per_group) for every
    layer; method2 fixes the horizontal group count and derives a per-layer
    column width ceil(J / h_groups).
    """

    mode: str
    rows_per_group: int = 1
    cols_per_group: int | None = None
    h_groups: int | None = None

    def __post_init__(self):
        if self.mode not in GRANULARITY_MODES:
            raise ValueError(f"unknown granularity mode {self.mode!r}")
        if self.mode == "method1":
            if not self.rows_per_group or self.rows_per_group < 1:
                raise ValueError("method1 requires rows_per_group >= 1")
            if not self.cols_per_group or self.cols_per_group < 1:
                raise ValueError("method1 requires cols_per_group >= 1")
        if self.mode == "method2":
            if not self.rows_per_group or self.rows_per_group < 1:
                raise ValueError("method2 requires rows_per_group >= 1")
            if not self.h_groups or self.h_groups < 1:
                raise ValueError("method2 requires h_groups >= 1")

    def describe(self):
        if self.mode == "method1":
            return f"method1(rows={self.rows_per_group}, cols={self.cols_per_group})"
        if self.mode == "method2":
            return f"method2(rows={self.rows_per_group}, h={self.h_groups})"
        return self.mode


@dataclass(frozen=True)
class SubMatrixPartition:
    """Contiguous tiling of an [OC, J] matrix into scale groups."""

    out_channels: int
    weights_per_channel: int
    rows_per_group: int
    cols_per_group: int
    row_ranges: tuple
    col_ranges: tuple

    @property
    def v_groups(self):
        return len(self.row_ranges)

    @property
    def h_groups(self):
        return len(self.col_ranges)


def _ranges(total, group):
    return tuple((s, min(s + group, total)) for s in range(0, total, group))


def make_partition(out_channels, weights_per_channel, config):
    """Tile an [OC, J] matrix per the granularity config.

    Group sizes larger than the axis are clamped to a single group on that
    axis; a non-dividing group size leaves a smaller trailing group.
    """
    oc, j = int(out_channels), int(weights_per_channel)
    if oc < 1 or j < 1:
        raise ValueError(f"matrix dims must be positive, got {oc}x{j}")
    if config.mode == "layerwise":
        rows, cols = oc, j
    elif config.mode == "channelwise":
        rows, cols = 1, j
    elif config.mode == "method1":
        rows, cols = config.rows_per_group, config.cols_per_group
    else:  # method2
        rows, cols = config.rows_per_group, math.ceil(j / config.h_groups)
    rows = min(rows, oc)
    cols = min(cols, j)
    return SubMatrixPartition(
        out_channels=oc,
        weights_per_channel=j,
        rows_per_group=rows,
        cols_per_group=cols,
        row_ranges=_ranges(oc, rows),
        col_ranges=_ranges(j, cols),
    )


@dataclass
class ScaleSet:
    """Calibrated scales of one layer: a v_groups x h_groups weight-scale grid
    plus the single input scale."""

    weight_scales: np.ndarray
    input_scale: float
    weight_bits: int = 4
    act_bits: int = 8

    def __post_init__(self):
        self.weight_scales = np.asarray(self.weight_scales, dtype=np.float64)
        if np.any(self.weight_scales <= 0) or not self.input_scale > 0:
            raise ValueError("all scales must be strictly positive")


@dataclass
class OpCounters:
    """Operation counters threaded through the quantized forward pass."""

    rescale_macs: int = 0


def combine_tiles(tiles, group_scales, input_scale):
    """Rescale and sum per-group integer tiles for one row group.

    Accumulates in ascending h order; the calibration search reuses this
    helper so cached evaluations match a fresh forward bit for bit.
    """
    acc = (float(group_scales[0]) * input_scale) * tiles[0]
    for h in range(1, len(tiles)):
        acc = acc + (float(group_scales[h]) * input_scale) * tiles[h]
    return acc


def finish_rows(acc, bias_rows, activation, slope):
    """Bias add and activation for one row block; float32 like stored tensors."""
    if bias_rows is not None:
        acc = acc + np.asarray(bias_rows, dtype=np.float64)[:, None]
    return apply_activation(acc, activation, slope).astype(np.float32)


def _check_exact_accumulation(partition, weight_bits, act_bits):
    width = max(c1 - c0 for c0, c1 in partition.col_ranges)
    worst = width * (2 ** (weight_bits - 1)) * (2 ** (act_bits - 1))
    if worst > _EXACT_ACC_LIMIT:
        raise ValueError(
            f"integer accumulation would exceed the exact float64 range "
            f"(group width {width}, bits {weight_bits}/{act_bits})"
        )


def quantized_forward_layer(weights, cols, partition, scales, bias=None,
                            activation="identity", slope=0.01, counters=None):
    """Grouped integer conv: per group (v, h), quantize, multiply-accumulate
    integer codes, rescale by the group scale times the input scale, and sum
    over h; bias and activation are applied on the rescaled result.
    """
    weights = np.asarray(weights)
    cols = np.asarray(cols)
    oc, j = weights.shape
    if oc != partition.out_channels or j != partition.weights_per_channel:
        raise ValueError(f"weights {weights.shape} do not match partition "
                         f"{partition.out_channels}x{partition.weights_per_channel}")
    if cols.shape[0] != j:
        raise ValueError(f"input rows {cols.shape[0]} != weights per channel {j}")
    if scales.weight_scales.shape != (partition.v_groups, partition.h_groups):
        raise ValueError(f"scale grid {scales.weight_scales.shape} does not match "
                         f"partition {partition.v_groups}x{partition.h_groups}")
    _check_exact_accumulation(partition, scales.weight_bits, scales.act_bits)

    q_cols = quantize_values(cols, scales.input_scale, scales.act_bits)
    p = cols.shape[1]
    out = np.empty((oc, p), dtype=np.float32)
    for v, (r0, r1) in enumerate(partition.row_ranges):
        tiles = []
        for h, (c0, c1) in enumerate(partition.col_ranges):
            qw = quantize_values(weights[r0:r1, c0:c1], scales.weight_scales[v, h],
                                 scales.weight_bits)
            tiles.append(qw @ q_cols[c0:c1])
            if counters is not None:
                counters.rescale_macs += (r1 - r0) * p
        acc = combine_tiles(tiles, scales.weight_scales[v], scales.input_scale)
        out[r0:r1] = finish_rows(acc, None if bias is None else bias[r0:r1],
                                 activation, slope)
    return out
