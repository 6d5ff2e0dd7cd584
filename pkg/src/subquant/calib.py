"""Layer-by-layer post-training calibration of quantization scales.

Per quantized layer the pipeline runs four steps: (1) enumerative search of
the input scale with float weights, (2) iterative greedy grid search of the
per-group weight scales with the input scale fixed, (3) a second input-scale
search with the weight scales fixed, (4) the final quantized forward whose
output propagates to downstream layers. Targets are always the float
reference activations, while layer inputs come from the already-quantized
prefix of the network, so quantization error accumulates forward.
"""

from dataclasses import dataclass, field

import numpy as np

from .model import (
    QuantizedLayerInfo,
    forward_float,
    lower_layer_input,
    raise_layer_output,
    reference_target,
    run_simple_layer,
)
from .quant import (
    GranularityConfig,
    ScaleSet,
    combine_tiles,
    finish_rows,
    init_scale,
    make_partition,
    quantize_values,
    quantized_forward_layer,
)
from .tensor import conv_reference

DISTANCE_METRICS = ("euclidean", "cosine")


@dataclass(frozen=True)
class CalibConfig:
    """Search hyperparameters; defaults follow the standard recipe."""

    alpha: float = 0.5
    beta: float = 1.5
    grid_size: int = 100
    iterations: int = 2
    metric: str = "euclidean"
    samples: int = 128
    seed: int = 0
    weight_bits: int = 4
    act_bits: int = 8

    def __post_init__(self):
        if not 0 < self.alpha <= 1 <= self.beta:
            raise ValueError(f"need 0 < alpha <= 1 <= beta, got ({self.alpha}, {self.beta})")
        if self.grid_size < 2:
            raise ValueError("grid_size must be >= 2")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.metric not in DISTANCE_METRICS:
            raise ValueError(f"unknown metric {self.metric!r}")
        if self.samples < 1:
            raise ValueError("samples must be >= 1")


def scale_space(alpha, beta, center, n):
    """n candidates evenly spaced over [alpha*center, beta*center].

    A singleton space (n=1) degenerates to the center itself.
    """
    if center <= 0:
        raise ValueError(f"center scale must be positive, got {center}")
    if n == 1:
        return np.array([center], dtype=np.float64)
    return np.linspace(alpha * center, beta * center, n, dtype=np.float64)


def distance(a, b, metric="euclidean"):
    """Quantization error between tensors of identical shape."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    x = a.reshape(-1).astype(np.float64)
    y = b.reshape(-1).astype(np.float64)
    if metric == "euclidean":
        return float(np.sqrt(np.sum((x - y) ** 2)))
    if metric == "cosine":
        nx, ny = np.linalg.norm(x), np.linalg.norm(y)
        if nx == 0.0 and ny == 0.0:
            return 0.0
        if nx == 0.0 or ny == 0.0:
            return 1.0
        return float(1.0 - np.dot(x, y) / (nx * ny))
    raise ValueError(f"unknown metric {metric!r}")


def subsample(samples, count, seed):
    """Deterministically pick `count` samples (original order preserved)."""
    n = samples.shape[0]
    if n <= count:
        return samples
    idx = np.sort(np.random.default_rng(seed).permutation(n)[:count])
    return samples[idx]


def search_input_scale(weights, cols, target, cfg, partition=None, weight_scales=None,
                       center=None, incumbent=None, bias=None,
                       activation="identity", slope=0.01):
    """Enumerate input-scale candidates and keep the one closest to target.

    With `weight_scales` given, candidates are evaluated through the grouped
    integer path; otherwise weights stay in float. The grid center is always
    part of the comparison set, like the evaluated incumbent of the weight
    search, so a scale that is already exact is never displaced. Ties go to
    the smaller scale; `incumbent` additionally joins the set (used by the
    re-search step).
    """
    if cols.shape[1] == 0:
        raise ValueError("empty calibration set")
    if center is None:
        center = init_scale(cols, cfg.act_bits)
    candidates = scale_space(cfg.alpha, cfg.beta, center, cfg.grid_size)
    candidates = np.append(candidates, center)
    if incumbent is not None:
        candidates = np.append(candidates, incumbent)
    candidates = np.unique(candidates)  # ascending; strict < keeps the smallest tie
    best_scale, best_d = None, np.inf
    for cand in candidates:
        cand = float(cand)
        if weight_scales is None:
            deq = cand * quantize_values(cols, cand, cfg.act_bits)
            out = conv_reference(weights, deq, activation, bias, slope)
        else:
            scales = ScaleSet(weight_scales, cand, cfg.weight_bits, cfg.act_bits)
            out = quantized_forward_layer(weights, cols, partition, scales, bias,
                                          activation, slope)
        d = distance(out, target, cfg.metric)
        if d < best_d:
            best_scale, best_d = cand, d
    return best_scale, best_d


def search_weight_scales(weights, cols, partition, input_scale, target, cfg,
                         bias=None, activation="identity", slope=0.01):
    """Greedy iterative grid search of the per-group weight scales.

    Every group scale starts at its covering initialization. Sweeps visit
    groups in row-major (v, h) order; for each group a candidate grid is
    generated from the scale held at group entry and a candidate is committed
    only on strict improvement of the full-layer output distance, all other
    scales fixed. Per-group integer tiles are cached so a candidate evaluation
    recomputes only the affected row block, reproducing a fresh forward bit
    for bit. Returns the scale grid and the distance trace (initial value
    plus one entry per sweep).
    """
    oc, p = weights.shape[0], cols.shape[1]
    q_cols = quantize_values(cols, input_scale, cfg.act_bits)
    col_blocks = [q_cols[c0:c1] for c0, c1 in partition.col_ranges]
    v_groups, h_groups = partition.v_groups, partition.h_groups

    w_groups = [[weights[r0:r1, c0:c1] for c0, c1 in partition.col_ranges]
                for r0, r1 in partition.row_ranges]
    scales = np.empty((v_groups, h_groups), dtype=np.float64)
    skip = np.zeros((v_groups, h_groups), dtype=bool)
    tiles = [[None] * h_groups for _ in range(v_groups)]
    for v in range(v_groups):
        for h in range(h_groups):
            group = w_groups[v][h]
            scales[v, h] = init_scale(group, cfg.weight_bits)
            skip[v, h] = not np.any(group)  # all-zero group: any scale is exact
            tiles[v][h] = quantize_values(group, scales[v, h], cfg.weight_bits) @ col_blocks[h]

    out = np.empty((oc, p), dtype=np.float32)
    bias_rows = [None] * v_groups if bias is None else \
        [bias[r0:r1] for r0, r1 in partition.row_ranges]
    for v, (r0, r1) in enumerate(partition.row_ranges):
        out[r0:r1] = finish_rows(combine_tiles(tiles[v], scales[v], input_scale),
                                 bias_rows[v], activation, slope)

    trace = [distance(out, target, cfg.metric)]
    for _ in range(cfg.iterations):
        for v, (r0, r1) in enumerate(partition.row_ranges):
            for h in range(h_groups):
                if skip[v, h]:
                    continue
                d_best = distance(out, target, cfg.metric)
                entry_scale = scales[v, h]
                incumbent_rows = out[r0:r1].copy()
                incumbent_tile = tiles[v][h]
                best = (entry_scale, incumbent_tile, incumbent_rows)
                row_scales = scales[v].copy()
                for cand in scale_space(cfg.alpha, cfg.beta, entry_scale, cfg.grid_size):
                    cand = float(cand)
                    tile = quantize_values(w_groups[v][h], cand, cfg.weight_bits) \
                        @ col_blocks[h]
                    tiles[v][h] = tile
                    row_scales[h] = cand
                    block = finish_rows(combine_tiles(tiles[v], row_scales, input_scale),
                                        bias_rows[v], activation, slope)
                    out[r0:r1] = block
                    d = distance(out, target, cfg.metric)
                    if d < d_best:
                        d_best = d
                        best = (cand, tile, block)
                scales[v, h], tiles[v][h], out[r0:r1] = best
        trace.append(distance(out, target, cfg.metric))
    return scales, trace


@dataclass
class LayerCalibration:
    """Result of the four-step procedure for one layer."""

    scales: ScaleSet
    partition: object
    output: np.ndarray
    distance: float
    step_distances: dict


def calibrate_layer(weights, cols, target, granularity, cfg, bias=None,
                    activation="identity", slope=0.01):
    """Run the four calibration steps on one lowered layer."""
    oc, j = weights.shape
    partition = make_partition(oc, j, granularity)
    input_scale, d1 = search_input_scale(weights, cols, target, cfg, bias=bias,
                                         activation=activation, slope=slope)
    weight_scales, trace = search_weight_scales(weights, cols, partition, input_scale,
                                                target, cfg, bias, activation, slope)
    input_scale, d3 = search_input_scale(weights, cols, target, cfg,
                                         partition=partition, weight_scales=weight_scales,
                                         center=input_scale, incumbent=input_scale,
                                         bias=bias, activation=activation, slope=slope)
    scales = ScaleSet(weight_scales, input_scale, cfg.weight_bits, cfg.act_bits)
    output = quantized_forward_layer(weights, cols, partition, scales, bias,
                                     activation, slope)
    d4 = distance(output, target, cfg.metric)
    steps = {"input_search": d1, "weight_search": trace[-1],
             "input_research": d3, "final": d4, "weight_trace": trace}
    return LayerCalibration(scales=scales, partition=partition, output=output,
                            distance=d4, step_distances=steps)


@dataclass
class NetworkCalibration:
    """Scales and distances from calibrating a whole graph."""

    scales: dict
    layer_distances: dict
    network_distance: float
    step_distances: dict = field(default_factory=dict)

    def mean_quantized_distance(self):
        keys = list(self.scales)
        return float(np.mean([self.layer_distances[k] for k in keys])) if keys else 0.0


def calibrate_network(graph, samples, granularity, cfg, references=None):
    """Calibrate every quantizable layer in topological order.

    `references` may carry a precollected float forward map so that sweeps
    across granularities reuse one reference run.
    """
    samples = subsample(np.asarray(samples, dtype=np.float32), cfg.samples, cfg.seed)
    refs = forward_float(graph, samples) if references is None else references
    current = {}
    scales = {}
    layer_distances = {}
    step_distances = {}
    for layer in graph.layers:
        if layer.kind == "input":
            current[layer.id] = samples
        elif layer.kind in ("conv", "linear"):
            if layer.weight is None:
                raise ValueError(f"layer {layer.id} has no weights loaded")
            cols, meta = lower_layer_input(layer, current[layer.predecessors[0]])
            if layer.quantize:
                target = reference_target(layer, refs[layer.id])
                cal = calibrate_layer(layer.weight_matrix(), cols, target, granularity,
                                      cfg, layer.bias, layer.activation, layer.slope)
                current[layer.id] = raise_layer_output(layer, cal.output, meta)
                scales[layer.id] = QuantizedLayerInfo(
                    cal.scales, cal.partition.rows_per_group, cal.partition.cols_per_group)
                step_distances[layer.id] = cal.step_distances
            else:
                out = conv_reference(layer.weight_matrix(), cols, layer.activation,
                                     layer.bias, layer.slope)
                current[layer.id] = raise_layer_output(layer, out, meta)
        else:
            current[layer.id] = run_simple_layer(layer, current)
        layer_distances[layer.id] = distance(current[layer.id], refs[layer.id], cfg.metric)
    return NetworkCalibration(scales=scales, layer_distances=layer_distances,
                              network_distance=layer_distances[graph.output_id],
                              step_distances=step_distances)
