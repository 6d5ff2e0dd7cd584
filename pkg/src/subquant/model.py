"""Network graph, bundle file I/O, batch-norm folding, and forward passes.

A model bundle is a directory holding `manifest.json` plus `tensors.bin`
(concatenated little-endian float32 blobs, row-major, offsets as declared).
Calibration sets are single files: magic `PTQC`, u32 sample count, u32 rank,
u32 per-sample dims, then the float32 samples.
"""

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import BadInputError
from .quant import ScaleSet, quantized_forward_layer, make_partition, GranularityConfig
from .tensor import apply_activation, conv_output_hw, conv_reference, im2col

BUNDLE_VERSION = 1
MANIFEST_NAME = "manifest.json"
BLOB_NAME = "tensors.bin"
CALIB_MAGIC = b"PTQC"

LAYER_KINDS = ("input", "output", "conv", "linear", "batchnorm",
               "relu", "leaky-relu", "residual-add")


@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = 1e-5


@dataclass
class Layer:
    """One graph node. Conv weights are [OC, IC, K, K]; linear weights [OC, F]."""

    id: str
    kind: str
    predecessors: list = field(default_factory=list)
    out_channels: int | None = None
    in_channels: int | None = None
    kernel: int | None = None
    stride: int = 1
    padding: int = 0
    activation: str = "identity"
    slope: float = 0.01
    quantize: bool = False
    weight: np.ndarray | None = None
    bias: np.ndarray | None = None
    bn: BatchNormParams | None = None

    @property
    def weights_per_channel(self):
        if self.kind == "conv":
            return self.kernel * self.kernel * self.in_channels
        if self.kind == "linear":
            return self.in_channels
        raise ValueError(f"layer {self.id} has no weight matrix")

    def weight_matrix(self):
        """Lowered [OC, J] view of the weights (channel-major column blocks)."""
        return self.weight.reshape(self.out_channels, self.weights_per_channel)


@dataclass
class Segment:
    """Consecutive conv layers of one residual block, the reordering unit."""

    id: str
    layer_ids: list


@dataclass
class QuantizedLayerInfo:
    """Calibrated scales plus the tile geometry they were searched under."""

    scales: ScaleSet
    rows_per_group: int
    cols_per_group: int

    def partition(self, layer):
        cfg = GranularityConfig("method1", self.rows_per_group, self.cols_per_group)
        return make_partition(layer.out_channels, layer.weights_per_channel, cfg)


@dataclass
class ModelGraph:
    layers: list
    segments: list = field(default_factory=list)
    input_shape: list = field(default_factory=list)
    scales: dict = field(default_factory=dict)
    reorderings: list = field(default_factory=list)

    def layer(self, layer_id):
        for layer in self.layers:
            if layer.id == layer_id:
                return layer
        raise KeyError(layer_id)

    @property
    def output_id(self):
        for layer in self.layers:
            if layer.kind == "output":
                return layer.id
        raise ValueError("graph has no output node")

    def conv_like(self):
        return [l for l in self.layers if l.kind in ("conv", "linear")]

    def validate(self):
        seen = set()
        ids = {l.id for l in self.layers}
        if len(ids) != len(self.layers):
            raise BadInputError("duplicate layer ids in graph")
        for layer in self.layers:
            if layer.kind not in LAYER_KINDS:
                raise BadInputError(f"layer {layer.id}: unknown kind {layer.kind!r}")
            for pred in layer.predecessors:
                if pred not in seen:
                    raise BadInputError(
                        f"layer {layer.id}: predecessor {pred!r} not defined earlier "
                        f"(graph must be topologically ordered)")
            if layer.kind == "residual-add" and len(layer.predecessors) != 2:
                raise BadInputError(f"layer {layer.id}: residual-add needs 2 predecessors")
            if layer.kind in ("conv", "linear") and layer.weight is not None:
                expect = layer.out_channels * layer.weights_per_channel
                if layer.weight.size != expect:
                    raise BadInputError(
                        f"layer {layer.id}: weight blob has {layer.weight.size} "
                        f"elements, expected {expect}")
            seen.add(layer.id)
        for seg in self.segments:
            for lid in seg.layer_ids:
                if lid not in ids:
                    raise BadInputError(f"segment {seg.id}: unknown layer {lid!r}")
        return self


# ---------------------------------------------------------------------------
# bundle serialization

def _require_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise BadInputError(f"{what} contains non-finite values")


class _BlobWriter:
    def __init__(self):
        self.chunks = []
        self.offset = 0

    def add(self, arr):
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        ref = {"file": BLOB_NAME, "offset": self.offset, "count": int(arr.size)}
        self.chunks.append(data)
        self.offset += len(data)
        return ref


def _scale_entry(info):
    return {
        "weight_scales": [[float(s) for s in row] for row in info.scales.weight_scales],
        "input_scale": float(info.scales.input_scale),
        "weight_bits": info.scales.weight_bits,
        "act_bits": info.scales.act_bits,
        "rows_per_group": info.rows_per_group,
        "cols_per_group": info.cols_per_group,
    }


def save_bundle(graph, path):
    """Write manifest.json plus tensors.bin; layer order defines blob order."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    blobs = _BlobWriter()
    layers = []
    for layer in graph.layers:
        entry = {"id": layer.id, "kind": layer.kind, "predecessors": list(layer.predecessors)}
        if layer.kind in ("conv", "linear"):
            entry["out_channels"] = layer.out_channels
            entry["in_channels"] = layer.in_channels
            if layer.kind == "conv":
                entry["kernel"] = layer.kernel
                entry["stride"] = layer.stride
                entry["padding"] = layer.padding
            entry["activation"] = layer.activation
            if layer.activation == "leaky_relu":
                entry["slope"] = layer.slope
            entry["quantize"] = bool(layer.quantize)
            if layer.weight is not None:
                entry["weight"] = blobs.add(layer.weight)
            if layer.bias is not None:
                entry["bias"] = blobs.add(layer.bias)
        elif layer.kind == "batchnorm":
            bn = layer.bn
            entry["channels"] = int(bn.gamma.size)
            entry["epsilon"] = bn.epsilon
            entry["gamma"] = blobs.add(bn.gamma)
            entry["beta"] = blobs.add(bn.beta)
            entry["mean"] = blobs.add(bn.running_mean)
            entry["var"] = blobs.add(bn.running_var)
        elif layer.kind == "leaky-relu":
            entry["slope"] = layer.slope
        layers.append(entry)
    manifest = {
        "version": BUNDLE_VERSION,
        "input_shape": list(graph.input_shape),
        "layers": layers,
        "segments": [{"id": s.id, "layers": list(s.layer_ids)} for s in graph.segments],
    }
    if graph.scales:
        manifest["scales"] = {lid: _scale_entry(info) for lid, info in graph.scales.items()}
    if graph.reorderings:
        manifest["reorderings"] = graph.reorderings
    tmp_bin = path / (BLOB_NAME + ".tmp")
    tmp_bin.write_bytes(b"".join(blobs.chunks))
    tmp_bin.replace(path / BLOB_NAME)
    tmp_manifest = path / (MANIFEST_NAME + ".tmp")
    tmp_manifest.write_text(json.dumps(manifest, indent=2) + "\n")
    tmp_manifest.replace(path / MANIFEST_NAME)
    return path


def _read_blob(ref, data, layer_id, what):
    try:
        offset, count = int(ref["offset"]), int(ref["count"])
    except (KeyError, TypeError, ValueError) as exc:
        raise BadInputError(f"layer {layer_id}: malformed {what} blob reference") from exc
    end = offset + 4 * count
    if offset < 0 or end > len(data):
        raise BadInputError(
            f"layer {layer_id}: {what} blob [{offset}, {end}) outside tensor file "
            f"of {len(data)} bytes")
    arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset).copy()
    _require_finite(arr, f"layer {layer_id}: {what} blob")
    return arr


def load_bundle(path):
    """Load a bundle directory back into a ModelGraph."""
    path = Path(path)
    manifest_path = path / MANIFEST_NAME
    if not manifest_path.is_file():
        raise BadInputError(f"no {MANIFEST_NAME} in bundle {path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise BadInputError(f"malformed manifest in {path}: {exc}") from exc
    blob_path = path / BLOB_NAME
    data = blob_path.read_bytes() if blob_path.is_file() else b""

    layers = []
    implicit_quantize = []
    for entry in manifest.get("layers", []):
        try:
            lid, kind = entry["id"], entry["kind"]
        except KeyError as exc:
            raise BadInputError(f"manifest layer entry missing {exc}") from exc
        layer = Layer(id=lid, kind=kind, predecessors=list(entry.get("predecessors", [])))
        if kind in ("conv", "linear"):
            layer.out_channels = int(entry["out_channels"])
            layer.in_channels = int(entry["in_channels"])
            if kind == "conv":
                layer.kernel = int(entry["kernel"])
                layer.stride = int(entry.get("stride", 1))
                layer.padding = int(entry.get("padding", 0))
            layer.activation = entry.get("activation", "identity")
            layer.slope = float(entry.get("slope", 0.01))
            if "quantize" in entry:
                layer.quantize = bool(entry["quantize"])
            else:
                layer.quantize = True
                implicit_quantize.append(layer)
            if "weight" in entry:
                flat = _read_blob(entry["weight"], data, lid, "weight")
                expect = layer.out_channels * layer.weights_per_channel
                if flat.size != expect:
                    raise BadInputError(
                        f"layer {lid}: weight blob has {flat.size} elements, "
                        f"expected {expect}")
                if kind == "conv":
                    layer.weight = flat.reshape(layer.out_channels, layer.in_channels,
                                                layer.kernel, layer.kernel)
                else:
                    layer.weight = flat.reshape(layer.out_channels, layer.in_channels)
            if "bias" in entry:
                bias = _read_blob(entry["bias"], data, lid, "bias")
                if bias.size != layer.out_channels:
                    raise BadInputError(
                        f"layer {lid}: bias blob has {bias.size} elements, "
                        f"expected {layer.out_channels}")
                layer.bias = bias
        elif kind == "batchnorm":
            channels = int(entry["channels"])
            parts = {}
            for what in ("gamma", "beta", "mean", "var"):
                arr = _read_blob(entry[what], data, lid, what)
                if arr.size != channels:
                    raise BadInputError(f"layer {lid}: {what} blob size {arr.size} != "
                                        f"declared channels {channels}")
                parts[what] = arr
            layer.bn = BatchNormParams(parts["gamma"], parts["beta"], parts["mean"],
                                       parts["var"], float(entry.get("epsilon", 1e-5)))
        elif kind == "leaky-relu":
            layer.slope = float(entry.get("slope", 0.01))
        layers.append(layer)

    # unless the manifest says otherwise, the first and last weighted layers
    # stay unquantized
    weighted = [l for l in layers if l.kind in ("conv", "linear")]
    if weighted and implicit_quantize:
        for boundary in (weighted[0], weighted[-1]):
            if boundary in implicit_quantize:
                boundary.quantize = False

    segments = [Segment(s["id"], list(s["layers"])) for s in manifest.get("segments", [])]
    graph = ModelGraph(layers=layers, segments=segments,
                       input_shape=list(manifest.get("input_shape", [])),
                       reorderings=list(manifest.get("reorderings", [])))
    for lid, entry in manifest.get("scales", {}).items():
        scales = ScaleSet(np.array(entry["weight_scales"], dtype=np.float64),
                          float(entry["input_scale"]),
                          int(entry["weight_bits"]), int(entry["act_bits"]))
        graph.scales[lid] = QuantizedLayerInfo(scales, int(entry["rows_per_group"]),
                                               int(entry["cols_per_group"]))
    return graph.validate()


def save_calibration_set(path, samples):
    """Write samples [N, dims...] as a PTQC file."""
    samples = np.asarray(samples, dtype="<f4")
    dims = samples.shape[1:]
    header = CALIB_MAGIC + struct.pack(f"<II{len(dims)}I", samples.shape[0],
                                       len(dims), *dims)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(header + np.ascontiguousarray(samples).tobytes())
    tmp.replace(path)
    return path


def load_calibration_set(path):
    path = Path(path)
    if not path.is_file():
        raise BadInputError(f"calibration set not found: {path}")
    data = path.read_bytes()
    if data[:4] != CALIB_MAGIC:
        raise BadInputError(f"{path} is not a calibration set (bad magic)")
    count, rank = struct.unpack_from("<II", data, 4)
    dims = struct.unpack_from(f"<{rank}I", data, 12)
    body = data[12 + 4 * rank:]
    expect = count * int(np.prod(dims)) if rank else count
    arr = np.frombuffer(body, dtype="<f4")
    if arr.size != expect:
        raise BadInputError(f"{path}: payload holds {arr.size} floats, header "
                            f"declares {expect}")
    arr = arr.reshape((count, *dims)).copy()
    _require_finite(arr, f"calibration set {path}")
    return arr


# ---------------------------------------------------------------------------
# graph transforms

def fold_batchnorm(conv, bn):
    """Fold BN statistics into the preceding conv's weights and bias."""
    if bn.gamma.size != conv.out_channels:
        raise ValueError(f"BN channels {bn.gamma.size} != conv {conv.id} "
                         f"out_channels {conv.out_channels}")
    if conv.activation != "identity":
        raise ValueError(f"cannot fold BN through activation on {conv.id}")
    factor = (bn.gamma / np.sqrt(bn.running_var + bn.epsilon)).astype(np.float64)
    weight = (conv.weight.astype(np.float64)
              * factor.reshape((-1,) + (1,) * (conv.weight.ndim - 1)))
    bias = conv.bias.astype(np.float64) if conv.bias is not None \
        else np.zeros(conv.out_channels)
    bias = (bias - bn.running_mean) * factor + bn.beta
    return replace(conv, weight=weight.astype(np.float32), bias=bias.astype(np.float32))


def _successors(graph):
    succ = {l.id: [] for l in graph.layers}
    for layer in graph.layers:
        for pred in layer.predecessors:
            succ[pred].append(layer.id)
    return succ


def fold_all_batchnorms(graph):
    """Remove every BN node whose sole predecessor is a conv feeding only it."""
    succ = _successors(graph)
    folded = {}
    drop = set()
    for layer in graph.layers:
        if layer.kind != "batchnorm":
            continue
        if len(layer.predecessors) != 1:
            raise ValueError(f"batchnorm {layer.id} must have one predecessor")
        conv = graph.layer(layer.predecessors[0])
        if conv.kind != "conv" or succ[conv.id] != [layer.id]:
            raise ValueError(f"cannot fold batchnorm {layer.id}: predecessor is not "
                             f"an exclusively-consumed conv")
        folded[conv.id] = fold_batchnorm(conv, layer.bn)
        drop.add(layer.id)
    if not drop:
        return graph
    remap = {bn_id: graph.layer(bn_id).predecessors[0] for bn_id in drop}
    layers = []
    for layer in graph.layers:
        if layer.id in drop:
            continue
        layer = folded.get(layer.id, layer)
        preds = [remap.get(p, p) for p in layer.predecessors]
        layers.append(replace(layer, predecessors=preds))
    return ModelGraph(layers, graph.segments, graph.input_shape,
                      dict(graph.scales), list(graph.reorderings))


def fuse_activations(graph):
    """Absorb a relu/leaky-relu node into a conv/linear that only feeds it."""
    succ = _successors(graph)
    drop = {}
    updated = {}
    for layer in graph.layers:
        if layer.kind not in ("relu", "leaky-relu") or len(layer.predecessors) != 1:
            continue
        prev = graph.layer(layer.predecessors[0])
        if prev.kind not in ("conv", "linear") or prev.activation != "identity":
            continue
        if succ[prev.id] != [layer.id]:
            continue
        act = "relu" if layer.kind == "relu" else "leaky_relu"
        updated[prev.id] = replace(prev, activation=act, slope=layer.slope)
        drop[layer.id] = prev.id
    if not drop:
        return graph
    layers = []
    for layer in graph.layers:
        if layer.id in drop:
            continue
        layer = updated.get(layer.id, layer)
        preds = [drop.get(p, p) for p in layer.predecessors]
        layers.append(replace(layer, predecessors=preds))
    return ModelGraph(layers, graph.segments, graph.input_shape,
                      dict(graph.scales), list(graph.reorderings))


def prepare_for_quantization(graph):
    """Standard pre-calibration canonicalization: fold BN, fuse activations."""
    return fuse_activations(fold_all_batchnorms(graph))


# ---------------------------------------------------------------------------
# forward passes

def lower_layer_input(layer, x):
    """Lower the incoming activation to the [J, P] matrix plus reshape info."""
    if layer.kind == "conv":
        n = x.shape[0]
        out_h, out_w = conv_output_hw(x.shape[2], x.shape[3], layer.kernel,
                                      layer.stride, layer.padding)
        cols = im2col(x, layer.kernel, layer.stride, layer.padding)
        return cols, (n, out_h, out_w)
    # linear: flatten features per sample
    n = x.shape[0]
    flat = x.reshape(n, -1)
    if flat.shape[1] != layer.in_channels:
        raise ValueError(f"layer {layer.id}: expected {layer.in_channels} input "
                         f"features, got {flat.shape[1]}")
    return np.ascontiguousarray(flat.T), (n,)


def raise_layer_output(layer, out, meta):
    """Inverse of lower_layer_input on the [OC, P] output matrix."""
    if layer.kind == "conv":
        n, out_h, out_w = meta
        return out.reshape(layer.out_channels, n, out_h, out_w).transpose(1, 0, 2, 3)
    return np.ascontiguousarray(out.T)


def reference_target(layer, ref):
    """Per-layer float reference reshaped to the [OC, P] output layout."""
    if layer.kind == "conv":
        return ref.transpose(1, 0, 2, 3).reshape(layer.out_channels, -1)
    return np.ascontiguousarray(ref.T)


def run_simple_layer(layer, outputs):
    x = outputs[layer.predecessors[0]]
    if layer.kind == "relu":
        return apply_activation(x, "relu")
    if layer.kind == "leaky-relu":
        return apply_activation(x, "leaky_relu", layer.slope).astype(np.float32)
    if layer.kind == "batchnorm":
        bn = layer.bn
        shape = (1, -1) + (1,) * (x.ndim - 2)
        factor = (bn.gamma / np.sqrt(bn.running_var + bn.epsilon)).reshape(shape)
        shift = (bn.beta - bn.running_mean * bn.gamma
                 / np.sqrt(bn.running_var + bn.epsilon)).reshape(shape)
        return (x * factor + shift).astype(np.float32)
    if layer.kind == "residual-add":
        a, b = (outputs[p] for p in layer.predecessors)
        if a.shape != b.shape:
            raise ValueError(f"layer {layer.id}: residual-add shapes differ "
                             f"{a.shape} vs {b.shape}")
        return a + b
    if layer.kind == "output":
        return x
    raise ValueError(f"cannot execute layer kind {layer.kind!r}")


def _check_input(graph, x):
    if graph.input_shape and tuple(x.shape[1:]) != tuple(graph.input_shape[1:]):
        raise ValueError(f"input shape {x.shape} does not match graph input "
                         f"{graph.input_shape} (batch dim free)")


def forward_float(graph, x):
    """Run the float network; returns every layer's output keyed by id."""
    _check_input(graph, x)
    outputs = {}
    for layer in graph.layers:
        if layer.kind == "input":
            outputs[layer.id] = np.asarray(x, dtype=np.float32)
        elif layer.kind in ("conv", "linear"):
            if layer.weight is None:
                raise ValueError(f"layer {layer.id} has no weights loaded")
            cols, meta = lower_layer_input(layer, outputs[layer.predecessors[0]])
            out = conv_reference(layer.weight_matrix(), cols, layer.activation,
                                 layer.bias, layer.slope)
            outputs[layer.id] = raise_layer_output(layer, out, meta)
        else:
            outputs[layer.id] = run_simple_layer(layer, outputs)
    return outputs


def forward_quantized(graph, x, scales=None, counters=None):
    """Run the network with quantized conv/linear layers.

    Layers present in `scales` (default: the graph's own scale table) run the
    grouped integer path; everything else runs in float.
    """
    scales = graph.scales if scales is None else scales
    _check_input(graph, x)
    outputs = {}
    for layer in graph.layers:
        if layer.kind == "input":
            outputs[layer.id] = np.asarray(x, dtype=np.float32)
        elif layer.kind in ("conv", "linear"):
            cols, meta = lower_layer_input(layer, outputs[layer.predecessors[0]])
            info = scales.get(layer.id) if layer.quantize else None
            if info is not None:
                out = quantized_forward_layer(
                    layer.weight_matrix(), cols, info.partition(layer), info.scales,
                    layer.bias, layer.activation, layer.slope, counters=counters)
            else:
                out = conv_reference(layer.weight_matrix(), cols, layer.activation,
                                     layer.bias, layer.slope)
            outputs[layer.id] = raise_layer_output(layer, out, meta)
        else:
            outputs[layer.id] = run_simple_layer(layer, outputs)
    return outputs


def propagate_shapes(graph, batch=1):
    """Per-layer output shapes at the given batch size, from graph metadata."""
    shapes = {}
    for layer in graph.layers:
        if layer.kind == "input":
            shapes[layer.id] = (batch, *graph.input_shape[1:])
        elif layer.kind == "conv":
            n, _, h, w = shapes[layer.predecessors[0]]
            out_h, out_w = conv_output_hw(h, w, layer.kernel, layer.stride, layer.padding)
            shapes[layer.id] = (n, layer.out_channels, out_h, out_w)
        elif layer.kind == "linear":
            n = shapes[layer.predecessors[0]][0]
            shapes[layer.id] = (n, layer.out_channels)
        else:
            shapes[layer.id] = shapes[layer.predecessors[0]]
    return shapes
