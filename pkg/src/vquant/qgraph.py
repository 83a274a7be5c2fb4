import json
import logging
import os

import numpy as np

from vcheckpoint import Checkpoint, load_checkpoint, save_checkpoint
from vgraph import (
    LOWERED,
    MATMUL_KINDS,
    Graph,
    GraphBuilder,
    GraphDimensionError,
    OpKind,
    ParamSpec,
    count_macs,
    get_params,
    run_node,
)
from vtensor import DType

from .vquant import (
    MINMAX,
    CoverageError,
    QuantError,
    check_capacity,
    compute_scale,
    conv2d_int8,
    dequantize,
    int8_conv_nodes,
    matmul_int8,
    quantize_tensor,
    quantize_weights,
    quantized_edges,
)

logger = logging.getLogger("vquant")

INT8_CONV = "int8-conv"
INT8_MATMUL = "int8-matmul"
F32_ELEMENTWISE = "f32-elementwise"
BOUNDARY = "boundary"


class QuantParams:
    """Scales of a quantized graph.

    ``act_scales`` maps edge ids to per-tensor activation scales and
    ``weight_scales`` maps convolution node ids to per-output-channel weight
    scales. Degenerate (all-zero) edges and channels got scale 1.0.
    """

    def __init__(
        self,
        act_scales,
        weight_scales,
        method=MINMAX,
        degenerate_edges=(),
        degenerate_channels=None,
        ln_conv_fp32=False,
        int8_matmul=False,
    ):
        self.act_scales = dict(act_scales)
        self.weight_scales = {
            k: np.asarray(v, dtype=np.float32) for k, v in weight_scales.items()
        }
        self.method = method
        self.degenerate_edges = list(degenerate_edges)
        self.degenerate_channels = dict(degenerate_channels or {})
        self.ln_conv_fp32 = ln_conv_fp32
        self.int8_matmul = int8_matmul

    def to_dict(self):
        return {
            "method": self.method,
            "ln_conv_fp32": self.ln_conv_fp32,
            "int8_matmul": self.int8_matmul,
            "act_scales": self.act_scales,
            "weight_scales": {k: v.tolist() for k, v in self.weight_scales.items()},
            "degenerate_edges": self.degenerate_edges,
            "degenerate_channels": self.degenerate_channels,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            d["act_scales"],
            d["weight_scales"],
            d["method"],
            d["degenerate_edges"],
            d["degenerate_channels"],
            d["ln_conv_fp32"],
            d["int8_matmul"],
        )


class QuantizedGraph:
    """A lowered graph with quantization boundaries, its scales and weights.

    ``modes`` maps every node id to INT8_CONV, INT8_MATMUL, F32_ELEMENTWISE
    or BOUNDARY (Quantize and Dequantize nodes).
    """

    def __init__(self, graph, params, checkpoint, modes):
        self.graph = graph
        self.params = params
        self.checkpoint = checkpoint
        self.modes = dict(modes)

    @property
    def input_shape(self):
        return self.graph.input_shape

    def nodes_in_mode(self, mode):
        return [node for node in self.graph.nodes if self.modes[node.id] == mode]


class _BoundaryBuilder:
    """Copies a lowered graph, adding Quantize and Dequantize nodes.

    Each edge gets at most one Quantize and one Dequantize node, however many
    consumers need it.
    """

    def __init__(self, graph, act_scales):
        self.builder = GraphBuilder(
            graph.input_shape, LOWERED, graph.input, params=graph.params
        )
        self.act_scales = act_scales
        self.modes = {}
        self.quantized = {}
        self.dequantized = {}

    def is_int8(self, edge_id):
        return self.builder.edges[edge_id].dtype == DType.I8.value

    def int8_input(self, edge_id):
        if self.is_int8(edge_id):
            return edge_id
        if edge_id not in self.quantized:
            self.quantized[edge_id] = self._boundary(edge_id, OpKind.QUANTIZE, "i8")
        return self.quantized[edge_id]

    def f32_input(self, edge_id):
        if not self.is_int8(edge_id):
            return edge_id
        if edge_id not in self.dequantized:
            self.dequantized[edge_id] = self._boundary(
                edge_id, OpKind.DEQUANTIZE, "f32"
            )
        return self.dequantized[edge_id]

    def _boundary(self, edge_id, kind, dtype):
        suffix = ".quantize" if kind == OpKind.QUANTIZE else ".dequantize"
        node_id = self.builder.add(
            edge_id + suffix,
            kind,
            [edge_id],
            {"scale": self.act_scales[edge_id]},
            dtype=dtype,
        )
        self.modes[node_id] = BOUNDARY
        return node_id

    def add(self, node, inputs, mode, attrs=None, dtype="f32"):
        self.builder.add(
            node.id,
            node.kind,
            inputs,
            dict(node.attrs, **(attrs or {})),
            node.param_names,
            dtype=dtype,
        )
        self.modes[node.id] = mode


def _activation_scales(stats, edges, method, kl_stride):
    scales = {}
    degenerate = []
    for edge_id in edges:
        try:
            edge_stats = stats[edge_id]
        except KeyError:
            raise CoverageError(edge_id)
        scales[edge_id] = compute_scale(edge_stats, method, kl_stride)
        if edge_stats.degenerate:
            degenerate.append(edge_id)
            logger.warning("Edge {} is all zero; its scale is 1.0".format(edge_id))
    return scales, degenerate


def _quantized_checkpoint(graph, inherited, convs):
    tensors = {name: inherited[name] for name in graph.params}
    specs = dict(graph.params)
    for node_id, qconv in convs.items():
        node = graph.node(node_id)
        names = node.param_names
        tensors[names[0]] = qconv.weight
        specs[names[0]] = ParamSpec(qconv.weight.shape, "i8", None)
        if qconv.bias is not None:
            tensors[names[1]] = qconv.bias
            specs[names[1]] = ParamSpec(qconv.bias.shape, "i32", None)
    return Checkpoint(tensors, inherited.metadata), specs


def build_quantized(
    lowered,
    inherited,
    stats,
    method=MINMAX,
    ln_conv_fp32=False,
    int8_matmul=False,
    kl_stride=1,
):
    """Build the QuantizedGraph of a lowered graph.

    Convolutions run in int8 (the LayerNorm mean convolutions stay f32 if
    ``ln_conv_fp32``), the attention matmuls in int8 if ``int8_matmul``, and
    everything else in f32. Quantize/Dequantize nodes are inserted where the
    execution mode changes.
    """
    if lowered.dialect != LOWERED:
        raise QuantError("Only lowered graphs can be quantized")
    edges = quantized_edges(lowered, ln_conv_fp32, int8_matmul)
    act_scales, degenerate_edges = _activation_scales(stats, edges, method, kl_stride)
    convs = quantize_weights(inherited, lowered, act_scales, ln_conv_fp32)
    checkpoint, specs = _quantized_checkpoint(lowered, inherited, convs)
    int8_convs = {node.id for node in int8_conv_nodes(lowered, ln_conv_fp32)}

    boundaries = _BoundaryBuilder(lowered, act_scales)
    boundaries.builder.params = specs
    for node in lowered.nodes:
        if node.id in int8_convs:
            boundaries.add(
                node,
                [boundaries.int8_input(node.inputs[0])],
                INT8_CONV,
                {
                    "x_scale": act_scales[node.inputs[0]],
                    "y_scale": act_scales[node.id],
                },
                dtype="i8",
            )
        elif int8_matmul and node.kind in MATMUL_KINDS:
            check_capacity(node.id, lowered.edges[node.inputs[0]].shape[-1])
            boundaries.add(
                node,
                [boundaries.int8_input(edge_id) for edge_id in node.inputs],
                INT8_MATMUL,
                {"scales": [act_scales[edge_id] for edge_id in node.inputs]},
            )
        else:
            boundaries.add(
                node,
                [boundaries.f32_input(edge_id) for edge_id in node.inputs],
                F32_ELEMENTWISE,
            )
    output = boundaries.f32_input(lowered.output)
    graph = boundaries.builder.build(output)
    params = QuantParams(
        act_scales,
        {node_id: qconv.scales for node_id, qconv in convs.items()},
        method,
        degenerate_edges,
        {k: v.degenerate for k, v in convs.items() if v.degenerate},
        ln_conv_fp32,
        int8_matmul,
    )
    logger.info(
        "Quantized graph: {} int8 convolutions, {} boundary nodes".format(
            len(int8_convs), sum(1 for m in boundaries.modes.values() if m == BOUNDARY)
        )
    )
    return QuantizedGraph(graph, params, checkpoint, boundaries.modes)


def _run_int8_conv(qg, node, inputs, node_params):
    if node.kind == OpKind.PATCH_EMBED:
        stride = node.attrs["patch"]
    else:
        stride = node.attrs["stride"]
    bias = node_params[1] if len(node_params) > 1 else None
    return conv2d_int8(
        inputs[0],
        node_params[0],
        bias,
        node.attrs["x_scale"],
        qg.params.weight_scales[node.id],
        node.attrs["y_scale"],
        stride=stride,
    )


def _run_int8_matmul(node, inputs):
    a_scale, b_scale = node.attrs["scales"]
    return matmul_int8(
        inputs[0],
        inputs[1],
        a_scale,
        b_scale,
        transpose_b=node.kind == OpKind.MATMUL_QK,
    )


def _run_quantized_node(qg, node, inputs, node_params):
    mode = qg.modes[node.id]
    if node.kind == OpKind.QUANTIZE:
        return quantize_tensor(inputs[0], node.attrs["scale"])
    elif node.kind == OpKind.DEQUANTIZE:
        return dequantize(inputs[0], node.attrs["scale"])
    elif mode == INT8_CONV:
        return _run_int8_conv(qg, node, inputs, node_params)
    elif mode == INT8_MATMUL:
        return _run_int8_matmul(node, inputs)
    return run_node(node, inputs, node_params)


def execute_quantized(qg, input, counters=None, observer=None):
    """Run a QuantizedGraph on an f32 input and return f32 logits.

    ``counters`` and ``observer`` work as in vgraph.execute.
    """
    graph = qg.graph
    if tuple(input.shape) != tuple(graph.input_shape):
        raise GraphDimensionError(
            graph.input,
            "input shape {} != graph input shape {}".format(
                input.shape, graph.input_shape
            ),
        )
    values = {graph.input: input}
    if observer is not None:
        observer(graph.input, input)
    for node in graph.nodes:
        inputs = [values[edge_id] for edge_id in node.inputs]
        node_params = get_params(node, qg.checkpoint, graph.params)
        result = _run_quantized_node(qg, node, inputs, node_params)
        if counters is not None:
            input_shapes = [i.shape for i in inputs]
            param_shapes = [p.shape for p in node_params]
            count_macs(node, input_shapes, param_shapes, counters)
        values[node.id] = result
        if observer is not None:
            observer(node.id, result)
    return values[graph.output]


def save_quantized(qg, directory):
    """Write a QuantizedGraph bundle: graph.json, quant.json and weights.dckp."""
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "graph.json"), "w") as f:
        f.write(qg.graph.to_json())
    with open(os.path.join(directory, "quant.json"), "w") as f:
        json.dump(
            {"modes": qg.modes, "params": qg.params.to_dict()},
            f,
            indent=1,
            sort_keys=True,
        )
    save_checkpoint(qg.checkpoint, os.path.join(directory, "weights.dckp"))


def load_quantized(directory):
    with open(os.path.join(directory, "graph.json")) as f:
        graph = Graph.from_json(f.read())
    with open(os.path.join(directory, "quant.json")) as f:
        d = json.load(f)
    checkpoint = load_checkpoint(os.path.join(directory, "weights.dckp"))
    params = QuantParams.from_dict(d["params"])
    return QuantizedGraph(graph, params, checkpoint, d["modes"])
