import json
import logging
from collections import namedtuple
from enum import Enum

import numpy as np

import vtensor
from vtensor import DimensionError, DType, Tensor

logger = logging.getLogger("vgraph")

ORIGINAL = "original"
LOWERED = "lowered"
DIALECTS = (ORIGINAL, LOWERED)

BNC = "BNC"
BC1N = "BC1N"
LAYOUTS = (BNC, BC1N)


class GraphError(Exception):
    pass


class ConfigError(GraphError, ValueError):
    pass


class MissingParameterError(GraphError, KeyError):
    def __init__(self, name, node_id):
        self.name = name
        self.node_id = node_id
        super().__init__(
            "Parameter {!r} needed by node {!r} is missing".format(name, node_id)
        )

    def __str__(self):
        return self.args[0]


class GraphDimensionError(GraphError, DimensionError):
    def __init__(self, node_id, message):
        self.node_id = node_id
        super().__init__("Node {!r}: {}".format(node_id, message))


class OpKind(str, Enum):
    LINEAR = "Linear"
    LAYER_NORM = "LayerNorm"
    CONV2D = "Conv2d"
    MATMUL_QK = "MatMulQK"
    MATMUL_AV = "MatMulAV"
    SOFTMAX = "Softmax"
    GELU = "Gelu"
    ADD = "Add"
    SUB = "Sub"
    MUL = "Mul"
    MUL_SCALAR = "MulScalar"
    SQUARE = "Square"
    RSQRT_EPS = "RsqrtEps"
    PERMUTE = "Permute"
    RESHAPE = "Reshape"
    CONCAT = "Concat"
    PATCH_EMBED = "PatchEmbed"
    ADD_POS_EMBED = "AddPosEmbed"
    TOKEN_INSERT = "TokenInsert"
    SLICE = "Slice"
    HEAD = "Head"
    QUANTIZE = "Quantize"
    DEQUANTIZE = "Dequantize"


# Kinds that must not survive lowering
ORIGINAL_ONLY_KINDS = frozenset({OpKind.LINEAR, OpKind.LAYER_NORM})

CONV_KINDS = frozenset({OpKind.CONV2D, OpKind.PATCH_EMBED})
MATMUL_KINDS = frozenset({OpKind.MATMUL_QK, OpKind.MATMUL_AV})

required_attrs = {
    OpKind.LINEAR: ("in_features", "out_features", "layout"),
    OpKind.LAYER_NORM: ("dim", "eps", "layout"),
    OpKind.CONV2D: ("in_channels", "out_channels", "kernel", "stride"),
    OpKind.MATMUL_QK: (),
    OpKind.MATMUL_AV: (),
    OpKind.SOFTMAX: (),
    OpKind.GELU: (),
    OpKind.ADD: (),
    OpKind.SUB: (),
    OpKind.MUL: (),
    OpKind.MUL_SCALAR: ("scale",),
    OpKind.SQUARE: (),
    OpKind.RSQRT_EPS: ("eps",),
    OpKind.PERMUTE: ("plan",),
    OpKind.RESHAPE: ("plan",),
    OpKind.CONCAT: ("axis",),
    OpKind.PATCH_EMBED: ("patch", "embed_dim"),
    OpKind.ADD_POS_EMBED: ("layout",),
    OpKind.TOKEN_INSERT: ("count", "layout"),
    OpKind.SLICE: ("axis", "start", "stop", "layout"),
    OpKind.HEAD: ("layout",),
    OpKind.QUANTIZE: ("scale",),
    OpKind.DEQUANTIZE: ("scale",),
}

Edge = namedtuple("Edge", ["id", "shape", "dtype", "producer"])
OpNode = namedtuple("OpNode", ["id", "kind", "attrs", "inputs", "param_names"])

# How a parameter of a rewritten graph is obtained from the parameters of the
# graph it was rewritten from. action is one of "copy" (verbatim), "reshape"
# (exact reshape of source to the parameter's shape) and "fill" (constant
# value, source unused).
Directive = namedtuple("Directive", ["action", "source", "value"])
ParamSpec = namedtuple("ParamSpec", ["shape", "dtype", "directive"])
Diagnostic = namedtuple("Diagnostic", ["node_id", "code", "message"])


def channel_axis(layout):
    return {BNC: 2, BC1N: 1}[layout]


def token_axis(layout):
    return {BNC: 1, BC1N: 3}[layout]


def _semantic_axis(axis, layout):
    if axis == "channel":
        return channel_axis(layout)
    elif axis == "token":
        return token_axis(layout)
    return int(axis)


class Graph:
    """An operator DAG whose nodes are kept in topological order.

    Every node produces exactly one edge whose id is the node id; the graph
    input is the only edge without a producer. ``params`` maps parameter names
    to their ParamSpec.
    """

    def __init__(self, nodes, edges, dialect, input, output, params):
        self.nodes = tuple(nodes)
        self.edges = dict(edges)
        self.dialect = dialect
        self.input = input
        self.output = output
        self.params = dict(params)
        self._index = {node.id: node for node in self.nodes}

    def node(self, node_id):
        return self._index[node_id]

    def __contains__(self, node_id):
        return node_id in self._index

    @property
    def input_shape(self):
        return self.edges[self.input].shape

    @property
    def output_shape(self):
        return self.edges[self.output].shape

    def nodes_of_kind(self, *kinds):
        return [node for node in self.nodes if node.kind in kinds]

    def count(self, kind):
        return len(self.nodes_of_kind(kind))

    def consumers(self, edge_id):
        return [node for node in self.nodes if edge_id in node.inputs]

    def replace(self, **kwargs):
        values = {
            "nodes": self.nodes,
            "edges": self.edges,
            "dialect": self.dialect,
            "input": self.input,
            "output": self.output,
            "params": self.params,
        }
        values.update(kwargs)
        return Graph(**values)

    def to_dict(self):
        return {
            "dialect": self.dialect,
            "input": self.input,
            "output": self.output,
            "nodes": [
                {
                    "id": node.id,
                    "kind": OpKind(node.kind).value,
                    "attrs": _jsonable(node.attrs),
                    "inputs": list(node.inputs),
                    "param_names": list(node.param_names),
                }
                for node in self.nodes
            ],
            "edges": [
                {
                    "id": edge.id,
                    "shape": list(edge.shape),
                    "dtype": edge.dtype,
                    "producer": edge.producer,
                }
                for edge in self.edges.values()
            ],
            "params": [
                {
                    "name": name,
                    "shape": list(spec.shape),
                    "dtype": spec.dtype,
                    "directive": spec.directive and spec.directive._asdict(),
                }
                for name, spec in self.params.items()
            ],
        }

    @classmethod
    def from_dict(cls, d):
        nodes = [
            OpNode(
                n["id"],
                OpKind(n["kind"]),
                dict(n["attrs"]),
                tuple(n["inputs"]),
                tuple(n["param_names"]),
            )
            for n in d["nodes"]
        ]
        edges = {
            e["id"]: Edge(e["id"], tuple(e["shape"]), e["dtype"], e["producer"])
            for e in d["edges"]
        }
        params = {
            p["name"]: ParamSpec(
                tuple(p["shape"]),
                p["dtype"],
                p["directive"] and Directive(**p["directive"]),
            )
            for p in d["params"]
        }
        return cls(nodes, edges, d["dialect"], d["input"], d["output"], params)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_json(cls, s):
        return cls.from_dict(json.loads(s))

    def structure(self):
        """Node kinds, attributes and topology, for structural comparisons."""
        d = self.to_dict()
        return json.dumps([d["dialect"], d["nodes"], d["input"], d["output"]])


def _jsonable(value):
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.generic):
        return value.item()
    return value


def infer_shape(kind, attrs, input_shapes, param_shapes):
    """Return the output shape of a node; raise DimensionError if the input
    and parameter shapes are not acceptable for the node."""
    return _shape_rules[OpKind(kind)](attrs, list(input_shapes), list(param_shapes))


def _expect_count(what, items, n):
    if len(items) != n:
        raise DimensionError("Expected {} {}, got {}".format(n, what, len(items)))


def _same_shape_rule(attrs, inputs, params):
    _expect_count("inputs", inputs, 1)
    return inputs[0]


def _binary_rule(attrs, inputs, params):
    operands = inputs + params
    _expect_count("operands", operands, 2)
    a, b = operands
    if a != b and not (len(a) == 4 and tuple(b) == (1, a[1], 1, 1)):
        raise DimensionError(
            "Shapes {} and {} are neither identical nor channel-broadcastable".format(
                a, b
            )
        )
    return a


def _linear_rule(attrs, inputs, params):
    _expect_count("inputs", inputs, 1)
    shape = list(inputs[0])
    axis = channel_axis(attrs["layout"])
    if len(shape) != {BNC: 3, BC1N: 4}[attrs["layout"]]:
        raise DimensionError(
            "Shape {} does not have the {} layout".format(tuple(shape), attrs["layout"])
        )
    expected_params = [(attrs["out_features"], attrs["in_features"])]
    if len(params) == 2:
        expected_params.append((attrs["out_features"],))
    if [tuple(p) for p in params] != expected_params:
        raise DimensionError(
            "Linear parameter shapes {} != {}".format(params, expected_params)
        )
    if shape[axis] != attrs["in_features"]:
        raise DimensionError(
            "Channel axis is {} but the layer has {} input features".format(
                shape[axis], attrs["in_features"]
            )
        )
    shape[axis] = attrs["out_features"]
    return tuple(shape)


def _layernorm_rule(attrs, inputs, params):
    _expect_count("inputs", inputs, 1)
    shape = inputs[0]
    if shape[channel_axis(attrs["layout"])] != attrs["dim"]:
        raise DimensionError(
            "Channel axis is {} but the hidden dimension is {}".format(
                shape[channel_axis(attrs["layout"])], attrs["dim"]
            )
        )
    if [tuple(p) for p in params] != [(attrs["dim"],)] * 2:
        raise DimensionError(
            "gamma/beta shapes {} != ({},)".format(params, attrs["dim"])
        )
    return shape


def _conv_rule(attrs, inputs, params):
    _expect_count("inputs", inputs, 1)
    w = tuple(params[0])
    expected = (
        attrs["out_channels"],
        attrs["in_channels"],
        attrs["kernel"],
        attrs["kernel"],
    )
    if w != expected:
        raise DimensionError("Conv weight shape {} != {}".format(w, expected))
    if len(params) > 1 and tuple(params[1]) != (attrs["out_channels"],):
        raise DimensionError("Conv bias shape {} is wrong".format(params[1]))
    return vtensor.check_conv_geometry(tuple(inputs[0]), w, attrs["stride"])


def _patch_embed_rule(attrs, inputs, params):
    _expect_count("inputs", inputs, 1)
    w = tuple(params[0])
    if w[0] != attrs["embed_dim"] or w[2:] != (attrs["patch"], attrs["patch"]):
        raise DimensionError("Patch embedding weight shape {} is wrong".format(w))
    return vtensor.check_conv_geometry(tuple(inputs[0]), w, attrs["patch"])


def _matmul_qk_rule(attrs, inputs, params):
    _expect_count("inputs", inputs, 2)
    q, k = inputs
    if q != k or len(q) < 2:
        raise DimensionError("Query shape {} != key shape {}".format(q, k))
    return tuple(q[:-1]) + (q[-2],)


def _matmul_av_rule(attrs, inputs, params):
    _expect_count("inputs", inputs, 2)
    a, v = inputs
    if a[:-2] != v[:-2] or a[-1] != v[-2] or a[-2] != a[-1]:
        raise DimensionError(
            "Attention shape {} and value shape {} mismatch".format(a, v)
        )
    return tuple(v)


def _head_plan_shape(attrs, shape):
    heads = attrs["heads"]
    plan = attrs["plan"]
    layout = attrs["layout"]
    if plan == "split-heads":
        if layout == BNC:
            b, n, c = shape
        else:
            b, c, one, n = shape
        if c % heads:
            raise DimensionError(
                "{} channels cannot be split in {} heads".format(c, heads)
            )
        return (b, heads, n, c // heads)
    b, h, n, d = shape
    if h != heads:
        raise DimensionError("Expected {} heads, got {}".format(heads, h))
    return (b, n, h * d) if layout == BNC else (b, h * d, 1, n)


def _permute_rule(attrs, inputs, params):
    _expect_count("inputs", inputs, 1)
    shape = tuple(inputs[0])
    plan = attrs["plan"]
    if plan in ("split-heads", "merge-heads"):
        return _head_plan_shape(attrs, shape)
    elif plan == "to-nchw":
        b, n, c = shape
        return (b, c, 1, n)
    elif plan == "from-nchw":
        b, c, one, n = shape
        return (b, n, c)
    elif plan == "axes":
        axes = tuple(attrs["axes"])
        if sorted(axes) != list(range(len(shape))):
            raise DimensionError("{} is not a permutation".format(axes))
        return tuple(shape[a] for a in axes)
    raise DimensionError("Unknown permute plan {!r}".format(plan))


def _reshape_rule(attrs, inputs, params):
    _expect_count("inputs", inputs, 1)
    shape = tuple(inputs[0])
    if attrs["plan"] == "flatten-patches":
        b, c, h, w = shape
        return (b, h * w, c) if attrs["layout"] == BNC else (b, c, 1, h * w)
    elif attrs["plan"] == "shape":
        new_shape = tuple(attrs["shape"])
        if int(np.prod(new_shape)) != int(np.prod(shape)):
            raise DimensionError("Cannot reshape {} to {}".format(shape, new_shape))
        return new_shape
    raise DimensionError("Unknown reshape plan {!r}".format(attrs["plan"]))


def _concat_rule(attrs, inputs, params):
    if not inputs:
        raise DimensionError("Concat needs at least one input")
    axis = attrs["axis"] % len(inputs[0])
    result = list(inputs[0])
    for shape in inputs[1:]:
        if len(shape) != len(result) or any(
            shape[i] != result[i] for i in range(len(result)) if i != axis
        ):
            raise DimensionError(
                "Cannot concatenate {} and {}".format(inputs[0], shape)
            )
        result[axis] += shape[axis]
    return tuple(result)


def _token_insert_rule(attrs, inputs, params):
    _expect_count("inputs", inputs, 1)
    shape = list(inputs[0])
    c = shape[channel_axis(attrs["layout"])]
    _expect_count("token parameters", params, attrs["count"])
    for p in params:
        if tuple(p) != (1, 1, c):
            raise DimensionError("Token shape {} != {}".format(p, (1, 1, c)))
    shape[token_axis(attrs["layout"])] += attrs["count"]
    return tuple(shape)


def _pos_embed_rule(attrs, inputs, params):
    _expect_count("inputs", inputs, 1)
    shape = inputs[0]
    layout = attrs["layout"]
    n, c = shape[token_axis(layout)], shape[channel_axis(layout)]
    if tuple(params[0]) != (1, n, c):
        raise DimensionError(
            "Position embedding shape {} != {}".format(params[0], (1, n, c))
        )
    return shape


def _slice_rule(attrs, inputs, params):
    _expect_count("inputs", inputs, 1)
    shape = list(inputs[0])
    axis = _semantic_axis(attrs["axis"], attrs.get("layout", BNC))
    if not 0 <= attrs["start"] < attrs["stop"] <= shape[axis]:
        raise DimensionError(
            "Cannot slice [{}:{}] from axis {} of {}".format(
                attrs["start"], attrs["stop"], axis, tuple(shape)
            )
        )
    shape[axis] = attrs["stop"] - attrs["start"]
    return tuple(shape)


def _head_rule(attrs, inputs, params):
    _expect_count("inputs", inputs, 1)
    shape = inputs[0]
    if attrs["layout"] == BNC:
        b, tokens, k = shape
    else:
        b, k, one, tokens = shape
        tokens *= one
    if tokens != 1:
        raise DimensionError("Head input {} holds more than one token".format(shape))
    return (b, k)


_shape_rules = {
    OpKind.LINEAR: _linear_rule,
    OpKind.LAYER_NORM: _layernorm_rule,
    OpKind.CONV2D: _conv_rule,
    OpKind.MATMUL_QK: _matmul_qk_rule,
    OpKind.MATMUL_AV: _matmul_av_rule,
    OpKind.SOFTMAX: _same_shape_rule,
    OpKind.GELU: _same_shape_rule,
    OpKind.ADD: _binary_rule,
    OpKind.SUB: _binary_rule,
    OpKind.MUL: _binary_rule,
    OpKind.MUL_SCALAR: _same_shape_rule,
    OpKind.SQUARE: _same_shape_rule,
    OpKind.RSQRT_EPS: _same_shape_rule,
    OpKind.PERMUTE: _permute_rule,
    OpKind.RESHAPE: _reshape_rule,
    OpKind.CONCAT: _concat_rule,
    OpKind.PATCH_EMBED: _patch_embed_rule,
    OpKind.ADD_POS_EMBED: _pos_embed_rule,
    OpKind.TOKEN_INSERT: _token_insert_rule,
    OpKind.SLICE: _slice_rule,
    OpKind.HEAD: _head_rule,
    OpKind.QUANTIZE: _same_shape_rule,
    OpKind.DEQUANTIZE: _same_shape_rule,
}


class GraphBuilder:
    """Accumulates nodes, inferring and recording the shape of every edge."""

    def __init__(self, input_shape, dialect=ORIGINAL, input_id="input", params=None):
        self.nodes = []
        self.edges = {input_id: Edge(input_id, tuple(input_shape), "f32", None)}
        self.dialect = dialect
        self.input = input_id
        self.params = dict(params or {})

    def add_param(self, name, shape, directive=None, dtype="f32"):
        if name in self.params:
            raise GraphError("Parameter {!r} is declared twice".format(name))
        self.params[name] = ParamSpec(tuple(shape), dtype, directive)
        return name

    def add(self, node_id, kind, inputs, attrs=None, param_names=(), dtype="f32"):
        if node_id in self.edges:
            raise GraphError("Node id {!r} is already in use".format(node_id))
        attrs = dict(attrs or {})
        kind = OpKind(kind)
        for attr in required_attrs[kind]:
            if attr not in attrs:
                raise GraphError(
                    "Node {!r} ({}) lacks attribute {!r}".format(
                        node_id, kind.value, attr
                    )
                )
        try:
            shape = infer_shape(
                kind,
                attrs,
                [self.edges[i].shape for i in inputs],
                [self.params[p].shape for p in param_names],
            )
        except (DimensionError, ValueError, KeyError) as e:
            raise GraphDimensionError(node_id, str(e))
        self.nodes.append(
            OpNode(node_id, kind, attrs, tuple(inputs), tuple(param_names))
        )
        self.edges[node_id] = Edge(node_id, tuple(shape), dtype, node_id)
        return node_id

    def build(self, output):
        return Graph(
            self.nodes, self.edges, self.dialect, self.input, output, self.params
        )


def validate(graph):
    """Return a list of Diagnostic, empty if the graph is well formed."""
    diagnostics = []
    positions = {}
    for position, node in enumerate(graph.nodes):
        if node.id in positions:
            diagnostics.append(
                Diagnostic(node.id, "duplicate-id", "Node id is used twice")
            )
        positions[node.id] = position

    for edge in graph.edges.values():
        if edge.producer is not None and edge.producer not in positions:
            diagnostics.append(
                Diagnostic(
                    edge.producer,
                    "dangling-edge",
                    "Edge {!r} has no producer".format(edge.id),
                )
            )
    for edge_id in (graph.input, graph.output):
        if edge_id not in graph.edges:
            diagnostics.append(
                Diagnostic(
                    None, "unknown-edge", "Edge {!r} does not exist".format(edge_id)
                )
            )

    for position, node in enumerate(graph.nodes):
        diagnostics.extend(_validate_node(graph, node, position, positions))
    return diagnostics


def _validate_node(graph, node, position, positions):
    try:
        kind = OpKind(node.kind)
    except ValueError:
        message = "Unknown kind {!r}".format(node.kind)
        return [Diagnostic(node.id, "unknown-kind", message)]
    result = []
    if graph.dialect == LOWERED and kind in ORIGINAL_ONLY_KINDS:
        result.append(
            Diagnostic(
                node.id,
                "dialect",
                "{} is not allowed in a lowered graph".format(kind.value),
            )
        )
    missing = [a for a in required_attrs[kind] if a not in node.attrs]
    if missing:
        result.append(
            Diagnostic(node.id, "missing-attr", "Missing attributes {}".format(missing))
        )
    own_edge = graph.edges.get(node.id)
    if own_edge is None or own_edge.producer != node.id:
        result.append(Diagnostic(node.id, "unknown-edge", "Node has no output edge"))
    input_ok = True
    for edge_id in node.inputs:
        edge = graph.edges.get(edge_id)
        if edge is None:
            result.append(
                Diagnostic(
                    node.id, "unknown-edge", "Input {!r} does not exist".format(edge_id)
                )
            )
            input_ok = False
        elif edge.producer is None:
            if edge_id != graph.input:
                result.append(
                    Diagnostic(
                        node.id,
                        "unknown-edge",
                        "Input {!r} has no producer".format(edge_id),
                    )
                )
                input_ok = False
        elif edge.producer not in positions:
            input_ok = False  # reported once as a dangling edge
        elif positions[edge.producer] >= position:
            result.append(
                Diagnostic(
                    node.id,
                    "order",
                    "Input {!r} is produced later; the graph is cyclic "
                    "or unsorted".format(edge_id),
                )
            )
            input_ok = False
    params_ok = True
    for name in node.param_names:
        if name not in graph.params:
            result.append(
                Diagnostic(
                    node.id, "param", "Parameter {!r} is not declared".format(name)
                )
            )
            params_ok = False
    if missing or not input_ok or not params_ok or own_edge is None:
        return result
    try:
        shape = infer_shape(
            kind,
            node.attrs,
            [graph.edges[i].shape for i in node.inputs],
            [graph.params[p].shape for p in node.param_names],
        )
    except (DimensionError, ValueError, KeyError) as e:
        result.append(Diagnostic(node.id, "shape", str(e)))
    else:
        if tuple(shape) != tuple(own_edge.shape):
            result.append(
                Diagnostic(
                    node.id,
                    "shape",
                    "Inferred shape {} differs from recorded {}".format(
                        tuple(shape), tuple(own_edge.shape)
                    ),
                )
            )
    return result


def _run_linear(node, inputs, params):
    return vtensor.linear(
        inputs[0], params[0], params[1] if len(params) > 1 else None,
        axis=channel_axis(node.attrs["layout"]),
    )


def _run_layernorm(node, inputs, params):
    x = inputs[0]
    eps = node.attrs["eps"]
    if node.attrs["layout"] == BNC:
        return vtensor.layernorm_ref(x, params[0], params[1], eps)
    x = vtensor.permute(x, (0, 2, 3, 1))
    y = vtensor.layernorm_ref(x, params[0], params[1], eps)
    return vtensor.permute(y, (0, 3, 1, 2))


def _run_conv(node, inputs, params):
    bias = params[1] if len(params) > 1 else None
    return vtensor.conv2d(inputs[0], params[0], bias, stride=node.attrs["stride"])


def _run_patch_embed(node, inputs, params):
    return vtensor.conv2d(inputs[0], params[0], params[1], stride=node.attrs["patch"])


def _run_matmul_qk(node, inputs, params):
    q, k = inputs
    return vtensor.matmul_batched(q, vtensor.permute(k, _swap_last(k.ndim)))


def _swap_last(ndim):
    return tuple(range(ndim - 2)) + (ndim - 1, ndim - 2)


def _run_matmul_av(node, inputs, params):
    return vtensor.matmul_batched(inputs[0], inputs[1])


def _run_binary(function):
    def run(node, inputs, params):
        return function(*(list(inputs) + list(params)))

    return run


def _run_permute(node, inputs, params):
    x = inputs[0]
    plan = node.attrs["plan"]
    if plan in ("to-nchw", "from-nchw"):
        return vtensor.permute_reshape(x, plan=plan)
    elif plan == "axes":
        return vtensor.permute(x, node.attrs["axes"])
    heads = node.attrs["heads"]
    layout = node.attrs["layout"]
    if plan == "split-heads":
        if layout == BNC:
            b, n, c = x.shape
            x = vtensor.reshape(x, (b, n, heads, c // heads))
            return vtensor.permute(x, (0, 2, 1, 3))
        b, c, _, n = x.shape
        x = vtensor.reshape(x, (b, heads, c // heads, n))
        return vtensor.permute(x, (0, 1, 3, 2))
    b, h, n, d = x.shape
    if layout == BNC:
        return vtensor.reshape(vtensor.permute(x, (0, 2, 1, 3)), (b, n, h * d))
    return vtensor.reshape(vtensor.permute(x, (0, 1, 3, 2)), (b, h * d, 1, n))


def _run_reshape(node, inputs, params):
    x = inputs[0]
    if node.attrs["plan"] == "shape":
        return vtensor.reshape(x, node.attrs["shape"])
    b, c, h, w = x.shape
    if node.attrs["layout"] == BNC:
        return vtensor.permute(vtensor.reshape(x, (b, c, h * w)), (0, 2, 1))
    return vtensor.reshape(x, (b, c, 1, h * w))


def _run_concat(node, inputs, params):
    return vtensor.concat(list(inputs), node.attrs["axis"])


def _layout_tokens(token, layout, batch):
    c = token.shape[-1]
    shape = (batch, 1, c) if layout == BNC else (batch, c, 1, 1)
    values = token.array.reshape((1, 1, c) if layout == BNC else (1, c, 1, 1))
    return Tensor.wrap(np.broadcast_to(values, shape), token.dtype)


def _run_token_insert(node, inputs, params):
    x = inputs[0]
    layout = node.attrs["layout"]
    tokens = [_layout_tokens(p, layout, x.shape[0]) for p in params]
    return vtensor.concat(tokens + [x], token_axis(layout))


def _run_pos_embed(node, inputs, params):
    x = inputs[0]
    pos = params[0].array
    if node.attrs["layout"] == BC1N:
        _, n, c = pos.shape
        pos = pos.transpose(0, 2, 1).reshape(1, c, 1, n)
    return Tensor.wrap(x.array + pos, DType.F32)


def _run_slice(node, inputs, params):
    axis = _semantic_axis(node.attrs["axis"], node.attrs["layout"])
    return vtensor.slice_axis(inputs[0], axis, node.attrs["start"], node.attrs["stop"])


def _run_head(node, inputs, params):
    x = inputs[0]
    k = x.shape[2] if node.attrs["layout"] == BNC else x.shape[1]
    return vtensor.reshape(x, (x.shape[0], k))


kernels = {
    OpKind.LINEAR: _run_linear,
    OpKind.LAYER_NORM: _run_layernorm,
    OpKind.CONV2D: _run_conv,
    OpKind.PATCH_EMBED: _run_patch_embed,
    OpKind.MATMUL_QK: _run_matmul_qk,
    OpKind.MATMUL_AV: _run_matmul_av,
    OpKind.SOFTMAX: lambda node, inputs, params: vtensor.softmax_lastdim(inputs[0]),
    OpKind.GELU: lambda node, inputs, params: vtensor.gelu(inputs[0]),
    OpKind.ADD: _run_binary(vtensor.add),
    OpKind.SUB: _run_binary(vtensor.sub),
    OpKind.MUL: _run_binary(vtensor.mul),
    OpKind.MUL_SCALAR: lambda node, inputs, params: vtensor.mul_scalar(
        inputs[0], node.attrs["scale"]
    ),
    OpKind.SQUARE: lambda node, inputs, params: vtensor.square(inputs[0]),
    OpKind.RSQRT_EPS: lambda node, inputs, params: vtensor.rsqrt_eps(
        inputs[0], node.attrs["eps"]
    ),
    OpKind.PERMUTE: _run_permute,
    OpKind.RESHAPE: _run_reshape,
    OpKind.CONCAT: _run_concat,
    OpKind.ADD_POS_EMBED: _run_pos_embed,
    OpKind.TOKEN_INSERT: _run_token_insert,
    OpKind.SLICE: _run_slice,
    OpKind.HEAD: _run_head,
}


def count_macs(node, input_shapes, param_shapes, counters):
    """Add the multiply-accumulate count of a conv or matmul node to counters."""
    if node.kind == OpKind.CONV2D:
        counters["conv_macs"] += vtensor.conv_macs(
            input_shapes[0], param_shapes[0], node.attrs["stride"]
        )
    elif node.kind == OpKind.PATCH_EMBED:
        counters["conv_macs"] += vtensor.conv_macs(
            input_shapes[0], param_shapes[0], node.attrs["patch"]
        )
    elif node.kind in MATMUL_KINDS:
        a, b = input_shapes
        counters["matmul_macs"] += int(np.prod(a)) * (
            a[-2] if node.kind == OpKind.MATMUL_QK else b[-1]
        )


def get_params(node, params, expected=None):
    result = []
    for name in node.param_names:
        try:
            tensor = params[name]
        except KeyError:
            raise MissingParameterError(name, node.id)
        if expected is not None and tuple(tensor.shape) != tuple(expected[name].shape):
            raise GraphDimensionError(
                node.id,
                "parameter {!r} has shape {}, expected {}".format(
                    name, tensor.shape, expected[name].shape
                ),
            )
        result.append(tensor)
    return result


def last_uses(graph):
    """Map each edge id to the position of the last node reading it."""
    result = {}
    for position, node in enumerate(graph.nodes):
        for edge_id in node.inputs:
            result[edge_id] = position
    return result


def run_node(node, inputs, params):
    kernel = kernels.get(node.kind)
    if kernel is None:
        raise GraphError(
            "Node {!r}: {} cannot be executed by the FP32 interpreter".format(
                node.id, OpKind(node.kind).value
            )
        )
    try:
        return kernel(node, inputs, params)
    except GraphDimensionError:
        raise
    except DimensionError as e:
        raise GraphDimensionError(node.id, str(e))


def execute(graph, params, input, counters=None, observer=None):
    """Evaluate the graph in topological order on a single input tensor.

    ``params`` is any mapping from parameter name to Tensor. If ``counters``
    (a collections.Counter) is given, convolution and matmul MACs are added to
    it; if ``observer`` is given, it is called as observer(edge_id, tensor) for
    the input and for every edge produced.
    """
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
    uses = last_uses(graph)
    for position, node in enumerate(graph.nodes):
        inputs = [values[edge_id] for edge_id in node.inputs]
        node_params = get_params(node, params, graph.params)
        result = run_node(node, inputs, node_params)
        if tuple(result.shape) != tuple(graph.edges[node.id].shape):
            raise GraphDimensionError(
                node.id,
                "produced shape {} but the graph records {}".format(
                    result.shape, graph.edges[node.id].shape
                ),
            )
        if counters is not None:
            input_shapes = [i.shape for i in inputs]
            param_shapes = [p.shape for p in node_params]
            count_macs(node, input_shapes, param_shapes, counters)
        values[node.id] = result
        if observer is not None:
            observer(node.id, result)
        for edge_id in node.inputs:
            if uses[edge_id] == position and edge_id != graph.output:
                values.pop(edge_id, None)
    return values[graph.output]
