import json
import logging

from vgraph import (
    BC1N,
    BNC,
    LOWERED,
    ORIGINAL,
    ORIGINAL_ONLY_KINDS,
    Directive,
    GraphBuilder,
    GraphDimensionError,
    GraphError,
    OpKind,
    ParamSpec,
    validate,
)
from vtensor import TensorError

logger = logging.getLogger("vrewrite")

PASSES = ("layout_to_nchw", "attention_relayout", "linear_to_conv", "layernorm_to_conv")

# Nodes whose computation depends on the token-stream layout, apart from the
# per-head permutes handled by attention_relayout
_STREAM_KINDS = frozenset(
    {
        OpKind.LINEAR,
        OpKind.LAYER_NORM,
        OpKind.SLICE,
        OpKind.RESHAPE,
        OpKind.TOKEN_INSERT,
        OpKind.ADD_POS_EMBED,
        OpKind.HEAD,
    }
)


class RewriteError(Exception):
    pass


class PassOrderingError(RewriteError):
    pass


class DialectError(RewriteError):
    pass


class RewritePlan:
    """Record of a lowering: the passes run, in order, and the substitutions.

    ``applied`` maps every substituted node id of the input graph to the ids
    of the nodes that replace it; ``relayout`` lists the nodes whose layout
    attribute was switched to (B, C, 1, N).
    """

    def __init__(self, passes=(), applied=None, relayout=()):
        self.passes = list(passes)
        self.applied = dict(applied or {})
        self.relayout = list(relayout)

    def record(self, pass_name, applied=None, relayout=()):
        for old_id, new_ids in (applied or {}).items():
            if old_id in self.applied:
                raise RewriteError(
                    "{}: node {!r} was already substituted".format(pass_name, old_id)
                )
            self.applied[old_id] = list(new_ids)
        self.relayout.extend(relayout)
        self.passes.append(pass_name)

    def to_dict(self):
        return {
            "passes": list(self.passes),
            "applied": {k: list(v) for k, v in self.applied.items()},
            "relayout": list(self.relayout),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["passes"], d["applied"], d["relayout"])

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1)

    def __eq__(self, other):
        return isinstance(other, RewritePlan) and self.to_dict() == other.to_dict()

    def replay(self, graph):
        """Lower graph again and check that the same substitutions result."""
        lowered, plan = lower(graph)
        if plan != self:
            raise RewriteError("Replaying the plan produced different substitutions")
        return lowered


def _rebuild(graph, substitute):
    """Copy graph node by node, letting substitute replace nodes.

    substitute(builder, node, inputs) returns None to keep the node as it is,
    or (output_edge_id, new_node_ids). Parameters no longer used are dropped.
    """
    builder = GraphBuilder(
        graph.input_shape, graph.dialect, graph.input, params=graph.params
    )
    renamed = {graph.input: graph.input}
    applied = {}
    for node in graph.nodes:
        inputs = [renamed[edge_id] for edge_id in node.inputs]
        result = substitute(builder, node, inputs)
        if result is None:
            renamed[node.id] = builder.add(
                node.id,
                node.kind,
                inputs,
                node.attrs,
                node.param_names,
                dtype=graph.edges[node.id].dtype,
            )
        else:
            renamed[node.id], applied[node.id] = result
    used = {name for node in builder.nodes for name in node.param_names}
    builder.params = {
        name: spec for name, spec in builder.params.items() if name in used
    }
    return builder.build(renamed[graph.output]), applied


def _redeclare(builder, name, shape, directive):
    builder.params[name] = ParamSpec(tuple(shape), "f32", directive)


def _switch_layout(kinds):
    def substitute(builder, node, inputs):
        if node.kind not in kinds or node.attrs.get("layout") != BNC:
            return None
        attrs = dict(node.attrs, layout=BC1N)
        builder.add(node.id, node.kind, inputs, attrs, node.param_names)
        return node.id, [node.id]

    return substitute


def _is_head_permute(node):
    return node.kind == OpKind.PERMUTE and node.attrs.get("plan") in (
        "split-heads",
        "merge-heads",
    )


def _attention_relayout(graph):
    def substitute(builder, node, inputs):
        if not _is_head_permute(node):
            return None
        split = node.attrs["plan"] == "split-heads"
        if split and len(builder.edges[inputs[0]].shape) != 4:
            raise PassOrderingError(
                "Permute node {!r} reads a (B, N, C) stream; "
                "run layout_to_nchw first".format(node.id)
            )
        return _switch_layout({OpKind.PERMUTE})(builder, node, inputs)

    graph, switched = _rebuild(graph, substitute)
    return graph, list(switched)


def _layout_to_nchw(graph):
    if graph.dialect != ORIGINAL:
        raise DialectError("layout_to_nchw needs an original-dialect graph")
    switch_stream = _switch_layout(_STREAM_KINDS)
    switch_heads = _switch_layout({OpKind.PERMUTE})

    # Head permutes read the switched stream, so both move in one rebuild
    def substitute(builder, node, inputs):
        if _is_head_permute(node):
            return switch_heads(builder, node, inputs)
        return switch_stream(builder, node, inputs)

    graph, switched = _rebuild(graph, substitute)
    _check_valid(graph, "layout_to_nchw")
    heads = [node.id for node in graph.nodes if _is_head_permute(node)]
    switched_heads = [node_id for node_id in switched if node_id in heads]
    switched_stream = [node_id for node_id in switched if node_id not in heads]
    return graph, switched_stream, switched_heads


def layout_to_nchw(graph):
    """Move the token stream to the (B, C, 1, N) layout.

    The patch flattening becomes a pure reshape to (B, C, 1, N); token
    insertion, position embedding, LayerNorm, Linear, slices and the
    classifier head work on the channel axis 1 and the token axis 3, and the
    per-head attention permutes read and write (B, C, 1, N). A second
    application changes nothing.
    """
    return _layout_to_nchw(graph)[0]


def attention_relayout(graph):
    """Switch the per-head split/merge permutes to the (B, C, 1, N) layout."""
    return _attention_relayout(graph)[0]


def _linear_to_conv(graph):
    def substitute(builder, node, inputs):
        if node.kind != OpKind.LINEAR:
            return None
        if node.attrs["layout"] != BC1N:
            raise PassOrderingError(
                "Linear node {!r} reads activations in the {} layout; "
                "run layout_to_nchw first".format(node.id, node.attrs["layout"])
            )
        weight, bias = node.param_names
        out_features = node.attrs["out_features"]
        in_features = node.attrs["in_features"]
        _redeclare(
            builder,
            weight,
            (out_features, in_features, 1, 1),
            Directive("reshape", weight, None),
        )
        builder.add(
            node.id,
            OpKind.CONV2D,
            inputs,
            {
                "in_channels": in_features,
                "out_channels": out_features,
                "kernel": 1,
                "stride": 1,
            },
            [weight, bias],
        )
        return node.id, [node.id]

    graph, applied = _rebuild(graph, substitute)
    _check_valid(graph, "linear_to_conv")
    return graph, applied


def linear_to_conv(graph):
    """Replace every Linear(O×I) node with a 1×1 Conv2d with weight O×I×1×1."""
    return _linear_to_conv(graph)[0]


def _mean_conv(builder, node_id, x, channels, hidden):
    weight = node_id + ".w"
    fill = Directive("fill", None, 1.0 / hidden)
    _redeclare(builder, weight, (channels, channels, 1, 1), fill)
    return builder.add(
        node_id,
        OpKind.CONV2D,
        [x],
        {
            "in_channels": channels,
            "out_channels": channels,
            "kernel": 1,
            "stride": 1,
            "role": "ln_mean",
        },
        [weight],
    )


def _layernorm_to_conv(graph):
    def substitute(builder, node, inputs):
        if node.kind != OpKind.LAYER_NORM:
            return None
        if node.attrs["layout"] != BC1N:
            raise PassOrderingError(
                "LayerNorm node {!r} reads activations in the {} layout; "
                "run layout_to_nchw first".format(node.id, node.attrs["layout"])
            )
        x = inputs[0]
        hidden = node.attrs["dim"]
        channels = builder.edges[x].shape[1]
        if channels != hidden:
            raise GraphDimensionError(
                node.id,
                "channel axis is {} but the hidden dimension is {}".format(
                    channels, hidden
                ),
            )
        gamma, beta = node.param_names
        for name in (gamma, beta):
            reshape = Directive("reshape", name, None)
            _redeclare(builder, name, (1, channels, 1, 1), reshape)
        prefix = node.id + "."
        mean = _mean_conv(builder, prefix + "mean_conv_1", x, channels, hidden)
        centered = builder.add(prefix + "sub", OpKind.SUB, [x, mean])
        squared = builder.add(prefix + "square", OpKind.SQUARE, [centered])
        variance = _mean_conv(
            builder, prefix + "mean_conv_2", squared, channels, hidden
        )
        rsqrt = builder.add(
            prefix + "rsqrt", OpKind.RSQRT_EPS, [variance], {"eps": node.attrs["eps"]}
        )
        normalized = builder.add(prefix + "normalize", OpKind.MUL, [centered, rsqrt])
        scaled = builder.add(prefix + "scale", OpKind.MUL, [normalized], {}, [gamma])
        shifted = builder.add(prefix + "shift", OpKind.ADD, [scaled], {}, [beta])
        return shifted, [
            mean,
            centered,
            squared,
            variance,
            rsqrt,
            normalized,
            scaled,
            shifted,
        ]

    graph, applied = _rebuild(graph, substitute)
    _check_valid(graph, "layernorm_to_conv")
    return graph, applied


def layernorm_to_conv(graph):
    """Expand every LayerNorm node into its 1×1 convolution decomposition.

    y = (x - mean) * rsqrt(var + eps) * gamma + beta, where mean and var are
    computed by 1×1 convolutions whose weights are all 1/H, and gamma and beta
    are reshaped to 1×C×1×1.
    """
    return _layernorm_to_conv(graph)[0]


def _check_valid(graph, pass_name):
    diagnostics = validate(graph)
    if diagnostics:
        raise RewriteError(
            "{} produced an invalid graph: {}".format(
                pass_name, "; ".join(d.message for d in diagnostics[:5])
            )
        )


def _run_pass(pass_name, function, graph):
    try:
        return function(graph)
    except RewriteError as e:
        if str(e).startswith(pass_name):
            raise
        raise type(e)("{}: {}".format(pass_name, e)) from e
    except (GraphError, TensorError) as e:
        raise RewriteError("{}: {}".format(pass_name, e)) from e


def lower(graph):
    """Lower an original-dialect graph to the convolution-only dialect.

    Returns the lowered graph and the RewritePlan describing the lowering.
    """
    if graph.dialect == LOWERED:
        raise DialectError("dialect already lowered")
    diagnostics = validate(graph)
    if diagnostics:
        raise RewriteError(
            "Cannot lower an invalid graph: "
            + "; ".join(d.message for d in diagnostics[:5])
        )
    plan = RewritePlan()
    result, switched, switched_heads = _run_pass(
        "layout_to_nchw", _layout_to_nchw, graph
    )
    plan.record("layout_to_nchw", relayout=switched)
    plan.record("attention_relayout", relayout=switched_heads)
    result, applied = _run_pass("linear_to_conv", _linear_to_conv, result)
    plan.record("linear_to_conv", applied)
    logger.info("linear_to_conv replaced {} Linear nodes".format(len(applied)))
    result, applied = _run_pass("layernorm_to_conv", _layernorm_to_conv, result)
    plan.record("layernorm_to_conv", applied)
    logger.info("layernorm_to_conv expanded {} LayerNorm nodes".format(len(applied)))

    result = result.replace(dialect=LOWERED)
    leftovers = [node.id for node in result.nodes if node.kind in ORIGINAL_ONLY_KINDS]
    if leftovers:
        raise RewriteError("Nodes {} were not lowered".format(leftovers))
    if result.output_shape != graph.output_shape:
        raise RewriteError(
            "Lowering changed the output shape from {} to {}".format(
                graph.output_shape, result.output_shape
            )
        )
    _check_valid(result, "lower")
    return result, plan
