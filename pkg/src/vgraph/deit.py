import math
from collections import namedtuple

import numpy as np

from .vgraph import BNC, ConfigError, GraphBuilder, OpKind

VARIANTS = ("tiny", "small", "base", "custom")

_ModelConfig = namedtuple(
    "_ModelConfig",
    [
        "variant",
        "embed_dim",
        "heads",
        "depth",
        "patch",
        "img_size",
        "mlp_ratio",
        "distilled",
        "num_classes",
        "eps",
    ],
)


class ModelConfig(_ModelConfig):
    """Hyperparameters of a DeiT variant.

    The standard presets are the only dimensions consistent with the 5M, 22M
    and 86M parameter counts of DeiT-Tiny, -Small and -Base. "toy" is a custom
    configuration small enough for desk-scale tests.
    """

    __slots__ = ()

    presets = {
        "tiny": {"embed_dim": 192, "heads": 3},
        "small": {"embed_dim": 384, "heads": 6},
        "base": {"embed_dim": 768, "heads": 12},
        "toy": {
            "variant": "custom",
            "embed_dim": 64,
            "heads": 2,
            "depth": 2,
            "patch": 4,
            "img_size": 8,
            "num_classes": 10,
        },
    }

    def __new__(
        cls,
        variant="custom",
        embed_dim=192,
        heads=3,
        depth=12,
        patch=16,
        img_size=224,
        mlp_ratio=4.0,
        distilled=False,
        num_classes=1000,
        eps=1e-6,
    ):
        self = super().__new__(
            cls,
            variant,
            embed_dim,
            heads,
            depth,
            patch,
            img_size,
            mlp_ratio,
            distilled,
            num_classes,
            eps,
        )
        self.check()
        return self

    @classmethod
    def from_variant(cls, name, **overrides):
        """Create a config from a preset name such as "tiny" or "toy-dist"."""
        distilled = name.endswith("-dist")
        base_name = name[: -len("-dist")] if distilled else name
        try:
            values = {"variant": base_name, **cls.presets[base_name]}
        except KeyError:
            raise ConfigError(
                "Unknown model configuration {!r}; use one of {}".format(
                    name, ", ".join(cls.presets)
                )
            )
        values["distilled"] = distilled
        values.update(overrides)
        return cls(**values)

    def check(self):
        if self.variant not in VARIANTS:
            raise ConfigError("variant must be one of {}".format(", ".join(VARIANTS)))
        for name in ("embed_dim", "heads", "depth", "patch", "img_size", "num_classes"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool):
                raise ConfigError("{} must be an integer, not {!r}".format(name, value))
            if value < 1:
                raise ConfigError("{} must be positive, not {}".format(name, value))
        if self.embed_dim % self.heads:
            raise ConfigError(
                "embed_dim ({}) is not divisible by heads ({})".format(
                    self.embed_dim, self.heads
                )
            )
        if self.img_size % self.patch:
            raise ConfigError(
                "img_size ({}) is not divisible by patch ({})".format(
                    self.img_size, self.patch
                )
            )
        hidden = self.embed_dim * self.mlp_ratio
        if self.mlp_ratio <= 0 or hidden != int(hidden):
            raise ConfigError(
                "mlp_ratio ({}) must give an integer hidden size".format(self.mlp_ratio)
            )
        if not self.eps > 0:
            raise ConfigError("eps must be positive, not {}".format(self.eps))

    @property
    def head_dim(self):
        return self.embed_dim // self.heads

    @property
    def hidden_dim(self):
        return int(self.embed_dim * self.mlp_ratio)

    @property
    def grid(self):
        return self.img_size // self.patch

    @property
    def extra_tokens(self):
        return 2 if self.distilled else 1

    @property
    def num_tokens(self):
        return self.grid**2 + self.extra_tokens

    def input_shape(self, batch=1):
        return (batch, 3, self.img_size, self.img_size)


def _declare_params(builder, config):
    c = config.embed_dim
    p = config.patch
    builder.add_param("patch.w", (c, 3, p, p))
    builder.add_param("patch.b", (c,))
    builder.add_param("cls", (1, 1, c))
    if config.distilled:
        builder.add_param("dist", (1, 1, c))
    builder.add_param("pos", (1, config.num_tokens, c))
    for i in range(config.depth):
        blk = "blk{}".format(i)
        for ln in ("ln1", "ln2"):
            builder.add_param("{}.{}.gamma".format(blk, ln), (c,))
            builder.add_param("{}.{}.beta".format(blk, ln), (c,))
        for name, out_features, in_features in (
            ("attn.qkv", 3 * c, c),
            ("attn.proj", c, c),
            ("ffn.fc1", config.hidden_dim, c),
            ("ffn.fc2", c, config.hidden_dim),
        ):
            builder.add_param("{}.{}.w".format(blk, name), (out_features, in_features))
            builder.add_param("{}.{}.b".format(blk, name), (out_features,))
    builder.add_param("norm.gamma", (c,))
    builder.add_param("norm.beta", (c,))
    heads = ["head", "head_dist"] if config.distilled else ["head"]
    for head in heads:
        builder.add_param(head + ".w", (config.num_classes, c))
        builder.add_param(head + ".b", (config.num_classes,))


def _linear(builder, node_id, x, in_features, out_features):
    return builder.add(
        node_id,
        OpKind.LINEAR,
        [x],
        {"in_features": in_features, "out_features": out_features, "layout": BNC},
        [node_id + ".w", node_id + ".b"],
    )


def _layernorm(builder, node_id, x, config):
    return builder.add(
        node_id,
        OpKind.LAYER_NORM,
        [x],
        {"dim": config.embed_dim, "eps": config.eps, "layout": BNC},
        [node_id + ".gamma", node_id + ".beta"],
    )


def _attention(builder, blk, x, config):
    c = config.embed_dim
    prefix = blk + ".attn."
    qkv = _linear(builder, prefix + "qkv", x, c, 3 * c)
    parts = {}
    for i, name in enumerate("qkv"):
        parts[name] = builder.add(
            prefix + name,
            OpKind.SLICE,
            [qkv],
            {"axis": "channel", "start": i * c, "stop": (i + 1) * c, "layout": BNC},
        )
    parts["q"] = builder.add(
        prefix + "q_scaled",
        OpKind.MUL_SCALAR,
        [parts["q"]],
        {"scale": 1.0 / math.sqrt(config.head_dim)},
    )
    split = {}
    for name in "qkv":
        split[name] = builder.add(
            prefix + name + "_heads",
            OpKind.PERMUTE,
            [parts[name]],
            {"plan": "split-heads", "heads": config.heads, "layout": BNC},
        )
    scores = builder.add(prefix + "scores", OpKind.MATMUL_QK, [split["q"], split["k"]])
    probs = builder.add(prefix + "softmax", OpKind.SOFTMAX, [scores])
    context = builder.add(prefix + "context", OpKind.MATMUL_AV, [probs, split["v"]])
    merged = builder.add(
        prefix + "merge",
        OpKind.PERMUTE,
        [context],
        {"plan": "merge-heads", "heads": config.heads, "layout": BNC},
    )
    return _linear(builder, prefix + "proj", merged, c, c)


def _block(builder, i, x, config):
    blk = "blk{}".format(i)
    c = config.embed_dim
    h = _layernorm(builder, blk + ".ln1", x, config)
    h = _attention(builder, blk, h, config)
    x = builder.add(blk + ".residual1", OpKind.ADD, [x, h])
    h = _layernorm(builder, blk + ".ln2", x, config)
    h = _linear(builder, blk + ".ffn.fc1", h, c, config.hidden_dim)
    h = builder.add(blk + ".ffn.gelu", OpKind.GELU, [h])
    h = _linear(builder, blk + ".ffn.fc2", h, config.hidden_dim, c)
    return builder.add(blk + ".residual2", OpKind.ADD, [x, h])


def _classifier(builder, x, config, head, token):
    token_id = builder.add(
        head + "_token",
        OpKind.SLICE,
        [x],
        {"axis": "token", "start": token, "stop": token + 1, "layout": BNC},
    )
    logits = _linear(builder, head, token_id, config.embed_dim, config.num_classes)
    return builder.add(head + "_logits", OpKind.HEAD, [logits], {"layout": BNC})


def build_deit(config, batch=1):
    """Build the original-dialect graph of a DeiT model."""
    config.check()
    builder = GraphBuilder(config.input_shape(batch))
    _declare_params(builder, config)
    x = builder.add(
        "patch",
        OpKind.PATCH_EMBED,
        [builder.input],
        {"patch": config.patch, "embed_dim": config.embed_dim},
        ["patch.w", "patch.b"],
    )
    x = builder.add(
        "patch_flatten", OpKind.RESHAPE, [x], {"plan": "flatten-patches", "layout": BNC}
    )
    tokens = ["cls", "dist"] if config.distilled else ["cls"]
    x = builder.add(
        "tokens",
        OpKind.TOKEN_INSERT,
        [x],
        {"count": len(tokens), "layout": BNC},
        tokens,
    )
    x = builder.add("pos_embed", OpKind.ADD_POS_EMBED, [x], {"layout": BNC}, ["pos"])
    for i in range(config.depth):
        x = _block(builder, i, x, config)
    x = _layernorm(builder, "norm", x, config)
    logits = _classifier(builder, x, config, "head", 0)
    if config.distilled:
        dist_logits = _classifier(builder, x, config, "head_dist", 1)
        total = builder.add("head_sum", OpKind.ADD, [logits, dist_logits])
        logits = builder.add("head_mean", OpKind.MUL_SCALAR, [total], {"scale": 0.5})
    return builder.build(logits)


def param_count(config):
    graph = build_deit(config)
    return sum(int(np.prod(spec.shape)) for spec in graph.params.values())
