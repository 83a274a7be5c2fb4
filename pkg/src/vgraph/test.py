import math

import numpy as np

from vtensor import Tensor

_erf = np.vectorize(math.erf, otypes=[np.float64])


def random_input(config, seed, batch=1):
    """Return a standard normal input tensor for the given model config."""
    rng = np.random.default_rng(seed)
    return Tensor(rng.standard_normal(config.input_shape(batch)).astype(np.float32))


def reference_forward(config, params, x):
    """Straight-line DeiT forward pass in float64, independent of the graph.

    ``params`` maps the checkpoint parameter names to tensors and ``x`` is the
    input tensor; the logits are returned as a numpy array.
    """

    def p(name):
        return np.asarray(params[name].array, dtype=np.float64)

    def layernorm(t, prefix):
        mean = t.mean(axis=-1, keepdims=True)
        var = ((t - mean) ** 2).mean(axis=-1, keepdims=True)
        return (t - mean) / np.sqrt(var + config.eps) * p(prefix + ".gamma") + p(
            prefix + ".beta"
        )

    def linear(t, prefix):
        return t @ p(prefix + ".w").T + p(prefix + ".b")

    def softmax(t):
        e = np.exp(t - t.max(axis=-1, keepdims=True))
        return e / e.sum(axis=-1, keepdims=True)

    values = np.asarray(x.array, dtype=np.float64)
    b = values.shape[0]
    g = config.grid
    size = config.patch
    c = config.embed_dim
    heads = config.heads
    d = config.head_dim

    patches = (
        values.reshape(b, 3, g, size, g, size)
        .transpose(0, 2, 4, 1, 3, 5)
        .reshape(b, g * g, 3 * size * size)
    )
    t = patches @ p("patch.w").reshape(c, -1).T + p("patch.b")
    tokens = [np.broadcast_to(p("cls"), (b, 1, c))]
    if config.distilled:
        tokens.append(np.broadcast_to(p("dist"), (b, 1, c)))
    t = np.concatenate(tokens + [t], axis=1) + p("pos")
    n = t.shape[1]

    for i in range(config.depth):
        blk = "blk{}".format(i)
        h = linear(layernorm(t, blk + ".ln1"), blk + ".attn.qkv")
        q, k, v = (
            h[:, :, j * c : (j + 1) * c].reshape(b, n, heads, d).transpose(0, 2, 1, 3)
            for j in range(3)
        )
        attention = softmax((q / math.sqrt(d)) @ k.transpose(0, 1, 3, 2))
        context = (attention @ v).transpose(0, 2, 1, 3).reshape(b, n, c)
        t = t + linear(context, blk + ".attn.proj")
        h = linear(layernorm(t, blk + ".ln2"), blk + ".ffn.fc1")
        h = 0.5 * h * (1.0 + _erf(h / math.sqrt(2.0)))
        t = t + linear(h, blk + ".ffn.fc2")

    t = layernorm(t, "norm")
    logits = linear(t[:, 0], "head")
    if config.distilled:
        logits = (logits + linear(t[:, 1], "head_dist")) / 2
    return logits
