import logging

import numpy as np

from vgraph import CONV_KINDS, MATMUL_KINDS, OpKind, execute
from vtensor import DType, Tensor, check_conv_geometry, im2col

logger = logging.getLogger("vquant")

QMAX = 127
HISTOGRAM_BINS = 2048
TARGET_BINS = 128
MINMAX = "minmax"
KL = "kl"
METHODS = (MINMAX, KL)
ACCUMULATOR_LIMIT = 2**31


class QuantError(Exception):
    pass


class CalibrationError(QuantError):
    pass


class CoverageError(QuantError, KeyError):
    def __init__(self, edge_id):
        self.edge_id = edge_id
        super().__init__(edge_id)

    def __str__(self):
        return "No calibration statistics for edge {!r}".format(self.edge_id)


class CapacityError(QuantError):
    pass


def round_half_away(values):
    values = np.asarray(values, dtype=np.float64)
    return np.sign(values) * np.floor(np.abs(values) + 0.5)


def _saturate(values):
    return np.clip(round_half_away(values), -QMAX, QMAX)


def is_ln_mean_conv(node):
    return node.kind == OpKind.CONV2D and node.attrs.get("role") == "ln_mean"


def int8_conv_nodes(graph, ln_conv_fp32=False):
    return [
        node
        for node in graph.nodes
        if node.kind in CONV_KINDS and not (ln_conv_fp32 and is_ln_mean_conv(node))
    ]


def quantized_edges(graph, ln_conv_fp32=False, int8_matmul=False):
    """Return, in topological order, the edges whose activations get a scale.

    These are the inputs and outputs of the int8 convolutions and, when
    ``int8_matmul`` is set, the operands of the attention matmuls.
    """
    wanted = set()
    for node in int8_conv_nodes(graph, ln_conv_fp32):
        wanted.add(node.inputs[0])
        wanted.add(node.id)
    if int8_matmul:
        for node in graph.nodes_of_kind(*MATMUL_KINDS):
            wanted.update(node.inputs)
    order = [graph.input] + [node.id for node in graph.nodes]
    return [edge_id for edge_id in order if edge_id in wanted]


class EdgeStats:
    """Running statistics of the values seen on one edge.

    ``hist`` counts |x| in ``bins`` equal bins over [0, amax], where amax is
    the largest |x| seen so far. When amax grows, the existing counts are
    moved to the bins that contain their old bin centres.
    """

    def __init__(self, bins=HISTOGRAM_BINS):
        self.min = np.inf
        self.max = -np.inf
        self.amax = 0.0
        self.hist = np.zeros(bins, dtype=np.int64)
        self.count = 0

    @classmethod
    def from_histogram(cls, hist, amax, min=None, max=None):
        result = cls(len(hist))
        result.hist = np.asarray(hist, dtype=np.int64).copy()
        result.amax = float(amax)
        result.min = -float(amax) if min is None else float(min)
        result.max = float(amax) if max is None else float(max)
        result.count = int(result.hist.sum())
        return result

    @property
    def bins(self):
        return len(self.hist)

    @property
    def degenerate(self):
        return self.count > 0 and max(abs(self.min), abs(self.max)) == 0

    def observe(self, values):
        values = np.asarray(values)
        if values.size == 0:
            return
        self.min = min(self.min, float(values.min()))
        self.max = max(self.max, float(values.max()))
        magnitudes = np.abs(values.astype(np.float64)).ravel()
        largest = float(magnitudes.max())
        if largest > self.amax:
            self._rebin(largest)
        if self.amax > 0:
            counts, _ = np.histogram(magnitudes, bins=self.bins, range=(0.0, self.amax))
        else:
            counts = np.zeros(self.bins, dtype=np.int64)
            counts[0] = magnitudes.size
        self.hist += counts
        self.count += magnitudes.size

    def _rebin(self, amax):
        if self.count:
            old_width = self.amax / self.bins
            centres = (np.arange(self.bins) + 0.5) * old_width
            index = (centres / (amax / self.bins)).astype(np.int64)
            index = np.minimum(index, self.bins - 1)
            hist = np.zeros(self.bins, dtype=np.int64)
            np.add.at(hist, index, self.hist)
            self.hist = hist
        self.amax = amax

    def to_dict(self):
        return {
            "min": self.min,
            "max": self.max,
            "amax": self.amax,
            "count": self.count,
            "hist": self.hist.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls.from_histogram(d["hist"], d["amax"], d["min"], d["max"])


class CalibStats(dict):
    """Mapping from edge id to EdgeStats, plus the number of samples seen."""

    def __init__(self, edges=(), bins=HISTOGRAM_BINS):
        super().__init__((edge_id, EdgeStats(bins)) for edge_id in edges)
        self.samples = 0

    def observer(self):
        def observe(edge_id, tensor):
            stats = self.get(edge_id)
            if stats is not None:
                stats.observe(tensor.array)

        return observe

    def to_dict(self):
        return {
            "samples": self.samples,
            "edges": {edge_id: stats.to_dict() for edge_id, stats in self.items()},
        }

    @classmethod
    def from_dict(cls, d):
        result = cls()
        for edge_id, stats in d["edges"].items():
            result[edge_id] = EdgeStats.from_dict(stats)
        result.samples = d["samples"]
        return result


def calibrate(graph, params, calib, ln_conv_fp32=False, int8_matmul=False,
              bins=HISTOGRAM_BINS):
    """Run graph in FP32 on every calibration input and gather statistics.

    Statistics are kept for the edges returned by quantized_edges. Samples
    are processed in the given order.
    """
    calib = list(calib)
    if not calib:
        raise CalibrationError("The calibration set is empty")
    stats = CalibStats(quantized_edges(graph, ln_conv_fp32, int8_matmul), bins)
    observer = stats.observer()
    for i, sample in enumerate(calib):
        execute(graph, params, sample, observer=observer)
        stats.samples += 1
        logger.debug("Calibration sample {}/{} done".format(i + 1, len(calib)))
    logger.info(
        "Calibrated {} edges over {} samples".format(len(stats), stats.samples)
    )
    return stats


def compute_scale_minmax(stats):
    """Symmetric scale max(|min|, |max|) / 127; 1.0 for an all-zero edge."""
    if stats.count == 0:
        raise CalibrationError("No values were observed")
    amax = max(abs(stats.min), abs(stats.max))
    if amax == 0:
        return 1.0
    return float(np.float32(amax / QMAX))


def _smooth(distribution, eps=1e-4):
    is_zero = distribution == 0
    zeros = int(is_zero.sum())
    nonzeros = distribution.size - zeros
    if not nonzeros:
        return None
    if not zeros:
        return distribution
    result = distribution + eps * is_zero - (eps * zeros / nonzeros) * ~is_zero
    if np.any(result <= 0):
        return None
    return result


def _kl_divergence(p, q):
    p = _smooth(p / p.sum())
    if q.sum() == 0:
        return np.inf
    q = _smooth(q / q.sum())
    if p is None or q is None:
        return np.inf
    return float(np.sum(p * np.log(p / q)))


def kl_candidate(hist, i, target_bins=TARGET_BINS):
    """Return (p, q) for clipping hist at bin i.

    p is the first i bins with the clipped mass added to the last of them;
    q is the unclipped slice merged into target_bins groups and expanded
    back uniformly over the nonzero bins of each group.
    """
    sliced = hist[:i].astype(np.float64)
    p = sliced.copy()
    p[i - 1] += hist[i:].sum()
    groups = (np.arange(i) * target_bins) // i
    nonzero = sliced != 0
    sums = np.bincount(groups, weights=sliced, minlength=target_bins)
    counts = np.bincount(
        groups, weights=nonzero.astype(np.float64), minlength=target_bins
    )
    q = np.where(nonzero, sums[groups] / np.maximum(counts[groups], 1), 0.0)
    return p, q


def compute_scale_kl(stats, target_bins=TARGET_BINS, stride=1):
    """Scale T / 127 for the clip threshold T of least KL divergence.

    Candidate thresholds are the histogram bin edges from target_bins bins
    upward (every ``stride`` bins, always including the full range). Ties go
    to the larger threshold.
    """
    hist = np.asarray(stats.hist)
    if hist.sum() == 0:
        raise CalibrationError("The histogram is empty")
    if stats.amax == 0:
        return 1.0
    bins = len(hist)
    if bins <= target_bins:
        return float(np.float32(stats.amax / QMAX))
    candidates = list(range(target_bins, bins + 1, stride))
    if candidates[-1] != bins:
        candidates.append(bins)
    best_i, best_kl = bins, np.inf
    for i in candidates:
        kl = _kl_divergence(*kl_candidate(hist, i, target_bins))
        if kl <= best_kl:
            best_i, best_kl = i, kl
    threshold = stats.amax if best_i == bins else best_i * stats.amax / bins
    logger.debug(
        "KL threshold {:.6g} of {:.6g} (bin {})".format(threshold, stats.amax, best_i)
    )
    return float(np.float32(threshold / QMAX))


def compute_scale(stats, method=MINMAX, kl_stride=1):
    if method == MINMAX:
        return compute_scale_minmax(stats)
    elif method == KL:
        return compute_scale_kl(stats, stride=kl_stride)
    raise ValueError("Unknown calibration method {!r}".format(method))


def quantize_array(values, scale):
    return _saturate(np.asarray(values, dtype=np.float64) / scale).astype(np.int8)


def quantize_tensor(x, scale):
    """q = clamp(round_half_away(x / scale), -127, 127) as an i8 tensor."""
    if not scale > 0:
        raise QuantError("Scale must be positive, not {}".format(scale))
    return Tensor.wrap(quantize_array(x.array, scale), DType.I8)


def dequantize(q, scale):
    if not scale > 0:
        raise QuantError("Scale must be positive, not {}".format(scale))
    return Tensor.wrap(
        (q.array.astype(np.float64) * scale).astype(np.float32), DType.F32
    )


def quantize_weight(w):
    """Quantize a Cout×... weight per output channel.

    Returns the i8 weight, the f32 per-channel scales and the indices of
    all-zero channels, whose scale is 1.0.
    """
    values = np.asarray(w.array, dtype=np.float64)
    cout = values.shape[0]
    flat = values.reshape(cout, -1)
    amax = np.abs(flat).max(axis=1)
    degenerate = np.flatnonzero(amax == 0)
    safe = np.where(amax == 0, 1.0, amax)
    quantized = _saturate(flat * (QMAX / safe)[:, None])
    scales = np.where(amax == 0, 1.0, amax / QMAX).astype(np.float32)
    return (
        Tensor.wrap(quantized.reshape(values.shape).astype(np.int8), DType.I8),
        scales,
        [int(c) for c in degenerate],
    )


def quantize_bias(bias, x_scale, w_scales, node_id=None):
    values = round_half_away(
        np.asarray(bias.array, dtype=np.float64)
        / (x_scale * np.asarray(w_scales, dtype=np.float64))
    )
    info = np.iinfo(np.int32)
    if values.min() < info.min or values.max() > info.max:
        raise CapacityError(
            "Quantized bias of {} does not fit in 32 bits".format(node_id or "conv")
        )
    return Tensor.wrap(values.astype(np.int32), DType.I32)


def check_capacity(node_id, contraction, bias_amax=0):
    """Raise CapacityError if contraction·127² + |bias| can leave 32 bits."""
    if contraction * QMAX * QMAX + int(bias_amax) >= ACCUMULATOR_LIMIT:
        raise CapacityError(
            "Node {!r}: {} products of int8 values{} may overflow the 32-bit "
            "accumulator".format(
                node_id, contraction, " plus the bias" if bias_amax else ""
            )
        )


class QuantizedConv:
    def __init__(self, weight, scales, bias, degenerate):
        self.weight = weight
        self.scales = scales
        self.bias = bias
        self.degenerate = degenerate


def quantize_weights(inherited, graph, act_scales, ln_conv_fp32=False):
    """Quantize the weights and biases of every int8 convolution of graph.

    Returns a dict from node id to QuantizedConv. Biases become i32 with
    scale s_x·s_w[c], s_x being the scale of the convolution's input edge.
    """
    result = {}
    for node in int8_conv_nodes(graph, ln_conv_fp32):
        weight, scales, degenerate = quantize_weight(inherited[node.param_names[0]])
        contraction = int(np.prod(weight.shape[1:]))
        check_capacity(node.id, contraction)
        bias = None
        if len(node.param_names) > 1:
            bias = quantize_bias(
                inherited[node.param_names[1]],
                act_scales[node.inputs[0]],
                scales,
                node.id,
            )
            bias_amax = np.abs(bias.array.astype(np.int64)).max()
            check_capacity(node.id, contraction, bias_amax)
        if degenerate:
            logger.warning(
                "Node {}: all-zero output channels {} get scale 1.0".format(
                    node.id, degenerate
                )
            )
        result[node.id] = QuantizedConv(weight, scales, bias, degenerate)
    return result


def requantize(acc, multiplier):
    """Scale an integer accumulator by a float64 multiplier back to int8."""
    return _saturate(np.asarray(acc, dtype=np.float64) * multiplier).astype(np.int8)


def conv2d_int8_acc(x, w, bias=None, stride=1):
    """Integer convolution returning the exact i32 accumulator (B×Cout×H'×W')."""
    if x.dtype is not DType.I8 or w.dtype is not DType.I8:
        raise TypeError("conv2d_int8 needs i8 input and weight")
    b, cout, ho, wo = check_conv_geometry(x.shape, w.shape, stride)
    kh, kw = w.shape[2:]
    check_capacity("conv2d_int8", int(np.prod(w.shape[1:])))
    cols = im2col(x.array.astype(np.int64), kh, kw, stride)
    acc = cols @ w.array.reshape(cout, -1).astype(np.int64).T
    if bias is not None:
        if bias.dtype is not DType.I32 or bias.shape != (cout,):
            raise TypeError("conv2d_int8 bias must be an i32 vector of length Cout")
        acc = acc + bias.array.astype(np.int64)
    info = np.iinfo(np.int32)
    if acc.min() < info.min or acc.max() > info.max:
        raise CapacityError("conv2d_int8: the accumulator left the 32-bit range")
    return acc.transpose(0, 3, 1, 2).astype(np.int32)


def conv2d_int8(x, w, bias, x_scale, w_scales, y_scale, stride=1):
    """Integer convolution with requantization to i8.

    y = clamp(round(acc[c] · s_x · s_w[c] / s_y), -127, 127), where acc is the
    exact integer sum of products plus the i32 bias.
    """
    acc = conv2d_int8_acc(x, w, bias, stride)
    multiplier = (
        float(x_scale) * np.asarray(w_scales, dtype=np.float64) / float(y_scale)
    )
    return Tensor.wrap(requantize(acc, multiplier[None, :, None, None]), DType.I8)


def conv2d_1x1_int8(x, w, bias, x_scale, w_scales, y_scale):
    if w.shape[2:] != (1, 1):
        raise TypeError("conv2d_1x1_int8 needs a 1×1 kernel, not {}".format(w.shape))
    return conv2d_int8(x, w, bias, x_scale, w_scales, y_scale, stride=1)


def matmul_int8(a, b, a_scale, b_scale, transpose_b=False):
    """Integer batched matmul of two i8 tensors with an f32 result."""
    if a.dtype is not DType.I8 or b.dtype is not DType.I8:
        raise TypeError("matmul_int8 needs i8 operands")
    right = b.array.astype(np.int64)
    if transpose_b:
        right = np.swapaxes(right, -1, -2)
    check_capacity("matmul_int8", a.shape[-1])
    acc = np.matmul(a.array.astype(np.int64), right)
    return Tensor.wrap(
        (acc.astype(np.float64) * (float(a_scale) * float(b_scale))).astype(np.float32),
        DType.F32,
    )
