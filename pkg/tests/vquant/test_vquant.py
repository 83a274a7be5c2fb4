import json
import math
from unittest import TestCase

import numpy as np

from vcheckpoint import init_checkpoint, inherit_weights
from vgraph import ModelConfig, build_deit
from vharness import random_inputs
from vquant import (
    HISTOGRAM_BINS,
    KL,
    MINMAX,
    CalibrationError,
    CalibStats,
    CapacityError,
    EdgeStats,
    QuantError,
    calibrate,
    check_capacity,
    compute_scale,
    compute_scale_kl,
    compute_scale_minmax,
    conv2d_1x1_int8,
    conv2d_int8,
    conv2d_int8_acc,
    dequantize,
    int8_conv_nodes,
    matmul_int8,
    quantize_bias,
    quantize_tensor,
    quantize_weight,
    quantized_edges,
    requantize,
    round_half_away,
)
from vrewrite import lower
from vtensor import DType, Tensor


def naive_round(value):
    return int(math.copysign(math.floor(abs(value) + 0.5), value))


def naive_conv_acc(x, w, bias, stride):
    _, cin, h, width = x.shape
    cout, _, k, _ = w.shape
    ho = (h - k) // stride + 1
    wo = (width - k) // stride + 1
    acc = np.zeros((1, cout, ho, wo), dtype=np.int64)
    for o in range(cout):
        for i in range(ho):
            for j in range(wo):
                rows = slice(i * stride, i * stride + k)
                cols = slice(j * stride, j * stride + k)
                window = x[0, :, rows, cols]
                acc[0, o, i, j] = int(
                    np.sum(window.astype(np.int64) * w[o].astype(np.int64))
                ) + int(bias[o])
    return acc


def naive_kl_sweep(hist, target_bins=128):
    """Divergence of every clip threshold, computed bin by bin."""

    def smooth(d, eps=1e-4):
        zeros = int(np.sum(d == 0))
        nonzeros = len(d) - zeros
        if not nonzeros:
            return None
        result = np.where(d == 0, eps, d - eps * zeros / nonzeros)
        return None if np.any(result <= 0) else result

    bins = len(hist)
    result = {}
    for i in range(target_bins, bins + 1):
        p = hist[:i].astype(np.float64)
        p[i - 1] += hist[i:].sum()
        q = np.zeros(i)
        for j in range(target_bins):
            start = -(-j * i // target_bins)
            stop = -(-(j + 1) * i // target_bins)
            group = hist[start:stop]
            nonzero = group != 0
            if nonzero.any():
                q[start:stop][nonzero] = group.sum() / nonzero.sum()
        if q.sum() == 0:
            result[i] = np.inf
            continue
        ps = smooth(p / p.sum())
        qs = smooth(q / q.sum())
        if ps is None or qs is None:
            result[i] = np.inf
            continue
        result[i] = float(np.sum(ps * np.log(ps / qs)))
    return result


def outlier_stats():
    rng = np.random.default_rng(11)
    values = np.concatenate([rng.standard_normal(10000), [20.0] * 5, [-20.0] * 5])
    stats = EdgeStats()
    stats.observe(values)
    return stats


class RoundingTestCase(TestCase):
    def test_half_away_from_zero(self):
        np.testing.assert_array_equal(
            round_half_away([0.5, -0.5, 1.5, -2.5, 0.49, -0.51]), [1, -1, 2, -3, 0, -1]
        )


class QuantizeTensorTestCase(TestCase):
    def test_saturation_edges(self):
        x = Tensor([63.5, 63.75, -64.0, 0.25, -0.25, 1000.0])
        np.testing.assert_array_equal(
            quantize_tensor(x, 0.5).array, [127, 127, -127, 1, -1, 127]
        )

    def test_never_minus_128(self):
        q = quantize_tensor(Tensor([-1e6]), 1.0)
        self.assertEqual(int(q.array[0]), -127)

    def test_dtype(self):
        self.assertIs(quantize_tensor(Tensor([1.0]), 1.0).dtype, DType.I8)

    def test_round_trip_error(self):
        rng = np.random.default_rng(0)
        for scale in np.geomspace(1e-3, 10, 10):
            x = rng.uniform(-127 * scale, 127 * scale, 10000).astype(np.float32)
            y = dequantize(quantize_tensor(Tensor(x), scale), scale).array
            error = np.abs(x.astype(np.float64) - y.astype(np.float64))
            # y is stored as f32, which adds at most half an ulp of 127 * scale
            self.assertLessEqual(error.max(), scale / 2 + 127 * scale * 2.0**-24)

    def test_bad_scale(self):
        with self.assertRaises(QuantError):
            quantize_tensor(Tensor([1.0]), 0.0)
        with self.assertRaises(QuantError):
            dequantize(Tensor(np.array([1], dtype=np.int8)), -1.0)


class MinMaxTestCase(TestCase):
    def test_scale(self):
        stats = EdgeStats()
        stats.observe(np.array([-3.0, 1.27, 0.5]))
        self.assertEqual(compute_scale_minmax(stats), float(np.float32(3.0 / 127)))

    def test_positive_side(self):
        stats = EdgeStats()
        stats.observe(np.array([-0.5, 2.54]))
        self.assertEqual(compute_scale_minmax(stats), float(np.float32(0.02)))

    def test_all_zero(self):
        stats = EdgeStats()
        stats.observe(np.zeros(10))
        self.assertTrue(stats.degenerate)
        self.assertEqual(compute_scale_minmax(stats), 1.0)
        self.assertEqual(compute_scale_kl(stats), 1.0)

    def test_nothing_observed(self):
        with self.assertRaises(CalibrationError):
            compute_scale_minmax(EdgeStats())

    def test_unknown_method(self):
        stats = EdgeStats()
        stats.observe(np.ones(3))
        with self.assertRaises(ValueError):
            compute_scale(stats, "percentile")


class EdgeStatsTestCase(TestCase):
    def test_histogram(self):
        stats = EdgeStats()
        stats.observe(np.array([-1.0, 0.0, 1.0]))
        self.assertEqual(stats.amax, 1.0)
        self.assertEqual(stats.hist[0], 1)
        self.assertEqual(stats.hist[-1], 2)
        self.assertEqual(stats.count, 3)

    def test_rebinning(self):
        stats = EdgeStats()
        stats.observe(np.array([1.0]))
        stats.observe(np.array([2.0]))
        self.assertEqual(stats.amax, 2.0)
        self.assertEqual(stats.hist[1023], 1)
        self.assertEqual(stats.hist[2047], 1)
        self.assertEqual(stats.hist.sum(), 2)

    def test_min_max(self):
        stats = EdgeStats()
        stats.observe(np.array([0.5, 2.0]))
        stats.observe(np.array([-1.0]))
        self.assertEqual((stats.min, stats.max), (-1.0, 2.0))

    def test_dict_round_trip(self):
        stats = outlier_stats()
        other = EdgeStats.from_dict(json.loads(json.dumps(stats.to_dict())))
        np.testing.assert_array_equal(other.hist, stats.hist)
        self.assertEqual(
            (other.min, other.max, other.amax, other.count),
            (stats.min, stats.max, stats.amax, stats.count),
        )


class KlTestCase(TestCase):
    def test_uniform_histogram_equals_minmax(self):
        stats = EdgeStats.from_histogram(np.ones(HISTOGRAM_BINS), 2.0)
        self.assertAlmostEqual(
            compute_scale_kl(stats), compute_scale_minmax(stats), delta=1e-6
        )

    def test_mass_in_last_bin_equals_minmax(self):
        stats = EdgeStats()
        stats.observe(np.array([1.0, -1.0] * 50))
        self.assertAlmostEqual(
            compute_scale_kl(stats), compute_scale_minmax(stats), delta=1e-6
        )

    def test_outliers_are_clipped(self):
        stats = outlier_stats()
        self.assertLess(compute_scale_kl(stats), compute_scale_minmax(stats))

    def test_never_larger_than_minmax(self):
        rng = np.random.default_rng(5)
        for data in (
            rng.standard_normal(5000),
            rng.laplace(size=5000),
            rng.uniform(-1, 1, 5000),
            rng.exponential(size=5000),
        ):
            stats = EdgeStats()
            stats.observe(data)
            self.assertLessEqual(
                compute_scale_kl(stats), compute_scale_minmax(stats) * (1 + 1e-6)
            )

    def test_matches_brute_force_sweep(self):
        stats = outlier_stats()
        divergences = naive_kl_sweep(stats.hist)
        best = min(divergences.values())
        acceptable = [
            float(np.float32((stats.amax if i == HISTOGRAM_BINS
                              else i * stats.amax / HISTOGRAM_BINS) / 127))
            for i, kl in divergences.items()
            if kl <= best + 1e-9
        ]
        self.assertIn(compute_scale_kl(stats), acceptable)

    def test_stride(self):
        stats = outlier_stats()
        scale = compute_scale_kl(stats, stride=16)
        self.assertLess(scale, compute_scale_minmax(stats))
        self.assertEqual(compute_scale(stats, KL, kl_stride=16), scale)

    def test_empty_histogram(self):
        with self.assertRaises(CalibrationError):
            compute_scale_kl(EdgeStats.from_histogram(np.zeros(HISTOGRAM_BINS), 1.0))


class QuantizeWeightTestCase(TestCase):
    def test_per_channel(self):
        w = Tensor(np.array([[1.0, -0.5], [0.02, 0.005]]).reshape(2, 2, 1, 1))
        q, scales, degenerate = quantize_weight(w)
        np.testing.assert_array_equal(q.array.reshape(2, 2), [[127, -64], [127, 32]])
        np.testing.assert_allclose(scales, [1 / 127, 0.02 / 127], rtol=1e-6)
        self.assertEqual(degenerate, [])

    def test_zero_channel(self):
        w = Tensor(np.array([[0.0, 0.0], [1.0, 2.0]]))
        q, scales, degenerate = quantize_weight(w)
        self.assertEqual(degenerate, [0])
        self.assertEqual(scales[0], 1.0)
        np.testing.assert_array_equal(q.array[0], [0, 0])

    def test_bias(self):
        bias = quantize_bias(Tensor([0.5, -0.3]), 0.1, [0.01, 0.02])
        self.assertIs(bias.dtype, DType.I32)
        np.testing.assert_array_equal(bias.array, [500, -150])

    def test_bias_overflow(self):
        with self.assertRaises(CapacityError):
            quantize_bias(Tensor([1e6]), 1e-3, [1e-3])

    def test_capacity(self):
        check_capacity("fc", 133144)
        with self.assertRaises(CapacityError):
            check_capacity("fc", 133145)

    def test_capacity_with_bias(self):
        check_capacity("fc", 4, 1000)
        with self.assertRaisesRegex(CapacityError, "plus the bias"):
            check_capacity("fc", 4, 2**31 - 1000)


class Int8KernelTestCase(TestCase):
    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(1000):
            cin = int(rng.integers(1, 65))
            cout = int(rng.integers(1, 5))
            k = int(rng.integers(1, 3))
            stride = int(rng.integers(1, 3))
            size = k + stride * int(rng.integers(0, (8 - k) // stride + 1))
            x = rng.integers(-127, 128, size=(1, cin, size, size)).astype(np.int8)
            w = rng.integers(-127, 128, size=(cout, cin, k, k)).astype(np.int8)
            bias = rng.integers(-10000, 10000, size=cout).astype(np.int32)
            x_scale = float(rng.uniform(0.001, 0.1))
            w_scales = rng.uniform(0.001, 0.1, size=cout).astype(np.float32)
            y_scale = float(rng.uniform(0.01, 1.0))

            expected_acc = naive_conv_acc(x, w, bias, stride)
            acc = conv2d_int8_acc(Tensor(x), Tensor(w), Tensor(bias), stride)
            np.testing.assert_array_equal(acc, expected_acc)

            y = conv2d_int8(
                Tensor(x), Tensor(w), Tensor(bias), x_scale, w_scales, y_scale, stride
            )
            expected = np.vectorize(naive_round)(
                expected_acc
                * (x_scale * w_scales.astype(np.float64) / y_scale)[None, :, None, None]
            )
            np.testing.assert_array_equal(y.array, np.clip(expected, -127, 127))

    def test_accumulator_overflow(self):
        x = Tensor(np.full((1, 4, 1, 1), 127, dtype=np.int8))
        w = Tensor(np.full((1, 4, 1, 1), 127, dtype=np.int8))
        with self.assertRaises(CapacityError):
            conv2d_int8_acc(x, w, Tensor(np.array([2**31 - 1000], dtype=np.int32)))
        with self.assertRaises(CapacityError):
            conv2d_int8_acc(
                Tensor(np.negative(x.array)), w, Tensor(np.array([-(2**31)], np.int32))
            )

    def test_accumulator_at_limit(self):
        x = Tensor(np.full((1, 4, 1, 1), 127, dtype=np.int8))
        w = Tensor(np.full((1, 4, 1, 1), 127, dtype=np.int8))
        bias = Tensor(np.array([2**31 - 1 - 4 * 127 * 127], dtype=np.int32))
        acc = conv2d_int8_acc(x, w, bias)
        self.assertEqual(int(acc[0, 0, 0, 0]), 2**31 - 1)

    def test_1x1(self):
        x = Tensor(np.array([1, 2, 3, 4], dtype=np.int8).reshape(1, 2, 1, 2))
        w = Tensor(np.array([1, -1], dtype=np.int8).reshape(1, 2, 1, 1))
        y = conv2d_1x1_int8(x, w, None, 1.0, [1.0], 1.0)
        np.testing.assert_array_equal(y.array.reshape(-1), [-2, -2])

    def test_1x1_rejects_larger_kernel(self):
        w = Tensor(np.zeros((1, 1, 2, 2), dtype=np.int8))
        with self.assertRaises(TypeError):
            conv2d_1x1_int8(Tensor(np.zeros((1, 1, 2, 2), dtype=np.int8)), w, None,
                            1.0, [1.0], 1.0)

    def test_rejects_float_input(self):
        with self.assertRaises(TypeError):
            conv2d_int8_acc(
                Tensor(np.zeros((1, 1, 1, 1))), Tensor(np.zeros((1, 1, 1, 1), np.int8))
            )

    def test_requantize(self):
        np.testing.assert_array_equal(
            requantize(np.array([254, -255, 100, 1]), 0.5), [127, -127, 50, 1]
        )

    def test_matmul(self):
        a = Tensor(np.array([[1, 2]], dtype=np.int8))
        b = Tensor(np.array([[3], [4]], dtype=np.int8))
        y = matmul_int8(a, b, 0.5, 0.25)
        self.assertIs(y.dtype, DType.F32)
        np.testing.assert_array_equal(y.array, [[1.375]])

    def test_matmul_transposed(self):
        a = Tensor(np.array([[1, 2]], dtype=np.int8))
        b = Tensor(np.array([[3, 4]], dtype=np.int8))
        y = matmul_int8(a, b, 1.0, 1.0, transpose_b=True)
        np.testing.assert_array_equal(y.array, [[11.0]])


class CalibrateTestCase(TestCase):
    @classmethod
    def setUpClass(cls):
        original = build_deit(ModelConfig.from_variant("toy"))
        cls.lowered, plan = lower(original)
        cls.params = inherit_weights(init_checkpoint(original, 0), cls.lowered, plan)
        cls.calib = random_inputs(original.input_shape, 4, seed=1)
        cls.stats = calibrate(cls.lowered, cls.params, cls.calib)

    def test_edges(self):
        self.assertEqual(list(self.stats), quantized_edges(self.lowered))

    def test_samples(self):
        self.assertEqual(self.stats.samples, 4)

    def test_counts(self):
        self.assertEqual(self.stats["input"].count, 4 * 3 * 8 * 8)

    def test_includes_mean_convs(self):
        self.assertIn("blk0.ln1.mean_conv_1", self.stats)

    def test_ln_conv_fp32_skips_mean_convs(self):
        edges = quantized_edges(self.lowered, ln_conv_fp32=True)
        self.assertNotIn("blk0.ln1.mean_conv_1", edges)
        self.assertEqual(
            len(int8_conv_nodes(self.lowered, ln_conv_fp32=True)),
            len(int8_conv_nodes(self.lowered)) - 10,
        )

    def test_int8_matmul_edges(self):
        edges = quantized_edges(self.lowered, int8_matmul=True)
        self.assertIn("blk0.attn.softmax", edges)
        self.assertIn("blk0.attn.k_heads", edges)

    def test_deterministic(self):
        stats = calibrate(self.lowered, self.params, self.calib)
        self.assertEqual(stats.to_dict(), self.stats.to_dict())

    def test_dict_round_trip(self):
        stats = CalibStats.from_dict(json.loads(json.dumps(self.stats.to_dict())))
        self.assertEqual(stats.to_dict(), self.stats.to_dict())

    def test_empty_set(self):
        with self.assertRaises(CalibrationError):
            calibrate(self.lowered, self.params, [])

    def test_minmax_scales_are_positive(self):
        for stats in self.stats.values():
            self.assertGreater(compute_scale(stats, MINMAX), 0)
