import os
from tempfile import TemporaryDirectory
from unittest import TestCase

import numpy as np

from vcheckpoint import Checkpoint, init_checkpoint, inherit_weights
from vgraph import ModelConfig, build_deit, execute
from vharness import (
    FLOWER_CLASSES,
    Dataset,
    EquivalenceReport,
    EvalResult,
    FloatModel,
    HarnessError,
    QuantizedModel,
    accuracy_comparison_table,
    accuracy_drop_table,
    accuracy_table,
    bench,
    eval_topk,
    layernorm_graph,
    mac_parity,
    make_synthetic_dataset,
    predict,
    random_inputs,
    report_mismatches,
    speedup_table,
    sqnr,
    table_records,
    top_k,
    verify_equivalence,
    verify_layernorm,
)
from vquant import build_quantized, calibrate
from vrewrite import RewritePlan, layernorm_to_conv, lower
from vtensor import DimensionError, Tensor


class ConstantModel:
    """Returns the same logits whatever the input."""

    def __init__(self, logits, input_shape=(1, 3, 8, 8), name="constant"):
        self.logits = np.array([logits], dtype=np.float32)
        self.input_shape = input_shape
        self.name = name

    def __call__(self, x, counters=None):
        return self.logits


def toy_models(calibration_samples=8):
    original = build_deit(ModelConfig.from_variant("toy"))
    lowered, plan = lower(original)
    params = init_checkpoint(original, seed=0)
    inherited = inherit_weights(params, lowered, plan)
    calib = random_inputs(original.input_shape, calibration_samples, seed=1)
    stats = calibrate(lowered, inherited, calib, ln_conv_fp32=True)
    qg = build_quantized(lowered, inherited, stats, ln_conv_fp32=True)
    return (
        FloatModel(original, params, "DeiT"),
        FloatModel(lowered, inherited, "FP32"),
        QuantizedModel(qg, "INT8"),
    )


class HelpersTestCase(TestCase):
    def test_predict_ties_go_to_lowest_index(self):
        self.assertEqual(int(predict(np.array([0.1, 0.7, 0.7]))[0]), 1)

    def test_top_k_is_stable(self):
        np.testing.assert_array_equal(top_k([1.0, 2.0, 2.0, 0.0], 3), [1, 2, 0])

    def test_sqnr(self):
        self.assertAlmostEqual(sqnr([1.0, 1.0], [1.0, 0.0]), 10 * np.log10(2))

    def test_sqnr_identical(self):
        self.assertEqual(sqnr([1.0, 2.0], [1.0, 2.0]), np.inf)

    def test_random_inputs_are_seeded(self):
        a = random_inputs((1, 3, 8, 8), 2, seed=4)
        b = random_inputs((1, 3, 8, 8), 2, seed=4)
        self.assertTrue(all(x.bitwise_equal(y) for x, y in zip(a, b)))
        self.assertFalse(a[0].bitwise_equal(a[1]))


class EquivalenceReportTestCase(TestCase):
    def setUp(self):
        self.report = EquivalenceReport.from_outputs(
            [[[1.0, 2.0]]], [[[1.0, 2.5]]], rtol=0.2, atol=0.3
        )

    def test_errors(self):
        self.assertAlmostEqual(self.report.mean_rel_error, 0.125, places=6)
        self.assertAlmostEqual(self.report.mean_abs_error, 0.25)
        self.assertAlmostEqual(self.report.max_abs_error, 0.5)
        self.assertEqual(self.report.agreement, 1.0)

    def test_passed(self):
        self.assertTrue(self.report.passed)

    def test_failed(self):
        report = EquivalenceReport.from_outputs(
            [[[1.0, 2.0]]], [[[1.0, 2.5]]], rtol=0.1, atol=0.3
        )
        self.assertFalse(report.passed)

    def test_to_dict(self):
        self.assertEqual(self.report.to_dict()["samples"], 1)


class VerifyEquivalenceTestCase(TestCase):
    @classmethod
    def setUpClass(cls):
        cls.original, cls.lowered, cls.quantized = toy_models()

    def test_original_and_lowered_are_equivalent(self):
        report = verify_equivalence(self.original, self.lowered, n_inputs=32)
        self.assertTrue(report.passed)
        self.assertLessEqual(report.mean_rel_error, 1e-2)
        self.assertLessEqual(report.mean_abs_error, 1e-3)
        self.assertLessEqual(report.max_abs_error, 1e-4)
        self.assertEqual(report.agreement, 1.0)
        self.assertEqual(report.samples, 32)

    def test_quantized_is_not_exact(self):
        report = verify_equivalence(self.lowered, self.quantized, 4, rtol=0, atol=0)
        self.assertFalse(report.passed)

    def test_deterministic(self):
        a = verify_equivalence(self.original, self.lowered, 4, seed=9)
        b = verify_equivalence(self.original, self.lowered, 4, seed=9)
        self.assertEqual(a, b)

    def test_input_shape_mismatch(self):
        other = ConstantModel([0.0] * 10, input_shape=(1, 3, 16, 16))
        with self.assertRaises(DimensionError):
            verify_equivalence(self.original, other, 1)

    def test_output_shape_mismatch(self):
        other = ConstantModel([0.0] * 5)
        with self.assertRaises(DimensionError):
            verify_equivalence(self.original, other, 1)


class VerifyLayerNormTestCase(TestCase):
    def test_hidden_sizes(self):
        for hidden in (4, 64, 192):
            report = verify_layernorm(hidden, n_cases=100)
            self.assertTrue(report.passed, hidden)
            self.assertLessEqual(report.max_abs_error, 1e-5, hidden)
            self.assertEqual(report.samples, 100)

    def test_constant_input_gives_beta(self):
        rng = np.random.default_rng(3)
        for hidden in (64, 192, 768):
            lowered = layernorm_to_conv(layernorm_graph(hidden, 4))
            gamma = rng.standard_normal(hidden).astype(np.float32)
            beta = rng.standard_normal(hidden).astype(np.float32)
            source = Checkpoint(
                {"ln.gamma": Tensor(gamma), "ln.beta": Tensor(beta)}
            )
            params = inherit_weights(source, lowered, RewritePlan())
            expected = np.broadcast_to(
                beta.reshape(1, hidden, 1, 1), (1, hidden, 1, 4)
            )
            for c in (3.7, 123.456, -50.25):
                x = Tensor(np.full((1, hidden, 1, 4), c))
                y = execute(lowered, params, x)
                np.testing.assert_allclose(
                    y.array, expected, rtol=0, atol=1e-6,
                    err_msg="H={}, c={}".format(hidden, c),
                )


class DatasetTestCase(TestCase):
    def setUp(self):
        self.tempdir = TemporaryDirectory()
        self.dataset = make_synthetic_dataset(
            self.tempdir.name, (1, 3, 8, 8), per_class=2, seed=0
        )

    def tearDown(self):
        self.tempdir.cleanup()

    def test_length(self):
        self.assertEqual(len(self.dataset), 10)

    def test_classes(self):
        self.assertEqual(self.dataset.class_names, list(FLOWER_CLASSES))

    def test_class_table_covers_model_outputs(self):
        directory = os.path.join(self.tempdir.name, "wide")
        dataset = make_synthetic_dataset(
            directory, (1, 3, 8, 8), per_class=2, seed=0, num_classes=10
        )
        self.assertEqual(len(dataset.class_names), 10)
        self.assertEqual(dataset.class_names[:5], list(FLOWER_CLASSES))
        self.assertEqual(dataset.class_names[9], "class_9")
        self.assertEqual(len(dataset), 10)
        self.assertEqual({label for _, label in dataset.samples}, set(range(5)))

    def test_class_table_narrower_than_flowers(self):
        directory = os.path.join(self.tempdir.name, "narrow")
        dataset = make_synthetic_dataset(
            directory, (1, 3, 8, 8), per_class=2, seed=0, num_classes=3
        )
        self.assertEqual(dataset.class_names, ["daisy", "dandelion", "roses"])
        self.assertEqual(len(dataset), 6)

    def test_files(self):
        for filename in ("manifest.json", "sample_0009.sbt"):
            path = os.path.join(self.tempdir.name, filename)
            self.assertTrue(os.path.exists(path), filename)

    def test_load(self):
        dataset = Dataset.load(os.path.join(self.tempdir.name, "manifest.json"))
        self.assertEqual(dataset.samples, self.dataset.samples)
        _, x, label = list(dataset)[3]
        self.assertEqual(x.shape, (1, 3, 8, 8))
        self.assertEqual(label, 1)
        self.assertTrue(x.bitwise_equal(self.dataset.tensor(3)))

    def test_deterministic(self):
        with TemporaryDirectory() as other:
            dataset = make_synthetic_dataset(other, (1, 3, 8, 8), per_class=2, seed=0)
            self.assertTrue(dataset.tensor(7).bitwise_equal(self.dataset.tensor(7)))

    def test_bad_label(self):
        with self.assertRaises(HarnessError):
            Dataset([(Tensor(np.zeros((1, 3, 8, 8))), 5)], ["a", "b"])

    def test_inconsistent_shapes(self):
        dataset = Dataset(
            [(Tensor(np.zeros((1, 3, 8, 8))), 0), (Tensor(np.zeros((1, 3, 4, 4))), 1)],
            ["a", "b"],
        )
        with self.assertRaises(HarnessError):
            list(dataset)

    def test_in_memory_dataset_cannot_be_saved(self):
        dataset = Dataset([(Tensor(np.zeros((1, 3, 8, 8))), 0)], ["a"])
        with self.assertRaises(HarnessError):
            dataset.save(os.path.join(self.tempdir.name, "other.json"))


class EvalTestCase(TestCase):
    def setUp(self):
        x = Tensor(np.zeros((1, 3, 8, 8)))
        self.dataset = Dataset(
            [(x, label) for label in range(5) for _ in range(4)], FLOWER_CLASSES
        )
        self.model = ConstantModel([0.1, 0.5, 0.2, 0.4, 0.3])

    def test_top1(self):
        self.assertAlmostEqual(eval_topk(self.model, self.dataset).top1, 20.0)

    def test_top5(self):
        self.assertAlmostEqual(eval_topk(self.model, self.dataset).top5, 100.0)

    def test_top2(self):
        result = eval_topk(self.model, self.dataset, k_list=(1, 2))
        self.assertAlmostEqual(result.accuracy[2], 40.0)

    def test_records(self):
        record = eval_topk(self.model, self.dataset).records[0]
        self.assertEqual(
            record, {"sample": 0, "label": 0, "predicted": 1, "top5": [1, 3, 4, 2, 0]}
        )

    def test_timing(self):
        result = eval_topk(self.model, self.dataset, timing=True)
        self.assertEqual(set(result.latency), {"mean", "p50", "p95"})
        self.assertIsNone(eval_topk(self.model, self.dataset).latency)

    def test_empty_dataset(self):
        with self.assertRaises(HarnessError):
            eval_topk(self.model, Dataset([], ["a"]))


class ReportTestCase(TestCase):
    def setUp(self):
        self.dataset = Dataset(
            [(Tensor(np.zeros((1, 3, 8, 8))), label) for label in range(5)],
            FLOWER_CLASSES,
        )

    def test_mismatches_when_models_agree(self):
        model = ConstantModel([0.0, 1.0, 0.0, 0.0, 0.0])
        table = report_mismatches(model, model, self.dataset, ("FP32", "INT8"))
        self.assertEqual(
            list(table.columns),
            [
                "Sample",
                "Annotation",
                "Prediction FP32",
                "Prediction INT8",
                "Models Differ",
            ],
        )
        self.assertEqual(list(table["Sample"]), [0, 2, 3, 4])
        self.assertEqual(set(table["Prediction INT8"]), {"dandelion"})
        self.assertEqual(set(table["Models Differ"]), {""})

    def test_mismatches_when_models_differ(self):
        a = ConstantModel([0.0, 1.0, 0.0, 0.0, 0.0])
        b = ConstantModel([0.0, 0.0, 0.0, 1.0, 0.0])
        table = report_mismatches(a, b, self.dataset)
        self.assertEqual(len(table), 5)
        self.assertEqual(set(table["Models Differ"]), {"yes"})
        self.assertEqual(table.iloc[1]["Annotation"], "dandelion")

    def test_model_with_more_classes_than_dataset(self):
        narrow = ConstantModel([0.0, 1.0, 0.0, 0.0, 0.0])
        wide = ConstantModel([0.0] * 9 + [1.0])
        with self.assertRaisesRegex(HarnessError, "10 output classes"):
            report_mismatches(narrow, wide, self.dataset, ("FP32", "INT8"))

    def test_accuracy_comparison(self):
        fp = EvalResult({1: 81.8, 5: 95.6}, [])
        q = EvalResult({1: 80.4, 5: 95.1}, [])
        table = accuracy_comparison_table([("DeiT-Base", fp, q)])
        row = table_records(table)[0]
        self.assertEqual(row["Top-1 (%)"], "81.8")
        self.assertEqual(row["Quantized Top-1 (%)"], "80.4 (-1.4)")
        self.assertEqual(row["Quantized Top-5 (%)"], "95.1 (-0.5)")

    def test_accuracy_drop(self):
        fp = EvalResult({1: 90.0, 5: 99.0}, [])
        q = EvalResult({1: 89.0, 5: 99.0}, [])
        row = table_records(accuracy_drop_table([("DeiT-Tiny", fp, q)]))[0]
        self.assertEqual(row["Model"], "DeiT-Tiny")
        self.assertAlmostEqual(row["Accuracy Drop (%)"], 1.0)

    def test_accuracy_table(self):
        result = EvalResult({1: 50.0, 5: 75.0}, [])
        table = accuracy_table([("FP32", result)])
        self.assertEqual(list(table.columns), ["Model", "Top-1 (%)", "Top-5 (%)"])


class BenchTestCase(TestCase):
    @classmethod
    def setUpClass(cls):
        _, lowered, quantized = toy_models()
        cls.results = [
            bench(lowered, n_runs=3, warmup=1),
            bench(quantized, n_runs=3, warmup=1),
        ]

    def test_result(self):
        result = self.results[0]
        self.assertEqual(result.name, "FP32")
        self.assertEqual(result.runs, 3)
        self.assertGreater(result.mean, 0)
        self.assertLessEqual(result.p50, result.p95)

    def test_mac_parity(self):
        self.assertTrue(mac_parity(self.results))
        self.assertGreater(self.results[0].macs["conv_macs"], 0)

    def test_speedup_table(self):
        table = speedup_table(self.results)
        self.assertEqual(
            list(table.columns), ["Model Type", "Inference Time (s)", "Speedup Factor"]
        )
        self.assertEqual(list(table["Model Type"]), ["FP32", "INT8"])
        self.assertEqual(table["Speedup Factor"].iloc[0], 1.0)

    def test_runs_must_be_positive(self):
        with self.assertRaises(HarnessError):
            bench(ConstantModel([0.0]), n_runs=0)
