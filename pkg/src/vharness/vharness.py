import json
import logging
import os
import time
from collections import Counter, namedtuple

import numpy as np
import pandas as pd

from vcheckpoint import Checkpoint, inherit_weights, load_sbt, save_sbt
from vgraph import BC1N, GraphBuilder, OpKind, execute
from vquant import execute_quantized
from vrewrite import RewritePlan, layernorm_to_conv
from vtensor import DimensionError, Tensor, layernorm_ref

logger = logging.getLogger("vharness")

FLOWER_CLASSES = ("daisy", "dandelion", "roses", "sunflowers", "tulips")
RELATIVE_EPS = 1e-8


class HarnessError(Exception):
    pass


class FloatModel:
    """FP32 model: a graph of either dialect with its parameters."""

    def __init__(self, graph, params, name="FP32"):
        self.graph = graph
        self.params = params
        self.name = name

    @property
    def input_shape(self):
        return self.graph.input_shape

    def __call__(self, x, counters=None):
        return np.asarray(execute(self.graph, self.params, x, counters=counters).array)


class QuantizedModel:
    def __init__(self, qgraph, name="INT8"):
        self.qgraph = qgraph
        self.name = name

    @property
    def input_shape(self):
        return self.qgraph.input_shape

    def __call__(self, x, counters=None):
        return np.asarray(execute_quantized(self.qgraph, x, counters=counters).array)


def random_inputs(shape, n, seed):
    """Return n standard normal f32 tensors of the given shape."""
    rng = np.random.default_rng(seed)
    return [Tensor(rng.standard_normal(shape).astype(np.float32)) for _ in range(n)]


def predict(logits):
    """Class index of the largest logit of each row; ties go to the lowest index."""
    return np.argmax(np.atleast_2d(logits), axis=-1)


def top_k(logits, k):
    return np.argsort(-np.asarray(logits), kind="stable")[:k]


def sqnr(reference, test):
    """Signal to quantization noise ratio in dB."""
    reference = np.asarray(reference, dtype=np.float64)
    noise = np.sum((reference - np.asarray(test, dtype=np.float64)) ** 2)
    if noise == 0:
        return np.inf
    return float(10 * np.log10(np.sum(reference**2) / noise))


_EquivalenceReport = namedtuple(
    "_EquivalenceReport",
    [
        "mean_rel_error",
        "mean_abs_error",
        "max_abs_error",
        "agreement",
        "rtol",
        "atol",
        "samples",
        "passed",
    ],
)


class EquivalenceReport(_EquivalenceReport):
    __slots__ = ()

    @classmethod
    def from_outputs(cls, outputs_a, outputs_b, rtol, atol):
        a = np.asarray(outputs_a, dtype=np.float64)
        b = np.asarray(outputs_b, dtype=np.float64)
        difference = np.abs(a - b)
        mean_rel = float(np.mean(difference / (np.abs(a) + RELATIVE_EPS)))
        mean_abs = float(np.mean(difference))
        agreement = float(
            np.mean(
                np.argmax(a.reshape(len(a), -1), axis=-1)
                == np.argmax(b.reshape(len(b), -1), axis=-1)
            )
        )
        return cls(
            mean_rel,
            mean_abs,
            float(np.max(difference)),
            agreement,
            rtol,
            atol,
            len(a),
            bool(mean_rel <= rtol and mean_abs <= atol),
        )

    def to_dict(self):
        return dict(self._asdict())


def verify_equivalence(model_a, model_b, n_inputs=32, rtol=1e-2, atol=1e-3, seed=0):
    """Compare two models on n seeded random inputs.

    The relative error is |a - b| / (|a| + 1e-8), averaged over all outputs.
    The report passes if the mean relative error is at most rtol and the
    mean absolute error at most atol.
    """
    if tuple(model_a.input_shape) != tuple(model_b.input_shape):
        raise DimensionError(
            "The models take inputs of shapes {} and {}".format(
                model_a.input_shape, model_b.input_shape
            )
        )
    outputs_a, outputs_b = [], []
    for x in random_inputs(model_a.input_shape, n_inputs, seed):
        a, b = model_a(x), model_b(x)
        if a.shape != b.shape:
            raise DimensionError(
                "The models produce outputs of shapes {} and {}".format(
                    a.shape, b.shape
                )
            )
        outputs_a.append(a)
        outputs_b.append(b)
    report = EquivalenceReport.from_outputs(outputs_a, outputs_b, rtol, atol)
    logger.info(
        "Equivalence over {} inputs: mean rel {:.3g}, mean abs {:.3g}, {}".format(
            n_inputs,
            report.mean_rel_error,
            report.mean_abs_error,
            "passed" if report.passed else "failed",
        )
    )
    return report


def layernorm_graph(hidden, tokens, eps=1e-6):
    """Original-dialect graph of a single LayerNorm over (1, H, 1, N)."""
    builder = GraphBuilder((1, hidden, 1, tokens))
    builder.add_param("ln.gamma", (hidden,))
    builder.add_param("ln.beta", (hidden,))
    node = builder.add(
        "ln",
        OpKind.LAYER_NORM,
        [builder.input],
        {"dim": hidden, "eps": eps, "layout": BC1N},
        ["ln.gamma", "ln.beta"],
    )
    return builder.build(node)


def verify_layernorm(hidden, n_cases=100, tokens=5, eps=1e-6, rtol=1e-2, atol=1e-3,
                     seed=0):
    """Compare the convolution form of LayerNorm with layernorm_ref.

    Every case draws a new input, gamma and beta from N(0, 1).
    """
    lowered = layernorm_to_conv(layernorm_graph(hidden, tokens, eps))
    rng = np.random.default_rng(seed)
    expected, actual = [], []
    for _ in range(n_cases):
        x = rng.standard_normal((1, hidden, 1, tokens)).astype(np.float32)
        gamma = rng.standard_normal(hidden).astype(np.float32)
        beta = rng.standard_normal(hidden).astype(np.float32)
        source = Checkpoint({"ln.gamma": Tensor(gamma), "ln.beta": Tensor(beta)})
        params = inherit_weights(source, lowered, RewritePlan())
        actual.append(execute(lowered, params, Tensor(x)).array)
        tokens_last = Tensor(x.transpose(0, 2, 3, 1))
        reference = layernorm_ref(tokens_last, Tensor(gamma), Tensor(beta), eps)
        expected.append(reference.array.transpose(0, 3, 1, 2))
    return EquivalenceReport.from_outputs(expected, actual, rtol, atol)


class Dataset:
    """Labelled model inputs.

    ``samples`` is a list of (source, label) pairs, where source is either
    an SBT file path (relative to ``root``) or a Tensor.
    """

    def __init__(self, samples, class_names, root=""):
        self.samples = list(samples)
        self.class_names = list(class_names)
        self.root = root
        for source, label in self.samples:
            if not 0 <= label < len(self.class_names):
                raise HarnessError(
                    "Label {} of {!r} is not a valid class index (0-{})".format(
                        label, source, len(self.class_names) - 1
                    )
                )

    def __len__(self):
        return len(self.samples)

    def tensor(self, index):
        source = self.samples[index][0]
        if isinstance(source, Tensor):
            return source
        return load_sbt(os.path.join(self.root, source))

    def __iter__(self):
        shape = None
        for index, (_, label) in enumerate(self.samples):
            tensor = self.tensor(index)
            if shape is None:
                shape = tensor.shape
            elif tensor.shape != shape:
                raise HarnessError(
                    "Sample {} has shape {} but sample 0 has {}".format(
                        index, tensor.shape, shape
                    )
                )
            yield index, tensor, label

    @classmethod
    def load(cls, manifest_path):
        with open(manifest_path) as f:
            manifest = json.load(f)
        samples = [(s["tensor"], int(s["label"])) for s in manifest["samples"]]
        return cls(samples, manifest["classes"], os.path.dirname(manifest_path))

    def save(self, manifest_path):
        samples = []
        for source, label in self.samples:
            if isinstance(source, Tensor):
                raise HarnessError("Only file-backed datasets can be saved")
            samples.append({"tensor": source, "label": label})
        with open(manifest_path, "w") as f:
            json.dump(
                {"classes": self.class_names, "samples": samples},
                f,
                indent=1,
                sort_keys=True,
            )


def synthetic_class_names(num_classes=None, class_names=FLOWER_CLASSES):
    """The first num_classes of class_names, padded with "class_<i>" names."""
    names = list(class_names)
    if num_classes is None:
        return names
    return names[:num_classes] + [
        "class_{}".format(i) for i in range(len(names), num_classes)
    ]


def make_synthetic_dataset(directory, input_shape, per_class=4, seed=0,
                           class_names=FLOWER_CLASSES, num_classes=None):
    """Write a labelled dataset of random inputs with class-dependent means.

    Each class has its own per-channel mean; samples are that mean plus
    N(0, 1) noise. The tensors are written as SBT files next to a
    manifest.json. With ``num_classes`` the class table covers that many
    model outputs; only the classes named in ``class_names`` get samples.
    """
    os.makedirs(directory, exist_ok=True)
    rng = np.random.default_rng(seed)
    channels = input_shape[1]
    names = synthetic_class_names(num_classes, class_names)
    labelled = min(len(class_names), len(names))
    means = rng.normal(0.0, 0.5, size=(labelled, channels))
    samples = []
    for label in range(labelled):
        for _ in range(per_class):
            mean = means[label].reshape(1, channels, 1, 1)
            values = (rng.standard_normal(input_shape) + mean).astype(np.float32)
            filename = "sample_{:04d}.sbt".format(len(samples))
            save_sbt(Tensor(values), os.path.join(directory, filename))
            samples.append((filename, label))
    dataset = Dataset(samples, names, directory)
    dataset.save(os.path.join(directory, "manifest.json"))
    return dataset


def _latency_stats(times):
    series = pd.Series(times, dtype=float)
    return {
        "mean": float(series.mean()),
        "p50": float(series.quantile(0.5)),
        "p95": float(series.quantile(0.95)),
    }


class EvalResult:
    """Top-k accuracies (percent) with the per-sample prediction records."""

    def __init__(self, accuracy, records, latency=None):
        self.accuracy = dict(accuracy)
        self.records = list(records)
        self.latency = latency

    @property
    def top1(self):
        return self.accuracy[1]

    @property
    def top5(self):
        return self.accuracy[5]

    def to_dict(self):
        accuracy = sorted(self.accuracy.items())
        result = {
            "accuracy": {"top{}".format(k): v for k, v in accuracy},
            "records": self.records,
        }
        if self.latency is not None:
            result["latency"] = self.latency
        return result


def eval_topk(model, dataset, k_list=(1, 5), timing=False):
    """Top-k accuracy of model on dataset.

    A sample is correct for k if its label is among the k largest logits,
    ties being ranked by lowest class index.
    """
    if not len(dataset):
        raise HarnessError("The dataset is empty")
    k_max = max(k_list)
    correct = Counter()
    records = []
    times = []
    for index, x, label in dataset:
        start = time.perf_counter()
        logits = model(x)
        times.append(time.perf_counter() - start)
        ranking = top_k(logits.reshape(-1), k_max)
        for k in k_list:
            correct[k] += int(label in ranking[:k])
        records.append(
            {
                "sample": index,
                "label": label,
                "predicted": int(ranking[0]),
                "top5": [int(c) for c in ranking[:5]],
            }
        )
    accuracy = {k: 100.0 * correct[k] / len(dataset) for k in k_list}
    logger.info(
        "{}: {}".format(
            getattr(model, "name", "model"),
            ", ".join("top-{} {:.1f}%".format(k, v) for k, v in accuracy.items()),
        )
    )
    return EvalResult(accuracy, records, _latency_stats(times) if timing else None)


BenchResult = namedtuple("BenchResult", ["name", "mean", "p50", "p95", "runs", "macs"])


def bench(model, n_runs=10, warmup=5, seed=0):
    """Time n_runs inferences after warmup runs on a fixed random input.

    The multiply-accumulate counts of one inference are recorded in
    ``macs``.
    """
    if n_runs < 1:
        raise HarnessError("n_runs must be at least 1")
    x = random_inputs(model.input_shape, 1, seed)[0]
    for _ in range(warmup):
        model(x)
    times = []
    for _ in range(n_runs):
        start = time.perf_counter()
        model(x)
        times.append(time.perf_counter() - start)
    macs = Counter()
    model(x, counters=macs)
    stats = _latency_stats(times)
    return BenchResult(
        getattr(model, "name", "model"),
        stats["mean"],
        stats["p50"],
        stats["p95"],
        n_runs,
        dict(macs),
    )


def speedup_table(results):
    """Inference time table; speedups are relative to the first result."""
    baseline = results[0].mean
    return pd.DataFrame(
        {
            "Model Type": [r.name for r in results],
            "Inference Time (s)": [r.mean for r in results],
            "Speedup Factor": [
                baseline / r.mean if r.mean else np.inf for r in results
            ],
        }
    )


def mac_parity(results):
    """True if every result ran the same number of convolution MACs."""
    return len({r.macs.get("conv_macs", 0) for r in results}) == 1


def report_mismatches(model_a, model_b, dataset, names=("A", "B")):
    """Samples where a prediction differs from the label or the models disagree."""
    column_a = "Prediction {}".format(names[0])
    column_b = "Prediction {}".format(names[1])
    classes = dataset.class_names
    rows = []
    for index, x, label in dataset:
        logits_a, logits_b = model_a(x), model_b(x)
        for name, logits in zip(names, (logits_a, logits_b)):
            if logits.shape[-1] > len(classes):
                raise HarnessError(
                    "Model {} has {} output classes but the dataset names only "
                    "{}".format(name, logits.shape[-1], len(classes))
                )
        a = int(predict(logits_a)[0])
        b = int(predict(logits_b)[0])
        if a == label and b == label:
            continue
        rows.append(
            {
                "Sample": index,
                "Annotation": classes[label],
                column_a: classes[a],
                column_b: classes[b],
                "Models Differ": "yes" if a != b else "",
            }
        )
    return pd.DataFrame(
        rows, columns=["Sample", "Annotation", column_a, column_b, "Models Differ"]
    )


def accuracy_table(results):
    """Top-1/Top-5 of each (model name, EvalResult) pair."""
    return pd.DataFrame(
        {
            "Model": [name for name, _ in results],
            "Top-1 (%)": [r.top1 for _, r in results],
            "Top-5 (%)": [r.top5 for _, r in results],
        }
    )


def _with_drop(value, reference):
    return "{:.1f} ({:+.1f})".format(value, value - reference)


def accuracy_comparison_table(rows):
    """Top-1/Top-5 before and after quantization.

    ``rows`` is a list of (model name, FP32 EvalResult, INT8 EvalResult).
    """
    return pd.DataFrame(
        {
            "Model": [name for name, _, _ in rows],
            "Top-1 (%)": ["{:.1f}".format(fp.top1) for _, fp, _ in rows],
            "Top-5 (%)": ["{:.1f}".format(fp.top5) for _, fp, _ in rows],
            "Quantized Top-1 (%)": [_with_drop(q.top1, fp.top1) for _, fp, q in rows],
            "Quantized Top-5 (%)": [_with_drop(q.top5, fp.top5) for _, fp, q in rows],
        }
    )


def accuracy_drop_table(rows):
    return pd.DataFrame(
        {
            "Model": [name for name, _, _ in rows],
            "Full Precision (%)": [fp.top1 for _, fp, _ in rows],
            "Quantized (%)": [q.top1 for _, _, q in rows],
            "Accuracy Drop (%)": [fp.top1 - q.top1 for _, fp, q in rows],
        }
    )


def table_records(table):
    """JSON-ready list of rows of a report table."""
    return json.loads(table.to_json(orient="records"))
