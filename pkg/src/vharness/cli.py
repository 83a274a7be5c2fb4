import configparser
import datetime as dt
import functools
import json
import logging
import os
import sys
import traceback

import click

from deitconv._version import __version__
from vcheckpoint import (
    init_checkpoint,
    inherit_weights,
    load_checkpoint,
    save_checkpoint,
)
from vgraph import ConfigError, ModelConfig, build_deit, param_count
from vquant import METHODS, MINMAX, build_quantized, calibrate, save_quantized
from vrewrite import lower

from .vharness import (
    Dataset,
    FloatModel,
    QuantizedModel,
    accuracy_comparison_table,
    accuracy_drop_table,
    accuracy_table,
    bench,
    eval_topk,
    mac_parity,
    make_synthetic_dataset,
    random_inputs,
    report_mismatches,
    speedup_table,
    table_records,
    verify_equivalence,
)

LOGGERS = ("deitconv", "vgraph", "vrewrite", "vcheckpoint", "vquant", "vharness")
MODELS = ("original", "lowered", "quantized")
_handlers = []


class WrongValueError(configparser.Error):
    pass


class AppConfig:
    """Configuration from a preset name or an INI file, plus overrides.

    Options given on the command line (``overrides``, None meaning not
    given) win over those of the file.
    """

    config_file_general_options = {
        "logfile": {"fallback": ""},
        "loglevel": {"fallback": "warning"},
        "variant": {"fallback": "toy"},
        "calibration_samples": {"fallback": "100"},
        "method": {"fallback": MINMAX},
    }
    model_int_options = (
        "embed_dim",
        "heads",
        "depth",
        "patch",
        "img_size",
        "num_classes",
    )
    model_float_options = ("mlp_ratio", "eps")

    def __init__(self, config, overrides=None):
        self.config_arg = config
        self.overrides = {k: v for k, v in (overrides or {}).items() if v is not None}

    def read(self):
        try:
            self._parse_config()
        except (OSError, configparser.Error, ConfigError) as e:
            raise click.ClickException(str(e))

    def _parse_config(self):
        self.config = configparser.ConfigParser(interpolation=None)
        if self._is_preset(self.config_arg):
            self.config.read_dict({"General": {"variant": self.config_arg}})
        else:
            self._read_config_file()
        self._parse_general_section()
        self._parse_model()

    @staticmethod
    def _is_preset(name):
        base = name[: -len("-dist")] if name.endswith("-dist") else name
        return base in ModelConfig.presets

    def _read_config_file(self):
        with open(self.config_arg) as f:
            text = f.read()
        try:
            self.config.read_string(text, source=self.config_arg)
        except configparser.MissingSectionHeaderError:
            self.config.read_string("[General]\n" + text, source=self.config_arg)

    def _get(self, option, **kwargs):
        if option in self.overrides:
            return str(self.overrides[option])
        if not self.config.has_section("General"):
            self.config.add_section("General")
        return self.config.get("General", option, **kwargs)

    def _parse_general_section(self):
        for opt, kwargs in self.config_file_general_options.items():
            setattr(self, opt, self._get(opt, **kwargs))
        self._parse_log_level()
        self._parse_calibration()

    def _parse_log_level(self):
        log_levels = ("ERROR", "WARNING", "INFO", "DEBUG")
        self.loglevel = self.loglevel.upper()
        if self.loglevel not in log_levels:
            raise WrongValueError("loglevel must be one of " + ", ".join(log_levels))

    def _parse_calibration(self):
        try:
            self.calibration_samples = int(self.calibration_samples)
        except ValueError:
            raise WrongValueError(
                '"{}" is not a valid integer for calibration_samples'.format(
                    self.calibration_samples
                )
            )
        if self.calibration_samples < 1:
            raise WrongValueError("calibration_samples must be at least 1")
        if self.method not in METHODS:
            raise WrongValueError("method must be one of " + ", ".join(METHODS))

    def _parse_model(self):
        overrides = {}
        for opt in self.model_int_options:
            value = self._get(opt, fallback=None)
            if value is not None:
                overrides[opt] = self._convert(opt, value, int)
        for opt in self.model_float_options:
            value = self._get(opt, fallback=None)
            if value is not None:
                overrides[opt] = self._convert(opt, value, float)
        distilled = self._get("distilled", fallback=None)
        if distilled is not None:
            try:
                overrides["distilled"] = self.config.BOOLEAN_STATES[distilled.lower()]
            except KeyError:
                raise WrongValueError(
                    '"{}" is not a valid boolean for distilled'.format(distilled)
                )
        if self.variant == "custom":
            self.model = ModelConfig(**overrides)
            return
        if any(opt in overrides for opt in self.model_int_options + ("mlp_ratio",)):
            overrides["variant"] = "custom"
        self.model = ModelConfig.from_variant(self.variant, **overrides)

    @staticmethod
    def _convert(option, value, type):
        try:
            return type(value)
        except ValueError:
            raise WrongValueError(
                '"{}" is not a valid value for {}'.format(value, option)
            )


class Pipeline:
    """Builds every artifact of a run from the configuration and the seed."""

    def __init__(self, app_config, seed, checkpoint=None, ln_conv_fp32=False,
                 int8_matmul=False, kl_stride=1):
        self.config = app_config
        self.model_config = app_config.model
        self.seed = seed
        self.checkpoint_path = checkpoint
        self.ln_conv_fp32 = ln_conv_fp32
        self.int8_matmul = int8_matmul
        self.kl_stride = kl_stride

    @functools.cached_property
    def original(self):
        return build_deit(self.model_config)

    @functools.cached_property
    def original_params(self):
        if self.checkpoint_path:
            return load_checkpoint(self.checkpoint_path)
        metadata = {
            "variant": self.model_config.variant,
            "distilled": self.model_config.distilled,
            "num_classes": self.model_config.num_classes,
        }
        return init_checkpoint(self.original, self.seed, metadata=metadata)

    @functools.cached_property
    def lowering(self):
        return lower(self.original)

    @property
    def lowered(self):
        return self.lowering[0]

    @property
    def plan(self):
        return self.lowering[1]

    @functools.cached_property
    def inherited(self):
        return inherit_weights(self.original_params, self.lowered, self.plan)

    @functools.cached_property
    def calibration_set(self):
        return random_inputs(
            self.original.input_shape, self.config.calibration_samples, self.seed + 1
        )

    @functools.cached_property
    def stats(self):
        return calibrate(
            self.lowered,
            self.inherited,
            self.calibration_set,
            self.ln_conv_fp32,
            self.int8_matmul,
        )

    @functools.cached_property
    def quantized(self):
        return build_quantized(
            self.lowered,
            self.inherited,
            self.stats,
            self.config.method,
            self.ln_conv_fp32,
            self.int8_matmul,
            self.kl_stride,
        )

    def model(self, name):
        if name == "original":
            return FloatModel(self.original, self.original_params, "DeiT")
        elif name == "lowered":
            return FloatModel(self.lowered, self.inherited, "FP32")
        elif name == "quantized":
            return QuantizedModel(self.quantized, "INT8")
        raise ValueError("Unknown model {!r}".format(name))


class App:
    def __init__(self, stage, options):
        self.stage = stage
        self.options = options

    def run(self):
        self.config = AppConfig(
            self.options["config"],
            {
                "loglevel": self.options.get("loglevel"),
                "logfile": self.options.get("logfile"),
                "calibration_samples": self.options.get("samples"),
                "method": self.options.get("method"),
            },
        )
        self.config.read()
        self._setup_logger()
        return self._execute_with_error_handling()

    def _execute_with_error_handling(self):
        self.logger.info(
            "Starting deitconv {}, {}".format(
                self.stage, dt.datetime.today().isoformat()
            )
        )
        try:
            result = self._execute()
        except Exception as e:
            self.logger.error(str(e))
            self.logger.debug(traceback.format_exc())
            self.logger.info(
                "deitconv {} terminated with error, {}".format(
                    self.stage, dt.datetime.today().isoformat()
                )
            )
            raise click.ClickException(str(e))
        else:
            self.logger.info(
                "Finished deitconv {}, {}".format(
                    self.stage, dt.datetime.today().isoformat()
                )
            )
            return result

    def _setup_logger(self):
        while _handlers:
            logger, handler = _handlers.pop()
            logger.removeHandler(handler)
            handler.close()
        self.logger = logging.getLogger("deitconv")
        for name in LOGGERS:
            logger = logging.getLogger(name)
            handler = self._make_handler()
            logger.addHandler(handler)
            logger.setLevel(self.config.loglevel)
            _handlers.append((logger, handler))

    def _make_handler(self):
        if getattr(self.config, "logfile", None):
            return logging.FileHandler(self.config.logfile)
        return logging.StreamHandler()

    def _execute(self):
        os.makedirs(self.options["out"], exist_ok=True)
        self.pipeline = Pipeline(
            self.config,
            self.options["seed"],
            self.options.get("checkpoint"),
            self.options.get("ln_conv_fp32", False),
            self.options.get("int8_matmul", False),
            self.options.get("kl_stride", 1),
        )
        return getattr(self, "_" + self.stage)()

    def _path(self, filename):
        return os.path.join(self.options["out"], filename)

    def _write_json(self, filename, data):
        with open(self._path(filename), "w") as f:
            json.dump(data, f, indent=1, sort_keys=True)
            f.write("\n")

    def _transform(self):
        p = self.pipeline
        if not self.options.get("checkpoint"):
            save_checkpoint(p.original_params, self._path("original.dckp"))
        save_checkpoint(p.inherited, self._path("lowered.dckp"))
        with open(self._path("plan.json"), "w") as f:
            f.write(p.plan.to_json())
        if self.options.get("dump_graph"):
            with open(self._path("original_graph.json"), "w") as f:
                f.write(p.original.to_json())
            with open(self._path("graph.json"), "w") as f:
                f.write(p.lowered.to_json())
        report = {
            "stage": "transform",
            "variant": p.model_config.variant,
            "distilled": p.model_config.distilled,
            "param_count": param_count(p.model_config),
            "passes": p.plan.passes,
            "substitutions": len(p.plan.applied),
            "nodes": {
                "original": len(p.original.nodes),
                "lowered": len(p.lowered.nodes),
            },
        }
        self._write_json("transform.json", report)
        return report, None

    def _calibrate(self):
        p = self.pipeline
        self._write_json("calib_stats.json", p.stats.to_dict())
        report = {
            "stage": "calibrate",
            "samples": p.stats.samples,
            "edges": len(p.stats),
            "degenerate_edges": sorted(
                edge_id for edge_id, s in p.stats.items() if s.degenerate
            ),
        }
        return report, None

    def _quantize(self):
        p = self.pipeline
        save_quantized(p.quantized, self._path("quantized"))
        modes = list(p.quantized.modes.values())
        report = {
            "stage": "quantize",
            "method": p.quantized.params.method,
            "int8_nodes": sum(1 for m in modes if m.startswith("int8")),
            "boundary_nodes": modes.count("boundary"),
            "degenerate_edges": p.quantized.params.degenerate_edges,
        }
        return report, None

    def _verify(self):
        a, b = self.options["models"]
        result = verify_equivalence(
            self.pipeline.model(a),
            self.pipeline.model(b),
            self.options["inputs"],
            self.options["rtol"],
            self.options["atol"],
            self.options["seed"],
        )
        report = dict(result.to_dict(), stage="verify", models=[a, b])
        self._write_json("verify.json", report)
        return report, None

    def _dataset(self):
        if self.options.get("dataset"):
            return Dataset.load(self.options["dataset"])
        return make_synthetic_dataset(
            self._path("dataset"),
            self.pipeline.original.input_shape,
            seed=self.options["seed"],
            num_classes=self.pipeline.model_config.num_classes,
        )

    def _eval(self):
        dataset = self._dataset()
        timing = self.options.get("timing", False)
        results = {
            name: eval_topk(self.pipeline.model(name), dataset, timing=timing)
            for name in self.options["models"]
        }
        report = {
            "stage": "eval",
            "samples": len(dataset),
            "results": {name: r.to_dict() for name, r in results.items()},
        }
        tables = [accuracy_table(list(results.items()))]
        if "original" in results and "quantized" in results:
            rows = [
                (
                    self.pipeline.model_config.variant,
                    results["original"],
                    results["quantized"],
                )
            ]
            comparison = accuracy_comparison_table(rows)
            drop = accuracy_drop_table(rows)
            report["comparison"] = table_records(comparison)
            report["drop"] = table_records(drop)
            tables += [comparison, drop]
        self._write_json("eval.json", report)
        return report, tables

    def _bench(self):
        results = [
            bench(
                self.pipeline.model(name),
                self.options["runs"],
                self.options["warmup"],
                self.options["seed"],
            )
            for name in ("lowered", "quantized")
        ]
        table = speedup_table(results)
        report = {
            "stage": "bench",
            "results": [r._asdict() for r in results],
            "table": table_records(table),
            "mac_parity": mac_parity(results),
        }
        self._write_json("bench.json", report)
        return report, [table]

    def _mismatch(self):
        dataset = self._dataset()
        a, b = self.options["models"]
        table = report_mismatches(
            self.pipeline.model(a), self.pipeline.model(b), dataset, (a, b)
        )
        report = {"stage": "mismatch", "rows": table_records(table)}
        self._write_json("mismatch.json", report)
        return report, [table]


def _emit(report, tables, as_json):
    if as_json:
        click.echo(json.dumps(report, indent=1, sort_keys=True))
        return
    for key in sorted(report):
        value = report[key]
        if not isinstance(value, (dict, list)):
            click.echo("{}: {}".format(key, value))
    for table in tables or []:
        click.echo(table.to_string(index=False))


def _models_option(default):
    def parse(ctx, param, value):
        names = [v.strip() for v in value.split(",")]
        if len(names) != 2 or any(n not in MODELS for n in names):
            raise click.BadParameter(
                "give two of {} separated by a comma".format(", ".join(MODELS))
            )
        return names

    return click.option(
        "--models",
        default=default,
        show_default=True,
        callback=parse,
        help="Two models to compare",
    )


def common_options(function):
    options = [
        click.option(
            "--config",
            default="toy",
            show_default=True,
            help="Model preset (toy, tiny, small, base, optionally -dist) or INI file",
        ),
        click.option("--seed", default=0, show_default=True, type=int),
        click.option(
            "--out",
            default=".",
            show_default=True,
            type=click.Path(file_okay=False),
            help="Output directory",
        ),
        click.option("--json", "as_json", is_flag=True, help="Print a JSON report"),
        click.option("--loglevel", default=None, help="ERROR, WARNING, INFO or DEBUG"),
        click.option("--logfile", default=None, type=click.Path(dir_okay=False)),
        click.option(
            "--checkpoint",
            default=None,
            type=click.Path(exists=True, dir_okay=False),
            help="Original checkpoint; random weights from the seed if omitted",
        ),
    ]
    for option in reversed(options):
        function = option(function)
    return function


def quant_options(function):
    options = [
        click.option(
            "--samples",
            default=None,
            type=int,
            help="Calibration samples [default: 100]",
        ),
        click.option("--method", default=None, type=click.Choice(METHODS)),
        click.option(
            "--ln-conv-fp32",
            is_flag=True,
            help="Keep the LayerNorm mean convolutions f32",
        ),
        click.option(
            "--int8-matmul", is_flag=True, help="Run the attention matmuls in int8"
        ),
        click.option("--kl-stride", default=1, show_default=True, type=int),
    ]
    for option in reversed(options):
        function = option(function)
    return function


def _run(stage, options):
    report, tables = App(stage, options).run()
    _emit(report, tables, options["as_json"])
    return report


@click.group()
@click.version_option(
    version=__version__, message="%(prog)s from deitconv v.%(version)s"
)
def main():
    """DeiT convolution-only lowering and INT8 quantization"""


@main.command()
@common_options
@click.option("--dump-graph", is_flag=True, help="Also write the graphs as JSON")
def transform(**options):
    """Build, lower and inherit weights"""
    _run("transform", options)


@main.command(name="calibrate")
@common_options
@quant_options
def calibrate_command(**options):
    """Write calibration statistics"""
    _run("calibrate", options)


@main.command()
@common_options
@quant_options
def quantize(**options):
    """Write a quantized graph bundle"""
    _run("quantize", options)


@main.command()
@common_options
@quant_options
@_models_option("original,lowered")
@click.option("--inputs", default=32, show_default=True, type=int)
@click.option("--rtol", default=1e-2, show_default=True, type=float)
@click.option("--atol", default=1e-3, show_default=True, type=float)
def verify(**options):
    """Compare two models; exit status 1 if they are not equivalent"""
    report = _run("verify", options)
    if not report["passed"]:
        sys.exit(1)


@main.command(name="eval")
@common_options
@quant_options
@click.option(
    "--dataset",
    default=None,
    type=click.Path(exists=True, dir_okay=False),
    help="Dataset manifest; a synthetic dataset is generated if omitted",
)
@click.option(
    "--model",
    "models",
    multiple=True,
    default=("original", "quantized"),
    type=click.Choice(MODELS),
)
@click.option("--timing", is_flag=True, help="Record latencies")
def eval_command(**options):
    """Top-1/top-5 accuracy"""
    _run("eval", options)


@main.command(name="bench")
@common_options
@quant_options
@click.option("--runs", default=10, show_default=True, type=click.IntRange(min=1))
@click.option("--warmup", default=5, show_default=True, type=click.IntRange(min=0))
def bench_command(**options):
    """Time FP32 and INT8 inference"""
    _run("bench", options)


@main.command()
@common_options
@quant_options
@_models_option("original,quantized")
@click.option(
    "--dataset",
    default=None,
    type=click.Path(exists=True, dir_okay=False),
    help="Dataset manifest; a synthetic dataset is generated if omitted",
)
def mismatch(**options):
    """List the samples the models misclassify or disagree on"""
    _run("mismatch", options)
