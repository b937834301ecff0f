"""Command-line entry point.

Exit codes: 0 success, 2 usage/config, 3 I/O or file format, 4 numerical
failure, 5 measurement failure, 6 adaptation stalled.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import adapt as adapt_mod
from ._io import atomic_write_text
from .costmodel import (MeasurementConfig, Metric, build_lut, estimate_resources, lut_load,
                        lut_save, measure_network, parse_metrics)
from .errors import ClockFailure, ConfigError, FormatError, NetAdaptError, NumericalFailure
from .microtrain import (TrainConfig, evaluate_accuracy, load_dataset, save_dataset,
                         split_holdout, synth_dataset, train)
from .netgraph import count_macs, init_network, load_network, parse_arch, save_network, width_multiplier

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC, EXIT_MEASURE, EXIT_STALLED = 0, 2, 3, 4, 5, 6
OUTPUT_DIR_ENV = "NETADAPT_OUTPUT_DIR"

log = logging.getLogger("netadapt")


class UsageError(NetAdaptError):
    pass


# --- run configuration ---------------------------------------------------------

_CONFIG_KEYS = {
    "model": str,
    "dataset": str,
    "lut": str,
    "output_dir": str,
    "metrics": str,
    "budget.latency": float,
    "budget.macs": float,
    "schedule.latency.init": float,
    "schedule.latency.decay": float,
    "schedule.macs.init": float,
    "schedule.macs.decay": float,
    "adapt.short_term_iterations": int,
    "adapt.short_term_lr": float,
    "adapt.long_term_iterations": int,
    "adapt.long_term_lr": float,
    "adapt.holdout_per_class": int,
    "adapt.master_seed": int,
    "adapt.parallel_proposals": bool,
    "adapt.batch_size": int,
    "measurement.warmup_runs": int,
    "measurement.repeats": int,
    "measurement.channel_grid_step": int,
    "measurement.batch_size": int,
}
_PATH_KEYS = ("model", "dataset", "lut")


def _flatten(tree, prefix=""):
    flat = {}
    for key, value in tree.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(_flatten(value, name + "."))
        else:
            flat[name] = value
    return flat


def _coerce(key, value):
    kind = _CONFIG_KEYS[key]
    if key == "metrics" and isinstance(value, list):
        return ",".join(str(v) for v in value)
    if kind is bool:
        if isinstance(value, bool):
            return value
        if str(value).lower() in ("true", "1", "yes"):
            return True
        if str(value).lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    if kind is int and isinstance(value, float) and not value.is_integer():
        raise ConfigError(f"{key}: expected an integer, got {value!r}")
    try:
        return kind(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot interpret {value!r} as {kind.__name__}") from None


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)
    base_dir: Path = Path(".")

    @classmethod
    def from_file(cls, path, overrides=None) -> "RunConfig":
        path = Path(path)
        try:
            with open(path, "rb") as fh:
                raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        values = {}
        for key, value in {**_flatten(raw), **(overrides or {})}.items():
            if key not in _CONFIG_KEYS:
                raise ConfigError(f"unknown configuration key {key!r}")
            values[key] = _coerce(key, value)
        cfg = cls(values, path.parent)
        cfg.check_files()
        return cfg

    def get(self, key, default=None):
        return self.values.get(key, default)

    def path(self, key):
        value = self.values.get(key)
        if value is None:
            return None
        p = Path(value)
        return p if p.is_absolute() else self.base_dir / p

    def check_files(self):
        for key in ("model", "dataset"):
            if key not in self.values:
                raise ConfigError(f"missing required key {key!r}")
        for key in _PATH_KEYS:
            p = self.path(key)
            if p is not None and not p.is_file():
                raise FileNotFoundError(f"{key}: {p} does not exist")

    @property
    def metrics(self):
        return parse_metrics(self.values.get("metrics", "latency"))

    def output_dir(self) -> Path:
        env = os.environ.get(OUTPUT_DIR_ENV)
        if env:
            return Path(env)
        out = self.path("output_dir")
        return out if out is not None else self.base_dir / "netadapt_out"

    def budget(self):
        bounds = {}
        for m in self.metrics:
            key = f"budget.{m.value}"
            if key not in self.values:
                raise ConfigError(f"metric {m.value} is active but {key} is not set")
            bounds[m] = self.values[key]
        return adapt_mod.Budget(bounds)

    def schedule(self):
        steps = {}
        for m in self.metrics:
            init = self.values.get(f"schedule.{m.value}.init")
            if init is None:
                raise ConfigError(f"schedule.{m.value}.init is required")
            steps[m] = (init, self.values.get(f"schedule.{m.value}.decay", 1.0))
        return adapt_mod.ReductionSchedule(steps)

    def adapt_config(self):
        kw = {k.split(".", 1)[1]: v for k, v in self.values.items() if k.startswith("adapt.")}
        return adapt_mod.AdaptConfig(**kw)

    def measurement_config(self):
        kw = {k.split(".", 1)[1]: v for k, v in self.values.items() if k.startswith("measurement.")}
        return MeasurementConfig(**kw)


# --- commands ---------------------------------------------------------------------

def _shape(text):
    parts = text.lower().replace("x", ",").split(",")
    try:
        shape = tuple(int(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad shape {text!r}; use C,H,W") from None
    if len(shape) != 3 or min(shape) < 1:
        raise argparse.ArgumentTypeError(f"bad shape {text!r}; use C,H,W")
    return shape


def cmd_dataset_gen(args):
    data = synth_dataset(args.classes, args.per_class, args.shape, args.separation, args.seed,
                         modes_per_class=args.modes_per_class)
    save_dataset(data, args.out)
    print(f"samples={len(data)} classes={data.class_count} shape={'x'.join(map(str, data.sample_shape))}")
    return EXIT_OK


def cmd_train(args):
    data = load_dataset(args.dataset)
    try:
        arch = parse_arch(args.arch)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if arch[-1].out_filters != data.class_count:
        raise UsageError(f"classifier width {arch[-1].out_filters} != dataset classes {data.class_count}")
    net = init_network(data.sample_shape, arch, args.seed)
    if args.alpha is not None:
        net = width_multiplier(net, args.alpha, args.seed)
    train_split, holdout = split_holdout(data, args.holdout_per_class, args.seed)
    net = train(net, train_split, TrainConfig(args.lr, args.batch_size, args.iterations, args.seed))
    save_network(net, args.out)
    print(f"train_accuracy={evaluate_accuracy(net, train_split)!r} "
          f"holdout_accuracy={evaluate_accuracy(net, holdout)!r} macs={count_macs(net)} "
          f"params={net.param_count}")
    return EXIT_OK


def _measurement_config(args):
    try:
        return MeasurementConfig(args.warmups, args.repeats, getattr(args, "grid_step", 1),
                                 args.batch_size)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_lut_build(args):
    cfg = _measurement_config(args)
    net = load_network(args.model)
    lut = build_lut(net, cfg)
    lut_save(lut, args.out)
    print(f"entries={len(lut)} families={len(lut.grids)}")
    return EXIT_OK


def cmd_eval(args):
    net = load_network(args.model)
    data = load_dataset(args.dataset)
    acc = evaluate_accuracy(net, data)
    est = "NA"
    if args.lut:
        lut = lut_load(args.lut)
        est = repr(estimate_resources(net, [Metric.LATENCY], lut)[Metric.LATENCY])
    meas = "NA"
    if args.measure:
        meas = repr(measure_network(net, _measurement_config(args)))
    print(f"accuracy={acc!r} macs={count_macs(net)} est_latency_ms={est} meas_latency_ms={meas}")
    return EXIT_OK


def _proposal_line(iteration, layer, keep, acc, res, status):
    def fmt(v):
        return "NA" if v is None else repr(v)
    lat = res.get(Metric.LATENCY) if res is not None else None
    macs = res.get(Metric.MACS) if res is not None else None
    return (f"iteration={iteration} layer={layer} keep_count={fmt(keep)} accuracy={fmt(acc)} "
            f"est_latency_ms={fmt(lat)} est_macs={fmt(macs)} status={status}")


def cmd_adapt(args):
    overrides = {}
    if args.budget_latency is not None:
        overrides["budget.latency"] = args.budget_latency
    if args.budget_macs is not None:
        overrides["budget.macs"] = args.budget_macs
    if args.metric is not None:
        overrides["metrics"] = args.metric
    try:
        cfg = RunConfig.from_file(args.config, overrides)
        metrics = cfg.metrics
        budget, schedule, acfg = cfg.budget(), cfg.schedule(), cfg.adapt_config()
        mcfg = cfg.measurement_config()
    except (ConfigError, ValueError) as exc:
        raise UsageError(str(exc)) from None

    net = load_network(cfg.path("model"))
    data = load_dataset(cfg.path("dataset"))
    lut = None
    if cfg.path("lut") is not None:
        lut = lut_load(cfg.path("lut"))
    elif Metric.LATENCY in metrics:
        log.info("no LUT configured; measuring one on this host")
        lut = build_lut(net, mcfg)

    out = cfg.output_dir()
    out.mkdir(parents=True, exist_ok=True)
    result = adapt_mod.adapt(net, budget, schedule, acfg, lut, data)

    for point in result.frontier.points:
        save_network(point.network, out / adapt_mod.model_filename(point.iteration))
    save_network(result.final, out / adapt_mod.model_filename(None))
    adapt_mod.frontier_export(result.frontier, out / "frontier.csv")
    lines = []
    for rec in result.records:
        for layer, keep, acc, res, status in rec.proposals:
            lines.append(_proposal_line(rec.iteration, layer, keep, acc, res, status))
    lines.append(f"status={result.status.value} iterations={len(result.frontier.points)}")
    atomic_write_text(out / "run.log", "\n".join(lines) + "\n")
    print(f"status={result.status.value} iterations={len(result.frontier.points)} output_dir={out}")
    return EXIT_STALLED if result.status is adapt_mod.Status.STALLED else EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="netadapt", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("dataset-gen", help="generate a synthetic Gaussian-blob dataset")
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--per-class", type=int, required=True)
    p.add_argument("--shape", type=_shape, default=(3, 8, 8), help="C,H,W")
    p.add_argument("--separation", type=float, default=4.0)
    p.add_argument("--modes-per-class", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dataset_gen)

    p = sub.add_parser("train", help="train a network (or width-multiplier baseline) from scratch")
    p.add_argument("--arch", required=True, help="e.g. conv:16:3:1:same,conv:32:3:2:same,dense:10")
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--dataset", required=True)
    p.add_argument("--iterations", type=int, default=2000)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--holdout-per-class", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("lut-build", help="measure the layer-wise latency look-up table")
    p.add_argument("--model", required=True)
    p.add_argument("--grid-step", type=int, default=1)
    p.add_argument("--warmups", type=int, default=2)
    p.add_argument("--repeats", type=int, default=11)
    p.add_argument("--batch-size", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_lut_build)

    p = sub.add_parser("adapt", help="run the adaptation loop from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--budget.latency", dest="budget_latency", type=float)
    p.add_argument("--budget.macs", dest="budget_macs", type=float)
    p.add_argument("--metric", help="comma-separated: latency, macs")
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("eval", help="accuracy, MACs and latency of a saved model")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--lut")
    p.add_argument("--measure", action="store_true")
    p.add_argument("--warmups", type=int, default=2)
    p.add_argument("--repeats", type=int, default=11)
    p.add_argument("--batch-size", type=int, default=1)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"netadapt: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, FormatError) as exc:
        print(f"netadapt: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericalFailure as exc:
        print(f"netadapt: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ClockFailure as exc:
        print(f"netadapt: measurement failure: {exc}", file=sys.stderr)
        return EXIT_MEASURE
    except NetAdaptError as exc:
        print(f"netadapt: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
