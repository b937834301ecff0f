"""Resource estimation: host latency measurement, layer-wise look-up tables, MACs.

The adaptation loop never times anything itself.  It sums per-layer entries
from a :class:`LatencyLUT` built beforehand; :func:`measure_network` exists
only to check how well those sums track real end-to-end latency.
"""

from __future__ import annotations

import bisect
import datetime
import json
import math
import os
import platform
import threading
import time
from collections.abc import Mapping
from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np
from threadpoolctl import threadpool_limits

from .errors import ClockFailure, EmptySpatial, FormatError, UnknownFamily
from .microtrain import forward, layer_forward
from .netgraph import Kind, LayerShapeKey, LayerSpec, NetworkSpec, Padding, shape_keys

LUT_VERSION = 1

# Timing runs must never overlap, whichever thread starts them.
_TIMING_LOCK = threading.Lock()


class Metric(str, Enum):
    LATENCY = "latency"
    MACS = "macs"


def parse_metrics(text) -> tuple[Metric, ...]:
    if isinstance(text, str):
        text = [t for t in text.replace(" ", "").split(",") if t]
    metrics = tuple(Metric(m) for m in text)
    if not metrics:
        raise ValueError("at least one metric is required")
    return tuple(sorted(set(metrics), key=lambda m: m.value))


class ResourceVector(Mapping):
    """Per-metric resource values; ``a <= b`` means every metric of ``a`` fits ``b``."""

    def __init__(self, values):
        self._values = {Metric(k): v for k, v in dict(values).items()}

    def __getitem__(self, key):
        return self._values[Metric(key)]

    def __iter__(self):
        return iter(sorted(self._values, key=lambda m: m.value))

    def __len__(self):
        return len(self._values)

    def __repr__(self):
        inner = ", ".join(f"{m.value}={self._values[m]!r}" for m in self)
        return f"ResourceVector({inner})"

    def __eq__(self, other):
        if isinstance(other, ResourceVector):
            return self._values == other._values
        return NotImplemented

    def __le__(self, other):
        return all(self[m] <= other[m] for m in other)

    def exceeds(self, budget) -> bool:
        return any(self[m] > budget[m] for m in budget)

    def minus(self, deltas) -> "ResourceVector":
        return ResourceVector({m: self[m] - deltas[m] for m in self})


@dataclass(frozen=True)
class MeasurementConfig:
    warmup_runs: int = 2
    repeats: int = 11
    channel_grid_step: int = 1
    batch_size: int = 1

    def __post_init__(self):
        if self.repeats < 3 or self.repeats % 2 == 0:
            raise ValueError(f"repeats must be odd and >= 3, got {self.repeats}")
        if self.warmup_runs < 0:
            raise ValueError("warmup_runs must be >= 0")
        if self.channel_grid_step < 1:
            raise ValueError("channel_grid_step must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def median_time_ms(fn, repeats, warmup_runs=0, clock=time.perf_counter) -> float:
    """Median wall-clock milliseconds of ``repeats`` timed calls after warmups."""
    with _TIMING_LOCK, threadpool_limits(limits=1):
        for _ in range(warmup_runs):
            fn()
        samples = []
        for _ in range(repeats):
            start = clock()
            fn()
            elapsed = clock() - start
            if not math.isfinite(elapsed) or elapsed < 0:
                raise ClockFailure(f"clock returned an invalid interval ({elapsed!r})")
            samples.append(elapsed * 1000.0)
    result = float(np.median(samples))
    if result <= 0:
        raise ClockFailure("median interval is zero; clock resolution too coarse")
    return result


def _random_layer(key: LayerShapeKey, rng) -> LayerSpec:
    if key.kind is Kind.CONV:
        shape = (key.out_filters, key.in_channels, *key.kernel)
        return LayerSpec(Kind.CONV, key.in_channels, key.out_filters, rng.standard_normal(shape),
                         rng.standard_normal(key.out_filters), key.kernel, key.stride, key.padding)
    shape = (key.out_filters, key.in_features)
    return LayerSpec(Kind.DENSE, key.in_features, key.out_filters, rng.standard_normal(shape),
                     rng.standard_normal(key.out_filters))


def layer_key(layer: LayerSpec, input_shape) -> LayerShapeKey:
    c, h, w = input_shape
    if layer.kind is Kind.DENSE:
        return LayerShapeKey(Kind.DENSE, c, layer.out_filters, h, w)
    return LayerShapeKey(Kind.CONV, c, layer.out_filters, h, w, layer.kernel, layer.stride,
                         layer.padding)


def measure_layer(key: LayerShapeKey, cfg: MeasurementConfig, clock=time.perf_counter,
                  seed: int = 0) -> float:
    """Median latency (ms) of one layer's forward pass on fixed random input.

    Weights are random; only the layer's shape matters for its cost.  Use
    :func:`layer_key` to obtain the key for a concrete layer.
    """
    oh, ow = key.out_hw
    if oh <= 0 or ow <= 0:
        raise EmptySpatial(f"{key.to_string()} has empty output")
    rng = np.random.default_rng(seed)
    layer = _random_layer(key, rng)
    x = rng.standard_normal((cfg.batch_size, key.in_channels, key.in_h, key.in_w))
    return median_time_ms(lambda: layer_forward(layer, x), cfg.repeats, cfg.warmup_runs, clock)


def measure_network(net: NetworkSpec, cfg: MeasurementConfig, clock=time.perf_counter,
                    seed: int = 0) -> float:
    """End-to-end forward latency; for validating LUT estimates only."""
    x = np.random.default_rng(seed).standard_normal((cfg.batch_size, *net.input_shape))
    return median_time_ms(lambda: forward(net, x), cfg.repeats, cfg.warmup_runs, clock)


def hostinfo() -> str:
    return "; ".join([
        f"node={platform.node()}",
        f"platform={platform.platform()}",
        f"machine={platform.machine()}",
        f"cpus={os.cpu_count()}",
        f"python={platform.python_version()}",
        f"numpy={np.__version__}",
    ])


@dataclass(frozen=True, eq=False)
class LatencyLUT:
    """Measured per-layer latencies plus the channel grid of each layer family.

    ``grids`` maps a family (``LayerShapeKey.family``) to the sorted
    ``(in_channels, out_filters)`` axes; every grid point has an entry.
    """

    entries: Mapping
    grids: Mapping
    provenance: Mapping = field(default_factory=dict)

    def __post_init__(self):
        for key, ms in self.entries.items():
            if not (math.isfinite(ms) and ms > 0):
                raise ValueError(f"latency for {key.to_string()} must be finite and > 0, got {ms!r}")

    def __eq__(self, other):
        if not isinstance(other, LatencyLUT):
            return NotImplemented
        return (dict(self.entries) == dict(other.entries)
                and dict(self.grids) == dict(other.grids)
                and dict(self.provenance) == dict(other.provenance))

    __hash__ = None

    def __len__(self):
        return len(self.entries)


def channel_grid(current: int, step: int) -> tuple[int, ...]:
    """1, 1+step, ... up to and always including ``current``."""
    return tuple(sorted(set(range(1, current + 1, step)) | {current}))


def lut_plan(template: NetworkSpec, step: int):
    """Per-family grid axes a LUT must cover to cost every prune of ``template``.

    Returns ``(grids, per_position)`` where ``per_position`` lists the keys each
    layer position reaches (before cross-position deduplication).
    """
    keys = shape_keys(template)
    last = len(keys) - 1
    axes = {}
    per_position = []
    for k, key in enumerate(keys):
        ins = (key.in_channels,) if k == 0 else channel_grid(key.in_channels, step)
        outs = (key.out_filters,) if k == last else channel_grid(key.out_filters, step)
        per_position.append([key.with_channels(i, o) for i in ins for o in outs])
        have_in, have_out = axes.get(key.family, (set(), set()))
        axes[key.family] = (have_in | set(ins), have_out | set(outs))
    grids = {fam: (tuple(sorted(i)), tuple(sorted(o))) for fam, (i, o) in axes.items()}
    return grids, per_position


def _family_key(family, in_channels, out_filters):
    kind, h, w, kernel, stride, padding = family
    return LayerShapeKey(kind, in_channels, out_filters, h, w, kernel, stride, padding)


def build_lut(template: NetworkSpec, cfg: MeasurementConfig, measure=None,
              clock=time.perf_counter) -> LatencyLUT:
    """Measure every grid point reachable by pruning ``template``.

    ``measure(key) -> ms`` can replace host timing (tests, remote devices).
    Keys shared between layer positions are measured once.
    """
    if measure is None:
        def measure(key):
            return measure_layer(key, cfg, clock=clock)
    grids, _ = lut_plan(template, cfg.channel_grid_step)
    entries = {}
    for family, (ins, outs) in grids.items():
        for i in ins:
            for o in outs:
                key = _family_key(family, i, o)
                if key not in entries:
                    entries[key] = float(measure(key))
    provenance = {
        "host": hostinfo(),
        "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds"),
        "config": asdict(cfg),
    }
    return LatencyLUT(entries, grids, provenance)


def _bracket(grid, q):
    if len(grid) == 1 or q <= grid[0]:
        return 0, 0, 0.0
    if q >= grid[-1]:
        return len(grid) - 1, len(grid) - 1, 0.0
    hi = bisect.bisect_right(grid, q)
    lo = hi - 1
    if grid[lo] == q:
        return lo, lo, 0.0
    return lo, hi, (q - grid[lo]) / (grid[hi] - grid[lo])


def lut_lookup(lut: LatencyLUT, key: LayerShapeKey) -> float:
    """Stored latency, or bilinear interpolation over the family grid (clamped)."""
    hit = lut.entries.get(key)
    if hit is not None:
        return hit
    grid = lut.grids.get(key.family)
    if grid is None:
        raise UnknownFamily(f"no measurements for layer family of {key.to_string()}")
    ins, outs = grid
    i0, i1, ti = _bracket(ins, key.in_channels)
    o0, o1, to = _bracket(outs, key.out_filters)
    try:
        v00 = lut.entries[_family_key(key.family, ins[i0], outs[o0])]
        v01 = lut.entries[_family_key(key.family, ins[i0], outs[o1])]
        v10 = lut.entries[_family_key(key.family, ins[i1], outs[o0])]
        v11 = lut.entries[_family_key(key.family, ins[i1], outs[o1])]
    except KeyError as exc:
        raise UnknownFamily(f"grid point {exc.args[0].to_string()} missing from LUT") from None
    value = ((1 - ti) * ((1 - to) * v00 + to * v01) + ti * ((1 - to) * v10 + to * v11))
    corners = (v00, v01, v10, v11)
    return min(max(value, min(corners)), max(corners))


def estimate_keys(keys, metrics, lut=None) -> ResourceVector:
    values = {}
    for metric in metrics:
        if Metric(metric) is Metric.LATENCY:
            if lut is None:
                raise UnknownFamily("latency requested but no LUT supplied")
            total = 0.0
            for key in keys:
                total += lut_lookup(lut, key)
            values[Metric.LATENCY] = total
        else:
            values[Metric.MACS] = sum(key.macs for key in keys)
    return ResourceVector(values)


def estimate_resources(net: NetworkSpec, metrics, lut=None) -> ResourceVector:
    """Sum of per-layer LUT latencies and/or the exact MAC count."""
    return estimate_keys(shape_keys(net), metrics, lut)


def missing_families(lut: LatencyLUT, net: NetworkSpec) -> list:
    return sorted({k.to_string() for k in shape_keys(net) if k.family not in lut.grids})


# --- LUT files --------------------------------------------------------------

def _family_to_json(family):
    kind, h, w, kernel, stride, padding = family
    return {"kind": kind.value, "in_h": h, "in_w": w, "kernel": list(kernel),
            "stride": stride, "padding": padding.value}


def _family_from_json(obj):
    return (Kind(obj["kind"]), int(obj["in_h"]), int(obj["in_w"]),
            tuple(int(v) for v in obj["kernel"]), int(obj["stride"]), Padding(obj["padding"]))


def lut_to_text(lut: LatencyLUT) -> str:
    """JSON document; latencies are ``repr`` strings so they round-trip exactly."""
    families = sorted(lut.grids.items(), key=lambda item: repr(_family_to_json(item[0])))
    doc = {
        "format_version": LUT_VERSION,
        "provenance": dict(lut.provenance),
        "families": [
            {"family": _family_to_json(fam), "in_grid": list(ins), "out_grid": list(outs)}
            for fam, (ins, outs) in families
        ],
        "entries": {k.to_string(): repr(v) for k, v in sorted(
            lut.entries.items(), key=lambda kv: kv[0].to_string())},
    }
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def lut_from_text(text: str) -> LatencyLUT:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"LUT is not valid JSON: {exc.msg}", exc.pos) from None
    if not isinstance(doc, dict):
        raise FormatError("LUT document must be a JSON object", 0)
    if doc.get("format_version") != LUT_VERSION:
        raise FormatError(f"unsupported LUT format version {doc.get('format_version')!r}")
    try:
        grids = {}
        for item in doc["families"]:
            grids[_family_from_json(item["family"])] = (
                tuple(int(v) for v in item["in_grid"]), tuple(int(v) for v in item["out_grid"]))
        raw_entries = doc["entries"]
        provenance = doc["provenance"]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed LUT structure: {exc!r}") from None
    entries = {}
    for name, value in raw_entries.items():
        try:
            key = LayerShapeKey.from_string(name)
            ms = float(value) if isinstance(value, str) else math.nan
        except (KeyError, ValueError) as exc:
            raise FormatError(f"corrupted LUT entry {name!r}: {exc}") from None
        if not (math.isfinite(ms) and ms > 0):
            raise FormatError(f"corrupted LUT entry {name!r}: latency {value!r}")
        entries[key] = ms
    for fam, (ins, outs) in grids.items():
        for i in ins:
            for o in outs:
                key = _family_key(fam, i, o)
                if key not in entries:
                    raise FormatError(f"LUT grid point {key.to_string()!r} has no entry")
    return LatencyLUT(entries, grids, provenance)


def lut_save(lut: LatencyLUT, path) -> None:
    from ._io import atomic_write_text
    atomic_write_text(path, lut_to_text(lut))


def lut_load(path) -> LatencyLUT:
    with open(path, encoding="utf-8") as fh:
        return lut_from_text(fh.read())
