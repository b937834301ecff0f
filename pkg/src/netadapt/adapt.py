"""The adaptation loop: shrink one layer per iteration until the budget is met.

Each iteration tightens the per-metric constraint to the current estimate
minus a scheduled reduction, builds one proposal per prunable layer (largest
filter count that fits, L2-magnitude filter choice, short fine-tune), scores
the proposals on a class-balanced holdout and keeps the best one.  The
network that finally fits the budget gets a long fine-tune on all data.
"""

from __future__ import annotations

import csv
import io
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import NamedTuple

import numpy as np

from .costmodel import Metric, ResourceVector, estimate_resources, missing_families
from .errors import CoverageError, NoFeasibleProposal, NumericalFailure, UnknownFamily
from .microtrain import Dataset, TrainConfig, evaluate_accuracy, split_holdout, train
from .netgraph import NetworkSpec, count_macs
from .pruner import PruneDecision, apply_prune, choose_num_filters, choose_which_filters, prunable_layers

log = logging.getLogger(__name__)

LONG_TERM_TAG = 0x7FFFFFFF


@dataclass(frozen=True)
class ReductionSchedule:
    """Per metric ``(initial_delta, decay)``; the i-th reduction is ``init * decay**(i-1)``."""

    steps: dict

    def __post_init__(self):
        steps = {Metric(m): (float(a), float(b)) for m, (a, b) in dict(self.steps).items()}
        for m, (init, decay) in steps.items():
            if not init > 0:
                raise ValueError(f"{m.value}: initial reduction must be > 0")
            if not 0 < decay <= 1:
                raise ValueError(f"{m.value}: decay must be in (0, 1]")
        object.__setattr__(self, "steps", steps)


def delta(schedule: ReductionSchedule, i: int, metric) -> float:
    if i < 1:
        raise ValueError("iterations are numbered from 1")
    init, decay = schedule.steps[Metric(metric)]
    return init * decay ** (i - 1)


@dataclass(frozen=True)
class Budget:
    bounds: dict

    def __post_init__(self):
        bounds = {Metric(m): v for m, v in dict(self.bounds).items()}
        if not bounds:
            raise ValueError("budget needs at least one metric")
        for m, v in bounds.items():
            if not v > 0:
                raise ValueError(f"{m.value}: budget must be > 0")
        object.__setattr__(self, "bounds", bounds)

    @property
    def metrics(self):
        return tuple(sorted(self.bounds, key=lambda m: m.value))

    def as_vector(self) -> ResourceVector:
        return ResourceVector(self.bounds)


@dataclass(frozen=True)
class AdaptConfig:
    short_term_iterations: int = 200
    short_term_lr: float = 0.005
    long_term_iterations: int = 2000
    long_term_lr: float = 0.05
    holdout_per_class: int = 10
    master_seed: int = 0
    parallel_proposals: bool = False
    batch_size: int = 32

    def __post_init__(self):
        if self.short_term_iterations < 0 or self.long_term_iterations < 0:
            raise ValueError("iteration counts must be >= 0")
        if not (self.short_term_lr > 0 and self.long_term_lr > 0):
            raise ValueError("learning rates must be > 0")
        if self.holdout_per_class < 1 or self.batch_size < 1:
            raise ValueError("holdout_per_class and batch_size must be >= 1")


class Status(str, Enum):
    BUDGET_MET = "BudgetMet"
    STALLED = "Stalled"
    ALREADY_WITHIN_BUDGET = "AlreadyWithinBudget"


@dataclass
class Proposal:
    layer: int
    keep_count: int | None
    accuracy: float | None
    resources: ResourceVector | None
    status: str  # "ok", "infeasible" or "failed"
    network: NetworkSpec | None = field(default=None, repr=False)
    keep_indices: tuple = ()


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    layer: int | None
    keep_count: int | None
    holdout_accuracy: float | None
    resources: ResourceVector | None
    proposals: tuple


@dataclass(frozen=True)
class FrontierPoint:
    iteration: int | None  # None marks the long-term fine-tuned network
    layer: int | None
    keep_count: int | None
    network: NetworkSpec
    accuracy: float
    resources: ResourceVector
    macs: int
    latency_ms: float | None


@dataclass
class Frontier:
    points: list = field(default_factory=list)
    final: FrontierPoint | None = None

    def all_points(self):
        return self.points + ([self.final] if self.final is not None else [])


class AdaptResult(NamedTuple):
    final: NetworkSpec
    frontier: Frontier
    status: Status
    records: list


def derive_seed(*parts) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def proposal_seed(master_seed: int, iteration: int, layer: int) -> int:
    """Fine-tune seed of one proposal, a pure function of (master, iteration, layer)."""
    return derive_seed(master_seed, iteration, layer)


def pick_highest_accuracy(proposals):
    """Best ``ok`` proposal: accuracy, then lower latency, lower MACs, lower layer."""
    ok = [p for p in proposals if p.status == "ok"]
    if not ok:
        raise NoFeasibleProposal("no proposal survived this iteration")

    def rank(p):
        lat = p.resources.get(Metric.LATENCY, 0.0)
        macs = p.resources.get(Metric.MACS, 0)
        return (-p.accuracy, lat, macs, p.layer)

    return min(ok, key=rank)


def _point(net, iteration, layer, keep, accuracy, resources, lut):
    latency = resources.get(Metric.LATENCY)
    if latency is None and lut is not None:
        try:
            latency = estimate_resources(net, [Metric.LATENCY], lut)[Metric.LATENCY]
        except UnknownFamily:
            latency = None
    return FrontierPoint(iteration, layer, keep, net, accuracy, resources, count_macs(net), latency)


def adapt(net0: NetworkSpec, budget: Budget, schedule: ReductionSchedule, cfg: AdaptConfig,
          lut, data: Dataset) -> AdaptResult:
    metrics = budget.metrics
    for m in metrics:
        if m not in schedule.steps:
            raise ValueError(f"no reduction schedule for metric {m.value}")
    if Metric.LATENCY in metrics:
        if lut is None:
            raise CoverageError("latency budget requires a look-up table")
        gaps = missing_families(lut, net0)
        if gaps:
            raise CoverageError(f"LUT does not cover layer families of: {', '.join(gaps)}")

    train_split, holdout = split_holdout(data, cfg.holdout_per_class, cfg.master_seed)
    bound = budget.as_vector()
    net = net0
    res = estimate_resources(net, metrics, lut)
    frontier = Frontier()
    records = []
    status = None
    i = 0

    def propose(k, con, iteration):
        try:
            found = choose_num_filters(net, k, con, lut)
        except UnknownFamily as exc:
            raise CoverageError(str(exc)) from None
        current = net.layers[k].out_filters
        if found is None or found[0] >= current:
            return Proposal(k, None, None, None, "infeasible")
        keep_count, est = found
        keep = choose_which_filters(net, k, keep_count)
        candidate = apply_prune(net, PruneDecision(k, keep_count, keep, est))
        tcfg = TrainConfig(cfg.short_term_lr, cfg.batch_size, cfg.short_term_iterations,
                           proposal_seed(cfg.master_seed, iteration, k))
        try:
            candidate = train(candidate, train_split, tcfg)
        except NumericalFailure as exc:
            log.warning("iteration %d layer %d: short-term fine-tune failed: %s", iteration, k, exc)
            return Proposal(k, keep_count, None, est, "failed", keep_indices=keep)
        acc = evaluate_accuracy(candidate, holdout)
        return Proposal(k, keep_count, acc, est, "ok", candidate, keep)

    while res.exceeds(bound):
        i += 1
        con = res.minus({m: delta(schedule, i, m) for m in metrics})
        layers = list(prunable_layers(net))
        if cfg.parallel_proposals and len(layers) > 1:
            with ThreadPoolExecutor(max_workers=min(len(layers), os.cpu_count() or 1)) as pool:
                proposals = list(pool.map(lambda k: propose(k, con, i), layers))
        else:
            proposals = [propose(k, con, i) for k in layers]
        summaries = tuple(
            (p.layer, p.keep_count, p.accuracy, p.resources, p.status) for p in proposals)
        try:
            best = pick_highest_accuracy(proposals)
        except NoFeasibleProposal:
            records.append(IterationRecord(i, None, None, None, None, summaries))
            if proposals and all(p.status == "failed" for p in proposals):
                raise NumericalFailure("every proposal failed to fine-tune", iteration=i) from None
            log.info("iteration %d: no feasible proposal, stalling", i)
            status = Status.STALLED
            break
        net, res = best.network, best.resources
        records.append(IterationRecord(i, best.layer, best.keep_count, best.accuracy, res, summaries))
        frontier.points.append(_point(net, i, best.layer, best.keep_count, best.accuracy, res, lut))
        log.info("iteration %d: layer %d -> %d filters, holdout acc %.4f, %s",
                 i, best.layer, best.keep_count, best.accuracy, res)

    if status is None:
        status = Status.ALREADY_WITHIN_BUDGET if i == 0 else Status.BUDGET_MET
    long_cfg = TrainConfig(cfg.long_term_lr, cfg.batch_size, cfg.long_term_iterations,
                           derive_seed(cfg.master_seed, LONG_TERM_TAG))
    final = train(net, data, long_cfg)
    frontier.final = _point(final, None, None, None, evaluate_accuracy(final, data),
                            estimate_resources(final, metrics, lut), lut)
    return AdaptResult(final, frontier, status, records)


# --- frontier tables ----------------------------------------------------------

FRONTIER_COLUMNS = ("iteration", "layer_pruned", "keep_count", "holdout_accuracy",
                    "latency_ms_estimated", "macs", "model_file")


def model_filename(iteration) -> str:
    return "final.netmodel" if iteration is None else f"net_iter{iteration}.netmodel"


def frontier_rows(frontier: Frontier) -> list[dict]:
    """One row per iteration plus a ``final`` row.

    The final row's accuracy is measured on the full training set, since the
    holdout has been trained on by then.
    """
    rows = []
    for p in frontier.all_points():
        rows.append({
            "iteration": "final" if p.iteration is None else p.iteration,
            "layer_pruned": p.layer,
            "keep_count": p.keep_count,
            "holdout_accuracy": p.accuracy,
            "latency_ms_estimated": p.latency_ms,
            "macs": p.macs,
            "model_file": model_filename(p.iteration),
        })
    return rows


def _cell(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def frontier_text(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(FRONTIER_COLUMNS)
    for row in rows:
        writer.writerow([_cell(row[c]) for c in FRONTIER_COLUMNS])
    return buf.getvalue()


def frontier_export(frontier: Frontier, path) -> None:
    from ._io import atomic_write_text
    if not frontier.all_points():
        raise ValueError("frontier is empty")
    atomic_write_text(path, frontier_text(frontier_rows(frontier)))


def read_frontier(path) -> list[dict]:
    def parse(col, text):
        if text == "":
            return None
        if col in ("holdout_accuracy", "latency_ms_estimated"):
            return float(text)
        if col in ("layer_pruned", "keep_count", "macs"):
            return int(text)
        if col == "iteration" and text != "final":
            return int(text)
        return text

    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != FRONTIER_COLUMNS:
            raise ValueError(f"unexpected frontier columns {reader.fieldnames}")
        return [{c: parse(c, row[c]) for c in FRONTIER_COLUMNS} for row in reader]
