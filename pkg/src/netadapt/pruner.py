"""Per-layer filter pruning: how many filters to keep, which ones, and applying it."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .costmodel import ResourceVector, estimate_keys
from .errors import Inconsistent, NotPrunable
from .netgraph import Kind, NetworkSpec, infer_shapes, shape_keys


@dataclass(frozen=True)
class PruneDecision:
    layer_index: int
    keep_count: int
    keep_indices: tuple[int, ...]
    estimated_resources: ResourceVector | None = None

    def __post_init__(self):
        object.__setattr__(self, "keep_indices", tuple(int(i) for i in self.keep_indices))
        if self.keep_count < 1:
            raise Inconsistent("keep_count must be >= 1")
        if len(self.keep_indices) != self.keep_count:
            raise Inconsistent(
                f"{len(self.keep_indices)} indices given for keep_count {self.keep_count}")
        if any(b <= a for a, b in zip(self.keep_indices, self.keep_indices[1:])):
            raise Inconsistent("keep_indices must be strictly increasing")


def prunable_layers(net: NetworkSpec) -> range:
    """Every layer but the classifier."""
    return range(len(net.layers) - 1)


def _check_prunable(net, k):
    if not 0 <= k < len(net.layers):
        raise Inconsistent(f"layer index {k} out of range")
    if k == len(net.layers) - 1:
        raise NotPrunable(f"layer {k} is the classifier; its width is the class count")


def choose_num_filters(net: NetworkSpec, k: int, constraint, lut=None):
    """Largest keep count for layer ``k`` whose estimate fits ``constraint``.

    The consumer's input channels shrink along with layer ``k``.  Returns
    ``(keep_count, estimate)`` or ``None`` if even one filter is too costly.
    Resources need not be monotone in the keep count, so every candidate is
    costed from the top down and the first fit wins.
    """
    _check_prunable(net, k)
    widths = net.widths
    metrics = list(constraint)
    for n in range(widths[k], 0, -1):
        widths[k] = n
        est = estimate_keys(shape_keys(net, widths), metrics, lut)
        if est <= constraint:
            return n, est
    return None


def filter_norms(net: NetworkSpec, k: int) -> np.ndarray:
    """L2 norm of each output filter's weights (bias excluded)."""
    w = net.layers[k].weights
    return np.sqrt(np.sum(w.reshape(w.shape[0], -1) ** 2, axis=1))


def choose_which_filters(net: NetworkSpec, k: int, keep_count: int) -> tuple[int, ...]:
    """Indices of the ``keep_count`` largest-norm filters, ascending; ties favour lower index."""
    _check_prunable(net, k)
    total = net.layers[k].out_filters
    if not 1 <= keep_count <= total:
        raise Inconsistent(f"keep_count {keep_count} outside [1, {total}]")
    order = np.argsort(-filter_norms(net, k), kind="stable")
    return tuple(sorted(int(i) for i in order[:keep_count]))


def apply_prune(net: NetworkSpec, decision: PruneDecision) -> NetworkSpec:
    """Keep only the chosen filters of one layer and drop the matching consumer inputs."""
    k = decision.layer_index
    _check_prunable(net, k)
    layer = net.layers[k]
    keep = np.asarray(decision.keep_indices, dtype=np.int64)
    if keep.size and (keep[0] < 0 or keep[-1] >= layer.out_filters):
        raise Inconsistent(f"keep indices out of range for layer {k} with {layer.out_filters} filters")
    pruned = layer.replace(out_filters=keep.size, weights=layer.weights[keep], bias=layer.bias[keep])

    consumer = net.layers[k + 1]
    if consumer.kind is Kind.CONV:
        cw = consumer.weights[:, keep]
        new_in = keep.size
    else:
        _, (c, h, w) = infer_shapes(net)[k]
        hw = h * w
        cols = (keep[:, None] * hw + np.arange(hw)[None, :]).reshape(-1)
        cw = consumer.weights[:, cols]
        new_in = cols.size
    fed = consumer.replace(in_channels=new_in, weights=cw)
    return net.replace_layers({k: pruned, k + 1: fed})


def prune_layer(net: NetworkSpec, k: int, keep_count: int, estimate=None) -> NetworkSpec:
    keep = choose_which_filters(net, k, keep_count)
    return apply_prune(net, PruneDecision(k, keep_count, keep, estimate))
