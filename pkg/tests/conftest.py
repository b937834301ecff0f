import os
import zlib

import numpy as np
import pytest

from netadapt.netgraph import (Activation, ArchLayer, Kind, Padding, init_network,
                               conv_out_size, same_padding)

TIMING_SKIP_ENV = ("CI", "NETADAPT_SKIP_TIMING")


def timing_disabled():
    return any(os.environ.get(v) for v in TIMING_SKIP_ENV)


def random_arch(rng, max_convs=2, max_dense=2, max_width=6, classes=None):
    n_conv = int(rng.integers(0, max_convs + 1))
    n_dense = int(rng.integers(0, max_dense + 1))
    arch = []
    for _ in range(n_conv):
        k = int(rng.integers(1, 4))
        arch.append(ArchLayer(Kind.CONV, int(rng.integers(1, max_width + 1)), (k, k),
                              int(rng.integers(1, 3)),
                              Padding.SAME if rng.random() < 0.5 else Padding.VALID))
    for _ in range(n_dense):
        arch.append(ArchLayer(Kind.DENSE, int(rng.integers(1, max_width + 1))))
    classes = classes or int(rng.integers(2, 5))
    arch.append(ArchLayer(Kind.DENSE, classes, activation=Activation.NONE))
    return arch


def random_net(rng, input_shape=None, **kw):
    """Random small valid network; retries when VALID convs collapse the map."""
    while True:
        shape = input_shape or (int(rng.integers(1, 4)), int(rng.integers(4, 8)), int(rng.integers(4, 8)))
        arch = random_arch(rng, **kw)
        try:
            return init_network(shape, arch, int(rng.integers(0, 2**31)))
        except Exception:
            continue


def randomize_biases(net, rng, scale=0.1):
    from netadapt.netgraph import NetworkSpec
    layers = [l.replace(bias=rng.normal(0, scale, l.out_filters)) for l in net.layers]
    return NetworkSpec(net.input_shape, tuple(layers), net.class_count)


def naive_forward(net, x):
    """Straightforward nested-loop forward pass, written independently of the engine."""
    out = []
    for sample in np.asarray(x, dtype=np.float64):
        a = sample
        for layer in net.layers:
            if layer.kind is Kind.CONV:
                c, h, w = a.shape
                kh, kw = layer.kernel
                s = layer.stride
                if layer.padding is Padding.SAME:
                    (pt, _), (pl, _) = same_padding(h, kh, s), same_padding(w, kw, s)
                else:
                    pt = pl = 0
                oh = conv_out_size(h, kh, s, layer.padding)
                ow = conv_out_size(w, kw, s, layer.padding)
                res = np.zeros((layer.out_filters, oh, ow))
                for f in range(layer.out_filters):
                    for i in range(oh):
                        for j in range(ow):
                            acc = layer.bias[f]
                            for ch in range(c):
                                for u in range(kh):
                                    for v in range(kw):
                                        y, xx = i * s + u - pt, j * s + v - pl
                                        if 0 <= y < h and 0 <= xx < w:
                                            acc += layer.weights[f, ch, u, v] * a[ch, y, xx]
                            res[f, i, j] = acc
                a = res
            else:
                flat = a.reshape(-1)
                res = np.zeros(layer.out_filters)
                for o in range(layer.out_filters):
                    acc = layer.bias[o]
                    for q in range(flat.size):
                        acc += layer.weights[o, q] * flat[q]
                    res[o] = acc
                a = res
            if layer.activation is Activation.RELU:
                a = np.where(a > 0, a, 0.0)
        out.append(a.reshape(-1))
    return np.array(out)


def hand_macs(layers_desc):
    """MACs from plain tuples: ('conv', cin, cout, kh, kw, oh, ow) or ('dense', fin, fout)."""
    total = 0
    for d in layers_desc:
        if d[0] == "conv":
            _, cin, cout, kh, kw, oh, ow = d
            total += cin * cout * kh * kw * oh * ow
        else:
            total += d[1] * d[2]
    return total


# --- acceptance reporting -----------------------------------------------------------

_ACCEPTANCE = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")
    config.addinivalue_line("markers", "slow: long-running scaled experiment")
    config.addinivalue_line("markers", "timing: wall-clock measurement on this host")


def pytest_runtest_logreport(report):
    crit = report.user_properties and dict(report.user_properties).get("criterion")
    if not crit:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        prev = _ACCEPTANCE.get(crit, "PASS")
        outcome = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
        if prev == "FAIL" or (prev == "SKIP" and outcome == "PASS"):
            outcome = prev
        _ACCEPTANCE[crit] = outcome


def pytest_collection_modifyitems(items):
    for item in items:
        marker = item.get_closest_marker("criterion")
        if marker:
            number, title = marker.args
            item.user_properties.append(("criterion", f"{number:>2}. {title}"))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for crit in sorted(_ACCEPTANCE, key=lambda c: int(c.split(".")[0])):
        terminalreporter.write_line(f"[{_ACCEPTANCE[crit]}] {crit}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def synthetic_lut(net, step=1, seed=0):
    """LUT from a deterministic fake device: latency ~ MACs with +-20% per-key noise (not monotone)."""
    from netadapt.costmodel import MeasurementConfig, build_lut
    salt = np.random.default_rng(seed).integers(1, 2**31)

    def measure(key):
        jitter = np.random.default_rng([salt, zlib.crc32(key.to_string().encode())]).random()
        return 0.002 + key.macs * 1e-4 * (0.8 + 0.4 * jitter)

    return build_lut(net, MeasurementConfig(channel_grid_step=step), measure=measure)


def exhaustive_num_filters(net, k, constraint, lut=None):
    """Oracle: actually prune to every keep count and cost the resulting network."""
    from netadapt.costmodel import estimate_resources
    from netadapt.pruner import prune_layer
    best = None
    for n in range(1, net.layers[k].out_filters + 1):
        est = estimate_resources(prune_layer(net, k, n), list(constraint), lut)
        if all(est[m] <= constraint[m] for m in constraint):
            best = (n, est)
    return best


def masked_network(net, k, keep):
    """Full-size copy of ``net`` with every filter of layer ``k`` outside ``keep`` zeroed."""
    layer = net.layers[k]
    drop = np.setdiff1d(np.arange(layer.out_filters), np.asarray(keep, dtype=int))
    w, b = layer.weights.copy(), layer.bias.copy()
    w[drop] = 0.0
    b[drop] = 0.0
    return net.replace_layers({k: layer.replace(weights=w, bias=b)})


def random_constraint(net, rng, metrics, lut=None):
    """Constraint somewhere between 'prune to one filter' and 'no pruning'."""
    from netadapt.costmodel import ResourceVector, estimate_resources
    full = estimate_resources(net, metrics, lut)
    return ResourceVector({m: full[m] * rng.uniform(0.2, 1.05) for m in full})


def check_adapt_invariants(result, net0, budget, schedule, lut=None):
    """Loop invariants that must hold on every adaptation run (zero tolerance)."""
    from netadapt.adapt import Status, delta
    from netadapt.costmodel import estimate_resources
    metrics = budget.metrics
    prev_net, prev_res = net0, estimate_resources(net0, metrics, lut)
    chosen = [r for r in result.records if r.layer is not None]
    assert len(chosen) == len(result.frontier.points)
    for i, (rec, point) in enumerate(zip(chosen, result.frontier.points), start=1):
        assert rec.iteration == point.iteration == i
        est = estimate_resources(point.network, metrics, lut)
        assert est == point.resources == rec.resources
        for m in metrics:
            assert est[m] <= prev_res[m] - delta(schedule, i, m), (i, m)
        # exactly one layer changes width; layer types and geometry are untouched
        changed = [k for k, (a, b) in enumerate(zip(prev_net.widths, point.network.widths)) if a != b]
        assert changed == [rec.layer] and point.network.widths[rec.layer] == rec.keep_count
        for a, b in zip(prev_net.layers, point.network.layers):
            assert (a.kind, a.kernel, a.stride, a.padding, a.activation) == \
                (b.kind, b.kernel, b.stride, b.padding, b.activation)
        ok = [p for p in rec.proposals if p[4] == "ok"]
        assert max(p[2] for p in ok) == rec.holdout_accuracy
        prev_net, prev_res = point.network, est
    points = result.frontier.all_points()
    for a, b in zip(points, points[1:]):
        for m in metrics:
            assert b.resources[m] <= a.resources[m]
    final_res = estimate_resources(result.final, metrics, lut)
    assert result.final.widths == prev_net.widths
    if result.status is Status.ALREADY_WITHIN_BUDGET:
        assert not result.records and not result.frontier.points
    elif result.status is Status.BUDGET_MET:
        assert not final_res.exceeds(budget.as_vector())
        assert all(r.layer is not None for r in result.records)
    else:
        assert result.records[-1].layer is None


def assert_same_run(a, b):
    """Bitwise equality of two adaptation results."""
    assert a.status == b.status
    assert a.final == b.final
    assert a.records == b.records
    pa, pb = a.frontier.all_points(), b.frontier.all_points()
    assert len(pa) == len(pb)
    for x, y in zip(pa, pb):
        assert x.network == y.network
        assert (x.iteration, x.layer, x.keep_count, x.accuracy, x.resources, x.macs, x.latency_ms) == \
            (y.iteration, y.layer, y.keep_count, y.accuracy, y.resources, y.macs, y.latency_ms)
