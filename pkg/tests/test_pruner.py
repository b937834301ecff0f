import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from netadapt.costmodel import Metric, ResourceVector, estimate_resources
from netadapt.errors import Inconsistent, NotPrunable
from netadapt.microtrain import forward
from netadapt.netgraph import Kind, NetworkSpec, count_macs, init_network, parse_arch
from netadapt.pruner import (PruneDecision, apply_prune, choose_num_filters, choose_which_filters,
                             filter_norms, prunable_layers, prune_layer)

from conftest import (exhaustive_num_filters, masked_network, random_constraint, random_net,
                      randomize_biases, synthetic_lut)


def test_classifier_is_not_prunable():
    net = init_network((1, 4, 4), parse_arch("conv:3:3:1:same,dense:2"), 0)
    assert list(prunable_layers(net)) == [0]
    with pytest.raises(NotPrunable):
        choose_which_filters(net, 1, 1)
    with pytest.raises(Inconsistent):
        choose_which_filters(net, 5, 1)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), use_lut=st.booleans())
def test_choose_num_filters_matches_exhaustive_oracle(seed, use_lut):
    rng = np.random.default_rng(seed)
    net = random_net(rng, max_width=6)
    metrics = [Metric.LATENCY, Metric.MACS] if use_lut else [Metric.MACS]
    lut = synthetic_lut(net, step=int(rng.integers(1, 3)), seed=seed) if use_lut else None
    con = random_constraint(net, rng, metrics, lut)
    for k in prunable_layers(net):
        got = choose_num_filters(net, k, con, lut)
        want = exhaustive_num_filters(net, k, con, lut)
        assert (got is None) == (want is None)
        if got is not None:
            assert got[0] == want[0] and got[1] == want[1]


def test_choose_num_filters_reports_unreachable_constraint():
    net = init_network((1, 4, 4), parse_arch("conv:3:3:1:same,dense:2"), 0)
    assert choose_num_filters(net, 0, ResourceVector({"macs": 1})) is None
    n, est = choose_num_filters(net, 0, ResourceVector({"macs": count_macs(net)}))
    assert n == 3 and est[Metric.MACS] == count_macs(net)


def test_filter_choice_by_norm_ignores_bias_and_prefers_lower_index():
    net = init_network((1, 2, 2), parse_arch("dense:4,dense:2"), 0)
    w = np.array([[1.0, 0, 0, 0], [0, 3.0, 0, 0], [0, 0, 1.0, 0], [2.0, 0, 0, 0]])
    layer = net.layers[0].replace(weights=w, bias=np.array([0.0, 0.0, 100.0, 0.0]))
    net = net.replace_layers({0: layer})
    np.testing.assert_allclose(filter_norms(net, 0), [1, 3, 1, 2])
    assert choose_which_filters(net, 0, 2) == (1, 3)
    assert choose_which_filters(net, 0, 3) == (0, 1, 3)


@pytest.mark.parametrize("kw", [dict(keep_count=0, keep_indices=()),
                                dict(keep_count=2, keep_indices=(1,)),
                                dict(keep_count=2, keep_indices=(2, 1))])
def test_prune_decision_validation(kw):
    with pytest.raises(Inconsistent):
        PruneDecision(0, **kw)


def test_out_of_range_indices():
    net = init_network((1, 4, 4), parse_arch("conv:3:3:1:same,dense:2"), 0)
    with pytest.raises(Inconsistent):
        apply_prune(net, PruneDecision(0, 1, (7,)))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_keep_all_is_bitwise_identity(seed):
    rng = np.random.default_rng(seed)
    net = randomize_biases(random_net(rng), rng)
    x = rng.standard_normal((4, *net.input_shape))
    base = forward(net, x)
    for k in prunable_layers(net):
        n = net.layers[k].out_filters
        same = apply_prune(net, PruneDecision(k, n, tuple(range(n))))
        assert same == net
        assert forward(same, x).tobytes() == base.tobytes()


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_prune_equals_masked_full_network(seed):
    rng = np.random.default_rng(seed)
    net = randomize_biases(random_net(rng), rng)
    x = rng.standard_normal((4, *net.input_shape))
    for k in prunable_layers(net):
        n = net.layers[k].out_filters
        keep = tuple(sorted(rng.choice(n, int(rng.integers(1, n + 1)), replace=False).tolist()))
        pruned = apply_prune(net, PruneDecision(k, len(keep), keep))
        assert pruned.widths[k] == len(keep)
        assert [l.out_filters for i, l in enumerate(pruned.layers) if i != k] == \
            [l.out_filters for i, l in enumerate(net.layers) if i != k]
        np.testing.assert_allclose(forward(pruned, x), forward(masked_network(net, k, keep), x),
                                   rtol=0, atol=1e-6)


def test_conv_to_dense_prune_drops_channel_blocks():
    net = init_network((1, 2, 2), parse_arch("conv:3:1:1:same,dense:2"), 0)
    pruned = apply_prune(net, PruneDecision(0, 1, (2,)))
    # flattened layout is channel-major: channel 2 owns columns 8..11
    np.testing.assert_array_equal(pruned.layers[1].weights, net.layers[1].weights[:, 8:12])
    assert pruned.layers[1].in_channels == 4


def test_prune_layer_reduces_estimate():
    net = init_network((3, 8, 8), parse_arch("conv:8:3:1:same,conv:8:3:2:same,dense:4"), 0)
    smaller = prune_layer(net, 1, 5)
    assert estimate_resources(smaller, ["macs"])[Metric.MACS] < count_macs(net)
    assert isinstance(smaller, NetworkSpec) and smaller.layers[2].kind is Kind.DENSE
