import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from netadapt.errors import FormatError, InsufficientSamples, NumericalFailure, ShapeMismatch
from netadapt.microtrain import (Dataset, TrainConfig, dataset_from_bytes, dataset_to_bytes,
                                 evaluate_accuracy, forward, loss_and_gradients, split_holdout,
                                 synth_dataset, train)
from netadapt.netgraph import init_network, parse_arch

from conftest import naive_forward, random_net, randomize_biases


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_forward_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    net = randomize_biases(random_net(rng), rng)
    x = rng.standard_normal((3, *net.input_shape))
    np.testing.assert_allclose(forward(net, x), naive_forward(net, x), rtol=1e-10, atol=1e-12)


def test_forward_rejects_wrong_shape():
    net = init_network((1, 4, 4), parse_arch("dense:3"), 0)
    with pytest.raises(ShapeMismatch):
        forward(net, np.zeros((2, 1, 4, 5)))


def test_gradient_of_dense_net_by_hand():
    # one linear layer: dL/dW = (softmax - onehot) x^T / n
    net = init_network((2, 1, 1), parse_arch("dense:3"), 7)
    x = np.array([[1.0, -2.0], [0.5, 0.25]]).reshape(2, 2, 1, 1)
    y = np.array([2, 0])
    loss, grads = loss_and_gradients(net, x, y)
    logits = x.reshape(2, 2) @ net.layers[0].weights.T
    p = np.exp(logits - logits.max(1, keepdims=True))
    p /= p.sum(1, keepdims=True)
    p[np.arange(2), y] -= 1
    np.testing.assert_allclose(grads[0][0], p.T @ x.reshape(2, 2) / 2, rtol=1e-12)
    np.testing.assert_allclose(grads[0][1], p.sum(0) / 2, rtol=1e-12)
    assert loss > 0


def test_zero_iterations_is_identity():
    data = synth_dataset(3, 10, (1, 4, 4), 4.0, 0)
    net = init_network((1, 4, 4), parse_arch("dense:5,dense:3"), 0)
    assert train(net, data, TrainConfig(0.1, 8, 0, 0)) is net


def test_training_is_deterministic_and_learns():
    data = synth_dataset(3, 40, (1, 4, 4), 6.0, 1)
    net = init_network((1, 4, 4), parse_arch("conv:4:3:1:same,dense:3"), 2)
    cfg = TrainConfig(0.05, 16, 150, 3)
    a, b = train(net, data, cfg), train(net, data, cfg)
    assert a == b
    assert evaluate_accuracy(a, data) > max(0.6, evaluate_accuracy(net, data))
    assert train(net, data, TrainConfig(0.05, 16, 150, 4)) != a


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises_numerical_failure():
    data = synth_dataset(2, 20, (1, 3, 3), 50.0, 0)
    net = init_network((1, 3, 3), parse_arch("dense:2"), 0)
    with pytest.raises(NumericalFailure) as info:
        train(net, data, TrainConfig(1e306, 8, 200, 0))
    assert info.value.iteration is not None


@pytest.mark.parametrize("kw", [dict(learning_rate=0), dict(learning_rate=0.1, batch_size=0),
                                dict(learning_rate=0.1, iterations=-1)])
def test_train_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


@settings(max_examples=30, deadline=None)
@given(classes=st.integers(1, 5), per_class=st.integers(2, 12), k=st.integers(1, 11),
       seed=st.integers(0, 1000))
def test_split_holdout_is_balanced_disjoint_and_ordered(classes, per_class, k, seed):
    data = synth_dataset(classes, per_class, (1, 2, 2), 3.0, seed)
    if k >= per_class:
        with pytest.raises(InsufficientSamples):
            split_holdout(data, k, seed)
        return
    rest, hold = split_holdout(data, k, seed)
    assert np.bincount(hold.labels, minlength=classes).tolist() == [k] * classes
    assert len(rest) + len(hold) == len(data)
    # original order preserved: each half is a subsequence of the source
    for part in (rest, hold):
        rows = [np.flatnonzero((data.features == f).all(axis=(1, 2, 3)))[0] for f in part.features]
        assert rows == sorted(rows)
    assert split_holdout(data, k, seed)[1] == hold


def test_synth_dataset_shape_and_balance():
    data = synth_dataset(4, 25, (2, 3, 3), 5.0, 9, modes_per_class=3)
    assert data.features.dtype == np.float32 and data.features.shape == (100, 2, 3, 3)
    assert np.bincount(data.labels).tolist() == [25] * 4
    assert synth_dataset(4, 25, (2, 3, 3), 5.0, 9, modes_per_class=3) == data


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n=st.integers(1, 30))
def test_dataset_round_trip(seed, n):
    rng = np.random.default_rng(seed)
    shape = tuple(int(v) for v in rng.integers(1, 5, size=3))
    classes = int(rng.integers(1, 6))
    data = Dataset(rng.standard_normal((n, *shape)).astype(np.float32),
                   rng.integers(0, classes, n), classes)
    raw = dataset_to_bytes(data)
    back = dataset_from_bytes(raw)
    assert back == data
    assert dataset_to_bytes(back) == raw


def test_dataset_format_errors():
    raw = dataset_to_bytes(synth_dataset(2, 3, (1, 2, 2), 1.0, 0))
    with pytest.raises(FormatError):
        dataset_from_bytes(raw[:10])
    with pytest.raises(FormatError) as info:
        dataset_from_bytes(b"XXXX" + raw[4:])
    assert info.value.offset == 0
    with pytest.raises(FormatError, match="truncated"):
        dataset_from_bytes(raw[:-1])
    with pytest.raises(FormatError, match="trailing"):
        dataset_from_bytes(raw + b"\0")
    with pytest.raises(FormatError, match="version"):
        dataset_from_bytes(raw[:4] + (9).to_bytes(4, "little") + raw[8:])


def test_dataset_rejects_bad_labels():
    with pytest.raises(ShapeMismatch):
        Dataset(np.zeros((2, 1, 1, 1)), np.array([0, 3]), 3)
