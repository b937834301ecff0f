"""Minimal numpy training engine: forward/backward, SGD, accuracy, datasets.

All arithmetic is float64.  Convolutions use im2col via
``sliding_window_view`` so one conv becomes one matrix product.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import FormatError, InsufficientSamples, NumericalFailure, ShapeMismatch
from .netgraph import Activation, Kind, LayerSpec, NetworkSpec, Padding, conv_out_size, same_padding

DATASET_MAGIC = b"DSET"
DATASET_VERSION = 1
_HEADER = struct.Struct("<4s6I")


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray  # (n, c, h, w) float32
    labels: np.ndarray  # (n,) int64
    class_count: int

    def __post_init__(self):
        feats = np.ascontiguousarray(self.features, dtype=np.float32)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if feats.ndim != 4:
            raise ShapeMismatch(f"features must be (n, c, h, w), got {feats.shape}")
        if labels.shape != (feats.shape[0],):
            raise ShapeMismatch("one label per sample required")
        if feats.shape[0] < 1:
            raise ShapeMismatch("dataset must hold at least one sample")
        if labels.min() < 0 or labels.max() >= self.class_count:
            raise ShapeMismatch(f"labels must lie in [0, {self.class_count})")
        feats.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return self.labels.shape[0]

    @property
    def sample_shape(self):
        return tuple(self.features.shape[1:])

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.class_count)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.class_count == other.class_count
                and self.features.shape == other.features.shape
                and self.features.tobytes() == other.features.tobytes()
                and self.labels.tobytes() == other.labels.tobytes())

    __hash__ = None


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float
    batch_size: int = 32
    iterations: int = 0
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")


# --- layer kernels ---------------------------------------------------------

def conv2d_forward(x, weights, bias, stride, padding):
    """Returns ``(out, cols)``; ``cols`` is the im2col matrix kept for backward."""
    n, c, h, w = x.shape
    f, _, kh, kw = weights.shape
    if padding is Padding.SAME:
        ph, pw = same_padding(h, kh, stride), same_padding(w, kw, stride)
        x = np.pad(x, ((0, 0), (0, 0), ph, pw))
    oh = conv_out_size(h, kh, stride, padding)
    ow = conv_out_size(w, kw, stride, padding)
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :oh, :ow]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)
    out = cols @ weights.reshape(f, -1).T + bias
    return out.reshape(n, oh, ow, f).transpose(0, 3, 1, 2), cols


def conv2d_backward(dout, cols, weights, in_shape, stride, padding, need_dx=True):
    n, c, h, w = in_shape
    f, _, kh, kw = weights.shape
    _, _, oh, ow = dout.shape
    dmat = dout.transpose(0, 2, 3, 1).reshape(-1, f)
    dw = (dmat.T @ cols).reshape(weights.shape)
    db = dmat.sum(axis=0)
    if not need_dx:
        return None, dw, db
    (pt, pb), (pl, pr) = ((0, 0), (0, 0))
    if padding is Padding.SAME:
        (pt, pb), (pl, pr) = same_padding(h, kh, stride), same_padding(w, kw, stride)
    dcols = (dmat @ weights.reshape(f, -1)).reshape(n, oh, ow, c, kh, kw)
    dxp = np.zeros((n, c, h + pt + pb, w + pl + pr))
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * (oh - 1) + 1:stride, j:j + stride * (ow - 1) + 1:stride] += \
                dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return dxp[:, :, pt:pt + h, pl:pl + w], dw, db


def layer_forward(layer: LayerSpec, x):
    """Single-layer forward on a batch, activation included (used for timing too)."""
    if layer.kind is Kind.CONV:
        out, _ = conv2d_forward(x, layer.weights, layer.bias, layer.stride, layer.padding)
    else:
        out = x.reshape(x.shape[0], -1) @ layer.weights.T + layer.bias
    if layer.activation is Activation.RELU:
        out = np.maximum(out, 0.0)
    return out


def _check_batch(net, batch):
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 4 or tuple(batch.shape[1:]) != net.input_shape:
        raise ShapeMismatch(f"batch shape {batch.shape} does not match input {net.input_shape}")
    return batch


def forward(net: NetworkSpec, batch) -> np.ndarray:
    x = _check_batch(net, batch)
    for layer in net.layers:
        x = layer_forward(layer, x)
    return x


def _forward_train(weights, biases, layers, x):
    caches = []
    for layer, wt, b in zip(layers, weights, biases):
        inp_shape = x.shape
        if layer.kind is Kind.CONV:
            out, cols = conv2d_forward(x, wt, b, layer.stride, layer.padding)
        else:
            cols = x.reshape(x.shape[0], -1)
            out = cols @ wt.T + b
        if layer.activation is Activation.RELU:
            out = np.maximum(out, 0.0)
        caches.append((inp_shape, cols, out))
        x = out
    return x, caches


def _softmax_xent(logits, labels):
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    n = logits.shape[0]
    loss = float(np.mean(lse - shifted[np.arange(n), labels]))
    probs = np.exp(shifted - lse[:, None])
    probs[np.arange(n), labels] -= 1.0
    return loss, probs / n


def _backward(weights, layers, caches, dlogits):
    grads = [None] * len(layers)
    d = dlogits
    for idx in range(len(layers) - 1, -1, -1):
        layer = layers[idx]
        inp_shape, cols, out = caches[idx]
        if layer.activation is Activation.RELU:
            d = d * (out > 0)
        if layer.kind is Kind.CONV:
            dx, dw, db = conv2d_backward(d, cols, weights[idx], inp_shape, layer.stride,
                                         layer.padding, need_dx=idx > 0)
        else:
            dw = d.T @ cols
            db = d.sum(axis=0)
            dx = (d @ weights[idx]).reshape(inp_shape) if idx > 0 else None
        grads[idx] = (dw, db)
        d = dx
    return grads


def loss_and_gradients(net: NetworkSpec, batch, labels):
    """Mean softmax cross-entropy and its exact gradient per layer.

    Returns ``(loss, [(d_weights, d_bias), ...])`` in layer order.
    """
    x = _check_batch(net, batch)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (x.shape[0],):
        raise ShapeMismatch("need exactly one label per sample")
    weights = [l.weights for l in net.layers]
    biases = [l.bias for l in net.layers]
    logits, caches = _forward_train(weights, biases, net.layers, x)
    loss, dlogits = _softmax_xent(logits, labels)
    if not np.isfinite(loss):
        raise NumericalFailure("non-finite loss")
    return loss, _backward(weights, net.layers, caches, dlogits)


def _batches(n, batch_size, rng):
    order, pos = rng.permutation(n), 0
    while True:
        picked = []
        need = batch_size
        while need:
            if pos == n:
                order, pos = rng.permutation(n), 0
            take = min(need, n - pos)
            picked.append(order[pos:pos + take])
            pos += take
            need -= take
        yield np.concatenate(picked)


def train(net: NetworkSpec, data: Dataset, cfg: TrainConfig) -> NetworkSpec:
    """Plain minibatch SGD for ``cfg.iterations`` steps; deterministic in ``cfg.seed``."""
    if cfg.iterations == 0:
        return net
    if data.sample_shape != net.input_shape:
        raise ShapeMismatch(f"dataset samples {data.sample_shape} vs network input {net.input_shape}")
    rng = np.random.default_rng(cfg.seed)
    weights = [l.weights.copy() for l in net.layers]
    biases = [l.bias.copy() for l in net.layers]
    feats, labels = data.features, data.labels
    stream = _batches(len(data), cfg.batch_size, rng)
    for it in range(cfg.iterations):
        idx = next(stream)
        logits, caches = _forward_train(weights, biases, net.layers, feats[idx].astype(np.float64))
        loss, dlogits = _softmax_xent(logits, labels[idx])
        if not np.isfinite(loss):
            raise NumericalFailure("non-finite loss during training", iteration=it)
        for (dw, db), wt, b in zip(_backward(weights, net.layers, caches, dlogits), weights, biases):
            wt -= cfg.learning_rate * dw
            b -= cfg.learning_rate * db
    layers = tuple(l.replace(weights=wt, bias=b) for l, wt, b in zip(net.layers, weights, biases))
    return NetworkSpec(net.input_shape, layers, net.class_count)


def predict(net: NetworkSpec, features, chunk=1024) -> np.ndarray:
    preds = [np.argmax(forward(net, features[s:s + chunk]), axis=1)
             for s in range(0, features.shape[0], chunk)]
    return np.concatenate(preds)


def evaluate_accuracy(net: NetworkSpec, data: Dataset) -> float:
    """Fraction of argmax hits; ``np.argmax`` resolves ties to the lowest class."""
    if data.sample_shape != net.input_shape:
        raise ShapeMismatch(f"dataset samples {data.sample_shape} vs network input {net.input_shape}")
    return float(np.mean(predict(net, data.features) == data.labels))


def split_holdout(data: Dataset, per_class: int, seed: int):
    """Class-balanced holdout of ``per_class`` samples per class.

    Both halves keep the original sample order.
    """
    rng = np.random.default_rng(seed)
    chosen = []
    for label in range(data.class_count):
        members = np.flatnonzero(data.labels == label)
        if members.size <= per_class:
            raise InsufficientSamples(label, members.size, per_class)
        chosen.append(members[rng.permutation(members.size)[:per_class]])
    mask = np.zeros(len(data), dtype=bool)
    mask[np.concatenate(chosen)] = True
    return data.subset(np.flatnonzero(~mask)), data.subset(np.flatnonzero(mask))


def synth_dataset(class_count, per_class, shape, separation, seed, modes_per_class=1) -> Dataset:
    """Gaussian blobs: random prototypes plus unit-variance noise.

    Prototype coordinates are drawn with variance ``separation**2 / (2 * dim)``
    so the expected distance between two prototypes is about ``separation``.
    With ``modes_per_class > 1`` each class is a union of that many blobs
    (samples spread round-robin over them), which makes the classes
    non-linearly separable.
    """
    if class_count < 1 or per_class < 1 or modes_per_class < 1 or min(shape) < 1:
        raise ValueError("class_count, per_class, modes_per_class and shape entries must be >= 1")
    rng = np.random.default_rng(seed)
    dim = int(np.prod(shape))
    protos = rng.standard_normal((class_count * modes_per_class, dim)) * (separation / np.sqrt(2.0 * dim))
    labels = np.repeat(np.arange(class_count), per_class)
    modes = np.tile(np.arange(per_class) % modes_per_class, class_count)
    order = rng.permutation(labels.size)
    labels, modes = labels[order], modes[order]
    feats = protos[labels * modes_per_class + modes] + rng.standard_normal((labels.size, dim))
    return Dataset(feats.reshape(labels.size, *shape).astype(np.float32), labels, class_count)


def dataset_to_bytes(data: Dataset) -> bytes:
    n = len(data)
    c, h, w = data.sample_shape
    head = _HEADER.pack(DATASET_MAGIC, DATASET_VERSION, n, data.class_count, c, h, w)
    return head + data.labels.astype("<u4").tobytes() + data.features.astype("<f4").tobytes()


def dataset_from_bytes(raw: bytes) -> Dataset:
    if len(raw) < _HEADER.size:
        raise FormatError("file shorter than dataset header", len(raw))
    magic, version, n, classes, c, h, w = _HEADER.unpack_from(raw, 0)
    if magic != DATASET_MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != DATASET_VERSION:
        raise FormatError(f"unsupported dataset version {version}", 4)
    if n < 1 or classes < 1 or min(c, h, w) < 1:
        raise FormatError("header counts must be >= 1", 8)
    off = _HEADER.size
    need = off + 4 * n + 4 * n * c * h * w
    if len(raw) < need:
        raise FormatError(f"payload truncated: need {need} bytes for n={n}, have {len(raw)}", len(raw))
    if len(raw) > need:
        raise FormatError("trailing bytes after payload", need)
    labels = np.frombuffer(raw, dtype="<u4", count=n, offset=off)
    if labels.max() >= classes:
        bad = int(np.argmax(labels >= classes))
        raise FormatError(f"label {labels[bad]} >= class_count {classes}", off + 4 * bad)
    feats = np.frombuffer(raw, dtype="<f4", count=n * c * h * w, offset=off + 4 * n)
    return Dataset(feats.reshape(n, c, h, w), labels.astype(np.int64), classes)


def save_dataset(data: Dataset, path) -> None:
    from ._io import atomic_write_bytes
    atomic_write_bytes(path, dataset_to_bytes(data))


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        return dataset_from_bytes(fh.read())
