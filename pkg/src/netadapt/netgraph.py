"""Feed-forward network description: layers, shapes, MAC counts, model files.

Networks are chains of 2-D convolutions followed by dense layers.  A flatten
is implied between the last convolution and the first dense layer, using
channel-major ordering (all spatial positions of channel 0, then channel 1,
...), which is exactly what ``ndarray.reshape(n, -1)`` does on NCHW data.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ChannelMismatch, EmptySpatial, FormatError, InvalidAlpha, NetAdaptError

MODEL_MAGIC = b"NETMODEL\n"
MODEL_VERSION = 1


class Kind(str, Enum):
    CONV = "conv"
    DENSE = "dense"


class Padding(str, Enum):
    SAME = "same"
    VALID = "valid"


class Activation(str, Enum):
    RELU = "relu"
    NONE = "none"


def _frozen_array(values, shape=None):
    # C order always: BLAS rounding depends on memory layout, and pruning
    # by fancy indexing can hand us Fortran-ordered slices.
    arr = np.array(values, dtype=np.float64, copy=True, order="C")
    if shape is not None and arr.shape != tuple(shape):
        raise ChannelMismatch(f"array shape {arr.shape} does not match declared {tuple(shape)}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class LayerSpec:
    """One Conv2D or Dense layer.

    For dense layers ``in_channels`` is the number of input features, and
    ``kernel``/``stride``/``padding`` are ignored.
    """

    kind: Kind
    in_channels: int
    out_filters: int
    weights: np.ndarray
    bias: np.ndarray
    kernel: tuple[int, int] = (1, 1)
    stride: int = 1
    padding: Padding = Padding.VALID
    activation: Activation = Activation.RELU

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        object.__setattr__(self, "padding", Padding(self.padding))
        object.__setattr__(self, "activation", Activation(self.activation))
        object.__setattr__(self, "kernel", (int(self.kernel[0]), int(self.kernel[1])))
        if self.out_filters < 1 or self.in_channels < 1:
            raise ChannelMismatch("layer needs at least one input channel and one filter")
        if self.kind is Kind.CONV:
            if min(self.kernel) < 1 or self.stride < 1:
                raise ChannelMismatch("kernel and stride must be >= 1")
        else:
            object.__setattr__(self, "kernel", (1, 1))
            object.__setattr__(self, "stride", 1)
            object.__setattr__(self, "padding", Padding.VALID)
        object.__setattr__(self, "weights", _frozen_array(self.weights, self.weight_shape))
        object.__setattr__(self, "bias", _frozen_array(self.bias, (self.out_filters,)))

    @property
    def weight_shape(self):
        if self.kind is Kind.CONV:
            return (self.out_filters, self.in_channels, *self.kernel)
        return (self.out_filters, self.in_channels)

    @property
    def param_count(self):
        return self.weights.size + self.bias.size

    def replace(self, **changes) -> "LayerSpec":
        fields = dict(
            kind=self.kind, in_channels=self.in_channels, out_filters=self.out_filters,
            weights=self.weights, bias=self.bias, kernel=self.kernel, stride=self.stride,
            padding=self.padding, activation=self.activation,
        )
        fields.update(changes)
        return LayerSpec(**fields)

    def __eq__(self, other):
        if not isinstance(other, LayerSpec):
            return NotImplemented
        return (
            self.kind == other.kind
            and self.in_channels == other.in_channels
            and self.out_filters == other.out_filters
            and self.kernel == other.kernel
            and self.stride == other.stride
            and self.padding == other.padding
            and self.activation == other.activation
            and _bitwise_equal(self.weights, other.weights)
            and _bitwise_equal(self.bias, other.bias)
        )

    __hash__ = None


def _bitwise_equal(a, b):
    return a.shape == b.shape and a.dtype == b.dtype and a.tobytes() == b.tobytes()


@dataclass(frozen=True)
class LayerShapeKey:
    """Everything that determines a layer's cost, and nothing else.

    Dense keys carry the shape of the (pre-flatten) producer output, so
    ``in_features == in_channels * in_h * in_w``.  Pruning the producer then
    only moves ``in_channels``, the same way it does for convolutions.
    """

    kind: Kind
    in_channels: int
    out_filters: int
    in_h: int
    in_w: int
    kernel: tuple[int, int] = (1, 1)
    stride: int = 1
    padding: Padding = Padding.VALID

    @property
    def family(self) -> tuple:
        return (self.kind, self.in_h, self.in_w, self.kernel, self.stride, self.padding)

    @property
    def in_features(self) -> int:
        return self.in_channels * self.in_h * self.in_w

    @property
    def out_hw(self) -> tuple[int, int]:
        if self.kind is Kind.DENSE:
            return (1, 1)
        return (
            conv_out_size(self.in_h, self.kernel[0], self.stride, self.padding),
            conv_out_size(self.in_w, self.kernel[1], self.stride, self.padding),
        )

    @property
    def macs(self) -> int:
        if self.kind is Kind.DENSE:
            return self.out_filters * self.in_features
        oh, ow = self.out_hw
        return oh * ow * self.out_filters * self.in_channels * self.kernel[0] * self.kernel[1]

    def with_channels(self, in_channels: int, out_filters: int) -> "LayerShapeKey":
        return LayerShapeKey(self.kind, in_channels, out_filters, self.in_h, self.in_w,
                             self.kernel, self.stride, self.padding)

    def to_string(self) -> str:
        k = self.kind.value
        if self.kind is Kind.DENSE:
            return f"{k}|in={self.in_channels}|out={self.out_filters}|hw={self.in_h}x{self.in_w}"
        return (f"{k}|in={self.in_channels}|out={self.out_filters}|hw={self.in_h}x{self.in_w}"
                f"|k={self.kernel[0]}x{self.kernel[1]}|s={self.stride}|{self.padding.value}")

    @classmethod
    def from_string(cls, text: str) -> "LayerShapeKey":
        parts = text.split("|")
        kind = Kind(parts[0])
        fields = dict(p.split("=", 1) for p in parts[1:] if "=" in p)
        h, w = (int(v) for v in fields["hw"].split("x"))
        if kind is Kind.DENSE:
            if len(parts) != 4:
                raise ValueError(f"bad dense key {text!r}")
            return cls(kind, int(fields["in"]), int(fields["out"]), h, w)
        if len(parts) != 7:
            raise ValueError(f"bad conv key {text!r}")
        kh, kw = (int(v) for v in fields["k"].split("x"))
        return cls(kind, int(fields["in"]), int(fields["out"]), h, w, (kh, kw),
                   int(fields["s"]), Padding(parts[6]))


def conv_out_size(size: int, k: int, stride: int, padding: Padding) -> int:
    if padding is Padding.SAME:
        return -(-size // stride)
    return (size - k) // stride + 1


def same_padding(size: int, k: int, stride: int) -> tuple[int, int]:
    """Split of the total SAME padding; the extra pixel (if any) goes after."""
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return total // 2, total - total // 2


def _infer(input_shape, layers):
    shapes = []
    c, h, w = input_shape
    flat = False
    for idx, layer in enumerate(layers):
        if layer.kind is Kind.CONV:
            if flat:
                raise ChannelMismatch(f"layer {idx}: convolution cannot follow a dense layer")
            if layer.in_channels != c:
                raise ChannelMismatch(
                    f"layer {idx}: expects {layer.in_channels} input channels, producer gives {c}")
            oh = conv_out_size(h, layer.kernel[0], layer.stride, layer.padding)
            ow = conv_out_size(w, layer.kernel[1], layer.stride, layer.padding)
            if oh <= 0 or ow <= 0:
                raise EmptySpatial(f"layer {idx}: output spatial size {oh}x{ow}")
            shapes.append(((c, h, w), (layer.out_filters, oh, ow)))
            c, h, w = layer.out_filters, oh, ow
        else:
            if layer.in_channels != c * h * w:
                raise ChannelMismatch(
                    f"layer {idx}: expects {layer.in_channels} input features, "
                    f"producer gives {c}x{h}x{w} = {c * h * w}")
            shapes.append(((c, h, w), (layer.out_filters, 1, 1)))
            c, h, w = layer.out_filters, 1, 1
            flat = True
    return shapes


@dataclass(frozen=True, eq=False)
class NetworkSpec:
    input_shape: tuple[int, int, int]
    layers: tuple[LayerSpec, ...]
    class_count: int

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ChannelMismatch(f"bad input shape {self.input_shape}")
        if not self.layers:
            raise ChannelMismatch("network needs at least one layer")
        last = self.layers[-1]
        if last.kind is not Kind.DENSE or last.activation is not Activation.NONE:
            raise ChannelMismatch("final layer must be a dense layer without activation")
        if last.out_filters != self.class_count:
            raise ChannelMismatch(
                f"classifier has {last.out_filters} outputs but class_count is {self.class_count}")
        _infer(self.input_shape, self.layers)

    @property
    def widths(self) -> list[int]:
        return [layer.out_filters for layer in self.layers]

    @property
    def param_count(self) -> int:
        return sum(layer.param_count for layer in self.layers)

    def replace_layers(self, replacements: dict[int, LayerSpec]) -> "NetworkSpec":
        layers = list(self.layers)
        for idx, layer in replacements.items():
            layers[idx] = layer
        return NetworkSpec(self.input_shape, tuple(layers), self.class_count)

    def __eq__(self, other):
        if not isinstance(other, NetworkSpec):
            return NotImplemented
        return (self.input_shape == other.input_shape
                and self.class_count == other.class_count
                and len(self.layers) == len(other.layers)
                and all(a == b for a, b in zip(self.layers, other.layers)))

    __hash__ = None


def infer_shapes(net: NetworkSpec):
    """Per-layer ``(input_shape, output_shape)`` as (channels, h, w) triples.

    Dense layers report their input as the un-flattened producer shape and
    their output as ``(units, 1, 1)``.
    """
    return _infer(net.input_shape, net.layers)


def shape_keys(net: NetworkSpec, widths=None) -> list[LayerShapeKey]:
    """Cost keys for every layer, optionally with overridden filter counts.

    ``widths`` lets callers cost a hypothetical pruned network without
    materialising its weights; consumer input channels follow the producer.
    """
    if widths is None:
        widths = net.widths
    keys = []
    c, h, w = net.input_shape
    for layer, out in zip(net.layers, widths):
        key = LayerShapeKey(layer.kind, c, out, h, w, layer.kernel, layer.stride, layer.padding)
        keys.append(key)
        if layer.kind is Kind.CONV:
            (h, w), c = key.out_hw, out
        else:
            c, h, w = out, 1, 1
    return keys


def count_macs(net: NetworkSpec) -> int:
    """Multiply-accumulates of all conv and dense layers (bias/activation free)."""
    infer_shapes(net)
    return sum(key.macs for key in shape_keys(net))


# --- architecture descriptions and initialisation -------------------------

@dataclass(frozen=True)
class ArchLayer:
    kind: Kind
    out_filters: int
    kernel: tuple[int, int] = (1, 1)
    stride: int = 1
    padding: Padding = Padding.VALID
    activation: Activation = Activation.RELU


def architecture(net: NetworkSpec) -> list[ArchLayer]:
    return [ArchLayer(l.kind, l.out_filters, l.kernel, l.stride, l.padding, l.activation)
            for l in net.layers]


def parse_arch(descriptor: str) -> list[ArchLayer]:
    """Parse ``conv:16:3:1:same,conv:32:3:2:same,dense:10``.

    conv fields are ``filters:kernel:stride:padding``; the kernel is square.
    Every layer gets ReLU except the last, which must be dense.
    """
    items = [s.strip() for s in descriptor.split(",") if s.strip()]
    if not items:
        raise ValueError("empty architecture descriptor")
    arch = []
    for pos, item in enumerate(items):
        parts = item.split(":")
        act = Activation.NONE if pos == len(items) - 1 else Activation.RELU
        if parts[0] == "conv":
            if len(parts) != 5:
                raise ValueError(f"conv layer needs conv:filters:kernel:stride:padding, got {item!r}")
            k = int(parts[2])
            arch.append(ArchLayer(Kind.CONV, int(parts[1]), (k, k), int(parts[3]),
                                  Padding(parts[4].lower()), act))
        elif parts[0] == "dense":
            if len(parts) != 2:
                raise ValueError(f"dense layer needs dense:units, got {item!r}")
            arch.append(ArchLayer(Kind.DENSE, int(parts[1]), activation=act))
        else:
            raise ValueError(f"unknown layer kind in {item!r}")
    if arch[-1].kind is not Kind.DENSE:
        raise ValueError("last layer must be dense")
    return arch


def init_network(input_shape, arch: list[ArchLayer], seed: int) -> NetworkSpec:
    """Glorot-uniform weights, zero biases, one generator walked layer by layer."""
    rng = np.random.default_rng(seed)
    layers = []
    c, h, w = input_shape
    for a in arch:
        if a.kind is Kind.CONV:
            kh, kw = a.kernel
            fan_in, fan_out = c * kh * kw, a.out_filters * kh * kw
            shape = (a.out_filters, c, kh, kw)
            in_ch = c
        else:
            in_ch = c * h * w
            fan_in, fan_out = in_ch, a.out_filters
            shape = (a.out_filters, in_ch)
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        weights = rng.uniform(-limit, limit, size=shape)
        layer = LayerSpec(a.kind, in_ch, a.out_filters, weights, np.zeros(a.out_filters),
                          a.kernel, a.stride, a.padding, a.activation)
        layers.append(layer)
        if a.kind is Kind.CONV:
            h = conv_out_size(h, kh, a.stride, a.padding)
            w = conv_out_size(w, kw, a.stride, a.padding)
            if h <= 0 or w <= 0:
                raise EmptySpatial(f"architecture collapses to {h}x{w}")
            c = a.out_filters
        else:
            c, h, w = a.out_filters, 1, 1
    return NetworkSpec(tuple(input_shape), tuple(layers), arch[-1].out_filters)


def scaled_width(width: int, alpha: float) -> int:
    """Round half up, never below one filter."""
    return max(1, math.floor(alpha * width + 0.5))


def width_multiplier(net: NetworkSpec, alpha: float, seed: int = 0) -> NetworkSpec:
    """Scale every non-classifier width by ``alpha`` and re-initialise weights.

    The result is a fresh network meant to be trained from scratch; only the
    architecture of ``net`` is used.
    """
    if not (0.0 < alpha <= 1.0) or math.isnan(alpha):
        raise InvalidAlpha(f"alpha must be in (0, 1], got {alpha}")
    arch = architecture(net)
    scaled = [
        ArchLayer(a.kind, scaled_width(a.out_filters, alpha), a.kernel, a.stride,
                  a.padding, a.activation)
        for a in arch[:-1]
    ] + [arch[-1]]
    return init_network(net.input_shape, scaled, seed)


# --- model files ----------------------------------------------------------

def serialize(net: NetworkSpec) -> bytes:
    """Magic line, one-line JSON header, then raw little-endian float64 payload."""
    layer_meta = []
    chunks = []
    offset = 0
    for layer in net.layers:
        w = np.ascontiguousarray(layer.weights, dtype="<f8").tobytes()
        b = np.ascontiguousarray(layer.bias, dtype="<f8").tobytes()
        layer_meta.append({
            "kind": layer.kind.value,
            "in_channels": layer.in_channels,
            "out_filters": layer.out_filters,
            "kernel": list(layer.kernel),
            "stride": layer.stride,
            "padding": layer.padding.value,
            "activation": layer.activation.value,
            "weights_offset": offset,
            "weights_count": layer.weights.size,
            "bias_offset": offset + len(w),
            "bias_count": layer.bias.size,
        })
        chunks += [w, b]
        offset += len(w) + len(b)
    header = {
        "format_version": MODEL_VERSION,
        "input_shape": list(net.input_shape),
        "class_count": net.class_count,
        "dtype": "<f8",
        "payload_bytes": offset,
        "layers": layer_meta,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode() + b"\n"
    return MODEL_MAGIC + head + b"".join(chunks)


def deserialize(data: bytes) -> NetworkSpec:
    if not data.startswith(MODEL_MAGIC):
        raise FormatError("missing NETMODEL magic", 0)
    start = len(MODEL_MAGIC)
    end = data.find(b"\n", start)
    if end < 0:
        raise FormatError("unterminated header", len(data))
    try:
        header = json.loads(data[start:end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"header is not valid JSON: {exc}", start) from None
    if not isinstance(header, dict):
        raise FormatError("header must be a JSON object", start)
    version = header.get("format_version")
    if version != MODEL_VERSION:
        raise FormatError(f"unsupported format version {version!r}", start)
    payload = data[end + 1:]
    base = end + 1
    try:
        declared = int(header["payload_bytes"])
        if len(payload) != declared:
            raise FormatError(
                f"payload has {len(payload)} bytes, header declares {declared}",
                base + min(len(payload), declared))
        layers = []
        for meta in header["layers"]:
            def read(off, count):
                off, count = int(off), int(count)
                if off < 0 or count < 0 or off + 8 * count > len(payload):
                    raise FormatError("array extends past end of payload", base + max(off, 0))
                return np.frombuffer(payload, dtype="<f8", count=count, offset=off)
            w = read(meta["weights_offset"], meta["weights_count"])
            b = read(meta["bias_offset"], meta["bias_count"])
            kind = Kind(meta["kind"])
            out, inc = int(meta["out_filters"]), int(meta["in_channels"])
            kernel = tuple(int(v) for v in meta["kernel"])
            shape = (out, inc, *kernel) if kind is Kind.CONV else (out, inc)
            if w.size != math.prod(shape):
                raise FormatError(f"weight count {w.size} does not match shape {shape}",
                                  base + int(meta["weights_offset"]))
            layers.append(LayerSpec(kind, inc, out, w.reshape(shape), b, kernel,
                                    int(meta["stride"]), Padding(meta["padding"]),
                                    Activation(meta["activation"])))
        return NetworkSpec(tuple(header["input_shape"]), tuple(layers), int(header["class_count"]))
    except FormatError:
        raise
    except (KeyError, TypeError, ValueError, NetAdaptError) as exc:
        raise FormatError(f"invalid model description: {exc!r}", start) from None


def save_network(net: NetworkSpec, path) -> None:
    from ._io import atomic_write_bytes
    atomic_write_bytes(path, serialize(net))


def load_network(path) -> NetworkSpec:
    with open(path, "rb") as fh:
        return deserialize(fh.read())
