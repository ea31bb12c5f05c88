"""Sequential CNN graphs: shape validation, forward with caching, backward."""

import enum
from dataclasses import dataclass, field
from functools import cached_property
from types import MappingProxyType

import numpy as np

from . import tensor as T
from .errors import ModelValidationError, StaleCacheError, DimensionError, GeometryError


class LayerKind(enum.IntEnum):
    CONV = 1
    RELU = 2
    MAXPOOL2 = 3
    GLOBAL_AVG_POOL = 4
    FLATTEN = 5
    FULLY_CONNECTED = 6
    POINTWISE_CONV_HEAD = 7
    SPATIAL_AVERAGE = 8
    SOFTMAX = 9


PARAM_KINDS = (LayerKind.CONV, LayerKind.FULLY_CONNECTED, LayerKind.POINTWISE_CONV_HEAD)


class HeadKind(str, enum.Enum):
    GAP_FC = "gap_fc"
    BUILTIN_CAM = "builtin_cam"
    OTHER = "other"


@dataclass(frozen=True)
class LayerSpec:
    kind: LayerKind
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    slot: str = ""

    @property
    def has_params(self):
        return self.kind in PARAM_KINDS


def conv(cin, cout, kernel, slot, stride=1, padding=0):
    return LayerSpec(LayerKind.CONV, cin, cout, kernel, stride, padding, slot)


def relu():
    return LayerSpec(LayerKind.RELU)


def maxpool2():
    return LayerSpec(LayerKind.MAXPOOL2)


def global_avg_pool():
    return LayerSpec(LayerKind.GLOBAL_AVG_POOL)


def flatten():
    return LayerSpec(LayerKind.FLATTEN)


def fully_connected(in_features, out_features, slot):
    return LayerSpec(LayerKind.FULLY_CONNECTED, in_features, out_features, slot=slot)


def pointwise_conv_head(in_channels, classes, slot):
    return LayerSpec(LayerKind.POINTWISE_CONV_HEAD, in_channels, classes, 1, slot=slot)


def spatial_average():
    return LayerSpec(LayerKind.SPATIAL_AVERAGE)


def softmax_layer():
    return LayerSpec(LayerKind.SOFTMAX)


@dataclass(frozen=True)
class ShapeReport:
    shapes: tuple  # per-layer output shape, batch axis excluded
    feature_index: int | None  # first head layer; its input is the final feature map
    feature_shape: tuple | None
    output_length: int


@dataclass
class PassCounter:
    forward_count: int = 0
    backward_count: int = 0

    def snapshot(self):
        return PassCounter(self.forward_count, self.backward_count)

    def reset(self):
        self.forward_count = 0
        self.backward_count = 0

    def as_tuple(self):
        return (self.forward_count, self.backward_count)


def _frozen(arr):
    a = np.array(arr, dtype=T.DTYPE, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ModelGraph:
    layers: tuple
    params: MappingProxyType
    input_shape: tuple
    class_count: int

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(
            self, "params",
            MappingProxyType({k: _frozen(v) for k, v in sorted(dict(self.params).items())}))

    @property
    def head_kind(self):
        kinds = [layer.kind for layer in self.layers]
        if kinds[-3:] == [LayerKind.GLOBAL_AVG_POOL, LayerKind.FLATTEN, LayerKind.FULLY_CONNECTED]:
            return HeadKind.GAP_FC
        if kinds[-2:] == [LayerKind.POINTWISE_CONV_HEAD, LayerKind.SPATIAL_AVERAGE]:
            return HeadKind.BUILTIN_CAM
        return HeadKind.OTHER

    @cached_property
    def shape_report(self):
        return _infer_shapes(self)

    def weight(self, layer):
        return self.params[f"{layer.slot}.weight"]

    def bias(self, layer):
        return self.params[f"{layer.slot}.bias"]

    def conv_params(self, layer):
        return T.ConvParams(self.weight(layer), self.bias(layer), layer.stride, layer.padding)

    def fingerprint(self):
        """Hash over layers and parameter bytes; used to detect mutation."""
        import hashlib
        h = hashlib.sha256(repr(self.layers).encode())
        for name, arr in self.params.items():
            h.update(name.encode())
            h.update(arr.tobytes())
        return h.hexdigest()


def validate(model):
    """Propagate shapes through ``model``; raise ModelValidationError at the first bad layer."""
    return model.shape_report


def _param_shape(params, name, expected, index):
    arr = params.get(name)
    if arr is None:
        raise ModelValidationError(index, f"parameter {name!r}", "missing")
    if arr.shape != expected:
        raise ModelValidationError(index, expected, arr.shape, f"parameter {name!r}")


def propagate_shapes(layers, params, input_shape):
    """Per-layer output shapes (batch axis excluded); raises at the first bad layer."""
    shape = tuple(input_shape)
    if len(shape) != 3 or min(shape) < 1:
        raise ModelValidationError(0, "input shape (c, h, w)", shape)
    shapes = []
    for i, layer in enumerate(layers):
        k = layer.kind
        if k in (LayerKind.CONV, LayerKind.MAXPOOL2, LayerKind.GLOBAL_AVG_POOL,
                 LayerKind.FLATTEN, LayerKind.POINTWISE_CONV_HEAD, LayerKind.SPATIAL_AVERAGE):
            if len(shape) != 3:
                raise ModelValidationError(i, "a (c, h, w) feature map", shape, k.name)
        if k in (LayerKind.CONV, LayerKind.POINTWISE_CONV_HEAD):
            c, h, w = shape
            if c != layer.in_channels:
                raise ModelValidationError(i, (layer.in_channels, h, w), shape, k.name)
            kernel = layer.kernel if k == LayerKind.CONV else 1
            if k == LayerKind.POINTWISE_CONV_HEAD and (layer.kernel, layer.stride, layer.padding) != (1, 1, 0):
                raise ModelValidationError(i, "1x1 kernel, stride 1, no padding",
                                           (layer.kernel, layer.stride, layer.padding))
            _param_shape(params, f"{layer.slot}.weight",
                         (layer.out_channels, layer.in_channels, kernel, kernel), i)
            _param_shape(params, f"{layer.slot}.bias", (layer.out_channels,), i)
            try:
                oh, ow = T.conv_output_hw(h, w, kernel, layer.stride, layer.padding)
            except GeometryError as exc:
                raise ModelValidationError(i, "integral conv output", shape, str(exc)) from None
            shape = (layer.out_channels, oh, ow)
        elif k == LayerKind.RELU or k == LayerKind.SOFTMAX:
            if k == LayerKind.SOFTMAX and len(shape) != 1:
                raise ModelValidationError(i, "a class-score vector", shape, k.name)
        elif k == LayerKind.MAXPOOL2:
            c, h, w = shape
            if h % 2 or w % 2:
                raise ModelValidationError(i, "even spatial dims", shape, k.name)
            shape = (c, h // 2, w // 2)
        elif k == LayerKind.GLOBAL_AVG_POOL:
            shape = (shape[0], 1, 1)
        elif k == LayerKind.FLATTEN:
            shape = (int(np.prod(shape)),)
        elif k == LayerKind.FULLY_CONNECTED:
            if shape != (layer.in_channels,):
                raise ModelValidationError(i, (layer.in_channels,), shape, k.name)
            _param_shape(params, f"{layer.slot}.weight", (layer.out_channels, layer.in_channels), i)
            _param_shape(params, f"{layer.slot}.bias", (layer.out_channels,), i)
            shape = (layer.out_channels,)
        elif k == LayerKind.SPATIAL_AVERAGE:
            shape = (shape[0],)
        else:  # pragma: no cover
            raise ModelValidationError(i, "known layer kind", k)
        shapes.append(shape)
    return shapes


def _infer_shapes(model):
    if not model.layers:
        raise ModelValidationError(0, "at least one layer", "empty model")
    shapes = propagate_shapes(model.layers, model.params, model.input_shape)
    shape = shapes[-1]
    if shape != (model.class_count,):
        raise ModelValidationError(len(model.layers) - 1, (model.class_count,), shape,
                                   "final output must be one score per class")

    head = model.head_kind
    if head == HeadKind.GAP_FC:
        fidx = len(model.layers) - 3
    elif head == HeadKind.BUILTIN_CAM:
        fidx = len(model.layers) - 2
    else:
        # last layer that consumes a spatial map
        spatial = [i for i in range(len(model.layers))
                   if len(model.input_shape if i == 0 else shapes[i - 1]) == 3]
        fidx = spatial[-1] if spatial else None
    fshape = None
    if fidx is not None:
        fshape = model.input_shape if fidx == 0 else shapes[fidx - 1]
    return ShapeReport(tuple(shapes), fidx, fshape, shape[0])


@dataclass
class ActivationCache:
    """Inputs of every layer (``inputs[i]`` feeds layer i, ``inputs[-1]`` is the output)."""

    model: ModelGraph
    inputs: list = field(repr=False)

    @property
    def feature_index(self):
        return self.model.shape_report.feature_index

    @property
    def features(self):
        """The final feature map entering the head."""
        return self.inputs[self.feature_index]

    def output_of(self, index):
        return self.inputs[index + 1]


@dataclass
class Gradients:
    input_grad: np.ndarray
    param_grads: dict
    layer_grads: list = field(repr=False)  # gradient w.r.t. the input of each layer

    def at_layer_input(self, index):
        return self.layer_grads[index]


def _layer_forward(model, layer, x):
    k = layer.kind
    if k in (LayerKind.CONV, LayerKind.POINTWISE_CONV_HEAD):
        return T.conv2d(x, model.conv_params(layer))
    if k == LayerKind.RELU:
        return T.relu(x)
    if k == LayerKind.MAXPOOL2:
        return T.maxpool2(x)
    if k == LayerKind.GLOBAL_AVG_POOL:
        return T.global_avg_pool(x)
    if k == LayerKind.FLATTEN:
        return x.reshape(x.shape[0], -1)
    if k == LayerKind.FULLY_CONNECTED:
        return T.fully_connected(x, model.weight(layer), model.bias(layer))
    if k == LayerKind.SPATIAL_AVERAGE:
        return T.spatial_mean(x).reshape(x.shape[0], -1)
    if k == LayerKind.SOFTMAX:
        return T.softmax(x).astype(x.dtype)
    raise AssertionError(k)


def _layer_backward(model, layer, x, y, g, grads):
    k = layer.kind
    if k in (LayerKind.CONV, LayerKind.POINTWISE_CONV_HEAD):
        b = T.conv2d_backward(x, model.conv_params(layer), g)
        grads[f"{layer.slot}.weight"] = b.weight_grad
        grads[f"{layer.slot}.bias"] = b.bias_grad
        return b.input_grad
    if k == LayerKind.RELU:
        return T.relu_backward(x, g)
    if k == LayerKind.MAXPOOL2:
        return T.maxpool2_backward(x, g)
    if k == LayerKind.GLOBAL_AVG_POOL:
        return T.global_avg_pool_backward(x, g)
    if k == LayerKind.FLATTEN:
        return g.reshape(x.shape)
    if k == LayerKind.FULLY_CONNECTED:
        b = T.fully_connected_backward(x, model.weight(layer), g)
        grads[f"{layer.slot}.weight"] = b.weight_grad
        grads[f"{layer.slot}.bias"] = b.bias_grad
        return b.input_grad
    if k == LayerKind.SPATIAL_AVERAGE:
        return T.global_avg_pool_backward(x, g)
    if k == LayerKind.SOFTMAX:
        return (y * (g - (g * y).sum(axis=-1, keepdims=True))).astype(g.dtype)
    raise AssertionError(k)


def forward(model, batch, cache=False, counter=None):
    """Evaluate ``model`` on ``batch`` (n, c, h, w).

    Returns ``(logits, acts)`` where ``acts`` is an ActivationCache when
    ``cache`` is true and None otherwise. One call adds one forward pass
    to ``counter`` whatever the batch size.
    """
    validate(model)
    arr = np.asarray(batch)
    # float64 batches stay float64 (finite-difference checks); everything else runs in float32
    x = T.tensor4(arr, dtype=np.float64 if arr.dtype == np.float64 else T.DTYPE)
    if x.shape[1:] != model.input_shape:
        raise DimensionError(f"batch {x.shape} does not match model input {model.input_shape}")
    if counter is not None:
        counter.forward_count += 1
    inputs = [x]
    for layer in model.layers:
        x = _layer_forward(model, layer, x)
        if cache:
            inputs.append(x)
    return x, (ActivationCache(model, inputs) if cache else None)


def backward(model, acts, upstream, counter=None):
    """Reverse-mode pass from ``upstream`` (gradient w.r.t. the logits)."""
    if acts is None or acts.model is not model or len(acts.inputs) != len(model.layers) + 1:
        raise StaleCacheError("backward needs the activation cache of a forward pass on this model")
    out = acts.inputs[-1]
    g = np.asarray(upstream, dtype=out.dtype)
    if g.shape != out.shape:
        raise DimensionError(f"upstream {g.shape} does not match logits {out.shape}")
    if counter is not None:
        counter.backward_count += 1
    grads = {}
    layer_grads = [None] * len(model.layers)
    for i in range(len(model.layers) - 1, -1, -1):
        g = _layer_backward(model, model.layers[i], acts.inputs[i], acts.inputs[i + 1], g, grads)
        layer_grads[i] = g
    return Gradients(g, grads, layer_grads)


def predict_proba(model, batch, counter=None):
    logits, _ = forward(model, batch, counter=counter)
    return T.softmax(logits.astype(np.float64))


def he_init(rng, shape, fan_in):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(T.DTYPE)


def tinynet(seed=0, in_channels=3, size=64, features=16, classes=2):
    """The reference backbone with a GAP + FC head (feature stride 4)."""
    rng = np.random.default_rng(seed)
    layers = [
        conv(in_channels, 8, 3, "conv1", padding=1), relu(), maxpool2(),
        conv(8, 16, 3, "conv2", padding=1), relu(), maxpool2(),
        conv(16, features, 3, "conv3", padding=1), relu(),
        global_avg_pool(), flatten(), fully_connected(features, classes, "fc"),
    ]
    params = {}
    for layer in layers:
        if layer.kind == LayerKind.CONV:
            fan_in = layer.in_channels * layer.kernel ** 2
            params[f"{layer.slot}.weight"] = he_init(
                rng, (layer.out_channels, layer.in_channels, layer.kernel, layer.kernel), fan_in)
            params[f"{layer.slot}.bias"] = np.zeros(layer.out_channels, T.DTYPE)
        elif layer.kind == LayerKind.FULLY_CONNECTED:
            params[f"{layer.slot}.weight"] = he_init(
                rng, (layer.out_channels, layer.in_channels), layer.in_channels)
            params[f"{layer.slot}.bias"] = np.zeros(layer.out_channels, T.DTYPE)
    return ModelGraph(tuple(layers), params, (in_channels, size, size), classes)


def with_params(model, params):
    """Copy of ``model`` with ``params`` replacing its parameter store."""
    return ModelGraph(model.layers, params, model.input_shape, model.class_count)
