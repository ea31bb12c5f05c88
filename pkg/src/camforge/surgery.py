"""Test-time head surgery: GAP + FC head  ->  1x1 conv head + spatial average.

The FC weight matrix (C, K) becomes C pointwise filters of shape (K, 1, 1)
and the FC bias becomes the filter bias, so every class map carries the
constant offset ``b_c`` and its spatial mean is exactly the class logit.
"""

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import HeadKindError, ModelValidationError, SurgeryError
from .model import (HeadKind, LayerKind, ModelGraph, PassCounter, forward,
                    pointwise_conv_head, propagate_shapes, spatial_average,
                    validate)

BIAS_IN_MAP = "bias_in_map"


@dataclass(frozen=True)
class SurgeryReport:
    compatible: bool
    feature_channels: int | None
    class_count: int
    reason: str = ""
    bias_policy: str = BIAS_IN_MAP

    def to_dict(self):
        return {
            "compatible": self.compatible,
            "feature_channels": self.feature_channels,
            "class_count": self.class_count,
            "reason": self.reason,
            "bias_policy": self.bias_policy,
        }


def _shape_entering(model, index):
    """Shape entering layer ``index``, or None if an earlier layer is invalid."""
    if index == 0:
        return model.input_shape
    try:
        return propagate_shapes(model.layers[:index], model.params, model.input_shape)[-1]
    except ModelValidationError:
        return None


def check_compatibility(model):
    """Report whether ``model``'s head can be converted. Never raises for incompatibility."""
    kinds = [layer.kind for layer in model.layers]
    classes = model.class_count
    if kinds[-2:] != [LayerKind.FLATTEN, LayerKind.FULLY_CONNECTED]:
        return SurgeryReport(False, None, classes,
                             "head is not a Flatten + FullyConnected classifier")
    fc = model.layers[-1]
    if len(kinds) < 3 or kinds[-3] != LayerKind.GLOBAL_AVG_POOL:
        fmap = _shape_entering(model, len(kinds) - 2)
        k = fmap[0] if fmap is not None and len(fmap) == 3 else None
        if fmap is not None and len(fmap) == 3 and fmap[1] * fmap[2] > 1:
            return SurgeryReport(
                False, k, classes,
                f"head consumes spatial layout: Flatten over {fmap} feeds FC with "
                f"{fc.in_channels} inputs, no global average pooling")
        return SurgeryReport(False, k, classes,
                             "no global average pooling before the classifier")
    fmap = _shape_entering(model, len(kinds) - 3)
    if fmap is None or len(fmap) != 3:
        return SurgeryReport(False, None, classes, "backbone does not produce a feature map")
    k = fmap[0]
    if fc.in_channels != k:
        return SurgeryReport(
            False, k, classes,
            f"dimension mismatch: FC expects {fc.in_channels} inputs but the final "
            f"feature map has K={k} channels")
    try:
        validate(model)
    except ModelValidationError as exc:
        return SurgeryReport(False, k, classes, f"model does not validate: {exc}")
    return SurgeryReport(True, k, classes)


def transform(model):
    """Return a new model whose GAP + FC head is replaced by pointwise conv + spatial average."""
    report = check_compatibility(model)
    if not report.compatible:
        raise SurgeryError(report)
    fc = model.layers[-1]
    k, c = report.feature_channels, report.class_count
    layers = model.layers[:-3] + (pointwise_conv_head(k, c, fc.slot), spatial_average())
    params = dict(model.params)
    w = model.params[f"{fc.slot}.weight"]
    params[f"{fc.slot}.weight"] = w.reshape(c, k, 1, 1).copy()
    params[f"{fc.slot}.bias"] = model.params[f"{fc.slot}.bias"].copy()
    out = ModelGraph(layers, params, model.input_shape, model.class_count)
    validate(out)
    return out


@dataclass
class BuiltInExplanation:
    logits: np.ndarray  # (C,)
    probabilities: np.ndarray  # (C,)
    cams: np.ndarray  # (C, h_f, w_f), bias included
    pass_counts: PassCounter = field(default_factory=PassCounter)

    @property
    def predicted(self):
        return int(np.argmax(self.logits))


def explain_builtin(model, x):
    """One forward pass: class maps, logits (their spatial means) and probabilities."""
    if model.head_kind != HeadKind.BUILTIN_CAM:
        raise HeadKindError(
            f"explain_builtin needs a transformed model, got head kind {model.head_kind.value}")
    x = T.tensor4(x)
    if x.shape[0] != 1:
        raise ValueError(f"explain_builtin takes a single sample, got batch of {x.shape[0]}")
    counter = PassCounter()
    logits, acts = forward(model, x, cache=True, counter=counter)
    cams = acts.output_of(len(model.layers) - 2)[0]
    return BuiltInExplanation(
        logits=logits[0],
        probabilities=T.softmax(logits[0].astype(np.float64)),
        cams=cams,
        pass_counts=counter.snapshot(),
    )
