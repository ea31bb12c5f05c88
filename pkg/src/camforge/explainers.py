"""Post-hoc saliency baselines evaluated at the final feature map.

Every method evaluates the model only through ``model.forward`` and
``model.backward`` with its own PassCounter, so the pass counts on the
returned SaliencyMap are the real cost of the explanation.
"""

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import HeadKindError
from .model import HeadKind, PassCounter, backward, forward
from .surgery import check_compatibility, explain_builtin

METHODS = ("cam", "tte", "gradcam", "layercam", "scorecam", "ig")


@dataclass(frozen=True)
class ExplainerConfig:
    ig_steps: int = 64
    ig_baseline: str = "zeros"
    scorecam_baseline: str = "zeros"
    target_class: int | None = None  # None: explain the predicted class

    def __post_init__(self):
        if self.ig_steps < 2:
            raise ValueError(f"ig_steps must be >= 2, got {self.ig_steps}")
        for name in ("ig_baseline", "scorecam_baseline"):
            if getattr(self, name) != "zeros":
                raise ValueError(f"{name} must be 'zeros'")


@dataclass
class SaliencyMap:
    class_id: int
    grid: np.ndarray  # (h_f, w_f), or (H, W) for input-resolution methods
    method: str
    pass_counts: PassCounter = field(default_factory=PassCounter)
    normalized: bool = False
    resolution: str = "feature"

    def sidecar(self):
        return {
            "method": self.method,
            "class_id": self.class_id,
            "forward_passes": self.pass_counts.forward_count,
            "backward_passes": self.pass_counts.backward_count,
            "normalized": self.normalized,
            "resolution": self.resolution,
        }


def _target(logits, target):
    if target is None:
        return int(np.argmax(logits))
    if not 0 <= target < logits.shape[-1]:
        raise IndexError(f"target class {target} out of range for {logits.shape[-1]} classes")
    return int(target)


def _single(x):
    x = T.tensor4(x)
    if x.shape[0] != 1:
        raise ValueError(f"explainers take one sample at a time, got batch of {x.shape[0]}")
    return x


def _fc_weights(model):
    report = check_compatibility(model)
    if not report.compatible:
        raise HeadKindError(f"CAM needs a GAP + FC head: {report.reason}")
    return model.weight(model.layers[-1])


def _weighted_sum(weights, maps):
    """sum_k weights[k] * maps[k], accumulated in ascending k."""
    out = np.zeros(maps.shape[1:], dtype=np.float64)
    for k in range(maps.shape[0]):
        out += weights[k] * maps[k].astype(np.float64)
    return out


def _onehot(c, classes, dtype):
    g = np.zeros((1, classes), dtype=dtype)
    g[0, c] = 1
    return g


def cam(model, x, target=None):
    """Feature maps weighted by the classifier row of the target class, bias excluded."""
    w = _fc_weights(model)
    x = _single(x)
    counter = PassCounter()
    logits, acts = forward(model, x, cache=True, counter=counter)
    c = _target(logits[0], target)
    a = acts.features
    k = a.shape[1]
    # same pointwise conv arithmetic as the built-in head, with a zero bias
    head = T.ConvParams(w[c:c + 1].reshape(1, k, 1, 1), np.zeros(1, T.DTYPE))
    grid = T.conv2d(a, head)[0, 0]
    return SaliencyMap(c, grid, "cam", counter.snapshot())


def tte_cam(model, x, target=None):
    """Built-in class map of a transformed model (bias offset included)."""
    exp = explain_builtin(model, x)
    c = _target(exp.logits, target)
    return SaliencyMap(c, exp.cams[c], "tte", exp.pass_counts)


def _feature_grads(model, x, target, layer):
    """One forward and one backward; activations and gradients at the chosen layer input."""
    x = _single(x)
    counter = PassCounter()
    logits, acts = forward(model, x, cache=True, counter=counter)
    c = _target(logits[0], target)
    idx = acts.feature_index if layer is None else layer
    grads = backward(model, acts, _onehot(c, model.class_count, logits.dtype), counter=counter)
    return c, acts.inputs[idx][0], grads.at_layer_input(idx)[0], counter.snapshot()


def grad_cam(model, x, target=None, layer=None):
    """ReLU(sum_k alpha_k A_k) with alpha_k the spatial mean of dy_c/dA_k."""
    c, a, g, counts = _feature_grads(model, x, target, layer)
    kk, h, w = g.shape
    alpha = g.reshape(kk, h * w).sum(axis=1, dtype=np.float64) / (h * w)
    grid = np.maximum(_weighted_sum(alpha, a), 0.0)
    return SaliencyMap(c, grid.astype(T.DTYPE), "gradcam", counts)


def layer_cam(model, x, target=None, layer=None):
    """ReLU(sum_k ReLU(dy_c/dA_k) * A_k), elementwise."""
    c, a, g, counts = _feature_grads(model, x, target, layer)
    pos = np.maximum(g.astype(np.float64), 0.0)
    out = np.zeros(a.shape[1:], dtype=np.float64)
    for k in range(a.shape[0]):
        out += pos[k] * a[k]
    grid = np.maximum(out, 0.0)
    return SaliencyMap(c, grid.astype(T.DTYPE), "layercam", counts)


def score_cam(model, x, target=None, config=ExplainerConfig()):
    """Channel weights from the softmax of per-channel masked-input score gains.

    The first call evaluates the input and the zero baseline together
    (one forward pass, batch of two); each of the K channel masks then
    costs one more forward pass.
    """
    x = _single(x)
    _, _, hh, ww = x.shape
    counter = PassCounter()
    both = np.concatenate([x, np.zeros_like(x)])
    logits, acts = forward(model, both, cache=True, counter=counter)
    c = _target(logits[0], target)
    p_base = T.softmax(logits[1].astype(np.float64))[c]
    a = acts.features[0]
    scores = np.empty(a.shape[0], dtype=np.float64)
    for k in range(a.shape[0]):
        mask = T.minmax_normalize(T.bilinear_resize(a[k], hh, ww))
        masked = x * mask[None, None]
        out, _ = forward(model, masked, counter=counter)
        scores[k] = T.softmax(out[0].astype(np.float64))[c] - p_base
    weights = T.softmax(scores)
    grid = np.maximum(_weighted_sum(weights, a), 0.0)
    return SaliencyMap(c, grid.astype(T.DTYPE), "scorecam", counter.snapshot())


def integrated_gradients(model, x, target=None, config=ExplainerConfig()):
    """Right-endpoint Riemann IG of the target logit from a zero baseline.

    The signed attribution is summed over input channels. The t = m step
    (the input itself) runs first so the predicted class is known before
    the remaining path points.
    """
    x = _single(x)
    m = config.ig_steps
    baseline = np.zeros_like(x)
    counter = PassCounter()
    grads = [None] * (m + 1)
    c = None
    for t in [m] + list(range(1, m)):
        point = baseline + (np.float32(t) / np.float32(m)) * (x - baseline)
        logits, acts = forward(model, point, cache=True, counter=counter)
        if c is None:
            c = _target(logits[0], target)
        g = backward(model, acts, _onehot(c, model.class_count, logits.dtype), counter=counter)
        grads[t] = g.input_grad[0]
    total = np.zeros(x.shape[1:], dtype=np.float64)
    for t in range(1, m + 1):
        total += grads[t]
    attr = (x[0] - baseline[0]).astype(np.float64) * (total / m)
    return SaliencyMap(c, attr.sum(axis=0), "ig", counter.snapshot(), resolution="input")


def explain(method, model, x, target=None, config=ExplainerConfig()):
    """Dispatch by method name. ``tte`` needs a transformed model, the others a GAP + FC model."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; valid: {', '.join(METHODS)}")
    if method == "tte":
        return tte_cam(model, x, target)
    if model.head_kind != HeadKind.GAP_FC:
        raise HeadKindError(f"{method} needs a GAP + FC model, got {model.head_kind.value}")
    if method == "cam":
        return cam(model, x, target)
    if method == "gradcam":
        return grad_cam(model, x, target)
    if method == "layercam":
        return layer_cam(model, x, target)
    if method == "scorecam":
        return score_cam(model, x, target, config)
    return integrated_gradients(model, x, target, config)


def upsample_overlay(smap, hw):
    """Input-resolution relevance in [0, 1]: resize, then min-max normalize.

    IG attributions are signed, so their magnitude is used.
    """
    grid = np.asarray(smap.grid, dtype=np.float64)
    if smap.method == "ig":
        grid = np.abs(grid)
    if grid.shape != tuple(hw):
        grid = T.bilinear_resize(grid, *hw)
    return T.minmax_normalize(grid)
