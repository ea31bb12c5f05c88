import numpy as np
import pytest

from camforge import explainers as E, model as M, tensor as T
from camforge.errors import HeadKindError
from camforge.surgery import explain_builtin, transform

from helpers import f1_features, f1_model, random_compatible_model, random_input
from oracles import bilinear_loop


def test_cam_fixture_f1():
    net, x = f1_model(), f1_features()
    c0 = E.cam(net, x, 0)
    c1 = E.cam(net, x, 1)
    np.testing.assert_array_equal(c0.grid, [[1, 2], [3, 4]])
    np.testing.assert_array_equal(c1.grid, [[0, 2], [0, 2]])
    assert c0.pass_counts.as_tuple() == (1, 0)
    assert E.cam(net, x).class_id == 0


def test_cam_zero_weights():
    net = M.with_params(f1_model(), {"fc.weight": np.zeros((2, 2)), "fc.bias": np.ones(2)})
    assert not E.cam(net, f1_features(), 1).grid.any()


def test_cam_rejects_incompatible_head():
    tte = transform(f1_model())
    with pytest.raises(HeadKindError):
        E.cam(tte, f1_features())
    with pytest.raises(HeadKindError):
        E.explain("gradcam", tte, f1_features())


def test_gradcam_and_layercam_fixture_f1():
    net, x = f1_model(), f1_features()
    g = E.grad_cam(net, x, 0)
    lc = E.layer_cam(net, x, 0)
    expected = [[0.25, 0.5], [0.75, 1.0]]
    np.testing.assert_allclose(g.grid, expected, atol=1e-7)
    np.testing.assert_allclose(lc.grid, expected, atol=1e-7)
    assert g.pass_counts.as_tuple() == (1, 1) and lc.pass_counts.as_tuple() == (1, 1)


def test_layercam_all_negative_gradients():
    net = M.with_params(f1_model(), {"fc.weight": -np.ones((2, 2)), "fc.bias": np.zeros(2)})
    assert not E.layer_cam(net, f1_features(), 0).grid.any()


def _pre_relu_fixture(rng):
    """TinyNet-like model with a ReLU between the last conv and GAP; explain at the conv output."""
    net = random_compatible_model(rng, size=8)
    # drop the trailing maxpool so the ReLU feeds GAP directly
    layers = net.layers[:-4] + net.layers[-3:]
    return M.ModelGraph(layers, dict(net.params), net.input_shape, net.class_count)


@pytest.mark.parametrize("seed", range(5))
def test_layercam_differs_from_gradcam_with_nonuniform_gradients(seed):
    rng = np.random.default_rng(seed)
    net = _pre_relu_fixture(rng)
    x = random_input(rng, net)
    layer = len(net.layers) - 4  # the final ReLU; its input is the pre-activation conv output
    assert net.layers[layer].kind == M.LayerKind.RELU
    _, acts = M.forward(net, x, cache=True)
    a = acts.inputs[layer][0].astype(np.float64)
    logits = acts.inputs[-1][0]
    c = int(np.argmax(logits))
    w = net.params["fc.weight"][c].astype(np.float64)
    k, h, wd = a.shape
    # d y_c / d a_k(i,j) = w_ck / (h*w) where a > 0, else 0
    grad = np.zeros_like(a)
    for kk in range(k):
        for i in range(h):
            for j in range(wd):
                grad[kk, i, j] = w[kk] / (h * wd) if a[kk, i, j] > 0 else 0.0
    alpha = [grad[kk].sum() / (h * wd) for kk in range(k)]
    gc_oracle = np.zeros((h, wd))
    lc_oracle = np.zeros((h, wd))
    for i in range(h):
        for j in range(wd):
            gc_oracle[i, j] = max(sum(alpha[kk] * a[kk, i, j] for kk in range(k)), 0.0)
            lc_oracle[i, j] = max(sum(max(grad[kk, i, j], 0.0) * a[kk, i, j] for kk in range(k)), 0.0)
    gc = E.grad_cam(net, x, layer=layer).grid
    lc = E.layer_cam(net, x, layer=layer).grid
    np.testing.assert_allclose(gc, gc_oracle, atol=1e-5)
    np.testing.assert_allclose(lc, lc_oracle, atol=1e-5)
    if lc_oracle.any() and gc_oracle.any():
        assert not np.allclose(T.minmax_normalize(gc_oracle), T.minmax_normalize(lc_oracle), atol=1e-3)


def test_scorecam_single_channel_is_relu_of_feature():
    rng = np.random.default_rng(0)
    layers = (M.conv(1, 1, 3, "c1", padding=1), M.global_avg_pool(), M.flatten(),
              M.fully_connected(1, 2, "fc"))
    params = {"c1.weight": rng.normal(size=(1, 1, 3, 3)), "c1.bias": [0.1],
              "fc.weight": [[1.0], [-1.0]], "fc.bias": [0.0, 0.0]}
    net = M.ModelGraph(layers, params, (1, 6, 6), 2)
    x = rng.normal(size=(1, 1, 6, 6)).astype(np.float32)
    s = E.score_cam(net, x)
    a = T.conv2d(x, net.conv_params(net.layers[0]))[0, 0]
    np.testing.assert_allclose(s.grid, np.maximum(a, 0), atol=1e-6)
    assert s.pass_counts.as_tuple() == (2, 0)


def test_scorecam_constant_channel_scores_zero():
    # channel 1 has zero weights and constant bias -> constant map -> all-zero mask
    layers = (M.conv(1, 2, 1, "c1"), M.global_avg_pool(), M.flatten(), M.fully_connected(2, 2, "fc"))
    params = {"c1.weight": [[[[1.0]]], [[[0.0]]]], "c1.bias": [0.0, 0.7],
              "fc.weight": [[1.0, 0.0], [-1.0, 0.0]], "fc.bias": [0.0, 0.0]}
    net = M.ModelGraph(layers, params, (1, 4, 4), 2)
    x = np.linspace(0.1, 1.6, 16, dtype=np.float32).reshape(1, 1, 4, 4)
    s = E.score_cam(net, x, 0)
    a = T.conv2d(x, net.conv_params(net.layers[0]))[0]
    p_base = T.softmax(np.array([0.0, 0.0]))[0]
    mask0 = T.minmax_normalize(a[0].astype(np.float64))
    xm = (x[0, 0] * mask0).mean()
    s0 = T.softmax(np.array([xm, -xm]))[0] - p_base
    weights = T.softmax(np.array([s0, 0.0]))
    expected = np.maximum(weights[0] * a[0] + weights[1] * a[1], 0)
    np.testing.assert_allclose(s.grid, expected, atol=1e-6)


def test_ig_linear_model():
    # F_0(x) = 2 x_1 + 3 x_2 on a 1x1, two-channel input
    layers = (M.global_avg_pool(), M.flatten(), M.fully_connected(2, 2, "fc"))
    params = {"fc.weight": [[2.0, 3.0], [0.0, 0.0]], "fc.bias": [0.0, 0.0]}
    net = M.ModelGraph(layers, params, (2, 1, 1), 2)
    x = np.ones((1, 2, 1, 1), np.float32)
    for m in (2, 7, 64):
        s = E.integrated_gradients(net, x, 0, E.ExplainerConfig(ig_steps=m))
        assert s.pass_counts.as_tuple() == (m, m)
        assert s.grid.shape == (1, 1) and s.grid[0, 0] == pytest.approx(5.0, abs=1e-6)
    # per-channel attribution before the channel sum
    attr = x[0].astype(np.float64)[:, 0, 0] * np.array([2.0, 3.0])
    np.testing.assert_allclose(attr, [2, 3])


def test_ig_at_baseline_is_zero(rng):
    net = random_compatible_model(rng)
    x = np.zeros((1,) + net.input_shape, np.float32)
    assert not E.integrated_gradients(net, x, 0, E.ExplainerConfig(ig_steps=4)).grid.any()


def test_config_validation():
    with pytest.raises(ValueError):
        E.ExplainerConfig(ig_steps=1)
    with pytest.raises(ValueError):
        E.ExplainerConfig(ig_baseline="blur")
    with pytest.raises(ValueError, match="valid"):
        E.explain("occlusion", f1_model(), f1_features())


@pytest.mark.parametrize("seed", range(5))
def test_pass_counts_on_random_models(seed):
    rng = np.random.default_rng(seed)
    net = random_compatible_model(rng)
    x = random_input(rng, net)
    k = net.shape_report.feature_shape[0]
    cfg = E.ExplainerConfig(ig_steps=5)
    expected = {"cam": (1, 0), "gradcam": (1, 1), "layercam": (1, 1), "scorecam": (k + 1, 0), "ig": (5, 5)}
    for method, counts in expected.items():
        assert E.explain(method, net, x, None, cfg).pass_counts.as_tuple() == counts
    assert E.explain("tte", transform(net), x).pass_counts.as_tuple() == (1, 0)


@pytest.mark.parametrize("seed", range(5))
def test_explainers_are_deterministic(seed):
    rng = np.random.default_rng(seed)
    net = random_compatible_model(rng)
    x = random_input(rng, net)
    cfg = E.ExplainerConfig(ig_steps=4)
    for method in ("cam", "gradcam", "layercam", "scorecam", "ig"):
        a = E.explain(method, net, x, None, cfg)
        b = E.explain(method, net, x, None, cfg)
        assert np.array_equal(a.grid, b.grid) and a.class_id == b.class_id


def test_explicit_target_class():
    s = E.cam(f1_model(), f1_features(), 1)
    assert s.class_id == 1
    with pytest.raises(IndexError):
        E.cam(f1_model(), f1_features(), 5)


def test_upsample_overlay_cases():
    const = E.SaliencyMap(0, np.full((2, 2), 3.0), "cam")
    assert not E.upsample_overlay(const, (8, 8)).any()
    g = np.array([[0.0, 2.0], [1.0, 4.0]])
    same = E.upsample_overlay(E.SaliencyMap(0, g, "cam"), (2, 2))
    np.testing.assert_array_equal(same, g / 4)
    up = E.upsample_overlay(E.SaliencyMap(0, g, "cam"), (8, 8))
    np.testing.assert_allclose(up, T.minmax_normalize(bilinear_loop(g, 8, 8)), atol=1e-5)
    signed = E.upsample_overlay(E.SaliencyMap(0, np.array([[-2.0, 1.0]]), "ig"), (1, 2))
    np.testing.assert_array_equal(signed, [[1.0, 0.0]])


def test_sidecar_fields():
    s = E.cam(f1_model(), f1_features())
    assert s.sidecar() == {"method": "cam", "class_id": 0, "forward_passes": 1,
                           "backward_passes": 0, "normalized": False, "resolution": "feature"}


def test_tte_matches_cam_up_to_bias(rng):
    net = random_compatible_model(rng)
    x = random_input(rng, net)
    c = E.cam(net, x)
    exp = explain_builtin(transform(net), x)
    bias = net.params["fc.bias"][c.class_id]
    np.testing.assert_allclose(exp.cams[c.class_id] - bias, c.grid, atol=1e-5)
