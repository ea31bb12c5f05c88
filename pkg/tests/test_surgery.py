import numpy as np
import pytest

from camforge import model as M, tensor as T
from camforge.errors import HeadKindError, SurgeryError
from camforge.surgery import check_compatibility, explain_builtin, transform

from helpers import f1_features, f1_model, random_compatible_model, random_input, relative_diff


def vgg_like():
    layers = (M.conv(3, 4, 3, "c1", padding=1), M.relu(), M.maxpool2(),
              M.flatten(), M.fully_connected(4 * 4 * 4, 2, "fc"))
    params = {"c1.weight": np.zeros((4, 3, 3, 3)), "c1.bias": np.zeros(4),
              "fc.weight": np.zeros((2, 64)), "fc.bias": np.zeros(2)}
    return M.ModelGraph(layers, params, (3, 8, 8), 2)


def test_tinynet_is_compatible():
    rep = check_compatibility(M.tinynet())
    assert rep.compatible and rep.feature_channels == 16 and rep.class_count == 2
    assert rep.bias_policy == "bias_in_map"


def test_vgg_like_head_is_incompatible():
    rep = check_compatibility(vgg_like())
    assert not rep.compatible
    assert "head consumes spatial layout" in rep.reason
    with pytest.raises(SurgeryError) as info:
        transform(vgg_like())
    assert info.value.report == rep


def test_fc_dimension_mismatch_is_reported():
    base = M.tinynet()
    layers = base.layers[:-1] + (M.fully_connected(32, 2, "fc"),)
    params = dict(base.params)
    params["fc.weight"] = np.zeros((2, 32))
    rep = check_compatibility(M.ModelGraph(layers, params, base.input_shape, 2))
    assert not rep.compatible and "dimension" in rep.reason and rep.feature_channels == 16


def test_f1_transform_and_explain():
    net = f1_model()
    tte = transform(net)
    assert tte.head_kind == M.HeadKind.BUILTIN_CAM
    np.testing.assert_array_equal(tte.params["fc.weight"].reshape(2, 2), [[1, 0], [0, 2]])
    assert tte.params["fc.weight"].shape == (2, 2, 1, 1)
    np.testing.assert_array_equal(tte.params["fc.bias"], [0.5, -0.5])
    exp = explain_builtin(tte, f1_features())
    np.testing.assert_array_equal(exp.cams[0], [[1.5, 2.5], [3.5, 4.5]])
    np.testing.assert_array_equal(exp.cams[1], [[-0.5, 1.5], [-0.5, 1.5]])
    np.testing.assert_array_equal(exp.logits, [3.0, 0.5])
    np.testing.assert_allclose(exp.probabilities, [0.9241, 0.0759], atol=1e-4)
    assert exp.pass_counts.as_tuple() == (1, 0)
    assert exp.predicted == 0


def test_zero_head_gives_zero_maps():
    net = M.with_params(f1_model(), {"fc.weight": np.zeros((2, 2)), "fc.bias": np.zeros(2)})
    exp = explain_builtin(transform(net), f1_features())
    assert not exp.cams.any() and not exp.logits.any()


def test_constant_feature_map():
    w = np.array([[0.5, -1.0], [2.0, 0.25]], np.float32)
    b = np.array([0.1, -0.2], np.float32)
    net = M.with_params(f1_model(), {"fc.weight": w, "fc.bias": b})
    v = np.array([1.5, -0.5], np.float32)
    x = np.broadcast_to(v[None, :, None, None], (1, 2, 2, 2)).copy()
    exp = explain_builtin(transform(net), x)
    for c in range(2):
        expected = np.float32(w[c, 0] * v[0] + w[c, 1] * v[1] + b[c])
        np.testing.assert_allclose(exp.cams[c], expected, atol=1e-6)
        np.testing.assert_allclose(exp.logits[c], expected, atol=1e-6)


def test_explain_builtin_rejects_gap_fc():
    with pytest.raises(HeadKindError):
        explain_builtin(f1_model(), f1_features())


@pytest.mark.parametrize("seed", range(10))
def test_transform_preserves_predictions(seed):
    rng = np.random.default_rng(seed)
    net = random_compatible_model(rng)
    tte = transform(net)
    x = random_input(rng, net, n=4)
    a, _ = M.forward(net, x)
    b, _ = M.forward(tte, x)
    assert relative_diff(a, b) <= 1e-4
    assert np.array_equal(a.argmax(1), b.argmax(1))
    np.testing.assert_allclose(T.softmax(a.astype(np.float64)), T.softmax(b.astype(np.float64)), atol=1e-5)


def test_transform_does_not_mutate_and_is_repeatable(rng):
    net = random_compatible_model(rng)
    before = net.fingerprint()
    t1, t2 = transform(net), transform(net)
    assert net.fingerprint() == before
    assert t1.fingerprint() == t2.fingerprint()
    x = random_input(rng, net)
    assert np.array_equal(M.forward(t1, x)[0], M.forward(t2, x)[0])


def test_cam_means_equal_logits(rng):
    net = random_compatible_model(rng)
    exp = explain_builtin(transform(net), random_input(rng, net))
    np.testing.assert_allclose(exp.cams.mean(axis=(1, 2), dtype=np.float64), exp.logits, atol=1e-5)
