import numpy as np

from camforge import model as M


def f1_model():
    """GAP -> Flatten -> FC head with W=[[1,0],[0,2]], b=[0.5,-0.5] on a 2x2x2 feature map."""
    layers = (M.global_avg_pool(), M.flatten(), M.fully_connected(2, 2, "fc"))
    params = {"fc.weight": [[1.0, 0.0], [0.0, 2.0]], "fc.bias": [0.5, -0.5]}
    return M.ModelGraph(layers, params, (2, 2, 2), 2)


def f1_features():
    return np.array([[[[1, 2], [3, 4]], [[0, 1], [0, 1]]]], dtype=np.float32)


def random_compatible_model(rng, size=None, pinned=False):
    """A small random GAP+FC CNN.

    ``pinned=True`` builds a backbone that reduces the input to a 1x1
    feature map, so GAP and the spatial average are exact identities.
    """
    cin = int(rng.integers(1, 4))
    classes = int(rng.integers(2, 5))
    k = int(rng.integers(1, 9))
    n_pool = 2
    if size is None:
        size = 4 if pinned else int(rng.choice([8, 12, 16]))
    layers, params = [], {}
    c = cin
    for i in range(n_pool):
        cout = int(rng.integers(2, 6)) if i < n_pool - 1 else k
        kernel = int(rng.choice([1, 3]))
        layers += [M.conv(c, cout, kernel, f"conv{i}", padding=kernel // 2), M.relu(), M.maxpool2()]
        params[f"conv{i}.weight"] = rng.normal(0, 0.7, (cout, c, kernel, kernel))
        params[f"conv{i}.bias"] = rng.normal(0, 0.3, cout)
        c = cout
    layers += [M.global_avg_pool(), M.flatten(), M.fully_connected(k, classes, "fc")]
    params["fc.weight"] = rng.normal(0, 1.0, (classes, k))
    params["fc.bias"] = rng.normal(0, 0.5, classes)
    return M.ModelGraph(tuple(layers), params, (cin, size, size), classes)


def random_input(rng, model, n=1):
    return rng.uniform(-1, 2, (n,) + model.input_shape).astype(np.float32)


def relative_diff(a, b):
    """Largest elementwise difference, relative to the largest magnitude in the sample."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(), np.abs(b).max(), 1e-12)
    return float(np.abs(a - b).max() / scale)
