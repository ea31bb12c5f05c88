import numpy as np
import pytest

from camforge import kernels, tensor as T

pytestmark = pytest.mark.skipif("numba" not in kernels.BACKENDS, reason="numba not installed")


def _case(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(3, 4, 13, 13)).astype(np.float32)
    p = T.ConvParams(rng.normal(size=(5, 4, 3, 3)).astype(np.float32),
                     rng.normal(size=5).astype(np.float32), int(seed % 2) + 1, 1)
    return rng, x, p


@pytest.mark.parametrize("seed", range(5))
def test_conv_forward_bitwise_across_backends(seed):
    _, x, p = _case(seed)
    with kernels.using("numpy"):
        a = T.conv2d(x, p)
    with kernels.using("numba"):
        b = T.conv2d(x, p)
    assert np.array_equal(a, b)


@pytest.mark.parametrize("seed", range(5))
def test_conv_backward_close_across_backends(seed):
    rng, x, p = _case(seed)
    up = rng.normal(size=T.conv2d(x, p).shape).astype(np.float32)
    with kernels.using("numpy"):
        a = T.conv2d_backward(x, p, up)
    with kernels.using("numba"):
        b = T.conv2d_backward(x, p, up)
    for u, v in [(a.input_grad, b.input_grad), (a.weight_grad, b.weight_grad), (a.bias_grad, b.bias_grad)]:
        np.testing.assert_allclose(u, v, rtol=1e-4, atol=1e-4)


def test_maxpool_bitwise_across_backends():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 3, 8, 10)).astype(np.float32)
    x[0, 0, :2, :2] = 1.0  # a tie
    up = rng.normal(size=(2, 3, 4, 5)).astype(np.float32)
    with kernels.using("numpy"):
        a, ga = T.maxpool2(x), T.maxpool2_backward(x, up)
    with kernels.using("numba"):
        b, gb = T.maxpool2(x), T.maxpool2_backward(x, up)
    assert np.array_equal(a, b) and np.array_equal(ga, gb)


def test_unknown_backend_rejected_and_restored():
    before = kernels.backend
    with pytest.raises(ValueError):
        kernels.set_backend("cuda")
    assert kernels.backend == before
