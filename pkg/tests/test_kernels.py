import numpy as np
import pytest

from cocktail import _fallback, kernels

needs_compiled = pytest.mark.skipif("compiled" not in kernels.available_backends(),
                                    reason="compiled extension not built")


@pytest.fixture
def backend():
    prev = kernels.BACKEND
    yield kernels.set_backend
    kernels.set_backend(prev)


@needs_compiled
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_compiled_matches_fallback(dtype):
    from cocktail import _kernels
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3, 9, 8)).astype(dtype)
    for stride in (1, 2):
        a = _kernels.im2col(x, 3, 3, stride)
        b = _fallback.im2col(x, 3, 3, stride)
        np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(_kernels.col2im(np.ascontiguousarray(a), 9, 8, stride),
                                      _fallback.col2im(np.ascontiguousarray(b), 9, 8, stride))
    flat = x.reshape(-1)
    g = rng.standard_normal(flat.shape).astype(dtype)
    np.testing.assert_allclose(_kernels.silu_forward(flat), _fallback.silu_forward(flat), rtol=1e-6)
    np.testing.assert_allclose(_kernels.silu_backward(flat, g), _fallback.silu_backward(flat, g), rtol=1e-6)
    m1, s1 = _kernels.channel_stats(x.reshape(6, -1), 1e-5)
    m2, s2 = _fallback.channel_stats(x.reshape(6, -1), 1e-5)
    np.testing.assert_allclose(m1, m2, rtol=1e-12, atol=1e-15)
    np.testing.assert_allclose(s1, s2, rtol=1e-12)


@needs_compiled
def test_model_forward_same_on_both_backends(backend):
    from cocktail.backbone import UNet
    unet = UNet()
    for p in unet.decoder.conv_out.parameters():
        p.data = np.full(p.shape, 0.01, dtype=np.float32)
    z = np.random.default_rng(0).standard_normal((2, 4, 16, 16)).astype(np.float32)
    ids = np.ones((2, 8), dtype=np.int64)
    backend("compiled")
    a, _ = unet(z, 10, ids)
    backend("python")
    b, _ = unet(z, 10, ids)
    np.testing.assert_allclose(a.data, b.data, atol=1e-5)


def test_set_backend_validates(backend):
    with pytest.raises(ValueError):
        backend("gpu")
    backend("python")
    assert kernels.BACKEND == "python"
