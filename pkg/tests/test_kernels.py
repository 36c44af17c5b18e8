import numpy as np
import pytest

from sepgnet import kernels


def _random_case(rng, b=2, c=3, k=4, h=11, w=9, kh=3, kw=3, stride=2, padding=1):
    x = rng.standard_normal((b, c, h, w)).astype(np.float32)
    wt = rng.standard_normal((k, c, kh, kw)).astype(np.float32)
    return x, wt, stride, padding


def _naive_conv(x, w, stride, padding):
    b, c, h, wid = x.shape
    k, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wid + 2 * padding - kw) // stride + 1
    out = np.zeros((b, k, ho, wo), dtype=np.float64)
    for bi in range(b):
        for ki in range(k):
            for oh in range(ho):
                for ow in range(wo):
                    patch = xp[bi, :, oh * stride : oh * stride + kh, ow * stride : ow * stride + kw]
                    out[bi, ki, oh, ow] = (patch.astype(np.float64) * w[ki]).sum()
    return out


@pytest.fixture(params=["numpy"] + (["numba"] if kernels.HAS_NUMBA else []))
def backend(request):
    old = kernels.get_backend()
    kernels.set_backend(request.param)
    yield request.param
    kernels.set_backend(old)


def test_forward_matches_naive_loop(backend):
    rng = np.random.default_rng(0)
    for stride, padding in ((1, 0), (2, 1), (3, 2)):
        x, w, _, _ = _random_case(rng, stride=stride, padding=padding)
        y, _ = kernels.conv2d_forward(x, w, stride, padding)
        np.testing.assert_allclose(y, _naive_conv(x, w, stride, padding), rtol=1e-4, atol=1e-5)


def test_forward_deterministic_and_batch_independent(backend):
    rng = np.random.default_rng(1)
    x, w, stride, padding = _random_case(rng, b=6)
    y1, _ = kernels.conv2d_forward(x, w, stride, padding)
    y2, _ = kernels.conv2d_forward(x, w, stride, padding)
    assert np.array_equal(y1, y2)
    yh, _ = kernels.conv2d_forward(x[:3], w, stride, padding)
    assert np.array_equal(y1[:3], yh), "per-sample result depends on batch size"


def test_backward_matches_finite_differences(backend):
    rng = np.random.default_rng(2)
    x, w, stride, padding = _random_case(rng, b=1, c=2, k=3, h=7, w=6)
    x64, w64 = x.astype(np.float64), w.astype(np.float64)
    y, cols = kernels.conv2d_forward(x64, w64, stride, padding, want_cols=True)
    dy = rng.standard_normal(y.shape)
    dx, dw = kernels.conv2d_backward(dy, cols, w64, x64.shape, stride, padding, True, True)
    eps = 1e-6

    def loss(xv, wv):
        yv, _ = kernels.conv2d_forward(xv, wv, stride, padding)
        return float((yv * dy).sum())

    for arr, grad, which in ((x64, dx, "x"), (w64, dw, "w")):
        flat = arr.reshape(-1)
        for i in rng.choice(flat.size, size=10, replace=False):
            orig = flat[i]
            flat[i] = orig + eps
            fp = loss(x64, w64)
            flat[i] = orig - eps
            fm = loss(x64, w64)
            flat[i] = orig
            num = (fp - fm) / (2 * eps)
            assert abs(num - grad.reshape(-1)[i]) < 1e-4 * max(1.0, abs(num)), which


@pytest.mark.skipif(not kernels.HAS_NUMBA, reason="numba unavailable")
def test_backends_agree():
    rng = np.random.default_rng(3)
    x, w, stride, padding = _random_case(rng, b=4, c=5, k=6, h=13, w=10)
    old = kernels.get_backend()
    try:
        kernels.set_backend("numpy")
        y_np, cols_np = kernels.conv2d_forward(x, w, stride, padding, want_cols=True)
        dy = rng.standard_normal(y_np.shape).astype(np.float32)
        dx_np, dw_np = kernels.conv2d_backward(dy, cols_np, w, x.shape, stride, padding, True, True)
        kernels.set_backend("numba")
        y_nb, cols_nb = kernels.conv2d_forward(x, w, stride, padding, want_cols=True)
        dx_nb, dw_nb = kernels.conv2d_backward(dy, cols_nb, w, x.shape, stride, padding, True, True)
    finally:
        kernels.set_backend(old)
    np.testing.assert_allclose(y_np, y_nb, rtol=2e-6, atol=1e-6)
    np.testing.assert_allclose(dx_np, dx_nb, rtol=2e-6, atol=1e-6)
    np.testing.assert_allclose(dw_np, dw_nb, rtol=2e-5, atol=1e-4)


def test_set_backend_rejects_unknown():
    with pytest.raises(ValueError):
        kernels.set_backend("cuda")
