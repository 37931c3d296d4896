"""Kernel correctness: naive-loop oracles, gradients, backend parity."""

import numpy as np
import pytest

from cunets import backend
from cunets.kernels import numpy_impl

try:
    from cunets.kernels import numba_impl

    HAS_NUMBA = True
except ImportError:
    HAS_NUMBA = False

IMPLS = [numpy_impl] + ([numba_impl] if HAS_NUMBA else [])


def naive_conv2d(xp, w, dilation, out_h, out_w):
    b, _, _, cin = xp.shape
    k, _, _, cout = w.shape
    y = np.zeros((b, out_h, out_w, cout), dtype=xp.dtype)
    for n in range(b):
        for i in range(out_h):
            for j in range(out_w):
                for kh in range(k):
                    for kw in range(k):
                        px = xp[n, i + kh * dilation, j + kw * dilation]
                        y[n, i, j] += px @ w[kh, kw]
    return y


def _pad(x, k, dilation):
    p = dilation * (k // 2)
    return np.pad(x, ((0, 0), (p, p), (p, p), (0, 0))), p


@pytest.mark.parametrize("impl", IMPLS, ids=lambda m: m.__name__.rsplit(".", 1)[-1])
@pytest.mark.parametrize("k,dilation", [(1, 1), (3, 1), (3, 2), (3, 6)])
def test_conv2d_forward_matches_naive(impl, k, dilation, rng):
    x = rng.normal(size=(2, 9, 7, 3))
    w = rng.normal(size=(k, k, 3, 5))
    xp, _ = _pad(x, k, dilation)
    got = impl.conv2d_forward(xp, w, dilation, 9, 7)
    want = naive_conv2d(xp, w, dilation, 9, 7)
    np.testing.assert_allclose(got, want, rtol=1e-10, atol=1e-12)


@pytest.mark.parametrize("impl", IMPLS, ids=lambda m: m.__name__.rsplit(".", 1)[-1])
def test_conv2d_gradients_match_finite_differences(impl, rng):
    x = rng.normal(size=(1, 6, 6, 2))
    w = rng.normal(size=(3, 3, 2, 4))
    dilation = 1
    xp, p = _pad(x, 3, dilation)
    dy = rng.normal(size=(1, 6, 6, 4))

    def loss(x_, w_):
        xp_, _ = _pad(x_, 3, dilation)
        return float((impl.conv2d_forward(xp_, w_, dilation, 6, 6) * dy).sum())

    dw = impl.conv2d_weight_grad(xp, dy, 3, dilation)
    dxp = impl.conv2d_input_grad(dy, w, dilation, xp.shape[1], xp.shape[2])
    dx = dxp[:, p:-p, p:-p, :]

    h = 1e-6
    for arr, grad, which in ((x, dx, "x"), (w, dw, "w")):
        flat_idx = rng.integers(0, arr.size, size=12)
        for fi in flat_idx:
            idx = np.unravel_index(fi, arr.shape)
            orig = arr[idx]
            arr[idx] = orig + h
            fp = loss(x, w)
            arr[idx] = orig - h
            fm = loss(x, w)
            arr[idx] = orig
            fd = (fp - fm) / (2 * h)
            assert abs(fd - grad[idx]) < 1e-6 * max(1.0, abs(fd)), which


@pytest.mark.parametrize("impl", IMPLS, ids=lambda m: m.__name__.rsplit(".", 1)[-1])
def test_convt2x2_shapes_and_gradients(impl, rng):
    x = rng.normal(size=(2, 5, 4, 3))
    w = rng.normal(size=(2, 2, 3, 6))
    y = impl.convt2x2_forward(x, w)
    assert y.shape == (2, 10, 8, 6)
    # scatter semantics: each input pixel paints its own 2x2 tile
    want = np.einsum("bijc,uvcf->biujvf", x, w).reshape(2, 10, 8, 6)
    np.testing.assert_allclose(y, want, rtol=1e-10, atol=1e-12)

    dy = rng.normal(size=y.shape)
    dx = impl.convt2x2_input_grad(dy, w)
    dw = impl.convt2x2_weight_grad(x, dy)
    np.testing.assert_allclose(dx, np.einsum("biujvf,uvcf->bijc",
                                             dy.reshape(2, 5, 2, 4, 2, 6), w),
                               rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(dw, np.einsum("bijc,biujvf->uvcf",
                                             x, dy.reshape(2, 5, 2, 4, 2, 6)),
                               rtol=1e-10, atol=1e-12)


@pytest.mark.parametrize("impl", IMPLS, ids=lambda m: m.__name__.rsplit(".", 1)[-1])
def test_maxpool_forward_backward(impl, rng):
    x = rng.normal(size=(2, 6, 8, 3))
    y, idx = impl.maxpool2_forward(x)
    assert y.shape == (2, 3, 4, 3)
    want = x.reshape(2, 3, 2, 4, 2, 3).max(axis=(2, 4))
    np.testing.assert_array_equal(y, want)

    dy = rng.normal(size=y.shape)
    dx = impl.maxpool2_input_grad(dy, idx, 6, 8)
    # gradient lands exactly once, on the argmax position
    np.testing.assert_allclose(dx.reshape(2, 3, 2, 4, 2, 3).sum(axis=(2, 4)), dy)
    assert np.count_nonzero(dx) == dy.size


def test_maxpool_tie_breaks_to_first_position():
    x = np.zeros((1, 2, 2, 1))
    for impl in IMPLS:
        y, idx = impl.maxpool2_forward(x)
        assert y[0, 0, 0, 0] == 0.0
        assert idx[0, 0, 0, 0] == 0


def test_pool_then_upsample_restores_spatial_dims(rng):
    x = rng.normal(size=(1, 8, 8, 2))
    y, _ = numpy_impl.maxpool2_forward(x)
    w = rng.normal(size=(2, 2, 2, 2))
    z = numpy_impl.convt2x2_forward(y, w)
    assert z.shape[1:3] == x.shape[1:3]


def test_hausdorff_directed_matches_bruteforce(rng):
    for _ in range(20):
        a = rng.integers(0, 12, size=(rng.integers(1, 30), 2)).astype(np.int64)
        b = rng.integers(0, 12, size=(rng.integers(1, 30), 2)).astype(np.int64)
        brute = max(min(((pa - pb) ** 2).sum() for pb in b) for pa in a)
        for impl in IMPLS:
            assert impl.hausdorff_directed_sq(a, b) == pytest.approx(float(brute), abs=1e-9)


@pytest.mark.skipif(not HAS_NUMBA, reason="numba unavailable")
def test_backends_agree_on_conv(rng):
    x = rng.normal(size=(2, 8, 8, 5)).astype(np.float32)
    w = rng.normal(size=(3, 3, 5, 7)).astype(np.float32)
    xp, _ = _pad(x, 3, 1)
    y_np = numpy_impl.conv2d_forward(xp, w, 1, 8, 8)
    y_nb = numba_impl.conv2d_forward(xp, w, 1, 8, 8)
    np.testing.assert_allclose(y_np, y_nb, rtol=2e-5, atol=2e-5)


def test_backend_env_resolution(monkeypatch):
    monkeypatch.setenv(backend.ENV_VAR, "numpy")
    assert backend.resolve("conv2d") == "numpy"
    assert backend.resolve("hausdorff") == "numpy"
    monkeypatch.setenv(backend.ENV_VAR, "auto")
    assert backend.resolve("conv2d") == "numpy"
    if backend.numba_available():
        assert backend.resolve("hausdorff") == "numba"
        monkeypatch.setenv(backend.ENV_VAR, "numba")
        assert backend.resolve("conv2d") == "numba"
    monkeypatch.setenv(backend.ENV_VAR, "bogus")
    with pytest.raises(Exception):
        backend.resolve("conv2d")
