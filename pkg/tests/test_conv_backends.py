import numpy as np
import pytest

from metaconv import conv


def brute_force_conv(images, kernels, pad):
    """Nested-loop cross-correlation oracle."""
    B, H, W = images.shape
    C, kh, kw = kernels.shape
    out = np.zeros((B, C, H, W))
    for b in range(B):
        for c in range(C):
            for i in range(H):
                for j in range(W):
                    acc = 0.0
                    for m in range(kh):
                        for n in range(kw):
                            ii, jj = i + m - pad, j + n - pad
                            if 0 <= ii < H and 0 <= jj < W:
                                acc += kernels[c, m, n] * images[b, ii, jj]
                    out[b, c, i, j] = acc
    return out


BACKENDS = [conv.get_backend(name) for name in conv.available_backends()]


@pytest.mark.parametrize("backend", BACKENDS, ids=lambda b: b.NAME)
def test_conv_forward_matches_bruteforce(backend, rng):
    images = rng.standard_normal((2, 10, 10))
    kernels = rng.standard_normal((3, 5, 5))
    ref = brute_force_conv(images, kernels, 2)
    got = backend.conv2d_forward(np.ascontiguousarray(images),
                                 np.ascontiguousarray(kernels), 2)
    np.testing.assert_allclose(got, ref, rtol=1e-12, atol=1e-14)


@pytest.mark.parametrize("backend", BACKENDS, ids=lambda b: b.NAME)
def test_weight_grad_matches_finite_difference(backend, rng):
    images = rng.standard_normal((2, 8, 8))
    kernels = rng.standard_normal((2, 3, 3))
    dout = rng.standard_normal((2, 2, 8, 8))
    got = backend.conv2d_weight_grad(np.ascontiguousarray(images),
                                     np.ascontiguousarray(dout), 3, 3, 1)
    eps = 1e-6
    for c in (0, 1):
        for m in range(3):
            for n in range(3):
                kp = kernels.copy(); kp[c, m, n] += eps
                km = kernels.copy(); km[c, m, n] -= eps
                fp = (backend.conv2d_forward(images, kp, 1) * dout).sum()
                fm = (backend.conv2d_forward(images, km, 1) * dout).sum()
                fd = (fp - fm) / (2 * eps)
                assert abs(got[c, m, n] - fd) < 1e-5 * max(1.0, abs(fd))


@pytest.mark.parametrize("backend", BACKENDS, ids=lambda b: b.NAME)
def test_maxpool_roundtrip(backend, rng):
    x = np.ascontiguousarray(rng.standard_normal((3, 2, 8, 8)))
    pooled, arg = backend.maxpool2_forward(x)
    assert pooled.shape == (3, 2, 4, 4)
    # pooled value really is the window max
    ref = x.reshape(3, 2, 4, 2, 4, 2).max(axis=(3, 5))
    np.testing.assert_array_equal(pooled, ref)
    d = np.ascontiguousarray(rng.standard_normal(pooled.shape))
    dx = backend.maxpool2_backward(d, arg, 8, 8)
    # gradient lands on exactly one element per window, summing to d
    np.testing.assert_allclose(dx.reshape(3, 2, 4, 2, 4, 2).sum(axis=(3, 5)), d)
    assert ((dx != 0).reshape(3, 2, 4, 2, 4, 2).sum(axis=(3, 5)) <= 1).all()


def test_backends_agree(rng):
    if len(BACKENDS) < 2:
        pytest.skip("compiled extension not built")
    a, b = BACKENDS
    images = np.ascontiguousarray(rng.standard_normal((4, 12, 12)))
    kernels = np.ascontiguousarray(rng.standard_normal((5, 7, 7)))
    np.testing.assert_allclose(a.conv2d_forward(images, kernels, 3),
                               b.conv2d_forward(images, kernels, 3),
                               rtol=1e-12, atol=1e-13)
    x = np.ascontiguousarray(rng.standard_normal((2, 3, 10, 10)))
    pa, aa = a.maxpool2_forward(x)
    pb, ab = b.maxpool2_forward(x)
    np.testing.assert_array_equal(pa, pb)
    np.testing.assert_array_equal(aa, ab)


def test_tie_breaking_matches(rng):
    if len(BACKENDS) < 2:
        pytest.skip("compiled extension not built")
    a, b = BACKENDS
    # constant windows force ties; both must pick the first element
    x = np.zeros((1, 1, 4, 4))
    pa, aa = a.maxpool2_forward(x)
    pb, ab = b.maxpool2_forward(x)
    np.testing.assert_array_equal(aa, ab)
    assert (aa == 0).all()
