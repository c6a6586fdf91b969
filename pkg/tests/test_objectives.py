import warnings

import numpy as np
import pytest

from ram3d.errors import FeatureError
from ram3d.objectives import (DegenerateDepthWarning, FeatureExtractor, LossWeights, RandomConvExtractor, depth_loss,
                              erase_total, perceptual_loss, recon_loss, replace_total)


def dense_conv_matrix(h, w, weight, stride, pad):
    """Explicit linear map of one strided convolution (no bias) on a flattened (H, W, Cin) input."""
    k, _, cin, cout = weight.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    mat = np.zeros((ho * wo * cout, h * w * cin))
    for oy in range(ho):
        for ox in range(wo):
            for i in range(k):
                for j in range(k):
                    y, x = oy * stride + i - pad, ox * stride + j - pad
                    if 0 <= y < h and 0 <= x < w:
                        for c in range(cin):
                            for o in range(cout):
                                mat[(oy * wo + ox) * cout + o, (y * w + x) * cin + c] += weight[i, j, c, o]
    return mat, (ho, wo, cout)


def dense_features(ext, image):
    x = image.reshape(-1)
    shape = image.shape
    for n, (w, b) in enumerate(ext.layers):
        mat, shape = dense_conv_matrix(shape[0], shape[1], w, ext.stride, ext.pad)
        x = mat @ x + np.tile(b, shape[0] * shape[1])
        if n < len(ext.layers) - 1:
            x = np.tanh(x)
    return x.reshape(shape)


def test_recon_examples():
    img = np.zeros((2, 2, 3))
    halo = np.zeros((2, 2), bool)
    halo[0, 0] = halo[1, 1] = True
    x = img.copy()
    x[0, 0] = 0.1
    x[1, 1] = 0.3
    loss, grad = recon_loss(x, img, halo)
    assert np.isclose(loss, 0.05)
    assert not grad[~halo].any()
    assert recon_loss(img, img, halo)[0] == 0
    assert recon_loss(x, img, np.zeros((2, 2), bool)) == (0.0, pytest.approx(np.zeros_like(x)))


def test_perceptual_matches_dense_oracle():
    ext = RandomConvExtractor(seed=0)
    img = np.random.default_rng(0).random((12, 12, 3))
    assert np.allclose(ext.features(img), dense_features(ext, img), atol=1e-12)


def _fd_check(f, x, grad, stride=5, h=1e-6):
    for idx in list(np.ndindex(x.shape))[::stride]:
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        fd = (f(xp) - f(xm)) / (2 * h)
        assert abs(fd - grad[idx]) <= 1e-3 * max(abs(fd), 1e-6), idx


def test_losses_finite_differences():
    rng = np.random.default_rng(1)
    x, img = rng.random((8, 8, 3)), rng.random((8, 8, 3))
    halo = rng.random((8, 8)) > 0.5
    ext = RandomConvExtractor(seed=2)
    _fd_check(lambda v: recon_loss(v, img, halo)[0], x, recon_loss(x, img, halo)[1])
    _fd_check(lambda v: perceptual_loss(v, img, halo, ext)[0], x, perceptual_loss(x, img, halo, ext)[1])
    d, e = rng.random((8, 8)), rng.random((8, 8))
    region = rng.random((8, 8)) > 0.3
    _fd_check(lambda v: depth_loss(v, e, region)[0], d, depth_loss(d, e, region)[1], stride=1)


def test_halo_losses_ignore_exterior():
    rng = np.random.default_rng(3)
    x, img = rng.random((8, 8, 3)), rng.random((8, 8, 3))
    halo = np.zeros((8, 8), bool)
    halo[2:6, 2:6] = True
    ext = RandomConvExtractor()
    x2, img2 = x.copy(), img.copy()
    x2[~halo] = rng.random(x2[~halo].shape)
    img2[~halo] = rng.random(img2[~halo].shape)
    assert recon_loss(x, img, halo)[0] == recon_loss(x2, img2, halo)[0]
    assert np.isclose(perceptual_loss(x, img, halo, ext)[0], perceptual_loss(x2, img2, halo, ext)[0])


def test_depth_examples():
    rng = np.random.default_rng(4)
    d = rng.random((6, 6))
    region = np.ones((6, 6), bool)
    assert np.isclose(depth_loss(d, d, region)[0], -1.0)
    assert np.isclose(depth_loss(d, 3.0 * d + 2.0, region)[0], -1.0)
    assert np.isclose(depth_loss(d, -d, region)[0], 1.0)
    e = rng.random((6, 6))
    base = depth_loss(d, e, region)[0]
    assert abs(depth_loss(0.5 * d + 7, e, region)[0] - base) <= 1e-6
    assert abs(depth_loss(d, 4 * e - 1, region)[0] - base) <= 1e-6


def test_depth_constant_is_flagged():
    with pytest.warns(DegenerateDepthWarning):
        loss, grad = depth_loss(np.ones((4, 4)), np.random.default_rng(0).random((4, 4)), np.ones((4, 4), bool))
    assert loss == 0 and not grad.any()
    with pytest.raises(ValueError):
        depth_loss(np.ones((2, 2)), np.ones((2, 2)), np.eye(2, dtype=bool) & False)


def test_totals():
    assert erase_total((0, 0, 0, 0)) == 0
    assert np.isclose(erase_total((1, 1, 1, 1)), 7.03)
    assert erase_total((2, 1, 1, 1), LossWeights(0, 0, 0)) == 2
    assert replace_total((1, 5, 5, 5)) == 1
    assert replace_total({"hifa": 0.0}) == 0
    assert replace_total((1, 5, 5, 5), LossWeights()) == erase_total((1, 5, 5, 5), LossWeights(0, 0, 0))
    with pytest.raises(ValueError):
        LossWeights(-1, 0, 0)


def test_extractor_failure_is_feature_error():
    class Bad(FeatureExtractor):
        def features(self, image):
            raise RuntimeError("no weights")

    with pytest.raises(FeatureError):
        perceptual_loss(np.zeros((4, 4, 3)), np.zeros((4, 4, 3)), np.ones((4, 4), bool), Bad())
    with pytest.raises(FeatureError):
        RandomConvExtractor().features(np.zeros((4, 4)))
