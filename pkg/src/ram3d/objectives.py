"""Halo reconstruction, perceptual and depth-correlation losses, and stage totals.

Each loss returns ``(value, cotangent)`` where the cotangent is dvalue/dinput
for the rendered argument, so the trainer can chain it into the renderer.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import FeatureError
from .scene_io import apply_crop

DEPTH_STD_EPS = 1e-8


class DegenerateDepthWarning(UserWarning):
    pass


@dataclass
class LossWeights:
    lambda_recon: float = 3.0
    lambda_vgg: float = 0.03
    lambda_depth: float = 3.0

    def __post_init__(self):
        if min(self.lambda_recon, self.lambda_vgg, self.lambda_depth) < 0:
            raise ValueError("loss weights must be non-negative")


class FeatureExtractor:
    """Frozen image feature map with an adjoint (vector-Jacobian product)."""

    def features(self, image: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def vjp(self, image: np.ndarray, cotangent: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class DepthEstimator:
    """Monocular depth up to an unknown affine map."""

    def estimate(self, image: np.ndarray, view=None, crop=None) -> np.ndarray:
        """Depth for ``image``; ``view``/``crop`` say where the image came from."""
        raise NotImplementedError


class OracleDepthEstimator(DepthEstimator):
    """Returns a stored depth map per view and ignores the image."""

    def __init__(self, depths: Sequence[np.ndarray]):
        self.depths = [np.asarray(d, dtype=np.float64) for d in depths]

    def estimate(self, image, view=None, crop=None):
        depth = self.depths[0 if len(self.depths) == 1 else view]
        return depth if crop is None else apply_crop(depth, crop)


def _pad(x, p):
    return np.pad(x, ((p, p), (p, p), (0, 0)))


def conv2d(x, weight, bias, stride, pad):
    """x (H, W, Cin), weight (k, k, Cin, Cout) -> (Ho, Wo, Cout)."""
    k = weight.shape[0]
    xp = _pad(x, pad)
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(0, 1))[::stride, ::stride]
    # win: (Ho, Wo, Cin, k, k)
    return np.einsum("hwcij,ijco->hwo", win, weight) + bias


def conv2d_vjp(x_shape, weight, stride, pad, g_out):
    k = weight.shape[0]
    h, w, _ = x_shape
    g_xp = np.zeros((h + 2 * pad, w + 2 * pad, x_shape[2]))
    ho, wo = g_out.shape[:2]
    g_cols = np.einsum("hwo,ijco->hwijc", g_out, weight)
    for i in range(k):
        for j in range(k):
            g_xp[i:i + stride * ho:stride, j:j + stride * wo:stride] += g_cols[:, :, i, j]
    return g_xp[pad:pad + h, pad:pad + w]


class RandomConvExtractor(FeatureExtractor):
    """Three fixed random stride-2 3x3 convolutions with tanh between them.

    Stands in for a frozen mid-level VGG feature map; identical gradient plumbing.
    """

    def __init__(self, seed: int = 0, channels: Sequence[int] = (8, 8, 8), kernel: int = 3, stride: int = 2):
        rng = np.random.default_rng(seed)
        self.stride = stride
        self.pad = kernel // 2
        self.layers = []
        cin = 3
        for cout in channels:
            bound = 1.0 / np.sqrt(kernel * kernel * cin)
            w = rng.uniform(-bound, bound, size=(kernel, kernel, cin, cout))
            b = rng.uniform(-bound, bound, size=cout)
            self.layers.append((w, b))
            cin = cout

    def _forward(self, image):
        x = np.asarray(image, dtype=np.float64)
        trace = []
        for i, (w, b) in enumerate(self.layers):
            z = conv2d(x, w, b, self.stride, self.pad)
            trace.append((x.shape, z))
            x = np.tanh(z) if i < len(self.layers) - 1 else z
        return x, trace

    def features(self, image):
        if image.ndim != 3 or image.shape[2] != 3:
            raise FeatureError(f"expected an (H, W, 3) image, got {image.shape}")
        return self._forward(image)[0]

    def vjp(self, image, cotangent):
        _, trace = self._forward(image)
        g = np.asarray(cotangent, dtype=np.float64)
        for i in reversed(range(len(self.layers))):
            x_shape, z = trace[i]
            if i < len(self.layers) - 1:
                g = g * (1.0 - np.tanh(z) ** 2)
            g = conv2d_vjp(x_shape, self.layers[i][0], self.stride, self.pad, g)
        return g


def recon_loss(x_bg, image, halo):
    """MSE over halo pixels and channels; zero cotangent outside the halo."""
    x_bg = np.asarray(x_bg, dtype=np.float64)
    halo = np.asarray(halo, dtype=bool)
    grad = np.zeros_like(x_bg)
    n = int(halo.sum()) * x_bg.shape[-1]
    if n == 0:
        return 0.0, grad
    diff = x_bg[halo] - np.asarray(image, dtype=np.float64)[halo]
    grad[halo] = 2.0 * diff / n
    return float(np.sum(diff * diff) / n), grad


def perceptual_loss(x_bg, image, halo, extractor: FeatureExtractor):
    """MSE between extractor features of the halo-masked render and input."""
    x_bg = np.asarray(x_bg, dtype=np.float64)
    h = np.asarray(halo, dtype=np.float64)[..., None]
    if not h.any():
        return 0.0, np.zeros_like(x_bg)
    xm = x_bg * h
    try:
        fx = extractor.features(xm)
        fi = extractor.features(np.asarray(image, dtype=np.float64) * h)
        diff = fx - fi
        grad = extractor.vjp(xm, 2.0 * diff / diff.size) * h
    except FeatureError:
        raise
    except Exception as exc:
        raise FeatureError(f"feature extractor failed: {exc}") from exc
    return float(np.mean(diff * diff)), grad


def depth_loss(rendered_depth, estimated_depth, region):
    """Negative Pearson correlation over region pixels; cotangent w.r.t. rendered depth.

    A constant map on either side has no defined correlation: the loss is 0
    and a :class:`DegenerateDepthWarning` is raised.
    """
    rendered_depth = np.asarray(rendered_depth, dtype=np.float64)
    region = np.asarray(region, dtype=bool)
    n = int(region.sum())
    if n < 2:
        raise ValueError("depth loss needs at least two region pixels")
    a = rendered_depth[region]
    b = np.asarray(estimated_depth, dtype=np.float64)[region]
    a = a - a.mean()
    b = b - b.mean()
    sa = np.sqrt(np.mean(a * a))
    sb = np.sqrt(np.mean(b * b))
    grad = np.zeros_like(rendered_depth)
    if sa < 1e-12 or sb < 1e-12:
        warnings.warn("constant depth map: correlation treated as 0", DegenerateDepthWarning, stacklevel=2)
        return 0.0, grad
    cov = np.mean(a * b)
    da, db = sa + DEPTH_STD_EPS, sb + DEPTH_STD_EPS
    rho = cov / (da * db)
    d_rho = b / (n * da * db) - cov / (da * da * db) * a / (n * sa)
    grad[region] = -d_rho
    return float(-rho), grad


def _parts(parts):
    if isinstance(parts, Mapping):
        return (parts.get("hifa", 0.0), parts.get("recon", 0.0), parts.get("vgg", 0.0), parts.get("depth", 0.0))
    return tuple(parts)


def erase_total(parts, weights: LossWeights | None = None) -> float:
    """L_hifa + l_recon L_recon + l_vgg L_vgg + l_depth L_depth; ``parts`` is a 4-tuple or dict."""
    weights = weights or LossWeights()
    hifa, recon, vgg, depth = _parts(parts)
    return hifa + weights.lambda_recon * recon + weights.lambda_vgg * vgg + weights.lambda_depth * depth


def replace_total(parts, weights: LossWeights | None = None) -> float:
    """Distillation loss only: the Replace stage zeroes every other weight."""
    return erase_total(parts, LossWeights(0.0, 0.0, 0.0))


@dataclass
class Objectives:
    """What the trainer needs besides guidance: auxiliary models and loss weights."""

    extractor: FeatureExtractor = field(default_factory=RandomConvExtractor)
    depth_estimator: DepthEstimator | None = None
    weights: LossWeights = field(default_factory=LossWeights)
