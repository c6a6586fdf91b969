"""Ray generation, coarse-to-fine sampling and discrete volume rendering.

Rendering per ray, with samples t_0 < ... < t_{n-1} and t_n = t_far::

    delta_i = t_{i+1} - t_i
    a_i     = 1 - exp(-sigma_i * delta_i)
    T_i     = prod_{j<i} (1 - a_j)
    w_i     = T_i * a_i
    rgb = sum w_i c_i,  alpha = sum w_i,  depth = sum w_i t_i / max(alpha, 1e-8)

The backward pass is written in closed form: with tau_k = sigma_k delta_k and
G_i = dL/dw_i, dL/dtau_k = T_{k+1} G_k - sum_{i>k} w_i G_i.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalError
from .field import FieldConfig, FieldParams, field_backward, field_forward

DEPTH_EPS = 1e-8
PDF_EPS = 1e-5


@dataclass
class Rays:
    origins: np.ndarray  # (R, 3)
    directions: np.ndarray  # (R, 3), unit norm
    near: np.ndarray  # (R,)
    far: np.ndarray  # (R,)

    def __len__(self):
        return self.origins.shape[0]

    def subset(self, sl):
        return Rays(self.origins[sl], self.directions[sl], self.near[sl], self.far[sl])


@dataclass
class RenderSettings:
    n_coarse: int = 128
    n_fine: int = 128
    chunk: int = 4096
    jitter: bool = True


def generate_rays(camera, pixels) -> Rays:
    """Back-project pixel centres (rows, cols) through a pinhole camera."""
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    rows, cols = pixels[:, 0], pixels[:, 1]
    d_cam = np.stack([
        (cols + 0.5 - camera.cx) / camera.fx,
        -(rows + 0.5 - camera.cy) / camera.fy,
        -np.ones_like(rows),
    ], axis=-1)
    rot = camera.cam_to_world[:, :3]
    d = d_cam @ rot.T
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    o = np.broadcast_to(camera.cam_to_world[:, 3], d.shape).copy()
    n = d.shape[0]
    return Rays(o, d, np.full(n, camera.near), np.full(n, camera.far))


def stratified_samples(near, far, n: int, rng=None, jitter: bool = True) -> np.ndarray:
    """One draw per equal sub-interval of [near, far]; (R, n) ascending."""
    near = np.atleast_1d(np.asarray(near, dtype=np.float64))
    far = np.atleast_1d(np.asarray(far, dtype=np.float64))
    edges = np.linspace(0.0, 1.0, n + 1)
    if jitter:
        u = rng.random((near.shape[0], n))
    else:
        u = np.full((near.shape[0], n), 0.5)
    frac = edges[:-1] + u / n
    return near[:, None] + (far - near)[:, None] * frac


def _bin_edges(t, far):
    return np.concatenate([t, np.asarray(far, dtype=np.float64).reshape(-1, 1)], axis=1)


def fine_draws(t_coarse, weights, far, n: int, rng=None, jitter: bool = True) -> np.ndarray:
    """Inverse-CDF draws over the coarse bins [t_i, t_{i+1}], in draw order (R, n)."""
    t_coarse = np.atleast_2d(t_coarse)
    weights = np.atleast_2d(np.asarray(weights, dtype=np.float64))
    r, m = t_coarse.shape
    edges = _bin_edges(t_coarse, np.broadcast_to(far, (r,)))
    pdf = weights + PDF_EPS
    pdf /= pdf.sum(axis=1, keepdims=True)
    cdf = np.concatenate([np.zeros((r, 1)), np.cumsum(pdf, axis=1)], axis=1)
    cdf[:, -1] = 1.0
    if jitter:
        u = rng.random((r, n))
    else:
        u = np.broadcast_to((np.arange(n) + 0.5) / n, (r, n))
    bins = (u[:, :, None] >= cdf[:, None, 1:]).sum(axis=-1)
    bins = np.minimum(bins, m - 1)
    c0 = np.take_along_axis(cdf, bins, axis=1)
    p = np.take_along_axis(pdf, bins, axis=1)
    e0 = np.take_along_axis(edges, bins, axis=1)
    e1 = np.take_along_axis(edges, bins + 1, axis=1)
    frac = np.clip((u - c0) / p, 0.0, 1.0)
    return e0 + frac * (e1 - e0)


def importance_samples(t_coarse, weights, far, n: int, rng=None, jitter: bool = True) -> np.ndarray:
    """Fine draws merged and sorted with ``t_coarse``."""
    fine = fine_draws(t_coarse, weights, far, n, rng, jitter)
    return np.sort(np.concatenate([np.atleast_2d(t_coarse), fine], axis=1), axis=1)


@dataclass
class VolumeCache:
    t: np.ndarray
    delta: np.ndarray
    trans: np.ndarray  # T_i, (R, S + 1)
    weights: np.ndarray
    color: np.ndarray
    alpha: np.ndarray
    depth: np.ndarray


def volume_render(t, far, sigma, color):
    """Composite samples along rays.

    Args:
      t: (R, S) ascending sample distances.
      far: (R,) far bounds closing the last interval.
      sigma: (R, S) densities.
      color: (R, S, 3) colors.

    Returns:
      rgb (R, 3), alpha (R,), depth (R,), weights (R, S), cache.
    """
    if not (np.isfinite(sigma).all() and np.isfinite(color).all()):
        raise NumericalError("non-finite field output in volume rendering")
    t = np.asarray(t)
    edges = _bin_edges(t, np.broadcast_to(far, (t.shape[0],)))
    delta = np.diff(edges, axis=1)
    tau = sigma * delta
    acc = np.concatenate([np.zeros((t.shape[0], 1)), np.cumsum(tau, axis=1)], axis=1)
    trans = np.exp(-acc)
    weights = trans[:, :-1] * -np.expm1(-tau)
    rgb = np.einsum("rs,rsc->rc", weights, color)
    alpha = weights.sum(axis=1)
    depth = (weights * t).sum(axis=1) / np.maximum(alpha, DEPTH_EPS)
    cache = VolumeCache(t, delta, trans, weights, color, alpha, depth)
    return rgb, alpha, depth, weights, cache


def volume_render_backward(cache: VolumeCache, g_rgb, g_alpha, g_depth):
    """Cotangents on (sigma, color) from cotangents on (rgb, alpha, depth)."""
    w = cache.weights
    g_color = w[:, :, None] * g_rgb[:, None, :]
    denom = np.maximum(cache.alpha, DEPTH_EPS)
    use_norm = cache.alpha > DEPTH_EPS
    g_w = np.einsum("rsc,rc->rs", cache.color, g_rgb) + g_alpha[:, None]
    depth_term = np.where(use_norm[:, None], cache.t - cache.depth[:, None], cache.t) / denom[:, None]
    g_w = g_w + g_depth[:, None] * depth_term
    wg = w * g_w
    suffix = np.cumsum(wg[:, ::-1], axis=1)[:, ::-1]
    later = np.concatenate([suffix[:, 1:], np.zeros((w.shape[0], 1))], axis=1)
    g_tau = cache.trans[:, 1:] * g_w - later
    g_sigma = g_tau * cache.delta
    return g_sigma, g_color


@dataclass
class RayRender:
    rgb: np.ndarray
    alpha: np.ndarray
    depth: np.ndarray
    chunks: list  # [(slice, [field caches], volume cache, merge order)]


def render_rays(rays: Rays, params: FieldParams, config: FieldConfig, settings: RenderSettings,
                rng=None, keep_cache: bool = False) -> RayRender:
    """Coarse pass to place fine samples; the composite uses coarse and fine together."""
    n = len(rays)
    dtype = params.hash_tables.dtype
    rgb = np.zeros((n, 3))
    alpha = np.zeros(n)
    depth = np.zeros(n)
    chunks = []
    for start in range(0, n, settings.chunk):
        sl = slice(start, min(start + settings.chunk, n))
        sub = rays.subset(sl)
        t = stratified_samples(sub.near, sub.far, settings.n_coarse, rng, settings.jitter)
        c, s, fcache = _eval(sub, t, params, config, keep_cache)
        caches = [fcache]
        order = None
        if settings.n_fine > 0:
            _, _, _, w, _ = volume_render(t, sub.far, s, c)
            fine = fine_draws(t, w, sub.far, settings.n_fine, rng, settings.jitter)
            # coarse samples keep their field values; only the new draws are evaluated
            c2, s2, fcache2 = _eval(sub, fine, params, config, keep_cache)
            caches.append(fcache2)
            merged = np.concatenate([t, fine], axis=1)
            order = np.argsort(merged, axis=1, kind="stable")
            t = np.take_along_axis(merged, order, axis=1)
            s = np.take_along_axis(np.concatenate([s, s2], axis=1), order, axis=1)
            c = np.take_along_axis(np.concatenate([c, c2], axis=1), order[..., None], axis=1)
        r, a, d, _, vcache = volume_render(t, sub.far, s, c)
        rgb[sl], alpha[sl], depth[sl] = r, a, d
        if keep_cache:
            chunks.append((sl, caches, vcache, order))
    return RayRender(rgb, alpha, depth, chunks)


def _eval(rays, t, params, config, keep_cache):
    pts = rays.origins[:, None] + t[..., None] * rays.directions[:, None]
    c, s, cache = field_forward(pts.reshape(-1, 3).astype(params.hash_tables.dtype), params, config, keep_cache)
    return c.reshape(t.shape + (3,)), s.reshape(t.shape), cache


def render_rays_backward(result: RayRender, params: FieldParams, config: FieldConfig,
                         g_rgb, g_alpha=None, g_depth=None, grads: FieldParams | None = None) -> FieldParams:
    """Accumulate field-parameter gradients in chunk (pixel-index) order."""
    if grads is None:
        grads = params.zeros_like()
    n = result.rgb.shape[0]
    g_rgb = np.asarray(g_rgb, dtype=np.float64).reshape(n, 3)
    g_alpha = np.zeros(n) if g_alpha is None else np.asarray(g_alpha, dtype=np.float64).reshape(n)
    g_depth = np.zeros(n) if g_depth is None else np.asarray(g_depth, dtype=np.float64).reshape(n)
    for sl, caches, vcache, order in result.chunks:
        g_sigma, g_color = volume_render_backward(vcache, g_rgb[sl], g_alpha[sl], g_depth[sl])
        if order is not None:
            # undo the merge permutation: column j of the sorted set came from order[:, j]
            rows = np.arange(order.shape[0])[:, None]
            gs = np.empty_like(g_sigma)
            gc = np.empty_like(g_color)
            gs[rows, order] = g_sigma
            gc[rows, order] = g_color
            g_sigma, g_color = gs, gc
        start = 0
        for cache in caches:
            m = cache.out.shape[0] // g_sigma.shape[0]
            cols = slice(start, start + m)
            field_backward(cache, params, config, g_color[:, cols].reshape(-1, 3), g_sigma[:, cols].reshape(-1), grads)
            start += m
    return grads


@dataclass
class BubbleRender:
    image: np.ndarray  # (H, W, 3)
    alpha: np.ndarray  # (H, W)
    depth: np.ndarray  # (H, W)
    region: np.ndarray  # (H, W) bool, rendered pixels
    rays: RayRender

    @property
    def count(self):
        return int(self.region.sum())


def bubble_region(frame, region_select: str) -> np.ndarray:
    if region_select == "mask":
        return frame.regions.mask
    if region_select == "bubble":
        return frame.regions.bubble
    if region_select == "full":
        return np.ones_like(frame.regions.mask)
    raise ValueError(f"unknown region {region_select!r}")


def render_bubble(frame_index: int, dataset, region_select: str, params: FieldParams, config: FieldConfig,
                  settings: RenderSettings, rng=None, mode: str = "erase", keep_cache: bool = False) -> BubbleRender:
    """Render only the rays through the selected region of one view.

    ``mode="erase"`` copies the input image outside the region (alpha 0);
    ``mode="replace"`` leaves zeros there.
    """
    frame = dataset.frames[frame_index]
    region = bubble_region(frame, region_select)
    h, w = region.shape
    if mode == "erase":
        image = frame.image.astype(np.float64).copy()
    elif mode == "replace":
        image = np.zeros((h, w, 3))
    else:
        raise ValueError(f"unknown mode {mode!r}")
    alpha = np.zeros((h, w))
    depth = np.zeros((h, w))
    pix = np.argwhere(region)
    rays = generate_rays(frame.camera, pix)
    out = render_rays(rays, params, config, settings, rng, keep_cache)
    image[region] = out.rgb
    alpha[region] = out.alpha
    depth[region] = out.depth
    return BubbleRender(image, alpha, depth, region, out)


def render_backward(bubble: BubbleRender, params: FieldParams, config: FieldConfig,
                    g_image=None, g_alpha=None, g_depth=None, grads: FieldParams | None = None) -> FieldParams:
    """Pull image-space cotangents back to field parameters; only region pixels contribute."""
    region = bubble.region
    n = int(region.sum())
    gr = np.zeros((n, 3)) if g_image is None else np.asarray(g_image)[region]
    ga = None if g_alpha is None else np.asarray(g_alpha)[region]
    gd = None if g_depth is None else np.asarray(g_depth)[region]
    return render_rays_backward(bubble.rays, params, config, gr, ga, gd, grads)
