import math

import numpy as np
import pytest

from ram3d.errors import NumericalError, VersionError
from ram3d.field import (FieldConfig, encode_position, field_backward, field_forward, init_params, load_params,
                         save_params)

from conftest import perturbed_params

PRIMES_INT = (1, 2654435761, 805459861)


def oracle_encode(p, params, config):
    """Straight-line per-point hash + trilinear interpolation with Python integers."""
    lo = np.array(config.bounds[0])
    hi = np.array(config.bounds[1])
    u = np.clip((np.asarray(p, float) - lo) / (hi - lo), 0, 1)
    feats = []
    for l in range(config.levels):
        res = math.floor(config.base_resolution * config.level_scale ** l)
        pos = [u[k] * res for k in range(3)]
        base = [min(math.floor(pos[k]), res - 1) for k in range(3)]
        frac = [pos[k] - base[k] for k in range(3)]
        acc = np.zeros(config.features_per_level)
        for dx in (0, 1):
            for dy in (0, 1):
                for dz in (0, 1):
                    c = (base[0] + dx, base[1] + dy, base[2] + dz)
                    h = 0
                    for k in range(3):
                        h ^= c[k] * PRIMES_INT[k]
                    h &= config.table_size - 1
                    wt = 1.0
                    for k, d in enumerate((dx, dy, dz)):
                        wt *= frac[k] if d else 1.0 - frac[k]
                    acc += wt * params.hash_tables[l, h]
        feats.append(acc)
    return np.concatenate(feats)


def oracle_field(p, params, config):
    h = oracle_encode(p, params, config)
    n = params.n_layers
    for i in range(n):
        h = h @ params.weight(i) + params.bias(i)
        if i < n - 1:
            h = np.maximum(h, 0)
    color = 1 / (1 + np.exp(-h[:3]))
    density = math.log1p(math.exp(h[3] + config.density_bias))
    return color, density


def test_init_deterministic_and_sized():
    cfg = FieldConfig()
    a = init_params(FieldConfig(table_size_log2=10), 3)
    b = init_params(FieldConfig(table_size_log2=10), 3)
    c = init_params(FieldConfig(table_size_log2=10), 4)
    assert all(np.array_equal(a.arrays[k], b.arrays[k]) for k in a.names())
    assert not np.array_equal(a.hash_tables, c.hash_tables)
    assert np.abs(a.hash_tables).max() <= 1e-4
    assert cfg.levels * cfg.table_size * cfg.features_per_level == 16 * 2**19 * 2


def test_encode_matches_oracle(small_field_config):
    cfg = small_field_config
    params = perturbed_params(cfg, 0)
    pts = np.random.default_rng(1).uniform(-1.2, 1.2, (40, 3))
    enc = encode_position(pts, params, cfg)
    for p, e in zip(pts, enc):
        assert np.allclose(e, oracle_encode(p, params, cfg), atol=1e-12)


def test_encode_corner_and_centre(small_field_config):
    cfg = small_field_config
    params = perturbed_params(cfg, 2)
    res = cfg.resolutions()[0]
    # grid corner (1, 2, 1) of level 0, and the centre of the cell starting there
    corner = np.array([1, 2, 1]) / res * 2 - 1
    h = (1 * 1 ^ 2 * 2654435761 ^ 1 * 805459861) & (cfg.table_size - 1)
    f = encode_position(corner[None], params, cfg)[0, :2]
    assert np.allclose(f, params.hash_tables[0, h])
    centre = (np.array([1, 2, 1]) + 0.5) / res * 2 - 1
    f = encode_position(centre[None], params, cfg)[0, :2]
    corners = [(1 + dx, 2 + dy, 1 + dz) for dx in (0, 1) for dy in (0, 1) for dz in (0, 1)]
    idx = [(c[0] ^ c[1] * 2654435761 ^ c[2] * 805459861) & (cfg.table_size - 1) for c in corners]
    assert np.allclose(f, params.hash_tables[0, idx].mean(axis=0))


def test_forward_matches_oracle(small_field_config):
    cfg = small_field_config
    params = perturbed_params(cfg, 3)
    pts = np.random.default_rng(4).uniform(-1, 1, (25, 3))
    color, density, _ = field_forward(pts, params, cfg)
    for p, c, d in zip(pts, color, density):
        oc, od = oracle_field(p, params, cfg)
        assert np.allclose(c, oc, atol=1e-12) and np.isclose(d, od, atol=1e-12)


def test_zero_params_activation(small_field_config):
    params = init_params(small_field_config, 0, np.float64).zeros_like()
    color, density, _ = field_forward(np.zeros((3, 3)), params, small_field_config)
    assert np.allclose(color, 0.5) and np.allclose(density, np.log(2.0))


def test_density_nonnegative(small_field_config):
    rng = np.random.default_rng(0)
    for trial in range(20):
        params = perturbed_params(small_field_config, trial, scale=5.0)
        _, density, _ = field_forward(rng.uniform(-1, 1, (50, 3)), params, small_field_config)
        assert (density >= 0).all()


def test_non_finite_params_raise(small_field_config):
    params = perturbed_params(small_field_config, 0)
    params.arrays["b2"][3] = np.nan
    with pytest.raises(NumericalError):
        field_forward(np.zeros((2, 3)), params, small_field_config)


def _loss(params, cfg, pts, gc, gd):
    c, d, _ = field_forward(pts, params, cfg)
    return np.sum(c * gc) + np.sum(d * gd)


def test_backward_finite_differences(small_field_config):
    cfg = small_field_config
    rng = np.random.default_rng(7)
    params = perturbed_params(cfg, 7)
    pts = rng.uniform(-1, 1, (6, 3))
    gc, gd = rng.normal(size=(6, 3)), rng.normal(size=6)
    _, _, cache = field_forward(pts, params, cfg, keep_cache=True)
    grads = field_backward(cache, params, cfg, gc, gd)
    h = 1e-6
    for name in params.names():
        g = grads.arrays[name]
        picks = np.argsort(-np.abs(g.ravel()))[:4]
        for i in picks:
            p1, p2 = params.copy(), params.copy()
            p1.arrays[name].flat[i] += h
            p2.arrays[name].flat[i] -= h
            fd = (_loss(p1, cfg, pts, gc, gd) - _loss(p2, cfg, pts, gc, gd)) / (2 * h)
            assert abs(fd - g.flat[i]) <= 1e-3 * max(abs(fd), 1e-3), (name, i)


def test_backward_zero_cotangent_and_sparsity(small_field_config):
    cfg = small_field_config
    params = perturbed_params(cfg, 1)
    pts = np.array([[0.1, -0.2, 0.3]])
    _, _, cache = field_forward(pts, params, cfg, keep_cache=True)
    zero = field_backward(cache, params, cfg, np.zeros((1, 3)), np.zeros(1))
    assert all(not v.any() for _, v in zero.items())
    g = field_backward(cache, params, cfg, np.ones((1, 3)), np.ones(1))
    touched = np.abs(g.hash_tables).sum(axis=-1) > 0
    assert touched.sum() <= 8 * cfg.levels
    idx, _ = cache.lookup
    visited = np.zeros_like(touched)
    for l in range(cfg.levels):
        visited[l, idx[l, :, 0]] = True
    assert not (touched & ~visited).any()


def test_save_load_round_trip(tmp_path, small_field_config):
    params = init_params(small_field_config, 5)
    save_params(str(tmp_path / "f.ckpt"), params, small_field_config)
    loaded, cfg, _ = load_params(str(tmp_path / "f.ckpt"))
    assert cfg == small_field_config
    assert all(np.array_equal(loaded.arrays[k], params.arrays[k]) for k in params.names())
    raw = bytearray((tmp_path / "f.ckpt").read_bytes())
    raw[0] ^= 0xFF
    (tmp_path / "bad.ckpt").write_bytes(bytes(raw))
    with pytest.raises(VersionError):
        load_params(str(tmp_path / "bad.ckpt"))
    (tmp_path / "short.ckpt").write_bytes(bytes((tmp_path / "f.ckpt").read_bytes()[:-5]))
    with pytest.raises(VersionError):
        load_params(str(tmp_path / "short.ckpt"))
