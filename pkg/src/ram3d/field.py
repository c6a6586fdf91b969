"""Instant-NGP style radiance field: multiresolution hash encoding + small MLP.

The field maps a 3D position to (color, density); view direction is not an
input. Forward and backward are written out by hand so parameter gradients
are exact and the hash-table gradient only touches visited entries.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Dict

import numpy as np

from . import ckpt
from .errors import NumericalError, VersionError

PRIMES = (np.uint64(1), np.uint64(2654435761), np.uint64(805459861))



@dataclass
class FieldConfig:
    levels: int = 16
    features_per_level: int = 2
    table_size_log2: int = 19
    base_resolution: int = 16
    level_scale: float = 1.3819
    mlp_hidden: int = 64
    mlp_layers: int = 3
    bounds: tuple = ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))
    density_bias: float = 0.0

    def __post_init__(self):
        self.bounds = tuple(tuple(float(v) for v in b) for b in self.bounds)
        if self.levels < 1 or self.features_per_level < 1 or self.mlp_layers < 2:
            raise ValueError("invalid field config")
        if self.level_scale <= 1.0:
            raise ValueError("level_scale must exceed 1")

    @property
    def table_size(self) -> int:
        return 1 << self.table_size_log2

    @property
    def encoding_dim(self) -> int:
        return self.levels * self.features_per_level

    def resolutions(self):
        return [int(np.floor(self.base_resolution * self.level_scale ** l)) for l in range(self.levels)]

    def to_dict(self):
        d = asdict(self)
        d["bounds"] = [list(b) for b in self.bounds]
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class FieldParams:
    """Named parameter arrays in declaration order: hash_tables, w0, b0, w1, b1, ..."""

    def __init__(self, arrays: Dict[str, np.ndarray]):
        self.arrays = dict(arrays)

    @property
    def hash_tables(self):
        return self.arrays["hash_tables"]

    @property
    def n_layers(self):
        return (len(self.arrays) - 1) // 2

    def weight(self, i):
        return self.arrays[f"w{i}"]

    def bias(self, i):
        return self.arrays[f"b{i}"]

    def items(self):
        return self.arrays.items()

    def names(self):
        return list(self.arrays)

    def zeros_like(self):
        return FieldParams({k: np.zeros_like(v) for k, v in self.arrays.items()})

    def copy(self):
        return FieldParams({k: v.copy() for k, v in self.arrays.items()})

    def astype(self, dtype):
        return FieldParams({k: v.astype(dtype) for k, v in self.arrays.items()})

    def is_finite(self):
        return all(np.isfinite(v).all() for v in self.arrays.values())

    @staticmethod
    def group(name):
        return "hash" if name == "hash_tables" else "mlp"

    def __iadd__(self, other):
        for k, v in other.arrays.items():
            self.arrays[k] += v
        return self


def init_params(config: FieldConfig, seed: int, dtype=np.float32) -> FieldParams:
    rng = np.random.default_rng(seed)
    tables = rng.uniform(-1e-4, 1e-4, size=(config.levels, config.table_size, config.features_per_level))
    arrays = {"hash_tables": tables}
    dims = [config.encoding_dim] + [config.mlp_hidden] * (config.mlp_layers - 1) + [4]
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        bound = 1.0 / np.sqrt(fan_in)
        arrays[f"w{i}"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        arrays[f"b{i}"] = np.zeros(fan_out)
    return FieldParams({k: v.astype(dtype) for k, v in arrays.items()})


def normalize_points(points: np.ndarray, config: FieldConfig) -> np.ndarray:
    lo = np.asarray(config.bounds[0])
    hi = np.asarray(config.bounds[1])
    return np.clip((np.asarray(points, dtype=np.float64) - lo) / (hi - lo), 0.0, 1.0)


def spatial_hash(coords: np.ndarray, table_size: int) -> np.ndarray:
    """XOR-of-primes hash of integer grid coordinates (..., 3) into [0, table_size)."""
    c = coords.astype(np.uint64)
    h = (c[..., 0] * PRIMES[0]) ^ (c[..., 1] * PRIMES[1]) ^ (c[..., 2] * PRIMES[2])
    return (h & np.uint64(table_size - 1)).astype(np.int64)


def encode_lookup(points: np.ndarray, config: FieldConfig):
    """Table indices and trilinear weights of the 8 corners at every level.

    Returns ``(idx, w)`` with shapes (levels, 8, P). Corner c takes the upper
    grid line on axis k when bit k of c is set.
    """
    u = normalize_points(points, config)
    n = u.shape[0]
    mask = np.uint32(config.table_size - 1)
    primes = [np.uint32(p) for p in PRIMES]
    idx = np.empty((config.levels, 8, n), dtype=np.intp)
    w = np.empty((config.levels, 8, n), dtype=np.float64)
    for l, res in enumerate(config.resolutions()):
        pos = u * res
        base = np.minimum(np.floor(pos), res - 1)
        frac = pos - base
        b = base.astype(np.uint32)
        # the table size is a power of two <= 2^32, so 32-bit wraparound keeps the low bits exact
        hashed = [(b[:, k] * primes[k], (b[:, k] + np.uint32(1)) * primes[k]) for k in range(3)]
        wts = [(1.0 - frac[:, k], frac[:, k]) for k in range(3)]
        for c in range(8):
            bx, by, bz = c & 1, (c >> 1) & 1, (c >> 2) & 1
            idx[l, c] = (hashed[0][bx] ^ hashed[1][by] ^ hashed[2][bz]) & mask
            w[l, c] = wts[0][bx] * wts[1][by] * wts[2][bz]
    return idx, w


def encode_position(points: np.ndarray, params: FieldParams, config: FieldConfig, lookup=None) -> np.ndarray:
    """Hash-grid features (P, levels * features_per_level)."""
    idx, w = lookup if lookup is not None else encode_lookup(points, config)
    tables = params.hash_tables
    nf = config.features_per_level
    out = np.empty((idx.shape[2], config.levels * nf), dtype=tables.dtype)
    for l in range(config.levels):
        wl = w[l].astype(tables.dtype, copy=False)
        for f in range(nf):
            # gathering from a contiguous column is much faster than fancy-indexing rows
            col = np.ascontiguousarray(tables[l, :, f])
            out[:, l * nf + f] = np.einsum("cp,cp->p", wl, col[idx[l]])
    return out


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softplus(x):
    return np.logaddexp(0.0, x)


class FieldCache:
    __slots__ = ("lookup", "acts", "pre", "out")

    def __init__(self, lookup, acts, pre, out):
        self.lookup = lookup
        self.acts = acts
        self.pre = pre
        self.out = out


def field_forward(points: np.ndarray, params: FieldParams, config: FieldConfig, keep_cache: bool = False):
    """Evaluate the field at points (P, 3).

    Returns ``(color (P, 3), density (P,), cache)``; cache is None unless
    ``keep_cache`` is set.
    """
    points = np.asarray(points).reshape(-1, 3)
    lookup = encode_lookup(points, config)
    h = encode_position(points, params, config, lookup)
    acts, pre = [h], []
    n = params.n_layers
    for i in range(n):
        z = h @ params.weight(i) + params.bias(i)
        if i < n - 1:
            pre.append(z)
            h = np.maximum(z, 0.0)
            acts.append(h)
        else:
            out = z
    with np.errstate(invalid="ignore", over="ignore"):
        color = _sigmoid(out[:, :3])
        density = _softplus(out[:, 3] + config.density_bias)
    if not (np.isfinite(color).all() and np.isfinite(density).all()):
        raise NumericalError("non-finite field output" + ("" if params.is_finite() else " (non-finite parameters)"))
    cache = FieldCache(lookup, acts, pre, out) if keep_cache else None
    return color, density, cache


def field_backward(cache: FieldCache, params: FieldParams, config: FieldConfig,
                   g_color: np.ndarray, g_density: np.ndarray, grads: FieldParams | None = None) -> FieldParams:
    """Accumulate dL/dparams into ``grads`` given cotangents on color and density."""
    if grads is None:
        grads = params.zeros_like()
    dtype = params.hash_tables.dtype
    out = cache.out
    s = _sigmoid(out[:, :3])
    d_out = np.empty_like(out)
    d_out[:, :3] = g_color * s * (1.0 - s)
    d_out[:, 3] = g_density * _sigmoid(out[:, 3] + config.density_bias)
    d = d_out
    for i in reversed(range(params.n_layers)):
        a = cache.acts[i]
        grads.arrays[f"w{i}"] += (a.T @ d).astype(dtype, copy=False)
        grads.arrays[f"b{i}"] += d.sum(axis=0).astype(dtype, copy=False)
        d = d @ params.weight(i).T
        if i > 0:
            d = d * (cache.pre[i - 1] > 0)
    _hash_backward(cache.lookup, d, config, grads.arrays["hash_tables"])
    return grads


def _hash_backward(lookup, d_feats, config: FieldConfig, g_tables: np.ndarray):
    idx, w = lookup
    nf = config.features_per_level
    t = config.table_size
    flat = (idx + (np.arange(config.levels, dtype=np.intp) * t)[:, None, None]).reshape(-1)
    d = d_feats.reshape(-1, config.levels, nf).transpose(1, 2, 0)  # (L, F, P)
    for f in range(nf):
        contrib = (w * d[:, f][:, None, :]).reshape(-1)
        g = np.bincount(flat, weights=contrib, minlength=config.levels * t)
        g_tables[:, :, f] += g.reshape(config.levels, t).astype(g_tables.dtype, copy=False)


def save_params(path: str, params: FieldParams, config: FieldConfig, extra: dict | None = None):
    header = {"kind": "field", "field_config": config.to_dict()}
    if extra:
        header.update(extra)
    ckpt.write(path, header, list(params.items()))


def load_params(path: str):
    """Returns ``(params, config, header)``."""
    header, arrays = ckpt.read(path)
    if "field_config" not in header:
        raise VersionError(f"{path}: no field config in checkpoint")
    config = FieldConfig.from_dict(header["field_config"])
    names = ["hash_tables"] + [f"{p}{i}" for i in range(config.mlp_layers) for p in ("w", "b")]
    missing = [n for n in names if n not in arrays]
    if missing:
        raise VersionError(f"{path}: missing arrays {missing}")
    return FieldParams({n: arrays[n] for n in names}), config, header
