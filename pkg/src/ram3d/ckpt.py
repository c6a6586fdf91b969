"""Binary checkpoint container.

Layout (all little-endian)::

    b"RAM3DCKPT"  magic (9 bytes)
    u32           format version
    u32           header length in bytes
    header        UTF-8 JSON: free-form metadata plus "arrays": [{name, shape}]
    payload       each array as f32, in header order
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import IoError, VersionError

MAGIC = b"RAM3DCKPT"
VERSION = 1


def write(path: str, header: dict, arrays: list[tuple[str, np.ndarray]]):
    header = dict(header)
    header["arrays"] = [{"name": n, "shape": list(a.shape)} for n, a in arrays]
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    try:
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<II", VERSION, len(blob)))
            fh.write(blob)
            for _, arr in arrays:
                fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    except OSError as exc:
        raise IoError(f"cannot write checkpoint {path}: {exc}") from exc


def read(path: str) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read checkpoint {path}: {exc}") from exc
    if not data.startswith(MAGIC):
        raise VersionError(f"{path}: bad magic, not a ram3d checkpoint")
    off = len(MAGIC)
    if len(data) < off + 8:
        raise VersionError(f"{path}: truncated header")
    version, hlen = struct.unpack_from("<II", data, off)
    if version != VERSION:
        raise VersionError(f"{path}: unsupported checkpoint version {version}")
    off += 8
    try:
        header = json.loads(data[off:off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise VersionError(f"{path}: corrupt header") from exc
    off += hlen
    arrays = {}
    for spec in header["arrays"]:
        n = int(np.prod(spec["shape"], dtype=np.int64))
        if off + 4 * n > len(data):
            raise VersionError(f"{path}: truncated payload at {spec['name']}")
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(spec["shape"])
        arrays[spec["name"]] = arr.astype(np.float32)
        off += 4 * n
    return header, arrays
