"""Versioned binary container: a JSON config plus named float64 tensors."""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"NDTK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_tensors(path, config: dict, tensors: dict[str, np.ndarray], kind: str = "") -> None:
    head = json.dumps({"kind": kind, "config": config}, sort_keys=True).encode("utf-8")
    out = bytearray(MAGIC)
    out += struct.pack("<HI", VERSION, len(head)) + head
    out += struct.pack("<I", len(tensors))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        nb = name.encode("utf-8")
        out += struct.pack("<H", len(nb)) + nb
        out += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
        out += arr.tobytes()
    Path(path).write_bytes(bytes(out))


def load_tensors(path, kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    try:
        version, hlen = struct.unpack_from("<HI", buf, 4)
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        pos = 10
        head = json.loads(buf[pos : pos + hlen].decode("utf-8"))
        pos += hlen
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
            pos += 8 * ndim
            nbytes = 8 * int(np.prod(shape))
            if pos + nbytes > len(buf):
                raise CheckpointError(f"{path}: truncated tensor {name}")
            tensors[name] = np.frombuffer(buf, dtype="<f8", count=int(np.prod(shape)), offset=pos).reshape(shape).copy()
            pos += nbytes
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt checkpoint ({e})") from e
    if kind is not None and head.get("kind") != kind:
        raise CheckpointError(f"{path}: expected a {kind!r} checkpoint, found {head.get('kind')!r}")
    return head["config"], tensors
