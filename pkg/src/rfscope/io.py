"""RFSW tensor container.

Layout (little-endian)::

    b"RFSW" | u32 version=1 | u32 count |
    count x ( u16 name_len | name (UTF-8) | u8 rank | rank x u32 dims | f64 payload )

Weight files hold one tensor per ``<node>.<param>``; input files hold a
single tensor named ``input``.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"RFSW"
VERSION = 1


class ContainerError(ValueError):
    pass


def dumps(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f8", order="C")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def loads(data: bytes) -> dict[str, np.ndarray]:
    if data[:4] != MAGIC:
        raise ContainerError("not an RFSW file (bad magic)")
    try:
        version, count = struct.unpack_from("<II", data, 4)
        if version != VERSION:
            raise ContainerError(f"unsupported RFSW version {version}")
        pos = 12
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos: pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<B", data, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            size = int(np.prod(dims, dtype=np.int64))
            if pos + 8 * size > len(data):
                raise ContainerError(f"tensor {name!r} is truncated")
            out[name] = np.frombuffer(data, dtype="<f8", count=size, offset=pos).astype(np.float64).reshape(dims)
            pos += 8 * size
    except struct.error as exc:
        raise ContainerError(f"truncated RFSW file: {exc}") from exc
    if pos != len(data):
        raise ContainerError("trailing bytes after last tensor")
    return out


def save_tensors(tensors: dict[str, np.ndarray], path) -> None:
    Path(path).write_bytes(dumps(tensors))


def load_tensors(path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())


def load_input(path, input_shape=None) -> np.ndarray:
    """Read an input tensor from an RFSW file (tensor ``input``) or a CSV grid
    (F rows by T columns, single channel)."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == MAGIC:
        tensors = load_tensors(path)
        if "input" not in tensors:
            raise ContainerError(f"{path}: no tensor named 'input'")
        x = tensors["input"]
    else:
        x = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)[None]
    if input_shape is not None and tuple(x.shape) != tuple(input_shape):
        raise ContainerError(f"{path}: input shape {x.shape} does not match {tuple(input_shape)}")
    return x
