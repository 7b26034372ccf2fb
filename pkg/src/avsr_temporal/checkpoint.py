"""Named-matrix checkpoint files.

Layout: 16-byte header (magic ``AVCK``, version, entry count, index length),
a UTF-8 index with one ``name<TAB>shape`` line per entry, then the arrays as
little-endian float64 in index order.
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .autodiff import Value

MAGIC = b"AVCK"
VERSION = 1
_HEADER = struct.Struct("<4sIII")


class CheckpointError(ValueError):
    pass


def save(path: Path, arrays: Mapping[str, Value | np.ndarray]) -> None:
    index, blobs = [], []
    for name, arr in arrays.items():
        data = arr.data if isinstance(arr, Value) else np.asarray(arr)
        if "\t" in name or "\n" in name:
            raise CheckpointError(f"invalid parameter name {name!r}")
        index.append(f"{name}\t{'x'.join(str(n) for n in data.shape)}\n")
        blobs.append(np.ascontiguousarray(data, dtype="<f8").tobytes())
    idx = "".join(index).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, len(index), len(idx)))
        fh.write(idx)
        for b in blobs:
            fh.write(b)


def load(path: Path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise CheckpointError(f"{path}: too short to be a checkpoint")
    magic, version, count, idx_len = _HEADER.unpack_from(raw)
    if magic != MAGIC or version != VERSION:
        raise CheckpointError(f"{path}: bad magic/version {magic!r}/{version}")
    lines = raw[_HEADER.size:_HEADER.size + idx_len].decode("utf-8").splitlines()
    if len(lines) != count:
        raise CheckpointError(f"{path}: index lists {len(lines)} entries, header says {count}")
    offset = _HEADER.size + idx_len
    out: dict[str, np.ndarray] = {}
    for line in lines:
        name, shape_txt = line.split("\t")
        shape = tuple(int(n) for n in shape_txt.split("x"))
        n = int(np.prod(shape))
        if offset + 8 * n > len(raw):
            raise CheckpointError(f"{path}: truncated data for {name}")
        out[name] = np.frombuffer(raw, dtype="<f8", count=n, offset=offset).reshape(shape).copy()
        offset += 8 * n
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return out


def assign(params: Mapping[str, Value], arrays: Mapping[str, np.ndarray],
           ignore_prefixes: tuple[str, ...] = ()) -> None:
    """Copy checkpoint arrays into live parameters. Names and shapes must
    match exactly, apart from checkpoint entries under ``ignore_prefixes``."""
    missing = [n for n in params if n not in arrays]
    extra = [n for n in arrays if n not in params and not n.startswith(ignore_prefixes)]
    if missing or extra:
        raise CheckpointError("checkpoint does not match this architecture: "
                              f"missing {missing[:4]}, unexpected {extra[:4]}")
    for name, p in params.items():
        if arrays[name].shape != p.data.shape:
            raise CheckpointError(f"{name}: shape {arrays[name].shape} != {p.data.shape}")
        p.data = arrays[name].astype(np.float64, copy=True)
