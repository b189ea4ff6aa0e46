"""The MLLW1 flat binary format for named float64 arrays.

Layout: the magic bytes ``MLLW1`` followed by records until end of file.
Each record is ``u32 name_len | name (utf-8) | u32 rank | u32 dims[rank] |
f64 payload[prod(dims)]``, all little-endian, payload row-major.
"""

from __future__ import annotations

import io
import os
import struct
from typing import BinaryIO, Iterable, Mapping

import numpy as np

from .errors import ContractError

MAGIC = b"MLLW1"


def dump_records(records: Mapping[str, np.ndarray] | Iterable[tuple[str, np.ndarray]]) -> bytes:
    items = records.items() if isinstance(records, Mapping) else records
    buf = io.BytesIO()
    buf.write(MAGIC)
    for name, arr in items:
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes(order="C"))
    return buf.getvalue()


def _read_exact(f: BinaryIO, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise ContractError(f"truncated MLLW1 data while reading {what}")
    return data


def load_records(data: bytes) -> dict[str, np.ndarray]:
    f = io.BytesIO(data)
    if f.read(len(MAGIC)) != MAGIC:
        raise ContractError("not an MLLW1 file (bad magic)")
    out: dict[str, np.ndarray] = {}
    while True:
        head = f.read(4)
        if not head:
            return out
        if len(head) != 4:
            raise ContractError("truncated MLLW1 record header")
        (n,) = struct.unpack("<I", head)
        name = _read_exact(f, n, "name").decode("utf-8")
        (rank,) = struct.unpack("<I", _read_exact(f, 4, f"{name} rank"))
        dims = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank, f"{name} dims"))
        count = int(np.prod(dims)) if rank else 1
        payload = _read_exact(f, 8 * count, f"{name} payload")
        if name in out:
            raise ContractError(f"duplicate record {name!r}")
        out[name] = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims)


def write_file(path: str | os.PathLike, records) -> None:
    with open(path, "wb") as f:
        f.write(dump_records(records))


def read_file(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        return load_records(f.read())
