"""Versioned binary container for weight matrices.

Layout: magic ``FGK1``, version u16, table count u16, N u32, M u32,
round u32, 32-byte config hash, then each table as row-major
little-endian float32.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"FGK1"
VERSION = 1
_HEADER = struct.Struct("<4sHHIII32s")


@dataclass
class CheckpointData:
    round_no: int
    config_hash: bytes
    tables: list[np.ndarray]

    @property
    def n_rows(self) -> int:
        return self.tables[0].shape[0]

    @property
    def dimension(self) -> int:
        return self.tables[0].shape[1]


def write_checkpoint(path: str | Path, data: CheckpointData) -> None:
    if not data.tables:
        raise DataError("checkpoint needs at least one table")
    shape = data.tables[0].shape
    if any(t.shape != shape for t in data.tables):
        raise DataError("all checkpoint tables must share one shape")
    if len(data.config_hash) != 32:
        raise DataError("config hash must be 32 bytes")
    header = _HEADER.pack(
        MAGIC, VERSION, len(data.tables), shape[0], shape[1], data.round_no, data.config_hash
    )
    with open(path, "wb") as fh:
        fh.write(header)
        for table in data.tables:
            fh.write(np.ascontiguousarray(table, dtype="<f4").tobytes())


def read_checkpoint(path: str | Path) -> CheckpointData:
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise DataError(f"checkpoint too short: {path}")
    magic, version, n_tables, n, m, round_no, config_hash = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise DataError(f"bad checkpoint magic in {path}")
    if version != VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    expected = _HEADER.size + n_tables * n * m * 4
    if len(blob) != expected:
        raise DataError(f"checkpoint truncated: {len(blob)} bytes, expected {expected}")
    tables = []
    offset = _HEADER.size
    for _ in range(n_tables):
        flat = np.frombuffer(blob, dtype="<f4", count=n * m, offset=offset)
        tables.append(flat.reshape(n, m).astype(np.float64))
        offset += n * m * 4
    return CheckpointData(round_no=round_no, config_hash=config_hash, tables=tables)
