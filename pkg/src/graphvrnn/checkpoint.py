"""Binary checkpoint container.

Layout (all integers little-endian)::

    magic        8 bytes   b"GVRNNCKP"
    version      uint32    FORMAT_VERSION
    body_crc32   uint32    CRC-32 of everything after this field
    n_config     uint32
    n_config x:  uint16 name length, UTF-8 name, float64 value
    n_arrays     uint32
    n_arrays x:  uint16 name length, UTF-8 name, uint32 ndim,
                 ndim x uint64 dims, prod(dims) x float64 data (C order)

Config values are stored as float64 and cast back to ``int`` for integer
fields of :class:`ModelConfig`. Besides model weights a checkpoint may
carry auxiliary arrays under ``aux/`` names (scaler bounds, the graph
weights, a calibrated threshold).
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import asdict, fields
from pathlib import Path
from typing import Mapping

import numpy as np

from .model import ModelConfig, check_params

MAGIC = b"GVRNNCKP"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _pack_name(name: str) -> bytes:
    raw = name.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def save_checkpoint(
    params: Mapping[str, np.ndarray],
    config: ModelConfig,
    path,
    aux: Mapping[str, np.ndarray] | None = None,
) -> None:
    check_params(config, params)
    body = bytearray()
    cfg = asdict(config)
    body += struct.pack("<I", len(cfg))
    for name, value in cfg.items():
        body += _pack_name(name) + struct.pack("<d", float(value))
    arrays = dict(params)
    for name, value in (aux or {}).items():
        arrays[f"aux/{name}"] = np.asarray(value, dtype=np.float64)
    body += struct.pack("<I", len(arrays))
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        body += _pack_name(name) + struct.pack("<I", arr.ndim)
        body += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        body += arr.tobytes(order="C")
    header = MAGIC + struct.pack("<II", FORMAT_VERSION, zlib.crc32(bytes(body)))
    Path(path).write_bytes(header + bytes(body))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("checkpoint is truncated")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def name(self) -> str:
        (n,) = self.unpack("<H")
        return self.take(n).decode("utf-8")


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], ModelConfig, dict[str, np.ndarray]]:
    """Return ``(params, config, aux)``."""
    buf = Path(path).read_bytes()
    if len(buf) < 16:
        raise CheckpointError("checkpoint is truncated")
    if buf[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, crc = struct.unpack("<II", buf[8:16])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    body = buf[16:]
    rd = _Reader(body)
    (n_cfg,) = rd.unpack("<I")
    raw_cfg = {}
    for _ in range(n_cfg):
        name = rd.name()
        (raw_cfg[name],) = rd.unpack("<d")
    (n_arr,) = rd.unpack("<I")
    arrays = {}
    for _ in range(n_arr):
        name = rd.name()
        (ndim,) = rd.unpack("<I")
        shape = rd.unpack(f"<{ndim}Q") if ndim else ()
        count = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(rd.take(8 * count), dtype="<f8").astype(np.float64)
        arrays[name] = data.reshape(shape)
    if rd.pos != len(body):
        raise CheckpointError("trailing bytes after checkpoint body")
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint checksum mismatch")
    kinds = {f.name: f.type for f in fields(ModelConfig)}
    cfg_kwargs = {k: (v if kinds.get(k) in (float, "float") else int(v)) for k, v in raw_cfg.items()}
    config = ModelConfig(**cfg_kwargs)
    params = {k: v for k, v in arrays.items() if not k.startswith("aux/")}
    aux = {k[4:]: v for k, v in arrays.items() if k.startswith("aux/")}
    check_params(config, params)
    return params, config, aux
