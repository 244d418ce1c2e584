"""Versioned binary checkpoint container.

Layout (all integers little-endian):

    magic   8 bytes  b"DFCKPT01"
    version u32      (currently 1)
    endian  u8       (1 = little endian, the only supported value)
    stage   u16 len + utf8
    iteration u64
    config  u32 len + utf8 (resolved TOML text; hash is recomputed on load)
    meta    u32 len + utf8 json
    rng     u32 len + utf8 json ({stream name: PCG64 state dict})
    arrays  u32 count, then per array:
            u16 name len + utf8, u8 dtype code, u8 ndim, ndim * u64 dims,
            raw little-endian data

Reloading a checkpoint restores parameters, optimizer state and RNG streams
bit-exactly, which is what makes interrupted runs reproduce uninterrupted
ones.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .config import RunConfig, config_from_mapping, config_hash, dump_config
from .errors import CheckpointError

MAGIC = b"DFCKPT01"
VERSION = 1

_DTYPES = {0: "<f4", 1: "<f8", 2: "<i8", 3: "u1"}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1,
          np.dtype("int64"): 2, np.dtype("uint8"): 3}


@dataclass
class Checkpoint:
    config: RunConfig
    stage: str
    iteration: int
    arrays: dict            # name -> np.ndarray
    rng_states: dict        # stream name -> PCG64 state dict
    meta: dict = field(default_factory=dict)

    def save(self, path) -> None:
        out = bytearray()
        out += MAGIC
        out += struct.pack("<IB", VERSION, 1)
        stage_b = self.stage.encode("utf8")
        out += struct.pack("<H", len(stage_b)) + stage_b
        out += struct.pack("<Q", self.iteration)
        cfg_b = dump_config(self.config).encode("utf8")
        out += struct.pack("<I", len(cfg_b)) + cfg_b
        meta_b = json.dumps(self.meta, sort_keys=True).encode("utf8")
        out += struct.pack("<I", len(meta_b)) + meta_b
        rng_b = json.dumps(self.rng_states, sort_keys=True).encode("utf8")
        out += struct.pack("<I", len(rng_b)) + rng_b
        out += struct.pack("<I", len(self.arrays))
        for name in sorted(self.arrays):
            arr = np.ascontiguousarray(self.arrays[name])
            if arr.dtype not in _CODES:
                raise CheckpointError(
                    f"array {name!r} has unsupported dtype {arr.dtype}")
            name_b = name.encode("utf8")
            out += struct.pack("<H", len(name_b)) + name_b
            out += struct.pack("<BB", _CODES[arr.dtype], arr.ndim)
            out += struct.pack(f"<{arr.ndim}Q", *arr.shape)
            out += arr.astype(arr.dtype.newbyteorder("<")).tobytes()
        with open(path, "wb") as fh:
            fh.write(bytes(out))

    @classmethod
    def load(cls, path) -> "Checkpoint":
        with open(path, "rb") as fh:
            data = fh.read()
        if data[:8] != MAGIC:
            raise CheckpointError(f"{path}: bad magic (not a checkpoint)")
        version, endian = struct.unpack_from("<IB", data, 8)
        if version != VERSION:
            raise CheckpointError(
                f"{path}: checkpoint version {version}, expected {VERSION}")
        if endian != 1:
            raise CheckpointError(f"{path}: unsupported endianness marker")
        off = 13

        def take(fmt):
            nonlocal off
            vals = struct.unpack_from(fmt, data, off)
            off += struct.calcsize(fmt)
            return vals

        (n,) = take("<H")
        stage = data[off:off + n].decode("utf8")
        off += n
        (iteration,) = take("<Q")
        (n,) = take("<I")
        cfg_text = data[off:off + n].decode("utf8")
        off += n
        (n,) = take("<I")
        meta = json.loads(data[off:off + n])
        off += n
        (n,) = take("<I")
        rng_states = json.loads(data[off:off + n])
        off += n
        (count,) = take("<I")
        arrays = {}
        for _ in range(count):
            (n,) = take("<H")
            name = data[off:off + n].decode("utf8")
            off += n
            code, ndim = take("<BB")
            dims = take(f"<{ndim}Q")
            dt = np.dtype(_DTYPES[code])
            size = int(np.prod(dims)) * dt.itemsize if ndim else dt.itemsize
            arrays[name] = np.frombuffer(
                data[off:off + size], dtype=dt).reshape(dims).copy()
            off += size
        config = _config_from_toml_text(cfg_text)
        return cls(config=config, stage=stage, iteration=iteration,
                   arrays=arrays, rng_states=rng_states, meta=meta)

    def config_digest(self) -> str:
        return config_hash(self.config)


def _config_from_toml_text(text: str) -> RunConfig:
    import sys
    if sys.version_info >= (3, 11):
        import tomllib
    else:
        import tomli as tomllib
    mapping = tomllib.loads(text)
    # the dump is fully resolved: bypass profile re-application
    flat = {}
    for table in mapping.values():
        flat.update(table)
    flat = {k: tuple(v) if isinstance(v, list) else v for k, v in flat.items()}
    return RunConfig(**flat)
