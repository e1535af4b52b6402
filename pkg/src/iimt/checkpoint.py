"""Versioned binary checkpoint format shared by every trainable component.

Layout: 8-byte magic, u32 format version, u32-length JSON header (config
plus free-form metadata), u32 parameter count, then per parameter a
u32-length name, u8 rank, u32 dims, and raw float64 bytes in C order.
Parameters are written sorted by name so identical states produce
identical files.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from .errors import ConfigError

MAGIC = b"IIMTCKPT"
FORMAT_VERSION = 1
_DTYPE_CODE = 0  # float64, the only dtype in use


@dataclass
class Checkpoint:
    config: dict
    arrays: Dict[str, np.ndarray]
    meta: dict


def save_checkpoint(path, config: dict, arrays: Dict[str, np.ndarray],
                    meta: Optional[dict] = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = json.dumps({"config": config, "meta": meta or {}},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(struct.pack("<I", len(arrays)))
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name], dtype=np.float64)
            name_b = name.encode("utf-8")
            fh.write(struct.pack("<I", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<BB", arr.ndim, _DTYPE_CODE))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != MAGIC:
            raise ConfigError(f"{path} is not a checkpoint (bad magic {magic!r})")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != FORMAT_VERSION:
            raise ConfigError(f"unsupported checkpoint version {version}")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        (count,) = struct.unpack("<I", fh.read(4))
        arrays: Dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", fh.read(4))
            name = fh.read(nlen).decode("utf-8")
            ndim, dtype_code = struct.unpack("<BB", fh.read(2))
            if dtype_code != _DTYPE_CODE:
                raise ConfigError(f"unsupported dtype code {dtype_code} in {path}")
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            n_bytes = 8 * int(np.prod(shape)) if ndim else 8
            arrays[name] = np.frombuffer(fh.read(n_bytes), dtype=np.float64).reshape(shape).copy()
    return Checkpoint(config=header["config"], arrays=arrays, meta=header.get("meta", {}))
