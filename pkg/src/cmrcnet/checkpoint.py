"""Binary checkpoint format.

Layout (little-endian)::

    b"CMRC" | u32 version | u32 len | config JSON (UTF-8) | u32 n_params
    n_params x ( u16 len | name UTF-8 | u8 rank | u32 dims[rank] | f32 data )
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataError
from .model import CmrcModel, ModelConfig

MAGIC = b"CMRC"
VERSION = 1


def checkpoint_bytes(model: CmrcModel) -> bytes:
    cfg_json = json.dumps(model.cfg.to_dict(), sort_keys=True).encode()
    params = list(model.named_parameters())
    parts = [MAGIC, struct.pack("<II", VERSION, len(cfg_json)), cfg_json, struct.pack("<I", len(params))]
    for name, p in params:
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", p.ndim) + struct.pack(f"<{p.ndim}I", *p.shape))
        parts.append(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    return b"".join(parts)


def checksum(blob: bytes) -> bytes:
    return hashlib.sha256(blob).digest()


def save_checkpoint(model: CmrcModel, path) -> bytes:
    """Write ``model`` to ``path``; returns the 32-byte SHA-256 of the file."""
    blob = checkpoint_bytes(model)
    Path(path).write_bytes(blob)
    return checksum(blob)


def parse_checkpoint(blob: bytes, source: str = "<bytes>") -> tuple[ModelConfig, dict[str, np.ndarray]]:
    def fail(offset, msg):
        raise DataError(f"{source}: offset {offset}: {msg}")

    def take(offset, n):
        if offset + n > len(blob):
            fail(offset, f"truncated (need {n} bytes, file has {len(blob) - offset} left)")
        return blob[offset : offset + n], offset + n

    head, off = take(0, 4)
    if head != MAGIC:
        fail(0, f"bad magic {head!r}")
    raw, off = take(off, 8)
    version, cfg_len = struct.unpack("<II", raw)
    if version != VERSION:
        fail(4, f"unsupported checkpoint version {version}")
    raw, off = take(off, cfg_len)
    try:
        cfg = ModelConfig.from_dict(json.loads(raw.decode()))
    except (ValueError, TypeError) as err:
        fail(12, f"bad config: {err}")
    raw, off = take(off, 4)
    (count,) = struct.unpack("<I", raw)
    state: dict[str, np.ndarray] = {}
    for _ in range(count):
        raw, off = take(off, 2)
        (n,) = struct.unpack("<H", raw)
        name_raw, off = take(off, n)
        raw, off = take(off, 1)
        (rank,) = struct.unpack("<B", raw)
        raw, off = take(off, 4 * rank)
        dims = struct.unpack(f"<{rank}I", raw)
        size = int(np.prod(dims)) if rank else 1
        raw, off = take(off, 4 * size)
        state[name_raw.decode()] = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float32)
    if off != len(blob):
        fail(off, f"{len(blob) - off} trailing bytes")
    return cfg, state


def load_checkpoint(path, dtype=np.float32) -> tuple[CmrcModel, bytes]:
    """Rebuild the model stored at ``path``.  Returns ``(model, sha256)``."""
    blob = Path(path).read_bytes()
    cfg, state = parse_checkpoint(blob, str(path))
    model = CmrcModel(cfg, seed=0, dtype=dtype)
    try:
        model.load_state(state)
    except ValueError as err:
        raise DataError(f"{path}: {err}") from err
    return model, checksum(blob)
