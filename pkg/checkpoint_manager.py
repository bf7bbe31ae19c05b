"""
CHECKPOINT MANAGER
Binary parameter container for encoders, projection heads and U-Nets.

Layout:
1. 8-byte magic "VSSLCKPT"
2. uint64 little-endian header length, then UTF-8 JSON header:
   {"meta": {...}, "params": [{"name", "shape", "offset", "nbytes"}, ...]}
3. raw little-endian float32 blocks in header order (offsets relative to block start)
"""

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict

import numpy as np

from errors import FormatError

logger = logging.getLogger("CHECKPOINT_MANAGER")

MAGIC = b"VSSLCKPT"
_LE_F32 = np.dtype("<f4")


@dataclass
class Checkpoint:
    params: Dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def names(self):
        return list(self.params)


class CheckpointManager:

    @staticmethod
    def save(checkpoint: Checkpoint, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        entries, blocks, offset = [], [], 0
        for name, value in checkpoint.params.items():
            block = np.ascontiguousarray(value, dtype=_LE_F32).tobytes()
            entries.append({"name": name, "shape": list(value.shape), "offset": offset, "nbytes": len(block)})
            blocks.append(block)
            offset += len(block)
        header = json.dumps({"meta": checkpoint.meta, "params": entries}, sort_keys=True).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<Q", len(header)))
            fh.write(header)
            for block in blocks:
                fh.write(block)
        logger.info(f"💾 CHECKPOINT_SAVED: {path} ({len(entries)} tensors, {offset} bytes)")
        return path

    @staticmethod
    def load(path) -> Checkpoint:
        raw = Path(path).read_bytes()
        if raw[:8] != MAGIC:
            raise FormatError(f"{path}: bad checkpoint magic")
        if len(raw) < 16:
            raise FormatError(f"{path}: truncated checkpoint header")
        (header_len,) = struct.unpack("<Q", raw[8:16])
        start = 16 + header_len
        if start > len(raw):
            raise FormatError(f"{path}: header length {header_len} exceeds file size")
        try:
            header = json.loads(raw[16:start].decode("utf-8"))
            entries = header["params"]
        except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
            raise FormatError(f"{path}: unreadable checkpoint header ({exc})") from exc

        params = {}
        for entry in entries:
            shape = tuple(int(s) for s in entry["shape"])
            expected = int(np.prod(shape, dtype=np.int64)) * _LE_F32.itemsize
            lo = start + int(entry["offset"])
            hi = lo + int(entry["nbytes"])
            if int(entry["nbytes"]) != expected or hi > len(raw):
                raise FormatError(f"{path}: block '{entry['name']}' does not match shape {shape}")
            params[entry["name"]] = np.frombuffer(raw[lo:hi], dtype=_LE_F32).reshape(shape).astype(np.float32)
        return Checkpoint(params=params, meta=header.get("meta", {}))
