"""Bit-exact checkpoint container.

Layout (all little-endian): magic "GSLT", format version u16, config JSON
length u32 + UTF-8 JSON, then per parameter: name length u16 + UTF-8 name,
rank u8, dims as u32 each, raw float32 values; finally CRC32 of everything
preceding it.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"GSLT"
VERSION = 1

__all__ = ["Checkpoint", "CheckpointError"]


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: dict
    params: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_model(cls, model) -> "Checkpoint":
        return cls(
            config={"model": model.cfg.to_dict()},
            params={name: p.data.astype(np.float32).copy() for name, p in model.params.items()},
        )

    def to_model(self):
        from .detector import ModelConfig, SiameseDetector

        model_cfg = self.config.get("model", self.config)
        model = SiameseDetector(ModelConfig.from_dict(model_cfg))
        if set(model.params) != set(self.params):
            missing = set(model.params) ^ set(self.params)
            raise CheckpointError(f"parameter set mismatch: {sorted(missing)}")
        for name, p in model.params.items():
            stored = self.params[name]
            if stored.shape != p.data.shape:
                raise CheckpointError(f"shape mismatch for {name}: {stored.shape} vs {p.data.shape}")
            p.data = stored.astype(np.float32).copy()
        return model

    def save(self, path: str | Path):
        chunks = [MAGIC, struct.pack("<H", VERSION)]
        config_json = json.dumps(self.config, sort_keys=True).encode("utf-8")
        chunks.append(struct.pack("<I", len(config_json)))
        chunks.append(config_json)
        for name, arr in self.params.items():
            name_b = name.encode("utf-8")
            arr32 = np.ascontiguousarray(arr, dtype="<f4")
            chunks.append(struct.pack("<H", len(name_b)))
            chunks.append(name_b)
            chunks.append(struct.pack("<B", arr32.ndim))
            chunks.append(struct.pack(f"<{arr32.ndim}I", *arr32.shape))
            chunks.append(arr32.tobytes())
        payload = b"".join(chunks)
        crc = zlib.crc32(payload) & 0xFFFFFFFF
        Path(path).write_bytes(payload + struct.pack("<I", crc))

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        blob = Path(path).read_bytes()
        if len(blob) < 14 or blob[:4] != MAGIC:
            raise CheckpointError(f"not a checkpoint file: {path}")
        (crc,) = struct.unpack("<I", blob[-4:])
        if zlib.crc32(blob[:-4]) & 0xFFFFFFFF != crc:
            raise CheckpointError(f"checksum mismatch in {path}")
        off = 4
        (version,) = struct.unpack_from("<H", blob, off)
        off += 2
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (clen,) = struct.unpack_from("<I", blob, off)
        off += 4
        config = json.loads(blob[off : off + clen].decode("utf-8"))
        off += clen
        params: dict[str, np.ndarray] = {}
        end = len(blob) - 4
        while off < end:
            (nlen,) = struct.unpack_from("<H", blob, off)
            off += 2
            name = blob[off : off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<B", blob, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", blob, off)
            off += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(blob, dtype="<f4", count=count, offset=off).reshape(dims)
            off += 4 * count
            params[name] = arr.copy()
        if off != end:
            raise CheckpointError(f"trailing bytes in {path}")
        return cls(config=config, params=params)
