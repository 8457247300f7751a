"""Versioned binary checkpoint container.

Layout: magic ``LTMC``, little-endian u32 format version, u32 header
length, canonical JSON header (sorted keys, no whitespace), then the raw
little-endian float64 tensor data concatenated in manifest order. The
manifest lists every tensor's name and shape, so the file round-trips
byte-exactly: save, load, save again produces identical bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"LTMC"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model_config: dict
    train_config: dict | None
    epoch: int
    rng_state: dict
    optimizer: dict
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        manifest = [[name, list(arr.shape)] for name, arr in self.tensors.items()]
        header = {
            "config": self.model_config,
            "train_config": self.train_config,
            "epoch": self.epoch,
            "rng": self.rng_state,
            "optimizer": self.optimizer,
            "manifest": manifest,
        }
        hj = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        parts = [MAGIC, struct.pack("<II", VERSION, len(hj)), hj]
        for _, arr in self.tensors.items():
            parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        if blob[:4] != MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic)")
        version, hlen = struct.unpack_from("<II", blob, 4)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        header = json.loads(blob[12:12 + hlen].decode("utf-8"))
        offset = 12 + hlen
        tensors: dict[str, np.ndarray] = {}
        for name, shape in header["manifest"]:
            n = int(np.prod(shape)) if shape else 1
            raw = blob[offset:offset + 8 * n]
            if len(raw) != 8 * n:
                raise CheckpointError(f"truncated tensor data for {name}")
            tensors[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
            offset += 8 * n
        if offset != len(blob):
            raise CheckpointError("trailing bytes after tensor data")
        return cls(
            model_config=header["config"],
            train_config=header["train_config"],
            epoch=header["epoch"],
            rng_state=header["rng"],
            optimizer=header["optimizer"],
            tensors=tensors,
        )

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())
