"""Binary checkpoint container shared by classifier and guard models.

Layout (all integers little-endian):

    magic     8 bytes  b"RFGCKPT\\0"
    version   u32
    hdr_len   u32
    header    hdr_len bytes of UTF-8 JSON: architecture descriptor, config
              digest, epoch, metric snapshot, and a blob index
              [{name, shape, offset, nbytes}]
    blobs     concatenated little-endian float32 tensors
    crc32     u32 over everything before it
"""
from __future__ import annotations

import copy
import json
import os
import struct
import zlib
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

MAGIC = b"RFGCKPT\0"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    arch: dict
    params: "OrderedDict[str, np.ndarray]"
    config_digest: str = ""
    epoch: int = 0
    metrics: dict = field(default_factory=dict)
    format_version: int = VERSION

    @classmethod
    def from_module(cls, module: torch.nn.Module, arch: dict, **kw) -> "Checkpoint":
        params = OrderedDict(
            (name, t.detach().cpu().numpy().astype(np.float32, copy=True))
            for name, t in module.state_dict().items()
        )
        return cls(arch=dict(arch), params=params, **kw)

    def copy(self) -> "Checkpoint":
        return Checkpoint(copy.deepcopy(self.arch), OrderedDict((k, v.copy()) for k, v in self.params.items()),
                          self.config_digest, self.epoch, copy.deepcopy(self.metrics), self.format_version)

    def state_dict(self) -> "OrderedDict[str, torch.Tensor]":
        return OrderedDict((k, torch.from_numpy(np.array(v, dtype=np.float32))) for k, v in self.params.items())

    def to_bytes(self) -> bytes:
        index = []
        blobs = []
        offset = 0
        for name, arr in self.params.items():
            raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            index.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
            blobs.append(raw)
            offset += len(raw)
        header = json.dumps({
            "arch": self.arch, "config_digest": self.config_digest, "epoch": self.epoch,
            "metrics": self.metrics, "tensors": index,
        }, sort_keys=True).encode("utf-8")
        body = MAGIC + struct.pack("<II", self.format_version, len(header)) + header + b"".join(blobs)
        return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Checkpoint":
        if raw[:8] != MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic)")
        if len(raw) < 20:
            raise CheckpointError("truncated checkpoint")
        (crc,) = struct.unpack("<I", raw[-4:])
        if zlib.crc32(raw[:-4]) & 0xFFFFFFFF != crc:
            raise CheckpointError("checkpoint CRC mismatch")
        version, hdr_len = struct.unpack("<II", raw[8:16])
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        header = json.loads(raw[16 : 16 + hdr_len].decode("utf-8"))
        base = 16 + hdr_len
        params: OrderedDict[str, np.ndarray] = OrderedDict()
        for entry in header["tensors"]:
            start = base + entry["offset"]
            arr = np.frombuffer(raw[start : start + entry["nbytes"]], dtype="<f4")
            params[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float32)
        return cls(header["arch"], params, header["config_digest"], header["epoch"], header["metrics"], version)

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())
