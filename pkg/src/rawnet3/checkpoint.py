"""Checkpoint file: text manifest header followed by little-endian float32 tensor blobs.

Layout::

    b"RN3CKPT\\n"                 8-byte magic
    <u64 little-endian>          header length in bytes
    header (UTF-8 lines)         schema / meta / config / tensor records
    blobs                        float32 LE, manifest order, offsets relative to blob start

Tensor records are ``tensor <name> <shape> <offset> <nbytes>`` with the shape
written as ``d0xd1x...`` (``-`` for a scalar).
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

MAGIC = b"RN3CKPT\n"
SCHEMA_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    config: dict[str, str] = field(default_factory=dict)
    meta: dict[str, str] = field(default_factory=dict)

    # ------------------------------------------------------------ modules

    def add_module(self, prefix: str, module: nn.Module) -> None:
        for name, t in module.state_dict().items():
            self.tensors[f"{prefix}.{name}"] = t.detach().cpu().numpy().astype("<f4")

    def module_state(self, prefix: str) -> dict[str, torch.Tensor]:
        head = prefix + "."
        return {k[len(head) :]: torch.from_numpy(v.copy()) for k, v in self.tensors.items() if k.startswith(head)}

    def has_prefix(self, prefix: str) -> bool:
        return any(k.startswith(prefix + ".") for k in self.tensors)

    def load_into(self, prefix: str, module: nn.Module) -> None:
        """Copy tensors under ``prefix`` into ``module``; mismatches are listed in the error."""
        state = self.module_state(prefix)
        target = module.state_dict()
        missing = sorted(set(target) - set(state))
        extra = sorted(set(state) - set(target))
        shape = sorted(k for k in set(state) & set(target) if tuple(state[k].shape) != tuple(target[k].shape))
        if missing or extra or shape:
            problems = [f"missing: {k}" for k in missing]
            problems += [f"unexpected: {k}" for k in extra]
            problems += [f"shape {k}: checkpoint {tuple(state[k].shape)} vs model {tuple(target[k].shape)}" for k in shape]
            raise CheckpointError("architecture mismatch under '%s':\n  %s" % (prefix, "\n  ".join(problems)))
        module.load_state_dict({k: v.to(target[k].dtype) for k, v in state.items()})

    # ------------------------------------------------------------ file format

    def to_bytes(self) -> bytes:
        lines = [f"schema {SCHEMA_VERSION}"]
        lines += [f"meta {k} {v}" for k, v in self.meta.items()]
        lines += [f"config {k} = {v}" for k, v in self.config.items()]
        blobs = []
        offset = 0
        for name, arr in self.tensors.items():
            data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            shape = "x".join(str(d) for d in arr.shape) or "-"
            lines.append(f"tensor {name} {shape} {offset} {len(data)}")
            blobs.append(data)
            offset += len(data)
        header = ("\n".join(lines) + "\n").encode("utf-8")
        return MAGIC + struct.pack("<Q", len(header)) + header + b"".join(blobs)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Checkpoint":
        if raw[:8] != MAGIC:
            raise CheckpointError("not a RawNet3 checkpoint (bad magic)")
        (hlen,) = struct.unpack("<Q", raw[8:16])
        header = raw[16 : 16 + hlen].decode("utf-8")
        blob = raw[16 + hlen :]
        ckpt = cls()
        for line in header.splitlines():
            kind, _, rest = line.partition(" ")
            if kind == "schema":
                if int(rest) != SCHEMA_VERSION:
                    raise CheckpointError(f"unsupported schema version {rest}")
            elif kind == "meta":
                k, _, v = rest.partition(" ")
                ckpt.meta[k] = v
            elif kind == "config":
                k, _, v = rest.partition(" = ")
                ckpt.config[k] = v
            elif kind == "tensor":
                name, shape, off, nbytes = rest.split(" ")
                dims = () if shape == "-" else tuple(int(d) for d in shape.split("x"))
                off, nbytes = int(off), int(nbytes)
                arr = np.frombuffer(blob[off : off + nbytes], dtype="<f4").reshape(dims)
                ckpt.tensors[name] = arr.copy()
            else:
                raise CheckpointError(f"unknown header record {kind!r}")
        return ckpt

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()[:16]
