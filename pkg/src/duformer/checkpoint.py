"""Checkpoint file: one magic line, one JSON header line, then raw float32 payload.

    DUFORMER-CKPT 1\\n
    {"config": ..., "iteration": ..., "params": [{"name", "shape", "offset", "nbytes"}, ...], ...}\\n
    <little-endian float32 arrays, concatenated in header order>

The header is serialised with sorted keys and no optional whitespace so a
save -> load -> save cycle reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .layers import ParamStore

MAGIC = b"DUFORMER-CKPT 1\n"
FORMAT_VERSION = 1
_LE_F32 = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: dict
    params: dict[str, np.ndarray]
    iteration: int = 0
    rng_state: Optional[dict] = None
    extra: dict = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        entries, chunks, offset = [], [], 0
        for name, arr in self.params.items():
            data = np.ascontiguousarray(arr, dtype=_LE_F32).tobytes()
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
            chunks.append(data)
            offset += len(data)
        header = {
            "format_version": FORMAT_VERSION,
            "config": self.config,
            "iteration": self.iteration,
            "rng_state": self.rng_state,
            "extra": self.extra,
            "params": entries,
        }
        line = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        return MAGIC + line + b"\n" + b"".join(chunks)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Checkpoint":
        if not buf.startswith(MAGIC):
            raise CheckpointError("not a DUFormer checkpoint (bad magic line)")
        end = buf.find(b"\n", len(MAGIC))
        if end < 0:
            raise CheckpointError("checkpoint header is not terminated")
        header = json.loads(buf[len(MAGIC) : end])
        if header.get("format_version") != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {header.get('format_version')}")
        payload = memoryview(buf)[end + 1 :]
        params, expected = {}, 0
        for e in header["params"]:
            if e["offset"] != expected:
                raise CheckpointError(f"parameter {e['name']} is not contiguous in the payload")
            count = int(np.prod(e["shape"])) if e["shape"] else 1
            if e["nbytes"] != 4 * count:
                raise CheckpointError(f"parameter {e['name']} byte size disagrees with its shape")
            if e["name"] in params:
                raise CheckpointError(f"parameter {e['name']} stored twice")
            chunk = payload[e["offset"] : e["offset"] + e["nbytes"]]
            if len(chunk) != e["nbytes"]:
                raise CheckpointError(f"payload truncated inside {e['name']}")
            params[e["name"]] = np.frombuffer(chunk, dtype=_LE_F32).reshape(e["shape"]).copy()
            expected += e["nbytes"]
        if expected != len(payload):
            raise CheckpointError(f"{len(payload) - expected} unexpected trailing payload bytes")
        return cls(header["config"], params, header["iteration"], header["rng_state"], header.get("extra", {}))

    def save(self, path: str | os.PathLike) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


def snapshot(store: ParamStore) -> dict[str, np.ndarray]:
    return {name: p.data.astype(np.float32) for name, p in store.items()}


def restore(store: ParamStore, params: dict[str, np.ndarray]) -> None:
    """Copy ``params`` into ``store``; any missing, extra or reshaped entry is an error."""
    for name, p in store.items():
        if name not in params:
            raise CheckpointError(f"checkpoint lacks parameter {name}")
        if params[name].shape != p.shape:
            raise CheckpointError(
                f"parameter {name} has shape {params[name].shape} in the checkpoint, model expects {p.shape}"
            )
    extra = [n for n in params if n not in store]
    if extra:
        raise CheckpointError(f"checkpoint has unknown parameter {extra[0]}")
    for name, p in store.items():
        p.data = params[name].astype(store.dtype)
