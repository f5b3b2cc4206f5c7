"""Binary checkpoints of named float32 tensors.

Layout (all integers little-endian)::

    b"DRSRCKPT" | u32 version | 32-byte sha256 of everything that follows |
    u32 header length | header JSON | entries...

    entry := u16 name length | name | u8 ndim | u32 dims... | float32 payload

Entries are written in sorted name order so identical parameter sets always
produce identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

MAGIC = b"DRSRCKPT"
VERSION = 1

ParamSet = dict  # name -> np.ndarray, sorted by name


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: ParamSet
    stage: str = "init"
    config_digest: str = ""
    metadata: dict = field(default_factory=dict)


def config_digest(config: Mapping) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def params_of(model: torch.nn.Module) -> ParamSet:
    return {name: t.detach().cpu().numpy().astype(np.float32, copy=True)
            for name, t in sorted(model.state_dict().items())}


def load_params(model: torch.nn.Module, params: Mapping[str, np.ndarray]) -> torch.nn.Module:
    state = model.state_dict()
    missing = set(state) ^ set(params)
    if missing:
        raise CheckpointError(f"parameter names differ: {sorted(missing)[:5]}")
    with torch.no_grad():
        for name, t in state.items():
            src = np.asarray(params[name])
            if tuple(src.shape) != tuple(t.shape):
                raise CheckpointError(f"tensor {name}: shape {src.shape} != {tuple(t.shape)}")
            t.copy_(torch.from_numpy(src.astype(np.float32)).to(t.dtype))
    return model


def to_bytes(ckpt: Checkpoint) -> bytes:
    names = sorted(ckpt.params)
    header = json.dumps({"stage": ckpt.stage, "config_digest": ckpt.config_digest,
                         "tensor_count": len(names), "metadata": ckpt.metadata},
                        sort_keys=True, separators=(",", ":")).encode()
    body = [struct.pack("<I", len(header)), header]
    for name in names:
        arr = np.ascontiguousarray(ckpt.params[name], dtype="<f4")
        raw = name.encode()
        body.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        body.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        body.append(arr.tobytes())
    rest = b"".join(body)
    return MAGIC + struct.pack("<I", VERSION) + hashlib.sha256(rest).digest() + rest


def from_bytes(data: bytes, source: str = "<bytes>") -> Checkpoint:
    if data[:8] != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint (bad magic)")
    if len(data) < 44:
        raise CheckpointError(f"{source}: truncated header")
    (version,) = struct.unpack_from("<I", data, 8)
    if version != VERSION:
        raise CheckpointError(f"{source}: unknown checkpoint version {version}")
    digest, rest = data[12:44], data[44:]
    if hashlib.sha256(rest).digest() != digest:
        raise CheckpointError(f"{source}: digest mismatch (file corrupted or truncated)")
    try:
        (hlen,) = struct.unpack_from("<I", rest, 0)
        header = json.loads(rest[4:4 + hlen])
        pos = 4 + hlen
        params = {}
        for _ in range(header["tensor_count"]):
            (nlen,) = struct.unpack_from("<H", rest, pos)
            name = rest[pos + 2:pos + 2 + nlen].decode()
            pos += 2 + nlen
            (ndim,) = struct.unpack_from("<B", rest, pos)
            shape = struct.unpack_from(f"<{ndim}I", rest, pos + 1)
            pos += 1 + 4 * ndim
            count = int(np.prod(shape, dtype=np.int64))
            if pos + 4 * count > len(rest):
                raise CheckpointError(f"{source}: truncated payload for {name}")
            params[name] = np.frombuffer(rest, dtype="<f4", count=count, offset=pos).reshape(shape).astype(np.float32)
            pos += 4 * count
    except (struct.error, KeyError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{source}: malformed checkpoint ({exc})") from None
    if pos != len(rest):
        raise CheckpointError(f"{source}: {len(rest) - pos} trailing bytes")
    if list(params) != sorted(params):
        raise CheckpointError(f"{source}: tensor names not sorted")
    return Checkpoint(params, header["stage"], header["config_digest"], header["metadata"])


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(to_bytes(ckpt))
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"{path}: no such checkpoint")
    return from_bytes(path.read_bytes(), str(path))
