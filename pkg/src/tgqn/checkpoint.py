"""Checkpoint files: JSON manifest + flat tensor section + trailing CRC32.

Layout (little-endian)::

    b"TGQC" u8 version
    u32 manifest_len, manifest (UTF-8 JSON)
    u32 tensor_count
    per tensor: u32 name_len, name (UTF-8), u8 dtype, u8 rank, u32 dims[rank], payload
    u32 crc32 of every preceding byte
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig, diff_configs

MAGIC = b"TGQC"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("u1")}
DTYPE_CODES = {v: k for k, v in DTYPES.items()}


class CheckpointError(ValueError):
    pass


class IntegrityError(CheckpointError):
    pass


class ConfigMismatchError(CheckpointError):
    def __init__(self, diffs):
        self.diffs = diffs
        super().__init__("checkpoint config differs from the active config:\n  " + "\n  ".join(diffs))


@dataclass
class Checkpoint:
    config: dict
    step: int = 0
    sigma: float = 0.0
    history: list = field(default_factory=list)
    tensors: dict = field(default_factory=dict)

    @property
    def run_config(self) -> RunConfig:
        return RunConfig.from_dict(self.config)

    def manifest(self) -> dict:
        return {"config": self.config, "step": self.step, "sigma": self.sigma, "history": self.history}


def model_tensors(module: torch.nn.Module) -> dict:
    return {k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    manifest = json.dumps(ckpt.manifest(), sort_keys=True).encode("utf-8")
    parts = [MAGIC, bytes([VERSION]), struct.pack("<I", len(manifest)), manifest]
    parts.append(struct.pack("<I", len(ckpt.tensors)))
    for name in sorted(ckpt.tensors):
        arr = np.asarray(ckpt.tensors[name])
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        if np.dtype(dt) not in DTYPE_CODES:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        code = DTYPE_CODES[np.dtype(dt)]
        encoded = name.encode("utf-8")
        parts += [struct.pack("<I", len(encoded)), encoded, struct.pack("<BB", code, arr.ndim)]
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes())
    body = b"".join(parts)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(body + struct.pack("<I", zlib.crc32(body)))
    return path


def load_checkpoint(path, expected: RunConfig | None = None) -> Checkpoint:
    """Read and verify a checkpoint; with ``expected`` the stored config must match it."""
    data = Path(path).read_bytes()
    if len(data) < 13 or data[:4] != MAGIC:
        raise IntegrityError(f"{path}: not a checkpoint file")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise IntegrityError(f"{path}: checksum mismatch (file corrupt or truncated)")
    if body[4] != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {body[4]}")
    (mlen,) = struct.unpack_from("<I", body, 5)
    off = 9
    manifest = json.loads(body[off : off + mlen].decode("utf-8"))
    off += mlen
    (count,) = struct.unpack_from("<I", body, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", body, off)
        off += 4
        name = body[off : off + nlen].decode("utf-8")
        off += nlen
        code, rank = struct.unpack_from("<BB", body, off)
        off += 2
        shape = struct.unpack_from(f"<{rank}I", body, off)
        off += 4 * rank
        dt = DTYPES[code]
        n = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(body, dt, n, off).reshape(shape).copy()
        off += n * dt.itemsize
    if off != len(body):
        raise IntegrityError(f"{path}: trailing bytes after tensor section")
    ckpt = Checkpoint(manifest["config"], manifest["step"], manifest["sigma"], manifest["history"], tensors)
    if expected is not None:
        diffs = diff_configs(ckpt.config, expected.to_dict())
        if diffs:
            raise ConfigMismatchError(diffs)
    return ckpt


def restore_model(ckpt: Checkpoint):
    from .model import TGQN

    model = TGQN.from_run_config(ckpt.run_config)
    state = {k: torch.from_numpy(v) for k, v in ckpt.tensors.items() if not k.startswith("optim/")}
    model.load_state_dict(state)
    return model
