"""Named-parameter checkpoint files.

Layout (all little-endian)::

    b"BDCK1\\n"  u32 entry count
    per entry:  u16 name length, utf-8 name, u8 ndim, u32 dims..., f32 payload
    sha256 digest (32 bytes) of everything before it
"""

from __future__ import annotations

import hashlib
import os
import struct
from pathlib import Path

import numpy as np

from ..errors import ContractError, MalformedFileError
from .layers import Module

MAGIC = b"BDCK1\n"


def state_dict(model: Module) -> dict[str, np.ndarray]:
    state = {name: p for name, p, _ in model.named_parameters()}
    state.update({f"{name}@buffer": b for name, b in model.named_buffers()})
    return state


def load_state_dict(model: Module, state: dict[str, np.ndarray]) -> None:
    own = state_dict(model)
    missing = sorted(set(own) - set(state))
    extra = sorted(set(state) - set(own))
    if missing or extra:
        raise ContractError(f"checkpoint mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
    for name, dst in own.items():
        src = state[name]
        if src.shape != dst.shape:
            raise ContractError(f"{name}: checkpoint shape {src.shape} vs model {dst.shape}")
        dst[...] = src


def encode_checkpoint(state: dict[str, np.ndarray]) -> bytes:
    chunks = [MAGIC, struct.pack("<I", len(state))]
    for name, arr in state.items():
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def decode_checkpoint(blob: bytes) -> dict[str, np.ndarray]:
    if not blob.startswith(MAGIC) or len(blob) < len(MAGIC) + 36:
        raise MalformedFileError("not a checkpoint file")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise MalformedFileError("checkpoint checksum mismatch")
    off = len(MAGIC)
    (count,) = struct.unpack_from("<I", body, off)
    off += 4
    state = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, off)
            off += 2
            name = body[off : off + nlen].decode("utf-8")
            off += nlen
            (ndim,) = struct.unpack_from("<B", body, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", body, off)
            off += 4 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            state[name] = np.frombuffer(body, dtype="<f4", count=size, offset=off).reshape(shape).copy()
            off += 4 * size
    except (struct.error, ValueError) as exc:
        raise MalformedFileError(f"truncated checkpoint: {exc}") from exc
    if off != len(body):
        raise MalformedFileError("trailing bytes in checkpoint")
    return state


def save_checkpoint(model: Module, path: str | os.PathLike) -> None:
    tmp = Path(f"{path}.tmp")
    tmp.write_bytes(encode_checkpoint(state_dict(model)))
    os.replace(tmp, path)


def load_checkpoint(model: Module, path: str | os.PathLike) -> None:
    load_state_dict(model, decode_checkpoint(Path(path).read_bytes()))
