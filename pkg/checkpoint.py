#!/usr/bin/env python3
"""
Checkpoint Module
LSTRCKP1 binary: magic, block count, then per named parameter block its
name, shape and little-endian float64 payload
"""

import math
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Dict

import numpy as np

from errors import CheckpointError
from file_manager import FileManager
from numerics import ParameterSet

MODULE = "checkpoint"

CHECKPOINT_MAGIC = b"LSTRCKP1"
_U32 = struct.Struct("<I")
MAX_BLOCK_BYTES = 1 << 31


def encode_state(state: Dict[str, np.ndarray]) -> bytes:
    chunks = [CHECKPOINT_MAGIC, _U32.pack(len(state))]
    for name, value in state.items():
        raw_name = name.encode("utf-8")
        value = np.asarray(value, dtype="<f8")
        chunks.append(_U32.pack(len(raw_name)))
        chunks.append(raw_name)
        chunks.append(_U32.pack(value.ndim))
        chunks.extend(_U32.pack(d) for d in value.shape)
        chunks.append(value.tobytes())
    return b"".join(chunks)


def decode_state(data: bytes) -> "OrderedDict[str, np.ndarray]":
    if data[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError("bad magic, not an LSTRCKP1 checkpoint", MODULE)
    offset = len(CHECKPOINT_MAGIC)

    def read_u32():
        nonlocal offset
        if offset + _U32.size > len(data):
            raise CheckpointError("checkpoint is truncated", MODULE)
        (value,) = _U32.unpack_from(data, offset)
        offset += _U32.size
        return value

    state: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(read_u32()):
        name_len = read_u32()
        if offset + name_len > len(data):
            raise CheckpointError("checkpoint is truncated", MODULE)
        try:
            name = data[offset:offset + name_len].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"parameter name is not UTF-8: {exc}", MODULE) from exc
        offset += name_len
        shape = tuple(read_u32() for _ in range(read_u32()))
        nbytes = 8 * math.prod(shape)
        if nbytes > MAX_BLOCK_BYTES:
            raise CheckpointError(f"block '{name}' declares shape {shape}, over the size limit", MODULE)
        if offset + nbytes > len(data):
            raise CheckpointError(f"block '{name}' is truncated", MODULE)
        state[name] = np.frombuffer(data[offset:offset + nbytes], dtype="<f8").astype(np.float64).reshape(shape)
        offset += nbytes
    if offset != len(data):
        raise CheckpointError(f"{len(data) - offset} trailing bytes after the last block", MODULE)
    return state


def save_checkpoint(path, params: ParameterSet):
    return FileManager.atomic_write_bytes(path, encode_state(params.state()))


def load_checkpoint(path) -> "OrderedDict[str, np.ndarray]":
    return decode_state(Path(path).read_bytes())


def restore(params: ParameterSet, state: Dict[str, np.ndarray]):
    """Copy checkpoint values into params; names and shapes must agree exactly"""
    missing = [n for n in params if n not in state]
    extra = [n for n in state if n not in params]
    if missing or extra:
        raise CheckpointError(f"parameter names differ (missing {missing[:3]}, unexpected {extra[:3]})", MODULE)
    for name, param in params.items():
        value = state[name]
        if value.shape != param.value.shape:
            raise CheckpointError(f"'{name}' has shape {value.shape}, model expects {param.value.shape}", MODULE)
        param.value[...] = value
        param.zero_grad()
        param.momentum_buffer.fill(0.0)
