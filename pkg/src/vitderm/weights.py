"""VITW binary weight container.

Layout (all integers little-endian)::

    b"VITW" 0x01
    repeated:  u32 name_len | name (UTF-8) | u8 dtype (0 = f32) | u8 rank |
               rank * u32 dims | raw f32 payload
    u32 0      terminator

Names must be unique.  Only float32 payloads are defined.
"""

from __future__ import annotations

import io
import os
import struct
from typing import Dict, Mapping, Optional

import numpy as np

from .errors import DimensionError, WeightFormatError
from .model import ViTConfig, ViTModel, backbone_shapes, buffer_shapes, head_shapes, reinit_head

MAGIC = b"VITW"
VERSION = 1
DTYPE_F32 = 0
_DTYPES = {DTYPE_F32: np.dtype("<f4")}


def write_container(path, tensors: Mapping[str, np.ndarray]) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC + bytes([VERSION]))
    for name, arr in tensors.items():
        encoded = name.encode("utf-8")
        if not encoded:
            raise WeightFormatError("tensor names must be non-empty")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        buf.write(struct.pack("<I", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<BB", DTYPE_F32, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    buf.write(struct.pack("<I", 0))
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(buf.getvalue())
    os.replace(tmp, path)


def read_container(path) -> Dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        raw = fh.read()
    view = memoryview(raw)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(raw):
            raise WeightFormatError(f"{path}: truncated at byte {pos} (needed {n} more bytes)")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise WeightFormatError(f"{path}: bad magic bytes, not a VITW container")
    version = take(1)[0]
    if version != VERSION:
        raise WeightFormatError(f"{path}: unsupported container version {version}")

    tensors: Dict[str, np.ndarray] = {}
    while True:
        (name_len,) = struct.unpack("<I", take(4))
        if name_len == 0:
            break
        try:
            name = bytes(take(name_len)).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise WeightFormatError(f"{path}: tensor name is not valid UTF-8") from exc
        dtype_code, rank = struct.unpack("<BB", take(2))
        if dtype_code not in _DTYPES:
            raise WeightFormatError(f"{path}: tensor {name!r} has unknown dtype code {dtype_code}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank)) if rank else ()
        dtype = _DTYPES[dtype_code]
        count = int(np.prod(dims, dtype=np.int64))
        payload = take(count * dtype.itemsize)
        if name in tensors:
            raise WeightFormatError(f"{path}: duplicate tensor name {name!r}")
        tensors[name] = np.frombuffer(payload, dtype=dtype).reshape(dims).astype(np.float32)
    if pos != len(raw):
        raise WeightFormatError(f"{path}: {len(raw) - pos} trailing bytes after terminator")
    return tensors


def save_weights(model: ViTModel, path) -> None:
    """Write all parameters and batch-norm statistics as float32."""
    write_container(path, model.state_dict())


def load_weights(path, config: ViTConfig, backbone_only: bool = False, seed: int = 0,
                 dtype=np.float32) -> ViTModel:
    """Rebuild a model from a container.

    With ``backbone_only`` the head entries may be absent; the head is then
    freshly initialized from ``seed`` and any head entries in the file are
    ignored.  Names the config does not know about are always an error.
    """
    stored = read_container(path)
    backbone = backbone_shapes(config)
    head = {**head_shapes(config), **buffer_shapes(config)}
    known = set(backbone) | set(head)

    extra = sorted(set(stored) - known)
    if extra:
        raise WeightFormatError(f"{path}: unexpected tensors {extra}")
    expected = {**backbone, **head}
    for name, arr in stored.items():
        if arr.shape != tuple(expected[name]):
            raise DimensionError(f"{path}: tensor {name!r} has shape {list(arr.shape)}, "
                                 f"expected {list(expected[name])}")
    required = backbone if backbone_only else expected
    missing = sorted(set(required) - set(stored))
    if missing:
        raise WeightFormatError(f"{path}: missing tensors {missing}")

    model = ViTModel.zeros(config, dtype)
    if backbone_only:
        reinit_head(model, seed)
    for name in required:
        if name in model.params:
            model.params[name].data = stored[name].astype(dtype)
        else:
            model.buffers[name][...] = stored[name]
    return model
