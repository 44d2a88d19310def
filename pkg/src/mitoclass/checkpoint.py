"""
Checkpoint: bit-exact little-endian serialization of ModelParams.

Layout:
    b"MCKP" | u32 version | u32 len + UTF-8 JSON {"arch": ..., "meta": ...}
    u32 tensor count, then per tensor:
    u16 len + UTF-8 name | u8 dtype tag | u8 rank | u32 dims... | raw data
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np

from src.mitoclass.config import ArchConfig, validated
from src.mitoclass.errors import (
    BadMagic,
    CorruptCheckpoint,
    InvalidConfig,
    TensorShapeMismatch,
    TruncatedFile,
    VersionUnsupported,
)
from src.mitoclass.netcore import ModelParams, param_shapes

MAGIC = b"MCKP"
FORMAT_VERSION = 1

_DTYPE_TAGS = {np.dtype("float32"): 1, np.dtype("float64"): 2}
_TAG_DTYPES = {tag: dtype.newbyteorder("<") for dtype, tag in _DTYPE_TAGS.items()}


class _Reader:
    def __init__(self, raw: bytes, source: str):
        self.raw = raw
        self.pos = 0
        self.source = source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise TruncatedFile(
                f"{self.source}: needed {n} bytes at offset {self.pos}, file has {len(self.raw)}"
            )
        chunk = self.raw[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str) -> tuple[Any, ...]:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def encode(params: ModelParams, meta: Optional[dict[str, Any]] = None) -> bytes:
    header = json.dumps(
        {"arch": params.arch.model_dump(mode="json"), "meta": meta or {}},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(header)), header]
    names = sorted(params.tensors)
    parts.append(struct.pack("<I", len(names)))
    for name in names:
        tensor = params.tensors[name]
        encoded_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded_name)))
        parts.append(encoded_name)
        parts.append(struct.pack("<BB", _DTYPE_TAGS[tensor.dtype], tensor.ndim))
        parts.append(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
        parts.append(np.ascontiguousarray(tensor, dtype=tensor.dtype.newbyteorder("<")).tobytes())
    return b"".join(parts)


def _text(raw: bytes, source: str, what: str) -> str:
    try:
        return raw.decode("utf-8")
    except UnicodeDecodeError as e:
        raise CorruptCheckpoint(f"{source}: {what} is not valid UTF-8 ({e})") from None


def _read_header(raw: bytes, source: str) -> dict[str, Any]:
    try:
        header = json.loads(_text(raw, source, "header"))
    except json.JSONDecodeError as e:
        raise CorruptCheckpoint(f"{source}: header is not valid JSON ({e})") from None
    if not isinstance(header, dict) or not isinstance(header.get("meta"), dict):
        raise CorruptCheckpoint(f"{source}: header must be an object with 'arch' and 'meta'")
    try:
        arch = validated(ArchConfig, header.get("arch"))
    except InvalidConfig as e:
        raise CorruptCheckpoint(f"{source}: header architecture is invalid: {e}") from None
    return {"arch": arch, "meta": header["meta"]}


def decode(raw: bytes, source: str = "<bytes>") -> tuple[ModelParams, dict[str, Any]]:
    reader = _Reader(raw, source)
    magic = reader.take(4)
    if magic != MAGIC:
        raise BadMagic(f"{source}: expected magic {MAGIC!r}, found {magic!r}")
    version, header_len = reader.unpack("<II")
    if version != FORMAT_VERSION:
        raise VersionUnsupported(
            f"{source}: checkpoint version {version} (supported: {FORMAT_VERSION})"
        )
    header = _read_header(reader.take(header_len), source)

    (count,) = reader.unpack("<I")
    tensors = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = _text(reader.take(name_len), source, "tensor name")
        tag, rank = reader.unpack("<BB")
        if tag not in _TAG_DTYPES:
            raise CorruptCheckpoint(f"{source}: unknown dtype tag {tag} for tensor '{name}'")
        shape = reader.unpack(f"<{rank}I") if rank else ()
        dtype = _TAG_DTYPES[tag]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        data = np.frombuffer(reader.take(nbytes), dtype=dtype).reshape(shape)
        tensors[name] = data.astype(dtype.newbyteorder("="))
    if reader.pos != len(raw):
        raise TruncatedFile(f"{source}: {len(raw) - reader.pos} trailing bytes after last tensor")
    return ModelParams(arch=header["arch"], tensors=tensors), header["meta"]


def check_shapes(params: ModelParams, arch: ArchConfig) -> None:
    expected = param_shapes(arch)
    if set(expected) != set(params.tensors):
        missing = sorted(set(expected) ^ set(params.tensors))
        raise TensorShapeMismatch(f"tensor names differ from the expected architecture: {missing}")
    for name, shape in expected.items():
        if params.tensors[name].shape != shape:
            raise TensorShapeMismatch(
                f"tensor '{name}' has shape {params.tensors[name].shape}, expected {shape}"
            )


def save_checkpoint(
    path: Union[Path, str],
    params: ModelParams,
    meta: Optional[dict[str, Any]] = None,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode(params, meta))
    return path


def load_checkpoint(
    path: Union[Path, str],
    expected_arch: Optional[ArchConfig] = None,
) -> tuple[ModelParams, ArchConfig, dict[str, Any]]:
    path = Path(path)
    params, meta = decode(path.read_bytes(), source=str(path))
    check_shapes(params, params.arch)
    if expected_arch is not None:
        check_shapes(params, expected_arch)
        params = ModelParams(arch=expected_arch, tensors=params.tensors)
    return params, params.arch, meta
