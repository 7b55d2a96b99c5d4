"""TLRA checkpoint format: named float64 matrices plus a JSON metadata block.

Layout (all integers little-endian)::

    b"TLRA" | u32 version | u32 tensor count
    per tensor, sorted by name: u16 name length | UTF-8 name | u64 rows | u64 cols | rows·cols f64 (row-major)
    u32 metadata length | UTF-8 JSON (sorted keys)
"""
from __future__ import annotations

import hashlib
import json
import logging
import pathlib
import struct
from dataclasses import dataclass, field

import numpy as np

from .diffusion import Denoiser
from .errors import CheckpointError, DomainError

LOG = logging.getLogger(__name__)

MAGIC = b"TLRA"
VERSION = 1


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)

    def validate(self) -> None:
        for name, tensor in self.tensors.items():
            if not name or len(name.encode("utf-8")) > 0xFFFF:
                raise CheckpointError(f"Ungültiger Tensorname {name!r}")
            if np.ndim(tensor) != 2:
                raise CheckpointError(f"Tensor {name} muss zweidimensional sein")


def encode(checkpoint: Checkpoint) -> bytes:
    checkpoint.validate()
    parts = [MAGIC, struct.pack("<II", VERSION, len(checkpoint.tensors))]
    for name in sorted(checkpoint.tensors):
        tensor = np.ascontiguousarray(checkpoint.tensors[name], dtype="<f8")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<QQ", *tensor.shape))
        parts.append(tensor.tobytes(order="C"))
    meta = json.dumps(checkpoint.metadata, sort_keys=True, ensure_ascii=False).encode("utf-8")
    parts.append(struct.pack("<I", len(meta)))
    parts.append(meta)
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.offset = 0

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.data):
            raise CheckpointError("Checkpoint ist abgeschnitten")
        chunk = self.data[self.offset : self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(data: bytes) -> Checkpoint:
    reader = _Reader(data)
    if reader.take(4) != MAGIC:
        raise CheckpointError("Keine TLRA-Datei (Magic fehlt)")
    version, count = reader.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"Nicht unterstützte Version {version}")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (length,) = reader.unpack("<H")
        try:
            name = reader.take(length).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError("Tensorname ist kein UTF-8") from exc
        rows, cols = reader.unpack("<QQ")
        values = np.frombuffer(reader.take(8 * rows * cols), dtype="<f8")
        tensors[name] = values.astype(np.float64).reshape(rows, cols)
    (meta_length,) = reader.unpack("<I")
    try:
        metadata = json.loads(reader.take(meta_length).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError("Metadaten sind kein gültiges JSON") from exc
    if reader.offset != len(data):
        raise CheckpointError("Unerwartete Bytes am Dateiende")
    return Checkpoint(tensors, metadata)


def save(path: pathlib.Path | str, checkpoint: Checkpoint) -> pathlib.Path:
    target = pathlib.Path(path)
    if target.is_dir():
        raise CheckpointError("Checkpoint-Ziel muss eine Datei sein")
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_bytes(encode(checkpoint))
    LOG.info("Checkpoint gespeichert: %s (%d Tensoren)", target, len(checkpoint.tensors))
    return target


def load(path: pathlib.Path | str) -> Checkpoint:
    source = pathlib.Path(path)
    if not source.is_file():
        raise CheckpointError(f"Checkpoint nicht gefunden: {source}")
    return decode(source.read_bytes())


def file_digest(path: pathlib.Path | str) -> str:
    return hashlib.sha256(pathlib.Path(path).read_bytes()).hexdigest()


def from_denoiser(denoiser: Denoiser, **metadata) -> Checkpoint:
    return Checkpoint(denoiser.tensors(), {"denoiser": denoiser.describe(), **metadata})


def to_denoiser(checkpoint: Checkpoint) -> Denoiser:
    description = checkpoint.metadata.get("denoiser")
    if not isinstance(description, dict):
        raise CheckpointError("Metadaten enthalten keine Denoiser-Beschreibung")
    try:
        return Denoiser.from_tensors(checkpoint.tensors, description)
    except (DomainError, KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"Checkpoint passt nicht zum Denoiser: {exc}") from exc
