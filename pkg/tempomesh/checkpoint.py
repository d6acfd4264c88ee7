"""Binary checkpoint files.

Layout, all integers little-endian::

    magic       8 bytes   b"TMSHCKPT"
    version     u32
    step        u64
    rng_state   u32 length + UTF-8 JSON (null when no generator was saved)
    metadata    u32 length + UTF-8 JSON
    count       u32
    count times:
        name    u16 length + UTF-8
        ndim    u8
        dims    ndim x u32
        values  prod(dims) x float32

Parameters are written in sorted name order, so equal parameter sets give
byte-identical files.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional

import numpy as np

from tempomesh.errors import CheckpointError

MAGIC = b"TMSHCKPT"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    step: int = 0
    rng_state: Optional[dict] = None
    metadata: dict[str, Any] = field(default_factory=dict)

    def restore_rng(self) -> np.random.Generator:
        """Generator positioned exactly where the saved one stopped."""
        if self.rng_state is None:
            raise CheckpointError("checkpoint carries no generator state")
        bit_generator = np.random.Philox()
        bit_generator.state = self.rng_state
        return np.random.Generator(bit_generator)


def _encode_state(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return {"__ndarray__": value.tolist(), "dtype": str(value.dtype)}
    if isinstance(value, dict):
        return {k: _encode_state(v) for k, v in value.items()}
    if isinstance(value, np.integer):
        return int(value)
    return value


def _decode_state(value: Any) -> Any:
    if isinstance(value, dict):
        if "__ndarray__" in value:
            return np.array(value["__ndarray__"], dtype=value["dtype"])
        return {k: _decode_state(v) for k, v in value.items()}
    return value


def _pack_json(payload: Any) -> bytes:
    raw = json.dumps(payload, sort_keys=True).encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def save_checkpoint(
    path: Path,
    params: Mapping[str, np.ndarray],
    step: int = 0,
    rng: Optional[np.random.Generator] = None,
    metadata: Optional[Mapping[str, Any]] = None,
) -> Path:
    """Write ``params`` and training state to ``path`` atomically.

    Returns:
        Path: The written file.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rng_state = _encode_state(rng.bit_generator.state) if rng is not None else None

    chunks = [
        MAGIC,
        struct.pack("<IQ", FORMAT_VERSION, int(step)),
        _pack_json(rng_state),
        _pack_json(dict(metadata or {})),
        struct.pack("<I", len(params)),
    ]
    for name in sorted(params):
        array = np.ascontiguousarray(params[name], dtype="<f4")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)) + encoded)
        chunks.append(struct.pack("<B", array.ndim))
        chunks.append(struct.pack(f"<{array.ndim}I", *array.shape))
        chunks.append(array.tobytes())

    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)
    return path


class _Reader:
    def __init__(self, raw: bytes, path: Path):
        self.raw = raw
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"checkpoint {self.path} is truncated")
        chunk = self.raw[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def json(self) -> Any:
        (length,) = self.unpack("<I")
        try:
            return json.loads(self.take(length).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"checkpoint {self.path} has a corrupt header: {e}") from e


def load_checkpoint(path: Path) -> Checkpoint:
    """Read a checkpoint written by :func:`save_checkpoint`.

    Raises:
        CheckpointError: If the file is missing, has the wrong magic or version,
            or is truncated.
    """
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    reader = _Reader(path.read_bytes(), path)
    if reader.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path} is not a tempomesh checkpoint")
    version, step = reader.unpack("<IQ")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} in {path}")
    rng_state = reader.json()
    metadata = reader.json()
    (count,) = reader.unpack("<I")

    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        (ndim,) = reader.unpack("<B")
        shape = reader.unpack(f"<{ndim}I") if ndim else ()
        n_values = int(np.prod(shape)) if shape else 1
        values = np.frombuffer(reader.take(4 * n_values), dtype="<f4")
        params[name] = values.astype(np.float32).reshape(shape)
    if reader.pos != len(reader.raw):
        raise CheckpointError(f"checkpoint {path} has trailing bytes")

    return Checkpoint(
        params=params,
        step=int(step),
        rng_state=_decode_state(rng_state) if rng_state is not None else None,
        metadata=metadata,
    )


def param_hash(params: Mapping[str, np.ndarray]) -> str:
    """SHA-256 over names, shapes and float32 values in sorted name order."""
    digest = hashlib.sha256()
    for name in sorted(params):
        array = np.ascontiguousarray(params[name], dtype="<f4")
        digest.update(name.encode("utf-8"))
        digest.update(str(array.shape).encode("ascii"))
        digest.update(array.tobytes())
    return digest.hexdigest()
