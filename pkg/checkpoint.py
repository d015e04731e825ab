# masrc/checkpoint.py
import json
import logging
import os
import struct
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
from pydantic import ValidationError

from errors import DataFormatError, ShapeMismatchError
from kernel import ParamStore
from schemas import MetricsRecord

logger = logging.getLogger(__name__)

# Parameter file: magic, u32 version, u64 slot count, u64 meta length, JSON meta,
# then per slot: u32 name length, name, u32 ndim, ndim * u64 extents, float32 values.
CHECKPOINT_MAGIC = b"MSRC"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<4sIQQ")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


def _atomic_write(path: Path, payload: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + f".tmp.{os.getpid()}")
    with open(tmp, "wb") as f:
        f.write(payload)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def save_checkpoint(params: ParamStore, path, meta: Optional[dict] = None) -> Path:
    """
    Writes every slot of ``params`` (in registration order) plus a JSON meta block.
    Identical inputs give byte-identical files.
    """
    path = Path(path)
    meta_bytes = json.dumps(meta or {}, sort_keys=True, separators=(",", ":")).encode("utf-8")
    chunks = [_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(params), len(meta_bytes)), meta_bytes]
    for name, value in params.items():
        name_bytes = name.encode("utf-8")
        chunks.append(_U32.pack(len(name_bytes)))
        chunks.append(name_bytes)
        chunks.append(_U32.pack(value.ndim))
        chunks.extend(_U64.pack(extent) for extent in value.shape)
        chunks.append(np.ascontiguousarray(value, dtype="<f4").tobytes())
    _atomic_write(path, b"".join(chunks))
    logger.info("Saved checkpoint with %d slots (%d parameters) to %s", len(params), params.num_parameters(), path)
    return path


class _Reader:
    def __init__(self, data: bytes, path: Path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, size: int) -> bytes:
        if self.pos + size > len(self.data):
            raise DataFormatError(f"Malformed checkpoint {self.path}: truncated at byte {self.pos}.")
        chunk = self.data[self.pos:self.pos + size]
        self.pos += size
        return chunk

    def unpack(self, fmt: struct.Struct):
        return fmt.unpack(self.take(fmt.size))


def load_checkpoint(path) -> tuple[ParamStore, dict]:
    path = Path(path)
    if not path.is_file():
        raise DataFormatError(f"Missing checkpoint file: {path}")
    reader = _Reader(path.read_bytes(), path)
    magic, version, num_slots, meta_len = reader.unpack(_HEADER)
    if magic != CHECKPOINT_MAGIC:
        raise DataFormatError(f"Bad magic in checkpoint {path}: found {magic!r}.")
    if version != CHECKPOINT_VERSION:
        raise DataFormatError(f"Unsupported checkpoint version {version} in {path}.")
    try:
        meta = json.loads(reader.take(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataFormatError(f"Malformed checkpoint meta in {path}: {e}") from e

    params = ParamStore()
    for _ in range(num_slots):
        (name_len,) = reader.unpack(_U32)
        name = reader.take(name_len).decode("utf-8")
        (ndim,) = reader.unpack(_U32)
        shape = tuple(reader.unpack(_U64)[0] for _ in range(ndim))
        count = int(np.prod(shape, dtype=np.int64))
        values = np.frombuffer(reader.take(count * 4), dtype="<f4").reshape(shape).astype(np.float32)
        params.add(name, values)
    if reader.pos != len(reader.data):
        raise DataFormatError(f"Malformed checkpoint {path}: {len(reader.data) - reader.pos} trailing bytes.")
    logger.info("Loaded checkpoint %s (%d slots).", path, len(params))
    return params, meta


def check_compatible(params: ParamStore, expected: ParamStore) -> None:
    """Raises ShapeMismatchError naming the first slot that is missing or shaped differently."""
    for name in expected:
        if name not in params:
            raise ShapeMismatchError(f"Checkpoint lacks parameter slot '{name}'.", slot=name)
        if params[name].shape != expected[name].shape:
            raise ShapeMismatchError(
                f"Slot '{name}' has shape {params[name].shape} in the checkpoint but the model "
                f"expects {expected[name].shape}.", slot=name)
    extra = [name for name in params if name not in expected]
    if extra:
        raise ShapeMismatchError(f"Checkpoint has unexpected slot '{extra[0]}'.", slot=extra[0])


def write_metrics_log(records: Iterable[MetricsRecord], path) -> Path:
    path = Path(path)
    lines = [json.dumps(r.model_dump(exclude_none=True), sort_keys=True) for r in records]
    _atomic_write(path, "".join(line + "\n" for line in lines).encode("utf-8"))
    return path


def read_metrics_log(path) -> list[MetricsRecord]:
    path = Path(path)
    if not path.is_file():
        raise DataFormatError(f"Missing metrics log: {path}")
    records = []
    for line_no, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            records.append(MetricsRecord.model_validate_json(line))
        except ValidationError as e:
            raise DataFormatError(f"{path}:{line_no}: malformed metrics record: {e}") from e
    return records
