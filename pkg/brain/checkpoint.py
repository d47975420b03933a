"""Binary checkpoint container.

Layout (little-endian): magic ``MPAN``, u32 version, u32 record count, then per
record a u16 name length, the UTF-8 name, a u8 dtype code, a u8 rank, one u32
per extent and the payload. Weights are float32, counters int64, scores
float64 and the config JSON raw bytes. Optimizer moments live under
``optim.*``; epoch, best validation nIoU and the model config under ``meta.*``.
"""
import json
import logging
import struct
from pathlib import Path
from typing import Dict, Iterator, Tuple, Union

import numpy as np

from app.errors import ConfigError, ParseError
from app.models import Checkpoint, MPANetConfig
from brain.network import MPANet

logger = logging.getLogger(__name__)

MAGIC = b"MPAN"
VERSION = 2
# dtype code -> stored little-endian dtype
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<u1"), 2: np.dtype("<i8"), 3: np.dtype("<f8")}
_OPTIM = "optim."
_META = "meta."


def _records(ckpt: Checkpoint) -> Iterator[Tuple[str, np.ndarray]]:
    yield from ckpt.tensors.items()
    for name, value in ckpt.optimizer.items():
        yield _OPTIM + name, value
    yield _META + "epoch", np.array(ckpt.epoch, dtype=np.int64)
    yield _META + "best_niou", np.array(ckpt.best_niou, dtype=np.float64)
    config = json.dumps(ckpt.config, sort_keys=True).encode("utf-8")
    yield _META + "config", np.frombuffer(config, dtype=np.uint8)


def _dtype_code(value: np.ndarray) -> int:
    if value.dtype == np.uint8:
        return 1
    if np.issubdtype(value.dtype, np.integer):
        return 2
    if value.dtype == np.float64:
        return 3
    return 0


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    records = list(_records(ckpt))
    chunks = [MAGIC, struct.pack("<II", VERSION, len(records))]
    for name, value in records:
        raw_name = name.encode("utf-8")
        value = np.asarray(value)
        chunks.append(struct.pack("<H", len(raw_name)))
        chunks.append(raw_name)
        code = _dtype_code(value)
        chunks.append(struct.pack("<BB", code, value.ndim))
        chunks.append(struct.pack(f"<{value.ndim}I", *value.shape))
        chunks.append(np.ascontiguousarray(value, dtype=DTYPES[code]).tobytes())
    return b"".join(chunks)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, fmt: str, what: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise ParseError(f"truncated checkpoint while reading {what}", self.pos)
        values = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return values

    def raw(self, size: int, what: str) -> bytes:
        if self.pos + size > len(self.data):
            raise ParseError(f"truncated checkpoint while reading {what}", self.pos)
        chunk = self.data[self.pos:self.pos + size]
        self.pos += size
        return chunk


def decode_checkpoint(data: bytes) -> Checkpoint:
    if data[:4] != MAGIC:
        raise ParseError(f"bad magic {data[:4]!r}, expected {MAGIC!r}", 0)
    reader = _Reader(data)
    reader.pos = 4
    (version,) = reader.take("<I", "version")
    if version != VERSION:
        raise ParseError(f"unsupported checkpoint version {version}, expected {VERSION}", 4)
    (count,) = reader.take("<I", "tensor count")

    tensors: Dict[str, np.ndarray] = {}
    for _ in range(count):
        start = reader.pos
        (name_len,) = reader.take("<H", "name length")
        try:
            name = reader.raw(name_len, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise ParseError("tensor name is not UTF-8", start + 2) from None
        code_at = reader.pos
        code, rank = reader.take("<BB", f"dtype and rank of {name}")
        if code not in DTYPES:
            raise ParseError(f"unknown dtype code {code} for {name}", code_at)
        dtype = DTYPES[code]
        shape = reader.take(f"<{rank}I", f"shape of {name}") if rank else ()
        payload = reader.raw(dtype.itemsize * int(np.prod(shape, dtype=np.int64)), f"data of {name}")
        if name in tensors:
            raise ParseError(f"duplicate tensor {name!r}", start)
        tensors[name] = np.frombuffer(payload, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    if reader.pos != len(data):
        raise ParseError(f"{len(data) - reader.pos} unexpected trailing bytes", reader.pos)

    meta = {k[len(_META):]: tensors.pop(k) for k in list(tensors) if k.startswith(_META)}
    optimizer = {k[len(_OPTIM):]: tensors.pop(k) for k in list(tensors) if k.startswith(_OPTIM)}
    config = meta["config"].tobytes().decode("utf-8") if "config" in meta else "{}"
    return Checkpoint(
        tensors=tensors,
        optimizer=optimizer,
        epoch=int(meta.get("epoch", 0)),
        best_niou=float(meta.get("best_niou", 0.0)),
        config=json.loads(config),
    )


def save_checkpoint(ckpt: Checkpoint, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(ckpt))
    logger.info("saved checkpoint %s (epoch %d, best nIoU %.4f)", path, ckpt.epoch, ckpt.best_niou)
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


def restore_model(ckpt: Checkpoint) -> MPANet:
    """Rebuild the network recorded in ``ckpt`` and load its weights, in eval mode."""
    if "model" not in ckpt.config:
        raise ConfigError("checkpoint carries no model configuration")
    model = MPANet(MPANetConfig(**ckpt.config["model"]))
    model.load_state_dict(ckpt.tensors)
    return model.eval()
