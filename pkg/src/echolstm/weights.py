"""Binary weight files.

Layout (all integers little-endian)::

    magic          8 bytes   b"ECHOWTS\\0"
    version        u16       FORMAT_VERSION
    config_len     u32
    config         config_len bytes of UTF-8 JSON (every ModelConfig field, sorted keys)
    n_params       u32
    n_params records:
        name_len   u16
        name       name_len bytes UTF-8
        rows       u32
        cols       u32
        values     rows*cols float64, row-major

Files are written to a temporary sibling and renamed into place, so an
interrupted save never leaves a truncated file behind.
"""

from __future__ import annotations

import io
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .cells import ModelConfig, SequenceClassifier

MAGIC = b"ECHOWTS\0"
FORMAT_VERSION = 1


class WeightFormatError(ValueError):
    pass


def dumps(model: SequenceClassifier) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<H", FORMAT_VERSION))
    config = json.dumps(model.config.to_dict(), sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(config)))
    buf.write(config)
    buf.write(struct.pack("<I", len(model.params)))
    for name in sorted(model.params):
        value = np.asarray(model.params[name], dtype="<f8")
        if value.ndim != 2:
            raise WeightFormatError(f"parameter {name!r} is not a matrix")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<II", *value.shape))
        buf.write(np.ascontiguousarray(value).tobytes())
    return buf.getvalue()


def loads(data: bytes) -> SequenceClassifier:
    view = memoryview(data)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise WeightFormatError("truncated weight file")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(len(MAGIC))) != MAGIC:
        raise WeightFormatError("not a weight file (bad magic bytes)")
    (version,) = struct.unpack("<H", take(2))
    if version != FORMAT_VERSION:
        raise WeightFormatError(f"unsupported weight format version {version}")
    (clen,) = struct.unpack("<I", take(4))
    config = ModelConfig.from_dict(json.loads(bytes(take(clen)).decode("utf-8")))
    (count,) = struct.unpack("<I", take(4))
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = bytes(take(nlen)).decode("utf-8")
        rows, cols = struct.unpack("<II", take(8))
        values = np.frombuffer(take(8 * rows * cols), dtype="<f8").astype(np.float64)
        params[name] = values.reshape(rows, cols)
    if pos != len(view):
        raise WeightFormatError("trailing bytes after last parameter")
    return SequenceClassifier(config, params)


def atomic_write(path, data: bytes | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(model: SequenceClassifier, path) -> None:
    atomic_write(path, dumps(model))


def load(path) -> SequenceClassifier:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no weight file at {path}")
    return loads(path.read_bytes())
