"""Binary checkpoint format.

Layout (little-endian throughout)::

    b"DRF3"                     magic
    u32 version
    u32 n, n bytes              UTF-8 JSON of the flat training config
    u32 count                   number of parameter records
    per record:
        u32 n, n bytes          UTF-8 parameter name
        u32 rank, rank * u32    shape
        prod(shape) * f64       values, row-major
"""

from __future__ import annotations

import io
import json
import struct

import numpy as np

from .config import TrainConfig, to_flat, train_config_from_flat

MAGIC = b"DRF3"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _write_bytes(fh, data: bytes) -> None:
    fh.write(struct.pack("<I", len(data)))
    fh.write(data)


def _read_exact(fh, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError("truncated checkpoint")
    return data


def _read_u32(fh) -> int:
    return struct.unpack("<I", _read_exact(fh, 4))[0]


def dumps(model) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    _write_bytes(buf, json.dumps(to_flat(model.cfg), sort_keys=True).encode("utf-8"))
    params = model.params
    buf.write(struct.pack("<I", len(params)))
    for name in params:
        value = np.ascontiguousarray(params[name], dtype="<f8")
        _write_bytes(buf, name.encode("utf-8"))
        buf.write(struct.pack("<I", value.ndim))
        buf.write(struct.pack(f"<{value.ndim}I", *value.shape))
        buf.write(value.tobytes(order="C"))
    return buf.getvalue()


def loads(data: bytes):
    from .pipeline import DiffRef3D

    fh = io.BytesIO(data)
    if _read_exact(fh, 4) != MAGIC:
        raise CheckpointError("not a DRF3 checkpoint")
    version = _read_u32(fh)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    cfg: TrainConfig = train_config_from_flat(json.loads(_read_exact(fh, _read_u32(fh)).decode("utf-8")))
    model = DiffRef3D(cfg)
    count = _read_u32(fh)
    seen = set()
    for _ in range(count):
        name = _read_exact(fh, _read_u32(fh)).decode("utf-8")
        rank = _read_u32(fh)
        shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank)) if rank else ()
        n = int(np.prod(shape)) if rank else 1
        values = np.frombuffer(_read_exact(fh, 8 * n), dtype="<f8").reshape(shape)
        if name not in model.params:
            raise CheckpointError(f"unexpected parameter {name!r}")
        if model.params[name].shape != tuple(shape):
            raise CheckpointError(f"shape mismatch for {name!r}: {shape} vs {model.params[name].shape}")
        model.params[name][...] = values
        seen.add(name)
    missing = set(model.params.names()) - seen
    if missing:
        raise CheckpointError(f"missing parameters: {sorted(missing)}")
    return model


def save(model, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(model))


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())
