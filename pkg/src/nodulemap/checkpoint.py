"""Binary persistence for parameters and whole models.

Parameter streams use a little-endian tagged layout:

* magic ``NACK1``
* ``u32`` entry count
* per entry: ``u16`` name length, UTF-8 name bytes, ``u8`` rank,
  ``u32`` extent per axis, then the float32 values in row-major order.

A model file is the same stream prefixed with magic ``NMDL1``, a
``u32`` length and a JSON-encoded architecture config, so a checkpoint
can rebuild its own model. Round-trips are byte-exact: writing the
entries read from a file reproduces the original stream bit for bit.
"""

from __future__ import annotations

import io
import json
import struct
from collections import OrderedDict

import numpy as np

from .errors import FormatError
from .model import Model, ModelConfig, build_model

PARAM_MAGIC = b"NACK1"
MODEL_MAGIC = b"NMDL1"
_MAX_RANK = 8


def write_param_stream(fp, entries) -> None:
    """Write (name, array) pairs; arrays are stored as float32 LE."""
    entries = list(entries)
    fp.write(PARAM_MAGIC)
    fp.write(struct.pack("<I", len(entries)))
    for name, arr in entries:
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise FormatError(f"parameter name too long: {len(raw)} bytes")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        if arr.ndim > _MAX_RANK:
            raise FormatError(f"parameter {name!r} has rank {arr.ndim}, max {_MAX_RANK}")
        fp.write(struct.pack("<H", len(raw)))
        fp.write(raw)
        fp.write(struct.pack("<B", arr.ndim))
        fp.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fp.write(arr.tobytes())


def _read_exact(fp, count: int, what: str) -> bytes:
    buf = fp.read(count)
    if len(buf) != count:
        raise FormatError(f"truncated stream while reading {what}")
    return buf


def read_param_stream(fp) -> "OrderedDict[str, np.ndarray]":
    magic = fp.read(len(PARAM_MAGIC))
    if magic != PARAM_MAGIC:
        raise FormatError(f"bad parameter-stream magic {magic!r}")
    (count,) = struct.unpack("<I", _read_exact(fp, 4, "entry count"))
    out: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for i in range(count):
        (nlen,) = struct.unpack("<H", _read_exact(fp, 2, "name length"))
        name = _read_exact(fp, nlen, "name").decode("utf-8")
        (rank,) = struct.unpack("<B", _read_exact(fp, 1, "rank"))
        if rank > _MAX_RANK:
            raise FormatError(f"entry {name!r} has rank {rank}, max {_MAX_RANK}")
        shape = struct.unpack(f"<{rank}I", _read_exact(fp, 4 * rank, "extents"))
        n_vals = int(np.prod(shape, dtype=np.int64)) if rank else 1
        raw = _read_exact(fp, 4 * n_vals, f"values of {name!r}")
        if name in out:
            raise FormatError(f"duplicate entry {name!r}")
        out[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    return out


def save_params(path, entries) -> None:
    with open(path, "wb") as fp:
        write_param_stream(fp, entries)


def load_params(path) -> "OrderedDict[str, np.ndarray]":
    with open(path, "rb") as fp:
        stream = read_param_stream(fp)
        if fp.read(1):
            raise FormatError("trailing bytes after parameter stream")
        return stream


def save_model(path, model: Model) -> None:
    """Model file: NMDL1 magic + JSON config header + parameter stream."""
    header = json.dumps(model.config.to_dict(), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fp:
        fp.write(MODEL_MAGIC)
        fp.write(struct.pack("<I", len(header)))
        fp.write(header)
        write_param_stream(fp, model.state_entries())


def load_model(path) -> Model:
    """Rebuild a model from file; weights land exactly as stored."""
    with open(path, "rb") as fp:
        magic = fp.read(len(MODEL_MAGIC))
        if magic != MODEL_MAGIC:
            raise FormatError(f"bad model magic {magic!r}")
        (hlen,) = struct.unpack("<I", _read_exact(fp, 4, "header length"))
        try:
            config = ModelConfig.from_dict(json.loads(_read_exact(fp, hlen, "config header")))
        except (ValueError, TypeError) as exc:
            raise FormatError(f"unreadable model config header: {exc}") from exc
        entries = read_param_stream(fp)
        if fp.read(1):
            raise FormatError("trailing bytes after model stream")
    model = build_model(config, seed=0)
    model.load_state(entries)
    return model
