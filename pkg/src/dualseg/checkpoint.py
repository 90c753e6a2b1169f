"""Little-endian binary checkpoint format.

::

    magic     4 bytes  b"DSEG"
    version   u32
    count     u32
    count x entry:
        path_len u16, path (UTF-8)
        dtype    u8   (0 float32, 1 float64, 2 int64)
        rank     u8
        dims     u32 * rank
        values   raw little-endian
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path
from typing import Mapping, Union

import numpy as np

from .model import DualSegNet, ModelConfig, buffer_shapes, build, parameter_shapes

MAGIC = b"DSEG"
VERSION = 1
_DTYPE_TAGS = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("<i8"): 2}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


class CheckpointError(ValueError):
    """Unreadable checkpoint, or one that does not match the model config."""


def save_checkpoint(path: Union[str, Path], entries: Mapping[str, np.ndarray]) -> None:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name, arr in entries.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _DTYPE_TAGS:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
        key = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(key)) + key)
        chunks.append(struct.pack("<BB", _DTYPE_TAGS[dt], arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: Union[str, Path]) -> "OrderedDict[str, np.ndarray]":
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path} is not a DSEG checkpoint")
    try:
        version, count = struct.unpack_from("<II", data, 4)
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported format version {version}")
        pos = 12
        out: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for _ in range(count):
            (n,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + n].decode("utf-8")
            pos += n
            tag, rank = struct.unpack_from("<BB", data, pos)
            pos += 2
            dims = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            dt = _TAG_DTYPES[tag]
            nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
            if pos + nbytes > len(data):
                raise CheckpointError(f"{path}: truncated entry {name}")
            out[name] = np.frombuffer(data, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(dims).copy()
            pos += nbytes
    except (struct.error, KeyError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from None
    return out


def save_model(path: Union[str, Path], net: DualSegNet) -> None:
    save_checkpoint(path, net.state_dict())


def load_state_into(net: DualSegNet, entries: Mapping[str, np.ndarray]) -> DualSegNet:
    """Copy checkpoint values into ``net`` after validating paths and shapes."""
    expected = OrderedDict(parameter_shapes(net.config))
    expected.update(buffer_shapes(net.config))
    missing = [k for k in expected if k not in entries]
    extra = [k for k in entries if k not in expected]
    if missing or extra:
        raise CheckpointError(f"checkpoint does not match config: missing {missing[:3]}, unexpected {extra[:3]}")
    for name, shape in expected.items():
        if tuple(entries[name].shape) != tuple(shape):
            raise CheckpointError(f"{name}: checkpoint shape {tuple(entries[name].shape)} != config shape {tuple(shape)}")
    for name, t in net.params.items():
        t.data = entries[name].astype(t.dtype)
    for name, arr in net.buffers().items():
        arr[...] = entries[name]
    return net


def load_model(path: Union[str, Path], config: ModelConfig) -> DualSegNet:
    return load_state_into(build(config, seed=0), load_checkpoint(path))
