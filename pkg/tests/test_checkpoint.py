import struct

import numpy as np
import pytest

from dualseg.checkpoint import (
    MAGIC,
    CheckpointError,
    load_checkpoint,
    load_model,
    load_state_into,
    save_checkpoint,
    save_model,
)
from dualseg.datagen import stack_batch
from dualseg.model import ModelConfig, build
from dualseg.trainer import predict_proba

TINY = ModelConfig(width_factor=0.0625, subblocks_per_stage=(1, 1, 1, 1), input_hw=(64, 96))


def parse_by_hand(data):
    """Independent reader of the byte layout."""
    assert data[:4] == b"DSEG"
    version, count = struct.unpack("<II", data[4:12])
    pos, out = 12, {}
    codes = {0: ("f", 4), 1: ("d", 8), 2: ("q", 8)}
    for _ in range(count):
        (n,) = struct.unpack("<H", data[pos:pos + 2])
        name = data[pos + 2:pos + 2 + n].decode()
        pos += 2 + n
        tag, rank = data[pos], data[pos + 1]
        pos += 2
        dims = struct.unpack(f"<{rank}I", data[pos:pos + 4 * rank])
        pos += 4 * rank
        code, size = codes[tag]
        k = int(np.prod(dims)) if rank else 1
        out[name] = (tag, dims, struct.unpack(f"<{k}{code}", data[pos:pos + k * size]))
        pos += k * size
    assert pos == len(data)
    return version, out


def test_byte_layout(tmp_path):
    entries = {"a.w": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.array([1.5, -2.0]),
               "step": np.array([7], dtype=np.int64)}
    save_checkpoint(tmp_path / "x.dseg", entries)
    version, got = parse_by_hand((tmp_path / "x.dseg").read_bytes())
    assert version == 1 and list(got) == ["a.w", "b", "step"]
    assert got["a.w"] == (0, (2, 3), (0.0, 1.0, 2.0, 3.0, 4.0, 5.0))
    assert got["b"] == (1, (2,), (1.5, -2.0))
    assert got["step"] == (2, (1,), (7,))


def test_round_trip_preserves_dtype_and_values(tmp_path, rng):
    entries = {"x": rng.normal(size=(3, 4)).astype(np.float32), "y": rng.normal(size=5), "z": np.int64([3, 4])}
    save_checkpoint(tmp_path / "x.dseg", entries)
    back = load_checkpoint(tmp_path / "x.dseg")
    for k, v in entries.items():
        assert back[k].dtype == v.dtype
        np.testing.assert_array_equal(back[k], v)


def test_model_round_trip_is_bit_exact(tmp_path, small_splits):
    net = build(TINY, seed=3)
    pairs = small_splits["val"]["video_03"]
    real, sim, _ = stack_batch(pairs)
    net.forward(real, sim, training=True)  # move running stats off their defaults
    save_model(tmp_path / "m.dseg", net)
    again = load_model(tmp_path / "m.dseg", TINY)
    np.testing.assert_array_equal(predict_proba(net, pairs), predict_proba(again, pairs))


def test_bad_magic_and_truncation(tmp_path):
    save_checkpoint(tmp_path / "x.dseg", {"w": np.zeros((4, 4), np.float32)})
    data = (tmp_path / "x.dseg").read_bytes()
    (tmp_path / "magic.dseg").write_bytes(b"NOPE" + data[4:])
    (tmp_path / "short.dseg").write_bytes(data[:-5])
    (tmp_path / "header.dseg").write_bytes(data[:9])
    (tmp_path / "tag.dseg").write_bytes(data[:12 + 3] + bytes([9]) + data[16:])
    for name in ("magic", "short", "header", "tag", "missing"):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / f"{name}.dseg")


def test_unsupported_dtype_raises(tmp_path):
    with pytest.raises(CheckpointError):
        save_checkpoint(tmp_path / "x.dseg", {"w": np.zeros(2, np.int8)})
    assert MAGIC == b"DSEG"


def test_config_mismatch_raises(tmp_path):
    save_model(tmp_path / "m.dseg", build(TINY))
    with pytest.raises(CheckpointError, match="missing"):
        load_model(tmp_path / "m.dseg", TINY.with_(subblocks_per_stage=(1, 2, 1, 1)))
    with pytest.raises(CheckpointError, match="shape"):
        load_model(tmp_path / "m.dseg", TINY.with_(width_factor=0.125))
    entries = load_checkpoint(tmp_path / "m.dseg")
    entries["stray"] = np.zeros(1, np.float32)
    with pytest.raises(CheckpointError, match="unexpected"):
        load_state_into(build(TINY), entries)
