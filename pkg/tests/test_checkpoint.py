import struct
import zlib

import numpy as np
import pytest

from rrcnn.architectures import build
from rrcnn.checkpoint import Checkpoint, CheckpointError, load_network, save_network


@pytest.fixture
def net():
    return build("resunet", 4, width_scale=0.25, seed=9)


def test_roundtrip_bit_exact(net, tmp_path):
    path = tmp_path / "m.rrcw"
    save_network(net, path, meta={"mean": [0.5, -1.0], "std": [2.0, 3.0]})
    again, ckpt = load_network(path)
    assert ckpt.meta["mean"] == [0.5, -1.0]
    for (_, a), (_, b) in zip(net.named_params(), again.named_params()):
        assert a.w.tobytes() == b.w.tobytes()
        assert a.b.tobytes() == b.b.tobytes()
    assert Checkpoint.load(path).to_bytes() == path.read_bytes()


def test_header_layout(net):
    data = Checkpoint.from_network(net).to_bytes()
    assert data[:4] == b"RRCW"
    assert struct.unpack("<H", data[4:6]) == (1,)
    (n,) = struct.unpack("<H", data[6:8])
    assert data[8:8 + n] == b"resunet"
    assert struct.unpack("<I", data[-4:])[0] == zlib.crc32(data[:-4])


def test_bad_magic(net):
    data = bytearray(Checkpoint.from_network(net).to_bytes())
    data[0:4] = b"XXXX"
    with pytest.raises(CheckpointError, match="magic"):
        Checkpoint.from_bytes(bytes(data))


def test_corruption_detected(net):
    data = bytearray(Checkpoint.from_network(net).to_bytes())
    data[100] ^= 0xFF
    with pytest.raises(CheckpointError, match="checksum"):
        Checkpoint.from_bytes(bytes(data))


def test_truncation_detected(net):
    data = Checkpoint.from_network(net).to_bytes()
    with pytest.raises(CheckpointError):
        Checkpoint.from_bytes(data[:-50])


def test_restore_mismatch(net):
    ckpt = Checkpoint.from_network(net)
    other = build("unet", 4, width_scale=0.25)
    with pytest.raises(CheckpointError):
        ckpt.restore(other)


def test_snapshot_is_a_copy(net):
    ckpt = Checkpoint.from_network(net)
    net.params()[0].w += 1
    assert not np.array_equal(ckpt.blocks[0][1], net.params()[0].w)
    ckpt.restore(net)
    assert np.array_equal(ckpt.blocks[0][1], net.params()[0].w)
