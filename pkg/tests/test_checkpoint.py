import hashlib
import struct

import numpy as np
import pytest

from devo.checkpoint import (
    CheckpointFormatError,
    CheckpointIntegrityError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    from_bytes,
    load_checkpoint,
    save_checkpoint,
    to_bytes,
)
from devo.classifier import Arch, Hyperparams, fine_tune, init_model, train


@pytest.fixture
def model():
    rng = np.random.default_rng(0)
    X = rng.uniform(-1, 1, (20, 4))
    y = np.arange(20) % 2
    m = train(init_model(2, Arch(3, 4), seed=1, label_dict={"a": 0, "b": 1}), X, y, Hyperparams(epochs=2, batch_size=5))
    return fine_tune(m, X, y, Hyperparams(epochs=1, batch_size=5), ts=3.25)


def test_round_trip(tmp_path, model):
    digest = save_checkpoint(model, tmp_path / "m.devo")
    back = load_checkpoint(tmp_path / "m.devo")
    assert back == model
    assert back.label_dict == {"a": 0, "b": 1}
    assert back.parent_version == model.parent_version
    assert digest == hashlib.sha256((tmp_path / "m.devo").read_bytes()[:-32]).hexdigest()


def test_layout(model):
    data = to_bytes(model)
    assert data[:4] == b"DEVO"
    version, hlen = struct.unpack_from("<HI", data, 4)
    assert version == 1
    (count,) = struct.unpack_from("<Q", data, 10 + hlen)
    assert count == model.parameters.size
    params = np.frombuffer(data, "<f8", count, 18 + hlen)
    assert np.array_equal(params, model.parameters)
    assert len(data) == 18 + hlen + 8 * count + 32


def test_serialization_is_deterministic(model):
    assert to_bytes(model) == to_bytes(from_bytes(to_bytes(model)))


def test_bad_magic(model):
    with pytest.raises(CheckpointFormatError):
        from_bytes(b"NOPE" + to_bytes(model)[4:])


def test_unknown_version(model):
    data = bytearray(to_bytes(model))
    data[4:6] = struct.pack("<H", 9)
    with pytest.raises(CheckpointVersionError):
        from_bytes(bytes(data))


@pytest.mark.parametrize("cut", [6, 40, -33, -1])
def test_truncation(model, cut):
    with pytest.raises(CheckpointTruncatedError):
        from_bytes(to_bytes(model)[:cut])


def test_bit_flip_detected(model):
    data = bytearray(to_bytes(model))
    data[-60] ^= 0x01
    with pytest.raises(CheckpointIntegrityError):
        from_bytes(bytes(data))


def test_trailing_bytes(model):
    with pytest.raises(CheckpointFormatError):
        from_bytes(to_bytes(model) + b"\x00")


def test_atomic_save_leaves_no_temp(tmp_path, model):
    save_checkpoint(model, tmp_path / "m.devo")
    assert sorted(p.name for p in tmp_path.iterdir()) == ["m.devo"]
