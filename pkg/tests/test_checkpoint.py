import struct
import zlib

import numpy as np
import pytest

from sdnet import arch, checkpoint
from sdnet.errors import DataError


def _net():
    spec = arch.with_sd(arch.ArchitectureSpec(depth=2, base_width=4), [1],
                        config=arch.SdnLayerConfig(state_size=4))
    return arch.build(spec, seed=3)


def test_round_trip_restores_forward_bit_exactly(tmp_path):
    net = _net()
    x = np.random.default_rng(0).uniform(size=(2, 1, 8, 8)).astype(np.float32)
    before = net.forward(x, mode="eval").data.copy()
    checkpoint.save(tmp_path / "a.sdnt", net.params.state_dict())
    fresh = arch.build(net.spec, seed=99)
    assert not np.array_equal(fresh.forward(x, mode="eval").data, before)
    fresh.params.load_state_dict(checkpoint.load(tmp_path / "a.sdnt"))
    assert np.array_equal(fresh.forward(x, mode="eval").data, before)


def test_names_order_and_shapes_preserved():
    state = _net().params.state_dict()
    back = checkpoint.decode(checkpoint.encode(state))
    assert list(back) == list(state)
    assert all(back[k].shape == state[k].shape and back[k].dtype == np.float32 for k in state)


def test_scalar_and_empty():
    state = {"s": np.float32(2.5), "e": np.zeros((0, 3), dtype=np.float32)}
    back = checkpoint.decode(checkpoint.encode(state))
    assert back["s"].shape == () and back["s"] == 2.5
    assert back["e"].shape == (0, 3)


def test_encoding_is_deterministic():
    state = _net().params.state_dict()
    assert checkpoint.encode(state) == checkpoint.encode(state)


def test_bad_magic():
    with pytest.raises(DataError):
        checkpoint.decode(b"NOPE" + bytes(20))


def test_flipped_byte_fails_crc():
    buf = bytearray(checkpoint.encode({"w": np.ones(4, dtype=np.float32)}))
    buf[-6] ^= 0xFF
    with pytest.raises(DataError, match="CRC"):
        checkpoint.decode(bytes(buf))


def _reseal(body: bytes) -> bytes:
    return body + struct.pack("<I", zlib.crc32(body))


def test_truncated_payload_with_valid_crc():
    body = checkpoint.encode({"w": np.ones(4, dtype=np.float32)})[:-4]
    with pytest.raises(DataError, match="truncated"):
        checkpoint.decode(_reseal(body[:-3]))


def test_unknown_dtype():
    body = bytearray(checkpoint.encode({"w": np.ones(1, dtype=np.float32)})[:-4])
    body[4 + 8 + 4 + 1] = 7  # dtype byte after the one-char name
    with pytest.raises(DataError, match="dtype"):
        checkpoint.decode(_reseal(bytes(body)))


def test_unsupported_version():
    body = bytearray(checkpoint.encode({})[:-4])
    body[4] = 9
    with pytest.raises(DataError, match="version"):
        checkpoint.decode(_reseal(bytes(body)))
