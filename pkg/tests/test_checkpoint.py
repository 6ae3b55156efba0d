import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from fxdl.checkpoint import MAGIC, VERSION, CheckpointError, decode, encode, load_checkpoint, save_checkpoint


def test_round_trip_model(tmp_path, small_model):
    save_checkpoint(small_model.params, tmp_path / "m.ckpt")
    back = load_checkpoint(tmp_path / "m.ckpt")
    assert list(back) == list(small_model.params)
    for k, v in back.items():
        assert v.dtype == np.float32 and np.array_equal(v, small_model.params[k].data)


@settings(max_examples=40, deadline=None)
@given(st.dictionaries(st.text(min_size=1, max_size=12),
                       arrays(np.float32, array_shapes(min_dims=0, max_dims=3, max_side=5),
                              elements=st.floats(-1e6, 1e6, width=32)),
                       max_size=5))
def test_encode_decode_round_trip(arrays_):
    back = decode(encode(arrays_))
    assert list(back) == list(arrays_)
    for k in arrays_:
        assert back[k].shape == arrays_[k].shape and np.array_equal(back[k], arrays_[k])


def test_layout_bytes():
    blob = encode({"ab": np.array([[1.0, 2.0]], np.float32)})
    assert blob[:4] == MAGIC
    assert struct.unpack_from("<II", blob, 4) == (VERSION, 1)
    assert struct.unpack_from("<I", blob, 12) == (2,) and blob[16:18] == b"ab"
    assert struct.unpack_from("<III", blob, 18) == (2, 1, 2)
    assert struct.unpack_from("<2f", blob, 30) == (1.0, 2.0)
    assert len(blob) == 38 + 8


def test_truncation_detected():
    blob = encode({"w": np.arange(10, dtype=np.float32)})
    for cut in (3, 19, len(blob) - 1):
        with pytest.raises(CheckpointError):
            decode(blob[:cut])


def test_corruption_detected():
    blob = bytearray(encode({"w": np.arange(10, dtype=np.float32)}))
    blob[25] ^= 0x01
    with pytest.raises(CheckpointError, match="checksum"):
        decode(bytes(blob))


def test_version_mismatch_detected():
    blob = encode({"w": np.zeros(2, np.float32)})
    payload = blob[:4] + struct.pack("<I", VERSION + 1) + blob[8:-8]
    import hashlib
    tail = hashlib.blake2b(payload, digest_size=8).digest()
    with pytest.raises(CheckpointError, match="version"):
        decode(payload + tail)


def test_wrong_magic(tmp_path):
    (tmp_path / "x").write_bytes(b"NOPE" + bytes(40))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "x")
