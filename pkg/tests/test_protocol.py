import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from exprmap.stream import protocol as P
from helpers import random_message


def test_bs_frame_size():
    buf = P.encode_message(P.BsFrame(0, 0, np.zeros(51)))
    assert len(buf) == 230
    assert struct.unpack_from("<I", buf, 6)[0] == 220
    assert buf[:4] == b"OFRA" and buf[4] == 1 and buf[5] == P.MsgType.BS_FRAME


def test_update_size():
    m = P.GaussUpdate(7, np.zeros((3, 3)), np.tile([1, 0, 0, 0], (3, 1)), np.ones((3, 3)))
    buf = P.encode_message(m)
    assert struct.unpack_from("<I", buf, 6)[0] == 132
    assert P.UPDATE_RECORD.itemsize == 40


def test_round_trip_all_variants():
    rng = np.random.default_rng(0)
    for _ in range(500):
        m = random_message(rng)
        buf = P.encode_message(m)
        back, used = P.decode_message(buf)
        assert back == m and used == len(buf)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_round_trip_property(seed):
    m = random_message(np.random.default_rng(seed))
    assert P.decode_message(P.encode_message(m))[0] == m


def test_stream_of_messages():
    rng = np.random.default_rng(1)
    msgs = [random_message(rng) for _ in range(20)]
    buf = b"".join(P.encode_message(m) for m in msgs)
    out, pos = [], 0
    while pos < len(buf):
        m, used = P.decode_message(memoryview(buf)[pos:])
        out.append(m)
        pos += used
    assert out == msgs


def test_errors():
    good = P.encode_message(P.BsFrame(1, 2, np.zeros(51)))
    with pytest.raises(P.BadMagic):
        P.decode_message(b"XXXX" + good[4:])
    with pytest.raises(P.BadVersion):
        P.decode_message(good[:4] + b"\x02" + good[5:])
    with pytest.raises(P.UnknownType):
        P.decode_message(good[:5] + b"\x63" + good[6:])
    with pytest.raises(P.LengthMismatch):
        bad = bytearray(good[:-4])
        struct.pack_into("<I", bad, 6, 216)
        P.decode_message(bytes(bad))
    with pytest.raises(P.IncompleteMessage) as info:
        P.decode_message(good[:-5])
    assert info.value.needed == 5
    with pytest.raises(P.IncompleteMessage):
        P.decode_message(good[:3])
    with pytest.raises(P.LengthMismatch):
        P.decode_message(P.HEADER.pack(b"OFRA", 1, P.MsgType.STATS, 3) + b"[1]")


def test_error_kinds():
    assert P.BadMagic("x").kind and P.BadMagic("x").kind != P.UnknownType("x").kind


def test_try_decode_never_raises():
    msg, used, err = P.try_decode(b"OFRA\x01")
    assert msg is None and isinstance(err, P.IncompleteMessage)
    msg, used, err = P.try_decode(b"garbage!!!!")
    assert isinstance(err, P.BadMagic)


def test_truncation_every_prefix():
    buf = P.encode_message(random_message(np.random.default_rng(5)))
    for k in range(len(buf)):
        _, _, err = P.try_decode(buf[:k])
        assert isinstance(err, P.IncompleteMessage)


def test_fuzz_small():
    rng = np.random.default_rng(9)
    bases = [P.encode_message(random_message(rng)) for _ in range(50)]
    for i in range(20_000):
        b = bytearray(bases[i % 50])
        for _ in range(int(rng.integers(1, 4))):
            if b:
                b[int(rng.integers(0, len(b)))] = int(rng.integers(0, 256))
        if rng.random() < 0.3:
            b = b[:int(rng.integers(0, len(b) + 1))]
        P.try_decode(bytes(b))


def test_static_split():
    # GAUSS_UPDATE records carry only pos/rot/scale
    assert P.UPDATE_RECORD.names == ("pos", "rot", "scale")
