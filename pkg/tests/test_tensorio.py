import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from spikecodec.tensorio import (
    FormatError,
    load_checkpoint,
    read_sidecar,
    read_tensor,
    save_checkpoint,
    tensor_from_bytes,
    tensor_to_bytes,
    write_sidecar,
    write_tensor,
)

arrays = hnp.arrays(np.float64, hnp.array_shapes(min_dims=0, max_dims=5, min_side=0, max_side=4),
                    elements=st.floats(allow_nan=True, allow_infinity=True))


@given(arrays)
def test_tensor_round_trip_is_bit_exact(a):
    b, end = tensor_from_bytes(tensor_to_bytes(a))
    assert end == len(tensor_to_bytes(a))
    assert b.shape == a.shape
    assert b.tobytes() == a.tobytes()


def test_header_layout():
    buf = tensor_to_bytes(np.zeros((2, 3)))
    assert buf[:4] == b"T4SN"
    assert buf[4:8] == (1).to_bytes(4, "little")
    assert buf[8] == 0
    assert buf[9:13] == (2).to_bytes(4, "little")
    assert buf[13:21] == b"\x02\x00\x00\x00\x03\x00\x00\x00"
    assert len(buf) == 21 + 48


def test_file_errors(tmp_path):
    p = tmp_path / "t.t4sn"
    write_tensor(p, np.arange(6.0).reshape(2, 3))
    np.testing.assert_array_equal(read_tensor(p), np.arange(6.0).reshape(2, 3))
    good = p.read_bytes()
    p.write_bytes(good + b"\x00")
    with pytest.raises(FormatError, match="trailing"):
        read_tensor(p)
    p.write_bytes(good[:-1])
    with pytest.raises(FormatError, match="payload truncated"):
        read_tensor(p)
    p.write_bytes(good[:10])
    with pytest.raises(FormatError, match="truncated header"):
        read_tensor(p)
    p.write_bytes(b"NOPE" + good[4:])
    with pytest.raises(FormatError, match="bad magic"):
        read_tensor(p)
    p.write_bytes(good[:4] + b"\x02" + good[5:])
    with pytest.raises(FormatError, match="version"):
        read_tensor(p)
    p.write_bytes(good[:8] + b"\x01" + good[9:])
    with pytest.raises(FormatError, match="dtype"):
        read_tensor(p)


def test_sidecar_round_trip(tmp_path):
    p = tmp_path / "x.meta"
    write_sidecar(p, {"b": 2, "a": "rate"})
    assert p.read_text() == "a=rate\nb=2\n"
    assert read_sidecar(p) == {"a": "rate", "b": "2"}


@given(st.dictionaries(st.from_regex(r"[a-z][a-z0-9_.]{0,8}", fullmatch=True), arrays, max_size=4))
def test_checkpoint_round_trip(tmp_path_factory, named):
    p = tmp_path_factory.mktemp("ck") / "c.ckpt"
    save_checkpoint(p, named, {"k": [1, 2], "s": "x"})
    got, meta = load_checkpoint(p)
    assert meta == {"k": [1, 2], "s": "x"}
    assert list(got) == list(named)
    for k in named:
        assert got[k].shape == named[k].shape and got[k].tobytes() == named[k].tobytes()


def test_checkpoint_errors(tmp_path):
    p = tmp_path / "c.ckpt"
    with pytest.raises(ValueError):
        save_checkpoint(p, {"a b": np.zeros(1)})
    save_checkpoint(p, {"w": np.ones((2, 2))})
    good = p.read_bytes()
    for bad, msg in [
        (b"junk\n", "not a checkpoint"),
        (good.replace(b"T4SN-CKPT 1", b"T4SN-CKPT 9"), "version"),
        (good.replace(b"\nend\n", b"\nfin\n"), "unknown header"),
        (good.replace(b"array w 2,2 0", b"array w 2,x 0"), "malformed"),
        (good.replace(b"array w 2,2 0", b"array w 3,2 0"), "past payload"),
        (good + b"!", "trailing"),
        (good[:-3], "truncated"),
        (good.split(b"end\n")[0], "no 'end'"),
    ]:
        p.write_bytes(bad)
        with pytest.raises(FormatError, match=msg):
            load_checkpoint(p)
