import struct
from fractions import Fraction

import numpy as np
import pytest

from fdloss.checkpoint import load_model, read_container, save_model, write_container
from fdloss.errors import FormatError
from fdloss.layers import ArchSpec, build


def test_model_round_trip(tmp_path, rng):
    model = build(ArchSpec("resnet_like", Fraction(1, 2), (16, 16, 3), 4), 11)
    path = tmp_path / "m.ckpt"
    save_model(path, model)
    back = load_model(path)
    assert back.spec == model.spec and back.seed == 11
    for name in model.params:
        np.testing.assert_array_equal(back.params[name].data, model.params[name].data)
    x = rng.uniform(size=(16, 16, 3))
    np.testing.assert_array_equal(back.forward(x)[0].data, model.forward(x)[0].data)


def test_save_is_deterministic(tmp_path):
    model = build(ArchSpec("tiny", 1, (8, 8, 1), 2), 1)
    save_model(tmp_path / "a", model)
    save_model(tmp_path / "b", model)
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


# [DERIVED] byte layout written by hand
def test_documented_layout(tmp_path):
    path = tmp_path / "c"
    write_container(path, {"k": 1}, {"w": np.array([[1.5, -2.0]])})
    head = b'{"k": 1}'
    want = (
        b"FDLC" + struct.pack("<II", 1, len(head)) + head + struct.pack("<I", 1)
        + struct.pack("<I", 1) + b"w" + struct.pack("<III", 2, 1, 2) + struct.pack("<2d", 1.5, -2.0)
    )
    assert path.read_bytes() == want
    header, tensors = read_container(path)
    assert header == {"k": 1}
    np.testing.assert_array_equal(tensors["w"], [[1.5, -2.0]])


def test_truncated_rejected(tmp_path):
    path = tmp_path / "c"
    write_container(path, {}, {"w": np.ones(3)})
    path.write_bytes(path.read_bytes()[:-1])
    with pytest.raises(FormatError):
        read_container(path)


def test_trailing_bytes_rejected(tmp_path):
    path = tmp_path / "c"
    write_container(path, {}, {"w": np.ones(3)})
    path.write_bytes(path.read_bytes() + b"\0")
    with pytest.raises(FormatError):
        read_container(path)


def test_bad_magic(tmp_path):
    path = tmp_path / "c"
    path.write_bytes(b"XXXX" + bytes(20))
    with pytest.raises(FormatError):
        read_container(path)


def test_wrong_kind(tmp_path):
    path = tmp_path / "c"
    write_container(path, {"kind": "fusion_head"}, {})
    with pytest.raises(FormatError):
        load_model(path)
