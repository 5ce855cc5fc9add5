import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from emkd import io
from emkd.io import FormatError
from emkd.tensor import Tensor

any_tensor = st.lists(st.integers(1, 5), min_size=1, max_size=4).flatmap(
    lambda s: arrays(np.float64, tuple(s), elements=st.floats(allow_nan=False, width=64)))


@settings(max_examples=60, deadline=None)
@given(any_tensor)
def test_tensor_roundtrip_is_bitwise(arr):
    back = io.decode_tensor(io.encode_tensor(Tensor(arr)))
    assert back.data.tobytes() == np.ascontiguousarray(arr).tobytes()


def test_header_layout():
    raw = io.encode_tensor(Tensor(np.zeros((2, 3))))
    assert raw[:4] == b"EMKD"
    assert struct.unpack("<IBB", raw[4:10]) == (1, 1, 2)
    assert struct.unpack("<2I", raw[10:18]) == (2, 3)
    assert len(raw) == 18 + 6 * 8


def test_f32_storage():
    arr = np.array([1.5, -2.25])
    raw = io.encode_tensor(arr, "f32")
    assert raw[8] == 0
    np.testing.assert_array_equal(io.decode_tensor(raw).data, arr)


def test_file_roundtrip(tmp_path):
    arr = np.random.default_rng(0).normal(size=(1, 2, 3, 4))
    io.write_tensor(tmp_path / "t.img", arr)
    assert io.read_tensor(tmp_path / "t.img").data.tobytes() == arr.tobytes()


@pytest.mark.parametrize("cut", [3, 9, 12, 30])
def test_truncated_tensor_names_offset(cut):
    raw = io.encode_tensor(np.ones((2, 2)))
    with pytest.raises(FormatError, match="offset"):
        io.decode_tensor(raw[:cut])


def test_bad_magic():
    raw = b"XXXX" + io.encode_tensor(np.ones(2))[4:]
    with pytest.raises(FormatError, match="magic"):
        io.decode_tensor(raw)


def test_bad_version():
    raw = bytearray(io.encode_tensor(np.ones(2)))
    raw[4] = 9
    with pytest.raises(FormatError, match="version"):
        io.decode_tensor(bytes(raw))


def test_trailing_bytes():
    with pytest.raises(FormatError):
        io.decode_tensor(io.encode_tensor(np.ones(2)) + b"\0")


def test_mask_roundtrip(tmp_path):
    mask = np.random.default_rng(1).integers(0, 3, size=(5, 7))
    io.write_mask(tmp_path / "m.msk", mask, 3)
    back, n = io.read_mask(tmp_path / "m.msk")
    assert n == 3
    np.testing.assert_array_equal(back, mask)
    raw = (tmp_path / "m.msk").read_bytes()
    assert raw[:4] == b"EMKL" and struct.unpack("<IIIB", raw[4:17]) == (1, 5, 7, 3)


def test_mask_id_above_header_classes(tmp_path):
    path = tmp_path / "m.msk"
    io.write_mask(path, np.zeros((2, 2), int), 2)
    raw = bytearray(path.read_bytes())
    raw[-1] = 5
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="offset 20"):
        io.read_mask(path)


def test_truncated_mask(tmp_path):
    path = tmp_path / "m.msk"
    io.write_mask(path, np.zeros((3, 3), int), 2)
    path.write_bytes(path.read_bytes()[:-2])
    with pytest.raises(FormatError, match="truncated"):
        io.read_mask(path)


def test_write_mask_rejects_bad_ids(tmp_path):
    with pytest.raises(ValueError):
        io.write_mask(tmp_path / "m.msk", np.full((2, 2), 2), 2)


def test_model_roundtrip(tmp_path):
    params = {"enc1.conv1.weight": Tensor(np.ones((2, 1, 3, 3))), "héad.bias": Tensor(np.arange(2.0))}
    io.write_model(tmp_path / "m.emkm", params)
    back = io.read_model(tmp_path / "m.emkm")
    assert list(back) == list(params)
    for k in params:
        assert back[k].data.tobytes() == params[k].data.tobytes()


def test_truncated_model(tmp_path):
    io.write_model(tmp_path / "m.emkm", {"w": Tensor(np.ones(4))})
    raw = (tmp_path / "m.emkm").read_bytes()
    (tmp_path / "m.emkm").write_bytes(raw[:-5])
    with pytest.raises(FormatError):
        io.read_model(tmp_path / "m.emkm")
