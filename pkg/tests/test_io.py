import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from isac import io


class TestTensor:
    def test_header_layout(self):
        data = io.encode_tensor(np.arange(6, dtype=np.float32).reshape(2, 3))
        assert data[:8] == b"ISACTNSR"
        assert struct.unpack_from("<III", data, 8) == (2, 2, 3)
        assert np.frombuffer(data[20:], "<f4").tolist() == [0, 1, 2, 3, 4, 5]

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float32, st.lists(st.integers(1, 4), min_size=1, max_size=4).map(tuple),
                  elements=st.floats(-1e3, 1e3, width=32)))
    def test_roundtrip(self, arr):
        assert np.array_equal(io.decode_tensor(io.encode_tensor(arr)), arr)

    def test_bad_magic_and_size(self):
        with pytest.raises(ValueError):
            io.decode_tensor(b"NOTATNSR" + bytes(8))
        data = io.encode_tensor(np.zeros(3))
        with pytest.raises(ValueError):
            io.decode_tensor(data[:-1])

    def test_file_roundtrip(self, tmp_path):
        arr = np.random.default_rng(0).random((3, 5))
        io.write_tensor(tmp_path / "x.isac", arr)
        assert np.allclose(io.read_tensor(tmp_path / "x.isac"), arr, atol=1e-7)


class TestPPM:
    def test_header(self):
        assert io.encode_ppm(np.zeros((2, 3, 3))).startswith(b"P6\n3 2\n255\n")

    def test_roundtrip_quantized(self):
        img = np.random.default_rng(1).integers(0, 256, (5, 7, 3)) / 255.0
        assert np.array_equal(io.decode_ppm(io.encode_ppm(img)), img)

    def test_clipping(self):
        out = io.decode_ppm(io.encode_ppm(np.full((1, 1, 3), 2.0)))
        assert out.max() == 1.0

    def test_bad_shape(self):
        with pytest.raises(ValueError):
            io.encode_ppm(np.zeros((2, 2)))


class TestFiles:
    def test_atomic_write_leaves_no_temp(self, tmp_path):
        io.atomic_write(tmp_path / "sub" / "a.txt", b"one")
        io.atomic_write(tmp_path / "sub" / "a.txt", b"two")
        assert (tmp_path / "sub" / "a.txt").read_bytes() == b"two"
        assert [p.name for p in (tmp_path / "sub").iterdir()] == ["a.txt"]

    def test_config_hash_key_order(self):
        assert io.config_hash({"a": 1, "b": 2}) == io.config_hash({"b": 2, "a": 1})
        assert io.config_hash({"a": 1}) != io.config_hash({"a": 2})

    def test_rows_csv_format(self):
        text = io.rows_csv([{"x": 0.5, "y": "k"}], ("x", "y")).decode()
        assert text == "x,y\n0.500000,k\n"
