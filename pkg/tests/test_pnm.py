import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from latent_denoising.pnm import PnmError, decode_ppm, encode_ppm, read_ppm, write_ppm


@given(arrays(np.uint8, st.tuples(st.integers(1, 12), st.integers(1, 12), st.just(3))))
def test_round_trip(img):
    assert np.array_equal(decode_ppm(encode_ppm(img)), img)


def test_header_layout():
    data = encode_ppm(np.zeros((2, 3, 3), np.uint8))
    assert data.startswith(b"P6\n3 2\n255\n") and len(data) == len(b"P6\n3 2\n255\n") + 18


def test_comments_in_header():
    raster = bytes(range(12))
    img = decode_ppm(b"P6\n# made by hand\n2 2 # size\n255\n" + raster)
    assert img.tobytes() == raster


@pytest.mark.parametrize(
    "data",
    [b"P3\n1 1\n255\n000", b"P6\n1 1\n65535\n000000", b"P6\n2 2\n255\nabc", b"P6\n1", b"P6\nx 1\n255\n000"],
)
def test_rejects_malformed(data):
    with pytest.raises(PnmError):
        decode_ppm(data)


def test_encode_rejects_non_uint8():
    with pytest.raises(PnmError):
        encode_ppm(np.zeros((2, 2, 3)))


def test_file_round_trip(tmp_path):
    img = np.arange(48, dtype=np.uint8).reshape(4, 4, 3)
    data = write_ppm(tmp_path / "a.ppm", img)
    assert (tmp_path / "a.ppm").read_bytes() == data
    assert np.array_equal(read_ppm(tmp_path / "a.ppm"), img)
