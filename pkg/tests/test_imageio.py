import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from freetuner.errors import InvalidArgument
from freetuner.imageio import decode_pnm, encode_ppm, minmax, read_image, read_mask, to_bytes, write_ppm


def test_quantisation_round_half_up():
    px = to_bytes(np.array([[[0.0, 0.5 / 255, 1.5 / 255, 1.0, 2.0, -1.0]]] * 3))
    assert px[0, :, 0].tolist() == [0, 1, 2, 255, 255, 0]


def test_header_layout():
    blob = encode_ppm(np.zeros((3, 2, 5)))
    assert blob.startswith(b"P6\n5 2\n255\n") and len(blob) == 11 + 2 * 5 * 3


@settings(max_examples=25, deadline=None)
@given(hnp.arrays(np.uint8, st.tuples(st.just(3), st.integers(1, 9), st.integers(1, 9))))
def test_roundtrip_exact_on_8bit_values(px):
    img = px.astype(np.float64) / 255.0
    back = decode_pnm(encode_ppm(img))
    assert np.array_equal(np.round(back * 255).astype(np.uint8), px)


def test_comments_and_pgm():
    blob = b"P5\n# a comment\n3 2\n255\n" + bytes([0, 128, 255, 255, 0, 1])
    a = decode_pnm(blob)
    assert a.shape == (2, 3) and a[0, 2] == 1.0 and a[1, 2] == 1 / 255


@pytest.mark.parametrize("blob", [b"P3\n1 1\n255\n0 0 0", b"P6\n2 2\n65535\n" + bytes(24), b"P6\n4 4\n255\n" + bytes(5)])
def test_rejects_unsupported(blob):
    with pytest.raises(InvalidArgument):
        decode_pnm(blob)


def test_files(tmp_path):
    img = np.random.default_rng(0).uniform(size=(3, 8, 8))
    write_ppm(tmp_path / "sub" / "a.ppm", img)
    back = read_image(tmp_path / "sub" / "a.ppm")
    assert np.max(np.abs(back - img)) <= 0.5 / 255 + 1e-12
    m = np.zeros((8, 8))
    m[2:5, 1:3] = 1
    np.save(tmp_path / "m.npy", m)
    assert np.array_equal(read_mask(tmp_path / "m.npy"), m)
    write_ppm(tmp_path / "m.ppm", m)
    assert np.array_equal(read_mask(tmp_path / "m.ppm"), m)


def test_minmax():
    assert np.array_equal(minmax(np.full(4, 3.0)), np.zeros(4))
    assert minmax(np.array([2.0, 4.0, 3.0])).tolist() == [0.0, 1.0, 0.5]
