import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from elder import data, imageio
from elder.errors import FormatError


def test_synthetic_images_in_range_and_reproducible():
    a = data.synthetic_dataset(5, (16, 16), seed=3)
    b = data.synthetic_dataset(5, (16, 16), seed=3)
    assert np.array_equal(a, b)
    assert a.min() >= 0.05 - 1e-12 and a.max() <= 0.95 + 1e-12


def test_subset_regenerates_independently():
    full = data.synthetic_dataset(6, (8, 8), seed=1)
    part = data.synthetic_dataset(2, (8, 8), seed=1, start=4)
    assert np.array_equal(full[4:], part)


def test_empty_dataset():
    assert data.synthetic_dataset(0, (16, 16)).shape == (0, 16, 16)


def test_pgm_round_trip_is_quantized(tmp_path, rng):
    img = rng.random((5, 7))
    imageio.write_pnm(tmp_path / "a.pgm", img)
    back = imageio.read_pnm(tmp_path / "a.pgm")
    assert back.shape == (5, 7)
    assert np.max(np.abs(back - img)) <= 0.5 / 255 + 1e-12


def test_sixteen_bit_pgm(tmp_path, rng):
    img = rng.random((4, 4))
    imageio.write_pnm(tmp_path / "a.pgm", img, maxval=65535)
    assert np.max(np.abs(imageio.read_pnm(tmp_path / "a.pgm") - img)) <= 0.5 / 65535 + 1e-12


def test_ascii_pgm_with_comment(tmp_path):
    (tmp_path / "a.pgm").write_text("P2\n# made by hand\n3 2\n4\n0 1 2\n3 4 4\n")
    np.testing.assert_allclose(imageio.read_pnm(tmp_path / "a.pgm"), [[0, .25, .5], [.75, 1, 1]])


def test_color_ppm_round_trip(tmp_path, rng):
    img = rng.random((3, 4, 3))
    imageio.write_pnm(tmp_path / "a.ppm", img)
    assert imageio.read_pnm(tmp_path / "a.ppm").shape == (3, 4, 3)


def test_truncated_pgm(tmp_path):
    (tmp_path / "a.pgm").write_bytes(b"P5\n4 4\n255\n" + bytes(5))
    with pytest.raises(FormatError):
        imageio.read_pnm(tmp_path / "a.pgm")


def test_unknown_magic(tmp_path):
    (tmp_path / "a.pgm").write_bytes(b"P7\n4 4\n255\n")
    with pytest.raises(FormatError):
        imageio.read_pnm(tmp_path / "a.pgm")


@settings(max_examples=30, deadline=None)
@given(arrays(bool, st.tuples(st.integers(1, 6), st.integers(1, 6))))
def test_rle_mask_round_trip(tmp_path_factory, mask):
    path = tmp_path_factory.mktemp("m") / "mask.txt"
    imageio.write_mask_rle(path, mask)
    assert np.array_equal(imageio.read_mask(path), mask)


def test_rle_known_encoding(tmp_path):
    imageio.write_mask_rle(tmp_path / "m.txt", np.array([[1, 1, 0], [0, 0, 1]], bool))
    assert (tmp_path / "m.txt").read_text() == "RLE 2 3\n0 2 3 1\n"


def test_rle_bad_cover(tmp_path):
    (tmp_path / "m.txt").write_text("RLE 2 2\n1 1\n")
    with pytest.raises(FormatError):
        imageio.read_mask_rle(tmp_path / "m.txt")


def test_pgm_mask(tmp_path):
    imageio.write_pnm(tmp_path / "m.pgm", np.array([[0.0, 1.0], [1.0, 0.0]]))
    assert np.array_equal(imageio.read_mask(tmp_path / "m.pgm"), [[False, True], [True, False]])


def test_kernel_round_trip(tmp_path, rng):
    k = rng.random((3, 5))
    imageio.write_kernel(tmp_path / "k.txt", k)
    assert np.array_equal(imageio.read_kernel(tmp_path / "k.txt"), k)


def test_image_folder_crops_and_skips(tmp_path, rng):
    imageio.write_pnm(tmp_path / "b.pgm", rng.random((20, 18)))
    imageio.write_pnm(tmp_path / "a.pgm", rng.random((8, 8)))
    (tmp_path / "notes.txt").write_text("ignored")
    out = data.load_image_folder(tmp_path, (16, 16))
    assert out.shape == (1, 16, 16)
