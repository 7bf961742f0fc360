import numpy as np
import pytest

from fedleak.pgm import read_pgm, to_uint8, write_pgm


def test_round_trip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (7, 5), dtype=np.uint8)
    write_pgm(tmp_path / "a.pgm", img)
    assert np.array_equal(read_pgm(tmp_path / "a.pgm"), img)
    assert (tmp_path / "a.pgm").read_bytes().startswith(b"P5\n5 7\n255\n")


def test_float_images_are_scaled(tmp_path):
    write_pgm(tmp_path / "f.pgm", np.array([[0.0, 0.5, 1.0, 2.0]]))
    assert read_pgm(tmp_path / "f.pgm").tolist() == [[0, 128, 255, 255]]
    assert to_uint8(np.array([-0.2, 1 / 255])).tolist() == [0, 1]


def test_header_comments(tmp_path):
    p = tmp_path / "c.pgm"
    p.write_bytes(b"P5 # made elsewhere\n2 # width\n1\n255\n\x07\xff")
    assert read_pgm(p).tolist() == [[7, 255]]


def test_errors_name_the_file(tmp_path):
    p = tmp_path / "bad.pgm"
    p.write_bytes(b"P2\n1 1\n255\n0")
    with pytest.raises(ValueError, match="bad.pgm"):
        read_pgm(p)
    p.write_bytes(b"P5\n4 4\n255\n\x00")
    with pytest.raises(ValueError, match="truncated"):
        read_pgm(p)
    p.write_bytes(b"P5\n1 1\n65535\n\x00\x00")
    with pytest.raises(ValueError, match="maxval"):
        read_pgm(p)
    with pytest.raises(OSError, match="missing.pgm"):
        read_pgm(tmp_path / "missing.pgm")
    with pytest.raises(ValueError):
        write_pgm(tmp_path / "x.pgm", np.zeros(3))
