import numpy as np
import pytest

from evidx import netpbm
from evidx.errors import FormatError, ParameterError


def test_uniform_half_round_trip_bytes():
    blob = netpbm.encode(np.full((3, 4, 5), 0.5))
    payload = blob[-3 * 4 * 5 :]
    assert set(payload) <= {127, 128}


def test_zero_mask_payload_all_zero():
    blob = netpbm.encode(np.zeros((6, 7)))
    assert blob.startswith(b"P5\n7 6\n255\n")
    assert blob[-42:] == bytes(42)


def test_header_parses_width_height():
    blob = b"P6 64 64 255\n" + bytes(64 * 64 * 3)
    assert netpbm.decode(blob).shape == (3, 64, 64)


def test_header_comments_are_skipped():
    blob = b"P5\n# made by hand\n2 1\n# max\n255\n\x00\xff"
    np.testing.assert_array_equal(netpbm.decode(blob), [[0.0, 1.0]])


@pytest.mark.parametrize("shape", [(5, 3), (3, 4, 2)])
def test_round_trip_error_bounded(tmp_path, shape):
    values = np.random.default_rng(0).random(shape)
    path = tmp_path / "img.pnm"
    if len(shape) == 2:
        netpbm.write_pgm(path, values)
        back = netpbm.read_pgm(path)
    else:
        netpbm.write_ppm(path, values)
        back = netpbm.read_ppm(path)
    assert np.abs(back - values).max() <= 1 / 255 + 1e-12


def test_eight_bit_levels_round_trip_exactly():
    values = np.arange(256).reshape(16, 16) / 255
    assert np.array_equal(netpbm.decode(netpbm.encode(values)), values)


def test_comment_round_trip():
    blob = netpbm.encode(np.ones((2, 2)), "seed=5")
    assert b"# seed=5\n" in blob
    np.testing.assert_array_equal(netpbm.decode(blob), np.ones((2, 2)))


def test_multiline_comment_rejected():
    with pytest.raises(ParameterError):
        netpbm.encode(np.ones((2, 2)), "a\nb")


def test_truncated_payload_reports_offset():
    blob = netpbm.encode(np.zeros((4, 4)))[:-3]
    with pytest.raises(FormatError, match=r"byte offset 24.*expected 16 bytes, found 13"):
        netpbm.decode(blob)


def test_bad_magic_reports_offset():
    with pytest.raises(FormatError, match="offset 0"):
        netpbm.decode(b"P3\n1 1\n255\n\x00")


def test_truncated_header():
    with pytest.raises(FormatError, match="truncated header"):
        netpbm.decode(b"P5\n4 ")


def test_sixteen_bit_rejected():
    with pytest.raises(FormatError, match="8-bit"):
        netpbm.decode(b"P5\n1 1\n65535\n\x00\x00")


def test_out_of_range_values_rejected():
    with pytest.raises(ParameterError):
        netpbm.encode(np.full((2, 2), 1.5))


def test_kind_mismatch_on_read(tmp_path):
    path = tmp_path / "m.pgm"
    netpbm.write_pgm(path, np.zeros((2, 2)))
    with pytest.raises(FormatError, match="P6"):
        netpbm.read_ppm(path)
