"""Tests for the PPM/PGM codec."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from exemplar_synth.errors import IoError, ShapeError
from exemplar_synth.netpbm import read_gray, read_pgm, read_pnm, read_ppm, write_gray, write_pgm, write_ppm


class TestNetpbm:
    """Test reading and writing binary netpbm files."""

    @pytest.mark.fast
    def test_ppm_quantised_values_survive(self, tmp_path):
        """Test that 8-bit values are written and read back exactly."""
        rgb = np.random.default_rng(0).integers(0, 256, size=(5, 7, 3)) / 255.0
        write_ppm(tmp_path / "a.ppm", rgb)
        np.testing.assert_array_equal(read_ppm(tmp_path / "a.ppm"), rgb)

    @pytest.mark.fast
    def test_header_comments_skipped(self, tmp_path):
        """Test a header with comments between tokens."""
        path = tmp_path / "c.pgm"
        path.write_bytes(b"P5\n# made by hand\n2 1\n# levels\n255\n\x07\xff")
        grid, maxval = read_pgm(path)
        assert maxval == 255
        np.testing.assert_array_equal(grid, [[7, 255]])

    @pytest.mark.fast
    def test_sixteen_bit_is_big_endian(self, tmp_path):
        """Test 16-bit sample byte order."""
        path = tmp_path / "g.pgm"
        write_pgm(path, np.array([[258]]), 65535)
        assert path.read_bytes().endswith(b"\x01\x02")
        grid, maxval = read_pgm(path)
        assert (grid[0, 0], maxval) == (258, 65535)

    @pytest.mark.fast
    def test_gray_precision(self, tmp_path):
        """Test the 16-bit float grid helpers."""
        gray = np.linspace(0.0, 1.0, 12).reshape(3, 4)
        write_gray(tmp_path / "g.pgm", gray)
        np.testing.assert_allclose(read_gray(tmp_path / "g.pgm"), gray, atol=0.5 / 65535)

    @pytest.mark.fast
    def test_truncated_raster(self, tmp_path):
        """Test that a short raster raises IoError naming the file."""
        path = tmp_path / "t.ppm"
        write_ppm(path, np.zeros((4, 4, 3)))
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(IoError, match="t.ppm"):
            read_pnm(path)

    @pytest.mark.fast
    def test_wrong_kind(self, tmp_path):
        """Test reading a PGM as PPM and a bad magic."""
        write_pgm(tmp_path / "a.pgm", np.zeros((2, 2), dtype=int), 5)
        with pytest.raises(IoError):
            read_ppm(tmp_path / "a.pgm")
        (tmp_path / "b.pgm").write_bytes(b"P2\n1 1\n255\n0")
        with pytest.raises(IoError):
            read_pgm(tmp_path / "b.pgm")

    @pytest.mark.fast
    def test_out_of_range_samples_rejected(self, tmp_path):
        """Test the PGM writer range check."""
        with pytest.raises(ShapeError):
            write_pgm(tmp_path / "x.pgm", np.array([[6]]), 5)

    @pytest.mark.fast
    @settings(max_examples=25, deadline=None)
    @given(
        grid=arrays(np.int64, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=st.integers(0, 9)),
    )
    def test_label_grids_round_trip(self, tmp_path_factory, grid):
        """Test that small-maxval label maps read back unchanged."""
        path = tmp_path_factory.mktemp("labels") / "l.pgm"
        write_pgm(path, grid, 9)
        read, maxval = read_pgm(path)
        assert maxval == 9
        np.testing.assert_array_equal(read, grid)
