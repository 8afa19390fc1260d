import struct
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lungcrowd.errors import VolumeFormatError
from lungcrowd.volume import (CtVolume, DisplayWindow, LUNG_WINDOW, load_mask,
                              load_volume, save_mask, save_volume, window_to_gray)

from conftest import make_volume, random_volume


def write_raw(path, dims, spacing, payload: bytes, magic="CTVOL 1"):
    nx, ny, nz = dims
    sx, sy, sz = spacing
    header = f"{magic}\ndims {nx} {ny} {nz}\nspacing {sx} {sy} {sz}\n\n"
    path.write_bytes(header.encode("utf-8") + payload)


def window_oracle(hu, level, width):
    """Exact-arithmetic reference for the windowing formula."""
    lo = Fraction(level) - Fraction(width) / 2
    frac = (Fraction(hu) - lo) / Fraction(width)
    frac = min(max(frac, Fraction(0)), Fraction(1))
    # round half away from zero; int() truncates and the value is never negative
    return int(255 * frac + Fraction(1, 2))


class TestLoadVolume:
    def test_smallest_well_formed_file(self, tmp_path):
        payload = struct.pack("<4h", -1000, -1000, 0, 0)
        f = tmp_path / "v.ctvol"
        write_raw(f, (2, 2, 1), (1.0, 1.0, 1.0), payload)
        v = load_volume(f)
        assert v.dims == (2, 2, 1)
        # x-fastest: first two samples fill the y=0 row
        assert v.voxels[0, 0, 0] == -1000
        assert v.voxels[0, 0, 1] == -1000
        assert v.voxels[0, 1, 0] == 0
        assert v.voxels[0, 1, 1] == 0

    def test_payload_length_mismatch(self, tmp_path):
        f = tmp_path / "v.ctvol"
        write_raw(f, (4, 4, 4), (1.0, 1.0, 1.0), b"\x00" * 100)
        with pytest.raises(VolumeFormatError, match="payload length mismatch"):
            load_volume(f)
        with pytest.raises(VolumeFormatError, match="128"):
            load_volume(f)

    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(7)
        v = random_volume(rng, shape=(8, 16, 16), spacing=(0.7, 0.7, 1.25))
        f = tmp_path / "v.ctvol"
        save_volume(v, f)
        v2 = load_volume(f)
        assert v2.spacing == v.spacing
        assert np.array_equal(v2.voxels, v.voxels)
        # header values round-trip exactly through a second save
        f2 = tmp_path / "v2.ctvol"
        save_volume(v2, f2)
        assert f.read_bytes() == f2.read_bytes()

    def test_bad_magic(self, tmp_path):
        f = tmp_path / "v.ctvol"
        write_raw(f, (1, 1, 1), (1, 1, 1), b"\x00\x00", magic="NOTVOL 9")
        with pytest.raises(VolumeFormatError):
            load_volume(f)

    def test_nonpositive_dims(self, tmp_path):
        f = tmp_path / "v.ctvol"
        write_raw(f, (0, 4, 4), (1, 1, 1), b"")
        with pytest.raises(VolumeFormatError, match="dims"):
            load_volume(f)

    def test_nonpositive_spacing(self, tmp_path):
        f = tmp_path / "v.ctvol"
        write_raw(f, (2, 2, 1), (0.0, 1, 1), struct.pack("<4h", 0, 0, 0, 0))
        with pytest.raises(VolumeFormatError, match="spacing"):
            load_volume(f)

    def test_extra_header_field_rejected(self, tmp_path):
        f = tmp_path / "v.ctvol"
        header = "CTVOL 1\ndims 1 1 1\nspacing 1 1 1\nnote hello\n\n"
        f.write_bytes(header.encode() + b"\x00\x00")
        with pytest.raises(VolumeFormatError):
            load_volume(f)

    def test_out_of_range_hu_clamped_with_warning(self, tmp_path, caplog):
        f = tmp_path / "v.ctvol"
        write_raw(f, (2, 1, 1), (1, 1, 1), struct.pack("<2h", 3500, -1024))
        with caplog.at_level("WARNING"):
            v = load_volume(f)
        assert v.voxels[0, 0, 0] == 3071
        assert any("clamped" in r.message for r in caplog.records)


class TestMaskFile:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(3)
        bits = rng.random((4, 6, 5)) > 0.5
        f = tmp_path / "m.ctvol"
        save_mask(bits, (1.0, 1.0, 2.0), f)
        bits2, spacing = load_mask(f)
        assert np.array_equal(bits, bits2)
        assert spacing == (1.0, 1.0, 2.0)

    def test_rejects_non_binary_payload(self, tmp_path):
        f = tmp_path / "m.ctvol"
        write_raw(f, (2, 1, 1), (1, 1, 1), b"\x00\x02", magic="MASK 1")
        with pytest.raises(VolumeFormatError, match="0 or 1"):
            load_mask(f)


class TestWindowToGray:
    def test_lower_clamp_endpoint(self):
        w = DisplayWindow(level=-600, width=1500)
        assert window_to_gray(-600 - 750, w) == 0
        assert window_to_gray(-3000, w) == 0

    def test_upper_clamp_endpoint(self):
        w = DisplayWindow(level=-600, width=1500)
        assert window_to_gray(-600 + 750, w) == 255
        assert window_to_gray(3000, w) == 255

    def test_midpoint_rounds_half_away_from_zero(self):
        # 255 * 0.5 = 127.5 -> 128
        w = DisplayWindow(level=-600, width=1500)
        assert window_oracle(-600, -600, 1500) == 128
        assert window_to_gray(-600, w) == 128

    def test_lung_air_value(self):
        # 255 * ((-1000) - (-1350)) / 1500 = 59.5 -> 60
        assert window_oracle(-1000, -600, 1500) == 60
        assert window_to_gray(-1000, LUNG_WINDOW) == 60

    @given(st.integers(min_value=-1024, max_value=3071))
    def test_matches_exact_oracle(self, hu):
        assert window_to_gray(hu, LUNG_WINDOW) == window_oracle(hu, -600, 1500)

    @given(st.integers(min_value=-1024, max_value=3070))
    def test_monotone_nondecreasing(self, hu):
        assert window_to_gray(hu, LUNG_WINDOW) <= window_to_gray(hu + 1, LUNG_WINDOW)

    @given(st.integers(min_value=-5000, max_value=5000),
           st.integers(min_value=-2000, max_value=2000),
           st.integers(min_value=1, max_value=4000))
    def test_output_in_byte_range(self, hu, level, width):
        g = window_to_gray(hu, DisplayWindow(level=level, width=width))
        assert 0 <= g <= 255

    def test_vectorized_matches_scalar(self):
        rng = np.random.default_rng(5)
        hu = rng.integers(-1024, 3072, size=50)
        arr = window_to_gray(hu, LUNG_WINDOW)
        assert arr.dtype == np.uint8
        for i, sample in enumerate(hu):
            assert arr[i] == window_to_gray(int(sample), LUNG_WINDOW)

    def test_zero_width_rejected(self):
        with pytest.raises(ValueError):
            DisplayWindow(level=0, width=0)


class TestAxialSlice:
    def test_constant_first_plane(self):
        v = make_volume(shape=(3, 4, 5), fill=-1000)
        assert (v.axial_slice(0) == -1000).all()

    def test_index_just_past_end_raises(self):
        v = make_volume(shape=(3, 4, 5))
        with pytest.raises(IndexError):
            v.axial_slice(3)
        with pytest.raises(IndexError):
            v.axial_slice(-1)

    def test_index_arithmetic_oracle(self):
        rng = np.random.default_rng(11)
        v = random_volume(rng, shape=(4, 5, 6))
        flat = v.voxels.ravel()  # x-fastest by construction
        nx, ny, nz = v.dims
        for z in range(nz):
            plane = v.axial_slice(z)
            for y in range(ny):
                for x in range(nx):
                    assert plane[y, x] == flat[x + y * nx + z * nx * ny]


class TestInvariants:
    def test_dims_must_be_positive(self):
        with pytest.raises(ValueError):
            CtVolume(voxels=np.zeros((0, 2, 2), dtype=np.int16), spacing=(1, 1, 1))

    def test_voxel_range_enforced(self):
        bad = np.full((1, 1, 1), 3100, dtype=np.int16)
        with pytest.raises(ValueError):
            CtVolume(voxels=bad, spacing=(1, 1, 1))

    def test_volume_is_immutable(self):
        v = make_volume()
        with pytest.raises(ValueError):
            v.voxels[0, 0, 0] = 5
