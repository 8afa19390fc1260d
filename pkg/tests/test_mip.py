import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lungcrowd.errors import RenderError
from lungcrowd.mip import (Frame, RenderConfig, SegmentRecord, export_frames,
                           frame_to_slab, frame_to_slab_index, interpolate,
                           load_segments, render_segment, slab_mip)
from lungcrowd.volume import DisplayWindow, LUNG_WINDOW, window_to_gray

from conftest import make_quadrant, make_volume, random_volume, render_whole_volume


def brute_force_slab_max(volume, quadrant, z_start, z_end):
    """Triple-loop masked slab maximum, independent of the numpy path."""
    x0, y0, w, h = quadrant.bbox2d
    bits = quadrant.mask.bits
    vox = volume.voxels
    out = np.full((h, w), None, dtype=object)
    for yy in range(h):
        for xx in range(w):
            best = None
            for z in range(z_start, z_end + 1):
                if bits[z, y0 + yy, x0 + xx]:
                    hu = int(vox[z, y0 + yy, x0 + xx])
                    if best is None or hu > best:
                        best = hu
            out[yy, xx] = best
    return out


class TestSlabMip:
    def test_constant_in_mask_value(self):
        # every in-mask voxel -1000 HU with the default lung window -> 60
        v = make_volume(shape=(6, 10, 12), fill=-1000)
        rng = np.random.default_rng(3)
        bits = rng.random((6, 10, 12)) > 0.4
        bits[0, 0, 0] = True
        q = make_quadrant(v, bits=bits)
        cfg = RenderConfig()
        frame = slab_mip(v, q, q.slice_range[0], cfg)
        covered = bits[q.slice_range[0]:q.slice_range[0] + 5].any(axis=0)
        x0, y0, w, h = q.bbox2d
        covered = covered[y0:y0 + h, x0:x0 + w]
        expected_gray = window_to_gray(-1000, LUNG_WINDOW)
        assert expected_gray == 60
        assert (frame.pixels[covered] == expected_gray).all()
        assert (frame.pixels[~covered] == 0).all()

    def test_single_bright_voxel_dominates(self):
        v_arr = np.full((6, 8, 8), -1000, dtype=np.int16)
        v_arr[2, 3, 4] = 200
        from conftest import CtVolume
        v = CtVolume(voxels=v_arr, spacing=(1.0, 1.0, 1.0))
        q = make_quadrant(v)
        frame = slab_mip(v, q, 0, RenderConfig())
        assert frame.pixels[3, 4] == window_to_gray(200, LUNG_WINDOW)
        assert frame.pixels[3, 5] == window_to_gray(-1000, LUNG_WINDOW)

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(7)
        v = random_volume(rng, shape=(8, 10, 12))
        bits = rng.random((8, 10, 12)) > 0.5
        bits[4, 5, 6] = True
        q = make_quadrant(v, bits=bits)
        cfg = RenderConfig(slab_thickness=3)
        z0 = q.slice_range[0]
        frame = slab_mip(v, q, z0, cfg)
        oracle = brute_force_slab_max(v, q, z0, z0 + 2)
        for yy in range(frame.height):
            for xx in range(frame.width):
                if oracle[yy, xx] is None:
                    assert frame.pixels[yy, xx] == 0
                else:
                    assert frame.pixels[yy, xx] == window_to_gray(oracle[yy, xx], cfg.window)

    def test_slab_outside_range_rejected(self):
        v = make_volume(shape=(6, 8, 8))
        q = make_quadrant(v)
        with pytest.raises(RenderError, match="outside quadrant"):
            slab_mip(v, q, 4, RenderConfig(slab_thickness=5))

    def test_monotone_in_voxel_brightness(self):
        rng = np.random.default_rng(11)
        arr = rng.integers(-1024, 500, size=(6, 8, 8)).astype(np.int16)
        from conftest import CtVolume
        v1 = CtVolume(voxels=arr.copy(), spacing=(1, 1, 1))
        brighter = arr.copy()
        brighter[2, 4, 4] = 900
        v2 = CtVolume(voxels=brighter, spacing=(1, 1, 1))
        q1, q2 = make_quadrant(v1), make_quadrant(v2)
        f1 = slab_mip(v1, q1, 0, RenderConfig())
        f2 = slab_mip(v2, q2, 0, RenderConfig())
        assert (f2.pixels.astype(int) >= f1.pixels.astype(int)).all()


class TestInterpolate:
    def _frame(self, value, shape=(4, 6)):
        return Frame(pixels=np.full(shape, value, dtype=np.uint8), slab_index=0)

    def test_endpoint_zero_is_a(self):
        a, b = self._frame(10), self._frame(20)
        assert np.array_equal(interpolate(a, b, 0.0).pixels, a.pixels)

    def test_endpoint_one_is_b(self):
        a, b = self._frame(10), self._frame(20)
        assert np.array_equal(interpolate(a, b, 1.0).pixels, b.pixels)

    def test_midpoint_of_constants(self):
        a, b = self._frame(10), self._frame(20)
        assert (interpolate(a, b, 0.5).pixels == 15).all()

    def test_rounds_half_away_from_zero(self):
        a, b = self._frame(10), self._frame(11)
        assert (interpolate(a, b, 0.5).pixels == 11).all()  # 10.5 -> 11

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="dimension"):
            interpolate(self._frame(0), self._frame(0, shape=(5, 6)), 0.5)

    @given(st.integers(0, 255), st.integers(0, 255),
           st.floats(0.0, 1.0, allow_nan=False))
    @settings(max_examples=50)
    def test_blend_within_endpoint_range(self, va, vb, t):
        out = interpolate(self._frame(va), self._frame(vb), t).pixels
        lo, hi = min(va, vb), max(va, vb)
        assert (out >= lo).all() and (out <= hi).all()


class TestRenderSegment:
    def test_reference_layout_16_frames(self):
        v = make_volume(shape=(10, 8, 8))
        q = make_quadrant(v)
        cfg = RenderConfig(slab_thickness=5, slab_stride=1, interp_frames=2)
        seg = render_segment(v, q, cfg, "p001-left_upper", "p001")
        assert len(seg.slab_table) == 6
        assert seg.frame_count == 16  # 6 + 5*2
        assert seg.slab_table == [(i, i + 4) for i in range(6)]
        assert not seg.thin

    def test_minimal_fit_single_keyframe(self):
        v = make_volume(shape=(5, 8, 8))
        q = make_quadrant(v)
        seg = render_segment(v, q, RenderConfig(), "s", "p")
        assert seg.frame_count == 1
        assert seg.slab_table == [(0, 4)]

    def test_thin_quadrant_flagged(self):
        v = make_volume(shape=(3, 8, 8))
        q = make_quadrant(v)
        seg = render_segment(v, q, RenderConfig(slab_thickness=5), "s", "p")
        assert seg.thin
        assert seg.frame_count == 1
        assert seg.slab_table == [(0, 2)]

    def test_no_interpolation(self):
        v = make_volume(shape=(10, 8, 8))
        q = make_quadrant(v)
        seg = render_segment(v, q, RenderConfig(interp_frames=0), "s", "p")
        assert seg.frame_count == len(seg.slab_table) == 6

    @given(st.integers(1, 6), st.integers(1, 4), st.integers(0, 3),
           st.integers(1, 24))
    @settings(max_examples=60, deadline=None)
    def test_frame_count_formula(self, thickness, stride, interp, n_slices):
        v = make_volume(shape=(n_slices, 6, 6))
        q = make_quadrant(v)
        cfg = RenderConfig(slab_thickness=thickness, slab_stride=stride,
                           interp_frames=interp)
        seg = render_segment(v, q, cfg, "s", "p")
        k = len(seg.slab_table)
        if n_slices < thickness:
            assert seg.thin and seg.frame_count == 1
        else:
            assert k == (n_slices - thickness) // stride + 1
            assert seg.frame_count == k + (k - 1) * interp
        # consecutive slabs advance by exactly the stride
        for (a0, _), (b0, _) in zip(seg.slab_table, seg.slab_table[1:]):
            assert b0 - a0 == stride

    def test_empty_quadrant_rejected(self):
        v = make_volume(shape=(10, 8, 8))
        q = make_quadrant(v)
        q.empty = True
        with pytest.raises(RenderError, match="empty"):
            render_segment(v, q, RenderConfig(), "s", "p")


class TestFrameToSlab:
    def _segment(self):
        v = make_volume(shape=(10, 8, 8))
        return render_whole_volume(v)

    def test_first_frame_first_slab(self):
        seg = self._segment()
        assert frame_to_slab(seg, 0) == (0, 4)

    def test_interpolated_frames_split_at_half(self):
        seg = self._segment()
        # layout: K0 i i K1 ...; frame 1 has fraction 1/3, frame 2 has 2/3
        assert frame_to_slab(seg, 1) == (0, 4)
        assert frame_to_slab(seg, 2) == (1, 5)

    def test_half_fraction_ties_to_later(self):
        v = make_volume(shape=(10, 8, 8))
        seg = render_whole_volume(v, RenderConfig(interp_frames=1))
        # single interpolated frame at fraction 1/2
        assert seg.frames[1].fraction == 0.5
        assert frame_to_slab(seg, 1) == seg.slab_table[1]

    def test_last_frame_last_slab(self):
        seg = self._segment()
        assert frame_to_slab(seg, seg.frame_count - 1) == seg.slab_table[-1]

    def test_total_and_onto(self):
        seg = self._segment()
        hit = set()
        for i in range(seg.frame_count):
            idx = frame_to_slab_index(seg, i)
            assert 0 <= idx < len(seg.slab_table)
            hit.add(idx)
        assert hit == set(range(len(seg.slab_table)))

    def test_out_of_range(self):
        seg = self._segment()
        with pytest.raises(IndexError):
            frame_to_slab(seg, seg.frame_count)


class TestExportFrames:
    def test_file_count_and_manifest(self, tmp_path):
        rng = np.random.default_rng(13)
        v = random_volume(rng, shape=(10, 8, 8))
        seg = render_whole_volume(v)
        export_frames(seg, tmp_path / "seg")
        pngs = sorted((tmp_path / "seg").glob("f*.png"))
        assert len(pngs) == 16
        manifest = json.loads((tmp_path / "seg" / "segment.json").read_text())
        assert manifest["frame_count"] == 16
        assert len(manifest["frames"]) == 16
        assert manifest["segment_id"] == "p001-left_upper"
        assert len(manifest["in_mask_pixel_counts"]) == len(manifest["slab_table"])

    def test_re_export_byte_identical(self, tmp_path):
        rng = np.random.default_rng(17)
        v = random_volume(rng, shape=(8, 8, 8))
        seg = render_whole_volume(v)
        export_frames(seg, tmp_path / "a")
        export_frames(seg, tmp_path / "b")
        for pa in sorted((tmp_path / "a").iterdir()):
            pb = tmp_path / "b" / pa.name
            assert pa.read_bytes() == pb.read_bytes(), pa.name

    def test_manifest_round_trip(self, tmp_path):
        rng = np.random.default_rng(19)
        v = random_volume(rng, shape=(8, 8, 8))
        seg = render_whole_volume(v)
        export_frames(seg, tmp_path / "seg")
        manifest = json.loads((tmp_path / "seg" / "segment.json").read_text())
        assert json.loads(json.dumps(manifest)) == manifest
        assert manifest == seg.manifest()

    def test_segment_record_reads_back_pixels_and_mask(self, tmp_path):
        rng = np.random.default_rng(23)
        v = random_volume(rng, shape=(8, 8, 8))
        seg = render_whole_volume(v)
        export_frames(seg, tmp_path / "seg")
        rec = SegmentRecord(tmp_path / "seg")
        assert rec.frame_count == seg.frame_count
        assert np.array_equal(rec.frame_pixels(0), seg.frames[0].pixels)
        assert np.array_equal(rec.mask_crop, seg.mask_crop)
        for k in range(len(seg.slab_table)):
            assert np.array_equal(rec.coverage_plane(k), seg.mask_planes[k])

    def test_load_segments_index(self, tmp_path):
        rng = np.random.default_rng(29)
        v = random_volume(rng, shape=(8, 8, 8))
        seg = render_whole_volume(v)
        export_frames(seg, tmp_path / seg.segment_id)
        records = load_segments(tmp_path)
        assert list(records) == [seg.segment_id]
