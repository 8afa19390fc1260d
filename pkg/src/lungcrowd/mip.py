"""Overlapping thin-slab MIP rendering of lung quadrants.

Each quadrant becomes an ordered frame sequence: keyframes are per-pixel
maxima over a slab of consecutive slices (restricted to the quadrant mask,
everything else black), with linearly interpolated frames in between. The
frame index -> slab mapping stays exactly invertible so crowd annotations
in video time can be mapped back to CT slices.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import RenderError
from .segmentation import Quadrant
from .volume import CtVolume, DisplayWindow, LUNG_WINDOW, load_mask, save_mask, window_to_gray

logger = logging.getLogger(__name__)

MASK_FILE_NAME = "mask.ctvol"
MANIFEST_NAME = "segment.json"
PNG_COMPRESS_LEVEL = 6  # fixed for byte-identical re-export


@dataclass(frozen=True)
class RenderConfig:
    slab_thickness: int = 5
    slab_stride: int = 1
    interp_frames: int = 2
    fps: float = 3.0
    window: DisplayWindow = LUNG_WINDOW

    def __post_init__(self):
        if self.slab_thickness < 1:
            raise ValueError("slab_thickness must be >= 1")
        if self.slab_stride < 1:
            raise ValueError("slab_stride must be >= 1")
        if self.interp_frames < 0:
            raise ValueError("interp_frames must be >= 0")
        if self.fps <= 0:
            raise ValueError("fps must be > 0")

    def to_dict(self) -> dict:
        return {
            "slab_thickness": self.slab_thickness,
            "slab_stride": self.slab_stride,
            "interp_frames": self.interp_frames,
            "fps": self.fps,
            "window": {"level": self.window.level, "width": self.window.width},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RenderConfig":
        return cls(
            slab_thickness=d["slab_thickness"],
            slab_stride=d["slab_stride"],
            interp_frames=d["interp_frames"],
            fps=d["fps"],
            window=DisplayWindow(d["window"]["level"], d["window"]["width"]),
        )


@dataclass
class Frame:
    """One 8-bit grayscale video frame.

    A keyframe has `fraction` None and shows slab `slab_index`; an
    interpolated frame blends slabs `slab_index` and `slab_index + 1` at the
    given fraction in (0, 1).
    """

    pixels: np.ndarray
    slab_index: int
    fraction: float | None = None

    @property
    def is_keyframe(self) -> bool:
        return self.fraction is None

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def kind_dict(self) -> dict:
        if self.is_keyframe:
            return {"kind": "keyframe", "slab_index": self.slab_index}
        return {"kind": "interpolated", "slab_index": self.slab_index,
                "fraction": self.fraction}


@dataclass
class VideoSegment:
    """A rendered quadrant video plus the metadata needed to invert it."""

    segment_id: str
    patient_id: str
    quadrant_id: str
    config: RenderConfig
    frames: list[Frame]
    slab_table: list[tuple[int, int]]
    slice_range: tuple[int, int]
    bbox2d: tuple[int, int, int, int]
    spacing: tuple[float, float, float]
    mask_planes: list[np.ndarray] = field(default_factory=list)  # per keyframe, bool
    mask_crop: np.ndarray | None = None  # quadrant mask cropped to bbox/slice range
    thin: bool = False
    marker: dict | None = None

    @property
    def frame_count(self) -> int:
        return len(self.frames)

    @property
    def fps(self) -> float:
        return self.config.fps

    @property
    def frame_size(self) -> tuple[int, int]:
        return self.frames[0].width, self.frames[0].height

    @property
    def frame_kinds(self) -> list[dict]:
        return [f.kind_dict() for f in self.frames]

    def manifest(self) -> dict:
        m = {
            "segment_id": self.segment_id,
            "patient_id": self.patient_id,
            "quadrant_id": self.quadrant_id,
            "config": self.config.to_dict(),
            "fps": self.config.fps,
            "quadrant": {
                "slice_range": list(self.slice_range),
                "bbox": list(self.bbox2d),
            },
            "spacing": list(self.spacing),
            "thin": self.thin,
            "frame_count": self.frame_count,
            "slab_table": [list(s) for s in self.slab_table],
            "frames": [dict(f.kind_dict(), file=f"f{i:05d}.png")
                       for i, f in enumerate(self.frames)],
            "in_mask_pixel_counts": [int(p.sum()) for p in self.mask_planes],
            "mask_file": MASK_FILE_NAME,
        }
        if self.marker is not None:
            m["marker"] = self.marker
        return m


def slab_mip(volume: CtVolume, quadrant: Quadrant, z_start: int,
             config: RenderConfig) -> Frame:
    """Render one keyframe: per-pixel max HU over the slab, mask-restricted.

    Pixels whose slab column contains no quadrant-mask voxel render black.
    """
    frame, _ = _slab_mip_with_coverage(volume, quadrant, z_start,
                                       z_start + config.slab_thickness - 1, config, 0)
    return frame


def _slab_mip_with_coverage(volume: CtVolume, quadrant: Quadrant, z_start: int,
                            z_end: int, config: RenderConfig,
                            slab_index: int) -> tuple[Frame, np.ndarray]:
    z0, z1 = quadrant.slice_range
    if z_start < z0 or z_end > z1:
        raise RenderError(
            f"slab [{z_start}, {z_end}] outside quadrant slice range [{z0}, {z1}]")
    x0, y0, w, h = quadrant.bbox2d
    sub = volume.voxels[z_start:z_end + 1, y0:y0 + h, x0:x0 + w].astype(np.int32)
    msk = quadrant.mask.bits[z_start:z_end + 1, y0:y0 + h, x0:x0 + w]
    lowest = np.int32(-(10 ** 6))
    mx = np.where(msk, sub, lowest).max(axis=0)
    covered = msk.any(axis=0)
    gray = window_to_gray(mx, config.window)
    gray[~covered] = 0
    return Frame(pixels=gray, slab_index=slab_index), covered


def interpolate(a: Frame, b: Frame, t: float) -> Frame:
    """Per-pixel linear blend of two frames, rounding half away from zero.

    t=0 reproduces `a` exactly and t=1 reproduces `b` exactly.
    """
    if a.pixels.shape != b.pixels.shape:
        raise ValueError("frame dimension mismatch")
    if not 0.0 <= t <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    if t == 0.0:
        return Frame(pixels=a.pixels.copy(), slab_index=a.slab_index, fraction=a.fraction)
    if t == 1.0:
        return Frame(pixels=b.pixels.copy(), slab_index=b.slab_index, fraction=b.fraction)
    blend = a.pixels.astype(np.float64) * (1.0 - t) + b.pixels.astype(np.float64) * t
    pixels = np.floor(blend + 0.5).astype(np.uint8)
    return Frame(pixels=pixels, slab_index=a.slab_index, fraction=t)


def render_segment(volume: CtVolume, quadrant: Quadrant, config: RenderConfig,
                   segment_id: str, patient_id: str) -> VideoSegment:
    """Render a quadrant as keyframes plus interpolated in-between frames.

    Keyframe slabs start at z0 and advance by `slab_stride` while the slab
    fits inside the quadrant's slice range. A quadrant thinner than one slab
    yields a single-keyframe segment flagged `thin`.
    """
    if quadrant.empty:
        raise RenderError(f"quadrant {quadrant.quadrant_id} is empty")
    z0, z1 = quadrant.slice_range
    n_slices = z1 - z0 + 1
    thin = n_slices < config.slab_thickness

    slab_table: list[tuple[int, int]] = []
    if thin:
        slab_table.append((z0, z1))
    else:
        z = z0
        while z + config.slab_thickness - 1 <= z1:
            slab_table.append((z, z + config.slab_thickness - 1))
            z += config.slab_stride

    keyframes = []
    mask_planes = []
    for k, (za, zb) in enumerate(slab_table):
        frame, covered = _slab_mip_with_coverage(volume, quadrant, za, zb, config, k)
        keyframes.append(frame)
        mask_planes.append(covered)

    frames: list[Frame] = []
    n_interp = 0 if thin else config.interp_frames
    for k, kf in enumerate(keyframes):
        frames.append(kf)
        if k + 1 < len(keyframes):
            nxt = keyframes[k + 1]
            for i in range(1, n_interp + 1):
                t = i / (n_interp + 1)
                blended = interpolate(kf, nxt, t)
                frames.append(Frame(pixels=blended.pixels, slab_index=k, fraction=t))

    x0, y0, w, h = quadrant.bbox2d
    mask_crop = quadrant.mask.bits[z0:z1 + 1, y0:y0 + h, x0:x0 + w].copy()
    return VideoSegment(
        segment_id=segment_id,
        patient_id=patient_id,
        quadrant_id=quadrant.quadrant_id.value,
        config=config,
        frames=frames,
        slab_table=slab_table,
        slice_range=(z0, z1),
        bbox2d=quadrant.bbox2d,
        spacing=quadrant.mask.spacing,
        mask_planes=mask_planes,
        mask_crop=mask_crop,
        thin=thin,
    )


def frame_to_slab_index(seg, frame_index: int) -> int:
    """The slab a frame shows: keyframes their own, interpolated frames the
    nearer keyframe's (fraction 0.5 ties to the later slab)."""
    kinds = seg.frame_kinds
    if not 0 <= frame_index < len(kinds):
        raise IndexError(f"frame index {frame_index} out of range [0, {len(kinds)})")
    kind = kinds[frame_index]
    if kind["kind"] == "keyframe":
        return kind["slab_index"]
    if kind["fraction"] < 0.5:
        return kind["slab_index"]
    return kind["slab_index"] + 1


def frame_to_slab(seg, frame_index: int) -> tuple[int, int]:
    """Inclusive slice range [z_start, z_end] backing a frame."""
    slab = seg.slab_table[frame_to_slab_index(seg, frame_index)]
    return (slab[0], slab[1])


def _write_png(pixels: np.ndarray, path: Path) -> None:
    img = Image.fromarray(pixels, mode="L")
    img.save(path, format="PNG", optimize=False, compress_level=PNG_COMPRESS_LEVEL)


def export_frames(seg: VideoSegment, out_dir) -> Path:
    """Write one grayscale PNG per frame plus the segment.json manifest.

    The manifest is the single source of truth for playback and matching.
    Returns the manifest path. Re-export is byte-identical.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(seg.frames):
        _write_png(frame.pixels, out_dir / f"f{i:05d}.png")
    if seg.mask_crop is not None:
        save_mask(seg.mask_crop, seg.spacing, out_dir / MASK_FILE_NAME)
    manifest_path = out_dir / MANIFEST_NAME
    manifest_path.write_text(
        json.dumps(seg.manifest(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest_path


class SegmentRecord:
    """Read-side view of an exported segment directory.

    Exposes the same mapping surface as VideoSegment (frame_kinds,
    slab_table, bbox, marker, ...) from the manifest alone; pixels and the
    cropped quadrant mask load lazily on demand.
    """

    def __init__(self, directory, manifest: dict | None = None):
        self.directory = Path(directory) if directory is not None else None
        if manifest is None:
            manifest = json.loads((self.directory / MANIFEST_NAME).read_text(encoding="utf-8"))
        self.man = manifest
        self._mask_crop = None

    @property
    def segment_id(self) -> str:
        return self.man["segment_id"]

    @property
    def patient_id(self) -> str:
        return self.man["patient_id"]

    @property
    def quadrant_id(self) -> str:
        return self.man["quadrant_id"]

    @property
    def fps(self) -> float:
        return self.man["fps"]

    @property
    def frame_count(self) -> int:
        return self.man["frame_count"]

    @property
    def frame_kinds(self) -> list[dict]:
        return self.man["frames"]

    @property
    def slab_table(self) -> list[tuple[int, int]]:
        return [tuple(s) for s in self.man["slab_table"]]

    @property
    def slice_range(self) -> tuple[int, int]:
        return tuple(self.man["quadrant"]["slice_range"])

    @property
    def bbox2d(self) -> tuple[int, int, int, int]:
        return tuple(self.man["quadrant"]["bbox"])

    @property
    def frame_size(self) -> tuple[int, int]:
        x0, y0, w, h = self.bbox2d
        return w, h

    @property
    def marker(self) -> dict | None:
        return self.man.get("marker")

    @property
    def mask_crop(self) -> np.ndarray | None:
        if self._mask_crop is None and self.directory is not None:
            mask_file = self.man.get("mask_file")
            if mask_file and (self.directory / mask_file).exists():
                self._mask_crop, _ = load_mask(self.directory / mask_file)
        return self._mask_crop

    def coverage_plane(self, slab_index: int) -> np.ndarray | None:
        """In-mask pixel plane of one slab, from the exported mask crop."""
        crop = self.mask_crop
        if crop is None:
            return None
        za, zb = self.slab_table[slab_index]
        z0 = self.slice_range[0]
        return crop[za - z0:zb - z0 + 1].any(axis=0)

    def frame_pixels(self, frame_index: int) -> np.ndarray:
        path = self.directory / self.man["frames"][frame_index]["file"]
        return np.asarray(Image.open(path).convert("L"), dtype=np.uint8)

    def public_manifest(self) -> dict:
        """Manifest as served to workers: the QC marker record is withheld."""
        pub = {k: v for k, v in self.man.items() if k != "marker"}
        return pub


def load_segments(root_dir) -> dict[str, SegmentRecord]:
    """Load every exported segment under a directory, keyed by segment id."""
    root = Path(root_dir)
    records = {}
    for manifest in sorted(root.glob(f"*/{MANIFEST_NAME}")):
        rec = SegmentRecord(manifest.parent)
        records[rec.segment_id] = rec
    return records
