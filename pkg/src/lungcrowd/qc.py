"""Quality-control sprite injection.

Every video segment gets exactly one small sprite composited at a seeded
random position that (a) never overlaps any ground-truth box shown in those
frames and (b) sits mostly over visible lung so it cannot hide in the black
margin. Annotating the sprite is the workers' paid-attention proof; its
location lives only in the server-side manifest.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import MarkerPlacementError
from .mip import VideoSegment, frame_to_slab_index

logger = logging.getLogger(__name__)

DEFAULT_SPRITE_SIZE = 32
DEFAULT_SPAN_SECONDS = 2.0
IN_MASK_MIN_FRACTION = 0.25
MAX_PLACEMENT_ATTEMPTS = 10_000


@dataclass(frozen=True)
class QcMarker:
    sprite_id: str
    frame_span: tuple[int, int]  # inclusive
    box: tuple[int, int, int, int]  # x, y, w, h in frame coordinates
    seed: int

    def to_dict(self) -> dict:
        return {
            "sprite_id": self.sprite_id,
            "frame_span": list(self.frame_span),
            "box": list(self.box),
            "seed": self.seed,
        }


def default_sprite(size: int = DEFAULT_SPRITE_SIZE) -> np.ndarray:
    """Built-in RGBA sprite: a dark ape-like silhouette with a light outline."""
    n = size
    yy, xx = np.mgrid[0:n, 0:n]
    u = (xx + 0.5) / n
    v = (yy + 0.5) / n
    head = ((u - 0.5) ** 2 + (v - 0.24) ** 2) <= 0.13 ** 2
    ears = (((u - 0.36) ** 2 + (v - 0.20) ** 2) <= 0.06 ** 2) | \
           (((u - 0.64) ** 2 + (v - 0.20) ** 2) <= 0.06 ** 2)
    body = (((u - 0.5) / 0.24) ** 2 + ((v - 0.60) / 0.26) ** 2) <= 1.0
    arm_l = (((u - 0.26) / 0.08) ** 2 + ((v - 0.60) / 0.22) ** 2) <= 1.0
    arm_r = (((u - 0.74) / 0.08) ** 2 + ((v - 0.60) / 0.22) ** 2) <= 1.0
    legs = (((u - 0.40) / 0.08) ** 2 + ((v - 0.88) / 0.10) ** 2 <= 1.0) | \
           (((u - 0.60) / 0.08) ** 2 + ((v - 0.88) / 0.10) ** 2 <= 1.0)
    silhouette = head | ears | body | arm_l | arm_r | legs

    sprite = np.zeros((n, n, 4), dtype=np.uint8)
    sprite[..., 3] = np.where(silhouette, 255, 0)
    sprite[silhouette, 0:3] = 30
    face = ((u - 0.5) ** 2 + (v - 0.27) ** 2) <= 0.07 ** 2
    sprite[face & silhouette, 0:3] = 120
    return sprite


def load_sprite(path) -> np.ndarray:
    """Load an RGBA sprite image."""
    img = Image.open(path).convert("RGBA")
    return np.asarray(img, dtype=np.uint8)


def scale_sprite(sprite: np.ndarray, size: int) -> np.ndarray:
    """Nearest-neighbour rescale to size x size (deterministic)."""
    if sprite.shape[0] == size and sprite.shape[1] == size:
        return sprite
    img = Image.fromarray(sprite, mode="RGBA")
    return np.asarray(img.resize((size, size), resample=Image.NEAREST), dtype=np.uint8)


def sprite_id(sprite: np.ndarray) -> str:
    return "sprite-" + hashlib.sha256(sprite.tobytes()).hexdigest()[:12]


def _rects_intersect(a, b) -> bool:
    """Exact integer rectangle intersection (non-zero area)."""
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    return (min(ax + aw, bx + bw) - max(ax, bx) > 0
            and min(ay + ah, by + bh) - max(ay, by) > 0)


def _gt_boxes_by_slab(seg, gt_nodules) -> list[list[tuple[int, int, int, int]]]:
    """Per slab: every ground-truth extent box visible in it, frame coords."""
    bx0, by0, _, _ = seg.bbox2d
    per_slab = []
    for za, zb in seg.slab_table:
        boxes = []
        for n in gt_nodules:
            if n.patient_id != seg.patient_id:
                continue
            for z, (x, y, w, h) in n.extent:
                if za <= z <= zb:
                    boxes.append((x - bx0, y - by0, w, h))
        per_slab.append(boxes)
    return per_slab


def _coverage_planes(seg) -> list[np.ndarray]:
    if isinstance(seg, VideoSegment) and seg.mask_planes:
        return seg.mask_planes
    planes = []
    for k in range(len(seg.slab_table)):
        plane = seg.coverage_plane(k)
        if plane is None:
            raise MarkerPlacementError(
                f"{seg.segment_id}: no mask data available for placement")
        planes.append(plane)
    return planes


def place_marker(seg, gt_nodules, sprite: np.ndarray, seed: int,
                 span_seconds: float = DEFAULT_SPAN_SECONDS,
                 in_mask_min: float = IN_MASK_MIN_FRACTION,
                 max_attempts: int = MAX_PLACEMENT_ATTEMPTS) -> QcMarker:
    """Rejection-sample a marker placement. Deterministic per seed.

    The sprite box must have zero pixel overlap with every ground-truth box
    shown on every frame of the span, and at least `in_mask_min` of its area
    over in-mask pixels on each of those frames. The span covers
    `span_seconds` of playback (clamped to the segment length).
    """
    h, w = sprite.shape[0], sprite.shape[1]
    fw, fh = seg.frame_size
    if w >= fw or h >= fh:
        raise MarkerPlacementError(
            f"sprite {w}x{h} does not fit inside {fw}x{fh} frames")
    n_frames = seg.frame_count
    span_len = min(n_frames, max(1, round(span_seconds * seg.fps)))

    gt_by_slab = _gt_boxes_by_slab(seg, gt_nodules)
    coverage = _coverage_planes(seg)
    slab_of_frame = [frame_to_slab_index(seg, i) for i in range(n_frames)]
    # Integral images make the in-mask area check O(1) per attempt.
    integrals = [np.pad(p.cumsum(axis=0).cumsum(axis=1), ((1, 0), (1, 0)))
                 for p in coverage]
    min_pixels = in_mask_min * w * h

    rng = np.random.default_rng(seed)
    for _ in range(max_attempts):
        f0 = int(rng.integers(0, n_frames - span_len + 1))
        x = int(rng.integers(0, fw - w + 1))
        y = int(rng.integers(0, fh - h + 1))
        box = (x, y, w, h)
        ok = True
        for f in range(f0, f0 + span_len):
            k = slab_of_frame[f]
            if any(_rects_intersect(box, b) for b in gt_by_slab[k]):
                ok = False
                break
            ii = integrals[k]
            inside = ii[y + h, x + w] - ii[y, x + w] - ii[y + h, x] + ii[y, x]
            if inside < min_pixels:
                ok = False
                break
        if ok:
            return QcMarker(sprite_id=sprite_id(sprite),
                            frame_span=(f0, f0 + span_len - 1),
                            box=box, seed=seed)
    raise MarkerPlacementError(
        f"{seg.segment_id}: cannot place marker after {max_attempts} attempts")


def composite_marker(seg: VideoSegment, marker: QcMarker,
                     sprite: np.ndarray) -> VideoSegment:
    """Alpha-blend the sprite onto the span's frames; record the marker.

    Pixels outside the sprite box or span are bit-identical to the input.
    """
    x, y, w, h = marker.box
    fw, fh = seg.frame_size
    f0, f1 = marker.frame_span
    if not (0 <= f0 <= f1 < seg.frame_count):
        raise ValueError(f"marker span {marker.frame_span} out of range")
    if x < 0 or y < 0 or x + w > fw or y + h > fh:
        raise ValueError(f"marker box {marker.box} out of frame bounds")
    if sprite.shape[0] != h or sprite.shape[1] != w:
        raise ValueError("sprite dimensions do not match marker box")

    rgb = sprite[..., 0:3].astype(np.float64)
    gray = np.floor(0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2] + 0.5)
    alpha = sprite[..., 3].astype(np.float64) / 255.0

    frames = list(seg.frames)
    for f in range(f0, f1 + 1):
        frame = frames[f]
        pixels = frame.pixels.copy()
        patch = pixels[y:y + h, x:x + w].astype(np.float64)
        blended = np.floor(alpha * gray + (1.0 - alpha) * patch + 0.5)
        pixels[y:y + h, x:x + w] = blended.astype(np.uint8)
        frames[f] = type(frame)(pixels=pixels, slab_index=frame.slab_index,
                                fraction=frame.fraction)

    out = VideoSegment(
        segment_id=seg.segment_id,
        patient_id=seg.patient_id,
        quadrant_id=seg.quadrant_id,
        config=seg.config,
        frames=frames,
        slab_table=list(seg.slab_table),
        slice_range=seg.slice_range,
        bbox2d=seg.bbox2d,
        spacing=seg.spacing,
        mask_planes=list(seg.mask_planes),
        mask_crop=seg.mask_crop,
        thin=seg.thin,
        marker=marker.to_dict(),
    )
    return out
