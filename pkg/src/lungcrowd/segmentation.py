"""Lung extraction, left/right separation, boundary smoothing, quadrant split.

The stage turns a CT volume into four disjoint quadrant masks (left/right
lung x superior/inferior half) whose union is the smoothed combined lung
mask. Connectivity conventions are fixed so independent oracles can agree:
26-connectivity for 3D components, 8-connectivity for 2D hole fill.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy import ndimage

from .errors import SegmentationError
from .volume import CtVolume

logger = logging.getLogger(__name__)

STRUCT_3D = np.ones((3, 3, 3), dtype=bool)  # 26-connectivity
STRUCT_2D = np.ones((3, 3), dtype=bool)  # 8-connectivity

DEFAULT_SEED_HU = -500.0
DEFAULT_MIN_COMPONENT_FRACTION = 0.01
DEFAULT_CLOSING_RADIUS_MM = 8.0
QUADRANT_BBOX_PAD = 8


class QuadrantId(str, Enum):
    LEFT_UPPER = "left_upper"
    LEFT_LOWER = "left_lower"
    RIGHT_UPPER = "right_upper"
    RIGHT_LOWER = "right_lower"


@dataclass
class LungMask:
    """Binary voxel mask over a source volume's grid, indexed [z, y, x].

    `label` names what the mask covers: "combined", "left", or "right".
    Left/right follow image space (left = smaller x), which is the patient's
    anatomical right; the naming is kept in image space throughout.
    """

    bits: np.ndarray
    spacing: tuple[float, float, float]
    label: str = "combined"

    def __post_init__(self):
        if self.bits.ndim != 3 or self.bits.dtype != bool:
            raise ValueError("mask bits must be a 3D bool array")

    @property
    def count(self) -> int:
        return int(self.bits.sum())

    @property
    def is_empty(self) -> bool:
        return not self.bits.any()


@dataclass
class Quadrant:
    """One of the four per-patient lung sub-regions rendered as a video.

    `slice_range` is the inclusive occupied axial range [z0, z1]; `bbox2d`
    is (x0, y0, w, h), the tight in-plane bounding rectangle of the mask
    padded by QUADRANT_BBOX_PAD voxels and clipped to image bounds.
    """

    quadrant_id: QuadrantId
    mask: LungMask
    slice_range: tuple[int, int]
    bbox2d: tuple[int, int, int, int]
    empty: bool = False


def optimal_threshold(volume: CtVolume, t0: float = DEFAULT_SEED_HU,
                      tol: float = 0.5, max_iter: int = 64) -> float:
    """Two-population iterative threshold between air and body voxels.

    Iterates t <- (mean(voxels <= t) + mean(voxels > t)) / 2 from t0 until
    the update is smaller than `tol` HU or `max_iter` iterations. The result
    depends only on the voxel histogram.
    """
    vox = volume.voxels
    vmin = int(vox.min())
    vmax = int(vox.max())
    if vmin == vmax:
        raise SegmentationError("degenerate histogram: all voxels equal")

    # Exact prefix sums over the integer HU histogram make each iteration O(1).
    counts = np.bincount((vox.ravel().astype(np.int64) - vmin), minlength=vmax - vmin + 1)
    values = np.arange(vmin, vmax + 1, dtype=np.float64)
    cum_n = np.cumsum(counts)
    cum_v = np.cumsum(counts * values)
    total_n = cum_n[-1]
    total_v = cum_v[-1]

    # Any t in [vmin, vmax) keeps both populations non-empty.
    t = float(min(max(t0, vmin), vmax - 1))
    for _ in range(max_iter):
        k = int(np.floor(t)) - vmin
        mean_low = cum_v[k] / cum_n[k]
        mean_high = (total_v - cum_v[k]) / (total_n - cum_n[k])
        t_next = (mean_low + mean_high) / 2.0
        done = abs(t_next - t) < tol
        t = t_next
        if done:
            break
    return t


def _fill_holes_per_slice(mask: np.ndarray, forbidden: np.ndarray) -> np.ndarray:
    """Fill enclosed 2D background regions slice by slice (8-connectivity).

    Regions containing any `forbidden` voxel (boundary-connected air) are
    left open so filling never re-admits background air.
    """
    out = mask.copy()
    for z in range(mask.shape[0]):
        m = out[z]
        bg_labels, n_bg = ndimage.label(~m, structure=STRUCT_2D)
        if n_bg == 0:
            continue
        border_ids = np.unique(np.concatenate([
            bg_labels[0, :], bg_labels[-1, :], bg_labels[:, 0], bg_labels[:, -1]]))
        forbidden_ids = np.unique(bg_labels[forbidden[z]])
        fill = np.ones(n_bg + 1, dtype=bool)
        fill[0] = False
        fill[border_ids[border_ids > 0]] = False
        fill[forbidden_ids[forbidden_ids > 0]] = False
        if fill.any():
            out[z] = m | fill[bg_labels]
    return out


def extract_lungs(volume: CtVolume, threshold: float,
                  min_component_fraction: float = DEFAULT_MIN_COMPONENT_FRACTION) -> LungMask:
    """Extract the combined lung mask at a given HU threshold.

    Voxels <= threshold are candidate air; background air (any low-density
    3D component touching an x/y boundary face) is discarded; remaining
    components at or above the size floor are kept and their interior
    cavities filled per slice.
    """
    air = volume.voxels <= threshold
    labels, n = ndimage.label(air, structure=STRUCT_3D)
    if n == 0:
        raise SegmentationError("no lung found: no voxels at or below threshold")

    border_ids = np.unique(np.concatenate([
        labels[:, 0, :].ravel(), labels[:, -1, :].ravel(),
        labels[:, :, 0].ravel(), labels[:, :, -1].ravel()]))
    background_air = np.isin(labels, border_ids[border_ids > 0])

    sizes = np.bincount(labels.ravel(), minlength=n + 1)
    floor = min_component_fraction * volume.voxels.size
    keep = np.zeros(n + 1, dtype=bool)
    for comp in range(1, n + 1):
        keep[comp] = sizes[comp] >= floor and comp not in border_ids
    if not keep.any():
        raise SegmentationError("no lung found: no interior component above size floor")

    mask = keep[labels]
    mask = _fill_holes_per_slice(mask, forbidden=background_air)
    return LungMask(bits=mask, spacing=volume.spacing, label="combined")


def separate_lungs(mask: LungMask) -> tuple[LungMask, LungMask]:
    """Split a combined mask into (left, right) by component centroid, or by
    the thinnest sagittal junction when the lungs are fused into one piece.

    Left/right are image-space: left = smaller x.
    """
    if mask.is_empty:
        raise SegmentationError("empty mask: nothing to separate")
    bits = mask.bits
    labels, n = ndimage.label(bits, structure=STRUCT_3D)

    if n >= 2:
        global_cx = float(np.nonzero(bits)[2].mean())
        centroids = ndimage.center_of_mass(bits, labels, index=range(1, n + 1))
        left = np.zeros_like(bits)
        right = np.zeros_like(bits)
        for comp, (_, _, cx) in enumerate(centroids, start=1):
            side = left if cx < global_cx else right
            side |= labels == comp
    else:
        per_x = bits.sum(axis=(0, 1))
        occupied = np.nonzero(per_x)[0]
        xmin, xmax = int(occupied[0]), int(occupied[-1])
        width = xmax - xmin + 1
        lo = xmin + width // 3
        hi = xmax - width // 3
        candidates = np.arange(lo, hi + 1)
        counts = per_x[candidates]
        best = counts.min()
        ties = candidates[counts == best]
        center = (xmin + xmax) / 2.0
        cut = int(ties[np.argmin(np.abs(ties - center))])
        xs = np.arange(bits.shape[2])
        left = bits & (xs <= cut)[None, None, :]
        right = bits & (xs > cut)[None, None, :]

    return (LungMask(bits=left, spacing=mask.spacing, label="left"),
            LungMask(bits=right, spacing=mask.spacing, label="right"))


def _ball_structure(radius_mm: float, spacing) -> np.ndarray:
    """Discrete ball of a physical radius, anisotropic in voxel units."""
    sx, sy, sz = spacing
    rx = int(radius_mm / sx)
    ry = int(radius_mm / sy)
    rz = int(radius_mm / sz)
    zz, yy, xx = np.mgrid[-rz:rz + 1, -ry:ry + 1, -rx:rx + 1]
    return (xx * sx) ** 2 + (yy * sy) ** 2 + (zz * sz) ** 2 <= radius_mm ** 2


def smooth_boundaries(mask: LungMask, radius_mm: float = DEFAULT_CLOSING_RADIUS_MM) -> LungMask:
    """Morphological closing with a ball of the given physical radius.

    Fills boundary notches (re-including juxtapleural nodules carved out by
    thresholding). Radius 0 is the identity; the result is always a superset
    of the input.
    """
    if radius_mm < 0:
        raise ValueError("closing radius must be >= 0")
    structure = _ball_structure(radius_mm, mask.spacing)
    if structure.size == 1:
        return LungMask(bits=mask.bits.copy(), spacing=mask.spacing, label=mask.label)
    pad = tuple((s // 2, s // 2) for s in structure.shape)
    padded = np.pad(mask.bits, pad, mode="constant", constant_values=False)
    closed = ndimage.binary_erosion(
        ndimage.binary_dilation(padded, structure=structure), structure=structure)
    sl = tuple(slice(p[0], closed.shape[i] - p[1]) for i, p in enumerate(pad))
    return LungMask(bits=closed[sl], spacing=mask.spacing, label=mask.label)


def _empty_quadrant(qid: QuadrantId, spacing, shape) -> Quadrant:
    return Quadrant(
        quadrant_id=qid,
        mask=LungMask(bits=np.zeros(shape, dtype=bool), spacing=spacing, label=qid.value),
        slice_range=(0, -1),
        bbox2d=(0, 0, 0, 0),
        empty=True,
    )


def _quadrant_from_bits(qid: QuadrantId, bits: np.ndarray, spacing, pad: int) -> Quadrant:
    if not bits.any():
        return _empty_quadrant(qid, spacing, bits.shape)
    nz, ny, nx = bits.shape
    zs, ys, xs = np.nonzero(bits)
    x0 = max(int(xs.min()) - pad, 0)
    y0 = max(int(ys.min()) - pad, 0)
    x1 = min(int(xs.max()) + pad, nx - 1)
    y1 = min(int(ys.max()) + pad, ny - 1)
    return Quadrant(
        quadrant_id=qid,
        mask=LungMask(bits=bits, spacing=spacing, label=qid.value),
        slice_range=(int(zs.min()), int(zs.max())),
        bbox2d=(x0, y0, x1 - x0 + 1, y1 - y0 + 1),
        empty=False,
    )


_QUADRANT_IDS = {
    ("left", "upper"): QuadrantId.LEFT_UPPER,
    ("left", "lower"): QuadrantId.LEFT_LOWER,
    ("right", "upper"): QuadrantId.RIGHT_UPPER,
    ("right", "lower"): QuadrantId.RIGHT_LOWER,
}


def make_quadrants(left: LungMask, right: LungMask,
                   pad: int = QUADRANT_BBOX_PAD, split_axis: str = "axial") -> list[Quadrant]:
    """Split each lung into superior/inferior halves at its median occupied
    slice and return the four quadrants (order: LU, LL, RU, RL).

    The split plane is per lung, so left and right cuts may differ. Slices
    strictly below the median voxel coordinate form the UPPER half; the rest
    form LOWER. An empty side yields zero-extent quadrants flagged `empty`.
    `split_axis="coronal"` splits along y instead (anterior/posterior halves).
    """
    if (left.bits & right.bits).any():
        raise ValueError("left and right masks must be disjoint")
    try:
        axis = {"axial": 0, "coronal": 1}[split_axis]
    except KeyError:
        raise ValueError(f"unknown split axis {split_axis!r}") from None

    quadrants = []
    for side, lung in (("left", left), ("right", right)):
        if lung.is_empty:
            for half in ("upper", "lower"):
                quadrants.append(_empty_quadrant(_QUADRANT_IDS[(side, half)],
                                                 lung.spacing, lung.bits.shape))
            continue
        coords = np.nonzero(lung.bits)[axis]
        median = float(np.median(coords))
        idx = np.arange(lung.bits.shape[axis])
        shape = [1, 1, 1]
        shape[axis] = -1
        for half, sel in (("upper", idx < median), ("lower", idx >= median)):
            bits = lung.bits & sel.reshape(shape)
            quadrants.append(_quadrant_from_bits(_QUADRANT_IDS[(side, half)],
                                                 bits, lung.spacing, pad))
    return quadrants


def segment_volume(volume: CtVolume, threshold: float | None = None,
                   closing_radius_mm: float = DEFAULT_CLOSING_RADIUS_MM,
                   min_component_fraction: float = DEFAULT_MIN_COMPONENT_FRACTION,
                   split_axis: str = "axial") -> tuple[list[Quadrant], LungMask]:
    """Full segmentation pipeline: threshold, extract, smooth, separate, split.

    Returns (quadrants, smoothed combined mask). The union of the quadrant
    masks equals the smoothed combined mask exactly.
    """
    t = optimal_threshold(volume) if threshold is None else threshold
    combined = extract_lungs(volume, t, min_component_fraction=min_component_fraction)
    smoothed = smooth_boundaries(combined, radius_mm=closing_radius_mm)
    left, right = separate_lungs(smoothed)
    quadrants = make_quadrants(left, right, split_axis=split_axis)
    return quadrants, smoothed
