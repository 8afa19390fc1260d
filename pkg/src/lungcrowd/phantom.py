"""Procedural thorax phantoms for desk-scale testing.

A phantom is a soft-tissue body on an air background with two ellipsoidal
air-density lungs, an optional thin junction bridge fusing them, and bright
spherical nodules embedded in the lungs. Truth masks and a ground-truth
nodule list come along for free, so segmentation and end-to-end runs can be
scored exactly.

Location/attachment labels are synthetic: location is geometric (distance
from the lung surface); attachment is dealt deterministically so stratified
tables have data in every row.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .evaluation import ATTACHMENTS, GroundTruthNodule
from .volume import CtVolume, HU_MIN

logger = logging.getLogger(__name__)

BACKGROUND_HU = -1000
BODY_HU = 20
LUNG_HU = -880
NODULE_HU = 60

PERIPHERAL_RADIUS_FRACTION = 0.7  # normalized ellipsoid radius beyond which a nodule is peripheral


@dataclass
class ThoraxPhantom:
    patient_id: str
    volume: CtVolume
    left_lung: np.ndarray  # truth masks, bool [z, y, x]
    right_lung: np.ndarray
    nodules: list[GroundTruthNodule]
    bridged: bool


def _ellipsoid(shape, center, radii) -> np.ndarray:
    nz, ny, nx = shape
    cz, cy, cx = center
    rz, ry, rx = radii
    zz, yy, xx = np.mgrid[0:nz, 0:ny, 0:nx]
    return (((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 + ((zz - cz) / rz) ** 2) <= 1.0


def _sphere_extent(center, radius, shape) -> list[tuple[int, tuple[int, int, int, int]]]:
    """Per-slice bounding boxes of a voxel sphere, clipped to the volume."""
    cz, cy, cx = center
    nz, ny, nx = shape
    extent = []
    for z in range(max(0, int(np.floor(cz - radius))), min(nz - 1, int(np.ceil(cz + radius))) + 1):
        dz = z - cz
        if abs(dz) > radius:
            continue
        r_slice = np.sqrt(max(radius ** 2 - dz ** 2, 0.0))
        x0 = max(int(np.floor(cx - r_slice)), 0)
        x1 = min(int(np.ceil(cx + r_slice)), nx - 1)
        y0 = max(int(np.floor(cy - r_slice)), 0)
        y1 = min(int(np.ceil(cy + r_slice)), ny - 1)
        if x1 >= x0 and y1 >= y0:
            extent.append((z, (x0, y0, x1 - x0 + 1, y1 - y0 + 1)))
    return extent


def generate_phantom(patient_id: str, seed: int, shape=(48, 72, 112),
                     spacing=(1.0, 1.0, 1.0), bridged: bool | None = None,
                     n_nodules: int | None = None, noise_sigma: float = 12.0) -> ThoraxPhantom:
    """Build one thorax phantom. `shape` is (nz, ny, nx).

    The default geometry keeps the two lungs more than two closing radii
    apart (so 8 mm boundary smoothing cannot fuse them across the
    mediastinum) and leaves a body wall of several voxels around each lung.
    """
    rng = np.random.default_rng(seed)
    nz, ny, nx = shape
    if bridged is None:
        bridged = bool(rng.integers(0, 2))

    # Body spans the full axial range like a trunk section.
    body = _ellipsoid(shape, (nz / 2, ny / 2, nx / 2), (4 * nz, ny * 0.42, nx * 0.46))

    lung_rz = nz * 0.32
    lung_ry = ny * 0.22
    lung_rx = nx * 0.16
    cz, cy = nz / 2, ny / 2
    left_cx = nx / 2 - nx * 0.26
    right_cx = nx / 2 + nx * 0.26
    left = _ellipsoid(shape, (cz, cy, left_cx), (lung_rz, lung_ry, lung_rx))
    right = _ellipsoid(shape, (cz, cy, right_cx), (lung_rz, lung_ry, lung_rx))

    air = left | right
    if bridged:
        zz, yy, xx = np.mgrid[0:nz, 0:ny, 0:nx]
        bridge = ((np.abs(yy - cy) <= 2) & (np.abs(zz - cz) <= 2)
                  & (xx > left_cx) & (xx < right_cx))
        air |= bridge & body

    hu = np.full(shape, float(BACKGROUND_HU))
    hu[body] = BODY_HU
    hu[air] = LUNG_HU

    if n_nodules is None:
        n_nodules = int(rng.integers(2, 9))
    nodules: list[GroundTruthNodule] = []
    placed_centers: list[tuple[float, float, float, float]] = []
    attempt = 0
    lungs = ((left, left_cx), (right, right_cx))
    while len(nodules) < n_nodules and attempt < 400:
        attempt += 1
        lung_bits, lung_cx = lungs[int(rng.integers(0, 2))]
        radius_mm = float(rng.uniform(1.2, 6.5))
        radius_vox = radius_mm / spacing[0]
        # Position inside the ellipsoid at a random normalized radius.
        u = rng.uniform(0.0, 0.92)
        theta = rng.uniform(0, 2 * np.pi)
        phi = rng.uniform(0, np.pi)
        ncz = cz + u * lung_rz * np.cos(phi)
        ncy = cy + u * lung_ry * np.sin(phi) * np.sin(theta)
        ncx = lung_cx + u * lung_rx * np.sin(phi) * np.cos(theta)
        if not (0 <= int(ncz) < nz and 0 <= int(ncy) < ny and 0 <= int(ncx) < nx):
            continue
        if not lung_bits[int(ncz), int(ncy), int(ncx)]:
            continue
        too_close = any(
            (ncz - pz) ** 2 + (ncy - py) ** 2 + (ncx - px) ** 2 < (radius_vox + pr + 3) ** 2
            for pz, py, px, pr in placed_centers)
        if too_close:
            continue
        zz, yy, xx = np.mgrid[0:nz, 0:ny, 0:nx]
        sphere = ((xx - ncx) ** 2 + (yy - ncy) ** 2 + (zz - ncz) ** 2) <= radius_vox ** 2
        sphere &= lung_bits
        if not sphere.any():
            continue
        hu[sphere] = NODULE_HU
        placed_centers.append((ncz, ncy, ncx, radius_vox))
        location = "peripheral" if u > PERIPHERAL_RADIUS_FRACTION else "non-peripheral"
        attachment = ATTACHMENTS[len(nodules) % len(ATTACHMENTS)]
        extent = _sphere_extent((ncz, ncy, ncx), radius_vox, shape)
        if not extent:
            continue
        nodules.append(GroundTruthNodule(
            nodule_id=f"{patient_id}-n{len(nodules):03d}",
            patient_id=patient_id,
            diameter_mm=2 * radius_mm * spacing[0],
            location=location,
            attachment=attachment,
            extent=extent,
        ))

    noise = rng.normal(0.0, noise_sigma, size=shape)
    samples = np.clip(np.rint(hu + noise), HU_MIN, 3071).astype(np.int16)
    volume = CtVolume(voxels=samples, spacing=spacing)

    return ThoraxPhantom(
        patient_id=patient_id,
        volume=volume,
        left_lung=left,
        right_lung=right,
        nodules=nodules,
        bridged=bridged,
    )


def generate_study(n_patients: int, seed: int, **kwargs) -> list[ThoraxPhantom]:
    """A deterministic batch of phantoms, patient ids p001..pNNN."""
    rng = np.random.default_rng(seed)
    phantoms = []
    for i in range(n_patients):
        phantoms.append(generate_phantom(
            patient_id=f"p{i + 1:03d}",
            seed=int(rng.integers(0, 2 ** 63 - 1)),
            **kwargs,
        ))
    return phantoms


def dice(a: np.ndarray, b: np.ndarray) -> float:
    """Dice coefficient between two boolean masks."""
    inter = np.logical_and(a, b).sum()
    denom = a.sum() + b.sum()
    if denom == 0:
        return 1.0
    return 2.0 * inter / denom
