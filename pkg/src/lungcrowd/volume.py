"""CT volume container, its on-disk format, and display windowing.

The file format is deliberately minimal so that any language can parse it
without an imaging library: a short UTF-8 text header terminated by a blank
line, followed by a raw little-endian payload.

    CTVOL 1
    dims <nx> <ny> <nz>
    spacing <sx> <sy> <sz>
    <blank line>
    nx*ny*nz little-endian int16 samples, x-fastest

A companion `MASK 1` variant stores one 0/1 byte per voxel and is used to
export binary masks.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import VolumeFormatError

logger = logging.getLogger(__name__)

HU_MIN = -1024
HU_MAX = 3071

VOLUME_MAGIC = "CTVOL 1"
MASK_MAGIC = "MASK 1"


@dataclass(frozen=True)
class DisplayWindow:
    """Linear HU-to-gray display window (center `level`, full `width`)."""

    level: float
    width: float

    def __post_init__(self):
        if self.width <= 0:
            raise ValueError("display window width must be > 0")


#: Standard lung window used by default for all rendering.
LUNG_WINDOW = DisplayWindow(level=-600.0, width=1500.0)


@dataclass(frozen=True)
class CtVolume:
    """An immutable 3D grid of Hounsfield-unit samples.

    `voxels` is an int16 array indexed ``[z, y, x]`` so that the flattened
    buffer is x-fastest, then y, then z (axial slices stacked along z).
    `spacing` is (sx, sy, sz) in mm per voxel.
    """

    voxels: np.ndarray
    spacing: tuple[float, float, float]

    def __post_init__(self):
        v = self.voxels
        if v.ndim != 3:
            raise ValueError("voxels must be a 3D array")
        if v.dtype != np.int16:
            raise ValueError("voxels must be int16")
        if min(v.shape) < 1:
            raise ValueError("all dims must be >= 1")
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError("spacing components must be > 0")
        if v.size and (v.min() < HU_MIN or v.max() > HU_MAX):
            raise ValueError(f"voxel values must lie in [{HU_MIN}, {HU_MAX}]")
        v.flags.writeable = False

    @property
    def dims(self) -> tuple[int, int, int]:
        """(nx, ny, nz) voxel counts."""
        nz, ny, nx = self.voxels.shape
        return nx, ny, nz

    @property
    def nx(self) -> int:
        return self.voxels.shape[2]

    @property
    def ny(self) -> int:
        return self.voxels.shape[1]

    @property
    def nz(self) -> int:
        return self.voxels.shape[0]

    def axial_slice(self, z: int) -> np.ndarray:
        """The (ny, nx) HU plane at slice index `z`. Pure read."""
        if not 0 <= z < self.nz:
            raise IndexError(f"slice index {z} out of range [0, {self.nz})")
        return self.voxels[z]

    def __eq__(self, other) -> bool:
        if not isinstance(other, CtVolume):
            return NotImplemented
        return self.spacing == other.spacing and np.array_equal(self.voxels, other.voxels)


def window_to_gray(hu, window: DisplayWindow):
    """Map HU samples to 8-bit intensities through a display window.

    intensity = round(255 * clamp((hu - (level - width/2)) / width, 0, 1)),
    rounding half away from zero. Accepts a scalar or an ndarray; returns an
    int for scalar input, a uint8 array otherwise.
    """
    lo = window.level - window.width / 2.0
    x = np.clip(np.asarray(hu, dtype=np.float64) - lo, 0.0, window.width)
    # Multiply before dividing: keeps exact .5 midpoints (e.g. 255*350/1500)
    # representable so the half-away-from-zero rounding is reliable.
    gray = np.floor(255.0 * x / window.width + 0.5)
    if gray.ndim == 0:
        return int(gray)
    return gray.astype(np.uint8)


def _parse_header(f, path: Path) -> tuple[str, tuple[int, int, int], tuple[float, float, float]]:
    lines = []
    while True:
        raw = f.readline()
        if not raw:
            raise VolumeFormatError(f"{path}: unexpected end of file inside header")
        if not raw.endswith(b"\n"):
            raise VolumeFormatError(f"{path}: header line missing newline terminator")
        try:
            line = raw[:-1].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise VolumeFormatError(f"{path}: header is not valid UTF-8") from exc
        if line == "":
            break
        lines.append(line)
        if len(lines) > 3:
            raise VolumeFormatError(f"{path}: unexpected extra header line {line!r}")

    if len(lines) != 3:
        raise VolumeFormatError(f"{path}: header must have exactly 3 lines, got {len(lines)}")
    magic = lines[0]
    if magic not in (VOLUME_MAGIC, MASK_MAGIC):
        raise VolumeFormatError(f"{path}: unknown magic line {magic!r}")

    dims_parts = lines[1].split()
    if len(dims_parts) != 4 or dims_parts[0] != "dims":
        raise VolumeFormatError(f"{path}: malformed dims line {lines[1]!r}")
    try:
        nx, ny, nz = (int(p) for p in dims_parts[1:])
    except ValueError as exc:
        raise VolumeFormatError(f"{path}: non-integer dims in {lines[1]!r}") from exc
    if min(nx, ny, nz) < 1:
        raise VolumeFormatError(f"{path}: dims must be >= 1, got ({nx}, {ny}, {nz})")

    sp_parts = lines[2].split()
    if len(sp_parts) != 4 or sp_parts[0] != "spacing":
        raise VolumeFormatError(f"{path}: malformed spacing line {lines[2]!r}")
    try:
        sx, sy, sz = (float(p) for p in sp_parts[1:])
    except ValueError as exc:
        raise VolumeFormatError(f"{path}: non-numeric spacing in {lines[2]!r}") from exc
    if not all(np.isfinite(s) and s > 0 for s in (sx, sy, sz)):
        raise VolumeFormatError(f"{path}: spacing must be positive, got ({sx}, {sy}, {sz})")

    return magic, (nx, ny, nz), (sx, sy, sz)


def load_volume(path) -> CtVolume:
    """Load a `CTVOL 1` file. Out-of-range HU samples are clamped with a warning."""
    path = Path(path)
    with open(path, "rb") as f:
        magic, (nx, ny, nz), spacing = _parse_header(f, path)
        if magic != VOLUME_MAGIC:
            raise VolumeFormatError(f"{path}: expected {VOLUME_MAGIC!r} file, got {magic!r}")
        payload = f.read()
    expected = nx * ny * nz * 2
    if len(payload) != expected:
        raise VolumeFormatError(
            f"{path}: payload length mismatch (expected {expected} bytes, got {len(payload)})"
        )
    voxels = np.frombuffer(payload, dtype="<i2").reshape(nz, ny, nx)
    n_out = int(np.count_nonzero((voxels < HU_MIN) | (voxels > HU_MAX)))
    if n_out:
        logger.warning("%s: clamped %d voxels outside [%d, %d]", path, n_out, HU_MIN, HU_MAX)
        voxels = np.clip(voxels, HU_MIN, HU_MAX)
    return CtVolume(voxels=np.ascontiguousarray(voxels, dtype=np.int16), spacing=spacing)


def save_volume(volume: CtVolume, path) -> None:
    """Write a `CTVOL 1` file that `load_volume` reproduces bit-exactly."""
    path = Path(path)
    nx, ny, nz = volume.dims
    sx, sy, sz = volume.spacing
    header = f"{VOLUME_MAGIC}\ndims {nx} {ny} {nz}\nspacing {sx!r} {sy!r} {sz!r}\n\n"
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(header.encode("utf-8"))
        f.write(np.ascontiguousarray(volume.voxels, dtype="<i2").tobytes())


def load_mask(path) -> tuple[np.ndarray, tuple[float, float, float]]:
    """Load a `MASK 1` file as (bool array indexed [z, y, x], spacing)."""
    path = Path(path)
    with open(path, "rb") as f:
        magic, (nx, ny, nz), spacing = _parse_header(f, path)
        if magic != MASK_MAGIC:
            raise VolumeFormatError(f"{path}: expected {MASK_MAGIC!r} file, got {magic!r}")
        payload = f.read()
    expected = nx * ny * nz
    if len(payload) != expected:
        raise VolumeFormatError(
            f"{path}: payload length mismatch (expected {expected} bytes, got {len(payload)})"
        )
    raw = np.frombuffer(payload, dtype=np.uint8)
    if raw.size and raw.max() > 1:
        raise VolumeFormatError(f"{path}: mask payload bytes must be 0 or 1")
    return raw.reshape(nz, ny, nx).astype(bool), spacing


def save_mask(bits: np.ndarray, spacing, path) -> None:
    """Write a boolean [z, y, x] array as a `MASK 1` file (0/1 bytes)."""
    path = Path(path)
    if bits.ndim != 3:
        raise ValueError("mask must be a 3D array")
    nz, ny, nx = bits.shape
    sx, sy, sz = (float(s) for s in spacing)
    header = f"{MASK_MAGIC}\ndims {nx} {ny} {nz}\nspacing {sx!r} {sy!r} {sz!r}\n\n"
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(header.encode("utf-8"))
        f.write(bits.astype(np.uint8).tobytes())
