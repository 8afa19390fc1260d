import numpy as np
import pytest

from lungcrowd.evaluation import GroundTruthNodule
from lungcrowd.mip import RenderConfig, render_segment
from lungcrowd.segmentation import LungMask, Quadrant, QuadrantId
from lungcrowd.volume import CtVolume


def make_volume(shape=(12, 20, 24), fill=-1000, spacing=(1.0, 1.0, 1.0)):
    """shape is (nz, ny, nx)."""
    vox = np.full(shape, fill, dtype=np.int16)
    return CtVolume(voxels=vox, spacing=spacing)


def random_volume(rng, shape=(12, 20, 24), spacing=(1.0, 1.0, 1.0)):
    vox = rng.integers(-1024, 3072, size=shape, dtype=np.int64).astype(np.int16)
    return CtVolume(voxels=vox, spacing=spacing)


def make_quadrant(volume, bits=None, qid=QuadrantId.LEFT_UPPER, pad=0):
    """Quadrant covering the whole volume unless a mask is given."""
    nz, ny, nx = volume.voxels.shape
    if bits is None:
        bits = np.ones((nz, ny, nx), dtype=bool)
    zs, ys, xs = np.nonzero(bits)
    x0 = max(int(xs.min()) - pad, 0)
    y0 = max(int(ys.min()) - pad, 0)
    x1 = min(int(xs.max()) + pad, nx - 1)
    y1 = min(int(ys.max()) + pad, ny - 1)
    return Quadrant(
        quadrant_id=qid,
        mask=LungMask(bits=bits, spacing=volume.spacing, label=qid.value),
        slice_range=(int(zs.min()), int(zs.max())),
        bbox2d=(x0, y0, x1 - x0 + 1, y1 - y0 + 1),
        empty=False,
    )


def render_whole_volume(volume, config=None, segment_id="p001-left_upper",
                        patient_id="p001"):
    quadrant = make_quadrant(volume)
    config = config or RenderConfig()
    return render_segment(volume, quadrant, config,
                          segment_id=segment_id, patient_id=patient_id)


def simple_nodule(nodule_id="n0001", patient_id="p001", z=3,
                  box=(4, 5, 4, 4), diameter=5.0, slices=1,
                  location="non-peripheral", attachment="central"):
    extent = [(z + i, box) for i in range(slices)]
    return GroundTruthNodule(
        nodule_id=nodule_id, patient_id=patient_id, diameter_mm=diameter,
        location=location, attachment=attachment, extent=extent)


@pytest.fixture(scope="session")
def replay_study():
    from lungcrowd.replay import build_replay_study

    return build_replay_study()


@pytest.fixture(scope="session")
def replay_result(replay_study):
    from lungcrowd.replay import run_replay

    store, study = run_replay(replay_study)
    return store, study
