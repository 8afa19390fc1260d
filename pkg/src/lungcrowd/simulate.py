"""Synthetic worker behaviour for desk-scale end-to-end runs.

Three profiles: `ideal` workers annotate the QC marker and every nodule
exactly; `spammer` workers draw random boxes and are guaranteed to fail QC;
`calibrated` workers hit each nodule with a per-size-bin probability, with
jittered boxes and a Poisson number of stray false boxes. Everything is
seeded and deterministic.

This module also owns the forward projector (volume box -> video frame
box) whose inverse is evaluation.map_annotation.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import SimulationError
from .evaluation import GroundTruthNodule, SIZE_BINS
from .service import TaskStore

logger = logging.getLogger(__name__)

DEFAULT_FP_RATE = 0.06  # stray false boxes per video
DEFAULT_JITTER_PX = 2.0

WORKER_KINDS = ("ideal", "spammer", "calibrated")


@dataclass
class WorkerProfile:
    kind: str
    p_detect: dict[str, float] = field(default_factory=dict)  # size bin -> probability
    fp_rate: float = DEFAULT_FP_RATE
    jitter_px: float = DEFAULT_JITTER_PX
    seed: int = 0

    def __post_init__(self):
        if self.kind not in WORKER_KINDS:
            raise ValueError(f"unknown worker kind {self.kind!r}")
        for b, p in self.p_detect.items():
            if b not in SIZE_BINS:
                raise ValueError(f"unknown size bin {b!r}")
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"p_detect[{b}] must lie in [0, 1]")
        if self.fp_rate < 0:
            raise ValueError("fp_rate must be >= 0")
        if self.jitter_px < 0:
            raise ValueError("jitter_px must be >= 0")


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from arbitrary parts (order matters)."""
    digest = hashlib.sha256("|".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def _nodule_in_segment(seg, nodule: GroundTruthNodule) -> bool:
    if nodule.patient_id != seg.patient_id:
        return False
    z0, z1 = seg.slice_range
    bx, by, bw, bh = seg.bbox2d
    in_range = [e for e in nodule.extent if z0 <= e[0] <= z1]
    if not in_range:
        return False
    for _, (x, y, w, h) in in_range:
        if x < bx or y < by or x + w > bx + bw or y + h > by + bh:
            return False
    return True


def segment_nodules(seg, gt: list[GroundTruthNodule]) -> list[GroundTruthNodule]:
    """Ground-truth nodules visible in a segment's quadrant."""
    return [n for n in gt if _nodule_in_segment(seg, n)]


def project_nodule(seg, nodule: GroundTruthNodule) -> list[tuple[int, tuple[int, int, int, int]]]:
    """Forward projection: (keyframe index, frame-space box) for every
    keyframe whose slab intersects the nodule's extent slices.

    The box is the union of the intersecting extent boxes translated by the
    quadrant bbox origin. Empty when no slab intersects.
    """
    if not _nodule_in_segment(seg, nodule):
        raise SimulationError(
            f"nodule {nodule.nodule_id} outside quadrant of {seg.segment_id}")
    bx0, by0, _, _ = seg.bbox2d
    interp = seg.frame_kinds
    keyframe_index = {}
    for i, kind in enumerate(interp):
        if kind["kind"] == "keyframe":
            keyframe_index[kind["slab_index"]] = i

    out = []
    for k, (za, zb) in enumerate(seg.slab_table):
        boxes = [(x, y, w, h) for z, (x, y, w, h) in nodule.extent if za <= z <= zb]
        if not boxes:
            continue
        x0 = min(b[0] for b in boxes)
        y0 = min(b[1] for b in boxes)
        x1 = max(b[0] + b[2] for b in boxes)
        y1 = max(b[1] + b[3] for b in boxes)
        out.append((keyframe_index[k], (x0 - bx0, y0 - by0, x1 - x0, y1 - y0)))
    return out


def _clip_box(box, frame_size):
    fw, fh = frame_size
    x, y, w, h = box
    w = min(w, fw)
    h = min(h, fh)
    x = max(0, min(x, fw - w))
    y = max(0, min(y, fh - h))
    return (int(x), int(y), int(w), int(h))


def _marker_annotation(seg) -> dict:
    marker = seg.marker
    if marker is None:
        raise SimulationError(f"segment {seg.segment_id} has no QC marker")
    return {"frame_index": int(marker["frame_span"][0]),
            "box": [int(v) for v in marker["box"]], "label": "qc"}


def _spam_box(rng, seg) -> tuple[int, int, int, int]:
    from .evaluation import overlap_ratio

    fw, fh = seg.frame_size
    marker = seg.marker
    for _ in range(100):
        w = int(rng.integers(4, max(5, fw // 3)))
        h = int(rng.integers(4, max(5, fh // 3)))
        x = int(rng.integers(0, max(1, fw - w)))
        y = int(rng.integers(0, max(1, fh - h)))
        box = (x, y, w, h)
        if marker is None or overlap_ratio(box, marker["box"]) < 0.5:
            return box
    # Fall back to a 1x1 box in whichever corner is farthest from the marker.
    mx, my = marker["box"][0], marker["box"][1]
    x = 0 if mx > fw // 2 else fw - 1
    y = 0 if my > fh // 2 else fh - 1
    return (x, y, 1, 1)


def simulate_worker(profile: WorkerProfile, seg, gt: list[GroundTruthNodule],
                    rng_seed: int | None = None) -> dict:
    """One worker's annotation pass over one segment.

    Returns {"annotations": [...], "wall_time_ms": int}; deterministic for a
    fixed (profile, seed, segment, gt).
    """
    seed = rng_seed if rng_seed is not None else derive_seed(profile.seed, seg.segment_id)
    rng = np.random.default_rng(seed)
    fw, fh = seg.frame_size
    nodules = segment_nodules(seg, gt)
    annotations: list[dict] = []

    if profile.kind == "spammer":
        for _ in range(int(rng.integers(1, 5))):
            box = _spam_box(rng, seg)
            frame = int(rng.integers(0, seg.frame_count))
            annotations.append({"frame_index": frame, "box": list(box), "label": "nodule"})
    else:
        annotations.append(_marker_annotation(seg))
        for nodule in sorted(nodules, key=lambda n: n.nodule_id):
            hits = project_nodule(seg, nodule)
            if not hits:
                continue
            if profile.kind == "calibrated":
                p = profile.p_detect.get(nodule.size_bin, 1.0)
                if rng.random() >= p:
                    continue
                frame, box = hits[int(rng.integers(0, len(hits)))]
                if profile.jitter_px > 0:
                    dx, dy = np.rint(rng.normal(0.0, profile.jitter_px, size=2)).astype(int)
                    box = (box[0] + int(dx), box[1] + int(dy), box[2], box[3])
                box = _clip_box(box, (fw, fh))
            else:  # ideal
                frame, box = hits[len(hits) // 2]
                box = _clip_box(box, (fw, fh))
            annotations.append({"frame_index": int(frame),
                                "box": [int(v) for v in box], "label": "nodule"})

        if profile.kind == "calibrated" and profile.fp_rate > 0:
            for _ in range(int(rng.poisson(profile.fp_rate))):
                k = int(rng.integers(0, len(seg.slab_table)))
                plane = seg.coverage_plane(k) if hasattr(seg, "coverage_plane") else None
                size = int(rng.integers(4, 11))
                if plane is not None and plane.any():
                    ys, xs = np.nonzero(plane)
                    j = int(rng.integers(0, len(xs)))
                    box = _clip_box((int(xs[j]) - size // 2, int(ys[j]) - size // 2,
                                     size, size), (fw, fh))
                else:
                    box = _clip_box((int(rng.integers(0, fw)), int(rng.integers(0, fh)),
                                     size, size), (fw, fh))
                keyframe_pos = [i for i, kd in enumerate(seg.frame_kinds)
                                if kd["kind"] == "keyframe" and kd["slab_index"] == k]
                annotations.append({"frame_index": keyframe_pos[0],
                                    "box": list(box), "label": "nodule"})

    wall_time_ms = int(rng.integers(20_000, 180_000))
    return {"annotations": annotations, "wall_time_ms": wall_time_ms}


def load_scenario(path) -> list[WorkerProfile]:
    """Scenario file: JSON {"seed": int, "workers": [{kind, count, ...}]}."""
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    return scenario_profiles(doc)


def scenario_profiles(doc: dict) -> list[WorkerProfile]:
    base_seed = int(doc.get("seed", 0))
    profiles = []
    for group in doc.get("workers", []):
        count = int(group.get("count", 1))
        for i in range(count):
            profiles.append(WorkerProfile(
                kind=group["kind"],
                p_detect={str(k): float(v) for k, v in group.get("p_detect", {}).items()},
                fp_rate=float(group.get("fp_rate", DEFAULT_FP_RATE)),
                jitter_px=float(group.get("jitter_px", DEFAULT_JITTER_PX)),
                seed=derive_seed(base_seed, group["kind"], len(profiles), i),
            ))
    return profiles


def run_scenario(profiles: list[WorkerProfile], segments: dict,
                 gt: list[GroundTruthNodule], store: TaskStore) -> list[dict]:
    """Drive every simulated worker against the store until exhaustion.

    Workers draw tasks round-robin (one per turn) and submit immediately,
    mirroring how human workers picked up one video at a time. Returns all
    submissions in submission order.
    """
    worker_ids = {id(p): store.register_worker() for p in profiles}
    active = list(profiles)
    while active:
        still = []
        for profile in active:
            wid = worker_ids[id(profile)]
            task = store.assign_next(wid)
            if task is None:
                continue
            seg = segments[task.segment_id]
            result = simulate_worker(profile, seg, gt)
            store.submit(task_id=task.task_id, worker_id=wid,
                         annotations=result["annotations"],
                         wall_time_ms=result["wall_time_ms"])
            still.append(profile)
        active = still
    return store.all_submissions()
