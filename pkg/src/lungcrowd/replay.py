"""Replay of recorded crowd-study outcomes at desk scale.

Builds a synthetic 20-patient study (ground truth, 80 lightweight segments,
805 submissions) whose evaluation reproduces the recorded stratified
detection counts exactly: per-size-bin detected/total, the location and
attachment marginals, 800 accepted tasks from 143 unique workers, 1021
non-qc annotations, 47 false positives, and 5 spam attempts.

The recorded tables give only the marginals of location and attachment per
size bin; a northwest-corner transport fills in a consistent joint
assignment. This validates the evaluation arithmetic on recorded counts; it
does not re-derive human behaviour.
"""

from __future__ import annotations

import logging

from .evaluation import ATTACHMENTS, GroundTruthNodule, LOCATIONS, SIZE_BINS
from .mip import SegmentRecord
from .segmentation import QuadrantId
from .service import TaskStore

logger = logging.getLogger(__name__)

# Recorded study outcomes, indexed by size bin (<=4, 4-6, 6-8, 8-10, >10).
BIN_TOTALS = {"<=4": 91, "4-6": 30, "6-8": 18, "8-10": 15, ">10": 24}
BIN_DETECTED = {"<=4": 78, "4-6": 28, "6-8": 17, "8-10": 15, ">10": 23}

LOCATION_TOTALS = {
    "peripheral": {"<=4": 53, "4-6": 15, "6-8": 9, "8-10": 8, ">10": 14},
    "non-peripheral": {"<=4": 38, "4-6": 15, "6-8": 9, "8-10": 7, ">10": 10},
}
LOCATION_DETECTED = {
    "peripheral": {"<=4": 42, "4-6": 14, "6-8": 8, "8-10": 8, ">10": 13},
    "non-peripheral": {"<=4": 36, "4-6": 14, "6-8": 9, "8-10": 7, ">10": 10},
}
ATTACHMENT_TOTALS = {
    "pleural": {"<=4": 32, "4-6": 12, "6-8": 5, "8-10": 6, ">10": 8},
    "vessel": {"<=4": 35, "4-6": 11, "6-8": 6, "8-10": 0, ">10": 3},
    "hilar": {"<=4": 7, "4-6": 2, "6-8": 2, "8-10": 3, ">10": 4},
    "central": {"<=4": 17, "4-6": 5, "6-8": 5, "8-10": 6, ">10": 9},
}
ATTACHMENT_DETECTED = {
    "pleural": {"<=4": 27, "4-6": 12, "6-8": 5, "8-10": 6, ">10": 8},
    "vessel": {"<=4": 31, "4-6": 10, "6-8": 6, "8-10": 0, ">10": 3},
    "hilar": {"<=4": 3, "4-6": 1, "6-8": 1, "8-10": 3, ">10": 3},
    "central": {"<=4": 17, "4-6": 5, "6-8": 5, "8-10": 6, ">10": 9},
}

N_PATIENTS = 20
N_WORKERS = 143
WORKERS_PER_VIDEO = 10
N_SPAM = 5
TOTAL_NON_QC_ANNOTATIONS = 1021
N_FALSE_POSITIVES = 47
# Detecting-worker totals per size class; their sum plus the false positives
# equals the recorded 1021 non-qc annotations (974 + 47).
CLASS_WORKER_SUMS = {"small": 297, "medium": 473, "large": 204}

BIN_DIAMETERS = {"<=4": 3.0, "4-6": 5.0, "6-8": 7.0, "8-10": 9.0, ">10": 14.0}

# Synthetic segment geometry shared by all 80 quadrants.
SEG_SLICES = 40
SEG_SIZE = 240
CELL = 24
FP_ROW = 8  # grid row reserved for false-positive boxes
MARKER_CELL = (9, 9)  # grid cell reserved for the QC marker
SLAB_THICKNESS = 5
INTERP_FRAMES = 2
FPS = 3.0


def _northwest_corner(row_sums: list[int], col_sums: list[int]) -> list[list[int]]:
    """Non-negative integer matrix with the given row and column sums."""
    if sum(row_sums) != sum(col_sums):
        raise ValueError("row and column sums disagree")
    rows, cols = len(row_sums), len(col_sums)
    out = [[0] * cols for _ in range(rows)]
    r = list(row_sums)
    c = list(col_sums)
    i = j = 0
    while i < rows and j < cols:
        take = min(r[i], c[j])
        out[i][j] = take
        r[i] -= take
        c[j] -= take
        if r[i] == 0:
            i += 1
        else:
            j += 1
    return out


def _joint_cells() -> list[tuple[str, str, str, bool]]:
    """(size_bin, location, attachment, detected) for all 178 nodules."""
    cells = []
    for b in SIZE_BINS:
        det_rows = [LOCATION_DETECTED[loc][b] for loc in LOCATIONS]
        det_cols = [ATTACHMENT_DETECTED[att][b] for att in ATTACHMENTS]
        det = _northwest_corner(det_rows, det_cols)
        und_rows = [LOCATION_TOTALS[loc][b] - LOCATION_DETECTED[loc][b] for loc in LOCATIONS]
        und_cols = [ATTACHMENT_TOTALS[att][b] - ATTACHMENT_DETECTED[att][b] for att in ATTACHMENTS]
        und = _northwest_corner(und_rows, und_cols)
        for i, loc in enumerate(LOCATIONS):
            for j, att in enumerate(ATTACHMENTS):
                cells.extend([(b, loc, att, True)] * det[i][j])
                cells.extend([(b, loc, att, False)] * und[i][j])
    return cells


def _deal_to_patients(cells) -> dict[str, list[tuple[str, str, str, bool]]]:
    """Deal nodules to 20 patients: p019 gets 38 (2 missed smalls), p020 one
    detected large, the rest spread round-robin over p001..p018."""
    pool = list(cells)

    def take(predicate):
        for i, c in enumerate(pool):
            if predicate(c):
                return pool.pop(i)
        raise ValueError("recorded tables cannot satisfy the patient extremes")

    patients: dict[str, list] = {f"p{i + 1:03d}": [] for i in range(N_PATIENTS)}
    patients["p020"].append(take(lambda c: c[0] == ">10" and c[3]))
    patients["p019"].append(take(lambda c: c[0] == "<=4" and not c[3]))
    patients["p019"].append(take(lambda c: c[0] == "<=4" and not c[3]))
    for _ in range(36):
        patients["p019"].append(take(lambda c: c[3]))
    rest = [f"p{i + 1:03d}" for i in range(18)]
    for i, cell in enumerate(list(pool)):
        patients[rest[i % len(rest)]].append(cell)
    return patients


# The four quadrants of a patient occupy disjoint sub-volumes: upper/lower
# halves stack along z, left/right sit at different x offsets.
QUADRANT_REGIONS = {
    "left_upper": (0, 0),      # (z offset, x offset)
    "left_lower": (SEG_SLICES, 0),
    "right_upper": (0, 300),
    "right_lower": (SEG_SLICES, 300),
}


def _light_manifest(segment_id: str, patient_id: str, quadrant_id: str) -> dict:
    z_off, x_off = QUADRANT_REGIONS[quadrant_id]
    n_keyframes = SEG_SLICES - SLAB_THICKNESS + 1
    slab_table = [[z_off + z, z_off + z + SLAB_THICKNESS - 1] for z in range(n_keyframes)]
    frames = []
    for k in range(n_keyframes):
        frames.append({"kind": "keyframe", "slab_index": k,
                       "file": f"f{len(frames):05d}.png"})
        if k + 1 < n_keyframes:
            for i in range(1, INTERP_FRAMES + 1):
                frames.append({"kind": "interpolated", "slab_index": k,
                               "fraction": i / (INTERP_FRAMES + 1),
                               "file": f"f{len(frames):05d}.png"})
    mx = MARKER_CELL[0] * CELL
    my = MARKER_CELL[1] * CELL
    return {
        "segment_id": segment_id,
        "patient_id": patient_id,
        "quadrant_id": quadrant_id,
        "config": {"slab_thickness": SLAB_THICKNESS, "slab_stride": 1,
                   "interp_frames": INTERP_FRAMES, "fps": FPS,
                   "window": {"level": -600.0, "width": 1500.0}},
        "fps": FPS,
        "quadrant": {"slice_range": [z_off, z_off + SEG_SLICES - 1],
                     "bbox": [x_off, 0, SEG_SIZE, SEG_SIZE]},
        "spacing": [1.0, 1.0, 1.0],
        "thin": False,
        "frame_count": len(frames),
        "slab_table": slab_table,
        "frames": frames,
        "in_mask_pixel_counts": [SEG_SIZE * SEG_SIZE] * n_keyframes,
        "mask_file": None,
        "marker": {"sprite_id": "replay-sprite", "frame_span": [0, 5],
                   "box": [mx, my, 16, 16], "seed": 0},
    }


def _keyframe_frame_index(manifest: dict, slab_index: int) -> int:
    for i, f in enumerate(manifest["frames"]):
        if f["kind"] == "keyframe" and f["slab_index"] == slab_index:
            return i
    raise ValueError(f"no keyframe for slab {slab_index}")


class ReplayStudy:
    """The constructed fixture: ground truth, segments, submission plan."""

    def __init__(self):
        self.ground_truth: list[GroundTruthNodule] = []
        self.segments: dict[str, SegmentRecord] = {}
        self.task_rosters: dict[str, list[str]] = {}  # segment_id -> 10 worker ids
        self.planned: list[dict] = []  # submissions in feed order
        self.expected = {
            "bin_totals": dict(BIN_TOTALS),
            "bin_detected": dict(BIN_DETECTED),
            "accepted": N_PATIENTS * 4 * WORKERS_PER_VIDEO,
            "spam": N_SPAM,
            "annotations_excl_qc": TOTAL_NON_QC_ANNOTATIONS,
            "false_positives": N_FALSE_POSITIVES,
            "videos": N_PATIENTS * 4,
            "workers": N_WORKERS,
        }


def build_replay_study() -> ReplayStudy:
    """Construct the deterministic recorded-outcome study."""
    study = ReplayStudy()
    cells_by_patient = _deal_to_patients(_joint_cells())
    workers = [f"rw{i + 1:03d}" for i in range(N_WORKERS)]

    quadrant_ids = [q.value for q in QuadrantId]
    segment_order = []
    for p in sorted(cells_by_patient):
        for q in quadrant_ids:
            sid = f"{p}-{q}"
            study.segments[sid] = SegmentRecord(
                None, manifest=_light_manifest(sid, p, q))
            segment_order.append(sid)

    for i, sid in enumerate(segment_order):
        study.task_rosters[sid] = [workers[(WORKERS_PER_VIDEO * i + j) % N_WORKERS]
                                   for j in range(WORKERS_PER_VIDEO)]

    # Build nodules: each lives in one quadrant, on its own grid cell.
    detected_flags: dict[str, bool] = {}
    nodules_by_segment: dict[str, list[GroundTruthNodule]] = {s: [] for s in segment_order}
    nodule_seq = 0
    for p in sorted(cells_by_patient):
        cells = cells_by_patient[p]
        per_quadrant_count = {q: 0 for q in quadrant_ids}
        for idx, (b, loc, att, det) in enumerate(cells):
            q = quadrant_ids[idx % 4]
            z_off, x_off = QUADRANT_REGIONS[q]
            slot = per_quadrant_count[q]
            per_quadrant_count[q] += 1
            gx = slot % 10
            gy = (slot // 10) % FP_ROW  # rows 0..7 only; row 8 is for FPs
            size = round(BIN_DIAMETERS[b])
            zc = z_off + 3 + (slot % 8) * 4
            x0 = x_off + gx * CELL + 2
            y0 = gy * CELL + 2
            extent = [(z, (x0, y0, size, size)) for z in (zc - 1, zc, zc + 1)]
            nodule_seq += 1
            nid = f"rn{nodule_seq:04d}"
            nodule = GroundTruthNodule(
                nodule_id=nid, patient_id=p, diameter_mm=BIN_DIAMETERS[b],
                location=loc, attachment=att, extent=extent)
            study.ground_truth.append(nodule)
            detected_flags[nid] = det
            nodules_by_segment[f"{p}-{q}"].append(nodule)

    # Detecting-worker counts per detected nodule, by coarse size class.
    worker_counts: dict[str, int] = {}
    for cls, bins in (("small", ("<=4",)), ("medium", ("4-6", "6-8", "8-10")),
                      ("large", (">10",))):
        in_class = [n for n in study.ground_truth
                    if n.size_bin in bins and detected_flags[n.nodule_id]]
        target = CLASS_WORKER_SUMS[cls]
        base = target // len(in_class)
        rem = target - base * len(in_class)
        for i, n in enumerate(in_class):
            worker_counts[n.nodule_id] = base + (1 if i < rem else 0)

    # Distribute the 47 false positives: 5 on p019, 9 on p020, rest spread.
    fp_per_segment = {s: 0 for s in segment_order}
    p19_segments = [s for s in segment_order if s.startswith("p019-")]
    p20_segments = [s for s in segment_order if s.startswith("p020-")]
    for i in range(5):
        fp_per_segment[p19_segments[i % 4]] += 1
    for i in range(9):
        fp_per_segment[p20_segments[i % 4]] += 1
    others = [s for s in segment_order if not s.startswith(("p019-", "p020-"))]
    for i in range(N_FALSE_POSITIVES - 14):
        fp_per_segment[others[i % len(others)]] += 1

    # Spam submissions land on the first five segments, from a worker not on
    # the task's roster (the duplicate rule stays intact).
    spam_segments = segment_order[:N_SPAM]

    for i, sid in enumerate(segment_order):
        seg = study.segments[sid]
        roster = study.task_rosters[sid]
        manifest = seg.man
        marker = manifest["marker"]

        if sid in spam_segments:
            spam_worker = workers[(WORKERS_PER_VIDEO * i + WORKERS_PER_VIDEO) % N_WORKERS]
            study.planned.append({"segment_id": sid, "worker_id": spam_worker,
                                  "annotations": [], "spam": True})

        annotations_by_worker: dict[str, list[dict]] = {w: [] for w in roster}
        for w in roster:
            annotations_by_worker[w].append({
                "frame_index": marker["frame_span"][0],
                "box": list(marker["box"]), "label": "qc"})

        bx0, by0 = manifest["quadrant"]["bbox"][0], manifest["quadrant"]["bbox"][1]
        z_off = manifest["quadrant"]["slice_range"][0]
        for nodule in nodules_by_segment[sid]:
            if not detected_flags[nodule.nodule_id]:
                continue
            count = worker_counts[nodule.nodule_id]
            slices = sorted(z for z, _ in nodule.extent)
            mid_z = slices[len(slices) // 2]
            slab_index = min(max(mid_z - z_off - SLAB_THICKNESS // 2, 0),
                             SEG_SLICES - SLAB_THICKNESS)
            frame_index = _keyframe_frame_index(manifest, slab_index)
            x, y, w_, h_ = nodule.extent[0][1]
            box = [x - bx0, y - by0, w_, h_]
            for w in roster[:count]:
                annotations_by_worker[w].append({
                    "frame_index": frame_index, "box": box, "label": "nodule"})

        for k in range(fp_per_segment[sid]):
            w = roster[k % WORKERS_PER_VIDEO]
            fx = (k % 10) * CELL + 4
            fy = FP_ROW * CELL + 4
            annotations_by_worker[w].append({
                "frame_index": _keyframe_frame_index(manifest, (k * 3) % (SEG_SLICES - SLAB_THICKNESS + 1)),
                "box": [fx, fy, 10, 10], "label": "nodule"})

        for w in roster:
            study.planned.append({"segment_id": sid, "worker_id": w,
                                  "annotations": annotations_by_worker[w],
                                  "spam": False})

    return study


def run_replay(study: ReplayStudy | None = None, log_path=None) -> tuple[TaskStore, ReplayStudy]:
    """Feed the planned submissions through a TaskStore and return it."""
    if study is None:
        study = build_replay_study()
    store = TaskStore(log_path=log_path, segments=study.segments)
    tasks = store.create_tasks(sorted(study.segments), target=WORKERS_PER_VIDEO)
    task_by_segment = {t.segment_id: t.task_id for t in tasks}
    known_workers: set[str] = set()
    for planned in study.planned:
        wid = planned["worker_id"]
        if wid not in known_workers:
            store.register_worker(wid)
            known_workers.add(wid)
        store.submit(task_id=task_by_segment[planned["segment_id"]],
                     worker_id=wid, annotations=planned["annotations"],
                     wall_time_ms=60_000)
    return store, study
