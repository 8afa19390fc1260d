"""Ground-truth matching and stratified sensitivity/false-positive reports.

Accepted crowd annotations are mapped from video-frame coordinates back to
volume coordinates, credited to at most one expert nodule each, and rolled
up into per-size-bin, location x size, and attachment x size tables.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

from .errors import EvaluationError
from .mip import frame_to_slab

logger = logging.getLogger(__name__)

SIZE_BINS = ("<=4", "4-6", "6-8", "8-10", ">10")
SIZE_CLASSES = ("small", "medium", "large")
LOCATIONS = ("peripheral", "non-peripheral")
ATTACHMENTS = ("pleural", "vessel", "hilar", "central")

DEFAULT_OVERLAP_THRESHOLD = 0.6
FP_CLUSTER_THRESHOLD = 0.3
QC_HIT_THRESHOLD = 0.5

GT_CSV_HEADER = ["nodule_id", "patient_id", "diameter_mm", "location",
                 "attachment", "z", "x", "y", "w", "h"]


def size_bin(diameter_mm: float) -> str:
    """Size stratum for a diameter; bin "4-6" means >4 and <=6, and so on."""
    if diameter_mm <= 4:
        return "<=4"
    if diameter_mm <= 6:
        return "4-6"
    if diameter_mm <= 8:
        return "6-8"
    if diameter_mm <= 10:
        return "8-10"
    return ">10"


def size_class(diameter_mm: float) -> str:
    """Coarse stratum: small <=4, medium >4-<=10, large >10 (mm)."""
    if diameter_mm <= 4:
        return "small"
    if diameter_mm <= 10:
        return "medium"
    return "large"


@dataclass
class GroundTruthNodule:
    """Expert annotation of one nodule: per-slice boxes in volume coords."""

    nodule_id: str
    patient_id: str
    diameter_mm: float
    location: str
    attachment: str
    extent: list[tuple[int, tuple[int, int, int, int]]]  # (z, (x, y, w, h))

    def __post_init__(self):
        if self.diameter_mm <= 0:
            raise ValueError(f"{self.nodule_id}: diameter must be > 0")
        if self.location not in LOCATIONS:
            raise ValueError(f"{self.nodule_id}: unknown location {self.location!r}")
        if self.attachment not in ATTACHMENTS:
            raise ValueError(f"{self.nodule_id}: unknown attachment {self.attachment!r}")
        if not self.extent:
            raise ValueError(f"{self.nodule_id}: extent must be non-empty")

    @property
    def size_bin(self) -> str:
        return size_bin(self.diameter_mm)

    @property
    def size_class(self) -> str:
        return size_class(self.diameter_mm)

    @property
    def slices(self) -> set[int]:
        return {z for z, _ in self.extent}


def load_ground_truth(path) -> list[GroundTruthNodule]:
    """Read the ground-truth CSV (one row per extent slice)."""
    path = Path(path)
    rows_by_nodule: dict[str, list[dict]] = {}
    order: list[str] = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != GT_CSV_HEADER:
            raise EvaluationError(
                f"{path}: bad CSV header {reader.fieldnames}, expected {GT_CSV_HEADER}")
        for row in reader:
            nid = row["nodule_id"]
            if nid not in rows_by_nodule:
                rows_by_nodule[nid] = []
                order.append(nid)
            rows_by_nodule[nid].append(row)

    nodules = []
    for nid in order:
        rows = rows_by_nodule[nid]
        first = rows[0]
        for row in rows[1:]:
            for key in ("patient_id", "diameter_mm", "location", "attachment"):
                if row[key] != first[key]:
                    raise EvaluationError(f"{path}: nodule {nid} has inconsistent {key}")
        extent = [(int(r["z"]), (int(r["x"]), int(r["y"]), int(r["w"]), int(r["h"])))
                  for r in rows]
        nodules.append(GroundTruthNodule(
            nodule_id=nid,
            patient_id=first["patient_id"],
            diameter_mm=float(first["diameter_mm"]),
            location=first["location"],
            attachment=first["attachment"],
            extent=extent,
        ))
    return nodules


def save_ground_truth(nodules: list[GroundTruthNodule], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(GT_CSV_HEADER)
        for n in nodules:
            for z, (x, y, w, h) in n.extent:
                writer.writerow([n.nodule_id, n.patient_id, n.diameter_mm,
                                 n.location, n.attachment, z, x, y, w, h])


def overlap_ratio(candidate, reference) -> float:
    """Fraction of the reference box covered by the candidate box.

    area(candidate & reference) / area(reference); a zero-area reference
    yields 0. Asymmetric by design: the denominator is the expert's box.
    """
    cx, cy, cw, ch = candidate
    rx, ry, rw, rh = reference
    if rw <= 0 or rh <= 0:
        return 0.0
    iw = min(cx + cw, rx + rw) - max(cx, rx)
    ih = min(cy + ch, ry + rh) - max(cy, ry)
    if iw <= 0 or ih <= 0:
        return 0.0
    return (iw * ih) / (rw * rh)


def iou(a, b) -> float:
    """Intersection over union, the alternative overlap mode."""
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    iw = min(ax + aw, bx + bw) - max(ax, bx)
    ih = min(ay + ah, by + bh) - max(ay, by)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = aw * ah + bw * bh - inter
    if union <= 0:
        return 0.0
    return inter / union


def map_annotation(seg, annotation) -> tuple[tuple[int, int], tuple]:
    """Video-space annotation -> (inclusive slice range, box in volume coords).

    The slice range comes from the frame's slab; the box is translated by
    the quadrant bbox origin.
    """
    frame_index = annotation["frame_index"] if isinstance(annotation, dict) else annotation.frame_index
    box = annotation["box"] if isinstance(annotation, dict) else annotation.box
    zr = frame_to_slab(seg, frame_index)
    bx0, by0, _, _ = seg.bbox2d
    x, y, w, h = box
    return zr, (x + bx0, y + by0, w, h)


def is_qc_hit(seg, annotation) -> bool:
    """Whether an annotation counts as hitting the segment's QC marker."""
    marker = seg.marker
    if marker is None:
        return False
    frame_index = annotation["frame_index"]
    f0, f1 = marker["frame_span"]
    if not f0 <= frame_index <= f1:
        return False
    return overlap_ratio(annotation["box"], marker["box"]) >= QC_HIT_THRESHOLD


@dataclass
class MatchResult:
    """Outcome of matching accepted submissions against ground truth."""

    per_nodule: dict[str, dict]  # nodule_id -> {detected, worker_count, submission_ids}
    classifications: list[dict]  # one entry per accepted annotation
    fp_clusters: list[list[int]]  # indices into classifications
    counts: dict

    def to_dict(self) -> dict:
        return {
            "per_nodule": self.per_nodule,
            "classifications": self.classifications,
            "fp_clusters": self.fp_clusters,
            "counts": self.counts,
        }


def match(submissions: list[dict], gt: list[GroundTruthNodule],
          segments: dict, threshold: float = DEFAULT_OVERLAP_THRESHOLD,
          min_workers: int = 1, overlap_mode: str = "reference") -> MatchResult:
    """Classify accepted annotations as qc-hit / true-positive / false-positive.

    An annotation is a true positive for a nodule iff its mapped slice range
    intersects the nodule's extent slices AND the overlap with the nodule's
    box on some intersecting slice strictly exceeds `threshold`. Each
    annotation credits at most one nodule (largest overlap, ties to the
    smaller nodule id). A nodule is detected iff at least `min_workers`
    distinct workers credit it. Non-qc leftovers are false positives,
    clustered by transitive overlap > FP_CLUSTER_THRESHOLD within one
    segment on intersecting slabs.
    """
    if overlap_mode == "reference":
        overlap = overlap_ratio
    elif overlap_mode == "iou":
        overlap = iou
    else:
        raise EvaluationError(f"unknown overlap mode {overlap_mode!r}")

    known_patients = {s.patient_id for s in segments.values()}
    for n in gt:
        if n.patient_id not in known_patients:
            raise EvaluationError(
                f"ground truth references unknown patient {n.patient_id!r}")

    gt_by_patient: dict[str, list[GroundTruthNodule]] = {}
    for n in gt:
        gt_by_patient.setdefault(n.patient_id, []).append(n)

    per_nodule = {n.nodule_id: {"detected": False, "worker_count": 0,
                                "workers_by_segment": {}, "submission_ids": []}
                  for n in gt}
    classifications: list[dict] = []
    accepted = [s for s in submissions if s.get("qc_status") == "passed"]
    failed = [s for s in submissions if s.get("qc_status") == "failed"]

    for sub in accepted:
        seg = segments.get(sub["segment_id"]) if "segment_id" in sub else None
        if seg is None:
            seg = _segment_for_task(sub, segments)
        for idx, ann in enumerate(sub["annotations"]):
            entry = {
                "submission_id": sub["submission_id"],
                "worker_id": sub["worker_id"],
                "segment_id": seg.segment_id,
                "annotation_index": idx,
                "label": ann.get("label", "nodule"),
            }
            if is_qc_hit(seg, ann):
                entry["class"] = "qc-hit"
                classifications.append(entry)
                continue
            zr, box = map_annotation(seg, ann)
            best_score = 0.0
            best_nodule = None
            for n in sorted(gt_by_patient.get(seg.patient_id, []), key=lambda n: n.nodule_id):
                score = 0.0
                for z, nbox in n.extent:
                    if zr[0] <= z <= zr[1]:
                        score = max(score, overlap(box, nbox))
                if score > best_score:
                    best_score = score
                    best_nodule = n
            if best_nodule is not None and best_score > threshold:
                entry["class"] = "true-positive"
                entry["nodule_id"] = best_nodule.nodule_id
                entry["overlap"] = best_score
                rec = per_nodule[best_nodule.nodule_id]
                rec["workers_by_segment"].setdefault(seg.segment_id, set()).add(
                    sub["worker_id"])
                rec["submission_ids"].append(sub["submission_id"])
            else:
                entry["class"] = "false-positive"
                entry["mapped_slices"] = list(zr)
                entry["mapped_box"] = list(box)
            classifications.append(entry)

    for rec in per_nodule.values():
        # A nodule straddling the superior/inferior cut appears in two
        # videos; the detecting-worker count is taken within one video so it
        # never exceeds the workers-per-video allotment.
        by_seg = rec.pop("workers_by_segment")
        rec["worker_count"] = max((len(ws) for ws in by_seg.values()), default=0)
        rec["detected"] = rec["worker_count"] >= min_workers
        rec["workers"] = sorted(set().union(*by_seg.values())) if by_seg else []

    fp_indices = [i for i, c in enumerate(classifications) if c["class"] == "false-positive"]
    fp_clusters = _cluster_false_positives(classifications, fp_indices)

    counts = {
        "segments": len(segments),
        "accepted_submissions": len(accepted),
        "failed_submissions": len(failed),
        "unique_workers": len({s["worker_id"] for s in submissions}),
        "annotations_incl_qc": len(classifications),
        "qc_hits": sum(1 for c in classifications if c["class"] == "qc-hit"),
        "true_positives": sum(1 for c in classifications if c["class"] == "true-positive"),
        "false_positives": len(fp_indices),
        "fp_clusters": len(fp_clusters),
        "threshold": threshold,
        "min_workers": min_workers,
        "overlap_mode": overlap_mode,
    }
    counts["annotations_excl_qc"] = counts["annotations_incl_qc"] - counts["qc_hits"]
    return MatchResult(per_nodule=per_nodule, classifications=classifications,
                       fp_clusters=fp_clusters, counts=counts)


def _segment_for_task(sub: dict, segments: dict):
    raise EvaluationError(
        f"submission {sub.get('submission_id')} carries no segment_id")


def _cluster_false_positives(classifications, fp_indices) -> list[list[int]]:
    parent = {i: i for i in fp_indices}

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    def union(i, j):
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[max(ri, rj)] = min(ri, rj)

    for a_pos, i in enumerate(fp_indices):
        ci = classifications[i]
        for j in fp_indices[a_pos + 1:]:
            cj = classifications[j]
            if ci["segment_id"] != cj["segment_id"]:
                continue
            zi, zj = ci["mapped_slices"], cj["mapped_slices"]
            if zi[1] < zj[0] or zj[1] < zi[0]:
                continue
            r = max(overlap_ratio(ci["mapped_box"], cj["mapped_box"]),
                    overlap_ratio(cj["mapped_box"], ci["mapped_box"]))
            if r > FP_CLUSTER_THRESHOLD:
                union(i, j)

    clusters: dict[int, list[int]] = {}
    for i in fp_indices:
        clusters.setdefault(find(i), []).append(i)
    return [sorted(v) for _, v in sorted(clusters.items())]


def _round1(x: float) -> float:
    """Round to one decimal, half away from zero (for percentages)."""
    return math.floor(x * 10 + 0.5) / 10 if x >= 0 else -math.floor(-x * 10 + 0.5) / 10


def _pct(detected: int, total: int):
    if total == 0:
        return None
    return _round1(100.0 * detected / total)


@dataclass
class MetricsReport:
    """Stratified sensitivity tables plus annotation/FP totals."""

    size_bin_rows: list[dict]
    overall: dict
    location_by_size: dict
    attachment_by_size: dict
    worker_count_stats: dict
    counts: dict
    per_patient: dict
    segment_mask_stats: list[dict] = field(default_factory=list)
    provenance: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "size_bins": self.size_bin_rows,
            "overall": self.overall,
            "location_by_size": self.location_by_size,
            "attachment_by_size": self.attachment_by_size,
            "worker_count_stats": self.worker_count_stats,
            "counts": self.counts,
            "per_patient": self.per_patient,
            "segment_mask_stats": self.segment_mask_stats,
            "provenance": self.provenance,
        }


def _population_stats(values: list[float]) -> dict:
    if not values:
        return {"n": 0, "mean": None, "median": None, "sigma": None}
    n = len(values)
    mean = sum(values) / n
    ordered = sorted(values)
    mid = n // 2
    median = ordered[mid] if n % 2 else (ordered[mid - 1] + ordered[mid]) / 2
    sigma = math.sqrt(sum((v - mean) ** 2 for v in values) / n)
    return {"n": n, "mean": mean, "median": median, "sigma": sigma}


def compute_metrics(mr: MatchResult, gt: list[GroundTruthNodule],
                    segments: dict | None = None) -> MetricsReport:
    """Roll a MatchResult up into the stratified report tables."""
    by_id = {n.nodule_id: n for n in gt}

    size_rows = []
    for b in SIZE_BINS:
        in_bin = [n for n in gt if n.size_bin == b]
        det = sum(1 for n in in_bin if mr.per_nodule[n.nodule_id]["detected"])
        size_rows.append({"bin": b, "total": len(in_bin), "detected": det,
                          "sensitivity_pct": _pct(det, len(in_bin))})
    total = len(gt)
    detected_total = sum(1 for n in gt if mr.per_nodule[n.nodule_id]["detected"])
    overall = {"total": total, "detected": detected_total,
               "sensitivity_pct": _pct(detected_total, total)}

    def cell(nodules):
        det = sum(1 for n in nodules if mr.per_nodule[n.nodule_id]["detected"])
        return {"detected": det, "total": len(nodules), "pct": _pct(det, len(nodules))}

    location_by_size = {
        loc: {b: cell([n for n in gt if n.location == loc and n.size_bin == b])
              for b in SIZE_BINS}
        for loc in LOCATIONS}
    attachment_by_size = {
        att: {b: cell([n for n in gt if n.attachment == att and n.size_bin == b])
              for b in SIZE_BINS}
        for att in ATTACHMENTS}

    worker_count_stats = {}
    for cls in SIZE_CLASSES:
        counts = [mr.per_nodule[n.nodule_id]["worker_count"]
                  for n in gt if n.size_class == cls
                  and mr.per_nodule[n.nodule_id]["detected"]]
        worker_count_stats[cls] = _population_stats([float(c) for c in counts])

    per_patient: dict[str, dict] = {}
    for n in gt:
        rec = per_patient.setdefault(n.patient_id, {"total": 0, "detected": 0, "fp": 0})
        rec["total"] += 1
        if mr.per_nodule[n.nodule_id]["detected"]:
            rec["detected"] += 1
    seg_patient = {}
    if segments:
        seg_patient = {sid: s.patient_id for sid, s in segments.items()}
    for c in mr.classifications:
        if c["class"] == "false-positive":
            pid = seg_patient.get(c["segment_id"])
            if pid in per_patient:
                per_patient[pid]["fp"] += 1

    segment_mask_stats = []
    if segments:
        for sid in sorted(segments):
            counts = segments[sid].man.get("in_mask_pixel_counts", []) \
                if hasattr(segments[sid], "man") else []
            if counts:
                stats = _population_stats([float(c) for c in counts])
                cv = stats["sigma"] / stats["mean"] if stats["mean"] else None
                segment_mask_stats.append({
                    "segment_id": sid,
                    "min": min(counts), "max": max(counts),
                    "mean": stats["mean"], "cv": cv,
                })

    _ = by_id
    return MetricsReport(
        size_bin_rows=size_rows,
        overall=overall,
        location_by_size=location_by_size,
        attachment_by_size=attachment_by_size,
        worker_count_stats=worker_count_stats,
        counts=dict(mr.counts),
        per_patient=per_patient,
        segment_mask_stats=segment_mask_stats,
    )


def summarize_ground_truth(gt: list[GroundTruthNodule]) -> dict:
    """Dataset statistics: per-patient counts, mean, population sigma, bins."""
    per_patient: dict[str, int] = {}
    for n in gt:
        per_patient[n.patient_id] = per_patient.get(n.patient_id, 0) + 1
    stats = _population_stats([float(c) for c in per_patient.values()])
    histogram = {b: sum(1 for n in gt if n.size_bin == b) for b in SIZE_BINS}
    return {
        "total_nodules": len(gt),
        "patients": len(per_patient),
        "per_patient": dict(sorted(per_patient.items())),
        "mean_per_patient": stats["mean"],
        "sigma_per_patient": stats["sigma"],
        "size_bin_histogram": histogram,
    }


def _fmt_pct(p) -> str:
    return "n/a" if p is None else f"{p:.1f}%"


def render_report(report: MetricsReport, fmt: str = "json") -> str:
    """Serialize a report as json, text-table, or csv."""
    if fmt == "json":
        return json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"
    if fmt == "csv":
        lines = ["size_bin,total,detected,sensitivity_pct"]
        for row in report.size_bin_rows:
            pct = "n/a" if row["sensitivity_pct"] is None else f"{row['sensitivity_pct']:.1f}"
            lines.append(f"{row['bin']},{row['total']},{row['detected']},{pct}")
        o = report.overall
        opct = "n/a" if o["sensitivity_pct"] is None else f"{o['sensitivity_pct']:.1f}"
        lines.append(f"total,{o['total']},{o['detected']},{opct}")
        return "\n".join(lines) + "\n"
    if fmt == "text-table":
        return _render_text(report)
    raise EvaluationError(f"unknown report format {fmt!r}")


def _render_text(report: MetricsReport) -> str:
    lines = []
    lines.append("Nodules detected by the crowd")
    lines.append(f"{'Size (mm)':<12} | {'Total':>5} | {'Detected':>8} | Sensitivity")
    lines.append("-" * 48)
    for row in report.size_bin_rows:
        lines.append(f"{row['bin']:<12} | {row['total']:>5} | {row['detected']:>8} | "
                     f"{_fmt_pct(row['sensitivity_pct'])}")
    o = report.overall
    lines.append("-" * 48)
    lines.append(f"{'Total':<12} | {o['total']} | {o['detected']} | "
                 f"{_fmt_pct(o['sensitivity_pct'])}")
    lines.append("")

    def two_way(title: str, rows: tuple, table: dict):
        lines.append(title)
        header = f"{'Variable':<16}" + "".join(f" | {b:>16}" for b in SIZE_BINS)
        lines.append(header)
        lines.append("-" * len(header))
        for key in rows:
            cells = table[key]
            row = f"{key:<16}"
            for b in SIZE_BINS:
                c = cells[b]
                cell = f"{c['detected']}/{c['total']} ({_fmt_pct(c['pct'])})"
                row += f" | {cell:>16}"
            lines.append(row)

    two_way("Detection by location (detected/total)", LOCATIONS,
            report.location_by_size)
    lines.append("")
    two_way("Detection by attachment (detected/total)", ATTACHMENTS,
            report.attachment_by_size)
    lines.append("")

    c = report.counts
    lines.append(f"Videos: {c.get('segments', 0)}  accepted submissions: "
                 f"{c.get('accepted_submissions', 0)}  spam: {c.get('failed_submissions', 0)}")
    lines.append(f"Annotations (excl qc): {c.get('annotations_excl_qc', 0)}  "
                 f"(incl qc): {c.get('annotations_incl_qc', 0)}")
    lines.append(f"False positives: {c.get('false_positives', 0)} annotations in "
                 f"{c.get('fp_clusters', 0)} regions")
    for cls in SIZE_CLASSES:
        s = report.worker_count_stats[cls]
        if s["n"]:
            lines.append(f"Detecting workers ({cls}): mean {s['mean']:.1f}, "
                         f"median {s['median']:g}, sigma {s['sigma']:.2f}")
    return "\n".join(lines) + "\n"
