"""Pipeline CLI: composable commands over plain files.

Stages write into their own subdirectory of --out and record a run.json
provenance file (config echo, seed, input hashes; no timestamps, so
identical runs produce identical trees). `all` chains every stage.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .errors import (EvaluationError, LungCrowdError, MarkerPlacementError,
                     RenderError, SegmentationError, ServiceError,
                     SimulationError, VolumeFormatError)
from .volume import CtVolume, DisplayWindow, load_mask, load_volume, save_mask, save_volume

logger = logging.getLogger(__name__)

EXIT_CODES = {
    VolumeFormatError: 2,
    SegmentationError: 3,
    RenderError: 4,
    MarkerPlacementError: 5,
    ServiceError: 6,
    EvaluationError: 7,
    SimulationError: 8,
}

QUADRANTS_JSON = "quadrants.json"


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_run_record(out_dir: Path, command: str, seed, config: dict,
                      inputs: list[Path]) -> None:
    # Inputs are keyed by basename so two runs writing to different roots
    # stay byte-identical; the content hash is the identity that matters.
    record = {
        "command": command,
        "package_version": __version__,
        "seed": seed,
        "config": config,
        "inputs": {p.name: _sha256_file(p) for p in sorted(inputs) if p.is_file()},
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run.json").write_text(
        json.dumps(record, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _collect_provenance(*dirs) -> list[dict]:
    chain = []
    for d in dirs:
        if d is None:
            continue
        rj = Path(d) / "run.json"
        if rj.is_file():
            chain.append(json.loads(rj.read_text(encoding="utf-8")))
    return chain


def _volume_files(volumes_arg: str) -> list[Path]:
    p = Path(volumes_arg)
    if p.is_dir():
        files = sorted(p.glob("*.ctvol"))
        if not files:
            raise FileNotFoundError(f"no .ctvol volumes found in {p}")
        return files
    if p.is_file():
        return [p]
    raise FileNotFoundError(f"volume path {p} does not exist")


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def _merged(args, config: dict, key: str, default):
    """CLI flag beats config file beats default."""
    value = getattr(args, key, None)
    if value is not None:
        return value
    if key in config:
        return config[key]
    return default


# --------------------------------------------------------------- commands


def cmd_phantom(args) -> int:
    from .evaluation import save_ground_truth
    from .phantom import generate_study

    out = Path(args.out)
    vol_dir = out / "volumes"
    vol_dir.mkdir(parents=True, exist_ok=True)
    phantoms = generate_study(args.patients, seed=args.seed)
    gt = []
    for ph in phantoms:
        save_volume(ph.volume, vol_dir / f"{ph.patient_id}.ctvol")
        gt.extend(ph.nodules)
    save_ground_truth(gt, vol_dir / "gt.csv")
    _write_run_record(vol_dir, "phantom", args.seed,
                      {"patients": args.patients}, [])
    print(f"wrote {len(phantoms)} phantom volumes and {len(gt)} nodules to {vol_dir}")
    return 0


def cmd_segment(args) -> int:
    from .segmentation import segment_volume

    config = _load_config_file(args.config)
    threshold = _merged(args, config, "threshold", None)
    radius = _merged(args, config, "closing_radius_mm", 8.0)
    split_axis = _merged(args, config, "split_axis", "axial")
    out = Path(args.out) / "seg"

    files = _volume_files(args.volumes)
    for vf in files:
        patient_id = vf.stem
        volume = load_volume(vf)
        quadrants, smoothed = segment_volume(
            volume, threshold=threshold, closing_radius_mm=radius,
            split_axis=split_axis)
        pdir = out / patient_id
        pdir.mkdir(parents=True, exist_ok=True)
        meta = {"patient_id": patient_id, "dims": list(volume.dims),
                "spacing": list(volume.spacing), "quadrants": []}
        for q in quadrants:
            mask_file = f"{q.quadrant_id.value}.mask.ctvol"
            if not q.empty:
                save_mask(q.mask.bits, volume.spacing, pdir / mask_file)
            meta["quadrants"].append({
                "quadrant_id": q.quadrant_id.value,
                "slice_range": list(q.slice_range),
                "bbox": list(q.bbox2d),
                "empty": q.empty,
                "mask_file": mask_file if not q.empty else None,
            })
        (pdir / QUADRANTS_JSON).write_text(
            json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        if args.seg_dump:
            dump = Path(args.seg_dump)
            save_mask(smoothed.bits, volume.spacing, dump / f"{patient_id}.combined.mask.ctvol")
        logger.info("segmented %s: %d non-empty quadrants", patient_id,
                    sum(1 for q in quadrants if not q.empty))
    _write_run_record(out, "segment", None,
                      {"threshold": threshold, "closing_radius_mm": radius,
                       "split_axis": split_axis}, files)
    print(f"segmented {len(files)} volumes into {out}")
    return 0


def _load_quadrants(pdir: Path, volume: CtVolume):
    from .segmentation import LungMask, Quadrant, QuadrantId

    meta = json.loads((pdir / QUADRANTS_JSON).read_text(encoding="utf-8"))
    quadrants = []
    for qm in meta["quadrants"]:
        if qm["empty"]:
            bits = np.zeros(volume.voxels.shape, dtype=bool)
        else:
            bits, _ = load_mask(pdir / qm["mask_file"])
        quadrants.append(Quadrant(
            quadrant_id=QuadrantId(qm["quadrant_id"]),
            mask=LungMask(bits=bits, spacing=volume.spacing, label=qm["quadrant_id"]),
            slice_range=tuple(qm["slice_range"]),
            bbox2d=tuple(qm["bbox"]),
            empty=qm["empty"],
        ))
    return quadrants


def cmd_render(args) -> int:
    from .mip import RenderConfig, export_frames, render_segment

    config = _load_config_file(args.config)
    rc = RenderConfig(
        slab_thickness=_merged(args, config, "thickness", 5),
        slab_stride=_merged(args, config, "stride", 1),
        interp_frames=_merged(args, config, "interp", 2),
        fps=_merged(args, config, "fps", 3.0),
        window=DisplayWindow(
            level=_merged(args, config, "window_level", -600.0),
            width=_merged(args, config, "window_width", 1500.0)),
    )
    out = Path(args.out) / "segments"
    seg_dir = Path(args.seg) / "seg" if (Path(args.seg) / "seg").is_dir() else Path(args.seg)
    files = _volume_files(args.volumes)

    jobs = []
    for vf in files:
        patient_id = vf.stem
        pdir = seg_dir / patient_id
        if not (pdir / QUADRANTS_JSON).is_file():
            raise RenderError(f"missing segmentation output for {patient_id} in {seg_dir}")
        volume = load_volume(vf)
        for q in _load_quadrants(pdir, volume):
            if q.empty:
                logger.info("skipping empty quadrant %s of %s", q.quadrant_id.value, patient_id)
                continue
            jobs.append((volume, q, patient_id))

    def render_one(job):
        volume, q, patient_id = job
        segment_id = f"{patient_id}-{q.quadrant_id.value}"
        seg = render_segment(volume, q, rc, segment_id=segment_id, patient_id=patient_id)
        export_frames(seg, out / segment_id)
        return segment_id

    with ThreadPoolExecutor(max_workers=4) as pool:
        segment_ids = list(pool.map(render_one, jobs))

    encode_cmd = getattr(args, "encode_cmd", None)
    if encode_cmd:
        # optional hook: hand each frame directory to an external encoder
        import shlex
        import subprocess
        for segment_id in segment_ids:
            cmd = [part.replace("{dir}", str(out / segment_id))
                       .replace("{fps}", str(rc.fps))
                   for part in shlex.split(encode_cmd)]
            subprocess.run(cmd, check=True)

    _write_run_record(out, "render", None, rc.to_dict(), files)
    print(f"rendered {len(segment_ids)} segments into {out}")
    return 0


def cmd_inject(args) -> int:
    from .evaluation import load_ground_truth
    from .mip import MANIFEST_NAME, SegmentRecord, export_frames
    from .qc import composite_marker, default_sprite, load_sprite, place_marker, scale_sprite
    from .simulate import derive_seed

    config = _load_config_file(args.config)
    seed = _merged(args, config, "seed", 0)
    qc_size = _merged(args, config, "qc_size", 32)
    span_seconds = _merged(args, config, "qc_span_seconds", 2.0)
    sprite_path = _merged(args, config, "qc_sprite", None)
    base_sprite = load_sprite(sprite_path) if sprite_path else default_sprite(qc_size)

    gt = load_ground_truth(args.gt)
    src = Path(args.segments)
    src = src / "segments" if (src / "segments").is_dir() else src
    out = Path(args.out) / "injected"

    manifests = sorted(src.glob(f"*/{MANIFEST_NAME}"))
    if not manifests:
        raise MarkerPlacementError(f"no rendered segments found in {src}")
    for manifest_path in manifests:
        rec = SegmentRecord(manifest_path.parent)
        seg = _segment_from_record(rec)
        fw, fh = seg.frame_size
        size = min(qc_size, max(4, min(fw, fh) // 2))
        sprite = scale_sprite(base_sprite, size)
        marker = place_marker(seg, gt, sprite, seed=derive_seed(seed, rec.segment_id),
                              span_seconds=span_seconds)
        marked = composite_marker(seg, marker, sprite)
        export_frames(marked, out / rec.segment_id)

    _write_run_record(out, "inject", seed,
                      {"qc_size": qc_size, "qc_span_seconds": span_seconds,
                       "qc_sprite": sprite_path}, [Path(args.gt)])
    print(f"injected QC markers into {len(manifests)} segments under {out}")
    return 0


def _segment_from_record(rec):
    """Rehydrate a VideoSegment (with pixels and masks) from disk."""
    from .mip import Frame, RenderConfig, VideoSegment

    frames = []
    for i, kind in enumerate(rec.frame_kinds):
        pixels = rec.frame_pixels(i)
        frames.append(Frame(pixels=pixels, slab_index=kind["slab_index"],
                            fraction=kind.get("fraction")))
    mask_crop = rec.mask_crop
    seg = VideoSegment(
        segment_id=rec.segment_id,
        patient_id=rec.patient_id,
        quadrant_id=rec.quadrant_id,
        config=RenderConfig.from_dict(rec.man["config"]),
        frames=frames,
        slab_table=rec.slab_table,
        slice_range=rec.slice_range,
        bbox2d=rec.bbox2d,
        spacing=tuple(rec.man["spacing"]),
        mask_crop=mask_crop,
        thin=rec.man.get("thin", False),
        marker=rec.marker,
    )
    if mask_crop is not None:
        z0 = rec.slice_range[0]
        seg.mask_planes = [mask_crop[za - z0:zb - z0 + 1].any(axis=0)
                           for za, zb in rec.slab_table]
    return seg


def cmd_simulate(args) -> int:
    from .evaluation import load_ground_truth
    from .mip import load_segments
    from .service import TaskStore
    from .simulate import load_scenario, run_scenario

    config = _load_config_file(args.config)
    target = _merged(args, config, "target", 10)
    reissue = not args.no_reissue

    src = Path(args.segments)
    src = src / "injected" if (src / "injected").is_dir() else src
    segments = load_segments(src)
    if not segments:
        raise SimulationError(f"no segments found in {src}")
    gt = load_ground_truth(args.gt)
    profiles = load_scenario(args.scenario)

    # --out may name the submissions file directly or a run directory
    out_arg = Path(args.out)
    if out_arg.suffix == ".jsonl":
        out = out_arg.parent
        submissions_path = out_arg
        out.mkdir(parents=True, exist_ok=True)
    else:
        out = out_arg / "sim"
        out.mkdir(parents=True, exist_ok=True)
        submissions_path = out / "submissions.jsonl"
    log_path = out / "events.jsonl"
    if log_path.exists():
        log_path.unlink()
    store = TaskStore(log_path=log_path, segments=segments,
                      reissue_on_qc_fail=reissue)
    store.create_tasks(sorted(segments), target=target)
    submissions = run_scenario(profiles, segments, gt, store)
    store.close()

    with open(submissions_path, "w", encoding="utf-8") as f:
        for sub in submissions:
            f.write(json.dumps(sub, sort_keys=True) + "\n")
    _write_run_record(out, "simulate", None,
                      {"target": target, "reissue_on_qc_fail": reissue,
                       "workers": len(profiles)},
                      [Path(args.scenario), Path(args.gt)])
    accepted = sum(1 for s in submissions if s["qc_status"] == "passed")
    print(f"simulated {len(profiles)} workers: {len(submissions)} submissions "
          f"({accepted} accepted) into {out}")
    return 0


def _read_submissions(path: Path) -> list[dict]:
    submissions = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            if "kind" in obj and "payload" in obj:  # event log form
                if obj["kind"] == "submission_received":
                    submissions.append(obj["payload"])
            else:
                submissions.append(obj)
    return submissions


def cmd_evaluate(args) -> int:
    from .evaluation import (compute_metrics, load_ground_truth, match,
                             render_report, summarize_ground_truth)
    from .mip import load_segments

    config = _load_config_file(args.config)
    threshold = _merged(args, config, "overlap_threshold", 0.6)
    mode = _merged(args, config, "overlap_mode", "reference")
    min_workers = _merged(args, config, "min_workers", 1)

    src = Path(args.segments)
    src = src / "injected" if (src / "injected").is_dir() else src
    segments = load_segments(src)
    if not segments:
        raise EvaluationError(f"no segments found in {src}")
    gt = load_ground_truth(args.gt)
    submissions = _read_submissions(Path(args.submissions))

    mr = match(submissions, gt, segments, threshold=threshold,
               min_workers=min_workers, overlap_mode=mode)
    report = compute_metrics(mr, gt, segments)
    report.provenance = _collect_provenance(
        Path(args.gt).parent, Path(args.out) / "seg", Path(args.out) / "segments",
        src, Path(args.submissions).parent)

    out = Path(args.out) / "eval"
    out.mkdir(parents=True, exist_ok=True)
    (out / "match.json").write_text(
        json.dumps(mr.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (out / "report.json").write_text(render_report(report, "json"), encoding="utf-8")
    (out / "report.txt").write_text(render_report(report, "text-table"), encoding="utf-8")
    (out / "report.csv").write_text(render_report(report, "csv"), encoding="utf-8")
    (out / "gt_summary.json").write_text(
        json.dumps(summarize_ground_truth(gt), indent=2, sort_keys=True) + "\n",
        encoding="utf-8")
    _write_run_record(out, "evaluate", None,
                      {"overlap_threshold": threshold, "overlap_mode": mode,
                       "min_workers": min_workers},
                      [Path(args.gt), Path(args.submissions)])
    o = report.overall
    pct = "n/a" if o["sensitivity_pct"] is None else f"{o['sensitivity_pct']:.1f}%"
    print(f"evaluated {o['total']} nodules: {o['detected']} detected ({pct}), "
          f"{mr.counts['false_positives']} false positives; reports in {out}")
    return 0


def cmd_report(args) -> int:
    from .evaluation import MetricsReport, render_report

    doc = json.loads(Path(args.report).read_text(encoding="utf-8"))
    report = MetricsReport(
        size_bin_rows=doc["size_bins"],
        overall=doc["overall"],
        location_by_size=doc["location_by_size"],
        attachment_by_size=doc["attachment_by_size"],
        worker_count_stats=doc["worker_count_stats"],
        counts=doc["counts"],
        per_patient=doc["per_patient"],
        segment_mask_stats=doc.get("segment_mask_stats", []),
        provenance=doc.get("provenance", []),
    )
    text = render_report(report, args.format)
    if args.out_file:
        Path(args.out_file).write_text(text, encoding="utf-8")
        print(f"wrote {args.out_file}")
    else:
        sys.stdout.write(text)
    return 0


def cmd_serve(args) -> int:
    from .evaluation import load_ground_truth
    from .mip import load_segments
    from .service import TaskStore, serve
    import time

    src = Path(args.segments)
    src = src / "injected" if (src / "injected").is_dir() else src
    segments = load_segments(src)
    if not segments:
        raise ServiceError(f"no segments found in {src}")
    gt = load_ground_truth(args.gt) if args.gt else None

    store = TaskStore(log_path=args.log, segments=segments,
                      reissue_on_qc_fail=not args.no_reissue,
                      durable=True, clock=time.time)
    if not store.tasks:
        store.create_tasks(sorted(segments), target=args.target)
    server = serve(store, host=args.host, port=args.port,
                   admin_token=args.admin_token, static_dir=args.static,
                   ground_truth=gt)
    print(f"serving {len(store.tasks)} tasks on http://{args.host}:{server.server_address[1]}")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.shutdown()
        store.close()
    return 0


def cmd_all(args) -> int:
    rc = cmd_segment(args)
    if rc:
        return rc
    args.seg = args.out
    rc = cmd_render(args)
    if rc:
        return rc
    args.segments = str(Path(args.out) / "segments")
    rc = cmd_inject(args)
    if rc:
        return rc
    args.segments = str(Path(args.out) / "injected")
    rc = cmd_simulate(args)
    if rc:
        return rc
    args.submissions = str(Path(args.out) / "sim" / "submissions.jsonl")
    return cmd_evaluate(args)


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lungcrowd",
        description="Crowdsourced lung-nodule annotation pipeline")
    parser.add_argument("--verbose", "-v", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate synthetic thorax volumes + ground truth")
    p.add_argument("--out", required=True)
    p.add_argument("--patients", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_phantom)

    def add_common(p):
        p.add_argument("--config", default=None, help="JSON config file")

    p = sub.add_parser("segment", help="segment lungs into quadrant masks")
    p.add_argument("--volumes", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--closing-radius-mm", dest="closing_radius_mm", type=float, default=None)
    p.add_argument("--split-axis", dest="split_axis", choices=("axial", "coronal"), default=None)
    p.add_argument("--seg-dump", dest="seg_dump", default=None)
    add_common(p)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("render", help="render quadrant MIP video segments")
    p.add_argument("--volumes", required=True)
    p.add_argument("--seg", required=True, help="segmentation output root")
    p.add_argument("--out", required=True)
    p.add_argument("--thickness", type=int, default=None)
    p.add_argument("--stride", type=int, default=None)
    p.add_argument("--interp", type=int, default=None)
    p.add_argument("--fps", type=float, default=None)
    p.add_argument("--window-level", dest="window_level", type=float, default=None)
    p.add_argument("--window-width", dest="window_width", type=float, default=None)
    p.add_argument("--encode-cmd", dest="encode_cmd", default=None,
                   help="external encoder command; {dir} and {fps} are substituted")
    add_common(p)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("inject", help="place and composite the QC marker")
    p.add_argument("--segments", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--qc-sprite", dest="qc_sprite", default=None)
    p.add_argument("--qc-size", dest="qc_size", type=int, default=None)
    p.add_argument("--qc-span-seconds", dest="qc_span_seconds", type=float, default=None)
    add_common(p)
    p.set_defaults(func=cmd_inject)

    p = sub.add_parser("simulate", help="run simulated workers against the tasks")
    p.add_argument("--segments", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--scenario", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--target", type=int, default=None)
    p.add_argument("--no-reissue", action="store_true",
                   help="count failed-QC submissions toward the target")
    add_common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("serve", help="serve annotation tasks over HTTP")
    p.add_argument("--segments", required=True)
    p.add_argument("--log", required=True, help="event log path")
    p.add_argument("--gt", default=None)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8077)
    p.add_argument("--admin-token", dest="admin_token", default=None)
    p.add_argument("--static", default=None, help="static UI bundle directory")
    p.add_argument("--target", type=int, default=10)
    p.add_argument("--no-reissue", action="store_true")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("evaluate", help="match submissions against ground truth")
    p.add_argument("--segments", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--submissions", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--overlap-threshold", dest="overlap_threshold", type=float, default=None)
    p.add_argument("--overlap-mode", dest="overlap_mode",
                   choices=("reference", "iou"), default=None)
    p.add_argument("--min-workers", dest="min_workers", type=int, default=None)
    add_common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="re-render a report.json")
    p.add_argument("--report", required=True)
    p.add_argument("--format", choices=("json", "text-table", "csv"), default="text-table")
    p.add_argument("--out-file", dest="out_file", default=None)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("all", help="run segment, render, inject, simulate, evaluate")
    p.add_argument("--volumes", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--scenario", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--closing-radius-mm", dest="closing_radius_mm", type=float, default=None)
    p.add_argument("--split-axis", dest="split_axis", choices=("axial", "coronal"), default=None)
    p.add_argument("--seg-dump", dest="seg_dump", default=None)
    p.add_argument("--thickness", type=int, default=None)
    p.add_argument("--stride", type=int, default=None)
    p.add_argument("--interp", type=int, default=None)
    p.add_argument("--fps", type=float, default=None)
    p.add_argument("--window-level", dest="window_level", type=float, default=None)
    p.add_argument("--window-width", dest="window_width", type=float, default=None)
    p.add_argument("--qc-sprite", dest="qc_sprite", default=None)
    p.add_argument("--qc-size", dest="qc_size", type=int, default=None)
    p.add_argument("--qc-span-seconds", dest="qc_span_seconds", type=float, default=None)
    p.add_argument("--target", type=int, default=None)
    p.add_argument("--no-reissue", action="store_true")
    p.add_argument("--overlap-threshold", dest="overlap_threshold", type=float, default=None)
    p.add_argument("--overlap-mode", dest="overlap_mode",
                   choices=("reference", "iou"), default=None)
    p.add_argument("--min-workers", dest="min_workers", type=int, default=None)
    add_common(p)
    p.set_defaults(func=cmd_all)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except LungCrowdError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CODES.get(type(exc), 1)


if __name__ == "__main__":
    sys.exit(main())
