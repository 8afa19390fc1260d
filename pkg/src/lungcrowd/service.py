"""Task assignment service: event-sourced store plus a small HTTP/JSON API.

All state lives in an append-only JSON-lines event log; the in-memory index
is rebuilt by replaying the log, so a killed and restarted service
reconstructs identical state. Mutations are serialized through one lock;
QC status is resolved at submit time and recorded in the event so replay
never needs pixel data.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from urllib.parse import parse_qs, urlparse

from .errors import ServiceError
from .evaluation import overlap_ratio

logger = logging.getLogger(__name__)

DEFAULT_ASSIGNMENTS_TARGET = 10
QC_HIT_THRESHOLD = 0.5
VALID_LABELS = ("nodule", "qc")


@dataclass
class Task:
    task_id: str
    segment_id: str
    assignments_target: int
    accepted: int = 0
    failed: int = 0
    assigned_workers: set = field(default_factory=set)
    submitted_workers: set = field(default_factory=set)
    state: str = "open"

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "segment_id": self.segment_id,
            "assignments_target": self.assignments_target,
            "accepted": self.accepted,
            "failed": self.failed,
            "assigned_workers": sorted(self.assigned_workers),
            "state": self.state,
        }


def validate_annotations(annotations, frame_count: int, frame_size) -> list[dict]:
    """Normalize and validate a submission's annotation list."""
    fw, fh = frame_size
    if not isinstance(annotations, list):
        raise ServiceError("malformed annotation: annotations must be a list")
    out = []
    for ann in annotations:
        try:
            frame_index = int(ann["frame_index"])
            x, y, w, h = (int(v) for v in ann["box"])
            label = ann.get("label", "nodule")
        except (KeyError, TypeError, ValueError) as exc:
            raise ServiceError(f"malformed annotation: {ann!r}") from exc
        if label not in VALID_LABELS:
            raise ServiceError(f"malformed annotation: unknown label {label!r}")
        if not 0 <= frame_index < frame_count:
            raise ServiceError(
                f"malformed annotation: frame_index {frame_index} outside [0, {frame_count})")
        if w <= 0 or h <= 0 or x < 0 or y < 0 or x + w > fw or y + h > fh:
            raise ServiceError(
                f"malformed annotation: box {(x, y, w, h)} outside {fw}x{fh} frame")
        out.append({"frame_index": frame_index, "box": [x, y, w, h], "label": label})
    return out


def resolve_qc_status(annotations: list[dict], marker: dict) -> str:
    """passed iff any annotation overlaps the marker box by >= 0.5 within its span."""
    f0, f1 = marker["frame_span"]
    for ann in annotations:
        if f0 <= ann["frame_index"] <= f1:
            if overlap_ratio(ann["box"], marker["box"]) >= QC_HIT_THRESHOLD:
                return "passed"
    return "failed"


class TaskStore:
    """Event-sourced task/submission state with an append-only log.

    `segments` maps segment_id -> SegmentRecord (or anything exposing
    frame_count, frame_size, marker, public_manifest()); it is required for
    live submits but not for replay.
    """

    def __init__(self, log_path=None, segments: dict | None = None,
                 reissue_on_qc_fail: bool = True, durable: bool = False,
                 clock=None, replay_existing: bool = True):
        self.segments = segments or {}
        self.reissue_on_qc_fail = reissue_on_qc_fail
        self.durable = durable
        self._clock = clock
        self._logical_ts = 0
        self._lock = threading.RLock()
        self.workers: dict[str, dict] = {}
        self.tasks: dict[str, Task] = {}
        self.submissions: dict[str, dict] = {}
        self._by_worker_task: dict[tuple[str, str], str] = {}
        self._worker_seq = 0
        self._submission_seq = 0
        self._log_file = None
        self.log_path = Path(log_path) if log_path else None
        if self.log_path is not None:
            self.log_path.parent.mkdir(parents=True, exist_ok=True)
            if replay_existing and self.log_path.exists():
                self._replay_file(self.log_path)
            self._log_file = open(self.log_path, "a", encoding="utf-8")

    # ------------------------------------------------------------- events

    def _next_ts(self):
        if self._clock is not None:
            return self._clock()
        self._logical_ts += 1
        return self._logical_ts

    def _append(self, kind: str, payload: dict) -> dict:
        event = {"ts": self._next_ts(), "kind": kind, "payload": payload}
        if self._log_file is not None:
            self._log_file.write(json.dumps(event, sort_keys=True) + "\n")
            self._log_file.flush()
            if self.durable:
                os.fsync(self._log_file.fileno())
        return event

    def _replay_file(self, path: Path) -> None:
        with open(path, "r", encoding="utf-8") as f:
            lines = f.readlines()
        for i, line in enumerate(lines):
            line = line.strip()
            if not line:
                continue
            try:
                event = json.loads(line)
            except json.JSONDecodeError:
                if i == len(lines) - 1:
                    logger.warning("%s: dropping torn final event line", path)
                    break
                raise ServiceError(f"{path}: corrupt event log at line {i + 1}")
            self._apply(event)
            if self._clock is None:
                self._logical_ts = max(self._logical_ts, int(event.get("ts", 0)))

    @classmethod
    def replay(cls, log_path, segments: dict | None = None, **kwargs) -> "TaskStore":
        """Rebuild state from a log without opening it for writing."""
        store = cls(log_path=None, segments=segments, **kwargs)
        store._replay_file(Path(log_path))
        return store

    def _apply(self, event: dict) -> None:
        kind = event["kind"]
        p = event["payload"]
        if kind == "worker_registered":
            self.workers[p["worker_id"]] = {"worker_id": p["worker_id"]}
            m = re.fullmatch(r"w(\d+)", p["worker_id"])
            if m:
                self._worker_seq = max(self._worker_seq, int(m.group(1)))
        elif kind == "task_created":
            self.tasks[p["task_id"]] = Task(
                task_id=p["task_id"], segment_id=p["segment_id"],
                assignments_target=p["assignments_target"])
        elif kind == "task_assigned":
            self.tasks[p["task_id"]].assigned_workers.add(p["worker_id"])
        elif kind == "submission_received":
            sub = dict(p)
            sid = sub["submission_id"]
            self.submissions[sid] = sub
            self._by_worker_task[(sub["worker_id"], sub["task_id"])] = sid
            task = self.tasks[sub["task_id"]]
            task.submitted_workers.add(sub["worker_id"])
            task.assigned_workers.add(sub["worker_id"])
            if sub["qc_status"] == "passed":
                task.accepted += 1
            else:
                task.failed += 1
            done = task.accepted >= task.assignments_target
            if not self.reissue_on_qc_fail:
                done = done or (task.accepted + task.failed) >= task.assignments_target
            if done:
                task.state = "complete"
            m = re.fullmatch(r"s(\d+)", sid)
            if m:
                self._submission_seq = max(self._submission_seq, int(m.group(1)))
        else:
            raise ServiceError(f"unknown event kind {kind!r}")

    # ---------------------------------------------------------- operations

    def register_worker(self, worker_id: str | None = None) -> str:
        with self._lock:
            if worker_id is None:
                self._worker_seq += 1
                worker_id = f"w{self._worker_seq:04d}"
            elif worker_id in self.workers:
                raise ServiceError(f"worker {worker_id!r} already registered")
            event = self._append("worker_registered", {"worker_id": worker_id})
            self._apply(event)
            return worker_id

    def create_tasks(self, segment_ids, target: int = DEFAULT_ASSIGNMENTS_TARGET) -> list[Task]:
        if target < 1:
            raise ServiceError("assignments target must be >= 1")
        seen = set()
        for sid in segment_ids:
            if sid in seen:
                raise ServiceError(f"duplicate segment id {sid!r}")
            seen.add(sid)
        with self._lock:
            existing = {t.segment_id for t in self.tasks.values()}
            created = []
            for sid in segment_ids:
                if sid in existing:
                    raise ServiceError(f"duplicate segment id {sid!r}")
                task_id = f"t{len(self.tasks) + 1:04d}"
                event = self._append("task_created", {
                    "task_id": task_id, "segment_id": sid,
                    "assignments_target": target})
                self._apply(event)
                created.append(self.tasks[task_id])
            return created

    def assign_next(self, worker_id: str) -> Task | None:
        with self._lock:
            if worker_id not in self.workers:
                raise ServiceError(f"unknown worker {worker_id!r}")
            eligible = [t for t in self.tasks.values()
                        if t.state == "open" and worker_id not in t.assigned_workers]
            if not eligible:
                return None
            task = min(eligible, key=lambda t: (len(t.assigned_workers), t.task_id))
            event = self._append("task_assigned",
                                 {"worker_id": worker_id, "task_id": task.task_id})
            self._apply(event)
            return task

    def submit(self, task_id: str, worker_id: str, annotations,
               wall_time_ms: int = 0) -> dict:
        with self._lock:
            if worker_id not in self.workers:
                raise ServiceError(f"unknown worker {worker_id!r}")
            task = self.tasks.get(task_id)
            if task is None:
                raise ServiceError(f"unknown task {task_id!r}")
            if (worker_id, task_id) in self._by_worker_task:
                raise ServiceError(
                    f"duplicate submission for (worker {worker_id}, task {task_id})")
            if task.state != "open":
                raise ServiceError(f"task {task_id} is complete")
            seg = self.segments.get(task.segment_id)
            if seg is None:
                raise ServiceError(f"segment {task.segment_id!r} not configured")
            clean = validate_annotations(annotations, seg.frame_count, seg.frame_size)
            marker = seg.marker
            if marker is None:
                raise ServiceError(f"segment {task.segment_id!r} has no QC marker")
            qc_status = resolve_qc_status(clean, marker)
            self._submission_seq += 1
            sub = {
                "submission_id": f"s{self._submission_seq:05d}",
                "task_id": task_id,
                "worker_id": worker_id,
                "segment_id": task.segment_id,
                "annotations": clean,
                "wall_time_ms": int(wall_time_ms),
                "qc_status": qc_status,
                "payable": qc_status == "passed",
            }
            event = self._append("submission_received", sub)
            self._apply(event)
            return dict(sub)

    # ------------------------------------------------------------- queries

    def all_submissions(self) -> list[dict]:
        with self._lock:
            return [dict(self.submissions[sid]) for sid in sorted(self.submissions)]

    def accepted_submissions(self) -> list[dict]:
        return [s for s in self.all_submissions() if s["qc_status"] == "passed"]

    def snapshot(self) -> dict:
        with self._lock:
            return {
                "workers": sorted(self.workers),
                "tasks": [self.tasks[tid].to_dict() for tid in sorted(self.tasks)],
                "submissions": [self.submissions[sid] for sid in sorted(self.submissions)],
                "counters": {
                    "worker_seq": self._worker_seq,
                    "submission_seq": self._submission_seq,
                },
            }

    def state_hash(self) -> str:
        return hashlib.sha256(
            json.dumps(self.snapshot(), sort_keys=True).encode("utf-8")).hexdigest()

    def close(self) -> None:
        if self._log_file is not None:
            self._log_file.close()
            self._log_file = None


def task_payload(store: TaskStore, task: Task) -> dict:
    """What a worker sees for a task: the manifest minus the QC marker."""
    seg = store.segments[task.segment_id]
    return {
        "task_id": task.task_id,
        "segment_id": task.segment_id,
        "segment": seg.public_manifest(),
        "frame_url_template": f"/segments/{task.segment_id}/frames/{{n}}",
        "fps": seg.fps,
    }


_SEGMENT_FRAME_RE = re.compile(r"^/segments/([A-Za-z0-9_\-]+)/frames/(\d+)$")


class _Handler(BaseHTTPRequestHandler):
    server_version = "lungcrowd/0.1"

    def log_message(self, fmt, *args):  # quiet by default
        logger.debug("http: " + fmt, *args)

    # -- helpers

    def _json(self, status: int, obj) -> None:
        body = json.dumps(obj, sort_keys=True).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json; charset=utf-8")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _bytes(self, status: int, data: bytes, content_type: str) -> None:
        self.send_response(status)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def _read_json(self):
        length = int(self.headers.get("Content-Length", 0))
        raw = self.rfile.read(length) if length else b"{}"
        try:
            return json.loads(raw.decode("utf-8") or "{}")
        except (UnicodeDecodeError, json.JSONDecodeError):
            return None

    def _admin_ok(self) -> bool:
        token = self.server.admin_token
        return token is not None and self.headers.get("X-Admin-Token") == token

    # -- routes

    def do_POST(self):
        store: TaskStore = self.server.store
        path = urlparse(self.path).path
        if path == "/workers":
            body = self._read_json()
            if body is None:
                return self._json(400, {"error": "invalid JSON body"})
            worker_id = store.register_worker()
            return self._json(200, {"worker_id": worker_id})
        if path == "/submissions":
            body = self._read_json()
            if body is None:
                return self._json(400, {"error": "invalid JSON body"})
            try:
                sub = store.submit(
                    task_id=body.get("task_id"),
                    worker_id=body.get("worker_id"),
                    annotations=body.get("annotations", []),
                    wall_time_ms=body.get("wall_time_ms", 0),
                )
            except ServiceError as exc:
                status = 409 if "duplicate" in str(exc) or "complete" in str(exc) else 400
                return self._json(status, {"error": str(exc)})
            return self._json(200, {"submission_id": sub["submission_id"],
                                    "qc_status": sub["qc_status"]})
        return self._json(404, {"error": f"no such endpoint {path}"})

    def do_GET(self):
        store: TaskStore = self.server.store
        parsed = urlparse(self.path)
        path = parsed.path

        if path == "/tasks/next":
            params = parse_qs(parsed.query)
            worker = params.get("worker", [None])[0]
            if not worker:
                return self._json(400, {"error": "missing worker parameter"})
            try:
                task = store.assign_next(worker)
            except ServiceError as exc:
                return self._json(404, {"error": str(exc)})
            if task is None:
                self.send_response(204)
                self.send_header("Content-Length", "0")
                self.end_headers()
                return None
            return self._json(200, task_payload(store, task))

        m = _SEGMENT_FRAME_RE.match(path)
        if m:
            seg_id, n = m.group(1), int(m.group(2))
            seg = store.segments.get(seg_id)
            if seg is None or seg.directory is None:
                return self._json(404, {"error": f"unknown segment {seg_id!r}"})
            if not 0 <= n < seg.frame_count:
                return self._json(404, {"error": f"frame {n} out of range"})
            frame_file = seg.directory / seg.man["frames"][n]["file"]
            if not frame_file.exists():
                return self._json(404, {"error": "frame file missing"})
            return self._bytes(200, frame_file.read_bytes(), "image/png")

        if path == "/admin/report":
            if not self._admin_ok():
                return self._json(401, {"error": "admin token required"})
            return self._json(200, self.server.build_report())

        if path == "/admin/state":
            if not self._admin_ok():
                return self._json(401, {"error": "admin token required"})
            return self._json(200, {"state": store.snapshot(),
                                    "state_hash": store.state_hash()})

        if path == "/" and self.server.static_dir is not None:
            return self._redirect("/app/index.html")
        if path.startswith("/app") and self.server.static_dir is not None:
            return self._serve_static(path)

        return self._json(404, {"error": f"no such endpoint {path}"})

    def _redirect(self, target: str) -> None:
        self.send_response(302)
        self.send_header("Location", target)
        self.send_header("Content-Length", "0")
        self.end_headers()

    _CONTENT_TYPES = {
        ".html": "text/html; charset=utf-8",
        ".js": "text/javascript; charset=utf-8",
        ".css": "text/css; charset=utf-8",
        ".png": "image/png",
        ".json": "application/json; charset=utf-8",
        ".svg": "image/svg+xml",
    }

    def _serve_static(self, path: str) -> None:
        rel = path[len("/app"):].lstrip("/") or "index.html"
        root = Path(self.server.static_dir).resolve()
        target = (root / rel).resolve()
        if not str(target).startswith(str(root)) or not target.is_file():
            return self._json(404, {"error": "not found"})
        ctype = self._CONTENT_TYPES.get(target.suffix, "application/octet-stream")
        return self._bytes(200, target.read_bytes(), ctype)


class AnnotationServer(ThreadingHTTPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, addr, store: TaskStore, admin_token: str | None = None,
                 static_dir=None, ground_truth=None, overlap_threshold: float = 0.6,
                 overlap_mode: str = "reference"):
        super().__init__(addr, _Handler)
        self.store = store
        self.admin_token = admin_token
        self.static_dir = static_dir
        self.ground_truth = ground_truth
        self.overlap_threshold = overlap_threshold
        self.overlap_mode = overlap_mode

    def build_report(self) -> dict:
        from .evaluation import compute_metrics, match

        subs = self.store.all_submissions()
        basic = {
            "tasks": [t.to_dict() for t in
                      (self.store.tasks[tid] for tid in sorted(self.store.tasks))],
            "submissions": [{k: s[k] for k in
                             ("submission_id", "task_id", "worker_id", "qc_status", "payable")}
                            for s in subs],
        }
        if self.ground_truth is None:
            basic["note"] = "ground truth not configured; counts only"
            return basic
        mr = match(subs, self.ground_truth, self.store.segments,
                   threshold=self.overlap_threshold, overlap_mode=self.overlap_mode)
        report = compute_metrics(mr, self.ground_truth, self.store.segments)
        out = report.to_dict()
        out["tasks"] = basic["tasks"]
        return out


def serve(store: TaskStore, host: str = "127.0.0.1", port: int = 8077,
          **kwargs) -> AnnotationServer:
    """Create the HTTP server (caller runs serve_forever or a thread)."""
    server = AnnotationServer((host, port), store, **kwargs)
    logger.info("serving on http://%s:%d", host, server.server_address[1])
    return server
