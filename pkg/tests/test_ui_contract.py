"""Cross-checks between the browser UI and the task service.

The UI ships an API schema fixture its tests validate submissions against;
here the same fixture is checked against the live server contract so the
two sides cannot drift apart. The built UI bundle, when present, must be
served under /app.
"""

import json
import threading
from pathlib import Path

import jsonschema
import pytest
import requests

from lungcrowd.service import TaskStore, serve

from test_service import light_segment

FRONTEND = Path(__file__).resolve().parent.parent / "frontend"
SCHEMA_PATH = FRONTEND / "test" / "fixtures" / "api_schema.json"


@pytest.fixture(scope="module")
def schema():
    return json.loads(SCHEMA_PATH.read_text(encoding="utf-8"))


def fresh_store():
    sid = "p001-left_upper"
    segments = {sid: light_segment(sid)}
    store = TaskStore(segments=segments)
    store.create_tasks([sid], target=5)
    return store, segments[sid]


class TestSchemaFixtureMatchesServer:
    def test_schema_is_valid_draft7(self, schema):
        jsonschema.Draft7Validator.check_schema(schema)

    def test_schema_valid_payload_is_accepted_by_store(self, schema):
        store, seg = fresh_store()
        worker = store.register_worker()
        marker = seg.marker
        payload = {
            "task_id": "t0001",
            "worker_id": worker,
            "annotations": [
                {"frame_index": marker["frame_span"][0],
                 "box": list(marker["box"]), "label": "qc"},
                {"frame_index": 2, "box": [1, 2, 5, 6], "label": "nodule"},
            ],
            "wall_time_ms": 1500,
        }
        jsonschema.validate(payload, schema)  # UI side would send this
        sub = store.submit(task_id=payload["task_id"],
                           worker_id=payload["worker_id"],
                           annotations=payload["annotations"],
                           wall_time_ms=payload["wall_time_ms"])
        assert sub["qc_status"] == "passed"

    def test_labels_enum_matches_server(self, schema):
        from lungcrowd.service import VALID_LABELS

        ann_schema = schema["properties"]["annotations"]["items"]
        assert tuple(ann_schema["properties"]["label"]["enum"]) == VALID_LABELS

    def test_schema_rejects_what_server_rejects(self, schema):
        from lungcrowd.errors import ServiceError

        store, _ = fresh_store()
        worker = store.register_worker()
        bad_annotations = [
            {"frame_index": 0, "box": [1, 2, 3], "label": "nodule"},  # 3-tuple
            {"frame_index": 0, "box": [1, 2, 3, 4], "label": "cat"},  # bad label
            {"box": [1, 2, 3, 4], "label": "nodule"},  # missing frame
        ]
        for ann in bad_annotations:
            payload = {"task_id": "t0001", "worker_id": worker,
                       "annotations": [ann], "wall_time_ms": 0}
            with pytest.raises(jsonschema.ValidationError):
                jsonschema.validate(payload, schema)
            with pytest.raises(ServiceError):
                store.submit(task_id="t0001", worker_id=worker,
                             annotations=[ann])


class TestStaticBundle:
    @pytest.mark.skipif(not (FRONTEND / "dist" / "index.html").exists(),
                        reason="frontend not built (run `npm run build` in frontend/)")
    def test_served_under_app_route(self):
        store, _ = fresh_store()
        server = serve(store, port=0, admin_token="t",
                       static_dir=FRONTEND / "dist")
        thread = threading.Thread(target=server.serve_forever, daemon=True)
        thread.start()
        base = f"http://127.0.0.1:{server.server_address[1]}"
        try:
            r = requests.get(f"{base}/app/index.html")
            assert r.status_code == 200
            assert "Lung nodule annotation" in r.text
            r = requests.get(f"{base}/app/main.js")
            assert r.status_code == 200
            assert "text/javascript" in r.headers["Content-Type"]
            r = requests.get(f"{base}/", allow_redirects=False)
            assert r.status_code == 302
            # path traversal stays inside the bundle directory
            r = requests.get(f"{base}/app/../tsconfig.json")
            assert r.status_code == 404
        finally:
            server.shutdown()
