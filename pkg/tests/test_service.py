import json

import pytest
from fastapi.testclient import TestClient

from platesmith.dataset_io import AnnotationRecord, write_dataset
from platesmith.grammar import CHAR_TO_CLASS
from platesmith.ocr import pixel_box_to_yolo
from platesmith.render import render_dataset
from platesmith.service import build_state, create_app


@pytest.fixture()
def dataset(tmp_path):
    items = render_dataset(3, size=(193, 72), seed=21)
    entries = []
    texts = []
    for item in items:
        lines = [
            (CHAR_TO_CLASS[c], *pixel_box_to_yolo(b, 193, 72))
            for c, b in zip(item.spec.text, item.boxes)
        ]
        entries.append((item.image, AnnotationRecord(image_path="", lines=lines), "generated"))
        texts.append(item.spec.text)
    write_dataset(tmp_path, "review", entries, seed=21)
    return tmp_path, texts


def make_client(tmp_path, lease_seconds=600.0):
    state = build_state(tmp_path / "manifest.json", lease_seconds=lease_seconds)
    return TestClient(create_app(state)), state


def test_queue_serves_fifo(dataset):
    tmp_path, texts = dataset
    client, _ = make_client(tmp_path)
    served = [client.get("/api/queue/next").json()["item_id"] for _ in range(3)]
    assert served == [0, 1, 2]
    assert client.get("/api/queue/next").status_code == 204  # all leased


def test_queue_guess_prefilled(dataset):
    tmp_path, texts = dataset
    client, _ = make_client(tmp_path)
    item = client.get("/api/queue/next").json()
    assert item["guess_text"] == texts[0]
    assert len(item["guess_confidences"]) == 8


def _status_for(text):
    return "success_ev" if any(c in "YZ" for c in text[6:]) else "success_type1"


def test_queue_drained_after_verdicts(dataset):
    tmp_path, texts = dataset
    client, _ = make_client(tmp_path)
    for item_id, text in enumerate(texts):
        response = client.post(
            "/api/verdict",
            json={"item_id": item_id, "status": _status_for(text), "text": text},
        )
        assert response.status_code == 200, response.text
    assert client.get("/api/queue/next").status_code == 204


def test_lease_expiry_reserves_item(dataset):
    tmp_path, _ = dataset
    client, state = make_client(tmp_path, lease_seconds=600.0)
    first = client.get("/api/queue/next").json()["item_id"]
    # same item is not served twice while the lease is live
    assert client.get("/api/queue/next").json()["item_id"] != first
    state.clock = lambda base=state.clock: base() + 601.0
    assert client.get("/api/queue/next").json()["item_id"] == first


def test_verdict_validation_and_idempotence(dataset):
    tmp_path, texts = dataset
    client, state = make_client(tmp_path)

    bad = client.post("/api/verdict", json={"item_id": 0, "status": "success_type1",
                                            "text": "KA1234QQ"})
    assert bad.status_code == 422
    assert bad.json()["detail"] == "invalid_suffix"

    unknown = client.post("/api/verdict", json={"item_id": 99, "status": "failure_unreadable"})
    assert unknown.status_code == 404

    ok = client.post("/api/verdict", json={"item_id": 0, "status": _status_for(texts[0]),
                                           "text": texts[0]})
    assert ok.status_code == 200

    # identical resubmit: 200, but only one log line
    again = client.post("/api/verdict", json={"item_id": 0, "status": _status_for(texts[0]),
                                              "text": texts[0]})
    assert again.status_code == 200 and again.json()["duplicate"]
    log_lines = state.verdicts_path.read_text().strip().splitlines()
    assert len(log_lines) == 1

    # conflicting resubmit without supersede: 409
    conflict = client.post("/api/verdict", json={"item_id": 0, "status": "failure_unreadable"})
    assert conflict.status_code == 409

    # explicit correction appends a superseding entry
    fixed = client.post("/api/verdict", json={"item_id": 0, "status": "failure_unreadable",
                                              "supersede": True})
    assert fixed.status_code == 200
    log_lines = state.verdicts_path.read_text().strip().splitlines()
    assert len(log_lines) == 2
    assert json.loads(log_lines[-1])["status"] == "failure_unreadable"


def test_verdict_ev_status_must_match_suffix(dataset):
    tmp_path, _ = dataset
    client, _ = make_client(tmp_path)
    response = client.post("/api/verdict", json={"item_id": 0, "status": "success_ev",
                                                 "text": "KA1234BC"})
    assert response.status_code == 422


def test_stats_aggregation(dataset):
    tmp_path, texts = dataset
    client, _ = make_client(tmp_path)
    empty = client.get("/api/stats").json()
    assert empty["success_rate"] is None and empty["reviewed"] == 0

    client.post("/api/verdict", json={"item_id": 0, "status": _status_for(texts[0]),
                                      "text": texts[0]})
    client.post("/api/verdict", json={"item_id": 1, "status": "failure_unreadable"})
    stats = client.get("/api/stats").json()
    assert stats["reviewed"] == 2
    assert stats["success_rate"] == 0.5
    assert stats["counts"]["failure_unreadable"] == 1


def test_stats_survive_restart(dataset):
    tmp_path, texts = dataset
    client, state = make_client(tmp_path)
    client.post("/api/verdict", json={"item_id": 0, "status": _status_for(texts[0]),
                                      "text": texts[0]})
    client.post("/api/verdict", json={"item_id": 1, "status": "failure_bad_pattern"})
    before = client.get("/api/stats").json()

    client2, _ = make_client(tmp_path)  # fresh state over the same log
    after = client2.get("/api/stats").json()
    assert after == before


def test_image_endpoint_serves_png(dataset):
    tmp_path, _ = dataset
    client, _ = make_client(tmp_path)
    response = client.get("/api/image/0")
    assert response.status_code == 200
    assert response.headers["content-type"] == "image/png"
    assert response.content[:8] == b"\x89PNG\r\n\x1a\n"
    assert client.get("/api/image/42").status_code == 404


def test_latest_verdict_wins_in_stats(dataset):
    tmp_path, texts = dataset
    client, _ = make_client(tmp_path)
    client.post("/api/verdict", json={"item_id": 0, "status": _status_for(texts[0]),
                                      "text": texts[0]})
    client.post("/api/verdict", json={"item_id": 0, "status": "failure_unreadable",
                                      "supersede": True})
    stats = client.get("/api/stats").json()
    assert stats["counts"]["failure_unreadable"] == 1
    assert stats["counts"][_status_for(texts[0])] == 0
    assert stats["reviewed"] == 1
