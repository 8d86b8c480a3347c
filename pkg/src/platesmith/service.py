"""HTTP review service: queue of generated plates, verdicts, progress stats.

The verdict log (verdicts.jsonl) is the source of truth: append-only, one
JSON object per line, latest entry per item wins.  Restarting the service
over the same log reproduces identical stats.  Queue order is FIFO by item
id with short-lived leases so two reviewers never hold the same item.

The JSON API contract is documented in API.md at the repository root.
"""

from __future__ import annotations

import io
import json
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from fastapi import FastAPI, HTTPException, Response
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel

from .dataset_io import decode_image, load_manifest
from .errors import DataError
from .grammar import validate_plate
from .ocr import recognize_plate

SUCCESS_STATUSES = ("success_type1", "success_ev")
FAILURE_REASONS = ("unreadable", "bad_pattern", "invalid_prefix", "invalid_suffix")
ALL_STATUSES = SUCCESS_STATUSES + tuple(f"failure_{r}" for r in FAILURE_REASONS)
DEFAULT_LEASE_SECONDS = 600.0


class VerdictIn(BaseModel):
    item_id: int
    status: str
    text: str | None = None
    note: str | None = None
    supersede: bool = False


@dataclass
class QueueItem:
    item_id: int
    image_rel: str
    guess_text: str = ""
    guess_confidences: list[float] = field(default_factory=list)


@dataclass
class ReviewState:
    """Mutable service state; all access goes through ``lock``."""

    root: Path
    verdicts_path: Path
    items: list[QueueItem]
    lease_seconds: float = DEFAULT_LEASE_SECONDS
    clock: callable = time.monotonic
    lock: threading.Lock = field(default_factory=threading.Lock)
    verdicts: dict[int, dict] = field(default_factory=dict)
    leases: dict[int, float] = field(default_factory=dict)
    _guess_cache: dict[int, tuple[str, list[float]]] = field(default_factory=dict)

    def load_log(self) -> None:
        self.verdicts.clear()
        if not self.verdicts_path.exists():
            return
        for line in self.verdicts_path.read_text().splitlines():
            if not line.strip():
                continue
            entry = json.loads(line)
            self.verdicts[int(entry["item_id"])] = entry

    def append_verdict(self, entry: dict) -> None:
        with self.verdicts_path.open("a") as handle:
            handle.write(json.dumps(entry, sort_keys=True) + "\n")
        self.verdicts[int(entry["item_id"])] = entry

    def machine_guess(self, item: QueueItem) -> tuple[str, list[float]]:
        if item.item_id not in self._guess_cache:
            img = decode_image(self.root / item.image_rel)
            text, detections = recognize_plate(img)
            self._guess_cache[item.item_id] = (
                text,
                [round(d.confidence, 4) for d in detections],
            )
        return self._guess_cache[item.item_id]


def build_state(
    manifest_path: Path | str,
    verdicts_path: Path | str | None = None,
    lease_seconds: float = DEFAULT_LEASE_SECONDS,
) -> ReviewState:
    manifest_path = Path(manifest_path)
    manifest = load_manifest(manifest_path)
    root = manifest_path.parent
    items = [
        QueueItem(item_id=i, image_rel=item.image)
        for i, item in enumerate(manifest.all_items())
    ]
    state = ReviewState(
        root=root,
        verdicts_path=Path(verdicts_path) if verdicts_path else root / "verdicts.jsonl",
        items=items,
        lease_seconds=lease_seconds,
    )
    state.load_log()
    return state


def _item_payload(state: ReviewState, item: QueueItem) -> dict:
    text, confidences = state.machine_guess(item)
    return {
        "item_id": item.item_id,
        "image_url": f"/api/image/{item.item_id}",
        "guess_text": text,
        "guess_confidences": confidences,
        "status": "pending",
    }


def _stats_payload(state: ReviewState) -> dict:
    counts = {status: 0 for status in ALL_STATUSES}
    for entry in state.verdicts.values():
        counts[entry["status"]] = counts.get(entry["status"], 0) + 1
    reviewed = len(state.verdicts)
    successes = counts["success_type1"] + counts["success_ev"]
    return {
        "total_items": len(state.items),
        "reviewed": reviewed,
        "pending": len(state.items) - reviewed,
        "counts": counts,
        "success_rate": successes / reviewed if reviewed else None,
        "ev_share": counts["success_ev"] / successes if successes else None,
    }


def create_app(state: ReviewState, ui_dir: Path | str | None = None) -> FastAPI:
    app = FastAPI(title="plate review service")

    @app.get("/api/queue/next")
    def queue_next():
        with state.lock:
            now = state.clock()
            for item in state.items:
                if item.item_id in state.verdicts:
                    continue
                lease = state.leases.get(item.item_id)
                if lease is not None and lease > now:
                    continue
                state.leases[item.item_id] = now + state.lease_seconds
                return _item_payload(state, item)
        return Response(status_code=204)

    @app.post("/api/verdict")
    def post_verdict(verdict: VerdictIn):
        if verdict.status not in ALL_STATUSES:
            raise HTTPException(422, detail=f"unknown status {verdict.status!r}")
        with state.lock:
            if not 0 <= verdict.item_id < len(state.items):
                raise HTTPException(404, detail=f"unknown item {verdict.item_id}")
            if verdict.status in SUCCESS_STATUSES:
                result = validate_plate(verdict.text or "")
                if not result.valid:
                    raise HTTPException(422, detail=result.reason)
                ev = any(c in ("Y", "Z") for c in verdict.text[6:])
                if ev != (verdict.status == "success_ev"):
                    raise HTTPException(
                        422, detail="status does not match the Y/Z suffix rule"
                    )
            entry = {
                "item_id": verdict.item_id,
                "status": verdict.status,
                "text": verdict.text,
                "note": verdict.note,
            }
            existing = state.verdicts.get(verdict.item_id)
            if existing is not None:
                same = all(existing.get(k) == entry[k] for k in ("status", "text", "note"))
                if same:
                    return {"stored": entry, "duplicate": True}
                if not verdict.supersede:
                    raise HTTPException(
                        409, detail="item already has a different verdict; set supersede"
                    )
            entry["ts"] = time.time()
            state.append_verdict(entry)
            state.leases.pop(verdict.item_id, None)
            return {"stored": entry, "duplicate": False}

    @app.get("/api/stats")
    def stats():
        with state.lock:
            return _stats_payload(state)

    @app.get("/api/image/{item_id}")
    def image(item_id: int):
        with state.lock:
            if not 0 <= item_id < len(state.items):
                raise HTTPException(404, detail=f"unknown item {item_id}")
            rel = state.items[item_id].image_rel
        raster = decode_image(state.root / rel)
        from PIL import Image

        arr = raster.data if raster.channels == 3 else raster.data[:, :, 0]
        buffer = io.BytesIO()
        Image.fromarray(arr).save(buffer, format="PNG")
        return Response(content=buffer.getvalue(), media_type="image/png")

    if ui_dir is not None and Path(ui_dir).is_dir():
        app.mount("/", StaticFiles(directory=str(ui_dir), html=True), name="ui")
    return app


def serve(
    manifest_path: str,
    port: int = 8400,
    host: str = "127.0.0.1",
    verdicts_path: str | None = None,
    ui_dir: str | None = None,
    lease_seconds: float = DEFAULT_LEASE_SECONDS,
) -> None:
    import uvicorn

    state = build_state(manifest_path, verdicts_path, lease_seconds)
    app = create_app(state, ui_dir)
    uvicorn.run(app, host=host, port=port, log_level="warning")
