"""HTTP API for live pair annotation and prediction review."""

from __future__ import annotations

import json
import os
from pathlib import Path

from fastapi import FastAPI, Query
from fastapi.responses import JSONResponse
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel, Field

from .annotation import (
    AnnotationStore,
    ConflictError,
    NoPairsRemainingError,
    NothingToUndoError,
    ValidationError,
    review_queue,
)
from .classifier import Thresholds
from .manifest import load_manifest
from .types import PairLabel, SimilarityType


class LabelBody(BaseModel):
    label: str
    similarity_types: list[str] = Field(default_factory=list)
    attempt_id: str | None = None


def _with_urls(presentation: dict, data_dir: Path) -> dict:
    """Rewrite absolute crop paths into /files/ URLs."""

    def url(path_str: str) -> str:
        rel = os.path.relpath(path_str, data_dir)
        return f"/files/{rel}"

    out = dict(presentation)
    for side in ("a", "b"):
        obj = dict(out[side])
        obj["crops"] = [url(p) for p in obj["crops"]]
        obj["all_crops"] = [url(p) for p in obj["all_crops"]]
        out[side] = obj
    return out


def create_app(
    data_dir: str | Path,
    log_path: str | Path,
    review_predictions: dict | None = None,
    ui_dir: str | Path | None = None,
) -> FastAPI:
    """Annotation service over the manifest at data_dir/manifest.json.

    review_predictions, when given, maps scene_id -> {pair key -> score}
    and reorders each scene's queue most-ambiguous-first.
    """
    data_dir = Path(data_dir)
    manifest = load_manifest(data_dir / "manifest.json")
    scenes = manifest.scene_map()
    queue_order = None
    if review_predictions:
        queue_order = {
            scene_id: review_queue(scores, Thresholds())
            for scene_id, scores in review_predictions.items()
        }
    store = AnnotationStore.open(scenes, log_path, queue_order)

    app = FastAPI(title="doppel annotation service")
    app.state.store = store

    @app.exception_handler(ValidationError)
    async def _validation(_, exc):
        return JSONResponse(status_code=400, content={"detail": str(exc)})

    @app.exception_handler(ConflictError)
    async def _conflict(_, exc):
        return JSONResponse(status_code=409, content={"detail": str(exc)})

    @app.exception_handler(NothingToUndoError)
    async def _nothing(_, exc):
        return JSONResponse(status_code=409, content={"detail": str(exc)})

    @app.exception_handler(NoPairsRemainingError)
    async def _done(_, exc):
        return JSONResponse(
            status_code=404,
            content={"detail": str(exc), "reason": "no_pairs_remaining"},
        )

    @app.exception_handler(KeyError)
    async def _missing(_, exc):
        return JSONResponse(status_code=404, content={"detail": str(exc)})

    @app.get("/api/scenes")
    def list_scenes():
        progress = store.progress()
        return [
            {"scene_id": scene_id, **progress[scene_id]}
            for scene_id in sorted(scenes)
        ]

    @app.get("/api/scenes/{scene_id}/pairs/next")
    def next_pair(scene_id: str):
        return _with_urls(store.next_pair(scene_id), data_dir)

    @app.post("/api/pairs/{a}/{b}/label")
    def submit_label(a: str, b: str, body: LabelBody, scene: str = Query(...)):
        try:
            label = PairLabel(body.label)
            types = frozenset(SimilarityType(t) for t in body.similarity_types)
        except ValueError as e:
            raise ValidationError(str(e)) from None
        event = store.submit_label(
            scene, a, b, label, types, attempt_id=body.attempt_id
        )
        return {"event_id": event.event_id, "progress": store.progress()[scene]}

    @app.post("/api/undo")
    def undo():
        event = store.undo()
        return {
            "event_id": event.event_id,
            "undone_event_id": event.payload["target_event_id"],
        }

    @app.get("/api/progress")
    def progress():
        return store.progress()

    @app.get("/api/export")
    def export():
        return store.export_doc()

    app.mount("/files", StaticFiles(directory=data_dir), name="files")
    if ui_dir is not None:
        app.mount("/", StaticFiles(directory=ui_dir, html=True), name="ui")
    return app


def load_review_predictions(pred_dir: str | Path) -> dict:
    """Read per-scene prediction documents into review-queue inputs."""
    out = {}
    for path in sorted(Path(pred_dir).glob("*.json")):
        doc = json.loads(path.read_text())
        out[doc["scene_id"]] = {
            (p["a"], p["b"]): p["score"] for p in doc["pairs"]
        }
    return out
