"""Local HTTP service for the cluster review workflow.

Read-only over the run directory except for concept label assignment,
which persists atomically to concepts.json.  The built frontend, when
present, is served from the root path.
"""

from __future__ import annotations

import io
import json
import os
import tempfile
import threading
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException
from fastapi.responses import FileResponse, Response
from fastapi.staticfiles import StaticFiles
from PIL import Image
from pydantic import BaseModel

from . import data_model as dm
from .concepts import read_concept_model
from .errors import DataError, EndosegError
from .pipeline import cluster_summaries, preprocess_image


class LabelRequest(BaseModel):
    name: str


def _png_response(image: Image.Image) -> Response:
    buf = io.BytesIO()
    image.save(buf, format="PNG")
    return Response(content=buf.getvalue(), media_type="image/png")


def create_app(run_dir: Path, frontend_dist: Path | None = None) -> FastAPI:
    run_dir = Path(run_dir)
    missing = [str(p) for p in (dm.config_path(run_dir),
                                dm.concept_model_path(run_dir))
               if not p.is_file()]
    if missing:
        raise DataError(f"run directory {run_dir} is missing artifacts: "
                        f"{', '.join(missing)}")

    from .cli import read_run
    cfg, manifest, _ = read_run(run_dir)
    model = read_concept_model(dm.concept_model_path(run_dir),
                               labels_path=dm.concepts_json_path(run_dir))
    label_lock = threading.Lock()

    app = FastAPI(title="endoseg review service")

    def current_labels() -> dict[int, str]:
        labels = {c: f"cluster-{c}" for c in range(model.k)}
        path = dm.concepts_json_path(run_dir)
        if path.is_file():
            labels.update({int(k): str(v)
                           for k, v in json.loads(path.read_text()).items()})
        return labels

    @app.get("/api/config")
    def get_config() -> dict:
        return json.loads(dm.config_path(run_dir).read_text())

    @app.get("/api/clusters")
    def get_clusters() -> list[dict]:
        try:
            return cluster_summaries(run_dir)
        except EndosegError as exc:
            raise HTTPException(status_code=409, detail=str(exc))

    @app.get("/api/clusters/{cluster_id}/exemplars")
    def get_exemplars(cluster_id: int, n: int = 8) -> list[dict]:
        if not 0 <= cluster_id < model.k:
            raise HTTPException(status_code=404,
                                detail=f"cluster {cluster_id} out of range")
        try:
            summaries = cluster_summaries(run_dir, exemplars_per_cluster=n)
        except EndosegError as exc:
            raise HTTPException(status_code=409, detail=str(exc))
        exemplars = summaries[cluster_id]["exemplars"]
        for ex in exemplars:
            seg_map, _, _, _ = dm.read_segment_file(run_dir, ex["image_id"])
            ex["bbox"] = list(seg_map.bboxes[ex["segment_id"]])
        return exemplars

    @app.post("/api/clusters/{cluster_id}/label")
    def post_label(cluster_id: int, req: LabelRequest) -> dict:
        if not 0 <= cluster_id < model.k:
            raise HTTPException(status_code=404,
                                detail=f"cluster {cluster_id} out of range")
        name = req.name.strip()
        if not name:
            raise HTTPException(status_code=400, detail="label must be non-empty")
        with label_lock:
            labels = current_labels()
            labels[cluster_id] = name
            doc = {str(k): v for k, v in sorted(labels.items())}
            fd, tmp = tempfile.mkstemp(dir=run_dir, suffix=".json")
            with os.fdopen(fd, "w") as fh:
                fh.write(json.dumps(doc, indent=2, sort_keys=True) + "\n")
            os.replace(tmp, dm.concepts_json_path(run_dir))
        return {"cluster_id": cluster_id, "name": name}

    @app.get("/api/images/{image_id}/mask")
    def get_mask(image_id: str) -> FileResponse:
        path = dm.mask_path(run_dir, image_id)
        if not path.is_file():
            raise HTTPException(status_code=404,
                                detail=f"no mask for image {image_id!r}")
        return FileResponse(path, media_type="image/png")

    @app.get("/api/images/{image_id}/overlay")
    def get_overlay(image_id: str, cluster: int | None = None) -> Response:
        try:
            entry = manifest.entry(image_id)
            base = (preprocess_image(entry, cfg) * 255).astype(np.uint8)
        except EndosegError as exc:
            raise HTTPException(status_code=404, detail=str(exc))
        if cluster is None:
            return _png_response(Image.fromarray(base))
        try:
            mask = dm.read_mask(run_dir, image_id)
        except EndosegError as exc:
            raise HTTPException(status_code=404, detail=str(exc))
        selected = mask.labels == cluster + 1
        if selected.shape != base.shape[:2]:
            raise HTTPException(status_code=409,
                                detail="mask and image dimensions disagree; "
                                       "check preprocess.resize_to")
        tint = np.array(dm.mask_palette(cluster + 2)[cluster + 1], dtype=np.float64)
        blended = base.astype(np.float64)
        blended[selected] = 0.45 * blended[selected] + 0.55 * tint
        return _png_response(Image.fromarray(blended.astype(np.uint8)))

    if frontend_dist and Path(frontend_dist).is_dir():
        app.mount("/", StaticFiles(directory=frontend_dist, html=True),
                  name="frontend")

    return app
