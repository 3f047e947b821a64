"""HTTP backend for the interactive annotation workflow.

Serves slide views at the 1x/4x/16x levels, runs edge refinement on the
cached enhanced preview, and persists versioned annotation sets with
optimistic concurrency. Review mode locks magnification to the 16x working
scale so judgments stay at the margin scale.

Endpoints: GET /slides, GET /slides/{id}/view, POST /slides/{id}/refine,
GET|PUT /slides/{id}/annotations, GET /slides/{id}/overlay. Errors come back
as JSON {"error": code, "message": str}.
"""

from __future__ import annotations

import io
import logging
import os
import threading
from pathlib import Path

import numpy as np
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse, Response
from fastapi.staticfiles import StaticFiles
from PIL import Image

from . import aggregate, annotation, edge_refine, features, pipeline, tiler
from .errors import (
    BadWindow,
    DataRootMissing,
    EmptyRoi,
    GeometryMismatch,
    LevelForbiddenInReview,
    NoEdgeFound,
    NoInferenceResults,
    UnknownSlide,
    ValidationError,
    VersionConflict,
    VinkError,
)
from .slide_io import RasterImage, downsample_bilinear, load_slide, read_manifest

log = logging.getLogger("vink.service")

ALLOWED_LEVELS = (1, 4, 16)
REVIEW_LEVEL = 16

_STATUS = {
    UnknownSlide: 404,
    NoInferenceResults: 404,
    BadWindow: 400,
    LevelForbiddenInReview: 403,
    VersionConflict: 409,
    ValidationError: 422,
    EmptyRoi: 422,
    NoEdgeFound: 422,
    GeometryMismatch: 500,
    DataRootMissing: 500,
}

_ERROR_CODES = {
    UnknownSlide: "unknown_slide",
    NoInferenceResults: "no_inference_results",
    BadWindow: "bad_window",
    LevelForbiddenInReview: "level_forbidden_in_review",
    VersionConflict: "version_conflict",
    ValidationError: "validation_error",
    EmptyRoi: "empty_roi",
    NoEdgeFound: "no_edge_found",
    GeometryMismatch: "geometry_mismatch",
    DataRootMissing: "data_root_missing",
}


class SlideStore:
    """Per-slide images, previews, and annotation files under a data root.

    Reads never mutate state. Writes serialize per slide; expensive previews
    are computed once even under concurrent first requests.
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)
        if not self.root.is_dir():
            raise DataRootMissing(f"data root {self.root} does not exist")
        self.layout = pipeline.DataLayout(self.root)
        self._images: dict[str, RasterImage] = {}
        self._levels: dict[tuple[str, int], RasterImage] = {}
        self._enhanced: dict[str, edge_refine.EnhancedImage] = {}
        self._locks: dict[str, threading.Lock] = {}
        self._registry_lock = threading.Lock()

    def _lock(self, slide_id: str) -> threading.Lock:
        with self._registry_lock:
            return self._locks.setdefault(slide_id, threading.Lock())

    def list_slides(self) -> list[dict]:
        mdir = self.root / "manifests"
        out = []
        if mdir.is_dir():
            for path in sorted(mdir.glob("*.json")):
                try:
                    out.append(read_manifest(path).to_json())
                except Exception as exc:  # unreadable manifest: omit, keep serving
                    log.warning("skipping unreadable manifest %s: %s", path, exc)
        return sorted(out, key=lambda m: m["slide_id"])

    def manifest(self, slide_id: str):
        path = self.layout.manifest(slide_id)
        if not path.exists():
            raise UnknownSlide(f"no slide {slide_id!r}")
        return read_manifest(path)

    def image(self, slide_id: str) -> RasterImage:
        self.manifest(slide_id)
        with self._lock(slide_id):
            if slide_id not in self._images:
                _, img = load_slide(self.layout.slide_png(slide_id))
                self._images[slide_id] = img
            return self._images[slide_id]

    def level_image(self, slide_id: str, level: int) -> RasterImage:
        img = self.image(slide_id)
        if level == 1:
            return img
        with self._lock(slide_id):
            key = (slide_id, level)
            if key not in self._levels:
                self._levels[key] = downsample_bilinear(img, level)
            return self._levels[key]

    def enhanced(self, slide_id: str) -> edge_refine.EnhancedImage:
        preview = self.level_image(slide_id, REVIEW_LEVEL)
        with self._lock(slide_id):
            if slide_id not in self._enhanced:
                self._enhanced[slide_id] = edge_refine.enhance_preview(preview)
            return self._enhanced[slide_id]

    def annotations(self, slide_id: str) -> annotation.AnnotationSet:
        self.manifest(slide_id)
        path = self.layout.annotations(slide_id)
        if not path.exists():
            return annotation.AnnotationSet(slide_id=slide_id, version=0, annotations=[])
        return annotation.read_annotations(path)

    def put_annotations(self, slide_id: str, expected_version: int, payload: list) -> int:
        """Atomic versioned write: temp file + rename, one writer per slide."""
        with self._lock(slide_id):
            current = self.annotations(slide_id)
            if expected_version != current.version:
                raise VersionConflict(
                    f"expected version {expected_version}, store has {current.version}"
                )
            new_set = annotation.AnnotationSet.from_json(
                {
                    "slide_id": slide_id,
                    "version": current.version + 1,
                    "annotations": payload,
                }
            )
            target = self.layout.annotations(slide_id)
            target.parent.mkdir(parents=True, exist_ok=True)
            tmp = target.with_suffix(".json.tmp")
            annotation.write_annotations(new_set, tmp)
            os.replace(tmp, target)
            return new_set.version


def _png_response(img: RasterImage) -> Response:
    buf = io.BytesIO()
    Image.fromarray(img.pixels, mode="RGB").save(buf, format="PNG", compress_level=1)
    return Response(content=buf.getvalue(), media_type="image/png")


def _crop_window(base: RasterImage, x: int, y: int, w: int, h: int) -> RasterImage:
    """Window crop with white padding on every side (origins may be negative)."""
    out = np.full((h, w, 3), 255, dtype=np.uint8)
    sx0, sy0 = max(x, 0), max(y, 0)
    sx1, sy1 = min(x + w, base.width), min(y + h, base.height)
    if sx1 > sx0 and sy1 > sy0:
        out[sy0 - y : sy1 - y, sx0 - x : sx1 - x] = base.pixels[sy0:sy1, sx0:sx1]
    return RasterImage(out)


def create_app(data_root: str | Path) -> FastAPI:
    store = SlideStore(data_root)
    app = FastAPI(title="vink annotation service")
    app.state.store = store

    @app.exception_handler(VinkError)
    async def vink_error_handler(_request: Request, exc: VinkError):
        status = 500
        code = "internal_error"
        for cls in type(exc).__mro__:
            if cls in _STATUS:
                status = _STATUS[cls]
                code = _ERROR_CODES[cls]
                break
        return JSONResponse(status_code=status, content={"error": code, "message": str(exc)})

    @app.get("/slides")
    def list_slides():
        return store.list_slides()

    @app.get("/slides/{slide_id}/view")
    def get_view(
        slide_id: str,
        x: int = 0,
        y: int = 0,
        w: int | None = None,
        h: int | None = None,
        level: int = REVIEW_LEVEL,
        review: int = 0,
        enhanced: int = 0,
    ):
        """Crop of the requested level's downsample; x, y, w, h are in that
        level's pixel frame. Review mode serves only the 16x scale."""
        if level not in ALLOWED_LEVELS:
            raise BadWindow(f"level must be one of {ALLOWED_LEVELS}")
        if review and level < REVIEW_LEVEL:
            raise LevelForbiddenInReview("review mode is locked to the 16x scale")
        if enhanced and level != REVIEW_LEVEL:
            raise BadWindow("enhanced view exists only at the 16x scale")
        base = store.level_image(slide_id, level)
        if enhanced:
            gray = np.clip(np.rint(store.enhanced(slide_id).values * 255.0), 0, 255).astype(
                np.uint8
            )
            base = RasterImage(np.repeat(gray[:, :, None], 3, axis=2))
        if w is None:
            w = base.width
        if h is None:
            h = base.height
        if w < 1 or h < 1:
            raise BadWindow("window must span at least one pixel")
        if x >= base.width or y >= base.height or x + w <= 0 or y + h <= 0:
            raise BadWindow("window does not intersect the slide")
        return _png_response(_crop_window(base, x, y, w, h))

    @app.post("/slides/{slide_id}/refine")
    async def refine(slide_id: str, request: Request):
        body = await request.json()
        roi_points = body.get("roi") or []
        if len(roi_points) < 3:
            raise ValidationError("roi needs at least 3 points")
        params_json = body.get("params") or {}
        params = edge_refine.RefineParams(
            blur_sigma=float(params_json.get("blur_sigma", 20.0)),
            close_radius=int(params_json.get("close_radius", 3)),
            downsample_factor=int(params_json.get("downsample_factor", REVIEW_LEVEL)),
        )
        roi = edge_refine.RoiPolygon([(float(p[0]), float(p[1])) for p in roi_points])
        contour = edge_refine.refine_roi(store.enhanced(slide_id), roi, params)
        return {"slide_id": slide_id, "contour": [[int(x), int(y)] for x, y in contour]}

    @app.get("/slides/{slide_id}/annotations")
    def get_annotations(slide_id: str):
        return store.annotations(slide_id).to_json()

    @app.put("/slides/{slide_id}/annotations")
    async def put_annotations(slide_id: str, request: Request):
        body = await request.json()
        if "expected_version" not in body:
            raise ValidationError("expected_version is required")
        version = store.put_annotations(
            slide_id, int(body["expected_version"]), body.get("annotations", [])
        )
        return {"slide_id": slide_id, "version": version}

    @app.get("/slides/{slide_id}/overlay")
    def get_overlay(slide_id: str):
        manifest = store.manifest(slide_id)
        layout = store.layout
        if not layout.decisions(slide_id).exists() or not layout.regions(slide_id).exists():
            raise NoInferenceResults(f"no region decisions for {slide_id!r}")
        base = store.level_image(slide_id, REVIEW_LEVEL)
        regions = tiler.read_plan(layout.regions(slide_id))
        decisions = aggregate.read_decisions(layout.decisions(slide_id))
        equivocal = []
        if layout.cache(slide_id).exists():
            equivocal = pipeline.equivocal_display_regions(
                features.read_cache(layout.cache(slide_id))
            )
        overlay = aggregate.render_overlay(
            base,
            regions,
            decisions,
            slide_size=(manifest.width, manifest.height),
            equivocal_truth_regions=equivocal,
            factor=REVIEW_LEVEL,
        )
        return _png_response(overlay)

    static_dir = Path(__file__).resolve().parent.parent.parent / "frontend" / "dist"
    if static_dir.is_dir():
        app.mount("/", StaticFiles(directory=static_dir, html=True), name="ui")

    return app
