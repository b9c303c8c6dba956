"""HTTP inference service: stateless stylized rendering over loaded
checkpoints.

Checkpoints load once at startup as immutable snapshots; every request
renders through the same pipeline the CLI uses, so equivalent requests
produce identical pixels.  Invalid requests answer 400, missing
capabilities 422, unknown ids 404.
"""

import base64
import io
from typing import Optional

import numpy as np
from fastapi import FastAPI, Request
from fastapi.encoders import jsonable_encoder
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from PIL import Image
from pydantic import BaseModel, Field, model_validator

from .errors import CapabilityError, ConfigError, ConRFError
from .pipeline import (load_pipeline, register_style_image, render_stylized,
                       resolve_camera, scale_camera)


class StyleSource(BaseModel):
    text: Optional[str] = None
    image_b64: Optional[str] = None
    image_id: Optional[str] = None
    stats: Optional[dict] = None

    @model_validator(mode="after")
    def exactly_one_source(self):
        set_fields = [k for k in ("text", "image_b64", "image_id", "stats")
                      if getattr(self, k) is not None]
        if len(set_fields) != 1:
            raise ValueError(f"style source must set exactly one field, got {set_fields}")
        return self


class PoseSpec(BaseModel):
    view: Optional[int] = None
    c2w: Optional[list] = None
    focal: Optional[float] = None
    width: Optional[int] = None
    height: Optional[int] = None
    near: Optional[float] = None
    far: Optional[float] = None

    @model_validator(mode="after")
    def view_or_explicit(self):
        if self.view is None and self.c2w is None:
            raise ValueError("pose needs either a view index or an explicit c2w")
        if self.view is None and None in (self.focal, self.width, self.height):
            raise ValueError("explicit poses need focal, width and height")
        return self


class RenderRequest(BaseModel):
    pose: PoseSpec
    style: StyleSource
    style2: Optional[StyleSource] = None
    content_text: Optional[str] = None
    threshold: float = Field(default=0.5, ge=-1.0, le=1.0)
    resolution: Optional[int] = Field(default=None, gt=0,
                                      description="square output resolution, multiple of 4")
    checkpoint: Optional[str] = None

    @model_validator(mode="after")
    def local_mode_consistency(self):
        if (self.style2 is None) != (self.content_text is None):
            raise ValueError(
                "a content prompt is required exactly when two styles are given")
        return self


class RenderResponse(BaseModel):
    image_b64: str
    mask_b64: Optional[str] = None
    width: int
    height: int
    timings: dict
    checkpoint_id: str


def _png_b64(array):
    buf = io.BytesIO()
    Image.fromarray(array).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode()


def _decode_image_b64(data):
    try:
        raw = base64.b64decode(data)
        with Image.open(io.BytesIO(raw)) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except Exception as e:
        raise ConfigError(f"undecodable style image: {e}") from e


def build_states(checkpoint_specs, dataset=None):
    """{'id': PipelineState} from 'path' or 'id=path' strings."""
    states = {}
    for spec in checkpoint_specs:
        name, sep, path = spec.partition("=")
        if not sep:
            name, path = None, spec
        state = load_pipeline(path, dataset=dataset)
        states[name or state.checkpoint.stage] = state
    return states


def create_app(states, ui_dir=None):
    if not states:
        raise ConfigError("the service needs at least one checkpoint")
    default_id = next(iter(states))
    app = FastAPI(title="conrf inference service")
    if ui_dir:
        from fastapi.staticfiles import StaticFiles
        app.mount("/ui", StaticFiles(directory=ui_dir, html=True), name="ui")

    @app.exception_handler(RequestValidationError)
    async def invalid_request(request: Request, exc):
        return JSONResponse(status_code=400,
                            content={"error": "invalid request",
                                     "detail": jsonable_encoder(exc.errors())})

    @app.exception_handler(ConRFError)
    async def domain_error(request: Request, exc):
        if isinstance(exc, CapabilityError):
            status = 422
        elif isinstance(exc, ConfigError):
            status = 400
        else:
            status = 500
        return JSONResponse(status_code=status,
                            content={"error": type(exc).__name__,
                                     "detail": str(exc)})

    def state_for(checkpoint_id):
        cid = checkpoint_id or default_id
        return cid, states.get(cid)

    @app.get("/healthz")
    def healthz():
        return {"status": "ok"}

    @app.get("/checkpoints")
    def checkpoints():
        return {"checkpoints": [
            {"id": cid, "stage": st.checkpoint.stage,
             "step": st.checkpoint.step,
             "supports_selection": st.supports_selection}
            for cid, st in states.items()]}

    @app.get("/views/{dataset_name}")
    def views(dataset_name: str):
        for st in states.values():
            ds = st.dataset
            if ds is not None and ds.name == dataset_name:
                return {"dataset": ds.name, "views": [
                    {"index": i, "split": ds.splits[i],
                     "width": ds.cameras[i].width,
                     "height": ds.cameras[i].height}
                    for i in range(len(ds))]}
        return JSONResponse(status_code=404,
                            content={"error": f"unknown dataset {dataset_name!r}"})

    @app.get("/schema/render-request")
    def render_schema():
        return RenderRequest.model_json_schema()

    @app.post("/styles")
    def upload_style(body: dict):
        if "image_b64" not in body:
            raise ConfigError("style upload needs image_b64")
        image = _decode_image_b64(body["image_b64"])
        sid = None
        for st in states.values():
            sid = register_style_image(st, image)
        return {"id": sid}

    @app.post("/render", response_model=RenderResponse)
    def render(req: RenderRequest):
        cid, state = state_for(req.checkpoint)
        if state is None:
            return JSONResponse(status_code=404,
                                content={"error": f"unknown checkpoint {cid!r}"})

        def style_dict(src):
            if src is None:
                return None
            if src.text is not None:
                return {"text": src.text}
            if src.image_b64 is not None:
                return {"image": _decode_image_b64(src.image_b64)}
            if src.image_id is not None:
                return {"image_id": src.image_id}
            return {"stats": src.stats}

        camera = resolve_camera(state, req.pose.model_dump())
        if req.resolution:
            camera = scale_camera(camera, req.resolution)
        result = render_stylized(
            state, camera, style_dict(req.style),
            style2=style_dict(req.style2), content_text=req.content_text,
            threshold=req.threshold)
        mask = result["mask"]
        return RenderResponse(
            image_b64=_png_b64(result["image"]),
            mask_b64=None if mask is None else _png_b64(
                (mask * 255).astype(np.uint8)),
            width=int(result["image"].shape[1]),
            height=int(result["image"].shape[0]),
            timings=result["timings"],
            checkpoint_id=cid)

    return app
