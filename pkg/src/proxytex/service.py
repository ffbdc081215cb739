"""HTTP render service backing the interactive viewer.

Endpoints:

* ``GET /health`` -- liveness probe.
* ``GET /instances`` -- instance ids, latent codes and table statistics,
  proxy roles, pose ranges, and camera defaults.
* ``POST /render`` -- JSON render request -> RGBA PNG bytes.

Renders are pure functions of (checkpoint, request): the model is loaded
once, parameters are read-only, and identical payloads produce identical
bytes. Malformed requests return 400 with field-level messages.
"""

from __future__ import annotations

import io
from typing import Literal

import cv2
import numpy as np
import torch
from fastapi import FastAPI, HTTPException, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse, Response
from pydantic import BaseModel, Field, model_validator

from .dataset import proxies_from_metadata
from .geometry import Pose, rotation_from_quaternion
from .imaging import RgbaImage, composite_over_gray, unpremultiply
from .model import interpolate_latents
from .training import TrainState, load_checkpoint

UNET_DIVISOR = 32


class OrbitParams(BaseModel):
    yaw_deg: float = 0.0
    pitch_deg: float = 0.0
    distance: float | None = Field(default=None, gt=0)


class PoseParams(BaseModel):
    quaternion: list[float] = Field(min_length=4, max_length=4)
    translation: list[float] = Field(min_length=3, max_length=3)


class InterpolationPair(BaseModel):
    instance_a: str
    instance_b: str
    t: float = Field(ge=0.0, le=1.0)


class RenderRequest(BaseModel):
    """Exactly one latent source; pose via orbit parameters or an explicit
    quaternion + translation (orbit at the dataset distance by default)."""

    instance_id: str | None = None
    z: list[float] | None = None
    pair: InterpolationPair | None = None
    proxies_of: str | None = None
    orbit: OrbitParams | None = None
    pose: PoseParams | None = None
    size: int = 256
    background: Literal["gray", "transparent"] = "gray"

    @model_validator(mode="after")
    def _check(self) -> "RenderRequest":
        sources = [self.instance_id is not None, self.z is not None,
                   self.pair is not None]
        if sum(sources) != 1:
            raise ValueError(
                "exactly one of instance_id, z, pair must be provided"
            )
        if self.orbit is not None and self.pose is not None:
            raise ValueError("provide orbit or pose, not both")
        if self.size < UNET_DIVISOR or self.size % UNET_DIVISOR != 0:
            raise ValueError(f"size must be a positive multiple of {UNET_DIVISOR}")
        return self


def _encode_png(img: RgbaImage) -> bytes:
    rgba = np.concatenate([img.rgb, img.alpha[..., None]], axis=2)
    data = np.round(rgba * 255.0).astype(np.uint8)
    ok, buf = cv2.imencode(".png", data[..., [2, 1, 0, 3]])
    if not ok:
        raise RuntimeError("PNG encoding failed")
    return bytes(buf)


class RenderService:
    """Stateless-per-request renderer over one loaded checkpoint."""

    def __init__(self, state: TrainState):
        if state.dataset_meta is None:
            raise ValueError("checkpoint carries no dataset metadata")
        self.state = state
        self.model = state.model
        self.model.eval()
        self.meta = state.dataset_meta
        self.default_distance = float(
            self.meta.get("pose_ranges", {}).get("distance", 2.3)
        )

    def instance_ids(self) -> list[str]:
        return list(self.model.latents.instance_ids)

    def instances_payload(self) -> dict:
        codes = self.model.latents.codes.detach()
        return {
            "instances": [
                {"id": iid, "z": codes[i].tolist()}
                for i, iid in enumerate(self.model.latents.instance_ids)
            ],
            "latent_dim": self.model.config.latent_dim,
            "latent_stats": self.model.latents.stats(),
            "proxy_roles": self.meta["proxy_roles"],
            "pose_ranges": self.meta.get("pose_ranges", {}),
            "intrinsics": self.meta["intrinsics"],
            "default_distance": self.default_distance,
        }

    def _resolve_latent(self, req: RenderRequest) -> tuple[torch.Tensor, str]:
        """Returns (z, proxy-source instance id)."""
        latents = self.model.latents
        if req.instance_id is not None:
            z = latents.get([req.instance_id])[0].detach()
            return z, req.instance_id
        if req.pair is not None:
            z_a = latents.get([req.pair.instance_a])[0].detach()
            z_b = latents.get([req.pair.instance_b])[0].detach()
            z = interpolate_latents(z_a, z_b, req.pair.t)
            return z, req.proxies_of or req.pair.instance_a
        z = torch.tensor(req.z, dtype=torch.float32)
        if z.shape != (self.model.config.latent_dim,):
            raise ValueError(
                f"z must have {self.model.config.latent_dim} entries"
            )
        return z, req.proxies_of or self.instance_ids()[0]

    def _resolve_pose(self, req: RenderRequest) -> Pose:
        if req.pose is not None:
            return Pose(
                rotation=rotation_from_quaternion(req.pose.quaternion),
                translation=np.array(req.pose.translation, dtype=np.float64),
            )
        orbit = req.orbit or OrbitParams()
        return Pose.orbit(
            orbit.yaw_deg, orbit.pitch_deg,
            orbit.distance or self.default_distance,
        )

    def render_png(self, req: RenderRequest) -> bytes:
        from .dataset import _intrinsics_from_dict

        z, proxy_instance = self._resolve_latent(req)
        proxies = proxies_from_metadata(self.meta, proxy_instance)
        pose = self._resolve_pose(req)
        intr = _intrinsics_from_dict(self.meta["intrinsics"]).scaled(
            req.size, req.size
        )
        with torch.no_grad():
            out = self.model.render(z, pose, proxies, intr)
        rgba = out.to_rgba()
        if req.background == "gray":
            comp = composite_over_gray(rgba)
            img = RgbaImage(rgb=comp.rgb, alpha=np.ones(comp.rgb.shape[:2]),
                            premultiplied=False)
        else:
            img = unpremultiply(rgba)
        return _encode_png(img)


def create_app(state_or_path) -> FastAPI:
    """Build the FastAPI app from a TrainState or a checkpoint path."""
    state = (state_or_path if isinstance(state_or_path, TrainState)
             else load_checkpoint(state_or_path))
    service = RenderService(state)
    app = FastAPI(title="proxytex render service")
    app.state.service = service

    @app.exception_handler(RequestValidationError)
    async def _validation_handler(request: Request, exc: RequestValidationError):
        return JSONResponse(
            status_code=400,
            content={"detail": [
                {"loc": list(err.get("loc", ())), "msg": err.get("msg", "")}
                for err in exc.errors()
            ]},
        )

    @app.get("/health")
    def health():
        return {"status": "ok"}

    @app.get("/instances")
    def instances():
        return service.instances_payload()

    @app.post("/render")
    def render(req: RenderRequest):
        try:
            png = service.render_png(req)
        except (KeyError, ValueError) as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc
        except Exception as exc:  # render failure
            raise HTTPException(status_code=500, detail=str(exc)) from exc
        return Response(content=png, media_type="image/png")

    return app


def serve(checkpoint_path: str, host: str = "127.0.0.1", port: int = 8000) -> None:
    import uvicorn

    uvicorn.run(create_app(checkpoint_path), host=host, port=port)
