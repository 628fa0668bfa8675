"""Read-only inference over one trained style checkpoint.

ModelBundle loads a final checkpoint and answers sampling requests; the HTTP
layer (FastAPI) exposes exactly two endpoints, GET /model/info and
POST /sample, with JSON bodies and base64 PNG payloads. Every request is
stateless and the loaded model is never mutated, so concurrent requests and
service restarts always produce identical responses.
"""
from __future__ import annotations

import base64
import hashlib
import io
from pathlib import Path
from typing import Literal

import torch
from PIL import Image
from torch import Tensor

from .camera import project
from .deform import DeformNet, deform
from .errors import CheckpointError
from .mesh import DEFAULT_DTYPE, MorphParams
from .render import render
from .texture import TextureGenerator, generate_texture
from .trainer import (
    RunConfig,
    _camera_for,
    load_checkpoint,
    restore_model_space,
    restore_network,
)


class ValidationFailure(Exception):
    """A request field failed validation against the loaded checkpoint."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field
        self.message = message


def png_base64(image: Tensor) -> str:
    arr = (image.clamp(0, 1).numpy() * 255.0).round().astype("uint8")
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def write_obj(vertices: Tensor, faces: Tensor, uvs: Tensor, path: str | Path):
    """Minimal OBJ export with per-vertex texture coordinates."""
    lines = []
    for v in vertices.tolist():
        lines.append(f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}")
    for uv in uvs.tolist():
        lines.append(f"vt {uv[0]:.17g} {uv[1]:.17g}")
    for f in faces.tolist():
        a, b, c = f[0] + 1, f[1] + 1, f[2] + 1
        lines.append(f"f {a}/{a} {b}/{b} {c}/{c}")
    Path(path).write_text("\n".join(lines) + "\n")


class ModelBundle:
    """One loaded checkpoint: the morphable space, the style networks, and
    the run configuration. All sampling goes through this single code path so
    the CLI and the HTTP service cannot disagree."""

    def __init__(self, checkpoint_path: str | Path):
        path = Path(checkpoint_path)
        payload = load_checkpoint(path)
        for key in ("config_json", "model_space", "nets"):
            if key not in payload:
                raise CheckpointError(f"checkpoint {path} lacks '{key}'; not a final checkpoint")
        self.checkpoint_path = path
        self.checkpoint_hash = hashlib.sha256(path.read_bytes()).hexdigest()
        self.config = RunConfig.from_json(payload["config_json"])
        self.template, self.basis = restore_model_space(payload["model_space"])
        d_cfg = payload["nets"]["d_style"]["config"]
        # .to(DEFAULT_DTYPE) before restoring: the process-wide default dtype
        # may be float32 outside the test harness
        self.d_style = DeformNet(**d_cfg).to(DEFAULT_DTYPE)
        restore_network(self.d_style, payload["nets"]["d_style"])
        g_cfg = payload["nets"]["g_style"]["config"]
        self.g_style = TextureGenerator(k_latent=g_cfg["k_latent"],
                                        resolution=g_cfg["resolution"],
                                        w_dim=g_cfg["w_dim"]).to(DEFAULT_DTYPE)
        restore_network(self.g_style, payload["nets"]["g_style"])
        self.d_style.eval()
        self.g_style.eval()

    def info(self) -> dict:
        return {
            "k_beta": self.basis.k_shape,
            "k_psi": self.basis.k_expr,
            "k_z": self.config.k_latent,
            "render_size": self.config.render_size,
            "texture_resolution": self.config.texture_resolution,
            "style": self.config.prompt,
            "checkpoint_hash": self.checkpoint_hash,
            "camera_ranges": {
                "yaw": list(self.config.yaw_range),
                "pitch": list(self.config.pitch_range),
                "distance": self.config.distance,
            },
        }

    def _resolve_vector(self, name: str, value, k: int) -> Tensor:
        if value is None:
            return torch.zeros(k, dtype=DEFAULT_DTYPE)
        if len(value) != k:
            raise ValidationFailure(name, f"expected {k} values, got {len(value)}")
        t = torch.tensor([float(x) for x in value], dtype=DEFAULT_DTYPE)
        if not bool(torch.isfinite(t).all()):
            raise ValidationFailure(name, "values must be finite")
        return t

    def sample(self, beta=None, psi=None, z=None, z_seed=None,
               yaw: float = 0.0, pitch: float = 0.0,
               output: str = "all") -> dict:
        """Resolve a request into mesh/texture/render payloads.

        Stateless and deterministic: identical arguments always yield the
        identical payload.
        """
        if output not in ("mesh", "texture", "render", "all"):
            raise ValidationFailure("output", f"unknown selector {output!r}")
        for name, val in (("yaw", yaw), ("pitch", pitch)):
            try:
                val = float(val)
            except (TypeError, ValueError):
                raise ValidationFailure(name, "must be a number")
            if val != val or val in (float("inf"), float("-inf")):
                raise ValidationFailure(name, "must be finite")
        beta_t = self._resolve_vector("beta", beta, self.basis.k_shape)
        psi_t = self._resolve_vector("psi", psi, self.basis.k_expr)
        if z is not None:
            z_t = self._resolve_vector("z", z, self.config.k_latent)
            z_resolved: dict = {"z": [float(x) for x in z_t.tolist()]}
        elif z_seed is not None:
            try:
                seed = int(z_seed)
            except (TypeError, ValueError):
                raise ValidationFailure("z_seed", "must be an integer")
            if not 0 <= seed < 2**31:
                raise ValidationFailure("z_seed", "must be in [0, 2^31)")
            z_t = torch.randn(self.config.k_latent,
                              generator=torch.Generator().manual_seed(seed))
            z_resolved = {"z_seed": seed}
        else:
            z_t = torch.zeros(self.config.k_latent, dtype=DEFAULT_DTYPE)
            z_resolved = {"z": [0.0] * self.config.k_latent}
        cam = _camera_for(self.config, float(yaw), float(pitch))
        response: dict = {
            "params": {
                "beta": beta_t.tolist(),
                "psi": psi_t.tolist(),
                "yaw": float(yaw),
                "pitch": float(pitch),
                "output": output,
                **z_resolved,
            },
        }
        with torch.no_grad():
            mesh = deform(self.d_style, self.basis,
                          MorphParams(beta=beta_t, psi=psi_t))
            if output in ("mesh", "all"):
                response["mesh"] = {
                    "vertices": mesh.vertices.tolist(),
                    "faces": mesh.faces.tolist(),
                    "uvs": mesh.uvs.tolist(),
                    "landmark_vertices": list(self.template.landmark_vertices),
                }
            if output in ("texture", "render", "all"):
                texture = generate_texture(self.g_style, z_t)
                if output in ("texture", "all"):
                    response["texture_png"] = png_base64(texture)
                if output in ("render", "all"):
                    image = render(mesh, texture, cam, sigma=self.config.sigma)
                    response["render_png"] = png_base64(image)
        return response

    def export_sample(self, out_dir: str | Path, **kwargs) -> list[Path]:
        """Write a sample as mesh.obj, texture.png, render.png and
        params.json; byte-identical per identical arguments."""
        import json

        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        payload = self.sample(output="all", **kwargs)
        written = []
        obj = out_dir / "mesh.obj"
        m = payload["mesh"]
        write_obj(torch.tensor(m["vertices"], dtype=DEFAULT_DTYPE),
                  torch.tensor(m["faces"], dtype=torch.long),
                  torch.tensor(m["uvs"], dtype=DEFAULT_DTYPE), obj)
        written.append(obj)
        for key, name in (("texture_png", "texture.png"), ("render_png", "render.png")):
            path = out_dir / name
            path.write_bytes(base64.b64decode(payload[key]))
            written.append(path)
        params = out_dir / "params.json"
        params.write_text(json.dumps(payload["params"], sort_keys=True))
        written.append(params)
        return written


from pydantic import BaseModel


class SampleBody(BaseModel):
    beta: list[float] | None = None
    psi: list[float] | None = None
    z: list[float] | None = None
    z_seed: int | None = None
    yaw: float = 0.0
    pitch: float = 0.0
    output: Literal["mesh", "texture", "render", "all"] = "all"


def create_app(checkpoint_path: str | Path):
    """FastAPI app bound to one immutable checkpoint."""
    from fastapi import FastAPI, HTTPException

    bundle = ModelBundle(checkpoint_path)
    app = FastAPI(title="stylemorph", docs_url=None, redoc_url=None)
    app.state.bundle = bundle

    @app.get("/model/info")
    def model_info():
        return bundle.info()

    @app.post("/sample")
    def sample(body: SampleBody):
        try:
            return bundle.sample(beta=body.beta, psi=body.psi, z=body.z,
                                 z_seed=body.z_seed, yaw=body.yaw,
                                 pitch=body.pitch, output=body.output)
        except ValidationFailure as exc:
            raise HTTPException(status_code=422,
                                detail={"field": exc.field, "message": exc.message})

    return app
