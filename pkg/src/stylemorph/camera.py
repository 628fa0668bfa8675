"""Pinhole camera: rigid transform, projection, and random pose sampling.

Screen convention: pixels, origin top-left, x right, y down. The camera sits
at the origin looking along +z; meshes are built around the origin and pushed
to positive depth by the camera translation.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from math import pi

import torch
from torch import Tensor

from .errors import ParameterError, ProjectionError
from .mesh import DEFAULT_DTYPE

_DEPTH_EPS = 1e-6


@dataclass
class Camera:
    focal: float
    principal: tuple[float, float]
    yaw: float = 0.0
    pitch: float = 0.0
    translation: tuple[float, float, float] = (0.0, 0.0, 4.0)
    size: tuple[int, int] = (256, 256)  # (W, H)

    def __post_init__(self):
        if self.focal <= 0:
            raise ParameterError("focal length must be positive")

    def rotation(self, dtype=DEFAULT_DTYPE, theta: Tensor | None = None) -> Tensor:
        """R = R_pitch @ R_yaw; `theta` = (yaw, pitch) tensor overrides for autograd."""
        if theta is None:
            yaw = torch.tensor(self.yaw, dtype=dtype)
            pitch = torch.tensor(self.pitch, dtype=dtype)
        else:
            yaw, pitch = theta[0], theta[1]
        cy, sy = torch.cos(yaw), torch.sin(yaw)
        cp, sp = torch.cos(pitch), torch.sin(pitch)
        one = torch.ones_like(cy)
        zero = torch.zeros_like(cy)
        r_yaw = torch.stack(
            [
                torch.stack([cy, zero, sy]),
                torch.stack([zero, one, zero]),
                torch.stack([-sy, zero, cy]),
            ]
        )
        r_pitch = torch.stack(
            [
                torch.stack([one, zero, zero]),
                torch.stack([zero, cp, -sp]),
                torch.stack([zero, sp, cp]),
            ]
        )
        return r_pitch @ r_yaw

    def to_json(self) -> str:
        return json.dumps(
            {
                "focal": self.focal,
                "principal": list(self.principal),
                "yaw": self.yaw,
                "pitch": self.pitch,
                "translation": list(self.translation),
                "size": list(self.size),
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "Camera":
        d = json.loads(text)
        return cls(
            focal=d["focal"],
            principal=tuple(d["principal"]),
            yaw=d["yaw"],
            pitch=d["pitch"],
            translation=tuple(d["translation"]),
            size=tuple(d["size"]),
        )


def camera_transform(cam: Camera, points: Tensor, theta: Tensor | None = None) -> Tensor:
    """World points -> camera coordinates (rigid transform)."""
    r = cam.rotation(dtype=points.dtype, theta=theta)
    t = torch.tensor(cam.translation, dtype=points.dtype)
    return points @ r.T + t


def project(cam: Camera, points: Tensor, theta: Tensor | None = None) -> Tensor:
    """Pinhole projection of (M, 3) world points to (M, 2) pixel coordinates.

    Raises ProjectionError listing indices of points at or behind the camera
    plane. Differentiable in `points` and in `theta` when given.
    """
    pc = camera_transform(cam, points, theta=theta)
    z = pc[:, 2]
    behind = z <= _DEPTH_EPS
    if bool(behind.any()):
        raise ProjectionError(torch.nonzero(behind).flatten().tolist())
    u = cam.focal * pc[:, 0] / z + cam.principal[0]
    v = cam.focal * pc[:, 1] / z + cam.principal[1]
    return torch.stack([u, v], dim=1)


@dataclass
class CameraRanges:
    """Sampling ranges for random training cameras."""

    yaw: tuple[float, float] = (-pi / 4, pi / 4)
    pitch: tuple[float, float] = (-pi / 12, pi / 12)
    distance: float = 4.0
    size: tuple[int, int] = (256, 256)
    focal_factor: float = 1.4  # focal = factor * image width

    def validate(self):
        if self.yaw[0] > self.yaw[1] or self.pitch[0] > self.pitch[1]:
            raise ParameterError("range lower bound exceeds upper bound")


def make_frontal_camera(size: int = 256, distance: float = 4.0, focal_factor: float = 1.4) -> Camera:
    return Camera(
        focal=focal_factor * size,
        principal=(size / 2.0, size / 2.0),
        translation=(0.0, 0.0, distance),
        size=(size, size),
    )


def sample_camera(rng: torch.Generator, ranges: CameraRanges) -> Camera:
    """Uniform yaw/pitch in the configured ranges; deterministic given rng state."""
    ranges.validate()
    u = torch.rand(2, generator=rng, dtype=torch.float64)
    yaw = ranges.yaw[0] + float(u[0]) * (ranges.yaw[1] - ranges.yaw[0])
    pitch = ranges.pitch[0] + float(u[1]) * (ranges.pitch[1] - ranges.pitch[0])
    w, h = ranges.size
    return Camera(
        focal=ranges.focal_factor * w,
        principal=(w / 2.0, h / 2.0),
        yaw=yaw,
        pitch=pitch,
        translation=(0.0, 0.0, ranges.distance),
        size=(w, h),
    )
