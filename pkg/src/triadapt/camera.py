"""Orbit cameras: pose sampling from the source distribution and pinhole rays.

Poses live on a look-at-origin orbit parameterized by (yaw, pitch, radius)
with a +y up-vector. yaw rotates about +y, pitch lifts toward +y; the frontal
pose (yaw = pitch = 0) puts the camera on the +z axis looking down -z.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .config import CameraConfig
from .errors import ConfigError


@dataclass(frozen=True)
class CameraPose:
    yaw: float
    pitch: float
    radius: float
    fov: float

    def position(self) -> torch.Tensor:
        """World-space camera center on the orbit sphere."""
        cp = math.cos(self.pitch)
        return torch.tensor(
            [
                self.radius * math.sin(self.yaw) * cp,
                self.radius * math.sin(self.pitch),
                self.radius * math.cos(self.yaw) * cp,
            ],
            dtype=torch.float32,
        )

    def view_direction(self) -> torch.Tensor:
        """Unit vector from the camera toward the origin."""
        p = self.position()
        return -p / torch.linalg.norm(p)


@dataclass
class RayBundle:
    origins: torch.Tensor  # (H, W, 3)
    directions: torch.Tensor  # (H, W, 3), unit norm
    near: float
    far: float


def sample_camera(gen: torch.Generator, dist: CameraConfig) -> CameraPose:
    """Uniform pose draw from the configured orbit bounds."""
    dist.validate()
    u = torch.rand(2, generator=gen, dtype=torch.float64)
    yaw = dist.yaw_min + (dist.yaw_max - dist.yaw_min) * u[0].item()
    pitch = dist.pitch_min + (dist.pitch_max - dist.pitch_min) * u[1].item()
    return CameraPose(yaw=yaw, pitch=pitch, radius=dist.radius, fov=dist.fov)


def rays_for(
    pose: CameraPose,
    resolution: int,
    near: float,
    far: float,
    dtype: torch.dtype = torch.float32,
) -> RayBundle:
    """Per-pixel pinhole rays for a look-at-origin camera.

    Pixel sample points sit at pixel centers, so odd resolutions place one
    ray exactly through the image center (and hence through the origin).
    """
    if resolution < 4:
        raise ConfigError(f"resolution must be >= 4, got {resolution}")
    if not (0.0 < near < far):
        raise ConfigError("rays require 0 < near < far")

    eye = pose.position().to(dtype)
    forward = -eye / torch.linalg.norm(eye)
    up = torch.tensor([0.0, 1.0, 0.0], dtype=dtype)
    right = torch.linalg.cross(forward, up)
    right = right / torch.linalg.norm(right)
    cam_up = torch.linalg.cross(right, forward)

    # Pixel centers in NDC [-1, 1]; +v points up in the image.
    steps = (torch.arange(resolution, dtype=dtype) + 0.5) / resolution * 2.0 - 1.0
    v, u = torch.meshgrid(-steps, steps, indexing="ij")
    half = math.tan(pose.fov / 2.0)
    dirs = (
        u[..., None] * (half * right)
        + v[..., None] * (half * cam_up)
        + forward
    )
    dirs = dirs / torch.linalg.norm(dirs, dim=-1, keepdim=True)
    origins = eye.expand(resolution, resolution, 3).contiguous()
    return RayBundle(origins=origins, directions=dirs, near=near, far=far)
