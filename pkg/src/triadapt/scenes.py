"""Procedural scene family and target-domain styles.

Source domain: a single shaded sphere per scene whose offset, radius, and
albedo are fixed smooth functions of the latent z. Ground-truth images come
from exact ray-sphere intersection, so they double as regression targets for
generator pretraining and as an oracle for render quality.

Target domains: 16 named styles ("style_00".."style_15"), each a fixed
palette remap of the foreground that preserves the shading pattern (the pose
cue) while changing hue strongly. Style transforms never touch background
pixels; geometry is shared with the source domain.
"""

from __future__ import annotations

import colorsys
import math
from dataclasses import dataclass, replace

import torch

from .camera import CameraPose, rays_for
from .config import CameraConfig
from .errors import InputError

# Fixed world-frame light; its highlight position in the image is the main
# signal a pose regressor can read off a rendered sphere.
LIGHT_DIR = torch.tensor([0.40, 0.50, 0.77], dtype=torch.float32)
LIGHT_DIR = LIGHT_DIR / torch.linalg.norm(LIGHT_DIR)
AMBIENT = 0.35
DIFFUSE = 0.65

N_STYLES = 16
_SCENE_PROJ_SEED = 90210


def style_names() -> list[str]:
    return [f"style_{i:02d}" for i in range(N_STYLES)]


def style_tints() -> torch.Tensor:
    """(16, 3) saturated hue-wheel tints, mutually well separated."""
    rows = []
    for i in range(N_STYLES):
        rows.append(colorsys.hsv_to_rgb(i / N_STYLES, 0.85, 0.95))
    return torch.tensor(rows, dtype=torch.float32)


_TINTS = style_tints()


@dataclass(frozen=True)
class SceneParams:
    center: torch.Tensor  # (3,) world offset of the sphere
    radius: float
    albedo: torch.Tensor  # (3,) base color in [0.15, 0.95]


def _scene_projection(latent_dim: int) -> torch.Tensor:
    gen = torch.Generator()
    gen.manual_seed(_SCENE_PROJ_SEED)
    w = torch.randn(7, latent_dim, generator=gen)
    return w / torch.linalg.norm(w, dim=1, keepdim=True)


_PROJ_CACHE: dict[int, torch.Tensor] = {}


def scene_from_latent(z: torch.Tensor) -> SceneParams:
    """Smooth, fixed map from latent to sphere parameters."""
    latent_dim = z.shape[-1]
    proj = _PROJ_CACHE.get(latent_dim)
    if proj is None:
        proj = _scene_projection(latent_dim)
        _PROJ_CACHE[latent_dim] = proj
    u = torch.tanh(0.8 * (proj.to(z.dtype) @ z))
    return SceneParams(
        center=(0.15 * u[:3]).float(),
        radius=float(0.30 + 0.08 * u[3]),
        albedo=(0.55 + 0.40 * u[4:7]).float(),
    )


def render_scene(
    scene: SceneParams,
    pose: CameraPose,
    resolution: int,
    cam: CameraConfig,
    background: float = 0.5,
) -> dict[str, torch.Tensor]:
    """Analytic render: exact silhouette, lambertian shading, exact depth.

    Returns rgb (H, W, 3), depth (H, W) with `far` fill outside the sphere,
    and fg (H, W) binary hit mask.
    """
    rays = rays_for(pose, resolution, cam.near, cam.far)
    o = rays.origins - scene.center
    d = rays.directions
    b = (o * d).sum(-1)
    c = (o * o).sum(-1) - scene.radius**2
    disc = b * b - c
    hit = disc > 0
    sq = torch.sqrt(torch.clamp(disc, min=0.0))
    t = -b - sq
    hit = hit & (t > cam.near) & (t < cam.far)

    p = rays.origins + t[..., None] * d
    n = (p - scene.center) / scene.radius
    shade = AMBIENT + DIFFUSE * torch.clamp((n * LIGHT_DIR).sum(-1), min=0.0)
    rgb_fg = torch.clamp(scene.albedo * shade[..., None], 0.0, 1.0)

    fg = hit.float()
    rgb = torch.where(hit[..., None], rgb_fg, torch.full_like(rgb_fg, background))
    depth = torch.where(hit, t, torch.full_like(t, cam.far))
    return {"rgb": rgb, "depth": depth, "fg": fg}


def style_id_from_name(name: str) -> int:
    names = style_names()
    if name not in names:
        raise InputError(f"unknown style token {name!r}; expected one of {names[0]}..{names[-1]}")
    return names.index(name)


def apply_style(rgb: torch.Tensor, fg: torch.Tensor, style_id: int) -> torch.Tensor:
    """Foreground palette remap for one style; background passes through.

    Luminance carries the shading pattern, so the pose cue survives the remap.
    """
    if not (0 <= style_id < N_STYLES):
        raise InputError(f"style_id must be in [0, {N_STYLES}), got {style_id}")
    tint = _TINTS[style_id].to(rgb.dtype)
    lum = (rgb * torch.tensor([0.299, 0.587, 0.114], dtype=rgb.dtype)).sum(-1, keepdim=True)
    styled = torch.clamp(0.15 * rgb + 1.15 * lum * tint, 0.0, 1.0)
    return torch.where(fg[..., None] > 0.5, styled, rgb)


def biased_pose_dist(cam: CameraConfig, bias: float) -> CameraConfig:
    """Shrink the orbit bounds toward frontal by `bias` (1.0 = unchanged).

    The toy target-domain images are drawn from this narrowed distribution,
    modeling the forward-facing bias a pretrained image prior carries.
    """
    return replace(
        cam,
        yaw_min=cam.yaw_min * bias,
        yaw_max=cam.yaw_max * bias,
        pitch_min=cam.pitch_min * bias,
        pitch_max=cam.pitch_max * bias,
    )


def sample_target_example(
    gen: torch.Generator,
    cam: CameraConfig,
    latent_dim: int,
    resolution: int,
    style_id: int | None = None,
    background: float = 0.5,
) -> dict[str, torch.Tensor]:
    """One target-domain training example: styled image + matching depth."""
    from .camera import sample_camera  # local to avoid cycle at import time

    if style_id is None:
        style_id = int(torch.randint(0, N_STYLES, (1,), generator=gen).item())
    z = torch.randn(latent_dim, generator=gen)
    scene = scene_from_latent(z)
    pose = sample_camera(gen, cam)
    base = render_scene(scene, pose, resolution, cam, background)
    styled = apply_style(base["rgb"], base["fg"], style_id)
    return {
        "rgb": styled,
        "plain_rgb": base["rgb"],
        "depth": base["depth"],
        "fg": base["fg"],
        "style_id": torch.tensor(style_id),
        "pose": pose,
        "z": z,
    }


def make_reference_image(
    style_id: int,
    cam: CameraConfig,
    latent_dim: int,
    resolution: int,
    seed: int = 1234,
    background: float = 0.5,
) -> torch.Tensor:
    """A canonical one-shot reference image for image-guided adaptation."""
    gen = torch.Generator()
    gen.manual_seed(seed)
    z = torch.randn(latent_dim, generator=gen)
    scene = scene_from_latent(z)
    pose = CameraPose(yaw=0.0, pitch=0.0, radius=cam.radius, fov=cam.fov)
    base = render_scene(scene, pose, resolution, cam, background)
    return apply_style(base["rgb"], base["fg"], style_id)


def frontal_pose(cam: CameraConfig) -> CameraPose:
    return CameraPose(yaw=0.0, pitch=0.0, radius=cam.radius, fov=cam.fov)


def yaw_pose(cam: CameraConfig, yaw: float, pitch: float = 0.0) -> CameraPose:
    return CameraPose(yaw=yaw, pitch=pitch, radius=cam.radius, fov=cam.fov)


def view_angle_deg(a: CameraPose, b: CameraPose) -> float:
    """Geodesic angle between two orbit view directions, in degrees."""
    cos = float(torch.clamp((a.view_direction() * b.view_direction()).sum(), -1.0, 1.0))
    return math.degrees(math.acos(cos))
