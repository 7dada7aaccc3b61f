"""Tri-plane generator and differentiable volume renderer.

The generator maps a latent z to three axis-aligned feature planes; a small
MLP decodes summed bilinear plane samples into density and color; emission-
absorption quadrature along pinhole rays produces the image, the expected-
termination depth map, and the accumulated opacity map.

Everything here is deterministic given its inputs and fully differentiable
with respect to the module parameters; renders of a fixed (z, pose, params)
triple are bitwise reproducible under the single-threaded reduction order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .camera import CameraPose, RayBundle, rays_for, sample_camera
from .checkpoint import Checkpoint, load_checkpoint, module_arrays, load_module_arrays
from .config import CameraConfig, Config, GeneratorConfig
from .errors import ShapeError, TrainingError
from .scenes import render_scene, scene_from_latent
from .utils import derive_seed, new_generator, psnr


@dataclass
class RenderOutput:
    rgb: torch.Tensor  # (H, W, 3) in [0, 1]
    depth: torch.Tensor  # (H, W), scene units, far-filled on background
    opacity: torch.Tensor  # (H, W) in [0, 1]


def sample_plane(plane: torch.Tensor, uv: torch.Tensor) -> torch.Tensor:
    """Bilinear sample of one (F, R, R) plane at uv in [-1, 1]^2.

    Corner-aligned: uv = -1/+1 maps to the first/last texel center, so the
    plane center (uv = 0) of an even-resolution plane is the mean of the four
    central texels. Differentiable in both plane values and uv.
    """
    f, r, _ = plane.shape
    s = (uv + 1.0) * 0.5 * (r - 1)
    s = s.clamp(0.0, float(r - 1))
    x, y = s[..., 0], s[..., 1]
    x0 = x.floor().long().clamp(0, r - 2)
    y0 = y.floor().long().clamp(0, r - 2)
    wx = (x - x0.to(x.dtype)).unsqueeze(0)
    wy = (y - y0.to(y.dtype)).unsqueeze(0)
    p00 = plane[:, y0, x0]
    p01 = plane[:, y0, x0 + 1]
    p10 = plane[:, y0 + 1, x0]
    p11 = plane[:, y0 + 1, x0 + 1]
    top = p00 * (1 - wx) + p01 * wx
    bot = p10 * (1 - wx) + p11 * wx
    return (top * (1 - wy) + bot * wy).transpose(0, 1)


def sample_triplane(planes: torch.Tensor, pts: torch.Tensor) -> torch.Tensor:
    """Project points onto the xy/xz/yz planes, bilinear-sample, sum features.

    planes: (3, F, R, R); pts: (N, 3) in [-1, 1]^3 -> (N, F).
    """
    if planes.ndim != 4 or planes.shape[0] != 3:
        raise ShapeError(f"expected planes of shape (3, F, R, R), got {tuple(planes.shape)}")
    xy = sample_plane(planes[0], pts[:, (0, 1)])
    xz = sample_plane(planes[1], pts[:, (0, 2)])
    yz = sample_plane(planes[2], pts[:, (1, 2)])
    return xy + xz + yz


class PointDecoder(nn.Module):
    """Two hidden layers; softplus density, sigmoid color, by construction
    satisfying density >= 0 and color in [0, 1]^3."""

    def __init__(self, feat_dim: int, hidden: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(feat_dim, hidden),
            nn.ReLU(),
            nn.Linear(hidden, hidden),
            nn.ReLU(),
            nn.Linear(hidden, 4),
        )

    def forward(self, feats: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        out = self.net(feats)
        return F.softplus(out[..., 0]), torch.sigmoid(out[..., 1:4])


class TriPlaneGenerator(nn.Module):
    """Latent -> tri-plane features -> density/color field."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        ch = 3 * cfg.plane_feat
        base = cfg.plane_res // 4
        self.base = base
        self.fc = nn.Linear(cfg.latent_dim, ch * base * base)
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)
        self.decoder = PointDecoder(cfg.plane_feat, cfg.decoder_hidden)

    def synthesize_triplane(self, z: torch.Tensor) -> torch.Tensor:
        """(latent_dim,) -> (3, F, R, R). Deterministic and differentiable."""
        if z.shape != (self.cfg.latent_dim,):
            raise ShapeError(f"latent must have shape ({self.cfg.latent_dim},), got {tuple(z.shape)}")
        ch = 3 * self.cfg.plane_feat
        h = self.fc(z).reshape(1, ch, self.base, self.base)
        h = torch.tanh(h)
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = torch.tanh(self.conv1(h))
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = self.conv2(h)
        return h.reshape(3, self.cfg.plane_feat, self.cfg.plane_res, self.cfg.plane_res)

    def field(self, planes: torch.Tensor):
        def field_fn(pts: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
            return decode_points(planes, self.decoder, pts)

        return field_fn

    @property
    def arch(self) -> dict:
        c = self.cfg
        return {
            "latent_dim": c.latent_dim,
            "plane_res": c.plane_res,
            "plane_feat": c.plane_feat,
            "decoder_hidden": c.decoder_hidden,
        }


def decode_points(
    planes: torch.Tensor, decoder: PointDecoder, pts: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """(N, 3) points in [-1, 1]^3 -> density (N,), color (N, 3)."""
    feats = sample_triplane(planes, pts)
    return decoder(feats)


def volume_render(
    field_fn,
    rays: RayBundle,
    n_samples: int,
    background: float = 0.5,
    return_weights: bool = False,
):
    """Emission-absorption quadrature with midpoint samples.

    t_k = near + (k + 1/2) * delta; alpha_k = 1 - exp(-sigma_k * delta);
    w_k = alpha_k * prod_{j<k} (1 - alpha_j). rgb composites over a constant
    background, depth fills with `far`, opacity is sum(w).
    """
    if n_samples < 8:
        raise ShapeError(f"n_samples must be >= 8, got {n_samples}")
    o, d = rays.origins, rays.directions
    lead = o.shape[:-1]
    dtype = o.dtype
    delta = (rays.far - rays.near) / n_samples
    t = rays.near + (torch.arange(n_samples, dtype=dtype) + 0.5) * delta

    pts = o.reshape(-1, 1, 3) + d.reshape(-1, 1, 3) * t.reshape(1, -1, 1)
    pts = pts.clamp(-1.0, 1.0)
    sigma, color = field_fn(pts.reshape(-1, 3))
    sigma = sigma.reshape(-1, n_samples)
    color = color.reshape(-1, n_samples, 3)

    alpha = 1.0 - torch.exp(-sigma * delta)
    trans = torch.cumprod(
        torch.cat([torch.ones_like(alpha[:, :1]), 1.0 - alpha[:, :-1]], dim=1), dim=1
    )
    weights = alpha * trans

    acc = weights.sum(dim=1)
    rgb = (weights.unsqueeze(-1) * color).sum(dim=1) + (1.0 - acc).unsqueeze(-1) * background
    depth = (weights * t).sum(dim=1) + (1.0 - acc) * rays.far

    out = RenderOutput(
        rgb=rgb.reshape(*lead, 3),
        depth=depth.reshape(lead),
        opacity=acc.reshape(lead),
    )
    if return_weights:
        return out, weights.reshape(*lead, n_samples)
    return out


def generate(
    module: TriPlaneGenerator,
    z: torch.Tensor,
    pose: CameraPose,
    cam: CameraConfig,
    resolution: int | None = None,
    n_samples: int | None = None,
    background: float | None = None,
) -> RenderOutput:
    """Full pipeline: tri-plane synthesis, ray generation, volume render."""
    res = resolution if resolution is not None else module.cfg.resolution
    ns = n_samples if n_samples is not None else module.cfg.n_samples
    bg = background if background is not None else module.cfg.background
    dtype = next(module.parameters()).dtype
    planes = module.synthesize_triplane(z.to(dtype))
    rays = rays_for(pose, res, cam.near, cam.far, dtype=dtype)
    return volume_render(module.field(planes), rays, ns, background=bg)


def foreground_mask(render: RenderOutput, tau: float = 0.5) -> torch.Tensor:
    """Binary foreground mask from accumulated opacity; carries no gradient."""
    if not (0.0 < tau < 1.0):
        raise ShapeError(f"mask threshold must lie in (0, 1), got {tau}")
    return (render.opacity.detach() >= tau).to(render.opacity.dtype)


def build_generator(cfg: Config, seed: int | None = None) -> TriPlaneGenerator:
    if seed is not None:
        torch.manual_seed(derive_seed(seed, "generator-init"))
    return TriPlaneGenerator(cfg.generator)


def pretrain_source(cfg: Config, steps: int | None = None, log=None) -> tuple[TriPlaneGenerator, dict]:
    """Fit the source generator to the procedural sphere family.

    Photometric L2 plus depth L2 on a random ray subset per step; Adam while
    fitting (this is plumbing, not the adaptation loop). Returns the module
    and a stats dict including held-out PSNR.
    """
    p = cfg.pretrain_gen
    steps = p.steps if steps is None else steps
    module = build_generator(cfg, seed=p.seed)
    if steps == 0:
        return module, {"steps": 0, "psnr": None}

    gen = new_generator(p.seed, "pretrain-gen")
    opt = torch.optim.Adam(module.parameters(), lr=p.lr)
    cam = cfg.camera
    g = cfg.generator
    span = cam.far - cam.near

    for step in range(steps):
        opt.zero_grad()
        loss = 0.0
        for _ in range(p.scenes_per_step):
            z = torch.randn(g.latent_dim, generator=gen)
            scene = scene_from_latent(z)
            pose = sample_camera(gen, cam)
            gt = render_scene(scene, pose, g.resolution, cam, g.background)
            rays = rays_for(pose, g.resolution, cam.near, cam.far)

            idx = torch.randint(0, g.resolution * g.resolution, (p.rays_per_scene,), generator=gen)
            sub = RayBundle(
                origins=rays.origins.reshape(-1, 3)[idx],
                directions=rays.directions.reshape(-1, 3)[idx],
                near=rays.near,
                far=rays.far,
            )
            planes = module.synthesize_triplane(z)
            out = volume_render(module.field(planes), sub, g.n_samples, g.background)

            gt_rgb = gt["rgb"].reshape(-1, 3)[idx]
            gt_depth = gt["depth"].reshape(-1)[idx]
            loss = loss + F.mse_loss(out.rgb, gt_rgb)
            loss = loss + p.depth_weight * F.mse_loss(out.depth / span, gt_depth / span)

        if not torch.isfinite(loss):
            raise TrainingError(f"source pretraining diverged at step {step}: loss={loss}")
        loss.backward()
        opt.step()
        if log is not None and (step % 500 == 0 or step == steps - 1):
            log(f"pretrain-gen step={step} loss={loss.item():.5f}")

    stats = {"steps": steps, "psnr": holdout_psnr(module, cfg)}
    return module, stats


def holdout_psnr(module: TriPlaneGenerator, cfg: Config, n: int | None = None) -> float:
    """PSNR of full renders against analytic scenes on a held-out latent set."""
    p = cfg.pretrain_gen
    n = p.holdout if n is None else n
    gen = new_generator(p.seed, "pretrain-gen-holdout")
    cam, g = cfg.camera, cfg.generator
    preds, gts = [], []
    with torch.no_grad():
        for _ in range(n):
            z = torch.randn(g.latent_dim, generator=gen)
            pose = sample_camera(gen, cam)
            out = generate(module, z, pose, cam)
            gt = render_scene(scene_from_latent(z), pose, g.resolution, cam, g.background)
            preds.append(out.rgb)
            gts.append(gt["rgb"])
    return psnr(torch.stack(preds), torch.stack(gts))


def save_generator(path, module: TriPlaneGenerator, meta: dict | None = None) -> None:
    from .checkpoint import save_checkpoint

    save_checkpoint(
        path,
        Checkpoint(
            kind="generator",
            arch=module.arch,
            arrays=module_arrays(module, "generator"),
            meta=meta or {},
        ),
    )


def load_generator(path, cfg: Config) -> TriPlaneGenerator:
    module = TriPlaneGenerator(cfg.generator)
    ckpt = load_checkpoint(path, kind="generator", expect_arch=module.arch)
    load_module_arrays(module, ckpt, "generator")
    return module
