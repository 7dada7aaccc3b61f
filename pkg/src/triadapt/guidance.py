"""Noise schedule, toy conditional denoiser, and score-distillation gradients.

The distillation losses are *surrogate scalars*: backpropagating
``(w_t * stopgrad(residual) * x).sum()`` injects exactly
``w_t * residual`` into the image gradient, so the parameter gradient is the
residual-weighted Jacobian product of the render. The residual (and the
denoiser pass producing it) is computed under no_grad; no gradient ever
reaches the denoiser.

Timesteps are 1-based: t ranges over [1, T] and alpha_bar_t = prod_{s<=t}(1 - beta_s).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .conditioning import ImageEncoder, TextEncoder
from .config import Config, ScheduleConfig
from .errors import ConfigError, ShapeError, TrainingError
from .scenes import N_STYLES, biased_pose_dist, sample_target_example
from .utils import derive_seed, new_generator


@dataclass
class NoiseSchedule:
    timesteps: int
    betas: torch.Tensor  # (T,)
    alphas_bar: torch.Tensor = field(init=False)  # (T,), strictly decreasing

    def __post_init__(self):
        self.alphas_bar = torch.cumprod(1.0 - self.betas, dim=0)

    def alpha_bar(self, t: int) -> float:
        return float(self.alphas_bar[t - 1])


def make_schedule(timesteps: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    if timesteps < 10:
        raise ConfigError(f"schedule needs >= 10 timesteps, got {timesteps}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError(f"betas must satisfy 0 < start <= end < 1, got ({beta_start}, {beta_end})")
    betas = torch.linspace(beta_start, beta_end, timesteps, dtype=torch.float64).float()
    return NoiseSchedule(timesteps=timesteps, betas=betas)


def schedule_from_config(cfg: ScheduleConfig) -> NoiseSchedule:
    return make_schedule(cfg.timesteps, cfg.beta_start, cfg.beta_end)


@dataclass
class NoisyImage:
    values: torch.Tensor  # (3, H, W)
    t: int
    eps: torch.Tensor  # same shape as values


def q_sample(x: torch.Tensor, t: int, eps: torch.Tensor, sched: NoiseSchedule) -> NoisyImage:
    """Forward corruption: sqrt(ab_t) * x + sqrt(1 - ab_t) * eps."""
    if not (1 <= t <= sched.timesteps):
        raise ShapeError(f"timestep {t} outside [1, {sched.timesteps}]")
    if eps.shape != x.shape:
        raise ShapeError(f"noise shape {tuple(eps.shape)} != image shape {tuple(x.shape)}")
    ab = sched.alpha_bar(t)
    values = math.sqrt(ab) * x + math.sqrt(1.0 - ab) * eps
    return NoisyImage(values=values, t=t, eps=eps)


def invert_q_sample(zt: NoisyImage, sched: NoiseSchedule) -> torch.Tensor:
    ab = sched.alpha_bar(zt.t)
    return (zt.values - math.sqrt(1.0 - ab) * zt.eps) / math.sqrt(ab)


def timestep_bounds(sched: NoiseSchedule) -> tuple[int, int]:
    """Clipped sampling range [ceil(0.02 T), floor(0.98 T)]."""
    lo = max(1, math.ceil(0.02 * sched.timesteps))
    hi = min(sched.timesteps, math.floor(0.98 * sched.timesteps))
    return lo, hi


def draw_timestep(gen: torch.Generator, sched: NoiseSchedule) -> int:
    lo, hi = timestep_bounds(sched)
    return int(torch.randint(lo, hi + 1, (1,), generator=gen).item())


def weight_for(sched: NoiseSchedule, t: int, mode: str) -> float:
    if mode == "uniform":
        return 1.0
    if mode == "one_minus_alpha_bar":
        return 1.0 - sched.alpha_bar(t)
    raise ConfigError(f"unknown weight mode {mode!r}")


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(1000.0) * torch.arange(half, dtype=torch.float32) / (half - 1))
    ang = t.float().unsqueeze(-1) * freqs
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)


class FiLMBlock(nn.Module):
    def __init__(self, width: int, emb_dim: int):
        super().__init__()
        self.conv = nn.Conv2d(width, width, 3, padding=1)
        self.norm = nn.GroupNorm(4, width)
        self.film = nn.Linear(emb_dim, 2 * width)

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h = self.norm(self.conv(x))
        scale, shift = self.film(emb).unsqueeze(-1).unsqueeze(-1).chunk(2, dim=1)
        return x + F.silu(h * (1.0 + scale) + shift)


class ToyDenoiser(nn.Module):
    """Conv encoder-decoder with skips; channels: 3 RGB + 1 depth in, 3 out.

    Conditioning (time + condition embedding) enters every block through
    per-channel scale-and-shift.
    """

    def __init__(self, width: int = 32, cond_dim: int = 32, time_dim: int = 32):
        super().__init__()
        self.width = width
        self.cond_dim = cond_dim
        self.time_dim = time_dim
        emb = 2 * width
        self.time_mlp = nn.Sequential(nn.Linear(time_dim, emb), nn.SiLU(), nn.Linear(emb, emb))
        self.cond_mlp = nn.Linear(cond_dim, emb)

        w = width
        self.stem = nn.Conv2d(4, w, 3, padding=1)
        self.block0 = FiLMBlock(w, emb)
        self.down1 = nn.Conv2d(w, w, 3, stride=2, padding=1)
        self.block1 = FiLMBlock(w, emb)
        self.down2 = nn.Conv2d(w, w, 3, stride=2, padding=1)
        self.block2 = FiLMBlock(w, emb)
        self.down3 = nn.Conv2d(w, w, 3, stride=2, padding=1)
        self.mid = FiLMBlock(w, emb)
        self.up2 = nn.Conv2d(2 * w, w, 3, padding=1)
        self.ublock2 = FiLMBlock(w, emb)
        self.up1 = nn.Conv2d(2 * w, w, 3, padding=1)
        self.up0 = nn.Conv2d(2 * w, w, 3, padding=1)
        self.out = nn.Conv2d(w, 3, 3, padding=1)

    def forward(self, x: torch.Tensor, t: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        emb = F.silu(self.time_mlp(sinusoidal_embedding(t, self.time_dim)) + self.cond_mlp(cond))
        h0 = self.block0(self.stem(x), emb)
        h1 = self.block1(self.down1(h0), emb)
        h2 = self.block2(self.down2(h1), emb)
        h3 = self.mid(self.down3(h2), emb)
        u2 = self.ublock2(self.up2(torch.cat([F.interpolate(h3, scale_factor=2), h2], dim=1)), emb)
        u1 = F.silu(self.up1(torch.cat([F.interpolate(u2, scale_factor=2), h1], dim=1)))
        u0 = F.silu(self.up0(torch.cat([F.interpolate(u1, scale_factor=2), h0], dim=1)))
        return self.out(u0)


def depth_to_channel(depth_hw: torch.Tensor, near: float, far: float) -> torch.Tensor:
    """Bounded conditioning encoding: nearer = brighter, background = 0."""
    return ((far - depth_hw) / (far - near)).clamp(0.0, 1.0)


def denoise(
    denoiser: ToyDenoiser,
    zt: NoisyImage,
    cond_emb: torch.Tensor,
    depth_chan: torch.Tensor | None = None,
) -> torch.Tensor:
    """Single-sample noise prediction. depth_chan is the normalized (H, W)
    conditioning channel; absent depth fills with the neutral constant 0.5."""
    values = zt.values
    if values.ndim != 3 or values.shape[0] != 3:
        raise ShapeError(f"expected noisy image (3, H, W), got {tuple(values.shape)}")
    h, w = values.shape[1], values.shape[2]
    if depth_chan is None:
        dch = torch.full((1, h, w), 0.5, dtype=values.dtype)
    else:
        if depth_chan.shape != (h, w):
            raise ShapeError(f"depth channel {tuple(depth_chan.shape)} != image plane ({h}, {w})")
        dch = depth_chan.unsqueeze(0).to(values.dtype)
    x = torch.cat([values, dch], dim=0).unsqueeze(0)
    t = torch.tensor([zt.t])
    return denoiser(x.float(), t, cond_emb.unsqueeze(0).float()).squeeze(0).to(values.dtype)


def make_denoise_fn(denoiser: ToyDenoiser):
    """Adapter with the (zt, cond_emb, depth_chan) -> eps_hat calling shape
    the distillation losses expect."""

    def fn(zt: NoisyImage, cond_emb: torch.Tensor, depth_chan: torch.Tensor | None) -> torch.Tensor:
        return denoise(denoiser, zt, cond_emb, depth_chan)

    return fn


def distillation_surrogate(
    x_chw: torch.Tensor,
    cond_emb: torch.Tensor,
    sched: NoiseSchedule,
    denoise_fn,
    t: int,
    eps: torch.Tensor,
    mask: torch.Tensor | None = None,
    depth_chan: torch.Tensor | None = None,
    weight_mode: str = "uniform",
    guidance_scale: float = 1.0,
    null_emb: torch.Tensor | None = None,
) -> tuple[torch.Tensor, dict]:
    """Core surrogate shared by SDS and DSDS.

    The residual coefficient is built under no_grad (stop-gradient), then the
    returned scalar is <coeff, x>; its backward puts w_t * [M *] (eps_hat - eps)
    on the image, i.e., the literal distillation gradient.
    """
    if mask is not None and mask.shape != x_chw.shape[1:]:
        raise ShapeError(f"mask {tuple(mask.shape)} != image plane {tuple(x_chw.shape[1:])}")
    with torch.no_grad():
        zt = q_sample(x_chw.detach(), t, eps, sched)
        eps_hat = denoise_fn(zt, cond_emb, depth_chan)
        if guidance_scale != 1.0:
            if null_emb is None:
                raise ConfigError("guidance_scale != 1 requires the null embedding")
            eps_null = denoise_fn(zt, null_emb, depth_chan)
            eps_hat = eps_null + guidance_scale * (eps_hat - eps_null)
        resid = eps_hat - eps
        if mask is not None:
            resid = resid * mask.unsqueeze(0).to(resid.dtype)
        w = weight_for(sched, t, weight_mode)
        coeff = w * resid
    loss = (coeff.to(x_chw.dtype) * x_chw).sum()
    info = {"t": t, "weight": w, "resid_norm": float(resid.norm()), "surrogate": float(loss)}
    return loss, info


def sds_loss(x_chw, cond_emb, sched, denoise_fn, t, eps, **kw):
    """Plain score distillation: no depth conditioning, no mask."""
    return distillation_surrogate(x_chw, cond_emb, sched, denoise_fn, t, eps, **kw)


def dsds_loss(x_chw, cond_emb, sched, denoise_fn, t, eps, depth_chan, mask, **kw):
    """Depth-aware masked score distillation.

    depth_chan comes from the *source* branch render, mask from the *target*
    branch render; both must already be detached.
    """
    return distillation_surrogate(
        x_chw, cond_emb, sched, denoise_fn, t, eps, mask=mask, depth_chan=depth_chan, **kw
    )


@dataclass
class GuidanceArtifacts:
    schedule: NoiseSchedule
    denoiser: ToyDenoiser
    text_encoder: TextEncoder
    image_encoder: ImageEncoder
    patch_encoder: "torch.nn.Module"

    def freeze(self) -> None:
        for module in (self.denoiser, self.text_encoder, self.image_encoder, self.patch_encoder):
            module.eval()
            for p in module.parameters():
                p.requires_grad_(False)


def pretrain_denoiser(cfg: Config, steps: int | None = None, log=None) -> GuidanceArtifacts:
    """Joint denoising pretraining of the toy denoiser and both encoders.

    Standard epsilon-prediction objective with 10% condition dropout to the
    null token; half the examples are conditioned through the image encoder
    on a same-style reference, with a small embedding-alignment term tying
    the two modalities together. Target-domain poses are drawn from the
    deliberately frontal-biased distribution.
    """
    from .consistency import build_patch_encoder

    p = cfg.pretrain_diff
    steps = p.steps if steps is None else steps
    torch.manual_seed(derive_seed(p.seed, "denoiser-init"))
    sched = schedule_from_config(cfg.schedule)
    denoiser = ToyDenoiser(width=p.denoiser_width, cond_dim=cfg.conditioning.dim)
    text_enc = TextEncoder(cfg.conditioning)
    image_enc = ImageEncoder(cfg.conditioning, cfg.generator.resolution)
    patch_enc = build_patch_encoder(cfg.generator.resolution)
    arts = GuidanceArtifacts(sched, denoiser, text_enc, image_enc, patch_enc)
    if steps == 0:
        arts.freeze()
        return arts

    gen = new_generator(p.seed, "pretrain-diff")
    params = list(denoiser.parameters()) + list(text_enc.parameters()) + list(image_enc.parameters())
    opt = torch.optim.Adam(params, lr=p.lr)
    cam = biased_pose_dist(cfg.camera, p.pose_bias)
    res = cfg.generator.resolution
    latent = cfg.generator.latent_dim
    span_near, span_far = cfg.camera.near, cfg.camera.far

    loss_trace: list[float] = []
    for step in range(steps):
        opt.zero_grad()
        images, dchans, ts, conds = [], [], [], []
        align_terms = []
        for _ in range(p.batch):
            ex = sample_target_example(gen, cam, latent, res, background=cfg.generator.background)
            style = int(ex["style_id"])
            u = torch.rand(2, generator=gen)
            text_emb = text_enc.encode_ids([style])
            if float(u[0]) < p.image_cond_frac:
                ref = sample_target_example(
                    gen, cam, latent, res, style_id=style, background=cfg.generator.background
                )
                emb = image_enc.encode(ref["rgb"])
                align_terms.append(F.mse_loss(emb, text_emb))
            else:
                emb = text_emb
            if float(u[1]) < p.cond_dropout:
                emb = text_enc.encode_ids([])
            t = int(torch.randint(1, sched.timesteps + 1, (1,), generator=gen).item())
            eps = torch.randn(3, res, res, generator=gen)
            zt = q_sample(ex["rgb"].permute(2, 0, 1), t, eps, sched)
            images.append(torch.cat([zt.values, depth_to_channel(ex["depth"], span_near, span_far).unsqueeze(0)]))
            dchans.append(eps)
            ts.append(t)
            conds.append(emb)

        x = torch.stack(images)
        eps_all = torch.stack(dchans)
        pred = denoiser(x, torch.tensor(ts), torch.stack(conds))
        loss = F.mse_loss(pred, eps_all)
        if align_terms:
            loss = loss + p.align_weight * torch.stack(align_terms).mean()
        if not torch.isfinite(loss):
            raise TrainingError(f"denoiser pretraining diverged at step {step}: loss={loss}")
        loss.backward()
        opt.step()
        loss_trace.append(float(loss))
        if log is not None and (step % 500 == 0 or step == steps - 1):
            log(f"pretrain-diff step={step} loss={loss.item():.5f}")

    arts.freeze()
    arts.loss_trace = loss_trace  # type: ignore[attr-defined]
    return arts


def save_guidance(path, arts: GuidanceArtifacts, cfg: Config, meta: dict | None = None) -> None:
    from .checkpoint import Checkpoint, module_arrays, save_checkpoint

    arrays = {}
    arrays.update(module_arrays(arts.denoiser, "denoiser"))
    arrays.update(module_arrays(arts.text_encoder, "text_encoder"))
    arrays.update(module_arrays(arts.image_encoder, "image_encoder"))
    arrays.update(module_arrays(arts.patch_encoder, "patch_encoder"))
    arrays["schedule.betas"] = arts.schedule.betas
    save_checkpoint(
        path,
        Checkpoint(kind="guidance", arch=guidance_arch(cfg), arrays=arrays, meta=meta or {}),
    )


def guidance_arch(cfg: Config) -> dict:
    return {
        "timesteps": cfg.schedule.timesteps,
        "width": cfg.pretrain_diff.denoiser_width,
        "cond_dim": cfg.conditioning.dim,
        "vocab_size": cfg.conditioning.vocab_size,
        "resolution": cfg.generator.resolution,
    }


def load_guidance(path, cfg: Config) -> GuidanceArtifacts:
    from .checkpoint import load_checkpoint, load_module_arrays
    from .consistency import build_patch_encoder

    ckpt = load_checkpoint(path, kind="guidance", expect_arch=guidance_arch(cfg))
    denoiser = ToyDenoiser(width=cfg.pretrain_diff.denoiser_width, cond_dim=cfg.conditioning.dim)
    text_enc = TextEncoder(cfg.conditioning)
    image_enc = ImageEncoder(cfg.conditioning, cfg.generator.resolution)
    patch_enc = build_patch_encoder(cfg.generator.resolution)
    load_module_arrays(denoiser, ckpt, "denoiser")
    load_module_arrays(text_enc, ckpt, "text_encoder")
    load_module_arrays(image_enc, ckpt, "image_encoder")
    load_module_arrays(patch_enc, ckpt, "patch_encoder")
    sched = NoiseSchedule(timesteps=cfg.schedule.timesteps, betas=ckpt.arrays["schedule.betas"])
    arts = GuidanceArtifacts(sched, denoiser, text_enc, image_enc, patch_enc)
    arts.freeze()
    return arts


def evaluate_denoiser(arts: GuidanceArtifacts, cfg: Config, n: int = 32, seed: int = 97) -> dict:
    """Held-out denoising losses at mid-range t: conditional, null, and the
    zero-prediction baseline ||eps||^2."""
    gen = new_generator(seed, "denoiser-eval")
    cam = biased_pose_dist(cfg.camera, cfg.pretrain_diff.pose_bias)
    res, latent = cfg.generator.resolution, cfg.generator.latent_dim
    sched = arts.schedule
    t_lo, t_hi = int(0.4 * sched.timesteps), int(0.6 * sched.timesteps)
    cond_losses, null_losses, eps_norms = [], [], []
    null_emb = arts.text_encoder.encode_ids([])
    with torch.no_grad():
        for _ in range(n):
            ex = sample_target_example(gen, cam, latent, res, background=cfg.generator.background)
            style = int(ex["style_id"])
            t = int(torch.randint(t_lo, t_hi + 1, (1,), generator=gen).item())
            eps = torch.randn(3, res, res, generator=gen)
            zt = q_sample(ex["rgb"].permute(2, 0, 1), t, eps, sched)
            dch = depth_to_channel(ex["depth"], cfg.camera.near, cfg.camera.far)
            pred_c = denoise(arts.denoiser, zt, arts.text_encoder.encode_ids([style]), dch)
            pred_n = denoise(arts.denoiser, zt, null_emb, dch)
            cond_losses.append(float(((pred_c - eps) ** 2).mean()))
            null_losses.append(float(((pred_n - eps) ** 2).mean()))
            eps_norms.append(float((eps**2).mean()))
    return {
        "loss_cond": sum(cond_losses) / n,
        "loss_null": sum(null_losses) / n,
        "eps_power": sum(eps_norms) / n,
    }
