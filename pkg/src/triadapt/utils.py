"""Small shared helpers: seeded RNG streams, image conversion, PSNR, PNG I/O."""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np
import torch
from PIL import Image


def derive_seed(seed: int, label: str) -> int:
    """Stable 63-bit child seed for an independent RNG stream.

    Hashing (seed, label) keeps streams for different pipeline phases
    decoupled even when the user passes small consecutive seeds.
    """
    digest = hashlib.sha256(f"{seed}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


def new_generator(seed: int, label: str = "") -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(derive_seed(seed, label) if label else seed)
    return gen


def generator_state_bytes(gen: torch.Generator) -> bytes:
    return bytes(gen.get_state().numpy().tobytes())


def set_generator_state(gen: torch.Generator, raw: bytes) -> None:
    state = torch.from_numpy(np.frombuffer(raw, dtype=np.uint8).copy())
    gen.set_state(state)


def to_chw(image_hw3: torch.Tensor) -> torch.Tensor:
    """(H, W, 3) -> (3, H, W) without copying when possible."""
    return image_hw3.permute(2, 0, 1)


def to_hw3(image_chw: torch.Tensor) -> torch.Tensor:
    return image_chw.permute(1, 2, 0)


def psnr(a: torch.Tensor, b: torch.Tensor) -> float:
    """PSNR in dB for images in [0, 1]."""
    mse = torch.mean((a.double() - b.double()) ** 2).item()
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / mse))


def save_png(image_hw3: torch.Tensor, path: Path | str) -> None:
    """8-bit RGB PNG from a (H, W, 3) tensor in [0, 1]."""
    arr = (image_hw3.detach().clamp(0, 1).numpy() * 255.0).round().astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def save_png_gray16(values_hw: torch.Tensor, path: Path | str) -> None:
    """16-bit grayscale PNG from a (H, W) tensor in [0, 1]."""
    arr = (values_hw.detach().clamp(0, 1).numpy() * 65535.0).round().astype(np.uint16)
    Image.fromarray(arr, mode="I;16").save(path)


def load_png(path: Path | str) -> torch.Tensor:
    """(H, W, 3) float tensor in [0, 1] from an RGB(A) PNG."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr)


def text_hash(text: str, n: int = 10) -> str:
    return hashlib.sha256(text.encode()).hexdigest()[:n]
