"""Multi-modal condition embeddings behind a pluggable encoder registry.

Both modalities land in one shared embedding space; the denoiser consumes a
single conditioning vector regardless of whether it came from style tokens or
a one-shot reference image. The toy encoders are trained jointly with the
denoiser and frozen afterwards; real encoders can be plugged in through the
registry as long as they match the conditioning dimension.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn

from .config import ConditioningConfig
from .errors import ConfigError, InputError


@dataclass
class Condition:
    modality: str  # "text" | "image"
    embedding: torch.Tensor  # (dim,), detached
    provenance: str = ""


class TextEncoder(nn.Module):
    """Token-embedding table + mean pooling + linear projection.

    Row 0 of the table is a dedicated null token used for the unconditional
    embedding (empty prompt, condition dropout).
    """

    def __init__(self, cfg: ConditioningConfig):
        super().__init__()
        self.vocab_size = cfg.vocab_size
        self.embed_dim = cfg.dim
        self.table = nn.Embedding(cfg.vocab_size + 1, cfg.dim)
        self.proj = nn.Linear(cfg.dim, cfg.dim)

    def encode_ids(self, ids: Sequence[int]) -> torch.Tensor:
        for i in ids:
            if not (0 <= int(i) < self.vocab_size):
                raise InputError(f"token id {i} outside vocabulary [0, {self.vocab_size})")
        if len(ids) == 0:
            rows = torch.tensor([0], dtype=torch.long)
        else:
            rows = torch.tensor([int(i) + 1 for i in ids], dtype=torch.long)
        return self.proj(self.table(rows).mean(dim=0))


class ImageEncoder(nn.Module):
    """Small conv encoder with global average pooling."""

    def __init__(self, cfg: ConditioningConfig, resolution: int):
        super().__init__()
        self.embed_dim = cfg.dim
        self.resolution = resolution
        self.net = nn.Sequential(
            nn.Conv2d(3, 16, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(16, 32, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(32, 64, 3, stride=2, padding=1),
            nn.SiLU(),
        )
        self.head = nn.Linear(64, cfg.dim)

    def encode(self, image_hw3: torch.Tensor) -> torch.Tensor:
        if image_hw3.shape != (self.resolution, self.resolution, 3):
            raise InputError(
                f"image must be ({self.resolution}, {self.resolution}, 3), got {tuple(image_hw3.shape)}"
            )
        x = image_hw3.permute(2, 0, 1).unsqueeze(0)
        h = self.net(x).mean(dim=(2, 3))
        return self.head(h).squeeze(0)


def encode_text(tokens: Sequence[int], encoder, provenance: str = "") -> Condition:
    emb = encoder.encode_ids(tokens)
    return Condition(modality="text", embedding=emb.detach(), provenance=provenance)


def encode_image(image_hw3: torch.Tensor, encoder, provenance: str = "") -> Condition:
    emb = encoder.encode(image_hw3)
    return Condition(modality="image", embedding=emb.detach(), provenance=provenance)


def null_condition(encoder) -> Condition:
    return Condition(modality="text", embedding=encoder.encode_ids([]).detach(), provenance="<null>")


class EncoderRegistry:
    """Dispatch table from modality to encoder implementation.

    Registration checks the declared embedding dimension against the
    denoiser's conditioning dimension so mismatched plug-ins fail fast.
    """

    def __init__(self, dim: int):
        self.dim = dim
        self._encoders: dict[str, object] = {}

    def register(self, modality: str, encoder) -> None:
        if modality not in ("text", "image"):
            raise ConfigError(f"unknown modality {modality!r}")
        dim = getattr(encoder, "embed_dim", None)
        if dim != self.dim:
            raise ConfigError(
                f"encoder for {modality!r} declares embed_dim={dim}, expected {self.dim}"
            )
        self._encoders[modality] = encoder

    def get(self, modality: str):
        try:
            return self._encoders[modality]
        except KeyError:
            raise ConfigError(f"no encoder registered for modality {modality!r}") from None

    def encode_text(self, tokens: Sequence[int], provenance: str = "") -> Condition:
        return encode_text(tokens, self.get("text"), provenance)

    def encode_image(self, image_hw3: torch.Tensor, provenance: str = "") -> Condition:
        return encode_image(image_hw3, self.get("image"), provenance)


def default_registry(text_encoder: TextEncoder, image_encoder: ImageEncoder) -> EncoderRegistry:
    reg = EncoderRegistry(text_encoder.embed_dim)
    reg.register("text", text_encoder)
    reg.register("image", image_encoder)
    return reg
