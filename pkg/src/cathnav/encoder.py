"""Frozen patch-token encoders.

Both backends map a batch of normalised frames ``(N, 3, H, W)`` to tokens
``(N, P, d)`` with the CLS slot at index 0, and expose no trainable
parameters.
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .data import normalize_frames

log = logging.getLogger(__name__)

WEIGHTS_ENV = "CATHNAV_DINOV2_WEIGHTS"


@dataclass
class EncoderConfig:
    backend: str = "pretrained"      # "pretrained" or "stub"
    weights: str | None = None       # local DINOv2-small checkpoint dir; falls back to $CATHNAV_DINOV2_WEIGHTS
    random_init: bool = False        # pretrained architecture without weights (shape checks only)
    stub_dim: int = 64
    stub_patch: int = 16
    stub_seed: int = 0
    resolution: int = 224
    batch_size: int = 64


class FrozenEncoder(nn.Module):
    backend: str
    num_tokens: int
    dim: int

    def _freeze(self):
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        # stays in eval mode whatever the caller asks
        return super().train(False)

    @torch.no_grad()
    def encode_frames(self, frames) -> torch.Tensor:
        """Tokens for normalised frames ``(N, 3, H, W)``."""
        x = torch.as_tensor(np.asarray(frames) if not torch.is_tensor(frames) else frames,
                            dtype=torch.float32)
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"expected (N, 3, H, W) frames, got {tuple(x.shape)}")
        out = self(x)
        if out.shape[1:] != (self.num_tokens, self.dim):
            raise RuntimeError(f"encoder produced {tuple(out.shape)}, expected "
                               f"(N, {self.num_tokens}, {self.dim})")
        return out

    @torch.no_grad()
    def encode_goal(self, image) -> torch.Tensor:
        """CLS embedding of one normalised image ``(3, H, W)``."""
        x = torch.as_tensor(np.asarray(image) if not torch.is_tensor(image) else image,
                            dtype=torch.float32)
        return self.encode_frames(x[None])[0, 0]

    def encode_images(self, images, batch_size: int = 64) -> torch.Tensor:
        """Normalise and encode raw uint8 images ``(N, H, W, 3)`` in batches."""
        chunks = []
        for i in range(0, len(images), batch_size):
            chunks.append(self.encode_frames(normalize_frames(images[i:i + batch_size], self.backend)))
        return torch.cat(chunks)


class StubEncoder(FrozenEncoder):
    """Seeded random projection of raw patch pixels.

    Patch tokens are ``patch_pixels @ W``; the CLS slot is the projection of
    the mean patch, which equals the mean of the patch tokens.
    """

    backend = "stub"

    def __init__(self, dim: int = 64, patch: int = 16, resolution: int = 64, seed: int = 0):
        super().__init__()
        if resolution % patch:
            raise ValueError(f"resolution {resolution} is not a multiple of patch size {patch}")
        self.patch, self.resolution, self.dim = patch, resolution, dim
        self.num_tokens = (resolution // patch) ** 2 + 1
        fan_in = 3 * patch * patch
        w = np.random.default_rng(seed).standard_normal((fan_in, dim)) / math.sqrt(fan_in)
        self.register_buffer("projection", torch.from_numpy(w.astype(np.float32)))
        self._freeze()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        n, c, h, w = x.shape
        if h != self.resolution or w != self.resolution:
            raise ValueError(f"expected {self.resolution}x{self.resolution} frames, got {h}x{w}")
        p = self.patch
        patches = (x.reshape(n, c, h // p, p, w // p, p)
                   .permute(0, 2, 4, 1, 3, 5)
                   .reshape(n, (h // p) * (w // p), c * p * p))
        tokens = patches @ self.projection
        cls = patches.mean(dim=1, keepdim=True) @ self.projection
        return torch.cat([cls, tokens], dim=1)


class PretrainedEncoder(FrozenEncoder):
    """DINOv2 ViT-S/14 via ``transformers``: 257 tokens of width 384 at 224 px."""

    backend = "pretrained"

    def __init__(self, weights: str | None = None, resolution: int = 224, random_init: bool = False):
        super().__init__()
        from transformers import Dinov2Config, Dinov2Model

        weights = weights or os.environ.get(WEIGHTS_ENV)
        if weights:
            self.model = Dinov2Model.from_pretrained(weights)
        elif random_init:
            log.warning("pretrained backend built without weights; tokens are not meaningful")
            self.model = Dinov2Model(Dinov2Config(
                hidden_size=384, num_hidden_layers=12, num_attention_heads=6,
                intermediate_size=1536, patch_size=14, image_size=resolution))
        else:
            raise FileNotFoundError(
                f"no DINOv2 weights: set encoder.weights or ${WEIGHTS_ENV}, or use the stub backend")
        patch = self.model.config.patch_size
        if resolution % patch:
            raise ValueError(f"resolution {resolution} is not a multiple of patch size {patch}")
        self.resolution = resolution
        self.dim = self.model.config.hidden_size
        self.num_tokens = (resolution // patch) ** 2 + 1
        self._freeze()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-2:] != (self.resolution, self.resolution):
            raise ValueError(f"expected {self.resolution}x{self.resolution} frames, "
                             f"got {tuple(x.shape[-2:])}")
        return self.model(pixel_values=x).last_hidden_state


def build_encoder(cfg: EncoderConfig) -> FrozenEncoder:
    if cfg.backend == "stub":
        return StubEncoder(cfg.stub_dim, cfg.stub_patch, cfg.resolution, cfg.stub_seed)
    if cfg.backend == "pretrained":
        return PretrainedEncoder(cfg.weights, cfg.resolution, cfg.random_init)
    raise ValueError(f"unknown encoder backend {cfg.backend!r}")


def trainable_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad)
