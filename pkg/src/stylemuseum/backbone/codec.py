"""Frozen image codecs mapping RGB images to latents and back.

Two interchangeable codecs:

* ``FixedCodec`` -- average-pool by the spatial factor, then mix the three
  color channels into ``latent_channels`` through a seeded column-orthonormal
  matrix.  Exactly pseudo-invertible, needs no training, and preserves the
  palette statistics that style metrics depend on.
* ``ConvCodec`` -- a small convolutional autoencoder, pretrained once on a
  generic synthetic corpus and then frozen.

Both are deterministic: encode/decode never touch global RNG state.
"""

from __future__ import annotations

import logging

import torch
import torch.nn.functional as F
from torch import nn

logger = logging.getLogger(__name__)

__all__ = ["FixedCodec", "ConvCodec", "pretrain_codec"]


def _check_image(x: torch.Tensor, image_size: int) -> None:
    """Validate batched image shape (B, 3, image_size, image_size)."""
    if x.dim() != 4 or x.shape[1] != 3 or x.shape[2] != image_size or x.shape[3] != image_size:
        raise ValueError(
            f"expected image of shape (3, {image_size}, {image_size}), got {tuple(x.shape[1:]) if x.dim() == 4 else tuple(x.shape)}"
        )


class FixedCodec(nn.Module):
    """Seeded linear projection codec (no learned parameters)."""

    def __init__(self, image_size: int = 32, latent_channels: int = 4, latent_size: int = 8, seed: int = 0):
        super().__init__()
        if latent_channels < 3:
            raise ValueError(f"fixed codec needs latent_channels >= 3, got {latent_channels}")
        if image_size % latent_size != 0:
            raise ValueError(f"latent_size {latent_size} must divide image_size {image_size}")
        self.image_size = image_size
        self.latent_channels = latent_channels
        self.latent_size = latent_size
        self.factor = image_size // latent_size
        g = torch.Generator().manual_seed(seed)
        # First 3 columns of a random orthogonal matrix: mix^T mix == I_3, so
        # decode(encode(x)) recovers the pooled image exactly.
        q, _ = torch.linalg.qr(torch.randn(latent_channels, latent_channels, generator=g))
        self.register_buffer("mix", q[:, :3].contiguous())

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        squeeze = x.dim() == 3
        xb = x.unsqueeze(0) if squeeze else x
        _check_image(xb, self.image_size)
        pooled = F.avg_pool2d(2.0 * xb - 1.0, self.factor)
        z = torch.einsum("oc,bchw->bohw", self.mix.to(x.dtype), pooled)
        return z.squeeze(0) if squeeze else z

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        squeeze = z.dim() == 3
        zb = z.unsqueeze(0) if squeeze else z
        if zb.shape[1] != self.latent_channels or zb.shape[2] != self.latent_size:
            raise ValueError(
                f"expected latent ({self.latent_channels}, {self.latent_size}, "
                f"{self.latent_size}), got {tuple(z.shape)}"
            )
        if not torch.isfinite(zb).all():
            raise ValueError("latent contains non-finite values")
        pooled = torch.einsum("oc,bohw->bchw", self.mix.to(z.dtype), zb)
        x = F.interpolate(pooled, scale_factor=self.factor, mode="nearest")
        x = ((x + 1.0) / 2.0).clamp(0.0, 1.0)
        return x.squeeze(0) if squeeze else x


class ConvCodec(nn.Module):
    """Small convolutional autoencoder codec (frozen after pretraining)."""

    def __init__(self, image_size: int = 32, latent_channels: int = 4, latent_size: int = 8, seed: int = 0):
        super().__init__()
        if image_size // latent_size != 4:
            raise ValueError("conv codec downsamples by 4: image_size must be 4 * latent_size")
        self.image_size = image_size
        self.latent_channels = latent_channels
        self.latent_size = latent_size
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.enc = nn.Sequential(
                nn.Conv2d(3, 16, 3, stride=2, padding=1), nn.SiLU(),
                nn.Conv2d(16, 32, 3, stride=2, padding=1), nn.SiLU(),
                nn.Conv2d(32, latent_channels, 1),
            )
            self.dec = nn.Sequential(
                nn.Conv2d(latent_channels, 32, 1), nn.SiLU(),
                nn.ConvTranspose2d(32, 16, 4, stride=2, padding=1), nn.SiLU(),
                nn.ConvTranspose2d(16, 3, 4, stride=2, padding=1),
            )

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        squeeze = x.dim() == 3
        xb = x.unsqueeze(0) if squeeze else x
        _check_image(xb, self.image_size)
        z = self.enc(2.0 * xb - 1.0)
        return z.squeeze(0) if squeeze else z

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        squeeze = z.dim() == 3
        zb = z.unsqueeze(0) if squeeze else z
        if zb.shape[1] != self.latent_channels or zb.shape[2] != self.latent_size:
            raise ValueError(
                f"expected latent ({self.latent_channels}, {self.latent_size}, "
                f"{self.latent_size}), got {tuple(z.shape)}"
            )
        if not torch.isfinite(zb).all():
            raise ValueError("latent contains non-finite values")
        x = ((self.dec(zb) + 1.0) / 2.0).clamp(0.0, 1.0)
        return x.squeeze(0) if squeeze else x


def pretrain_codec(
    codec: ConvCodec,
    images: torch.Tensor,
    steps: int = 400,
    batch_size: int = 16,
    lr: float = 2e-3,
    seed: int = 0,
) -> float:
    """Train the autoencoder on `images` (N, 3, H, W), freeze it, return final MSE.

    Reconstruction loss is measured in the unclamped [-1, 1] working range.
    """
    if images.dim() != 4 or images.shape[0] < batch_size:
        raise ValueError(f"need at least {batch_size} images, got {tuple(images.shape)}")
    g = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(codec.parameters(), lr=lr)
    target = 2.0 * images - 1.0
    loss_val = float("nan")
    for step in range(steps):
        idx = torch.randint(images.shape[0], (batch_size,), generator=g)
        x = target[idx]
        rec = codec.dec(codec.enc(x))
        loss = F.mse_loss(rec, x)
        opt.zero_grad()
        loss.backward()
        opt.step()
        loss_val = float(loss.detach())
    for p in codec.parameters():
        p.requires_grad_(False)
    logger.info("codec pretraining done: %d steps, final mse %.5f", steps, loss_val)
    return loss_val
