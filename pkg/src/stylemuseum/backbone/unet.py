"""Conditional U-Net noise predictor over 8x8 latents.

Two resolutions (8x8 and 4x4) with exactly four cross-attention sites in
forward order: encoder at 8x8, encoder at 4x4, bottleneck at 4x4, decoder at
8x8.  Each site receives its own conditioning sequence, which is what lets a
style be represented by one learned vector per layer.  All attention
projections (query/key/value/output) are plain ``nn.Linear`` so low-rank
adapters can wrap their weights.
"""

from __future__ import annotations

import math
from typing import Sequence

import torch
from torch import nn

__all__ = ["CrossAttention", "ConditionalUNet"]


def _groups(channels: int) -> int:
    g = 8
    while channels % g != 0:
        g //= 2
    return max(g, 1)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal features of integer timesteps, shape (B, dim)."""
    t = t.to(torch.float32).reshape(-1, 1)
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half
    ).to(t.dtype)
    args = t * freqs
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, temb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(c_in), c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.temb_proj = nn.Linear(temb_dim, c_out)
        self.norm2 = nn.GroupNorm(_groups(c_out), c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()
        self.act = nn.SiLU()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(self.act(self.norm1(x)))
        h = h + self.temb_proj(self.act(temb))[:, :, None, None]
        h = self.conv2(self.act(self.norm2(h)))
        return h + self.skip(x)


class CrossAttention(nn.Module):
    """Multi-head cross-attention from spatial features to a conditioning sequence."""

    def __init__(self, channels: int, cond_dim: int, num_heads: int = 4):
        super().__init__()
        if channels % num_heads != 0:
            raise ValueError(f"channels {channels} not divisible by {num_heads} heads")
        self.channels = channels
        self.num_heads = num_heads
        self.norm = nn.GroupNorm(_groups(channels), channels)
        self.to_q = nn.Linear(channels, channels, bias=False)
        self.to_k = nn.Linear(cond_dim, channels, bias=False)
        self.to_v = nn.Linear(cond_dim, channels, bias=False)
        self.to_out = nn.Linear(channels, channels)

    def forward(self, x: torch.Tensor, ctx: torch.Tensor) -> torch.Tensor:
        b, c, hh, ww = x.shape
        if ctx.dim() != 3 or ctx.shape[0] != b:
            raise ValueError(
                f"context must be (B={b}, S, d), got {tuple(ctx.shape)}"
            )
        h = self.norm(x).reshape(b, c, hh * ww).transpose(1, 2)  # (B, HW, C)
        q = self.to_q(h)
        k = self.to_k(ctx)
        v = self.to_v(ctx)
        hd = c // self.num_heads

        def split(z):  # (B, S, C) -> (B, heads, S, hd)
            return z.reshape(b, -1, self.num_heads, hd).transpose(1, 2)

        attn = torch.softmax(
            split(q) @ split(k).transpose(-1, -2) / math.sqrt(hd), dim=-1
        )
        out = (attn @ split(v)).transpose(1, 2).reshape(b, hh * ww, c)
        out = self.to_out(out)
        return x + out.transpose(1, 2).reshape(b, c, hh, ww)


class ConditionalUNet(nn.Module):
    """Noise predictor eps_hat(z_t, t, contexts).

    contexts is a sequence of per-layer conditioning tensors (B, S, cond_dim),
    one per cross-attention site, in forward order.
    """

    ATTN_NAMES = ("down0", "down1", "mid", "up0")

    def __init__(
        self,
        latent_channels: int = 4,
        base_channels: int = 24,
        channel_mult: int = 2,
        cond_dim: int = 64,
        temb_dim: int = 64,
        num_heads: int = 4,
    ):
        super().__init__()
        c0 = base_channels
        c1 = base_channels * channel_mult
        self.cond_dim = cond_dim
        self.temb_dim = temb_dim

        self.time_mlp = nn.Sequential(
            nn.Linear(32, temb_dim), nn.SiLU(), nn.Linear(temb_dim, temb_dim)
        )
        self.conv_in = nn.Conv2d(latent_channels, c0, 3, padding=1)

        self.down0_res = ResBlock(c0, c0, temb_dim)
        self.down0_attn = CrossAttention(c0, cond_dim, num_heads)
        self.downsample = nn.Conv2d(c0, c1, 3, stride=2, padding=1)
        self.down1_res = ResBlock(c1, c1, temb_dim)
        self.down1_attn = CrossAttention(c1, cond_dim, num_heads)

        self.mid_res1 = ResBlock(c1, c1, temb_dim)
        self.mid_attn = CrossAttention(c1, cond_dim, num_heads)
        self.mid_res2 = ResBlock(c1, c1, temb_dim)

        self.up1_res = ResBlock(2 * c1, c1, temb_dim)
        self.upsample = nn.ConvTranspose2d(c1, c0, 4, stride=2, padding=1)
        self.up0_res = ResBlock(2 * c0, c0, temb_dim)
        self.up0_attn = CrossAttention(c0, cond_dim, num_heads)

        self.out_norm = nn.GroupNorm(_groups(c0), c0)
        self.out_conv = nn.Conv2d(c0, latent_channels, 3, padding=1)
        self.act = nn.SiLU()

    @property
    def num_cross_attention_layers(self) -> int:
        return len(self.ATTN_NAMES)

    def cross_attention_layers(self) -> list[tuple[str, CrossAttention]]:
        """(name, module) pairs for the attention sites, in forward order."""
        return [
            ("down0", self.down0_attn),
            ("down1", self.down1_attn),
            ("mid", self.mid_attn),
            ("up0", self.up0_attn),
        ]

    def forward(self, z: torch.Tensor, t: torch.Tensor, contexts: Sequence[torch.Tensor]) -> torch.Tensor:
        if len(contexts) != self.num_cross_attention_layers:
            raise ValueError(
                f"model has {self.num_cross_attention_layers} cross-attention layers, "
                f"got {len(contexts)} conditioning sequences"
            )
        temb = self.time_mlp(timestep_embedding(t, 32).to(z.dtype))

        h = self.conv_in(z)
        h0 = self.down0_attn(self.down0_res(h, temb), contexts[0])
        h1 = self.down1_attn(self.down1_res(self.downsample(h0), temb), contexts[1])

        m = self.mid_res1(h1, temb)
        m = self.mid_attn(m, contexts[2])
        m = self.mid_res2(m, temb)

        u = self.up1_res(torch.cat([m, h1], dim=1), temb)
        u = self.upsample(u)
        u = self.up0_res(torch.cat([u, h0], dim=1), temb)
        u = self.up0_attn(u, contexts[3])

        return self.out_conv(self.act(self.out_norm(u)))
