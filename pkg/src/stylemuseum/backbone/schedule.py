"""Linear beta schedule and forward noising for the latent diffusion process.

The schedule is kept in float64 so that cumulative products stay exact enough
to be rebuilt bitwise from (timesteps, beta_start, beta_end) alone; callers
get factors cast to the dtype of the tensor they are noising.
"""

from __future__ import annotations

import torch

__all__ = ["NoiseSchedule"]


class NoiseSchedule:
    """Discrete-time noising schedule with linearly increasing variances.

    Attributes:
        timesteps: number of diffusion steps T.
        betas: (T,) float64 tensor, strictly increasing, each in (0, 1).
        alphas_cumprod: (T,) float64 tensor of running products of (1 - beta),
            strictly decreasing, each in (0, 1).
    """

    def __init__(self, timesteps: int = 100, beta_start: float = 1e-4, beta_end: float = 2e-2):
        if timesteps < 2:
            raise ValueError(f"timesteps must be >= 2, got {timesteps}")
        if not (0.0 < beta_start < beta_end < 1.0):
            raise ValueError(
                f"need 0 < beta_start < beta_end < 1, got ({beta_start}, {beta_end})"
            )
        self.timesteps = int(timesteps)
        self.beta_start = float(beta_start)
        self.beta_end = float(beta_end)
        self.betas = torch.linspace(beta_start, beta_end, timesteps, dtype=torch.float64)
        self.alphas_cumprod = torch.cumprod(1.0 - self.betas, dim=0)

    def _gather(self, t, dtype: torch.dtype) -> torch.Tensor:
        """alphas_cumprod at integer step(s) t, cast to `dtype`."""
        if isinstance(t, int):
            t = torch.tensor([t])
        t = torch.as_tensor(t, dtype=torch.long).reshape(-1)
        if t.numel() == 0:
            raise ValueError("empty timestep tensor")
        if bool((t < 0).any()) or bool((t >= self.timesteps).any()):
            raise ValueError(f"timestep out of range [0, {self.timesteps}): {t.tolist()}")
        return self.alphas_cumprod[t].to(dtype)

    def add_noise(self, z0: torch.Tensor, t, eps: torch.Tensor) -> torch.Tensor:
        """Noise a clean latent to step t: sqrt(abar_t) z0 + sqrt(1 - abar_t) eps.

        Args:
            z0: clean latent, (C, H, W) or (B, C, H, W).
            t: int timestep, or a length-B long tensor for batched input.
            eps: gaussian noise, same shape as z0.

        Returns:
            Noised latent of the same shape and dtype as z0.
        """
        if z0.shape != eps.shape:
            raise ValueError(f"z0 shape {tuple(z0.shape)} != eps shape {tuple(eps.shape)}")
        abar = self._gather(t, z0.dtype)
        if z0.dim() == 3:
            if abar.numel() != 1:
                raise ValueError("batched t given for a single latent")
            a = abar.reshape(())
        elif z0.dim() == 4:
            if abar.numel() == 1:
                abar = abar.expand(z0.shape[0])
            if abar.numel() != z0.shape[0]:
                raise ValueError(
                    f"t has {abar.numel()} entries for batch of {z0.shape[0]}"
                )
            a = abar.reshape(-1, 1, 1, 1)
        else:
            raise ValueError(f"latent must be 3-D or 4-D, got {z0.dim()}-D")
        return a.sqrt() * z0 + (1.0 - a).sqrt() * eps

    def ddim_timesteps(self, steps: int) -> list[int]:
        """Strictly decreasing timestep subsequence of length `steps`.

        Uses stride T // steps so the list has exactly `steps` unique entries
        for any 1 <= steps <= T, and is the full trajectory at steps == T.
        """
        if not (1 <= steps <= self.timesteps):
            raise ValueError(f"steps must be in [1, {self.timesteps}], got {steps}")
        stride = self.timesteps // steps
        return [i * stride for i in range(steps - 1, -1, -1)]
