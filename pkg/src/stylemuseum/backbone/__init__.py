"""Toy latent diffusion backbone: codec, text encoder, denoiser, schedule."""
