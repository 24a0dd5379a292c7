"""Frozen latent-diffusion backbone with style-token conditioning.

``LatentDiffusionModel`` bundles the codec, the frozen text encoder, the
conditional denoiser, the noise schedule, and the per-task token bank, and is
the single object training and generation operate on.  After construction all
base parameters are frozen; the only trainable leaves ever added are low-rank
adapter factors and the current task's token set.
"""

from __future__ import annotations

import logging

import torch
from torch import nn

from ..config import ModelConfig
from ..seeding import derive_seed
from ..tokens import TokenBank
from .codec import ConvCodec, FixedCodec, pretrain_codec
from .schedule import NoiseSchedule
from .text import Conditioning, TextEncoder, Tokenizer
from .unet import ConditionalUNet

logger = logging.getLogger(__name__)

__all__ = ["LatentDiffusionModel", "build_backbone"]


class LatentDiffusionModel(nn.Module):
    def __init__(
        self,
        cfg: ModelConfig,
        codec: nn.Module,
        text_encoder: TextEncoder,
        tokenizer: Tokenizer,
        unet: ConditionalUNet,
        schedule: NoiseSchedule,
        token_bank: TokenBank,
    ):
        super().__init__()
        self.cfg = cfg
        self.codec = codec
        self.text_encoder = text_encoder
        self.tokenizer = tokenizer
        self.unet = unet
        self.schedule = schedule
        self.token_bank = token_bank
        self.lora_state = None  # set by attach_lora via the trainer

    # ----------------------------------------------------------- codec side

    def encode_image(self, x: torch.Tensor) -> torch.Tensor:
        """Image in [0,1] -> clean latent (detached; the codec is frozen)."""
        with torch.no_grad():
            return self.codec.encode(x)

    def decode_latent(self, z: torch.Tensor) -> torch.Tensor:
        """Latent -> image clamped to [0,1]."""
        with torch.no_grad():
            return self.codec.decode(z)

    def add_noise(self, z0: torch.Tensor, t, eps: torch.Tensor) -> torch.Tensor:
        return self.schedule.add_noise(z0, t, eps)

    # ------------------------------------------------------------ text side

    @property
    def num_cross_attention_layers(self) -> int:
        return self.unet.num_cross_attention_layers

    def encode_prompt(self, prompt, style_ref: int | None = None) -> Conditioning:
        """Tokenize + encode a prompt into per-layer conditioning sequences.

        A ``<style>`` placeholder requires `style_ref` (a registered task id)
        and is substituted, after encoding, by that task's layer-l vector in
        layer l's sequence.  Without a placeholder all layers share one
        sequence.
        """
        if isinstance(prompt, str):
            ids = self.tokenizer.encode(prompt)
        else:
            ids = list(int(i) for i in prompt)
            if len(ids) > self.tokenizer.seq_len:
                raise ValueError(
                    f"prompt has {len(ids)} tokens, max {self.tokenizer.seq_len}"
                )
            ids = ids + [self.tokenizer.pad_id] * (self.tokenizer.seq_len - len(ids))
        pos = self.tokenizer.placeholder_position(ids)
        if pos is not None and style_ref is None:
            raise ValueError("prompt contains the style placeholder but no style_ref was given")
        if pos is None and style_ref is not None:
            logger.debug("style_ref %s given but prompt has no placeholder", style_ref)

        with torch.no_grad():
            base = self.text_encoder(torch.tensor([ids], dtype=torch.long))
        layers = []
        for layer in range(self.num_cross_attention_layers):
            seq = base.clone()
            if pos is not None:
                vec = self.token_bank.lookup(style_ref, layer)  # may raise KeyError
                seq = seq.to(vec.dtype)
                seq[0, pos] = vec
            layers.append(seq)
        return Conditioning(tuple(layers))

    # -------------------------------------------------------- denoiser side

    def predict_noise(self, z_t: torch.Tensor, t, cond: Conditioning) -> torch.Tensor:
        """eps_hat for a noised latent; shape follows the input (3-D or 4-D)."""
        squeeze = z_t.dim() == 3
        zb = z_t.unsqueeze(0) if squeeze else z_t
        if zb.dim() != 4 or zb.shape[1] != self.cfg.latent_channels \
                or zb.shape[2] != self.cfg.latent_size or zb.shape[3] != self.cfg.latent_size:
            raise ValueError(
                f"latent must be ({self.cfg.latent_channels}, {self.cfg.latent_size}, "
                f"{self.cfg.latent_size}), got {tuple(z_t.shape)}"
            )
        if cond.num_layers != self.num_cross_attention_layers:
            raise ValueError(
                f"conditioning has {cond.num_layers} layers, model expects "
                f"{self.num_cross_attention_layers}"
            )
        if cond.batch_size != zb.shape[0]:
            raise ValueError(
                f"conditioning batch {cond.batch_size} != latent batch {zb.shape[0]}"
            )
        if isinstance(t, int):
            tb = torch.full((zb.shape[0],), t, dtype=torch.long)
        else:
            tb = torch.as_tensor(t, dtype=torch.long).reshape(-1)
            if tb.numel() == 1 and zb.shape[0] > 1:
                tb = tb.expand(zb.shape[0])
        if tb.numel() != zb.shape[0]:
            raise ValueError(f"t has {tb.numel()} entries for batch {zb.shape[0]}")
        if bool((tb < 0).any()) or bool((tb >= self.schedule.timesteps).any()):
            raise ValueError(
                f"timestep out of range [0, {self.schedule.timesteps}): {tb.tolist()}"
            )
        eps = self.unet(zb, tb, list(cond.layers))
        return eps.squeeze(0) if squeeze else eps

    def ddim_sample(self, cond: Conditioning, steps: int = 50, seed: int = 0) -> torch.Tensor:
        """Deterministic sampling from seeded gaussian noise (eta = 0).

        Returns a clean latent, (C, H, W) for batch-1 conditioning, else
        (B, C, H, W).  Bitwise reproducible for fixed (cond, steps, seed).
        """
        ts = self.schedule.ddim_timesteps(steps)
        b = cond.batch_size
        dtype = next(self.unet.parameters()).dtype
        g = torch.Generator().manual_seed(seed)
        z = torch.randn(
            b, self.cfg.latent_channels, self.cfg.latent_size, self.cfg.latent_size,
            generator=g,
        ).to(dtype)
        abar = self.schedule.alphas_cumprod
        with torch.no_grad():
            for i, t in enumerate(ts):
                eps = self.predict_noise(z, torch.full((b,), t, dtype=torch.long), cond)
                a_t = abar[t].to(dtype)
                a_next = abar[ts[i + 1]].to(dtype) if i + 1 < len(ts) else torch.ones((), dtype=dtype)
                z0_hat = (z - (1.0 - a_t).sqrt() * eps) / a_t.sqrt()
                z = a_next.sqrt() * z0_hat + (1.0 - a_next).sqrt() * eps
        return z.squeeze(0) if b == 1 else z

    # ------------------------------------------------------------- plumbing

    def freeze_base(self) -> None:
        for p in self.parameters():
            p.requires_grad_(False)

    def param_counts(self) -> dict[str, int]:
        """Structural parameter counts: frozen base, adapter factors, style tokens."""
        tokens = sum(p.numel() for p in self.token_bank.sets.values())
        adapters = 0
        if self.lora_state is not None:
            adapters = self.lora_state.trainable_param_count()
        total = sum(p.numel() for p in self.parameters())
        return {"base": total - adapters - tokens, "adapters": adapters, "tokens": tokens}


def build_backbone(cfg: ModelConfig, seed: int = 0, codec_corpus: torch.Tensor | None = None) -> LatentDiffusionModel:
    """Construct and freeze a backbone; same (cfg, seed) -> bitwise-same weights.

    With ``codec=learned`` the autoencoder is pretrained on `codec_corpus`
    (or, if omitted, on a seeded generic synthetic corpus) and then frozen.
    """
    tokenizer = Tokenizer(seq_len=cfg.text_len)
    schedule = NoiseSchedule(cfg.timesteps, cfg.beta_start, cfg.beta_end)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(seed, "text"))
        text_encoder = TextEncoder(cond_dim=cfg.cond_dim, seq_len=cfg.text_len)
        torch.manual_seed(derive_seed(seed, "unet"))
        unet = ConditionalUNet(
            latent_channels=cfg.latent_channels,
            base_channels=cfg.base_channels,
            channel_mult=cfg.channel_mult,
            cond_dim=cfg.cond_dim,
        )
    if cfg.codec == "fixed":
        codec = FixedCodec(cfg.image_size, cfg.latent_channels, cfg.latent_size,
                           seed=derive_seed(seed, "codec"))
    else:
        codec = ConvCodec(cfg.image_size, cfg.latent_channels, cfg.latent_size,
                          seed=derive_seed(seed, "codec"))
        if codec_corpus is None:
            from ..data import synth_codec_corpus

            codec_corpus = synth_codec_corpus(seed=derive_seed(seed, "codec-corpus"))
        pretrain_codec(codec, codec_corpus, steps=cfg.codec_pretrain_steps,
                       seed=derive_seed(seed, "codec-pretrain"))
    bank = TokenBank(unet.num_cross_attention_layers, cfg.cond_dim)
    model = LatentDiffusionModel(cfg, codec, text_encoder, tokenizer, unet, schedule, bank)
    model.freeze_base()
    return model
