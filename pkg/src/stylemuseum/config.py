"""Configuration dataclasses with a stable JSON mirror.

``TrainConfig`` carries everything a run needs (optimization, mode, seeds,
loss weights, and a nested ``ModelConfig``), and converts to/from plain dicts
whose keys match the field names, so a run is fully described by one JSON
file.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .losses import HyperParams

__all__ = ["ModelConfig", "TrainConfig", "MODES", "load_train_config"]

MODES = ("museum", "ft_only", "no_sdl", "no_ttl", "upper_bound")
SDL_MODES = ("alg1", "literal")
LF_MODES = ("onestep", "sampled")
CODECS = ("fixed", "learned")
TOKEN_INITS = ("word", "gaussian")


@dataclass
class ModelConfig:
    """Architecture and schedule of the frozen backbone."""

    image_size: int = 32
    latent_channels: int = 4
    latent_size: int = 8
    base_channels: int = 24
    channel_mult: int = 2
    cond_dim: int = 64
    text_len: int = 8
    timesteps: int = 100
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    codec: str = "fixed"
    codec_pretrain_steps: int = 400
    lora_rank: int = 4
    lora_scale: float = 1.0

    def __post_init__(self):
        if self.codec not in CODECS:
            raise ValueError(f"codec must be one of {CODECS}, got {self.codec!r}")
        if self.image_size % self.latent_size != 0:
            raise ValueError(
                f"latent_size {self.latent_size} must divide image_size {self.image_size}"
            )
        if self.lora_rank < 1:
            raise ValueError(f"lora_rank must be >= 1, got {self.lora_rank}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**_checked_fields(cls, d))


@dataclass
class TrainConfig:
    """One continual-customization run."""

    steps_per_task: int = 1000
    batch_size: int = 1
    learning_rate: float = 1e-5
    hyper: HyperParams = field(default_factory=HyperParams)
    sdl_mode: str = "alg1"
    lf_mode: str = "onestep"
    sdl_stopgrad: bool = False
    mode: str = "museum"
    seed: int = 0
    token_init: str | None = None  # None -> word for token-training modes, gaussian otherwise
    token_init_sigma: float | None = None  # None -> 0.02 trained / 1.0 frozen
    token_init_word: str = "art"
    grad_log_interval: int = 50
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.steps_per_task < 1:
            raise ValueError(f"steps_per_task must be >= 1, got {self.steps_per_task}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.sdl_mode not in SDL_MODES:
            raise ValueError(f"sdl_mode must be one of {SDL_MODES}, got {self.sdl_mode!r}")
        if self.lf_mode not in LF_MODES:
            raise ValueError(f"lf_mode must be one of {LF_MODES}, got {self.lf_mode!r}")
        if self.token_init is not None and self.token_init not in TOKEN_INITS:
            raise ValueError(
                f"token_init must be one of {TOKEN_INITS} or null, got {self.token_init!r}"
            )
        if self.grad_log_interval < 1:
            raise ValueError(f"grad_log_interval must be >= 1, got {self.grad_log_interval}")

    # -- resolved per-mode behavior ------------------------------------

    @property
    def tokens_trainable(self) -> bool:
        """Whether the current task's style vectors receive gradients."""
        return self.mode not in ("ft_only", "no_ttl")

    @property
    def uses_style_distill(self) -> bool:
        return self.mode in ("museum", "no_ttl", "upper_bound")

    @property
    def uses_dual_reg(self) -> bool:
        return self.mode in ("museum", "no_sdl", "no_ttl")

    @property
    def per_task_adapters(self) -> bool:
        return self.mode == "upper_bound"

    def resolved_token_init(self) -> tuple[str, float]:
        """(init kind, sigma) after applying per-mode defaults."""
        init = self.token_init or ("word" if self.tokens_trainable else "gaussian")
        sigma = self.token_init_sigma
        if sigma is None:
            sigma = 0.02 if self.tokens_trainable else 1.0
        return init, float(sigma)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["hyper"] = self.hyper.to_dict()
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        hyper = d.pop("hyper", None)
        model = d.pop("model", None)
        kwargs = _checked_fields(cls, d)
        if hyper is not None:
            kwargs["hyper"] = HyperParams(**hyper)
        if model is not None:
            kwargs["model"] = ModelConfig.from_dict(model)
        return cls(**kwargs)


def _checked_fields(cls, d: dict) -> dict:
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    return {k: v for k, v in d.items() if k in known}


def load_train_config(path: str | Path) -> TrainConfig:
    """Parse a JSON config file; raises ValueError on malformed content."""
    try:
        raw = Path(path).read_text()
    except OSError as e:
        raise ValueError(f"cannot read config {path}: {e}") from e
    try:
        data = json.loads(raw)
    except json.JSONDecodeError as e:
        raise ValueError(f"config {path} is not valid JSON: {e}") from e
    if not isinstance(data, dict):
        raise ValueError(f"config {path} must contain a JSON object")
    return TrainConfig.from_dict(data)
