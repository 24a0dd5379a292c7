"""Continual style customization for a toy latent text-to-image diffusion model.

Styles arrive one at a time as small image sets; each is absorbed into a
single growing "museum" checkpoint via shared low-rank adapters and per-task
frozen style tokens, with distillation and drift regularizers holding on to
earlier styles without replaying their data.
"""

from .config import ModelConfig, TrainConfig, load_train_config
from .losses import HyperParams
from .checkpoint import load_checkpoint, save_checkpoint, checkpoint_hash
from .data import StyleSpec, StyleTask, load_style_task, preset_styles, synth_style_task
from .evaluation import EvalReport, FeatureExtractor, evaluate_museum, fid, style_loss
from .trainer import (
    ModelSnapshot,
    MuseumCheckpoint,
    generate,
    new_museum,
    pseudo_noise_pass,
    run_task,
    snapshot_model,
)

__version__ = "0.1.0"

__all__ = [
    "ModelConfig",
    "TrainConfig",
    "HyperParams",
    "load_train_config",
    "StyleSpec",
    "StyleTask",
    "load_style_task",
    "synth_style_task",
    "preset_styles",
    "MuseumCheckpoint",
    "ModelSnapshot",
    "new_museum",
    "run_task",
    "snapshot_model",
    "pseudo_noise_pass",
    "generate",
    "save_checkpoint",
    "load_checkpoint",
    "checkpoint_hash",
    "EvalReport",
    "FeatureExtractor",
    "evaluate_museum",
    "style_loss",
    "fid",
    "__version__",
]
