"""Shared fixtures and numeric helpers for the test suite."""

import numpy as np
import pytest
import torch

from stylemuseum.config import ModelConfig, TrainConfig

torch.set_num_threads(1)


def small_model_config(**overrides) -> ModelConfig:
    """A reduced backbone for fast unit tests."""
    kw = dict(base_channels=16, channel_mult=2, cond_dim=32, timesteps=50)
    kw.update(overrides)
    return ModelConfig(**kw)


def small_train_config(**overrides) -> TrainConfig:
    kw = dict(steps_per_task=8, learning_rate=1e-3, seed=0, model=small_model_config())
    kw.update(overrides)
    return TrainConfig(**kw)


def rel_err(a: float, b: float, floor: float = 1e-12) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def central_diff(f, param: torch.Tensor, index: int, h: float) -> float:
    """Symmetric finite difference of scalar f() along one coordinate of param."""
    flat = param.view(-1)
    with torch.no_grad():
        orig = flat[index].item()
        flat[index] = orig + h
        fp = float(f())
        flat[index] = orig - h
        fm = float(f())
        flat[index] = orig
    return (fp - fm) / (2.0 * h)


def pick_coords(grad: torch.Tensor, n: int, rng: np.random.Generator) -> list[int]:
    """n coordinate indices with non-negligible analytic gradient, seeded."""
    flat = grad.reshape(-1).abs()
    cutoff = float(flat.max()) * 1e-3
    eligible = torch.nonzero(flat > cutoff).reshape(-1).tolist()
    assert eligible, "gradient is entirely negligible; degenerate test point"
    if len(eligible) <= n:
        return eligible
    return list(rng.choice(eligible, size=n, replace=False))


@pytest.fixture(scope="session")
def three_style_tasks():
    from stylemuseum.data import preset_styles, synth_style_task

    specs = preset_styles(3)
    return [synth_style_task(s, n=6, seed=100 + i) for i, s in enumerate(specs)]
