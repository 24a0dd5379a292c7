"""Low-rank adapters on the cross-attention projections.

Every cross-attention site contributes its query/key/value/output linear maps,
so a backbone with 4 sites carries 16 adapted projections.  Each adapter
factorizes an additive update ``delta_W = scale * A @ B^T`` with A seeded
gaussian and B zero at attach time, so the wrapped model starts exactly equal
to the frozen base.  One shared adapter set is trained across all tasks (the
per-task variant simply re-initializes and stashes values between tasks).
"""

from __future__ import annotations

import logging
from collections import OrderedDict
from typing import Iterable

import torch
import torch.nn.functional as F
from torch import nn

from .backbone.unet import ConditionalUNet

logger = logging.getLogger(__name__)

__all__ = [
    "LoraLinear",
    "LoraState",
    "FrozenLoraState",
    "attach_lora",
    "cosine_similarity",
    "clone_frozen",
]

_PROJECTIONS = ("to_q", "to_k", "to_v", "to_out")


class LoraLinear(nn.Module):
    """A frozen nn.Linear plus a trainable low-rank additive update."""

    def __init__(self, base: nn.Linear, rank: int, scale: float, a_init: torch.Tensor):
        super().__init__()
        if rank < 1:
            raise ValueError(f"rank must be >= 1, got {rank}")
        d_out, d_in = base.weight.shape
        if a_init.shape != (d_out, rank):
            raise ValueError(f"A init must be ({d_out}, {rank}), got {tuple(a_init.shape)}")
        self.base = base
        for p in self.base.parameters():
            p.requires_grad_(False)
        self.rank = rank
        self.scale = float(scale)
        self.A = nn.Parameter(a_init.clone())
        self.B = nn.Parameter(torch.zeros(d_in, rank))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.base(x) + self.scale * ((x @ self.B) @ self.A.transpose(0, 1))

    def delta_weight(self) -> torch.Tensor:
        """The dense additive update, (d_out, d_in), with scale folded in."""
        return self.scale * (self.A @ self.B.transpose(0, 1))


class LoraState:
    """Live adapter set: ordered map from projection name to its LoraLinear."""

    def __init__(self, modules: "OrderedDict[str, LoraLinear]", rank: int, scale: float):
        if not modules:
            raise ValueError("empty adapter set")
        self.modules = modules
        self.rank = rank
        self.scale = float(scale)

    @property
    def names(self) -> list[str]:
        return list(self.modules.keys())

    def delta_weight(self, name: str) -> torch.Tensor:
        if name not in self.modules:
            raise KeyError(f"no adapted projection named {name!r}")
        return self.modules[name].delta_weight()

    def flatten_delta(self, name: str) -> torch.Tensor:
        return self.delta_weight(name).reshape(-1)

    def parameters(self) -> list[nn.Parameter]:
        out: list[nn.Parameter] = []
        for m in self.modules.values():
            out.extend([m.A, m.B])
        return out

    def trainable_param_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def values(self) -> "OrderedDict[str, torch.Tensor]":
        """Detached copies of all factors, keyed '<proj>.A' / '<proj>.B'."""
        out: OrderedDict[str, torch.Tensor] = OrderedDict()
        for name, m in self.modules.items():
            out[f"{name}.A"] = m.A.detach().clone()
            out[f"{name}.B"] = m.B.detach().clone()
        return out

    def load_values(self, values: dict[str, torch.Tensor]) -> None:
        """Overwrite factors in place from a values() dict."""
        for name, m in self.modules.items():
            for factor in ("A", "B"):
                key = f"{name}.{factor}"
                if key not in values:
                    raise KeyError(f"missing adapter tensor {key!r}")
                src = values[key]
                dst = getattr(m, factor)
                if src.shape != dst.shape:
                    raise ValueError(f"{key}: shape {tuple(src.shape)} != {tuple(dst.shape)}")
                with torch.no_grad():
                    dst.copy_(src)

    def reinit(self, seed: int) -> None:
        """Redraw A and zero B (fresh adapter for a per-task-adapter run)."""
        g = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for m in self.modules.values():
                d_out, d_in = m.base.weight.shape
                m.A.copy_(torch.randn(d_out, m.rank, generator=g) * d_in ** -0.5)
                m.B.zero_()


class FrozenLoraState:
    """Immutable detached copy of an adapter set (for drift references)."""

    def __init__(self, deltas: "OrderedDict[str, torch.Tensor]", rank: int, scale: float):
        self.rank = rank
        self.scale = float(scale)
        self._deltas = deltas

    @property
    def names(self) -> list[str]:
        return list(self._deltas.keys())

    def delta_weight(self, name: str) -> torch.Tensor:
        if name not in self._deltas:
            raise KeyError(f"no adapted projection named {name!r}")
        return self._deltas[name]

    def flatten_delta(self, name: str) -> torch.Tensor:
        return self.delta_weight(name).reshape(-1)


def attach_lora(model, rank: int = 4, scale: float = 1.0, seed: int = 0) -> LoraState:
    """Wrap every cross-attention q/k/v/out projection with a low-rank adapter.

    Accepts either the denoiser or any object exposing it as `.unet`.  A
    factors are seeded N(0, 1/d_in); B starts at zero, so outputs are
    unchanged at attach time.  Attaching twice is an error.
    """
    unet: ConditionalUNet = getattr(model, "unet", model)
    if not isinstance(unet, ConditionalUNet):
        raise ValueError(f"cannot find a denoiser on {type(model).__name__}")
    g = torch.Generator().manual_seed(seed)
    modules: OrderedDict[str, LoraLinear] = OrderedDict()
    for layer_name, attn in unet.cross_attention_layers():
        for proj in _PROJECTIONS:
            base = getattr(attn, proj)
            if isinstance(base, LoraLinear):
                raise RuntimeError(f"adapters already attached at {layer_name}.{proj}")
            d_out, d_in = base.weight.shape
            a_init = torch.randn(d_out, rank, generator=g) * d_in ** -0.5
            wrapped = LoraLinear(base, rank, scale, a_init)
            setattr(attn, proj, wrapped)
            modules[f"{layer_name}.{proj}"] = wrapped
    return LoraState(modules, rank, scale)


def cosine_similarity(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Cosine of two flat vectors with an explicit zero-norm convention.

    Both zero -> 1 (nothing has moved, no drift to penalize); exactly one
    zero -> 0 (maximal mismatch, logged at debug level).  Differentiable in
    the nonzero branches.
    """
    if a.dim() != 1 or b.dim() != 1 or a.shape != b.shape:
        raise ValueError(f"expected equal-length flat vectors, got {tuple(a.shape)} / {tuple(b.shape)}")
    na = torch.linalg.vector_norm(a)
    nb = torch.linalg.vector_norm(b)
    a_zero = float(na.detach()) == 0.0
    b_zero = float(nb.detach()) == 0.0
    if a_zero and b_zero:
        return torch.ones((), dtype=a.dtype)
    if a_zero or b_zero:
        logger.debug("cosine_similarity: one operand has zero norm, returning 0")
        return torch.zeros((), dtype=a.dtype)
    return torch.dot(a, b) / (na * nb)


def clone_frozen(state: LoraState) -> FrozenLoraState:
    """Detached snapshot of the current dense updates, immune to later steps."""
    deltas: OrderedDict[str, torch.Tensor] = OrderedDict()
    for name in state.names:
        deltas[name] = state.delta_weight(name).detach().clone()
    return FrozenLoraState(deltas, state.rank, state.scale)
