"""Per-task style tokens: one learned vector per cross-attention layer.

Each customization task owns a set of L vectors of width d_cond.  During
training only the current task's set is trainable; at task end it is frozen
and never revisited, so earlier styles keep their exact embeddings no matter
what later tasks do to the shared adapters.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

__all__ = ["TokenSet", "TokenBank"]


@dataclass
class TokenSet:
    """Read-mostly view of one task's style vectors."""

    task_id: int
    vectors: torch.Tensor  # (L, d_cond), the live parameter
    trainable: bool


class TokenBank(nn.Module):
    """Registry of frozen and in-training token sets, keyed by task id."""

    def __init__(self, num_layers: int, cond_dim: int):
        super().__init__()
        if num_layers < 1 or cond_dim < 1:
            raise ValueError(f"bad bank dims: L={num_layers}, d_cond={cond_dim}")
        self.num_layers = num_layers
        self.cond_dim = cond_dim
        self.sets = nn.ParameterDict()
        self._frozen: set[int] = set()

    # ------------------------------------------------------------------ api

    def init_task_tokens(
        self,
        task_id: int,
        init: str = "gaussian",
        seed: int = 0,
        sigma: float = 0.02,
        word_vector: torch.Tensor | None = None,
        trainable: bool = True,
    ) -> TokenSet:
        """Create the token set for a new task.

        init="word" copies `word_vector` (a frozen text-encoder embedding row)
        into every layer; init="gaussian" draws seeded N(0, sigma^2) vectors.
        """
        if task_id < 1:
            raise ValueError(f"task_id must be >= 1, got {task_id}")
        key = str(task_id)
        if key in self.sets:
            raise RuntimeError(f"task {task_id} already has tokens")
        if init == "word":
            if word_vector is None:
                raise ValueError("init='word' requires word_vector")
            if word_vector.shape != (self.cond_dim,):
                raise ValueError(
                    f"word_vector must be ({self.cond_dim},), got {tuple(word_vector.shape)}"
                )
            vecs = word_vector.detach().clone().repeat(self.num_layers, 1)
        elif init == "gaussian":
            g = torch.Generator().manual_seed(seed)
            vecs = sigma * torch.randn(self.num_layers, self.cond_dim, generator=g)
        else:
            raise ValueError(f"unknown init {init!r}, expected 'word' or 'gaussian'")
        param = nn.Parameter(vecs, requires_grad=trainable)
        self.sets[key] = param
        if not trainable:
            self._frozen.add(task_id)
        return TokenSet(task_id, param, trainable)

    def lookup(self, task_id: int, layer: int) -> torch.Tensor:
        """The (d_cond,) vector for one layer of one task (live view)."""
        key = str(task_id)
        if key not in self.sets:
            raise KeyError(f"no tokens for task {task_id}")
        if not (0 <= layer < self.num_layers):
            raise IndexError(f"layer {layer} out of range [0, {self.num_layers})")
        return self.sets[key][layer]

    def freeze_task(self, task_id: int) -> None:
        key = str(task_id)
        if key not in self.sets:
            raise KeyError(f"no tokens for task {task_id}")
        self.sets[key].requires_grad_(False)
        self._frozen.add(task_id)

    def get(self, task_id: int) -> TokenSet:
        key = str(task_id)
        if key not in self.sets:
            raise KeyError(f"no tokens for task {task_id}")
        return TokenSet(task_id, self.sets[key], task_id not in self._frozen)

    def parameter(self, task_id: int) -> nn.Parameter:
        key = str(task_id)
        if key not in self.sets:
            raise KeyError(f"no tokens for task {task_id}")
        return self.sets[key]

    def has_task(self, task_id: int) -> bool:
        return str(task_id) in self.sets

    def task_ids(self) -> list[int]:
        return sorted(int(k) for k in self.sets.keys())

    @property
    def num_tasks(self) -> int:
        return len(self.sets)

    def frozen_ids(self) -> list[int]:
        return sorted(self._frozen)
