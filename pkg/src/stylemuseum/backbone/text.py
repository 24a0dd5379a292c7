"""Prompt tokenizer and the frozen toy text encoder.

The vocabulary is a fixed word list (shapes, colors, patterns, glue words)
plus three specials; prompts mention a style only through the ``<style>``
placeholder token, which gets replaced by a learned per-task vector after
encoding.  The encoder itself -- embeddings, sinusoidal positions, one
self-attention block -- is randomly initialized from a seed and then frozen,
so two encoders built with the same seed agree bitwise.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import torch
from torch import nn

__all__ = ["PLACEHOLDER", "VOCAB", "Tokenizer", "TextEncoder", "Conditioning"]

PAD = "<pad>"
UNK = "<unk>"
PLACEHOLDER = "<style>"

# Fixed toy vocabulary; order defines token ids and must never be reshuffled
# once checkpoints exist.
VOCAB: tuple[str, ...] = (
    PAD, UNK, PLACEHOLDER,
    "a", "an", "the", "in", "of", "on", "with", "and",
    "style", "art", "painting", "picture", "image", "drawing",
    "pattern", "texture", "shape",
    "circle", "square", "triangle", "cross", "ring", "dot", "bar", "blob",
    "stripe", "stripes", "dots", "checker", "grid", "wave",
    "red", "green", "blue", "yellow", "cyan", "magenta", "orange", "purple",
    "black", "white", "dark", "light", "small", "big",
)

_TOKEN_RE = re.compile(r"<style>|[a-z0-9]+")


class Tokenizer:
    """Whitespace/punctuation tokenizer over the fixed vocabulary."""

    def __init__(self, seq_len: int = 8):
        if seq_len < 1:
            raise ValueError(f"seq_len must be >= 1, got {seq_len}")
        self.seq_len = seq_len
        self.vocab = VOCAB
        self.index = {w: i for i, w in enumerate(VOCAB)}
        self.pad_id = self.index[PAD]
        self.unk_id = self.index[UNK]
        self.placeholder_id = self.index[PLACEHOLDER]

    def encode(self, prompt: str) -> list[int]:
        """Token ids for a prompt, padded/truncated to seq_len."""
        words = _TOKEN_RE.findall(prompt.lower())
        ids = [self.index.get(w, self.unk_id) for w in words]
        ids = ids[: self.seq_len]
        ids += [self.pad_id] * (self.seq_len - len(ids))
        return ids

    def placeholder_position(self, ids: list[int]) -> int | None:
        """Index of the style placeholder in `ids`, or None if absent."""
        positions = [i for i, t in enumerate(ids) if t == self.placeholder_id]
        if len(positions) > 1:
            raise ValueError(f"prompt contains {len(positions)} style placeholders, max 1")
        return positions[0] if positions else None

    def decode(self, ids: list[int]) -> str:
        return " ".join(self.vocab[i] for i in ids if i != self.pad_id)


@dataclass
class Conditioning:
    """Per-layer conditioning sequences consumed by the denoiser.

    layers: one (B, S, d_cond) tensor per cross-attention layer.  The layers
    differ only at the style-placeholder position (if any), where each layer
    carries its own learned style vector.
    """

    layers: tuple[torch.Tensor, ...]

    def __post_init__(self):
        if len(self.layers) == 0:
            raise ValueError("conditioning needs at least one layer sequence")
        shapes = {tuple(l.shape) for l in self.layers}
        if len(shapes) != 1:
            raise ValueError(f"layer sequences disagree in shape: {sorted(shapes)}")
        if self.layers[0].dim() != 3:
            raise ValueError("layer sequences must be (B, S, d_cond)")

    @property
    def batch_size(self) -> int:
        return self.layers[0].shape[0]

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @staticmethod
    def cat(conds: "list[Conditioning]") -> "Conditioning":
        """Concatenate along the batch dimension."""
        if not conds:
            raise ValueError("nothing to concatenate")
        n = conds[0].num_layers
        if any(c.num_layers != n for c in conds):
            raise ValueError("conditionings disagree in layer count")
        return Conditioning(
            tuple(torch.cat([c.layers[l] for c in conds], dim=0) for l in range(n))
        )


class TextEncoder(nn.Module):
    """Frozen embedding + positions + one self-attention block.

    forward maps token ids (S,) or (B, S) to contextual vectors (B, S, d).
    """

    def __init__(self, cond_dim: int = 64, seq_len: int = 8, num_heads: int = 4):
        super().__init__()
        if cond_dim % num_heads != 0:
            raise ValueError(f"cond_dim {cond_dim} not divisible by {num_heads} heads")
        self.cond_dim = cond_dim
        self.seq_len = seq_len
        self.embedding = nn.Embedding(len(VOCAB), cond_dim)
        self.register_buffer("positions", _sinusoidal_positions(seq_len, cond_dim))
        self.norm1 = nn.LayerNorm(cond_dim)
        self.attn = nn.MultiheadAttention(cond_dim, num_heads, batch_first=True)
        self.norm2 = nn.LayerNorm(cond_dim)
        self.mlp = nn.Sequential(
            nn.Linear(cond_dim, 2 * cond_dim), nn.SiLU(), nn.Linear(2 * cond_dim, cond_dim)
        )

    def embedding_vector(self, word: str) -> torch.Tensor:
        """Raw embedding-table row for a vocabulary word (detached copy)."""
        if word not in VOCAB:
            raise KeyError(f"{word!r} is not in the vocabulary")
        idx = VOCAB.index(word)
        return self.embedding.weight[idx].detach().clone()

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        ids = torch.as_tensor(ids, dtype=torch.long)
        if ids.dim() == 1:
            ids = ids.unsqueeze(0)
        if ids.dim() != 2 or ids.shape[1] != self.seq_len:
            raise ValueError(f"expected (B, {self.seq_len}) ids, got {tuple(ids.shape)}")
        x = self.embedding(ids) + self.positions.to(self.embedding.weight.dtype)
        h = self.norm1(x)
        a, _ = self.attn(h, h, h, need_weights=False)
        x = x + a
        x = x + self.mlp(self.norm2(x))
        return x


def _sinusoidal_positions(seq_len: int, dim: int) -> torch.Tensor:
    pos = torch.arange(seq_len, dtype=torch.float32).unsqueeze(1)
    i = torch.arange(0, dim, 2, dtype=torch.float32)
    freq = torch.exp(-torch.log(torch.tensor(10000.0)) * i / dim)
    table = torch.zeros(seq_len, dim)
    table[:, 0::2] = torch.sin(pos * freq)
    table[:, 1::2] = torch.cos(pos * freq)
    return table
