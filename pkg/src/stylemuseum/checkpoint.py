"""Single-file museum archive: JSON manifest + little-endian float32 blobs.

Layout: 8-byte magic, uint32 format version, uint64 manifest length, the
manifest (sorted-keys JSON), then all tensors concatenated in sorted name
order.  Nothing time- or path-dependent is written, so saving the same museum
twice yields byte-identical files, and save -> load -> save round-trips
exactly.  The noise schedule and frozen architecture are rebuilt from the
config echo and base seed rather than stored.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .config import TrainConfig
from .seeding import derive_seed

__all__ = ["CheckpointFormatError", "save_checkpoint", "load_checkpoint", "checkpoint_hash"]

MAGIC = b"MUSMCKPT"
FORMAT_VERSION = 1


class CheckpointFormatError(ValueError):
    """Raised for wrong magic, truncation, or a malformed manifest."""


def _tensor_blobs(museum) -> dict[str, torch.Tensor]:
    blobs: dict[str, torch.Tensor] = {}
    for key, value in museum.model.state_dict().items():
        blobs[f"model.{key}"] = value
    for task_id, values in museum.task_loras.items():
        for name, tensor in values.items():
            blobs[f"stash.{task_id}.{name}"] = tensor
    return blobs


def save_checkpoint(museum, path: str | Path) -> Path:
    """Write the museum to `path`; deterministic bytes for identical state."""
    path = Path(path)
    blobs = _tensor_blobs(museum)
    names = sorted(blobs.keys())
    tensors_meta: dict[str, dict] = {}
    payload = bytearray()
    for name in names:
        arr = blobs[name].detach().to(torch.float32).contiguous().numpy()
        raw = arr.astype("<f4", copy=False).tobytes()
        tensors_meta[name] = {
            "shape": list(arr.shape),
            "offset": len(payload),
            "numel": int(arr.size),
        }
        payload.extend(raw)
    manifest = {
        "kind": "museum-checkpoint",
        "format_version": FORMAT_VERSION,
        "base_seed": museum.base_seed,
        "train_config": museum.cfg.to_dict(),
        "registry": museum.registry,
        "stashed_adapter_tasks": sorted(museum.task_loras.keys()),
        "tensors": tensors_meta,
    }
    mbytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<Q", len(mbytes)))
        f.write(mbytes)
        f.write(bytes(payload))
    return path


def load_checkpoint(path: str | Path):
    """Rebuild a museum from an archive; generation from it is bitwise stable."""
    from .backbone.model import build_backbone
    from .lora import attach_lora
    from .trainer import MuseumCheckpoint

    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if len(raw) < len(MAGIC) + 12:
        raise CheckpointFormatError(f"{path}: file too short to be a museum archive")
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic, not a museum archive")
    (version,) = struct.unpack_from("<I", raw, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported format version {version}")
    (mlen,) = struct.unpack_from("<Q", raw, len(MAGIC) + 4)
    m_start = len(MAGIC) + 12
    if len(raw) < m_start + mlen:
        raise CheckpointFormatError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(raw[m_start : m_start + mlen].decode())
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise CheckpointFormatError(f"{path}: malformed manifest: {e}") from e
    if manifest.get("kind") != "museum-checkpoint":
        raise CheckpointFormatError(f"{path}: manifest kind {manifest.get('kind')!r}")

    blob_start = m_start + mlen
    tensors: dict[str, torch.Tensor] = {}
    for name, meta in manifest["tensors"].items():
        off = blob_start + meta["offset"]
        nbytes = meta["numel"] * 4
        if off + nbytes > len(raw):
            raise CheckpointFormatError(f"{path}: truncated tensor data for {name!r}")
        arr = np.frombuffer(raw, dtype="<f4", count=meta["numel"], offset=off)
        tensors[name] = torch.from_numpy(arr.copy().reshape(meta["shape"]))

    cfg = TrainConfig.from_dict(manifest["train_config"])
    base_seed = int(manifest["base_seed"])
    model_cfg = cfg.model
    if model_cfg.codec == "learned":
        # Weights come from the archive; skip the pretraining pass.
        model_cfg = dataclasses.replace(model_cfg, codec_pretrain_steps=0)
    model = build_backbone(model_cfg, seed=base_seed)
    model.lora_state = attach_lora(
        model, cfg.model.lora_rank, cfg.model.lora_scale, seed=derive_seed(base_seed, "lora")
    )
    for entry in manifest["registry"]:
        model.token_bank.init_task_tokens(
            int(entry["task_id"]), init="gaussian", seed=0, sigma=1.0, trainable=False
        )

    state = {
        name[len("model.") :]: t for name, t in tensors.items() if name.startswith("model.")
    }
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as e:
        raise CheckpointFormatError(f"{path}: weights do not match the config echo: {e}") from e

    museum = MuseumCheckpoint(model, cfg, base_seed)
    museum.registry = [
        {
            "task_id": int(e["task_id"]),
            "style_name": e["style_name"],
            "prompt_texts": list(e["prompt_texts"]),
        }
        for e in manifest["registry"]
    ]
    for task_id in manifest.get("stashed_adapter_tasks", []):
        prefix = f"stash.{task_id}."
        values = {
            name[len(prefix) :]: t for name, t in tensors.items() if name.startswith(prefix)
        }
        if not values:
            raise CheckpointFormatError(f"{path}: missing stashed adapters for task {task_id}")
        museum.task_loras[int(task_id)] = values
    return museum


def checkpoint_hash(path: str | Path) -> str:
    """sha256 of the archive bytes."""
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
