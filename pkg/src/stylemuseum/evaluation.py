"""Desk-scale quantitative evaluation: Gram style loss, FID, report emission.

Features come from a fixed random-weight conv net (seeded, frozen) -- random
conv features are a workable proxy for texture statistics at 32x32.  Style
distance is the squared Frobenius gap between Gram matrices at two tap
layers; FID uses the standard Gaussian-moment formula with a symmetric
eigendecomposition square root.  The optional ``proxy_clip`` column is a
plain cosine between pooled random features and is NOT comparable to CLIP
scores.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from torch import nn

from .trainer import MuseumCheckpoint, generate

logger = logging.getLogger(__name__)

__all__ = [
    "FeatureExtractor",
    "EvalReport",
    "gram_matrix",
    "style_loss",
    "fid",
    "evaluate_museum",
    "contact_sheet",
    "DEFAULT_EXTRACTOR_SEED",
    "DEFAULT_EVAL_PROMPTS",
]

DEFAULT_EXTRACTOR_SEED = 17
DEFAULT_EVAL_PROMPTS = (
    "a circle in <style> style",
    "a square in <style> style",
    "a triangle in <style> style",
    "a cross in <style> style",
    "a ring in <style> style",
)


class FeatureExtractor(nn.Module):
    """Fixed seeded 4-layer conv net; activations tapped after layers 2 and 4."""

    def __init__(self, seed: int = DEFAULT_EXTRACTOR_SEED):
        super().__init__()
        self.seed = seed
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.conv1 = nn.Conv2d(3, 16, 3, padding=1)
            self.conv2 = nn.Conv2d(16, 32, 3, stride=2, padding=1)
            self.conv3 = nn.Conv2d(32, 48, 3, padding=1)
            self.conv4 = nn.Conv2d(48, 64, 3, stride=2, padding=1)
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def features(self, x: torch.Tensor) -> list[torch.Tensor]:
        """Tap activations, each (B, C, H, W); accepts (3, H, W) or batched."""
        squeeze = x.dim() == 3
        xb = x.unsqueeze(0) if squeeze else x
        if xb.dim() != 4 or xb.shape[1] != 3:
            raise ValueError(f"expected (3, H, W) or (B, 3, H, W), got {tuple(x.shape)}")
        with torch.no_grad():
            h = torch.relu(self.conv1(xb))
            t1 = torch.relu(self.conv2(h))
            h = torch.relu(self.conv3(t1))
            t2 = torch.relu(self.conv4(h))
        if squeeze:
            return [t1.squeeze(0), t2.squeeze(0)]
        return [t1, t2]

    def vector(self, x: torch.Tensor) -> torch.Tensor:
        """Spatially pooled deepest tap: (64,) for a single image, (B, 64) batched."""
        t2 = self.features(x)[-1]
        return t2.mean(dim=(-2, -1))


def gram_matrix(features: torch.Tensor) -> torch.Tensor:
    """G = F F^T / (C * H * W) for a (C, H, W) feature map."""
    if features.dim() != 3 or features.numel() == 0:
        raise ValueError(f"expected non-empty (C, H, W) features, got {tuple(features.shape)}")
    c, h, w = features.shape
    f = features.reshape(c, h * w)
    return (f @ f.T) / (c * h * w)


def _as_image_batch(images) -> torch.Tensor:
    if isinstance(images, torch.Tensor):
        batch = images.unsqueeze(0) if images.dim() == 3 else images
    else:
        items = list(images)
        if not items:
            raise ValueError("empty image set")
        batch = torch.stack([torch.as_tensor(im) for im in items])
    if batch.dim() != 4 or batch.shape[0] == 0:
        raise ValueError(f"expected a non-empty image batch, got {tuple(batch.shape)}")
    return batch.to(torch.float32)


def style_loss(generated, references, extractor: FeatureExtractor | None = None) -> float:
    """Mean squared Frobenius distance between Gram matrices, over pairs and taps.

    Raw value; reports multiply by 100.
    """
    extractor = extractor or FeatureExtractor()
    gen = _as_image_batch(generated)
    ref = _as_image_batch(references)
    gen_taps = extractor.features(gen)
    ref_taps = extractor.features(ref)
    total, count = 0.0, 0
    for gt, rt in zip(gen_taps, ref_taps):
        g_grams = [gram_matrix(gt[i]) for i in range(gt.shape[0])]
        r_grams = [gram_matrix(rt[i]) for i in range(rt.shape[0])]
        for gg in g_grams:
            for rg in r_grams:
                total += float(((gg - rg) ** 2).sum())
                count += 1
    return total / count


def _sqrtm_psd(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2.0)
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ v.T


def fid(feats_a, feats_b) -> float:
    """Frechet distance between Gaussian fits of two feature sets (N, D)."""
    a = np.asarray(feats_a, dtype=np.float64)
    b = np.asarray(feats_b, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"feature sets must be (N, D) with equal D, got {a.shape} / {b.shape}")
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ValueError("need at least 2 samples per set for a covariance")
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    sig_a = np.cov(a, rowvar=False).reshape(a.shape[1], a.shape[1])
    sig_b = np.cov(b, rowvar=False).reshape(b.shape[1], b.shape[1])
    sb_half = _sqrtm_psd(sig_b)
    inner = sb_half @ sig_a @ sb_half
    tr_sqrt = float(np.sqrt(np.clip(np.linalg.eigvalsh((inner + inner.T) / 2.0), 0.0, None)).sum())
    value = float(np.sum((mu_a - mu_b) ** 2) + np.trace(sig_a) + np.trace(sig_b) - 2.0 * tr_sqrt)
    return max(value, 0.0)


@dataclass
class EvalReport:
    """Per-style metric rows plus an aggregate row, with emission helpers."""

    rows: list[dict] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    COLUMNS = ("style_id", "style_name", "style_loss_x100", "fid", "proxy_clip", "n_generated")

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.COLUMNS)
        for row in self.rows:
            writer.writerow([
                row["style_id"],
                row["style_name"],
                f"{row['style_loss_x100']:.6f}",
                f"{row['fid']:.6f}",
                f"{row['proxy_clip']:.6f}",
                row["n_generated"],
            ])
        return buf.getvalue()

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_csv_text())
        return path

    def write_json(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(
            json.dumps({"rows": self.rows, "metadata": self.metadata}, sort_keys=True, indent=2)
            + "\n"
        )
        return path


def evaluate_museum(
    museum: MuseumCheckpoint,
    tasks,
    prompts=DEFAULT_EVAL_PROMPTS,
    seeds=tuple(range(10)),
    steps: int = 50,
    extractor: FeatureExtractor | None = None,
) -> EvalReport:
    """Generate per style across prompts x seeds and score against its training set.

    `tasks` must list the trained tasks in registry order.
    """
    extractor = extractor or FeatureExtractor()
    tasks = list(tasks)
    prompts = list(prompts)
    seeds = list(seeds)
    if not prompts or not seeds:
        raise ValueError("need at least one prompt and one seed")
    if len(tasks) != museum.num_tasks:
        raise RuntimeError(
            f"checkpoint has {museum.num_tasks} trained tasks but {len(tasks)} were given"
        )
    for i, task in enumerate(tasks):
        entry = museum.registry[i]
        if task.style_name != entry["style_name"]:
            raise RuntimeError(
                f"task order mismatch at position {i}: {task.style_name!r} vs "
                f"registered {entry['style_name']!r}"
            )

    rows = []
    for i, task in enumerate(tasks):
        task_id = museum.registry[i]["task_id"]
        gen = torch.stack(
            [
                generate(museum, p, task_id, seed=s, steps=steps)
                for p in prompts
                for s in seeds
            ]
        )
        refs = task.images
        sl = style_loss(gen, refs, extractor)
        gen_vecs = extractor.vector(gen)
        ref_vecs = extractor.vector(refs)
        f = fid(gen_vecs.numpy(), ref_vecs.numpy())
        cos = torch.nn.functional.cosine_similarity(
            gen_vecs.unsqueeze(1), ref_vecs.unsqueeze(0), dim=-1
        )
        rows.append(
            {
                "style_id": task_id,
                "style_name": task.style_name,
                "style_loss_x100": 100.0 * sl,
                "fid": f,
                "proxy_clip": float(cos.mean()),
                "n_generated": int(gen.shape[0]),
            }
        )
        logger.info(
            "style %s: style_loss_x100=%.4f fid=%.4f", task.style_name, 100.0 * sl, f
        )

    ave = {
        "style_id": "Ave",
        "style_name": "Ave",
        "style_loss_x100": float(np.mean([r["style_loss_x100"] for r in rows])),
        "fid": float(np.mean([r["fid"] for r in rows])),
        "proxy_clip": float(np.mean([r["proxy_clip"] for r in rows])),
        "n_generated": int(np.sum([r["n_generated"] for r in rows])),
    }
    metadata = {
        "prompts": prompts,
        "seeds": seeds,
        "ddim_steps": steps,
        "extractor_seed": extractor.seed,
        "mode": museum.mode,
        "notes": [
            "fid uses each task's small training set as reference; expect small-sample bias",
            "proxy_clip is a random-feature cosine, not comparable to CLIP scores",
        ],
    }
    return EvalReport(rows=rows + [ave], metadata=metadata)


def contact_sheet(
    museum: MuseumCheckpoint,
    tasks,
    prompts=DEFAULT_EVAL_PROMPTS,
    seed: int = 0,
    steps: int = 50,
    path: str | Path = "grid.png",
    upscale: int = 4,
) -> Path:
    """PNG grid of generations: one row per style, one column per prompt."""
    tasks = list(tasks)
    prompts = list(prompts)
    size = museum.model.cfg.image_size * upscale
    pad = 2
    width = pad + len(prompts) * (size + pad)
    height = pad + len(tasks) * (size + pad)
    sheet = Image.new("RGB", (width, height), (255, 255, 255))
    for r, task in enumerate(tasks):
        task_id = museum.registry[r]["task_id"]
        for c, prompt in enumerate(prompts):
            img = generate(museum, prompt, task_id, seed=seed, steps=steps)
            arr = (img.numpy().transpose(1, 2, 0) * 255.0).round().astype(np.uint8)
            tile = Image.fromarray(arr).resize((size, size), Image.NEAREST)
            sheet.paste(tile, (pad + c * (size + pad), pad + r * (size + pad)))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    sheet.save(path)
    return path
