"""Style-task ingestion and synthetic style rendering.

A customization task is a handful of images sharing one visual style plus one
prompt per image; prompts mention the style only through the ``<style>``
placeholder.  Tasks load from a folder (PNGs + prompts.txt + optional
meta.json) or are synthesized from a palette/pattern recipe for experiments.
"""

from __future__ import annotations

import colorsys
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .backbone.text import PLACEHOLDER, Tokenizer

logger = logging.getLogger(__name__)

__all__ = [
    "StyleTask",
    "StyleSpec",
    "load_style_task",
    "synth_style_task",
    "write_style_task",
    "synth_codec_corpus",
    "preset_styles",
]

_SHAPES = ("circle", "square", "triangle", "cross")


@dataclass
class StyleTask:
    """One customization task: n images of a single style, one prompt each."""

    style_name: str
    images: torch.Tensor  # (n, 3, H, W) float32 in [0, 1]
    prompts: list[list[int]]  # token ids, each containing the placeholder
    prompt_texts: list[str]
    task_id: int | None = None  # assigned by training order

    @property
    def n(self) -> int:
        return int(self.images.shape[0])


@dataclass
class StyleSpec:
    """Recipe for a synthetic style: two-color pattern plus a shape color."""

    name: str
    palette: tuple[tuple[float, float, float], ...]  # (pattern a, pattern b, shape)
    pattern: str = "stripes"  # stripes | dots | checker
    frequency: int = 4

    def __post_init__(self):
        if len(self.palette) != 3:
            raise ValueError(f"palette needs 3 colors, got {len(self.palette)}")
        if self.pattern not in ("stripes", "dots", "checker"):
            raise ValueError(f"unknown pattern {self.pattern!r}")
        if self.frequency < 2:
            raise ValueError(f"frequency must be >= 2, got {self.frequency}")


def _validate_task(task: StyleTask, tokenizer: Tokenizer) -> StyleTask:
    imgs = task.images
    if imgs.dim() != 4 or imgs.shape[1] != 3 or imgs.shape[0] < 1:
        raise ValueError(f"images must be (n>=1, 3, H, W), got {tuple(imgs.shape)}")
    if imgs.dtype != torch.float32:
        raise ValueError(f"images must be float32, got {imgs.dtype}")
    lo, hi = float(imgs.min()), float(imgs.max())
    if lo < 0.0 or hi > 1.0:
        raise ValueError(f"image values outside [0, 1]: min {lo}, max {hi}")
    if len(task.prompts) != imgs.shape[0]:
        raise ValueError(
            f"{imgs.shape[0]} images but {len(task.prompts)} prompts"
        )
    for i, ids in enumerate(task.prompts):
        if tokenizer.placeholder_position(ids) is None:
            raise ValueError(f"prompt {i} has no {PLACEHOLDER} placeholder: {task.prompt_texts[i]!r}")
    return task


# --------------------------------------------------------------- folder IO

def load_style_task(
    task_dir: str | Path,
    prompts_file: str | Path | None = None,
    task_id: int | None = None,
    image_size: int = 32,
    tokenizer: Tokenizer | None = None,
) -> StyleTask:
    """Load a task folder: images/*.png (sorted), prompts.txt, optional meta.json.

    PNGs directly in the folder are also accepted.  Off-size images are
    center-cropped to square, then resized.  Loading the same folder twice
    yields identical tensors.
    """
    tokenizer = tokenizer or Tokenizer()
    d = Path(task_dir)
    if not d.is_dir():
        raise FileNotFoundError(f"task directory not found: {d}")
    image_dir = d / "images" if (d / "images").is_dir() else d
    paths = sorted(image_dir.glob("*.png"))
    if not paths:
        raise ValueError(f"no .png images in {image_dir}")
    prompts_file = Path(prompts_file) if prompts_file is not None else d / "prompts.txt"
    if not prompts_file.is_file():
        raise ValueError(f"missing prompts file: {prompts_file}")
    texts = [ln.strip() for ln in prompts_file.read_text().splitlines() if ln.strip()]
    if len(texts) != len(paths):
        raise ValueError(f"{len(paths)} images but {len(texts)} prompt lines in {d}")

    style_name = d.name
    meta = d / "meta.json"
    if meta.is_file():
        try:
            style_name = json.loads(meta.read_text()).get("style_name", style_name)
        except json.JSONDecodeError as e:
            raise ValueError(f"malformed meta.json in {d}: {e}") from e

    arrays = []
    for p in paths:
        with Image.open(p) as im:
            im = im.convert("RGB")
            w, h = im.size
            if w != h:
                side = min(w, h)
                left, top = (w - side) // 2, (h - side) // 2
                im = im.crop((left, top, left + side, top + side))
            if im.size != (image_size, image_size):
                im = im.resize((image_size, image_size), Image.BILINEAR)
            arrays.append(np.asarray(im, dtype=np.float32).transpose(2, 0, 1) / 255.0)
    images = torch.from_numpy(np.stack(arrays))
    prompts = [tokenizer.encode(t) for t in texts]
    return _validate_task(
        StyleTask(style_name, images, prompts, texts, task_id=task_id), tokenizer
    )


def write_style_task(task: StyleTask, out_dir: str | Path) -> Path:
    """Write a task folder in the layout load_style_task expects."""
    d = Path(out_dir)
    (d / "images").mkdir(parents=True, exist_ok=True)
    for i in range(task.n):
        arr = (task.images[i].numpy().transpose(1, 2, 0) * 255.0).round().astype(np.uint8)
        Image.fromarray(arr).save(d / "images" / f"{i:03d}.png")
    (d / "prompts.txt").write_text("\n".join(task.prompt_texts) + "\n")
    (d / "meta.json").write_text(json.dumps({"style_name": task.style_name}) + "\n")
    return d


# ------------------------------------------------------------- synthesis

def _render_image(rng: np.random.Generator, spec: StyleSpec, size: int, shape: str) -> np.ndarray:
    c0, c1, c2 = (np.array(c, dtype=np.float32).reshape(3, 1, 1) for c in spec.palette)
    y, x = np.mgrid[0:size, 0:size].astype(np.float32)
    cell = size / spec.frequency

    if spec.pattern == "stripes":
        phase = rng.uniform(0, cell)
        mask = (((x + phase) // cell) % 2).astype(np.float32)
    elif spec.pattern == "checker":
        mask = (((x // cell) + (y // cell)) % 2).astype(np.float32)
    else:  # dots
        mask = np.zeros((size, size), dtype=np.float32)
        r = 0.3 * cell
        for gy in range(spec.frequency):
            for gx in range(spec.frequency):
                cy = (gy + 0.5) * cell + rng.uniform(-0.15, 0.15) * cell
                cx = (gx + 0.5) * cell + rng.uniform(-0.15, 0.15) * cell
                mask[(y - cy) ** 2 + (x - cx) ** 2 <= r * r] = 1.0
    img = c0 * (1.0 - mask) + c1 * mask

    s = rng.uniform(0.28, 0.42) * size
    cy = rng.uniform(0.35, 0.65) * size
    cx = rng.uniform(0.35, 0.65) * size
    if shape == "circle":
        smask = (y - cy) ** 2 + (x - cx) ** 2 <= (s / 2) ** 2
    elif shape == "square":
        smask = (np.abs(y - cy) <= s / 2) & (np.abs(x - cx) <= s / 2)
    elif shape == "triangle":
        smask = (y - cy + s / 3 >= 0) & (np.abs(x - cx) <= (y - cy + s / 3) * 0.6) & (y - cy <= s / 2)
    else:  # cross
        w = s / 5
        smask = ((np.abs(x - cx) <= w) & (np.abs(y - cy) <= s / 2)) | (
            (np.abs(y - cy) <= w) & (np.abs(x - cx) <= s / 2)
        )
    img = np.where(smask[None, :, :], c2, img)

    img = img + rng.normal(0.0, 0.01, size=img.shape).astype(np.float32)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def synth_style_task(
    spec: StyleSpec,
    n: int = 8,
    seed: int = 0,
    image_size: int = 32,
    tokenizer: Tokenizer | None = None,
) -> StyleTask:
    """Render n images of one synthetic style with cycling content shapes."""
    if n < 1:
        raise ValueError(f"need n >= 1 images, got {n}")
    tokenizer = tokenizer or Tokenizer()
    rng = np.random.default_rng(seed)
    arrays, texts = [], []
    for i in range(n):
        shape = _SHAPES[i % len(_SHAPES)]
        arrays.append(_render_image(rng, spec, image_size, shape))
        texts.append(f"a {shape} in {PLACEHOLDER} style")
    images = torch.from_numpy(np.stack(arrays))
    prompts = [tokenizer.encode(t) for t in texts]
    return _validate_task(StyleTask(spec.name, images, prompts, texts), tokenizer)


def preset_styles(n: int = 3) -> list[StyleSpec]:
    """Up to 12 built-in styles with well-separated palettes."""
    if not (1 <= n <= 12):
        raise ValueError(f"presets available for 1..12 styles, got {n}")
    patterns = ("stripes", "dots", "checker")
    specs = []
    for i in range(n):
        hue = i / max(n, 3)
        base = colorsys.hsv_to_rgb(hue, 0.9, 0.9)
        pale = colorsys.hsv_to_rgb(hue, 0.45, 1.0)
        accent = colorsys.hsv_to_rgb((hue + 0.5) % 1.0, 0.85, 0.95)
        specs.append(
            StyleSpec(
                name=f"{patterns[i % 3]}-{int(hue * 360):03d}",
                palette=(base, pale, accent),
                pattern=patterns[i % 3],
                frequency=4 + (i % 2) * 2,
            )
        )
    return specs


def synth_codec_corpus(seed: int = 0, n: int = 96, image_size: int = 32) -> torch.Tensor:
    """Generic style-agnostic image corpus for codec pretraining, (n, 3, H, W)."""
    rng = np.random.default_rng(seed)
    patterns = ("stripes", "dots", "checker")
    arrays = []
    for i in range(n):
        palette = tuple(tuple(rng.uniform(0, 1, 3).tolist()) for _ in range(3))
        spec = StyleSpec(
            name="corpus",
            palette=palette,
            pattern=patterns[int(rng.integers(3))],
            frequency=int(rng.integers(2, 8)),
        )
        arrays.append(_render_image(rng, spec, image_size, _SHAPES[int(rng.integers(4))]))
    return torch.from_numpy(np.stack(arrays))
