"""Command-line driver: train, generate, evaluate, synth.

Exit codes are a stable contract: 0 success, 1 runtime/task failure, 2
usage or config error.  A run manifest is written before any training so a
crashed run can be replayed.  The environment variable ``MUSEUM_SEED``
overrides the config seed (CI determinism knob).
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .backbone.text import Tokenizer
from .checkpoint import CheckpointFormatError, load_checkpoint, save_checkpoint
from .config import MODES, load_train_config
from .data import load_style_task, preset_styles, synth_style_task, write_style_task
from .evaluation import DEFAULT_EVAL_PROMPTS, contact_sheet, evaluate_museum
from .seeding import derive_seed
from .trainer import generate, new_museum, run_task

logger = logging.getLogger(__name__)


def _err(msg: str) -> None:
    print(f"error: {msg}", file=sys.stderr)


def _apply_seed_env(cfg):
    raw = os.environ.get("MUSEUM_SEED")
    if raw is None:
        return cfg, None
    try:
        seed = int(raw)
    except ValueError:
        raise ValueError(f"MUSEUM_SEED must be an integer, got {raw!r}") from None
    return dataclasses.replace(cfg, seed=seed), seed


def _load_tasks(task_dirs, image_size: int, text_len: int):
    tok = Tokenizer(seq_len=text_len)
    tasks = []
    for d in task_dirs:
        tasks.append(load_style_task(d, image_size=image_size, tokenizer=tok))
    return tasks


# ------------------------------------------------------------------ train

def cmd_train(args) -> int:
    try:
        cfg = load_train_config(args.config)
        if args.mode:
            cfg = dataclasses.replace(cfg, mode=args.mode)
        cfg, env_seed = _apply_seed_env(cfg)
    except ValueError as e:
        _err(str(e))
        return 2
    if env_seed is not None:
        logger.info("MUSEUM_SEED override: seed=%d", env_seed)

    out_dir = Path(args.out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        tasks = _load_tasks(args.task_dirs, cfg.model.image_size, cfg.model.text_len)
    except (OSError, ValueError) as e:
        _err(str(e))
        return 1

    run_id = hashlib.sha256(
        json.dumps(
            {"train_config": cfg.to_dict(), "tasks": [Path(d).name for d in args.task_dirs]},
            sort_keys=True,
        ).encode()
    ).hexdigest()[:12]
    manifest = {
        "config_path": str(args.config),
        "train_config": cfg.to_dict(),
        "tasks": [
            {"task_id": i + 1, "dir": str(d), "style_name": t.style_name}
            for i, (d, t) in enumerate(zip(args.task_dirs, tasks))
        ],
        "out_dir": str(out_dir),
        "run_id": run_id,
    }
    (out_dir / "run_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    start_k = 0
    museum = None
    if args.resume:
        for k in range(len(tasks), 0, -1):
            ckpt = out_dir / f"task_{k}.ckpt"
            if ckpt.is_file():
                try:
                    museum = load_checkpoint(ckpt)
                except CheckpointFormatError as e:
                    _err(f"cannot resume from {ckpt}: {e}")
                    return 1
                start_k = k
                logger.info("resuming after task %d from %s", k, ckpt)
                break
    if museum is None:
        museum = new_museum(cfg)

    log_path = out_dir / "train_log.jsonl"
    log_mode = "a" if start_k > 0 else "w"
    try:
        with open(log_path, log_mode) as log_file:
            for k in range(start_k + 1, len(tasks) + 1):
                task = tasks[k - 1]
                try:
                    run_task(k, task, cfg, museum, log_file=log_file)
                except Exception as e:
                    _err(f"task {k} ({task.style_name}) failed: {e}")
                    return 1
                save_checkpoint(museum, out_dir / f"task_{k}.ckpt")
                logger.info("task %d (%s) done -> %s", k, task.style_name, f"task_{k}.ckpt")
    except OSError as e:
        _err(f"cannot write training log: {e}")
        return 1
    final = save_checkpoint(museum, out_dir / "museum.ckpt")
    print(final)
    return 0


# --------------------------------------------------------------- generate

def cmd_generate(args) -> int:
    try:
        museum = load_checkpoint(args.checkpoint)
    except (FileNotFoundError, CheckpointFormatError) as e:
        _err(str(e))
        return 1

    tok = museum.model.tokenizer
    try:
        has_placeholder = tok.placeholder_position(tok.encode(args.prompt)) is not None
    except ValueError as e:
        _err(str(e))
        return 2
    if has_placeholder and not args.style:
        _err("prompt contains <style> but no --style was given")
        return 2
    if not args.style:
        _err("--style is required (generation is always tied to a registered style)")
        return 2
    try:
        task_id = museum.resolve_style(args.style)
    except KeyError as e:
        _err(str(e.args[0]))
        return 1

    style_name = museum.task_entry(task_id)["style_name"]
    resolved = args.prompt.replace("<style>", f"<style:{style_name}>")
    print(f'prompt: "{resolved}" (task {task_id}, seed {args.seed}, {args.steps} steps)')

    try:
        img = generate(museum, args.prompt, task_id, seed=args.seed, steps=args.steps)
        arr = (img.numpy().transpose(1, 2, 0) * 255.0).round().astype(np.uint8)
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(arr).save(out)
    except (ValueError, KeyError, OSError) as e:
        _err(str(e))
        return 1
    print(out)
    return 0


# --------------------------------------------------------------- evaluate

def cmd_evaluate(args) -> int:
    try:
        museum = load_checkpoint(args.checkpoint)
    except (FileNotFoundError, CheckpointFormatError) as e:
        _err(str(e))
        return 1
    try:
        out_dir = Path(args.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        _err(f"cannot create --out-dir: {e}")
        return 1
    try:
        tasks = _load_tasks(
            args.task_dirs, museum.cfg.model.image_size, museum.cfg.model.text_len
        )
        report = evaluate_museum(museum, tasks)
        csv_path = report.write_csv(out_dir / "report.csv")
        json_path = report.write_json(out_dir / "report.json")
        grid_path = contact_sheet(
            museum, tasks, prompts=DEFAULT_EVAL_PROMPTS, seed=0, path=out_dir / "grid.png"
        )
    except (ValueError, RuntimeError, KeyError, OSError) as e:
        _err(str(e))
        return 1
    print(csv_path)
    print(json_path)
    print(grid_path)
    return 0


# ------------------------------------------------------------------ synth

def cmd_synth(args) -> int:
    try:
        out_dir = Path(args.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        specs = preset_styles(args.styles)
        for i, spec in enumerate(specs):
            task = synth_style_task(
                spec, n=args.images, seed=derive_seed(args.seed, f"style{i}")
            )
            d = write_style_task(task, out_dir / spec.name)
            print(d)
    except (ValueError, OSError) as e:
        _err(str(e))
        return 1
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="stylemuseum",
        description="Continual style customization for a toy latent diffusion model.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train styles sequentially into a museum checkpoint")
    t.add_argument("config", help="JSON config file mirroring TrainConfig")
    t.add_argument("task_dirs", nargs="+", help="style task folders, in training order")
    t.add_argument("--mode", choices=MODES, default=None, help="override config mode")
    t.add_argument("--resume", action="store_true", help="continue from the latest task_k.ckpt")
    t.add_argument("--out-dir", default="museum_run", help="artifact directory")
    t.set_defaults(func=cmd_train)

    g = sub.add_parser("generate", help="render one styled image from a checkpoint")
    g.add_argument("checkpoint")
    g.add_argument("--prompt", required=True, help="text with the <style> placeholder")
    g.add_argument("--style", default=None, help="registered style name or task id")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--steps", type=int, default=50)
    g.add_argument("--out", default="sample.png")
    g.set_defaults(func=cmd_generate)

    e = sub.add_parser("evaluate", help="score all styles of a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("task_dirs", nargs="+", help="the task folders the checkpoint was trained on")
    e.add_argument("--out-dir", default="eval_out")
    e.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("synth", help="write synthetic style task folders")
    s.add_argument("out_dir")
    s.add_argument("--styles", type=int, default=3)
    s.add_argument("--images", type=int, default=8)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    logging.basicConfig(
        level=logging.INFO, format="%(asctime)s %(name)s %(levelname)s %(message)s"
    )
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
