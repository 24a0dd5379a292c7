"""Sequential task training over a persistent museum checkpoint.

One shared low-rank adapter set and a growing bank of frozen per-task style
tokens accumulate across tasks.  From the second task on, drift away from
earlier styles is held back by two replay-free regularizers: a cosine
alignment on the dense adapter updates, and a KL between the previous
snapshot's and the live model's noise predictions on shared pseudo inputs.

All randomness is drawn from per-task generators seeded by (config seed,
task id), so a run resumed from the latest per-task checkpoint reproduces an
uninterrupted run bitwise.
"""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass, field

import torch

from .backbone.model import LatentDiffusionModel, build_backbone
from .backbone.text import Conditioning
from .config import TrainConfig
from .data import StyleTask
from .lora import attach_lora, clone_frozen
from .losses import (
    LossReport,
    denoising_loss,
    dual_reg_loss,
    feature_reg_loss,
    mean_latent,
    style_distillation_loss,
    total_step_loss,
    weight_reg_loss,
)
from .seeding import derive_seed

logger = logging.getLogger(__name__)

__all__ = [
    "MuseumCheckpoint",
    "ModelSnapshot",
    "new_museum",
    "run_task",
    "snapshot_model",
    "pseudo_noise_pass",
    "generate",
]


class MuseumCheckpoint:
    """Everything a continual run accumulates: model, registry, stashed adapters."""

    def __init__(self, model: LatentDiffusionModel, cfg: TrainConfig, base_seed: int):
        self.model = model
        self.cfg = cfg
        self.base_seed = base_seed
        self.registry: list[dict] = []  # per task: task_id, style_name, prompt_texts
        self.task_loras: dict[int, dict[str, torch.Tensor]] = {}

    @property
    def num_tasks(self) -> int:
        return len(self.registry)

    @property
    def mode(self) -> str:
        return self.cfg.mode

    def task_entry(self, task_id: int) -> dict:
        for e in self.registry:
            if e["task_id"] == task_id:
                return e
        raise KeyError(f"task {task_id} is not registered (have {self.task_ids()})")

    def task_ids(self) -> list[int]:
        return [e["task_id"] for e in self.registry]

    def style_names(self) -> list[str]:
        return [e["style_name"] for e in self.registry]

    def resolve_style(self, name_or_id: str) -> int:
        """Map a style name (or numeric task id) to its task id."""
        for e in self.registry:
            if e["style_name"] == name_or_id:
                return e["task_id"]
        try:
            tid = int(name_or_id)
        except ValueError:
            raise KeyError(
                f"unknown style {name_or_id!r}; registered: {self.style_names()}"
            ) from None
        self.task_entry(tid)
        return tid


@dataclass
class ModelSnapshot:
    """Frozen deep copy of the museum model plus its prompt templates."""

    model: LatentDiffusionModel
    prompt_templates: dict[int, list[str]]
    created_after_task: int

    @property
    def task_ids(self) -> list[int]:
        return sorted(self.prompt_templates.keys())


def new_museum(cfg: TrainConfig) -> MuseumCheckpoint:
    """Fresh museum: frozen backbone + zero-initialized shared adapters."""
    model = build_backbone(cfg.model, seed=cfg.seed)
    model.lora_state = attach_lora(
        model, cfg.model.lora_rank, cfg.model.lora_scale, seed=derive_seed(cfg.seed, "lora")
    )
    return MuseumCheckpoint(model, cfg, base_seed=cfg.seed)


def snapshot_model(museum: MuseumCheckpoint) -> ModelSnapshot:
    """Immutable copy of the current model state for drift references."""
    if museum.num_tasks == 0:
        raise RuntimeError("cannot snapshot an empty museum (no tasks trained)")
    m = copy.deepcopy(museum.model)
    for p in m.parameters():
        p.requires_grad_(False)
    m.eval()
    templates = {e["task_id"]: list(e["prompt_texts"]) for e in museum.registry}
    return ModelSnapshot(m, templates, created_after_task=museum.num_tasks)


def _rollout_prediction(model: LatentDiffusionModel, z, t: int, cond, grad: bool):
    """Short deterministic denoising rollout; returns the final noise prediction."""
    ts = [t]
    stride = max(model.schedule.timesteps // 10, 1)
    while len(ts) < 4 and ts[-1] > 0:
        ts.append(max(ts[-1] - stride, 0))
    abar = model.schedule.alphas_cumprod
    ctx = torch.enable_grad() if grad else torch.no_grad()
    with ctx:
        eps = None
        for i, tt in enumerate(ts):
            eps = model.predict_noise(z, tt, cond)
            if i + 1 < len(ts):
                a_t = abar[tt].to(z.dtype)
                a_n = abar[ts[i + 1]].to(z.dtype)
                z0_hat = (z - (1.0 - a_t).sqrt() * eps) / a_t.sqrt()
                z = a_n.sqrt() * z0_hat + (1.0 - a_n).sqrt() * eps
    return eps


def pseudo_noise_pass(
    snap: ModelSnapshot,
    live_model: LatentDiffusionModel,
    past_prompts: list[tuple[int, object]],
    shared_seed: int,
    lf_mode: str = "onestep",
):
    """Predictions of the snapshot vs the live model on one shared noised input.

    past_prompts is a list of (past task id, prompt) pairs; the same seeded
    (z_t, t) draw feeds every pair and both models, so the two outputs differ
    only through the models.  Returns (past_preds, cur_preds), one (1, C, H, W)
    tensor per pair; past predictions carry no graph.
    """
    if not past_prompts:
        raise ValueError("pseudo_noise_pass needs at least one past prompt")
    cfg = live_model.cfg
    g = torch.Generator().manual_seed(shared_seed)
    t = int(torch.randint(live_model.schedule.timesteps, (1,), generator=g))
    dtype = next(live_model.unet.parameters()).dtype
    z_t = torch.randn(
        1, cfg.latent_channels, cfg.latent_size, cfg.latent_size, generator=g
    ).to(dtype)

    past_preds, cur_preds = [], []
    for task_id, prompt in past_prompts:
        cond_past = snap.model.encode_prompt(prompt, style_ref=task_id)
        cond_cur = live_model.encode_prompt(prompt, style_ref=task_id)
        if lf_mode == "sampled":
            past = _rollout_prediction(snap.model, z_t, t, cond_past, grad=False)
            cur = _rollout_prediction(live_model, z_t, t, cond_cur, grad=True)
        else:
            with torch.no_grad():
                past = snap.model.predict_noise(z_t, t, cond_past)
            cur = live_model.predict_noise(z_t, t, cond_cur)
        past_preds.append(past.detach())
        cur_preds.append(cur)
    return past_preds, cur_preds


def run_task(
    k: int,
    task: StyleTask,
    cfg: TrainConfig,
    museum: MuseumCheckpoint,
    log_file=None,
) -> MuseumCheckpoint:
    """Train task k on the museum in place and register its style.

    Tasks must arrive in order (k == tasks trained so far + 1).  The task's
    tokens are frozen on exit; in per-task-adapter mode the adapter values are
    stashed under the task id as well.
    """
    if k != museum.num_tasks + 1:
        raise RuntimeError(
            f"tasks must be trained in order: expected task {museum.num_tasks + 1}, got {k}"
        )
    model = museum.model
    h = cfg.hyper

    if model.lora_state is None:
        model.lora_state = attach_lora(
            model, cfg.model.lora_rank, cfg.model.lora_scale, seed=derive_seed(cfg.seed, "lora")
        )
    elif cfg.per_task_adapters and k > 1:
        model.lora_state.reinit(seed=derive_seed(cfg.seed, f"task{k}:lora"))
    for p in model.lora_state.parameters():
        p.requires_grad_(True)

    use_dr = cfg.uses_dual_reg and k > 1
    use_sdl = cfg.uses_style_distill
    prev_lora = clone_frozen(model.lora_state) if use_dr else None
    snap = snapshot_model(museum) if use_dr else None

    init, sigma = cfg.resolved_token_init()
    word_vec = model.text_encoder.embedding_vector(cfg.token_init_word) if init == "word" else None
    model.token_bank.init_task_tokens(
        k,
        init=init,
        seed=derive_seed(cfg.seed, f"task{k}:tokens"),
        sigma=sigma,
        word_vector=word_vec,
        trainable=cfg.tokens_trainable,
    )

    latents = torch.stack([model.encode_image(task.images[i]) for i in range(task.n)])
    zbar = mean_latent(latents)

    params = model.lora_state.parameters()
    if cfg.tokens_trainable:
        params = params + [model.token_bank.parameter(k)]
    opt = torch.optim.Adam(params, lr=cfg.learning_rate)

    g = torch.Generator().manual_seed(derive_seed(cfg.seed, f"task{k}:steps"))
    T = model.schedule.timesteps
    B = cfg.batch_size
    zero = torch.zeros(())
    logger.info(
        "task %d (%s): %d steps, mode=%s, sdl=%s, dual_reg=%s, tokens_trainable=%s",
        k, task.style_name, cfg.steps_per_task, cfg.mode, use_sdl, use_dr, cfg.tokens_trainable,
    )

    for step in range(cfg.steps_per_task):
        idx = torch.randint(task.n, (B,), generator=g)
        t = torch.randint(T, (B,), generator=g)
        eps = torch.randn(B, *latents.shape[1:], generator=g)
        z0 = latents[idx]
        z_t = model.add_noise(z0, t, eps)
        cond = Conditioning.cat(
            [model.encode_prompt(task.prompts[int(i)], style_ref=k) for i in idx]
        )
        pred = model.predict_noise(z_t, t, cond)
        comp_sd = denoising_loss(eps, pred)

        comp_sdl = zero
        if use_sdl:
            if cfg.sdl_mode == "alg1":
                zb_t = model.add_noise(zbar.unsqueeze(0).expand_as(z_t), t, eps)
                pred_mean = model.predict_noise(zb_t, t, cond)
                comp_sdl = style_distillation_loss(pred, pred_mean, h.tau, cfg.sdl_stopgrad)
            else:
                # "literal" KL on the frozen-codec latents themselves; carries no
                # gradient, kept for inspection of the raw formulation.
                comp_sdl = style_distillation_loss(z0, zbar.unsqueeze(0).expand_as(z0), h.tau)

        comp_w = comp_f = comp_dr = zero
        if use_dr:
            chosen = []
            for j in snap.task_ids:
                texts = snap.prompt_templates[j]
                ti = int(torch.randint(len(texts), (1,), generator=g))
                chosen.append((j, texts[ti]))
            shared_seed = int(torch.randint(2**31 - 1, (1,), generator=g))
            past_preds, cur_preds = pseudo_noise_pass(
                snap, model, chosen, shared_seed, lf_mode=cfg.lf_mode
            )
            comp_f = feature_reg_loss(past_preds, cur_preds, h.tau)
            comp_w = weight_reg_loss(prev_lora, model.lora_state)
            comp_dr = dual_reg_loss(comp_w, comp_f, h)

        total = total_step_loss(comp_sd, comp_sdl, comp_dr, h)

        grad_norms = None
        if (step + 1) % cfg.grad_log_interval == 0 or step == cfg.steps_per_task - 1:
            grad_norms = {}
            for name, comp in (
                ("denoise", comp_sd),
                ("style_distill", comp_sdl),
                ("weight_reg", comp_w),
                ("feature_reg", comp_f),
            ):
                if torch.is_tensor(comp) and comp.requires_grad:
                    grad_norms[name] = _component_grad_norm(comp, params)

        opt.zero_grad()
        total.backward()
        if grad_norms is not None:
            sq = sum(float(p.grad.pow(2).sum()) for p in params if p.grad is not None)
            grad_norms["total"] = sq**0.5
        opt.step()

        report = LossReport(
            denoise=float(comp_sd.detach()),
            style_distill=float(comp_sdl.detach()),
            weight_reg=float(comp_w.detach()),
            feature_reg=float(comp_f.detach()),
            dual_reg=float(comp_dr.detach()),
            total=float(total.detach()),
            grad_norms=grad_norms,
        )
        if log_file is not None:
            row = {"task": k, "epoch": (step * B) // task.n, "step": step}
            row.update(report.to_dict())
            log_file.write(json.dumps(row, sort_keys=True) + "\n")

    model.token_bank.freeze_task(k)
    if cfg.per_task_adapters:
        museum.task_loras[k] = dict(model.lora_state.values())
    museum.registry.append(
        {"task_id": k, "style_name": task.style_name, "prompt_texts": list(task.prompt_texts)}
    )
    museum.cfg = cfg
    return museum


def _component_grad_norm(loss: torch.Tensor, params) -> float:
    grads = torch.autograd.grad(loss, params, retain_graph=True, allow_unused=True)
    sq = sum(float(gr.detach().pow(2).sum()) for gr in grads if gr is not None)
    return sq**0.5


def generate(
    museum: MuseumCheckpoint,
    prompt,
    task_id: int,
    seed: int = 0,
    steps: int = 50,
) -> torch.Tensor:
    """Render one styled image, (3, H, W) in [0, 1]; pure and bitwise reproducible.

    In per-task-adapter mode the owning task's stashed adapter values are
    swapped in for the sample and restored afterwards.
    """
    museum.task_entry(task_id)  # raises KeyError for unknown tasks
    model = museum.model
    swapped = None
    if museum.cfg.per_task_adapters and task_id in museum.task_loras:
        swapped = model.lora_state.values()
        model.lora_state.load_values(museum.task_loras[task_id])
    try:
        cond = model.encode_prompt(prompt, style_ref=task_id)
        z = model.ddim_sample(cond, steps=steps, seed=seed)
        return model.decode_latent(z)
    finally:
        if swapped is not None:
            model.lora_state.load_values(swapped)
