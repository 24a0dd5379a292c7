"""Training objectives: denoising, style distillation, and drift regularizers.

All functions are pure and differentiable; none touches RNG state.  The
distillation and replay-free regularizer both compare noise predictions as
temperature-softened distributions via a softmax KL divergence.

Per-step total for the full system:

    total = denoise + alpha * style_distill + beta * (lambda1 * weight_reg
                                                      + lambda2 * feature_reg)

Reduced modes drop terms but the bookkeeping identity above always holds with
the dropped components reported as zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import torch
import torch.nn.functional as F

from .lora import cosine_similarity

__all__ = [
    "HyperParams",
    "LossReport",
    "softmax_kl",
    "denoising_loss",
    "mean_latent",
    "style_distillation_loss",
    "weight_reg_loss",
    "feature_reg_loss",
    "dual_reg_loss",
    "total_step_loss",
]


@dataclass
class HyperParams:
    """Loss weights and the distillation temperature."""

    tau: float = 1.0
    lambda1: float = 0.8
    lambda2: float = 1.0
    alpha: float = 0.8
    beta: float = 1.5

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")
        for name in ("lambda1", "lambda2", "alpha", "beta"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")

    def to_dict(self) -> dict:
        return {
            "tau": self.tau,
            "lambda1": self.lambda1,
            "lambda2": self.lambda2,
            "alpha": self.alpha,
            "beta": self.beta,
        }


@dataclass
class LossReport:
    """Scalar loss components for one optimization step."""

    denoise: float = 0.0
    style_distill: float = 0.0
    weight_reg: float = 0.0
    feature_reg: float = 0.0
    dual_reg: float = 0.0
    total: float = 0.0
    grad_norms: dict[str, float] | None = None

    def to_dict(self) -> dict:
        d = {
            "denoise": self.denoise,
            "style_distill": self.style_distill,
            "weight_reg": self.weight_reg,
            "feature_reg": self.feature_reg,
            "dual_reg": self.dual_reg,
            "total": self.total,
        }
        d["grad_norms"] = self.grad_norms
        return d


def softmax_kl(p_logits: torch.Tensor, q_logits: torch.Tensor, tau: float) -> torch.Tensor:
    """KL(softmax(p/tau) || softmax(q/tau)) over flattened tensors.

    Returns a 0-dim tensor; zero iff the inputs agree elementwise.
    """
    if tau <= 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    if p_logits.shape != q_logits.shape:
        raise ValueError(
            f"logit shapes differ: {tuple(p_logits.shape)} vs {tuple(q_logits.shape)}"
        )
    if p_logits.numel() == 0:
        raise ValueError("empty logits")
    if not (torch.isfinite(p_logits).all() and torch.isfinite(q_logits).all()):
        raise ValueError("non-finite logits")
    lp = F.log_softmax(p_logits.reshape(-1) / tau, dim=0)
    lq = F.log_softmax(q_logits.reshape(-1) / tau, dim=0)
    return (lp.exp() * (lp - lq)).sum()


def denoising_loss(eps_true: torch.Tensor, eps_pred: torch.Tensor) -> torch.Tensor:
    """Mean squared error between true and predicted noise (mean over everything)."""
    if eps_true.shape != eps_pred.shape:
        raise ValueError(
            f"shape mismatch: {tuple(eps_true.shape)} vs {tuple(eps_pred.shape)}"
        )
    if eps_true.numel() == 0:
        raise ValueError("empty noise tensors")
    return torch.mean((eps_pred - eps_true) ** 2)


def mean_latent(latents) -> torch.Tensor:
    """Elementwise mean of a task's clean latents ((N, C, H, W) or a list)."""
    if isinstance(latents, torch.Tensor):
        if latents.dim() != 4 or latents.shape[0] == 0:
            raise ValueError(f"expected non-empty (N, C, H, W), got {tuple(latents.shape)}")
        return latents.mean(dim=0)
    if len(latents) == 0:
        raise ValueError("no latents to average")
    return torch.stack(list(latents), dim=0).mean(dim=0)


def _batched(x: torch.Tensor) -> torch.Tensor:
    if x.dim() == 3:
        return x.unsqueeze(0)
    if x.dim() == 4:
        return x
    raise ValueError(f"prediction must be (C, H, W) or (B, C, H, W), got {x.dim()}-D")


def style_distillation_loss(
    pred_single: torch.Tensor,
    pred_mean: torch.Tensor,
    tau: float,
    stop_grad_mean: bool = False,
) -> torch.Tensor:
    """Per-sample KL(single-latent prediction || mean-latent prediction), batch-averaged.

    With stop_grad_mean the mean branch is treated as a fixed target.
    """
    ps = _batched(pred_single)
    pm = _batched(pred_mean)
    if ps.shape != pm.shape:
        raise ValueError(f"shape mismatch: {tuple(ps.shape)} vs {tuple(pm.shape)}")
    if stop_grad_mean:
        pm = pm.detach()
    terms = [softmax_kl(ps[i], pm[i], tau) for i in range(ps.shape[0])]
    return torch.stack(terms).mean()


def weight_reg_loss(prev, cur) -> torch.Tensor:
    """Mean cosine misalignment of the dense adapter updates across projections.

    `prev` is a frozen adapter snapshot (end of the previous task); `cur` is
    the live adapter set.  Each projection contributes 1 - cos of the two
    flattened updates.
    """
    if list(prev.names) != list(cur.names):
        raise ValueError(
            f"adapter sets disagree: {list(prev.names)} vs {list(cur.names)}"
        )
    terms = [
        1.0 - cosine_similarity(prev.flatten_delta(n).detach(), cur.flatten_delta(n))
        for n in prev.names
    ]
    return torch.stack(terms).mean()


def feature_reg_loss(
    past_preds: Sequence[torch.Tensor],
    cur_preds: Sequence[torch.Tensor],
    tau: float,
) -> torch.Tensor:
    """KL(past model's prediction || current model's) on shared replayed inputs.

    One entry per past task (each (B, C, H, W) or (C, H, W)); sample KLs are
    averaged within a task, then across tasks.  Past predictions are treated
    as fixed targets.
    """
    if len(past_preds) == 0 or len(cur_preds) == 0:
        raise ValueError("no past-task predictions to compare")
    if len(past_preds) != len(cur_preds):
        raise ValueError(
            f"prediction lists disagree: {len(past_preds)} past vs {len(cur_preds)} current"
        )
    per_task = []
    for j, (past, cur) in enumerate(zip(past_preds, cur_preds)):
        p = _batched(past).detach()
        c = _batched(cur)
        if p.shape != c.shape:
            raise ValueError(
                f"task {j}: shape mismatch {tuple(p.shape)} vs {tuple(c.shape)}"
            )
        terms = [softmax_kl(p[i], c[i], tau) for i in range(p.shape[0])]
        per_task.append(torch.stack(terms).mean())
    return torch.stack(per_task).mean()


def dual_reg_loss(weight_reg: torch.Tensor, feature_reg: torch.Tensor, h: HyperParams) -> torch.Tensor:
    """Weighted sum of the two drift regularizers."""
    return h.lambda1 * weight_reg + h.lambda2 * feature_reg


def total_step_loss(
    denoise: torch.Tensor,
    style_distill: torch.Tensor,
    dual_reg: torch.Tensor,
    h: HyperParams,
) -> torch.Tensor:
    """Per-step objective: denoise + alpha * style_distill + beta * dual_reg."""
    return denoise + h.alpha * style_distill + h.beta * dual_reg
