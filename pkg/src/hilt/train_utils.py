"""Shared training plumbing: EMA tracking, schedules, divergence guard."""

from __future__ import annotations

import copy

import torch

EMA_TARGET = 0.9999


class TrainingDivergence(Exception):
    """Raised when a training loss stops being finite."""


class Ema:
    """Exponential moving average of a module's floating-point state.

    Decay anneals with the update count t as min(target, (1+t)/(10+t)), so
    early updates track the raw weights closely and the average tightens
    toward the target decay as training proceeds.
    """

    def __init__(self, model: torch.nn.Module, target: float = EMA_TARGET):
        self.target = target
        self.updates = 0
        self.shadow = {
            k: v.detach().clone()
            for k, v in model.state_dict().items()
            if torch.is_floating_point(v)
        }

    def decay(self) -> float:
        return min(self.target, (1 + self.updates) / (10 + self.updates))

    @torch.no_grad()
    def update(self, model: torch.nn.Module):
        d = self.decay()
        self.updates += 1
        for k, v in model.state_dict().items():
            if k in self.shadow:
                self.shadow[k].mul_(d).add_(v.detach(), alpha=1 - d)

    def copy_to(self, model: torch.nn.Module):
        state = model.state_dict()
        for k, v in self.shadow.items():
            state[k].copy_(v)

    def averaged_model(self, model: torch.nn.Module) -> torch.nn.Module:
        out = copy.deepcopy(model)
        self.copy_to(out)
        out.eval()
        return out


ADAM_BETAS = (0.9, 0.95)  # short second-moment memory; runs here are few-step


def make_optimizer_and_schedule(
    params, lr: float, total_steps: int, weight_decay: float = 0.0
):
    """Adam (AdamW when decaying) with a cosine-to-zero schedule per step."""
    if weight_decay > 0:
        opt = torch.optim.AdamW(
            params, lr=lr, betas=ADAM_BETAS, weight_decay=weight_decay
        )
    else:
        opt = torch.optim.Adam(params, lr=lr, betas=ADAM_BETAS)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(
        opt, T_max=max(total_steps, 1), eta_min=0.0
    )
    return opt, sched


def guard_finite(loss: torch.Tensor, context: str):
    if not torch.isfinite(loss):
        raise TrainingDivergence(f"non-finite loss in {context}: {loss.item()!r}")
