"""AAM-softmax, the DINO self-distillation objective, and the two EMA updates."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .head import cos_logits
from .numerics import ConfigError, ContractError


@dataclass
class AamConfig:
    scale: float = 30.0
    margin: float = 0.3
    # "arcface": exp(s * cos(theta + m)); "printed": exp(s * (cos + m))
    variant: str = "arcface"

    def __post_init__(self):
        if self.scale <= 0:
            raise ConfigError("AAM scale must be positive")
        if not 0 <= self.margin < math.pi / 2:
            raise ConfigError("AAM margin must lie in [0, pi/2)")
        if self.variant not in ("printed", "arcface"):
            raise ConfigError(f"unknown AAM variant {self.variant!r}")


@dataclass
class DinoConfig:
    tau_t: float = 0.04
    tau_s: float = 0.1
    center_momentum: float = 0.9
    teacher_momentum: float = 0.987
    warmup: bool = False
    warmup_tau_t: float = 0.07
    warmup_fraction: float = 0.1
    # normalise teacher batch-norm layers with the current batch rather than running stats
    teacher_batch_stats: bool = True

    def __post_init__(self):
        if self.tau_t <= 0 or self.tau_s <= 0:
            raise ConfigError("DINO temperatures must be positive")
        for name in ("center_momentum", "teacher_momentum"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigError(f"{name} must lie in [0, 1]")

    def teacher_temp(self, step: int, total_steps: int) -> float:
        """Teacher temperature, linearly ramped from ``warmup_tau_t`` when warm-up is on."""
        if not self.warmup or total_steps <= 0:
            return self.tau_t
        ramp = max(1, int(round(self.warmup_fraction * total_steps)))
        if step >= ramp:
            return self.tau_t
        return self.warmup_tau_t + (self.tau_t - self.warmup_tau_t) * step / ramp


def margin_logits(cos: torch.Tensor, labels: torch.Tensor, cfg: AamConfig) -> torch.Tensor:
    """Scaled logits with the margin applied to each row's target class."""
    target = cos.gather(1, labels[:, None])
    if cfg.variant == "printed":
        shifted = target + cfg.margin
    else:
        theta = torch.acos(target.clamp(-1 + 1e-7, 1 - 1e-7))
        shifted = torch.cos(theta + cfg.margin)
    logits = cos.scatter(1, labels[:, None], shifted)
    return cfg.scale * logits


def aam_softmax_loss(
    embeddings: torch.Tensor,
    labels: torch.Tensor,
    weight: torch.Tensor,
    cfg: AamConfig | None = None,
) -> torch.Tensor:
    cfg = cfg or AamConfig()
    labels = torch.as_tensor(labels, dtype=torch.long)
    n_classes = weight.shape[0]
    if labels.numel() == 0:
        raise ContractError("aam_softmax_loss needs a non-empty batch")
    if int(labels.min()) < 0 or int(labels.max()) >= n_classes:
        raise ContractError(f"labels must lie in [0, {n_classes})")
    logits = margin_logits(cos_logits(embeddings, weight), labels, cfg)
    return F.cross_entropy(logits, labels)


def sharpen(logits: torch.Tensor, tau: float, center: torch.Tensor | None = None) -> torch.Tensor:
    if tau <= 0:
        raise ContractError("temperature must be positive")
    if center is not None:
        logits = logits - center
    return torch.softmax(logits / tau, dim=-1)


def dino_loss(
    teacher_probs: Sequence[torch.Tensor],
    student_logits: Sequence[torch.Tensor],
    tau_s: float,
) -> torch.Tensor:
    """Mean cross-entropy H(P_t(a), P_s(a')) over global views a and every other view a'.

    ``teacher_probs`` are the two global-view teacher distributions (already
    centred and sharpened); ``student_logits`` lists all V views with the two
    globals first.  Each element may carry a leading batch axis; the result is
    averaged over the batch as well.  Teacher inputs are detached.
    """
    if len(student_logits) < 2:
        raise ContractError("DINO needs at least two views")
    log_ps = [F.log_softmax(s / tau_s, dim=-1) for s in student_logits]
    total = 0.0
    pairs = 0
    for ti, pt in enumerate(teacher_probs):
        pt = pt.detach()
        for si, lps in enumerate(log_ps):
            if si == ti:
                continue
            total = total + (-(pt * lps).sum(dim=-1)).mean()
            pairs += 1
    return total / pairs


def cross_entropy(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    return -(p * torch.log(q)).sum(dim=-1)


class DinoCenter(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.register_buffer("c", torch.zeros(dim))

    @torch.no_grad()
    def update(self, teacher_logits: torch.Tensor, momentum: float) -> None:
        self.c.copy_(update_center(self.c, teacher_logits, momentum))


def update_center(c: torch.Tensor, teacher_logits: torch.Tensor, momentum: float) -> torch.Tensor:
    """EMA of the mean teacher output over every leading (batch / view) axis."""
    t = teacher_logits.detach()
    if t.numel() == 0:
        raise ContractError("update_center needs a non-empty batch")
    batch_mean = t.reshape(-1, t.shape[-1]).mean(dim=0) if t.dim() > 1 else t
    return momentum * c + (1.0 - momentum) * batch_mean


def _float_state(module: nn.Module) -> list[tuple[str, torch.Tensor]]:
    named = list(module.named_parameters()) + [
        (n, b) for n, b in module.named_buffers() if b.is_floating_point()
    ]
    return named


@torch.no_grad()
def update_teacher(teacher: nn.Module, student: nn.Module, momentum: float) -> None:
    """``teacher <- m * teacher + (1 - m) * student`` for every parameter and float buffer."""
    t_state = _float_state(teacher)
    s_state = dict(_float_state(student))
    if [n for n, _ in t_state] != list(s_state) or any(s_state[n].shape != t.shape for n, t in t_state):
        raise ContractError("teacher and student parameter trees differ")
    for name, t in t_state:
        t.mul_(momentum).add_(s_state[name], alpha=1.0 - momentum)


def entropy(p: torch.Tensor) -> torch.Tensor:
    return -(p * torch.log(p.clamp_min(1e-30))).sum(dim=-1)
