"""Attentive statistics pooling, embedding layer, classifier and DINO heads."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import BN_MOMENTUM
from .numerics import NumericalError

VAR_FLOOR = 1e-9


def _std(var: torch.Tensor) -> torch.Tensor:
    return torch.sqrt(torch.clamp(var, min=VAR_FLOOR))


class AttentiveStatsPool(nn.Module):
    """Channel- and context-dependent attention over time, returning weighted mean and std.

    Each frame is scored from ``[F_t, mean_t(F), std_t(F)]`` with a per-channel
    attention output, so every channel gets its own weights over time.
    """

    def __init__(self, channels: int, bottleneck: int = 128):
        super().__init__()
        self.attention = nn.Conv1d(3 * channels, bottleneck, 1)
        # no bias: a per-channel offset cancels in the softmax over time
        self.score = nn.Conv1d(bottleneck, channels, 1, bias=False)

    def weights(self, x: torch.Tensor) -> torch.Tensor:
        t = x.shape[-1]
        mu = x.mean(dim=-1, keepdim=True)
        sg = _std(x.var(dim=-1, unbiased=False, keepdim=True))
        ctx = torch.cat([x, mu.expand(-1, -1, t), sg.expand(-1, -1, t)], dim=1)
        e = self.score(torch.tanh(self.attention(ctx)))
        return torch.softmax(e, dim=-1)

    def forward(self, x: torch.Tensor, weights: torch.Tensor | None = None) -> torch.Tensor:
        a = self.weights(x) if weights is None else weights
        return weighted_stats(x, a)


def weighted_stats(x: torch.Tensor, a: torch.Tensor) -> torch.Tensor:
    mu = (a * x).sum(dim=-1)
    sg = _std((a * x * x).sum(dim=-1) - mu * mu)
    return torch.cat([mu, sg], dim=-1)


class Embedding(nn.Module):
    """Linear map to the speaker embedding followed by batch norm; no non-linearity."""

    def __init__(self, in_dim: int, embed_dim: int = 256):
        super().__init__()
        # the bias would be removed by the batch norm mean anyway
        self.fc = nn.Linear(in_dim, embed_dim, bias=False)
        self.bn = nn.BatchNorm1d(embed_dim, momentum=BN_MOMENTUM)

    def forward(self, pooled: torch.Tensor) -> torch.Tensor:
        return self.bn(self.fc(pooled))


def cos_logits(e: torch.Tensor, weight: torch.Tensor) -> torch.Tensor:
    """Cosine between each embedding row and each class weight row.

    Zero-norm inputs raise instead of being clamped away.
    """
    en = e.norm(dim=-1, keepdim=True)
    wn = weight.norm(dim=-1, keepdim=True)
    if bool((en == 0).any()) or bool((wn == 0).any()):
        raise NumericalError("cos_logits: zero-norm embedding or class weight")
    return (e / en) @ (weight / wn).t()


class ClassifierHead(nn.Module):
    def __init__(self, embed_dim: int, n_classes: int):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(n_classes, embed_dim))
        nn.init.xavier_uniform_(self.weight)

    @property
    def n_classes(self) -> int:
        return self.weight.shape[0]

    def forward(self, e: torch.Tensor) -> torch.Tensor:
        return cos_logits(e, self.weight)


class DinoHead(nn.Module):
    """MLP (GELU) to an l2-normalised bottleneck, then a bias-free linear to K outputs."""

    def __init__(
        self,
        embed_dim: int,
        hidden: int = 512,
        bottleneck: int = 128,
        out_dim: int = 1024,
        last_layer_norm: bool = False,
    ):
        super().__init__()
        if out_dim < 2:
            raise ValueError("DINO head needs at least 2 outputs")
        self.mlp = nn.Sequential(
            nn.Linear(embed_dim, hidden),
            nn.GELU(),
            nn.Linear(hidden, hidden),
            nn.GELU(),
            nn.Linear(hidden, bottleneck),
        )
        self.last = nn.Linear(bottleneck, out_dim, bias=False)
        self.last_layer_norm = last_layer_norm

    def bottleneck(self, e: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.mlp(e), dim=-1, eps=1e-12)

    def forward(self, e: torch.Tensor) -> torch.Tensor:
        z = self.bottleneck(e)
        w = self.last.weight
        if self.last_layer_norm:
            w = F.normalize(w, dim=-1)
        return z @ w.t()
