"""AFMS-Res2MP residual blocks and the three-block aggregation backbone."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .numerics import ConfigError, max_pool1d

BN_MOMENTUM = 0.1  # torch convention: running = 0.9 * running + 0.1 * batch


@dataclass
class BlockConfig:
    channels: int = 1024
    kernel: int = 3
    dilation: int = 1
    pool: int = 1
    scale: int = 8
    afms_ratio: int = 8

    def __post_init__(self):
        if self.channels % self.scale:
            raise ConfigError(f"channels ({self.channels}) must be divisible by scale ({self.scale})")
        if self.pool not in (1, 3, 5):
            raise ConfigError(f"pool must be one of 1, 3, 5, got {self.pool}")
        if self.dilation < 1:
            raise ConfigError("dilation must be >= 1")
        if self.kernel % 2 == 0:
            raise ConfigError("block kernel must be odd for same padding")


class Res2Conv(nn.Module):
    """Hierarchical split convolution: ``y1 = x1``, ``yi = K_i(x_i + y_{i-1})``.

    Each ``K_i`` is a same-padded dilated conv, ReLU and batch norm.  With
    ``scale == 1`` the single group is convolved directly.
    """

    def __init__(self, channels: int, kernel: int = 3, dilation: int = 1, scale: int = 8):
        super().__init__()
        if channels % scale:
            raise ConfigError(f"channels ({channels}) must be divisible by scale ({scale})")
        self.scale = scale
        self.width = channels // scale
        n_convs = 1 if scale == 1 else scale - 1
        pad = dilation * (kernel - 1) // 2
        self.convs = nn.ModuleList(
            nn.Conv1d(self.width, self.width, kernel, dilation=dilation, padding=pad) for _ in range(n_convs)
        )
        self.bns = nn.ModuleList(nn.BatchNorm1d(self.width, momentum=BN_MOMENTUM) for _ in range(n_convs))

    def _k(self, i: int, x: torch.Tensor) -> torch.Tensor:
        return self.bns[i](torch.relu(self.convs[i](x)))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.scale == 1:
            return self._k(0, x)
        groups = torch.split(x, self.width, dim=1)
        ys = [groups[0]]
        for i in range(1, self.scale):
            ys.append(self._k(i - 1, groups[i] + ys[-1]))
        return torch.cat(ys, dim=1)


class AFMS(nn.Module):
    """Alpha feature-map scaling: ``(x + alpha) * sigmoid(W2 relu(W1 mean_t(x)))``."""

    def __init__(self, channels: int, ratio: int = 8):
        super().__init__()
        hidden = max(channels // ratio, 1)
        self.alpha = nn.Parameter(torch.ones(channels, 1))
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)

    def gate(self, x: torch.Tensor) -> torch.Tensor:
        g = x.mean(dim=-1)
        return torch.sigmoid(self.fc2(torch.relu(self.fc1(g)))).unsqueeze(-1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return (x + self.alpha) * self.gate(x)


class AfmsRes2MPBlock(nn.Module):
    """conv1x1-ReLU-BN, Res2 conv, conv1x1-ReLU-BN, optional max pool, AFMS; plus pooled skip."""

    def __init__(self, in_channels: int, cfg: BlockConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.channels
        self.project = nn.Conv1d(in_channels, c, 1) if in_channels != c else None
        self.conv1 = nn.Conv1d(c, c, 1)
        self.bn1 = nn.BatchNorm1d(c, momentum=BN_MOMENTUM)
        self.res2 = Res2Conv(c, cfg.kernel, cfg.dilation, cfg.scale)
        self.conv3 = nn.Conv1d(c, c, 1)
        self.bn3 = nn.BatchNorm1d(c, momentum=BN_MOMENTUM)
        self.afms = AFMS(c, cfg.afms_ratio)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.project is not None:
            x = self.project(x)
        y = self.bn1(torch.relu(self.conv1(x)))
        y = self.res2(y)
        y = self.bn3(torch.relu(self.conv3(y)))
        y = self.afms(max_pool1d(y, self.cfg.pool))
        return y + max_pool1d(x, self.cfg.pool)


@dataclass
class BackboneConfig:
    in_channels: int = 256
    channels: int = 1024
    out_channels: int = 1536
    kernel: int = 3
    dilations: tuple[int, int, int] = (2, 3, 4)
    pools: tuple[int, int] = (5, 3)
    scale: int = 8
    afms_ratio: int = 8

    def block(self, i: int) -> BlockConfig:
        pool = self.pools[i] if i < 2 else 1
        return BlockConfig(self.channels, self.kernel, self.dilations[i], pool, self.scale, self.afms_ratio)

    @property
    def reduction(self) -> int:
        return self.pools[0] * self.pools[1]


class Backbone(nn.Module):
    """x1 = B1(F0); x2 = B2(x1); x3 = B3(pool(x1) + x2); out = BN(ReLU(conv1x1([pool(x1), x2, x3])))."""

    def __init__(self, cfg: BackboneConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or BackboneConfig()
        self.block1 = AfmsRes2MPBlock(cfg.in_channels, cfg.block(0))
        self.block2 = AfmsRes2MPBlock(cfg.channels, cfg.block(1))
        self.block3 = AfmsRes2MPBlock(cfg.channels, cfg.block(2))
        self.aggregate = nn.Conv1d(3 * cfg.channels, cfg.out_channels, 1)
        self.bn = nn.BatchNorm1d(cfg.out_channels, momentum=BN_MOMENTUM)

    def forward(self, feats: torch.Tensor, return_blocks: bool = False):
        x1 = self.block1(feats)
        x2 = self.block2(x1)
        x1p = max_pool1d(x1, self.cfg.pools[1])
        x3 = self.block3(x1p + x2)
        out = self.bn(torch.relu(self.aggregate(torch.cat([x1p, x2, x3], dim=1))))
        if return_blocks:
            return out, (x1, x2, x3)
        return out
