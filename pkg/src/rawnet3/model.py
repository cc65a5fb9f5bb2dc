"""RawNet3 speaker encoder: frontend, backbone, attentive pooling and embedding."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .backbone import Backbone, BackboneConfig
from .frontend import Frontend, FrontendConfig
from .head import AttentiveStatsPool, DinoHead, Embedding


@dataclass
class ModelConfig:
    channels: int = 1024
    out_channels: int = 1536
    kernel: int = 3
    dilations: tuple[int, int, int] = (2, 3, 4)
    pools: tuple[int, int] = (5, 3)
    scale: int = 8
    afms_ratio: int = 8
    attn_bottleneck: int = 128
    embed_dim: int = 256


@dataclass
class DinoHeadConfig:
    hidden: int = 512
    bottleneck: int = 128
    out_dim: int = 1024
    last_layer_norm: bool = False


class RawNet3(nn.Module):
    def __init__(self, frontend: FrontendConfig | None = None, model: ModelConfig | None = None):
        super().__init__()
        frontend = frontend or FrontendConfig()
        model = model or ModelConfig()
        self.frontend_cfg = frontend
        self.model_cfg = model
        self.frontend = Frontend(frontend)
        self.backbone = Backbone(
            BackboneConfig(
                in_channels=frontend.n_filters,
                channels=model.channels,
                out_channels=model.out_channels,
                kernel=model.kernel,
                dilations=tuple(model.dilations),
                pools=tuple(model.pools),
                scale=model.scale,
                afms_ratio=model.afms_ratio,
            )
        )
        self.pool = AttentiveStatsPool(model.out_channels, model.attn_bottleneck)
        self.embedding = Embedding(2 * model.out_channels, model.embed_dim)

    @property
    def embed_dim(self) -> int:
        return self.model_cfg.embed_dim

    def min_samples(self) -> int:
        """Shortest input that leaves at least one frame after both backbone pools."""
        f = self.frontend_cfg
        frames = self.model_cfg.pools[0] * self.model_cfg.pools[1]
        return f.kernel_len + (frames - 1) * f.stride

    def forward(self, wave: torch.Tensor) -> torch.Tensor:
        if wave.dim() == 1:
            wave = wave.unsqueeze(0)
        feats = self.frontend(wave)
        return self.embedding(self.pool(self.backbone(feats)))


class DinoNetwork(nn.Module):
    """Encoder plus projection head; one instance each for student and teacher."""

    def __init__(self, encoder: RawNet3, head: DinoHead):
        super().__init__()
        self.encoder = encoder
        self.head = head

    def forward(self, wave: torch.Tensor) -> torch.Tensor:
        return self.head(self.encoder(wave))


def build_dino_network(frontend: FrontendConfig, model: ModelConfig, head: DinoHeadConfig) -> DinoNetwork:
    enc = RawNet3(frontend, model)
    return DinoNetwork(
        enc, DinoHead(model.embed_dim, head.hidden, head.bottleneck, head.out_dim, head.last_layer_norm)
    )
