"""Learnable analytic filterbank with log compression and per-filter mean normalisation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .numerics import ContractError, conv_out_len


@dataclass
class FrontendConfig:
    n_filters: int = 256
    kernel_len: int = 251
    stride: int = 48
    apply_log: bool = True
    apply_mean_norm: bool = True
    eps: float = 1e-6
    pre_emphasis: float = 0.97
    sample_rate: int = 16000

    def __post_init__(self):
        if self.kernel_len % 2 == 0:
            raise ContractError("kernel_len must be odd")
        if self.stride < 1 or self.n_filters < 1:
            raise ContractError("stride and n_filters must be >= 1")
        if self.eps <= 0:
            raise ContractError("log eps must be positive")

    def frames(self, n_samples: int) -> int:
        return conv_out_len(n_samples, self.kernel_len, self.stride)


def hilbert_pair(h: torch.Tensor) -> torch.Tensor:
    """Imaginary part of the analytic extension of each real kernel (last axis).

    Negative-frequency bins are zeroed and positive ones doubled; DC (and
    Nyquist, for even lengths) pass unchanged.
    """
    n = h.shape[-1]
    mask = torch.zeros(n, dtype=h.dtype, device=h.device)
    mask[0] = 1.0
    if n % 2 == 0:
        mask[1 : n // 2] = 2.0
        mask[n // 2] = 1.0
    else:
        mask[1 : (n + 1) // 2] = 2.0
    spec = torch.fft.fft(h, dim=-1)
    return torch.fft.ifft(spec * mask, dim=-1).imag


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_sinc_kernels(n_filters: int, kernel_len: int, sample_rate: int = 16000) -> np.ndarray:
    """Hamming-windowed sinc band-pass kernels with mel-spaced bands over 0..Nyquist."""
    edges = _mel_to_hz(np.linspace(0.0, _hz_to_mel(sample_rate / 2), n_filters + 1)) / sample_rate
    t = np.arange(kernel_len) - (kernel_len - 1) / 2
    window = np.hamming(kernel_len)
    kernels = np.empty((n_filters, kernel_len))
    for i, (lo, hi) in enumerate(zip(edges[:-1], edges[1:])):
        band = 2 * hi * np.sinc(2 * hi * t) - 2 * lo * np.sinc(2 * lo * t)
        kernels[i] = band * window
    return kernels


class AnalyticFilterbank(nn.Module):
    """Complex filterbank whose imaginary parts are Hilbert pairs of the learned real kernels.

    Output is the modulus ``sqrt(re^2 + im^2)``, shape ``(B, n_filters, frames)``.
    """

    def __init__(self, n_filters: int = 256, kernel_len: int = 251, stride: int = 48, sample_rate: int = 16000):
        super().__init__()
        if kernel_len % 2 == 0:
            raise ContractError("kernel_len must be odd")
        self.n_filters = n_filters
        self.kernel_len = kernel_len
        self.stride = stride
        init = mel_sinc_kernels(n_filters, kernel_len, sample_rate)
        self.real_kernels = nn.Parameter(torch.tensor(init, dtype=torch.get_default_dtype()))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() == 1:
            x = x.unsqueeze(0)
        if x.shape[-1] < self.kernel_len:
            raise ContractError(f"waveform of {x.shape[-1]} samples is shorter than the {self.kernel_len}-tap kernel")
        h = self.real_kernels
        weight = torch.cat([h, hilbert_pair(h)], dim=0).unsqueeze(1)
        y = nn.functional.conv1d(x.unsqueeze(1), weight, stride=self.stride)
        re, im = y[:, : self.n_filters], y[:, self.n_filters :]
        return torch.sqrt(re * re + im * im + 1e-12)


def log_compress(feats: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    if bool((feats < 0).any()):
        raise ContractError("log_compress expects a non-negative feature map")
    return torch.log(feats + eps)


def mean_norm(feats: torch.Tensor) -> torch.Tensor:
    return feats - feats.mean(dim=-1, keepdim=True)


def pre_emphasis(x: torch.Tensor, alpha: float = 0.97) -> torch.Tensor:
    return torch.cat([x[..., :1], x[..., 1:] - alpha * x[..., :-1]], dim=-1)


def instance_norm(x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    mu = x.mean(dim=-1, keepdim=True)
    var = x.var(dim=-1, unbiased=False, keepdim=True)
    return (x - mu) / torch.sqrt(var + eps)


class Frontend(nn.Module):
    """Pre-emphasis, waveform instance norm, analytic filterbank, then optional log and mean norm."""

    def __init__(self, cfg: FrontendConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or FrontendConfig()
        self.filterbank = AnalyticFilterbank(cfg.n_filters, cfg.kernel_len, cfg.stride, cfg.sample_rate)

    def forward(self, wave: torch.Tensor) -> torch.Tensor:
        x = instance_norm(pre_emphasis(wave, self.cfg.pre_emphasis))
        feats = self.filterbank(x)
        if self.cfg.apply_log:
            feats = log_compress(feats, self.cfg.eps)
        if self.cfg.apply_mean_norm:
            feats = mean_norm(feats)
        return feats
