"""Tensor primitives, Adam, the SGDR schedule and a finite-difference gradient oracle.

Tensors are ``torch.Tensor``; autograd supplies reverse-mode gradients.  Everything
here accepts either ``(C, T)`` feature maps or ``(B, C, T)`` batches.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import torch
import torch.nn.functional as F
from torch.overrides import TorchFunctionMode


class ContractError(ValueError):
    """Raised when an operation's shape or value precondition is violated."""


class ConfigError(ValueError):
    pass


class NumericalError(ArithmeticError):
    """Non-finite values met where the math requires finite ones."""


def conv_out_len(length: int, kernel: int, stride: int = 1, dilation: int = 1, padding: int = 0) -> int:
    return (length + 2 * padding - (kernel - 1) * dilation - 1) // stride + 1


def conv1d(
    x: torch.Tensor,
    weight: torch.Tensor,
    stride: int = 1,
    dilation: int = 1,
    padding: int = 0,
    bias: torch.Tensor | None = None,
) -> torch.Tensor:
    """Valid cross-correlation (no kernel flip); zero padding only when asked for."""
    unbatched = x.dim() == 2
    if unbatched:
        x = x.unsqueeze(0)
    if weight.dim() != 3 or x.shape[1] != weight.shape[1]:
        raise ContractError(
            f"conv1d: input has {x.shape[1]} channels, weight expects shape (C_out, {x.shape[1]}, k), got {tuple(weight.shape)}"
        )
    if stride < 1 or dilation < 1:
        raise ContractError("conv1d: stride and dilation must be >= 1")
    receptive = (weight.shape[2] - 1) * dilation + 1
    if x.shape[2] + 2 * padding < receptive:
        raise ContractError(f"conv1d: input length {x.shape[2]} shorter than receptive field {receptive}")
    y = F.conv1d(x, weight, bias, stride=stride, padding=padding, dilation=dilation)
    return y[0] if unbatched else y


def max_pool1d(x: torch.Tensor, p: int) -> torch.Tensor:
    """Non-overlapping max pooling; trailing frames that do not fill a window are dropped.

    Backward routes each window's gradient to its first maximal element.
    """
    if p < 1:
        raise ContractError("max_pool1d: pool size must be >= 1")
    if x.shape[-1] < p:
        raise ContractError(f"max_pool1d: {x.shape[-1]} frames cannot fill a window of {p}")
    if p == 1:
        return x
    return F.max_pool1d(x, p, p)


@dataclass(frozen=True)
class SgdrSchedule:
    lr_max: float
    lr_min: float
    period: int

    def __post_init__(self):
        if self.period <= 0:
            raise ConfigError(f"SGDR period must be positive, got {self.period}")
        if self.lr_min > self.lr_max:
            raise ConfigError("SGDR lr_min must not exceed lr_max")

    def __call__(self, step: int) -> float:
        return sgdr_lr(step, self)


def sgdr_lr(step: int, sched: SgdrSchedule) -> float:
    """Cosine annealing with warm restarts every ``sched.period`` steps."""
    if step < 0:
        raise ContractError("step must be non-negative")
    phase = (step % sched.period) / sched.period
    return sched.lr_min + 0.5 * (sched.lr_max - sched.lr_min) * (1.0 + math.cos(math.pi * phase))


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    exp_avg: list[torch.Tensor] = field(default_factory=list)
    exp_avg_sq: list[torch.Tensor] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[torch.Tensor], **kwargs) -> "AdamState":
        state = cls(**kwargs)
        state.exp_avg = [torch.zeros_like(p) for p in params]
        state.exp_avg_sq = [torch.zeros_like(p) for p in params]
        return state


@torch.no_grad()
def adam_step(
    params: Sequence[torch.Tensor],
    grads: Sequence[torch.Tensor | None],
    state: AdamState,
    lr: float,
    weight_decay: float = 0.0,
) -> AdamState:
    """One in-place Adam update with bias correction and decoupled weight decay.

    ``theta <- theta - lr * m_hat / (sqrt(v_hat) + eps) - lr * weight_decay * theta``.
    A missing gradient is treated as zero.
    """
    if not state.exp_avg:
        state.exp_avg = [torch.zeros_like(p) for p in params]
        state.exp_avg_sq = [torch.zeros_like(p) for p in params]
    if len(grads) != len(params) or len(state.exp_avg) != len(params):
        raise ContractError("adam_step: params, grads and state must have equal length")
    for i, g in enumerate(grads):
        if g is None:
            continue
        if g.shape != params[i].shape:
            raise ContractError(f"adam_step: grad {i} has shape {tuple(g.shape)}, param {tuple(params[i].shape)}")
        if not torch.isfinite(g).all():
            bad = int((~torch.isfinite(g)).sum())
            raise NumericalError(f"adam_step: gradient {i} (shape {tuple(g.shape)}) has {bad} non-finite entries")

    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.exp_avg, state.exp_avg_sq):
        if g is None:
            g = torch.zeros_like(p)
        m.mul_(b1).add_(g, alpha=1.0 - b1)
        v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
        denom = (v / c2).sqrt_().add_(state.eps)
        update = (m / c1) / denom
        if weight_decay:
            update = update + weight_decay * p
        p.sub_(lr * update)
    return state


class KinkRecorder(TorchFunctionMode):
    """Records which side of every ReLU, abs, clamp and max-pool kink a forward pass took."""

    _SIGN = {torch.relu, F.relu, torch.abs, torch.Tensor.abs}
    _CLAMP = {torch.clamp, torch.Tensor.clamp, torch.clamp_min, torch.Tensor.clamp_min}

    def __init__(self):
        super().__init__()
        self.trace: list[torch.Tensor] = []

    def __torch_function__(self, func, types, args=(), kwargs=None):
        kwargs = kwargs or {}
        if func in self._SIGN:
            self.trace.append(args[0].detach() > 0)
        elif func in self._CLAMP:
            x = args[0].detach()
            lo = kwargs.get("min", args[1] if len(args) > 1 else None)
            hi = kwargs.get("max", args[2] if len(args) > 2 else None)
            if lo is not None:
                self.trace.append(x < lo)
            if hi is not None:
                self.trace.append(x > hi)
        elif func is torch.max_pool1d or func is F.max_pool1d:
            k = kwargs.get("kernel_size", args[1] if len(args) > 1 else None)
            stride = kwargs.get("stride", args[2] if len(args) > 2 else None) or k
            _, idx = F.max_pool1d_with_indices(args[0].detach(), k, stride)
            self.trace.append(idx)
        return func(*args, **kwargs)

    def same_as(self, other: "KinkRecorder") -> bool:
        return len(self.trace) == len(other.trace) and all(
            a.shape == b.shape and torch.equal(a, b) for a, b in zip(self.trace, other.trace)
        )


@dataclass
class GradCheckReport:
    max_error: float
    checked: int
    skipped: int
    within_rounding: int = 0


def _traced(f: Callable[[], torch.Tensor]) -> tuple[float, KinkRecorder]:
    rec = KinkRecorder()
    with rec:
        value = f().item()
    return value, rec


def grad_check_report(
    f: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    h: float = 1e-5,
    max_per_tensor: int | None = None,
    generator: torch.Generator | None = None,
    skip_kinks: bool = False,
    skip_noise: bool = False,
) -> GradCheckReport:
    """Like :func:`grad_check`, also counting checked and skipped coordinates.

    With ``skip_noise``, a coordinate whose discrepancy ``|analytic - central|``
    is below the central-difference rounding level ``16 * eps * max(|f|, 1) / h``
    counts as agreeing (``within_rounding``) without entering the relative
    error: such a gap is explained by floating point alone, and for small
    gradients it would otherwise dominate.
    """
    params = list(params)
    for p in params:
        p.grad = None
    if skip_kinks:
        with KinkRecorder() as base:
            loss = f()
    else:
        loss = f()
    analytic = torch.autograd.grad(loss, params, allow_unused=True)
    noise = 16 * torch.finfo(loss.dtype).eps * max(abs(loss.item()), 1.0) / h
    worst, checked, skipped, rounding = 0.0, 0, 0, 0
    with torch.no_grad():
        for p, g in zip(params, analytic):
            g = torch.zeros_like(p) if g is None else g
            flat = p.view(-1)
            gflat = g.reshape(-1)
            n = flat.numel()
            if max_per_tensor is None or n <= max_per_tensor:
                idx = range(n)
            else:
                idx = torch.randperm(n, generator=generator)[:max_per_tensor].tolist()
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + h
                up, rec_up = _traced(f) if skip_kinks else (f().item(), None)
                flat[i] = orig - h
                down, rec_down = _traced(f) if skip_kinks else (f().item(), None)
                flat[i] = orig
                if skip_kinks and not (base.same_as(rec_up) and base.same_as(rec_down)):
                    skipped += 1
                    continue
                central = (up - down) / (2 * h)
                a = gflat[i].item()
                checked += 1
                if skip_noise and abs(a - central) < noise:
                    rounding += 1
                    continue
                err = abs(a - central) / max(abs(a), abs(central), 1e-8)
                worst = max(worst, err)
    return GradCheckReport(worst, checked, skipped, rounding)


def grad_check(
    f: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    h: float = 1e-5,
    max_per_tensor: int | None = None,
    generator: torch.Generator | None = None,
    skip_kinks: bool = False,
    skip_noise: bool = False,
) -> float:
    """Largest relative error between autograd and central differences.

    ``f`` is a closure returning a scalar that reads ``params`` (leaf tensors
    with ``requires_grad``).  Coordinates are perturbed in place.  When
    ``max_per_tensor`` is set, that many coordinates per tensor are drawn at
    random instead of checking every entry.  With ``skip_kinks``, coordinates
    whose +h or -h evaluation lands on a different side of a ReLU, abs, clamp
    or max-pool kink than the unperturbed pass are left out, since central
    differences are meaningless across a non-smooth point.  ``skip_noise`` is
    described in :func:`grad_check_report`.
    """
    return grad_check_report(f, params, h, max_per_tensor, generator, skip_kinks, skip_noise).max_error
